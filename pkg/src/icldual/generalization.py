"""Generalization-bound surrogate and a Monte Carlo estimate of the real gap.

The dual model is trained on the linear representation loss

    L(W) = -E[(W_V x)^T W phi(W_K x)] = -<W, G>,   G = E[(W_V x) phi(W_K x)^T],

over the ball ||W||_F <= w.  Because the loss is linear the minimizer is
``w G / ||G||_F``, both for the empirical and the population version of G, so
the generalization gap has a closed form once G is estimated.

All O(.) constants of the asymptotic bound are set to 1; the value returned by
:func:`bound_surrogate` is a *surrogate*, not a certified bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionWeights
from .errors import DegenerateError, ValidationError
from .features import FeatureMapSpec, apply_feature_map
from .numerics import SeededRng, as_matrix


@dataclass(frozen=True)
class BoundInputs:
    w: float
    rho: float
    d_o: int
    N: int
    delta: float = 0.05
    r: float | None = None  # negative-sample ratio K/N; selects the negative-sample variant

    def __post_init__(self):
        if not (self.w > 0 and self.rho > 0 and self.d_o >= 1 and self.N >= 1):
            raise ValidationError("w, rho, d_o and N must be positive")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")
        if self.r is not None and not self.r > 0:
            raise ValidationError("negative-sample ratio r must be positive")


def gram_trace(S, W_K, spec: FeatureMapSpec):
    """Kernel matrix K_S[i, j] = <phi(W_K x_i), phi(W_K x_j)> and its trace."""
    S = as_matrix(S, "demonstrations")
    Phi = apply_feature_map(spec, as_matrix(W_K, "W_K") @ S)
    K = Phi.T @ Phi
    return K, float(np.einsum("ij,ij->", Phi, Phi))


def bound_surrogate(b: BoundInputs, trace: float) -> float:
    """w rho d_o sqrt(trace) / N + sqrt(log(1/delta) / N)

    or, with ``b.r`` set, w rho d_o sqrt(trace (5/N^2 + 1/(r N^3))) + sqrt(log(1/delta) / N).
    """
    if trace < 0:
        raise ValidationError("trace must be nonnegative")
    conf = np.sqrt(np.log(1.0 / b.delta) / b.N)
    scale = b.w * b.rho * b.d_o
    if b.r is None:
        return float(scale * np.sqrt(trace) / b.N + conf)
    return float(scale * np.sqrt(trace * (5.0 / b.N**2 + 1.0 / (b.r * b.N**3))) + conf)


def representation_moment(X, w: AttentionWeights, spec: FeatureMapSpec) -> np.ndarray:
    """(1/n) sum_i (W_V x_i) phi(W_K x_i)^T over the columns of X."""
    X = as_matrix(X, "tokens")
    return (w.W_V @ X) @ apply_feature_map(spec, w.W_K @ X).T / X.shape[1]


def minimizer(G, w: float) -> np.ndarray:
    """argmin of -<W, G> over ||W||_F <= w."""
    n = np.linalg.norm(G)
    if n == 0:
        raise DegenerateError("empirical moment is zero; the minimizer is not unique")
    return w * G / n


def gap_from_moments(G_hat, G_pop, w: float) -> float:
    """L(W_hat) - L(W*) with L(W) = -<W, G_pop>."""
    return float(w * np.linalg.norm(G_pop) - np.sum(minimizer(G_hat, w) * G_pop))


def estimate_bound_inputs(X, w: AttentionWeights, spec: FeatureMapSpec) -> tuple[float, float]:
    """(w, rho) read off data: rho = max ||W_V x_i||, w = ||W_hat - W_0||_F of
    the dual model whose query is the last column of X."""
    X = as_matrix(X, "tokens")
    rho = float(np.linalg.norm(w.W_V @ X, axis=0).max())
    Phi = apply_feature_map(spec, w.W_K @ X)
    D = float((Phi.T @ apply_feature_map(spec, w.W_Q @ X[:, -1])).sum())
    delta = (w.W_V @ X[:, :-1]) @ Phi[:, :-1].T / D
    return float(np.linalg.norm(delta)), rho


@dataclass
class GapRow:
    n: int
    seed: int
    trace: float
    bound: float
    gap: float


def empirical_gap(task, w: float, N_list: Sequence[int], eval_samples: int, seeds: Sequence[int],
                  d_r: int = 64, delta: float = 0.05, rho: float | None = None) -> list[GapRow]:
    """Per (N, seed): Gram trace, bound surrogate and Monte Carlo gap.

    Per seed one task, one random attention layer and one PRF map are drawn.
    Training sets are nested (the first N tokens of one stream) so that the
    trace grows with N; the population moment is estimated from
    ``eval_samples`` fresh tokens shared by every N of that seed.
    """
    from .harness import TaskSpec, sample_tokens  # circular at import time

    if not w > 0:
        raise ValidationError("w must be positive")
    if not N_list:
        raise ValidationError("empty N grid")
    rows = []
    n_max = max(N_list)
    for seed in seeds:
        base = SeededRng(seed)
        t = TaskSpec.random(task.kind, task.d_t, task.d_s, base.child(0)) if task.W is None else task
        d = t.d_t + t.d_s
        att = AttentionWeights.random(d, d, base.child(1))
        spec = FeatureMapSpec.positive_random(d, d_r, base.child(2))
        train = sample_tokens(t, n_max, base.child(3))
        G_pop = representation_moment(sample_tokens(t, eval_samples, base.child(4)), att, spec)
        # one rho per seed, from the largest training set, so N is the only thing varying
        r = rho if rho is not None else float(np.linalg.norm(att.W_V @ train, axis=0).max())
        for N in N_list:
            S = train[:, :N]
            _, tr = gram_trace(S, att.W_K, spec)
            bound = bound_surrogate(BoundInputs(w, r, d, N, delta), tr)
            gap = gap_from_moments(representation_moment(S, att, spec), G_pop, w)
            rows.append(GapRow(N, seed, tr, bound, gap))
    return rows
