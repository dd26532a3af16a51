"""Softmax and kernelized attention, the FFN sublayer, PrefixLM stacks and the
modified attention variants (regularized, augmented, negative, ridge).

Every single-query operation returns the output for one query token ``x_q``
attending over a context ``X`` (``d_i x n``, tokens as columns).  Scores are
computed either with the exact softmax (``spec=None``) or with a feature map
(:class:`~icldual.features.FeatureMapSpec`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np
import scipy.linalg

from .errors import DegenerateError, SingularSystemError, ValidationError
from .features import FeatureMapSpec, apply_feature_map, kernel_scores, normalize_columns
from .numerics import ACTIVATIONS, SeededRng, as_matrix, as_vector, column_softmax


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def __post_init__(self):
        shapes = {self.W_Q.shape, self.W_K.shape, self.W_V.shape}
        if len(shapes) != 1 or self.W_Q.ndim != 2:
            raise ValidationError(f"W_Q, W_K, W_V must share one d_o x d_i shape, got {shapes}")
        for name in ("W_Q", "W_K", "W_V"):
            as_matrix(getattr(self, name), name)

    @property
    def d_o(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_i(self) -> int:
        return self.W_Q.shape[1]

    @classmethod
    def random(cls, d_i: int, d_o: int, rng: SeededRng, scale: float | None = None) -> "AttentionWeights":
        """i.i.d. normal entries, standard deviation ``1/sqrt(d_i)`` by default."""
        g = rng.generator()
        s = 1.0 / np.sqrt(d_i) if scale is None else scale
        return cls(*(s * g.standard_normal((d_o, d_i)) for _ in range(3)))

    def temperature_folded(self) -> "AttentionWeights":
        """Copy with W_Q and W_K scaled by d_o**-0.25, so unscaled kernel
        attention with these weights equals sqrt(d_o)-tempered attention."""
        s = self.d_o ** -0.25
        return AttentionWeights(s * self.W_Q, s * self.W_K, self.W_V.copy())


@dataclass(frozen=True, eq=False)
class FfnWeights:
    W_1: np.ndarray  # d_h x d_o
    b_1: np.ndarray  # d_h
    W_2: np.ndarray  # d_o x d_h
    b_2: np.ndarray  # d_o

    def __post_init__(self):
        d_h, d_o = self.W_1.shape
        if self.W_2.shape != (d_o, d_h) or self.b_1.shape != (d_h,) or self.b_2.shape != (d_o,):
            raise ValidationError("inconsistent FFN weight shapes")

    @property
    def d_h(self) -> int:
        return self.W_1.shape[0]

    @property
    def d_o(self) -> int:
        return self.W_1.shape[1]

    @classmethod
    def random(cls, d_o: int, d_h: int, rng: SeededRng, bias_shift: float = 0.0) -> "FfnWeights":
        g = rng.generator()
        return cls(
            g.standard_normal((d_h, d_o)),
            g.standard_normal(d_h) + bias_shift,
            g.standard_normal((d_o, d_h)),
            g.standard_normal(d_o),
        )


@dataclass(frozen=True)
class ContextLayout:
    """How a query sees its context: ``[X_D, X_T]`` plus, optionally, itself."""

    N: int
    T: int = 0
    include_query_self: bool = True

    def __post_init__(self):
        if self.N < 1 or self.T < 0:
            raise ValidationError("need N >= 1 demonstrations and T >= 0 prior queries")


def assemble_context(X_D, X_T, x_q, include_query_self: bool = True):
    """Return ``(X, n_demo)`` with ``X = [X_D, X_T, (x_q)]``."""
    X_D = as_matrix(X_D, "X_D")
    x_q = as_vector(x_q, "x_q")
    blocks = [X_D]
    if X_T is not None and np.size(X_T) > 0:
        X_T = as_matrix(X_T, "X_T")
        blocks.append(X_T)
    if include_query_self:
        blocks.append(x_q[:, None])
    X = np.concatenate(blocks, axis=1)
    if X.shape[0] != x_q.size:
        raise ValidationError("token dimensions disagree")
    return X, X_D.shape[1]


# ---------------------------------------------------------------------------
# augmentation functions g1 / g2
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    def apply(self, V, X=None):
        return V


@dataclass(frozen=True, eq=False)
class Mlp:
    """Column-wise ``act(W_L ... act(W_1 v))``; one or two layers."""

    activation: str
    weights: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.activation not in ("gelu", "elu"):
            raise ValidationError(f"unsupported activation {self.activation!r}")
        if len(self.weights) not in (1, 2):
            raise ValidationError("Mlp depth must be 1 or 2")
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValidationError("Mlp layer widths do not chain")

    @classmethod
    def init(cls, d_o: int, depth: int, activation: str, rng: SeededRng, hidden: int | None = None) -> "Mlp":
        g = rng.generator()
        widths = [d_o] + ([hidden or 2 * d_o] if depth == 2 else []) + [d_o]
        ws = tuple(g.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(widths, widths[1:]))
        return cls(activation, ws)

    def apply(self, V, X=None):
        act = ACTIVATIONS[self.activation]
        for W in self.weights:
            V = act(W @ V)
        return V


@dataclass(frozen=True, eq=False)
class ParallelMlp:
    """``g(W x) = W x + c * W_2 act(W_1 x)``; the branch reads the raw token."""

    c: float
    W_1: np.ndarray  # hidden x d_i
    W_2: np.ndarray  # d_o x hidden
    activation: str = "gelu"

    @classmethod
    def init(cls, d_i: int, d_o: int, c: float, rng: SeededRng, hidden: int | None = None,
             activation: str = "gelu") -> "ParallelMlp":
        g = rng.generator()
        hidden = hidden or 2 * d_o
        return cls(c, g.standard_normal((hidden, d_i)) / np.sqrt(d_i),
                   g.standard_normal((d_o, hidden)) / np.sqrt(hidden), activation)

    def apply(self, V, X=None):
        if X is None:
            raise ValidationError("ParallelMlp needs the raw tokens")
        return V + self.c * (self.W_2 @ ACTIVATIONS[self.activation](self.W_1 @ X))


AugmentSpec = Union[Identity, Mlp, ParallelMlp]


def apply_augment(g: AugmentSpec, V, X) -> np.ndarray:
    out = g.apply(V, X)
    if out.shape != V.shape:
        raise ValidationError(f"augmentation output shape {out.shape} != {V.shape}")
    return out


@dataclass(frozen=True)
class ModificationConfig:
    alpha: float = 0.0
    beta: float = 0.0
    k: int = 0
    g1: AugmentSpec = field(default_factory=Identity)
    g2: AugmentSpec = field(default_factory=Identity)

    @property
    def is_neutral(self) -> bool:
        return (self.alpha == 0 and self.beta == 0 and isinstance(self.g1, Identity)
                and isinstance(self.g2, Identity))

    def with_(self, **kw) -> "ModificationConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# core attention
# ---------------------------------------------------------------------------


def attention_scores(K, Q, spec: FeatureMapSpec | None = None, temperature_scaled: bool = True):
    """Column-normalized attention weights of keys ``K`` for queries ``Q``."""
    K = as_matrix(K, "keys")
    Q = as_matrix(Q, "queries")
    d_o = K.shape[0]
    if spec is None:
        tau = np.sqrt(d_o) if temperature_scaled else 1.0
        return column_softmax(K.T @ Q / tau)
    s = d_o ** -0.25 if temperature_scaled else 1.0
    return normalize_columns(kernel_scores(spec, s * K, s * Q))


def _check_tokens(X, x_q, w: AttentionWeights):
    X = as_matrix(X, "context")
    x_q = as_vector(x_q, "x_q")
    if X.shape[0] != w.d_i or x_q.size != w.d_i:
        raise ValidationError(f"tokens must have dimension d_i={w.d_i}")
    return X, x_q


def exact_attention_query(X, x_q, w: AttentionWeights, temperature_scaled: bool = True) -> np.ndarray:
    """h = W_V X softmax((W_K X)^T W_Q x_q / sqrt(d_o))."""
    X, x_q = _check_tokens(X, x_q, w)
    a = attention_scores(w.W_K @ X, w.W_Q @ x_q, None, temperature_scaled)
    return (w.W_V @ X @ a)[:, 0]


def kernel_attention_query(X, x_q, w: AttentionWeights, spec: FeatureMapSpec | None,
                           temperature_scaled: bool = False) -> np.ndarray:
    """h' = (1/D) sum_j W_V x_j <phi(W_K x_j), phi(W_Q x_q)>.

    ``spec=None`` evaluates the kernel exactly, which makes this equal to
    :func:`exact_attention_query` with ``temperature_scaled=False``.
    """
    X, x_q = _check_tokens(X, x_q, w)
    s = w.d_o ** -0.25 if temperature_scaled else 1.0
    scores = kernel_scores(spec, s * (w.W_K @ X), s * (w.W_Q @ x_q))[:, 0]
    D = scores.sum()
    assert D > 0, "positive feature maps give a positive normalizer"
    return (w.W_V @ X) @ scores / D


@dataclass
class FfnOutput:
    output: np.ndarray
    mask: np.ndarray  # diagonal of I_M as 0/1 floats
    preactivation: np.ndarray

    @property
    def I_M(self) -> np.ndarray:
        return np.diag(self.mask)


def ffn_forward(h, f: FfnWeights) -> FfnOutput:
    h = as_vector(h, "h")
    if h.size != f.d_o:
        raise ValidationError("FFN input dimension mismatch")
    pre = f.W_1 @ h + f.b_1
    mask = (pre >= 0).astype(np.float64)
    out = f.W_2 @ np.maximum(pre, 0.0) + f.b_2
    return FfnOutput(out, mask, pre)


def numerical_rank(M, rtol: float | None = None) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = (max(np.shape(M)) * np.finfo(float).eps if rtol is None else rtol) * s[0]
    return int(np.sum(s > tol))


@dataclass
class WfRankReport:
    W_F: np.ndarray
    b_F: np.ndarray
    upper_bound: int
    mask_rank: int


def wf_rank_report(f: FfnWeights, mask) -> WfRankReport:
    """W_F = W_2 I_M W_1, b_F = W_2 I_M b_1 + b_2, rank(W_F) <= min(d, d_h, rank I_M)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = np.diag(mask)
    if mask.shape != (f.d_h,):
        raise ValidationError("mask length must equal d_h")
    W2m = f.W_2 * mask  # scales columns: W_2 @ diag(mask)
    m = int(np.count_nonzero(mask))
    return WfRankReport(W2m @ f.W_1, W2m @ f.b_1 + f.b_2, min(f.d_o, f.d_h, m), m)


# ---------------------------------------------------------------------------
# PrefixLM stack
# ---------------------------------------------------------------------------


@dataclass
class StackOutput:
    H: list[np.ndarray]  # H[0] is the input, H[l] the output of layer l
    final: np.ndarray

    @property
    def demo_outputs(self) -> list[np.ndarray]:
        return [H[:, :-1] for H in self.H]


def _layer_specs(spec, L):
    if isinstance(spec, (list, tuple)):
        if len(spec) != L:
            raise ValidationError("need one feature map per layer")
        return list(spec)
    return [spec] * L


def prefixlm_stack_forward(X, layers: Sequence[AttentionWeights],
                           spec: FeatureMapSpec | Sequence[FeatureMapSpec] | None) -> StackOutput:
    """Demonstrations attend among themselves; the last (query) token attends
    to every token including itself.  Kernelized, no temperature."""
    if not layers:
        raise ValidationError("empty layer list")
    X = as_matrix(X, "X")
    if X.shape[1] < 2:
        raise ValidationError("need at least one demonstration and one query token")
    H = [X]
    for w, sp in zip(layers, _layer_specs(spec, len(layers))):
        prev = H[-1]
        HD = prev[:, :-1]
        K_D, Q_D = w.W_K @ HD, w.W_Q @ HD
        demo = (w.W_V @ HD) @ normalize_columns(kernel_scores(sp, K_D, Q_D))
        q = w.W_Q @ prev[:, -1:]
        query = (w.W_V @ prev) @ normalize_columns(kernel_scores(sp, w.W_K @ prev, q))
        H.append(np.concatenate([demo, query], axis=1))
    return StackOutput(H, H[-1][:, -1].copy())


# ---------------------------------------------------------------------------
# modified attention
# ---------------------------------------------------------------------------


def regularized_attention(X_D, X_T, x_q, w: AttentionWeights, alpha: float, include_query_self: bool = True,
                          spec: FeatureMapSpec | None = None, temperature_scaled: bool = True) -> np.ndarray:
    """h = W_V [X_D, (1 - alpha) X_T] softmax(...); the query's own column,
    when present, belongs to the X_T block."""
    if not np.isfinite(alpha):
        raise ValidationError("alpha must be finite")
    X, n_demo = assemble_context(X_D, X_T, x_q, include_query_self)
    X, x_q = _check_tokens(X, x_q, w)
    a = attention_scores(w.W_K @ X, w.W_Q @ x_q, spec, temperature_scaled)[:, 0]
    V = w.W_V @ X
    if alpha != 0:
        V = V.copy()
        V[:, n_demo:] *= 1.0 - alpha
    return V @ a


def regularized_self_attention(X, w: AttentionWeights, alpha: float, spec: FeatureMapSpec | None = None,
                               temperature_scaled: bool = True) -> np.ndarray:
    """H = W_V X Norm(A - alpha I), Norm rescaling every column to sum 1."""
    X = as_matrix(X, "X")
    A = attention_scores(w.W_K @ X, w.W_Q @ X, spec, temperature_scaled)
    return (w.W_V @ X) @ regularized_attention_block(A, alpha)


def regularized_attention_block(A, alpha: float) -> np.ndarray:
    if alpha == 0:
        return A
    B = A - alpha * np.eye(A.shape[0])
    s = B.sum(axis=0, keepdims=True)
    if np.any(np.abs(s) <= 1e-12):
        raise DegenerateError("a column of A - alpha I sums to zero; cannot renormalize")
    return B / s


def augmented_attention(X, x_q, w: AttentionWeights, g1: AugmentSpec, g2: AugmentSpec,
                        spec: FeatureMapSpec | None = None, temperature_scaled: bool = True) -> np.ndarray:
    """h = g1(W_V X) softmax(g2(W_K X)^T W_Q x_q / sqrt(d_o)), g applied per column."""
    X, x_q = _check_tokens(X, x_q, w)
    V = apply_augment(g1, w.W_V @ X, X)
    K = apply_augment(g2, w.W_K @ X, X)
    a = attention_scores(K, w.W_Q @ x_q, spec, temperature_scaled)
    return (V @ a)[:, 0]


def negative_sets(scores, k: int) -> list[np.ndarray]:
    """For each column i of ``scores`` (token i as query), the ``k`` rows
    j != i with the lowest score; ties go to the lowest index."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if not 0 <= k <= n - 1:
        raise ValidationError(f"k must lie in [0, {n - 1}], got {k}")
    out = []
    for i in range(scores.shape[1]):
        cand = np.array([j for j in range(n) if j != i])
        order = np.argsort(scores[cand, i], kind="stable")
        out.append(cand[order[:k]])
    return out


def negative_mixing_matrix(sets: list[np.ndarray], n: int, beta: float) -> np.ndarray:
    """M with ``X @ M`` replacing column i by x_i - beta * mean_{j in N(i)} x_j
    for the first ``len(sets)`` columns and leaving the rest untouched."""
    M = np.eye(n)
    for i, idx in enumerate(sets):
        if len(idx):
            M[idx, i] -= beta / len(idx)
    return M


def demo_selection_scores(X_D, w: AttentionWeights, spec: FeatureMapSpec | None, temperature_scaled: bool):
    """Monotone surrogate of each demo's attention score under every demo query."""
    K, Q = w.W_K @ X_D, w.W_Q @ X_D
    if spec is None:
        return K.T @ Q
    s = w.d_o ** -0.25 if temperature_scaled else 1.0
    return kernel_scores(spec, s * K, s * Q)


def negative_attention(X_D, X_T, x_q, w: AttentionWeights, beta: float, k: int, include_query_self: bool = True,
                       spec: FeatureMapSpec | None = None, temperature_scaled: bool = True) -> np.ndarray:
    """h = W_V [X~_D, X_T] softmax((W_K X)^T W_Q x_q / sqrt(d_o)).

    x~_i = x_i - beta/|N(i)| sum_{j in N(i)} x_j, N(i) being the k other
    demonstrations with the lowest attention score under x_i's query.
    The scores themselves use the unmodified tokens.
    """
    X, n_demo = assemble_context(X_D, X_T, x_q, include_query_self)
    X, x_q = _check_tokens(X, x_q, w)
    if beta != 0 and not 1 <= k <= n_demo - 1:
        raise ValidationError(f"k must lie in [1, {n_demo - 1}] when beta != 0")
    a = attention_scores(w.W_K @ X, w.W_Q @ x_q, spec, temperature_scaled)[:, 0]
    if beta == 0:
        return (w.W_V @ X) @ a
    XD = X[:, :n_demo]
    sets = negative_sets(demo_selection_scores(XD, w, spec, temperature_scaled), k)
    X_tilde = X @ negative_mixing_matrix(sets, X.shape[1], beta)
    return (w.W_V @ X_tilde) @ a


def ridge_attention(X, w: AttentionWeights, spec: FeatureMapSpec, alpha: float) -> np.ndarray:
    """Self-attention from the ridge-regression dual:

        h_j = W_V X phi_K^T (phi_K phi_K^T + alpha D_j I)^{-1} phi(W_Q x_j),

    with D_j = sum_i <phi(W_K x_i), phi(W_Q x_j)>.  No output normalization.
    Each column is a linear solve; no inverse is formed.
    """
    if spec is None:
        raise ValidationError("ridge attention needs an explicit feature map")
    X = as_matrix(X, "X")
    PK = apply_feature_map(spec, w.W_K @ X)
    PQ = apply_feature_map(spec, w.W_Q @ X)
    G = PK @ PK.T
    D = (PK.T @ PQ).sum(axis=0)
    VPK = (w.W_V @ X) @ PK.T
    I = np.eye(G.shape[0])
    H = np.empty((w.d_o, X.shape[1]))
    for j in range(X.shape[1]):
        M = G + alpha * D[j] * I
        if alpha > 0:
            z = scipy.linalg.cho_solve(scipy.linalg.cho_factor(M), PQ[:, j])
        else:
            if np.linalg.matrix_rank(M) < M.shape[0]:
                raise SingularSystemError("ridge system is singular; use alpha > 0")
            z = scipy.linalg.solve(M, PQ[:, j])
        H[:, j] = VPK @ z
    return H


def shifted_min_singular_values(A, alphas) -> np.ndarray:
    """Smallest singular value of A + alpha I for each alpha."""
    A = as_matrix(A, "A")
    I = np.eye(A.shape[0])
    return np.array([np.linalg.svd(A + a * I, compute_uv=False)[-1] for a in alphas])
