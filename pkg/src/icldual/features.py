"""Softmax-kernel feature maps and attention-matrix approximation quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OverflowRangeError, UnsupportedVariantError, ValidationError
from .numerics import SeededRng, as_matrix, as_vector, column_softmax

PRF = "prf"
ELU = "elu"

# exp() of anything above this overflows float64; below the negative bound it
# underflows to 0 and would break strict positivity
EXP_MAX = 709.0
EXP_MIN = -745.0
KERNEL_EXPONENT_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class FeatureMapSpec:
    """A feature map phi with <phi(x), phi(y)> approximating exp(x.y).

    ``prf``: phi(x) = exp(omega @ x - |x|^2 / 2) / sqrt(d_r) with omega of
    shape ``(d_r, d_o)`` drawn i.i.d. standard normal.

    ``elu``: phi(x) = elu(x) + 1, deterministic, ``d_r == d_o``.
    """

    variant: str
    d_o: int
    d_r: int
    omega: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in (PRF, ELU):
            raise ValidationError(f"unknown feature map variant {self.variant!r}")
        if self.d_o < 1 or self.d_r < 1:
            raise ValidationError("feature dimensions must be positive")
        if self.variant == PRF:
            if self.omega is None or self.omega.shape != (self.d_r, self.d_o):
                raise ValidationError(f"omega must have shape ({self.d_r}, {self.d_o})")
            self.omega.setflags(write=False)
        elif self.d_r != self.d_o:
            raise ValidationError("elu+1 feature map has d_r == d_o")

    @classmethod
    def positive_random(cls, d_o: int, d_r: int, rng: SeededRng) -> "FeatureMapSpec":
        omega = rng.generator().standard_normal((d_r, d_o))
        return cls(PRF, d_o, d_r, omega)

    @classmethod
    def elu_plus_one(cls, d_o: int) -> "FeatureMapSpec":
        return cls(ELU, d_o, d_o, None)


def softmax_kernel_exact(x, y) -> float:
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ValidationError("kernel arguments must have equal dimension")
    s = float(x @ y)
    if abs(s) > KERNEL_EXPONENT_LIMIT:
        raise OverflowRangeError(f"kernel exponent {s:.3g} outside float64 range")
    return float(np.exp(s))


def gaussian_kernel_form(x, y) -> float:
    """exp((|x|^2 + |y|^2)/2) * exp(-|x - y|^2 / 2), the same number as exp(x.y)."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    return float(np.exp(0.5 * (x @ x + y @ y)) * np.exp(-0.5 * np.sum((x - y) ** 2)))


def log_feature_map(spec: FeatureMapSpec, x) -> np.ndarray:
    """log phi(x) for the PRF map; accepts a vector or a ``d_o x n`` matrix."""
    if spec.variant != PRF:
        raise UnsupportedVariantError("log features are defined for the PRF map only")
    X = _as_inputs(spec, x)
    return spec.omega @ X - 0.5 * np.sum(X * X, axis=0, keepdims=True) - 0.5 * np.log(spec.d_r)


def apply_feature_map(spec: FeatureMapSpec, x) -> np.ndarray:
    """phi(x).  A vector maps to a vector of length d_r, a matrix column-wise."""
    vector_in = np.ndim(x) == 1
    X = _as_inputs(spec, x)
    if spec.variant == ELU:
        out = np.where(X > 0, X + 1.0, np.exp(np.minimum(X, 0.0)))
    else:
        logf = log_feature_map(spec, X)
        # the per-call max is subtracted and reapplied; the only failure mode
        # left is a genuine float64 range violation
        m = logf.max()
        if m > EXP_MAX or logf.min() < EXP_MIN:
            raise OverflowRangeError("random-feature exponent outside float64 range")
        out = np.exp(logf - m) * np.exp(m)
    return out[:, 0] if vector_in else out


def _as_inputs(spec, x):
    X = as_matrix(x, "feature-map input")
    if X.shape[0] != spec.d_o:
        raise ValidationError(f"feature map expects inputs of dimension {spec.d_o}, got {X.shape[0]}")
    return X


def kernel_scores(spec: FeatureMapSpec | None, K, Q) -> np.ndarray:
    """Unnormalized scores ``S[i, j] = k(K[:, i], Q[:, j])``.

    ``spec=None`` evaluates the softmax kernel exactly, exp(k_i . q_j).
    """
    K = as_matrix(K, "keys")
    Q = as_matrix(Q, "queries")
    if spec is None:
        logits = K.T @ Q
        if np.abs(logits).max() > KERNEL_EXPONENT_LIMIT:
            raise OverflowRangeError("kernel exponent outside float64 range")
        return np.exp(logits)
    return apply_feature_map(spec, K).T @ apply_feature_map(spec, Q)


def normalize_columns(S) -> np.ndarray:
    return S / S.sum(axis=0, keepdims=True)


@dataclass
class ApproxReport:
    exact: np.ndarray
    approx: np.ndarray
    mse: float
    mae: float


def attention_approx_report(X, W_K, W_Q, spec: FeatureMapSpec) -> ApproxReport:
    """Compare temperature-scaled softmax attention with its feature-map estimate.

    The sqrt(d_o) temperature is folded into the estimate by scaling projected
    keys and queries by d_o ** -0.25 each.
    """
    X = as_matrix(X, "tokens")
    W_K = as_matrix(W_K, "W_K")
    W_Q = as_matrix(W_Q, "W_Q")
    d_o = W_K.shape[0]
    K = W_K @ X
    Q = W_Q @ X
    exact = column_softmax(K.T @ Q / np.sqrt(d_o))
    s = d_o ** -0.25
    approx = normalize_columns(kernel_scores(spec, s * K, s * Q))
    diff = approx - exact
    return ApproxReport(exact, approx, float(np.mean(diff**2)), float(np.mean(np.abs(diff))))


@dataclass
class ProbeResult:
    mean: float
    stderr: float
    target: float
    estimates: np.ndarray


def unbiasedness_probe(spec: FeatureMapSpec, x, y, trials: int, rng: SeededRng) -> ProbeResult:
    """Monte Carlo mean of <phi(x), phi(y)> over independent omega draws.

    Only ``spec.variant``, ``d_r`` and ``d_o`` are used; every trial draws its
    own omega from ``rng.child(trial)``.
    """
    if spec.variant != PRF:
        raise UnsupportedVariantError("elu+1 is not an unbiased estimator of the softmax kernel")
    if trials < 2:
        raise ValidationError("need at least two trials for a standard error")
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.size != spec.d_o or y.size != spec.d_o:
        raise ValidationError("probe inputs must have dimension d_o")
    s = x + y
    shift = 0.5 * (x @ x + y @ y)
    est = np.empty(trials)
    for t in range(trials):
        omega = rng.child(t).generator().standard_normal((spec.d_r, spec.d_o))
        # <phi(x), phi(y)> = mean_r exp(w_r.(x + y) - (|x|^2 + |y|^2)/2)
        est[t] = np.mean(np.exp(omega @ s - shift))
    return ProbeResult(
        float(est.mean()),
        float(est.std(ddof=1) / np.sqrt(trials)),
        softmax_kernel_exact(x, y),
        est,
    )
