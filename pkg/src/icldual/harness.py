"""Synthetic regression tasks and deterministic SGD training of one attention layer.

A training step feeds ``N + 1`` tokens ``x_i = [t_i; s_i]`` whose last (query)
token has its label slot zeroed; the prediction is the label slot of the
query's output.  Training runs through the reverse-mode :class:`Tape`, so every
variant gets gradients from the same audited primitives.

Random streams per seed (``SeededRng(seed).child(i)``):

    0  task matrix W (when the task does not fix one)
    1  training batches, child(1, step)
    2  attention weights
    3  random-feature matrix Omega
    4  g1 weights
    5  g2 weights

Variants of one sweep therefore see identical data, attention initialization
and Omega; only their own augmentation weights differ.
"""

from __future__ import annotations

import hashlib
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .attention import (
    AttentionWeights,
    ContextLayout,
    FfnWeights,
    Identity,
    Mlp,
    ModificationConfig,
    ParallelMlp,
    apply_augment,
    negative_mixing_matrix,
    negative_sets,
    wf_rank_report,
    ffn_forward,
)
from .dual import EquivalenceReport, verify_equivalence
from .errors import DivergenceError, NumericalError, ValidationError
from .features import ELU, PRF, FeatureMapSpec, attention_approx_report, kernel_scores
from .numerics import SeededRng, Tape

TASK_KINDS = ("linear", "trig", "exp")
SOFTMAX = "softmax"

# per-task settings of the reference experiments (16384 tokens per epoch)
TASK_SETUPS = {
    "linear": dict(d_t=11, d_s=1, n_tokens=16, steps_per_epoch=1024, lr=0.003),
    "trig": dict(d_t=7, d_s=1, n_tokens=128, steps_per_epoch=128, lr=0.005),
    "exp": dict(d_t=6, d_s=1, n_tokens=512, steps_per_epoch=32, lr=0.005),
}


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskSpec:
    kind: str
    d_t: int
    d_s: int = 1
    W: np.ndarray | None = None  # d_s x d_t; None means "draw one per seed"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.d_t < 1 or self.d_s < 1:
            raise ValidationError("d_t and d_s must be positive")
        if self.W is not None and self.W.shape != (self.d_s, self.d_t):
            raise ValidationError("task matrix must be d_s x d_t")

    @property
    def d(self) -> int:
        return self.d_t + self.d_s

    @classmethod
    def random(cls, kind: str, d_t: int, d_s: int, rng: SeededRng) -> "TaskSpec":
        return cls(kind, d_t, d_s, rng.generator().standard_normal((d_s, d_t)))

    def resolved(self, rng: SeededRng) -> "TaskSpec":
        return self if self.W is not None else TaskSpec.random(self.kind, self.d_t, self.d_s, rng)

    def sample_inputs(self, n: int, g: np.random.Generator) -> np.ndarray:
        if self.kind == "trig":
            return g.uniform(0.0, np.pi, (self.d_t, n))
        return g.uniform(-1.0, 1.0, (self.d_t, n))

    def labels(self, T) -> np.ndarray:
        if self.W is None:
            raise ValidationError("task matrix not drawn yet")
        Z = self.W @ T
        if self.kind == "linear":
            return Z
        return np.cos(Z) if self.kind == "trig" else np.exp(Z)


@dataclass(frozen=True, eq=False)
class TokenBatch:
    X: np.ndarray  # d x (N+1); query label slot is zero
    target: np.ndarray  # d_s, the hidden query label
    d_t: int

    @property
    def N(self) -> int:
        return self.X.shape[1] - 1

    def digest(self) -> str:
        return hashlib.sha256(self.X.tobytes() + self.target.tobytes()).hexdigest()


def sample_tokens(task: TaskSpec, n: int, rng: SeededRng) -> np.ndarray:
    """n full tokens [t; s] as columns."""
    T = task.sample_inputs(n, rng.generator())
    return np.vstack([T, task.labels(T)])


def sample_task_batch(task: TaskSpec, n: int, rng: SeededRng) -> TokenBatch:
    if n < 2:
        raise ValidationError("a batch needs at least one demonstration and a query")
    X = sample_tokens(task, n, rng)
    target = X[task.d_t:, -1].copy()
    X[task.d_t:, -1] = 0.0
    return TokenBatch(X, target, task.d_t)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

_AUG_RE = re.compile(r"^(identity|mlp([12])-(gelu|elu)|parallel-(gelu|elu)-c([-+0-9.eE]+))$")


@dataclass(frozen=True)
class Variant:
    """Hyperparameters of a trainable attention variant.

    Augmentations are written ``identity``, ``mlp1-gelu``, ``mlp2-elu`` or
    ``parallel-gelu-c0.2``.
    """

    alpha: float = 0.0
    beta: float = 0.0
    k: int = 0
    g1: str = "identity"
    g2: str = "identity"

    def __post_init__(self):
        for g in (self.g1, self.g2):
            if not _AUG_RE.match(g):
                raise ValidationError(f"bad augmentation {g!r}")
        if self.alpha == 1:
            raise ValidationError("alpha = 1 leaves nothing to renormalize")
        if self.beta != 0 and self.k < 1:
            raise ValidationError("negative samples need k >= 1")

    @property
    def name(self) -> str:
        parts = []
        if self.alpha != 0:
            parts.append(f"alpha={self.alpha:g}")
        if self.beta != 0:
            parts.append(f"beta={self.beta:g},k={self.k}")
        if self.g1 != "identity":
            parts.append(f"g1={self.g1}")
        if self.g2 != "identity":
            parts.append(f"g2={self.g2}")
        return ",".join(parts) or "normal"

    def build_modification(self, d: int, rng_g1: SeededRng, rng_g2: SeededRng) -> ModificationConfig:
        return ModificationConfig(self.alpha, self.beta, self.k, _make_augment(self.g1, d, rng_g1),
                                  _make_augment(self.g2, d, rng_g2))


def _make_augment(desc: str, d: int, rng: SeededRng):
    m = _AUG_RE.match(desc)
    if desc == "identity":
        return Identity()
    if m.group(2):
        return Mlp.init(d, int(m.group(2)), m.group(3), rng)
    return ParallelMlp.init(d, d, float(m.group(5)), rng, activation=m.group(4))


def parse_variant(text: str) -> Variant:
    """``normal`` or comma-separated ``key=value`` fields, e.g. ``beta=0.1,k=3``."""
    text = text.strip()
    if text in ("", "normal"):
        return Variant()
    kw = {}
    for item in text.split(","):
        if "=" not in item:
            raise ValidationError(f"bad variant field {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        try:
            if key in ("alpha", "beta"):
                kw[key] = float(value)
            elif key == "k":
                kw[key] = int(value)
            elif key in ("g1", "g2"):
                kw[key] = value
                if value.startswith("parallel"):
                    float(_AUG_RE.match(value).group(5))
            else:
                raise ValidationError(f"unknown variant field {key!r}")
        except (ValueError, AttributeError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad value in variant field {item!r}") from exc
    return Variant(**kw)


def parse_variants(text: str) -> list[Variant]:
    """Semicolon-separated list of :func:`parse_variant` strings."""
    out = [parse_variant(t) for t in text.split(";")]
    if not out:
        raise ValidationError("no variants given")
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    n_tokens: int = 16
    steps_per_epoch: int = 1024
    epochs: int = 50
    lr: float = 0.003
    variant: Variant = field(default_factory=Variant)
    feature: str = PRF  # prf | elu | softmax
    d_r: int = 1200
    seed: int = 0

    def __post_init__(self):
        if self.n_tokens < 2 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ValidationError("need n_tokens >= 2, steps_per_epoch >= 1, epochs >= 1")
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ValidationError("learning rate must be finite and nonnegative")
        if self.feature not in (PRF, ELU, SOFTMAX):
            raise ValidationError(f"unknown feature map {self.feature!r}")
        if self.d_r < 1:
            raise ValidationError("d_r must be positive")
        if self.variant.beta != 0 and self.variant.k > self.n_tokens - 2:
            raise ValidationError("k must be at most N - 1")

    @property
    def tokens_per_epoch(self) -> int:
        return self.steps_per_epoch * self.n_tokens


def _augment_param_names(prefix: str, g) -> list[tuple[str, np.ndarray]]:
    if isinstance(g, Mlp):
        return [(f"{prefix}.W{i}", W) for i, W in enumerate(g.weights)]
    if isinstance(g, ParallelMlp):
        return [(f"{prefix}.W_1", g.W_1), (f"{prefix}.W_2", g.W_2)]
    return []


@dataclass
class AttentionModel:
    """A trainable single attention layer; ``params`` holds the current values."""

    d_t: int
    d_s: int
    variant: Variant
    spec: FeatureMapSpec | None  # None = exact softmax
    mod: ModificationConfig  # structure of g1/g2 (weights here are the initial ones)
    params: dict[str, np.ndarray]

    @property
    def d(self) -> int:
        return self.d_t + self.d_s

    @classmethod
    def init(cls, d_t: int, d_s: int, cfg: TrainConfig, root: SeededRng) -> "AttentionModel":
        d = d_t + d_s
        w = AttentionWeights.random(d, d, root.child(2))
        if cfg.feature == PRF:
            spec = FeatureMapSpec.positive_random(d, cfg.d_r, root.child(3))
        elif cfg.feature == ELU:
            spec = FeatureMapSpec.elu_plus_one(d)
        else:
            spec = None
        mod = cfg.variant.build_modification(d, root.child(4), root.child(5))
        params = {"W_Q": w.W_Q, "W_K": w.W_K, "W_V": w.W_V}
        params.update(_augment_param_names("g1", mod.g1))
        params.update(_augment_param_names("g2", mod.g2))
        return cls(d_t, d_s, cfg.variant, spec, mod, {k: v.copy() for k, v in params.items()})

    def attention_weights(self) -> AttentionWeights:
        return AttentionWeights(self.params["W_Q"], self.params["W_K"], self.params["W_V"])

    def modification(self) -> ModificationConfig:
        """ModificationConfig carrying the *current* augmentation weights."""
        return replace(self.mod, g1=self._current("g1", self.mod.g1), g2=self._current("g2", self.mod.g2))

    def _current(self, prefix, g):
        if isinstance(g, Mlp):
            return Mlp(g.activation, tuple(self.params[f"{prefix}.W{i}"] for i in range(len(g.weights))))
        if isinstance(g, ParallelMlp):
            return ParallelMlp(g.c, self.params[f"{prefix}.W_1"], self.params[f"{prefix}.W_2"], g.activation)
        return g


def _augment_on_tape(tape: Tape, g, prefix: str, P, V, Xraw):
    if isinstance(g, Mlp):
        for i in range(len(g.weights)):
            V = tape.activation(g.activation, P[f"{prefix}.W{i}"] @ V)
        return V
    if isinstance(g, ParallelMlp):
        if g.c == 0:
            return V
        branch = P[f"{prefix}.W_2"] @ tape.activation(g.activation, P[f"{prefix}.W_1"] @ Xraw)
        return V + branch * g.c
    return V


def negative_selection(model: AttentionModel, X: np.ndarray) -> np.ndarray:
    """Mixing matrix replacing every demonstration by x_i - beta mean_{N(i)} x_j.

    Selection uses the model's current keys (after g2) and demo queries and is
    treated as a constant of the step.
    """
    v = model.variant
    n = X.shape[1]
    if v.beta == 0:
        return np.eye(n)
    XD = X[:, :-1]
    s = model.d ** -0.25
    K = s * apply_augment(model.modification().g2, model.params["W_K"] @ XD, XD)
    Q = s * (model.params["W_Q"] @ XD)
    scores = K.T @ Q if model.spec is None else kernel_scores(model.spec, K, Q)
    return negative_mixing_matrix(negative_sets(scores, v.k), n, v.beta)


def record_forward(model: AttentionModel, batch: TokenBatch, mixing: np.ndarray | None = None):
    """Build the tape for one step.  Returns ``(tape, loss, prediction)``.

    The sqrt(d) temperature is applied by scaling projected keys and queries
    by d ** -0.25; the 1/sqrt(d_r) factor of the random features and the max
    shift cancel in the normalization and are left out.
    """
    X = batch.X
    if np.any(X[model.d_t:, -1] != 0):
        raise ValidationError("query label slot must be zero")
    v = model.variant
    n = X.shape[1]
    tape = Tape()
    P = {name: tape.param(val, name) for name, val in model.params.items()}
    Xc = tape.const(X)
    s = model.d ** -0.25

    K = _augment_on_tape(tape, model.mod.g2, "g2", P, P["W_K"] @ Xc, Xc) * s
    q = (P["W_Q"] @ tape.const(X[:, -1:])) * s
    if model.spec is None:
        a = tape.column_softmax(K.T @ q)
    else:
        if model.spec.variant == PRF:
            Om = tape.const(model.spec.omega)
            LK = Om @ K - (K * K).sum(axis=0) * 0.5
            Lq = Om @ q - (q * q).sum(axis=0) * 0.5
            shift = max(LK.value.max(), Lq.value.max())
            phiK = tape.exp(LK - shift)
            phiq = tape.exp(Lq - shift)
        else:
            phiK = tape.elu(K) + 1.0
            phiq = tape.elu(q) + 1.0
        scores = phiK.T @ phiq
        a = scores / scores.sum()
    if v.alpha != 0:
        e_q = np.zeros((n, 1))
        e_q[-1] = 1.0
        a = (a - e_q * v.alpha) * (1.0 / (1.0 - v.alpha))

    Xv = Xc
    if v.beta != 0:
        M = negative_selection(model, X) if mixing is None else mixing
        Xv = tape.const(X @ M)
    V = _augment_on_tape(tape, model.mod.g1, "g1", P, P["W_V"] @ Xv, Xv)
    pred = (V @ a)[model.d_t:, :]
    loss = tape.sq_error(pred, batch.target[:, None])
    return tape, loss, pred.value[:, 0]


def predict(model: AttentionModel, batch: TokenBatch) -> np.ndarray:
    return record_forward(model, batch)[2]


def sgd_step(model: AttentionModel, batch: TokenBatch, lr: float) -> float:
    tape, loss, _ = record_forward(model, batch)
    value = loss.value.item()
    if lr != 0:
        grads = tape.backward(loss)
        for name, g in grads.items():
            model.params[name] = model.params[name] - lr * g
    return value


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: list[float]  # mean step loss of each epoch
    data_hash: str
    model: AttentionModel
    config: TrainConfig


def training_batches(task: TaskSpec, cfg: TrainConfig, root: SeededRng) -> list[TokenBatch]:
    """The fixed training set of one seed, replayed in order every epoch."""
    return [sample_task_batch(task, cfg.n_tokens, root.child(1, j)) for j in range(cfg.steps_per_epoch)]


def data_digest(batches: Sequence[TokenBatch]) -> str:
    h = hashlib.sha256()
    for b in batches:
        h.update(b.digest().encode())
    return h.hexdigest()


def train_attention_model(task: TaskSpec, cfg: TrainConfig,
                          on_epoch: Callable[[int, float], None] | None = None,
                          until: Callable[[list[float]], bool] | None = None) -> TrainResult:
    """Plain per-sequence SGD on ||s_hat - s||^2; returns the per-epoch mean loss.

    ``until(losses)`` is checked after every epoch and ends training early
    when it returns True.
    """
    root = SeededRng(cfg.seed)
    task = task.resolved(root.child(0))
    batches = training_batches(task, cfg, root)
    model = AttentionModel.init(task.d_t, task.d_s, cfg, root)
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in batches:
            try:
                value = sgd_step(model, b, cfg.lr)
            except NumericalError as exc:
                raise DivergenceError(step, float("nan")) from exc
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            total += value
            step += 1
        losses.append(total / len(batches))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        if until is not None and until(losses):
            break
    return TrainResult(losses, data_digest(batches), model, cfg)


def ordered_map(fn, items: Iterable, workers: int = 1) -> list:
    """map() whose output order never depends on completion order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class SweepRow:
    variant: str
    seed: int
    epoch: int
    loss: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    data_hashes: dict[tuple[str, int], str]

    def curve(self, variant: str, seed: int) -> list[float]:
        return [r.loss for r in self.rows if r.variant == variant and r.seed == seed]


def variant_sweep(task: TaskSpec, base: TrainConfig, variants: Sequence[Variant], seeds: Sequence[int] = (0,),
                  workers: int = 1) -> SweepResult:
    """One curve per (variant, seed); every variant of a seed sees the same data."""
    if not variants:
        raise ValidationError("variants must be nonempty")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate variants in sweep")
    jobs = [(v, s) for v in variants for s in seeds]
    results = ordered_map(lambda job: train_attention_model(task, replace(base, variant=job[0], seed=job[1])),
                          jobs, workers)
    rows, hashes = [], {}
    for (v, s), res in zip(jobs, results):
        hashes[(v.name, s)] = res.data_hash
        rows.extend(SweepRow(v.name, s, e + 1, loss) for e, loss in enumerate(res.losses))
    for s in seeds:
        if len({hashes[(n, s)] for n in names}) != 1:
            raise AssertionError(f"variants saw different data for seed {s}")
    return SweepResult(rows, hashes)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class RankRow:
    dh: int
    mean_bound: float


def rank_bound_experiment(d: int, d_h_list: Sequence[int], batches: int, reps: int, rng: SeededRng,
                          bias_shift: float = 0.0) -> list[RankRow]:
    """Mean of min(d, d_h, rank I_M) over random FFNs (one per rep) and
    random standard-normal inputs (one per batch)."""
    if d < 1 or batches < 1 or reps < 1:
        raise ValidationError("d, batches and reps must be positive")
    rows = []
    for d_h in d_h_list:
        total = 0
        for r in range(reps):
            f = FfnWeights.random(d, d_h, rng.child(d_h, r, 0), bias_shift)
            H = rng.child(d_h, r, 1).generator().standard_normal((batches, d))
            for h in H:
                total += wf_rank_report(f, ffn_forward(h, f).mask).upper_bound
        rows.append(RankRow(d_h, total / (batches * reps)))
    return rows


def feature_spec_for(feature: str, d: int, d_r: int, rng: SeededRng) -> FeatureMapSpec:
    if feature == PRF:
        return FeatureMapSpec.positive_random(d, d_r, rng)
    if feature == ELU:
        return FeatureMapSpec.elu_plus_one(d)
    raise ValidationError(f"the dual model needs a feature map, not {feature!r}")


def equivalence_experiment(task: TaskSpec, n: int, d_r: int, seeds: Sequence[int], feature: str = PRF,
                           trained: TrainConfig | None = None, workers: int = 1) -> list[EquivalenceReport]:
    """Per seed: one batch of n tokens, random (or trained) weights, per-demo dual trace.

    Trained weights have their temperature folded into W_Q and W_K so the
    untempered kernel attention of the dual construction is the trained layer.
    """
    if n < 2:
        raise ValidationError("n must be at least 2")

    def run(seed):
        root = SeededRng(seed)
        t = task.resolved(root.child(0))
        batch = sample_task_batch(t, n, root.child(1, 0))
        if trained is None:
            w = AttentionWeights.random(t.d, t.d, root.child(2))
            spec = feature_spec_for(feature, t.d, d_r, root.child(3))
        else:
            res = train_attention_model(t, replace(trained, seed=seed, feature=feature, d_r=d_r))
            w = res.model.attention_weights().temperature_folded()
            spec = res.model.spec
        X = batch.X
        return verify_equivalence(X[:, :-1], None, X[:, -1], w, spec, ContextLayout(n - 1, 0, True))

    return ordered_map(run, seeds, workers)


@dataclass
class ApproxRow:
    dr: int
    trial: int
    mse: float
    mae: float


def approximation_sweep(task: TaskSpec, n: int, d_r_list: Sequence[int], trials: int, seed: int = 0,
                        workers: int = 1) -> list[ApproxRow]:
    """Attention-matrix error of PRF estimates; per trial the tokens and weights
    are shared across the d_r grid, Omega comes from stream (trial, d_r)."""
    root = SeededRng(seed)
    t = task.resolved(root.child(0))

    def run(trial):
        X = sample_task_batch(t, n, root.child(1, trial)).X
        w = AttentionWeights.random(t.d, t.d, root.child(2, trial))
        out = []
        for d_r in d_r_list:
            spec = FeatureMapSpec.positive_random(t.d, d_r, root.child(3, trial, d_r))
            rep = attention_approx_report(X, w.W_K, w.W_Q, spec)
            out.append(ApproxRow(d_r, trial, rep.mse, rep.mae))
        return out

    rows = [r for chunk in ordered_map(run, range(trials), workers) for r in chunk]
    return sorted(rows, key=lambda r: (d_r_list.index(r.dr), r.trial))
