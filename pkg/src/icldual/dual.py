"""Dual models of attention layers.

The query output of a kernelized attention layer,

    h' = (1/D) sum_j W_V x_j <phi(W_K x_j), phi(W_Q x_q)>,

equals the test prediction ``W_hat phi(W_Q x_q)`` of the linear model
``f(z) = W phi(z)`` after one gradient step on

    L(W) = -(1/(eta D)) sum_i (W_V x_i)^T W phi(W_K x_i)

over the demonstrations, starting from ``W_0`` built from the non-demonstration
part of the context.  This module builds that model, runs the step and checks
the identity, for one layer, one layer plus FFN, and a PrefixLM stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    AttentionWeights,
    ContextLayout,
    FfnOutput,
    FfnWeights,
    WfRankReport,
    assemble_context,
    ffn_forward,
    kernel_attention_query,
    wf_rank_report,
)
from .errors import ValidationError
from .features import FeatureMapSpec, apply_feature_map
from .numerics import as_matrix, as_vector

FULL_BATCH = "full_batch"
INCREMENTAL = "incremental"


@dataclass(frozen=True, eq=False)
class DualModel:
    """f(z) = W phi(z) (+ b).  The bias is never trained."""

    W: np.ndarray
    spec: FeatureMapSpec
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[1] != self.spec.d_r:
            raise ValidationError(f"W must be d_out x {self.spec.d_r}")
        if not np.all(np.isfinite(self.W)):
            raise ValidationError("W must be finite")
        if self.bias is not None and self.bias.shape != (self.W.shape[0],):
            raise ValidationError("bias length must equal the output dimension")


@dataclass(frozen=True, eq=False)
class DualDataset:
    """Training pairs (z_std, y_std) as columns, normalizer D, test input z_test."""

    inputs: np.ndarray  # d_o x N, z_std^(i) = W_K x_i
    labels: np.ndarray  # d_out x N, y_std^(i)
    D: float
    z_test: np.ndarray
    eta: float = 1.0

    def __post_init__(self):
        if self.inputs.shape[1] != self.labels.shape[1] or self.inputs.shape[1] < 1:
            raise ValidationError("need N >= 1 matching inputs and labels")
        if not self.D > 0:
            raise ValidationError("normalizer D must be positive")
        if not self.eta > 0:
            raise ValidationError("learning rate must be positive")

    @property
    def N(self) -> int:
        return self.inputs.shape[1]


@dataclass
class DualBuild:
    model: DualModel
    dataset: DualDataset
    reference: np.ndarray  # the layer output the trained dual must reproduce
    attention_output: np.ndarray | None = None
    ffn: FfnOutput | None = None
    wf: WfRankReport | None = None

    def __iter__(self):
        yield self.model
        yield self.dataset


@dataclass
class EquivalenceReport:
    distances: list[float]  # ||y_hat - h'||_2 after each step; index 0 = initialization
    prediction: np.ndarray
    reference: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.distances) - 1

    @property
    def final_distance(self) -> float:
        return self.distances[-1]

    @property
    def relative_error(self) -> float:
        return self.final_distance / max(float(np.linalg.norm(self.reference)), 1e-300)


def _require_spec(spec):
    if spec is None:
        raise ValidationError("dual models need an explicit feature map")
    return spec


def build_dual_for_attention(X_D, X_T, x_q, w: AttentionWeights, spec: FeatureMapSpec,
                             layout: ContextLayout | None = None, eta: float = 1.0) -> DualBuild:
    """Dual of one kernelized attention layer for one (context, query) pair.

    D sums the kernel over the whole context seen by the query.  W_0 collects
    the non-demonstration part (prior queries and, with ``include_query_self``,
    the query itself); the demonstrations become the training set.
    """
    spec = _require_spec(spec)
    include_self = True if layout is None else layout.include_query_self
    X, n_demo = assemble_context(X_D, X_T, x_q, include_self)
    x_q = as_vector(x_q, "x_q")
    if X.shape[0] != w.d_i:
        raise ValidationError("token dimension must equal d_i")
    Phi = apply_feature_map(spec, w.W_K @ X)
    z_test = w.W_Q @ x_q
    phi_q = apply_feature_map(spec, z_test)
    D = float((Phi.T @ phi_q).sum())
    V = w.W_V @ X
    W0 = V[:, n_demo:] @ Phi[:, n_demo:].T / D
    ds = DualDataset(w.W_K @ X[:, :n_demo], V[:, :n_demo], D, z_test, eta)
    reference = kernel_attention_query(X, x_q, w, spec)
    return DualBuild(DualModel(W0, spec), ds, reference, attention_output=reference)


def dual_predict(model: DualModel, z) -> np.ndarray:
    out = model.W @ apply_feature_map(model.spec, as_vector(z, "z"))
    return out if model.bias is None else out + model.bias


def dual_loss(model: DualModel, ds: DualDataset) -> float:
    """-(1/(eta D)) sum_i y_i^T f(z_i)."""
    F = model.W @ apply_feature_map(model.spec, ds.inputs)
    if model.bias is not None:
        F = F + model.bias[:, None]
    return float(-np.sum(ds.labels * F) / (ds.eta * ds.D))


def dual_loss_gradient(model: DualModel, ds: DualDataset) -> np.ndarray:
    """dL/dW = -(1/(eta D)) sum_i y_i (x) phi(z_i); independent of W."""
    return -(ds.labels @ apply_feature_map(model.spec, ds.inputs).T) / (ds.eta * ds.D)


def iterate_updates(model: DualModel, ds: DualDataset, order: Sequence[int] | None = None) -> Iterator[DualModel]:
    """Per-example gradient steps, one per demonstration, in ``order``."""
    order = range(ds.N) if order is None else order
    Phi = apply_feature_map(model.spec, ds.inputs)
    W = model.W.copy()
    for i in order:
        # per-example loss L_i = -(1/(eta D)) y_i^T W phi(z_i)
        grad_i = -np.outer(ds.labels[:, i], Phi[:, i]) / (ds.eta * ds.D)
        W = W - ds.eta * grad_i
        yield replace(model, W=W)


def dual_update(model: DualModel, ds: DualDataset, mode: str = FULL_BATCH,
                order: Sequence[int] | None = None) -> DualModel:
    if mode == FULL_BATCH:
        return replace(model, W=model.W - ds.eta * dual_loss_gradient(model, ds))
    if mode == INCREMENTAL:
        out = model
        for out in iterate_updates(model, ds, order):
            pass
        return out
    raise ValidationError(f"unknown update mode {mode!r}")


def trace_equivalence(build: DualBuild, order: Sequence[int] | None = None) -> EquivalenceReport:
    ref = build.reference
    model = build.model
    dists = [float(np.linalg.norm(dual_predict(model, build.dataset.z_test) - ref))]
    for model in iterate_updates(build.model, build.dataset, order):
        dists.append(float(np.linalg.norm(dual_predict(model, build.dataset.z_test) - ref)))
    return EquivalenceReport(dists, dual_predict(model, build.dataset.z_test), ref)


def verify_equivalence(X_D, X_T, x_q, w: AttentionWeights, spec: FeatureMapSpec,
                       layout: ContextLayout | None = None, eta: float = 1.0) -> EquivalenceReport:
    """Per-demonstration updates, recording ||f(z_test) - h'||_2 after each."""
    return trace_equivalence(build_dual_for_attention(X_D, X_T, x_q, w, spec, layout, eta))


def build_dual_for_transformer_layer(X_D, X_T, x_q, w: AttentionWeights, f: FfnWeights, spec: FeatureMapSpec,
                                     layout: ContextLayout | None = None, eta: float = 1.0) -> DualBuild:
    """Dual of attention followed by a ReLU FFN.

    The ReLU mask I_M is read off the actual forward pass of the query and
    frozen; the dual starts at W_F W_0 with fixed bias b_F and is trained on
    labels W_F W_V x_i.
    """
    att = build_dual_for_attention(X_D, X_T, x_q, w, spec, layout, eta)
    ffn = ffn_forward(att.reference, f)
    wf = wf_rank_report(f, ffn.mask)
    ds = att.dataset
    ds_f = DualDataset(ds.inputs, wf.W_F @ ds.labels, ds.D, ds.z_test, ds.eta)
    model = DualModel(wf.W_F @ att.model.W, spec, wf.b_F)
    return DualBuild(model, ds_f, ffn.output, attention_output=att.reference, ffn=ffn, wf=wf)


@dataclass
class MultiLayerDualRun:
    initial: list[DualModel]
    trained: list[DualModel]
    datasets: list[DualDataset]
    demo_outputs: list[np.ndarray]  # [X_D, H_D^(1), ..., H_D^(L)]
    query_outputs: list[np.ndarray] = field(default_factory=list)  # [x_q, h^(1), ..., h^(L)]

    @property
    def final(self) -> np.ndarray:
        return self.query_outputs[-1]


def multi_layer_dual_run(X, layers: Sequence[AttentionWeights], spec, eta: float = 1.0) -> MultiLayerDualRun:
    """Run a PrefixLM stack entirely through its sequence of dual models.

    Layer l trains on the demonstration outputs of layer l-1 and predicts the
    query output.  The demonstration outputs of layer l are reconstructed from
    the dual before and after training:

        h_i = (D / D_i) [W_hat - W_init] phi(W_Q h_i^(l-1)),

    with D_i the kernel sum over demonstrations for demo query i.
    """
    if not layers:
        raise ValidationError("empty layer list")
    X = as_matrix(X, "X")
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * len(layers)
    if len(specs) != len(layers):
        raise ValidationError("need one feature map per layer")
    HD, hq = X[:, :-1], X[:, -1]
    N = HD.shape[1]
    run = MultiLayerDualRun([], [], [], [HD], [hq])
    for w, sp in zip(layers, specs):
        build = build_dual_for_attention(HD, None, hq, w, sp, ContextLayout(N, 0, True), eta)
        trained = dual_update(build.model, build.dataset)
        new_q = dual_predict(trained, build.dataset.z_test)
        Zq = w.W_Q @ HD
        PhiQ = apply_feature_map(sp, Zq)
        D_i = (apply_feature_map(sp, build.dataset.inputs).T @ PhiQ).sum(axis=0)
        delta = (trained.W - build.model.W) @ PhiQ
        HD = delta * (build.dataset.D / D_i)
        hq = new_q
        run.initial.append(build.model)
        run.trained.append(trained)
        run.datasets.append(build.dataset)
        run.demo_outputs.append(HD)
        run.query_outputs.append(hq)
    return run
