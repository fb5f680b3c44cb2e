"""Two-task GEAR model: pipelines, coupling losses and their weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from . import geometry
from .geometry import CURVATURE_CLIP, InverseMode, jacobian_batch
from .net import ActivationKind, Mlp, forward, init_orthogonal, init_params
from .tensor_core import ShapeError, SingularMatrixError, contract, namespace

SOURCE_TO_TARGET = "source->target"
TARGET_TO_SOURCE = "target->source"
MODULES = ("embed", "encoder", "transfer", "inverse", "head")
DROPOUT_MODULES = ("transfer", "inverse", "head")
LOSS_NAMES = ("reg", "auto", "cons", "map", "metric", "curv")


class TrainingError(FloatingPointError):
    """A loss or gradient component went non-finite."""

    def __init__(self, component: str, message: str | None = None):
        super().__init__(message or f"loss component {component!r} is not finite")
        self.component = component


@dataclass
class TaskPipeline:
    embed: Mlp
    encoder: Mlp
    transfer: Mlp
    inverse: Mlp
    head: Mlp

    def __post_init__(self):
        d = self.encoder.n_out
        if self.embed.n_out != self.encoder.n_in:
            raise ShapeError("embedding width does not match encoder input")
        for name in ("transfer", "inverse"):
            mlp = getattr(self, name)
            if any(l.W.shape != (d, d) for l in mlp.layers):
                raise ShapeError(f"{name} module must keep the latent width {d}")
        if self.head.n_in != d or self.head.n_out != 1:
            raise ShapeError("head must map the latent vector to one scalar")

    @property
    def latent_dim(self) -> int:
        return self.encoder.n_out

    def modules(self) -> dict[str, Mlp]:
        return {name: getattr(self, name) for name in MODULES}

    def latent(self, x):
        return forward(self.encoder, forward(self.embed, x).output).output

    def predict(self, x):
        return forward(self.head, self.latent(x)).output[..., 0]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # autoencoder
    beta: float = 0.1  # consistency
    gamma: float = 0.2  # mapping
    delta: float = 0.1  # metric
    epsilon: float = 0.2  # curvature

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {
            "reg": 1.0,
            "auto": self.alpha,
            "cons": self.beta,
            "map": self.gamma,
            "metric": self.delta,
            "curv": self.epsilon,
        }


@dataclass
class GearModel:
    source: TaskPipeline
    target: TaskPipeline
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.source.latent_dim != self.target.latent_dim:
            raise ShapeError("source and target latent dimensions must match")

    def pipelines(self, direction: str = SOURCE_TO_TARGET) -> tuple[TaskPipeline, TaskPipeline]:
        """(pipeline in the target role, the other pipeline)."""
        if direction == SOURCE_TO_TARGET:
            return self.target, self.source
        if direction == TARGET_TO_SOURCE:
            return self.source, self.target
        raise ValueError(f"unknown direction {direction!r}")

    @property
    def n_params(self) -> int:
        return sum(m.n_params for p in (self.source, self.target) for m in p.modules().values())


@dataclass
class ArchConfig:
    """Layer widths of one task pipeline (desk-scale defaults)."""

    features: int = 8
    embed_hidden: tuple[int, ...] = (16,)
    embed_dim: int = 16
    encoder_hidden: tuple[int, ...] = (8,)
    latent: int = 4
    transfer_layers: int = 4
    head_hidden: tuple[int, ...] = (8, 4)
    transfer_final_act: str = "linear"
    transfer_init: str = "orthogonal"  # or "glorot"
    transfer_gain: float = 1.0


def build_pipeline(arch: ArchConfig, rng: np.random.Generator) -> TaskPipeline:
    silu = ActivationKind.SILU
    d = arch.latent
    embed = init_params([arch.features, *arch.embed_hidden, arch.embed_dim], silu, rng)
    encoder = init_params([arch.embed_dim, *arch.encoder_hidden, d], silu, rng)
    if arch.transfer_init == "orthogonal":
        transfer, inverse = init_orthogonal(d, arch.transfer_layers, rng, silu, arch.transfer_final_act, arch.transfer_gain)
    elif arch.transfer_init == "glorot":
        square = [d] * (arch.transfer_layers + 1)
        transfer = init_params(square, silu, rng, arch.transfer_final_act)
        inverse = init_params(square, silu, rng, arch.transfer_final_act)
    else:
        raise ValueError(f"unknown transfer_init {arch.transfer_init!r}")
    return TaskPipeline(
        embed=embed,
        encoder=encoder,
        transfer=transfer,
        inverse=inverse,
        head=init_params([d, *arch.head_hidden, 1], silu, rng),
    )


def build_model(arch: ArchConfig | None = None, seed: int = 0, weights: LossWeights | None = None) -> GearModel:
    arch = arch or ArchConfig()
    rng = np.random.default_rng(seed)
    return GearModel(build_pipeline(arch, rng), build_pipeline(arch, rng), weights or LossWeights())


@dataclass
class PairBatch:
    """Rows of raw features with target-role labels.

    Missing labels are NaN. ``row_weight`` (default ones) lets padded rows be
    switched off without changing array shapes.
    """

    x: np.ndarray
    y_t: np.ndarray
    y_s: np.ndarray | None = None
    row_weight: np.ndarray | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("y_t", "y_s", "row_weight"):
            v = getattr(self, name)
            if v is not None and v.shape != (n,):
                raise ShapeError(f"{name} has shape {v.shape}, expected ({n},)")
        if self.y_s is not None and isinstance(self.y_t, np.ndarray) and isinstance(self.y_s, np.ndarray):
            if np.any(~np.isfinite(self.y_t) & ~np.isfinite(self.y_s)):
                raise ValueError("every row needs at least one label")

    @property
    def weights(self):
        xp = namespace(self.x)
        return xp.ones(self.x.shape[0]) if self.row_weight is None else self.row_weight


@dataclass
class PairRecord:
    z_t: np.ndarray
    zp_t: np.ndarray
    zhat_t: np.ndarray
    yhat_t: np.ndarray
    z_s: np.ndarray
    zp_s: np.ndarray
    zhat_s: np.ndarray
    y_cross: np.ndarray


def _masks(dropout, role, name):
    if dropout is None:
        return None
    return dropout.get((role, name))


def forward_pair(
    model: GearModel,
    batch: PairBatch,
    direction: str = SOURCE_TO_TARGET,
    dropout: Mapping | None = None,
) -> PairRecord:
    """Run one batch of raw features through both pipelines.

    The pipeline in the target role yields z_t, z'_t, z^_t and y^_t; the other
    one yields z_s, z'_s, z^_s on the same rows. The cross prediction is
    ``head_t(inverse_t(z'_s))``. ``dropout`` maps ``(role, module)`` with role in
    {"t", "s"} to per-layer masks.
    """
    main, other = model.pipelines(direction)
    out = {}
    for role, pipe in (("t", main), ("s", other)):
        if batch.x.shape[-1] != pipe.embed.n_in:
            raise ShapeError(f"feature width {batch.x.shape[-1]} != embedding input {pipe.embed.n_in}")
        z = pipe.latent(batch.x)
        zp = forward(pipe.transfer, z, _masks(dropout, role, "transfer")).output
        zhat = forward(pipe.inverse, zp, _masks(dropout, role, "inverse")).output
        out[role] = (z, zp, zhat)
    head_masks = _masks(dropout, "t", "head")
    yhat_t = forward(main.head, out["t"][0], head_masks).output[:, 0]
    back = forward(main.inverse, out["s"][1], _masks(dropout, "t", "inverse")).output
    y_cross = forward(main.head, back, head_masks).output[:, 0]
    return PairRecord(*out["t"], yhat_t, *out["s"], y_cross)


@dataclass
class BaseLosses:
    reg: float
    auto: float
    cons: float
    map: float
    n_reg: int
    n_map: int


def _wmean(values, w):
    xp = namespace(values, w)
    total = xp.sum(w)
    return xp.sum(w * values) / xp.maximum(total, 1e-300)


def _masked_sq(pred, y, w):
    xp = namespace(pred, y, w)
    mask = xp.isfinite(y) * w
    y0 = xp.where(xp.isfinite(y), y, 0.0)
    count = xp.sum(mask)
    loss = xp.sum(mask * (pred - y0) ** 2) / xp.maximum(count, 1.0)
    return loss, count


def base_losses(record: PairRecord, batch: PairBatch) -> BaseLosses:
    """Regression, autoencoder, consistency and mapping MSEs.

    Rows whose target-role label is missing drop out of reg and map; a term
    with no usable rows is 0 and its count reports that.
    """
    w = batch.weights
    reg, n_reg = _masked_sq(record.yhat_t, batch.y_t, w)
    map_, n_map = _masked_sq(record.y_cross, batch.y_t, w)
    xp = namespace(record.z_t)
    auto = _wmean(xp.mean((record.z_t - record.zhat_t) ** 2, axis=-1), w) + _wmean(
        xp.mean((record.z_s - record.zhat_s) ** 2, axis=-1), w
    )
    cons = _wmean(xp.mean((record.zp_s - record.zp_t) ** 2, axis=-1), w)
    return BaseLosses(reg, auto, cons, map_, n_reg, n_map)


def _round_trip_loss(pipe: TaskPipeline, z, K: int, w):
    xp = namespace(z)
    d = z.shape[-1]
    eye = xp.eye(d)
    flat = forward(pipe.transfer, z).output
    total = 0.0
    for _ in range(K):
        curved = forward(pipe.inverse, flat).output
        J_inv = jacobian_batch(pipe.inverse, flat)  # d curved / d flat
        J_fwd = jacobian_batch(pipe.transfer, curved)  # d flat / d curved
        for A in (contract("bia,baj->bij", J_fwd, J_inv), contract("bia,baj->bij", J_inv, J_fwd)):
            induced = contract("bki,bkj->bij", A, A)
            total = total + _wmean(xp.mean((induced - eye) ** 2, axis=(-2, -1)), w)
        flat = forward(pipe.transfer, curved).output
    return total


def metric_loss(model: GearModel, z_s, z_t, K: int = 1, row_weight=None):
    """Flatness of the round-trip maps of both transfer modules.

    For each task with A = J_transfer(z^) J_inverse(z'), both A^T A (flat side)
    and B^T B with B = J_inverse J_transfer (curved side) are pulled toward the
    identity. Each of the ``K`` repetitions advances the point by one more
    flat -> curved -> flat round trip. Terms are summed over tasks and
    repetitions and averaged over rows.
    """
    if K < 1:
        raise ValueError("K must be a positive integer")
    w = row_weight if row_weight is not None else namespace(z_t).ones(z_t.shape[0])
    return _round_trip_loss(model.source, z_s, K, w) + _round_trip_loss(model.target, z_t, K, w)


def curvature_scalars(transfer: Mlp, inverse: Mlp, Z, mode=InverseMode.LEARNED, ridge: float = 0.0):
    """Ricci scalar at each row of ``Z``."""
    xp = namespace(Z)
    mode = InverseMode(mode)
    if xp is not np:
        import jax

        return jax.vmap(lambda z: geometry.ricci_scalar(transfer, inverse, z, mode, ridge))(Z)
    out = np.empty(Z.shape[0])
    for i, z in enumerate(Z):
        try:
            out[i] = geometry.ricci_scalar(transfer, inverse, z, mode, ridge)
        except SingularMatrixError:
            if ridge > 0:
                raise
            out[i] = geometry.ricci_scalar(transfer, inverse, z, mode, 1e-8)
    return out


def curvature_loss(model: GearModel, z_s, z_t, mode=InverseMode.LEARNED, row_weight=None, ridge: float = 0.0):
    """Row-wise MSE between clipped Ricci scalars of the two latent geometries."""
    xp = namespace(z_s, z_t)
    r_s = xp.clip(curvature_scalars(model.source.transfer, model.source.inverse, z_s, mode, ridge), -CURVATURE_CLIP, CURVATURE_CLIP)
    r_t = xp.clip(curvature_scalars(model.target.transfer, model.target.inverse, z_t, mode, ridge), -CURVATURE_CLIP, CURVATURE_CLIP)
    w = row_weight if row_weight is not None else xp.ones(z_s.shape[0])
    return _wmean((r_s - r_t) ** 2, w)


@dataclass
class LossBreakdown:
    reg: float
    auto: float
    cons: float
    map: float
    metric: float
    curv: float
    total: float
    weights: dict[str, float] = field(default_factory=dict)

    def parts(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_NAMES}

    def as_floats(self) -> "LossBreakdown":
        return replace(self, **{k: float(getattr(self, k)) for k in (*LOSS_NAMES, "total")})


def total_loss(parts: Mapping[str, float], w: LossWeights | Mapping[str, float] | None = None) -> LossBreakdown:
    """l_reg + alpha l_auto + beta l_cons + gamma l_map + delta l_metric + epsilon l_curv."""
    if w is None:
        w = LossWeights()
    coef = w.as_dict() if isinstance(w, LossWeights) else dict(w)
    values = {k: parts.get(k, 0.0) for k in LOSS_NAMES}
    for name, v in values.items():
        if isinstance(v, (float, int, np.floating, np.ndarray)) and not math.isfinite(float(v)):
            raise TrainingError(name)
    total = values["reg"]
    for name in LOSS_NAMES[1:]:
        total = total + coef[name] * values[name]
    return LossBreakdown(**values, total=total, weights=coef)


@dataclass(frozen=True)
class LossSettings:
    """Which coupling terms run and how (ablation flags zero their weight and skip the work)."""

    K: int = 1
    mode: InverseMode = InverseMode.LEARNED
    enable_map: bool = True
    enable_curv: bool = True
    enable_metric: bool = True
    enable_cons: bool = True
    curv_rows: int = 16
    ridge: float = 1e-8
    single_task: bool = False

    def effective_weights(self, w: LossWeights) -> dict[str, float]:
        coef = w.as_dict()
        for name, on in (("map", self.enable_map), ("curv", self.enable_curv),
                         ("metric", self.enable_metric), ("cons", self.enable_cons)):
            if not on:
                coef[name] = 0.0
        return coef


def evaluate_losses(
    model: GearModel,
    batch: PairBatch,
    settings: LossSettings = LossSettings(),
    direction: str = SOURCE_TO_TARGET,
    dropout: Mapping | None = None,
) -> LossBreakdown:
    """All six components for one batch, with disabled terms left at 0.

    With ``settings.single_task`` only the target-role pipeline runs and the
    loss is reg + alpha * auto of that pipeline (the STL baseline).
    """
    coef = settings.effective_weights(model.weights)
    if settings.single_task:
        return _single_task_losses(model, batch, direction, dropout, coef)
    rec = forward_pair(model, batch, direction, dropout)
    base = base_losses(rec, batch)
    parts = {"reg": base.reg, "auto": base.auto, "cons": base.cons, "map": base.map, "metric": 0.0, "curv": 0.0}
    if not settings.enable_cons:
        parts["cons"] = 0.0
    if not settings.enable_map:
        parts["map"] = 0.0
    # geometry terms use dropout-free latents on a capped sub-batch
    main, other = model.pipelines(direction)
    rows = slice(0, settings.curv_rows)
    w = batch.weights[rows]
    z_main, z_other = rec.z_t[rows], rec.z_s[rows]
    z_src, z_tgt = (z_other, z_main) if direction == SOURCE_TO_TARGET else (z_main, z_other)
    if settings.enable_metric and coef["metric"] > 0:
        parts["metric"] = metric_loss(model, z_src, z_tgt, settings.K, w)
    if settings.enable_curv and coef["curv"] > 0:
        ridge = settings.ridge if settings.mode is InverseMode.EXACT else 0.0
        parts["curv"] = curvature_loss(model, z_src, z_tgt, settings.mode, w, ridge)
    return total_loss(parts, coef)


def _single_task_losses(model, batch, direction, dropout, coef):
    main, _ = model.pipelines(direction)
    z = main.latent(batch.x)
    zp = forward(main.transfer, z, _masks(dropout, "t", "transfer")).output
    zhat = forward(main.inverse, zp, _masks(dropout, "t", "inverse")).output
    yhat = forward(main.head, z, _masks(dropout, "t", "head")).output[:, 0]
    reg, _ = _masked_sq(yhat, batch.y_t, batch.weights)
    auto = _wmean(namespace(z).mean((z - zhat) ** 2, axis=-1), batch.weights)
    coef = {**coef, "cons": 0.0, "map": 0.0, "metric": 0.0, "curv": 0.0}
    return total_loss({"reg": reg, "auto": auto}, coef)


def model_to_dict(model: GearModel) -> dict:
    from .net import mlp_to_dict

    return {
        role: {name: mlp_to_dict(m) for name, m in getattr(model, role).modules().items()}
        for role in ("source", "target")
    } | {"weights": {f.name: getattr(model.weights, f.name) for f in fields(model.weights)}}


def model_from_dict(doc: dict) -> GearModel:
    from .net import mlp_from_dict

    pipes = [TaskPipeline(**{name: mlp_from_dict(doc[role][name]) for name in MODULES}) for role in ("source", "target")]
    return GearModel(*pipes, LossWeights(**doc.get("weights", {})))
