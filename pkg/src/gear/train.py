"""Gradients of the total loss, AdamW, the alternating training loop and cross-validation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from . import _jax  # noqa: F401  (float64 + pytree registration)
import jax
import jax.numpy as jnp
from jax import tree_util

from .data import Dataset, complement, fold_indices
from .geometry import InverseMode
from .model import (
    DROPOUT_MODULES,
    LOSS_NAMES,
    SOURCE_TO_TARGET,
    TARGET_TO_SOURCE,
    ArchConfig,
    GearModel,
    LossBreakdown,
    LossSettings,
    LossWeights,
    PairBatch,
    TrainingError,
    build_model,
    evaluate_losses,
)
from .oracle import FdConfig, fd_derivative


class ConfigError(ValueError):
    """Invalid training or run configuration."""


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    K: int = 1
    enable_map: bool = True
    enable_curv: bool = True
    enable_metric: bool = True
    enable_cons: bool = True
    seed: int = 0
    patience: int = 50
    folds: int = 4
    curv_rows: int = 16
    dropout: float = 0.2
    inverse_mode: InverseMode = InverseMode.LEARNED
    single_task: bool = False
    arch: ArchConfig = field(default_factory=ArchConfig)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        self.inverse_mode = InverseMode(self.inverse_mode)
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        for name in ("batch_size", "folds", "K", "curv_rows", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def settings(self) -> LossSettings:
        return LossSettings(
            K=self.K,
            mode=self.inverse_mode,
            enable_map=self.enable_map,
            enable_curv=self.enable_curv,
            enable_metric=self.enable_metric,
            enable_cons=self.enable_cons,
            curv_rows=self.curv_rows,
            single_task=self.single_task,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inverse_mode"] = self.inverse_mode.value
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        try:
            if "weights" in doc:
                doc["weights"] = LossWeights(**doc["weights"])
            if "arch" in doc:
                arch = dict(doc["arch"])
                for k in ("embed_hidden", "encoder_hidden", "head_hidden"):
                    if k in arch:
                        arch[k] = tuple(arch[k])
                doc["arch"] = ArchConfig(**arch)
            if "optimizer" in doc:
                doc["optimizer"] = AdamWConfig(**doc["optimizer"])
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def stl_config(cfg: TrainConfig) -> TrainConfig:
    """Single-task baseline: the target pipeline with l_reg + alpha l_auto only."""
    return replace(cfg, single_task=True, enable_map=False, enable_curv=False, enable_metric=False, enable_cons=False)


# -- gradients ----------------------------------------------------------------------


@dataclass
class GradientSet:
    """Gradient pytree shaped like the model, plus the loss it came from."""

    tree: GearModel
    loss: LossBreakdown | None = None

    def leaves(self) -> list[np.ndarray]:
        return tree_util.tree_leaves(self.tree)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.leaves()])

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.leaves())


def to_jax(tree):
    return tree_util.tree_map(jnp.asarray, tree)


def to_numpy(tree):
    return tree_util.tree_map(lambda a: np.array(a, dtype=np.float64), tree)


def _first_nonfinite(parts: dict) -> str | None:
    for name in LOSS_NAMES:
        if not math.isfinite(float(parts[name])):
            return name
    return None


def _as_batch(batch: PairBatch, xp) -> PairBatch:
    conv = (lambda a: None if a is None else xp.asarray(a))
    return PairBatch(conv(batch.x), conv(batch.y_t), conv(batch.y_s), conv(batch.row_weight))


def grad_total(
    model: GearModel,
    batch: PairBatch,
    cfg: TrainConfig | None = None,
    direction: str = SOURCE_TO_TARGET,
    method: str = "reverse",
    dropout=None,
) -> GradientSet:
    """Gradient of the total loss with respect to every parameter of both pipelines.

    ``method="reverse"`` differentiates the whole loss, the analytic curvature
    pipeline included, in reverse mode. ``method="fd"`` uses Richardson
    central differences and is limited to models of at most 500 parameters.
    """
    cfg = cfg or TrainConfig()
    if batch.x.shape[0] == 0:
        raise ValueError("empty batch")
    settings = cfg.settings()
    model = replace(model, weights=cfg.weights)
    if method == "fd":
        return _fd_grad(model, batch, settings, direction, dropout)
    if method != "reverse":
        raise ValueError(f"unknown gradient method {method!r}")
    jb = _as_batch(batch, jnp)

    def f(m, which=None):
        lb = evaluate_losses(m, jb, settings, direction, dropout)
        return (lb.total if which is None else lb.parts()[which]), lb.parts()

    (total, parts), g = jax.value_and_grad(f, has_aux=True)(to_jax(model))
    parts = {k: float(v) for k, v in parts.items()}
    bad = _first_nonfinite(parts)
    if bad:
        raise TrainingError(bad)
    grads = GradientSet(to_numpy(g))
    if not grads.all_finite():
        for name in LOSS_NAMES:
            gi = jax.grad(lambda m: f(m, name)[0])(to_jax(model))
            if not GradientSet(to_numpy(gi)).all_finite():
                raise TrainingError(name, f"gradient of {name!r} is not finite")
        raise TrainingError("total", "gradient is not finite")
    coef = settings.effective_weights(model.weights)
    grads.loss = LossBreakdown(**parts, total=float(total), weights=coef)
    return grads


def _fd_grad(model, batch, settings, direction, dropout, step: float = 1e-3) -> GradientSet:
    leaves, treedef = tree_util.tree_flatten(to_numpy(model))
    sizes = [a.size for a in leaves]
    if sum(sizes) > 500:
        raise ValueError(f"finite-difference gradient is limited to 500 parameters, model has {sum(sizes)}")
    shapes = [a.shape for a in leaves]
    theta = np.concatenate([a.ravel() for a in leaves])

    def unflatten(vec):
        out, k = [], 0
        for n, s in zip(sizes, shapes):
            out.append(vec[k : k + n].reshape(s))
            k += n
        return tree_util.tree_unflatten(treedef, out)

    def loss(vec):
        return float(evaluate_losses(unflatten(vec), batch, settings, direction, dropout).total)

    g = fd_derivative(loss, theta, 1, FdConfig(steps=(step, step, step)))
    lb = evaluate_losses(model, batch, settings, direction, dropout).as_floats()
    return GradientSet(unflatten(g), lb)


# -- optimizer ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: GearModel
    v: GearModel
    step: int = 0
    hyper: AdamWConfig = field(default_factory=AdamWConfig)

    @classmethod
    def init(cls, params, hyper: AdamWConfig | None = None) -> "OptimizerState":
        zeros = tree_util.tree_map(lambda a: np.zeros_like(np.asarray(a)), params)
        return cls(zeros, tree_util.tree_map(np.copy, zeros), 0, hyper or AdamWConfig())


def _adamw_update(params, grads, m, v, t, h: AdamWConfig):
    m = tree_util.tree_map(lambda mi, g: h.beta1 * mi + (1 - h.beta1) * g, m, grads)
    v = tree_util.tree_map(lambda vi, g: h.beta2 * vi + (1 - h.beta2) * g * g, v, grads)
    c1 = 1 - h.beta1**t
    c2 = 1 - h.beta2**t

    def upd(p, mi, vi):
        return p - h.lr * h.weight_decay * p - h.lr * (mi / c1) / ((vi / c2) ** 0.5 + h.eps)

    return tree_util.tree_map(upd, params, m, v), m, v


def adamw_step(params, grads, state: OptimizerState):
    """Decoupled-decay AdamW; returns ``(new_params, new_state)`` without mutating inputs."""
    g = grads.tree if isinstance(grads, GradientSet) else grads
    t = state.step + 1
    new, m, v = _adamw_update(params, g, state.m, state.v, t, state.hyper)
    return new, OptimizerState(m, v, t, state.hyper)


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainData:
    target: Dataset  # target-task training rows
    val: Dataset  # target-task validation rows
    source: Dataset | None = None


@dataclass
class FoldReport:
    fold: int
    history: list[dict]
    best_val_rmse: float
    best_val_rmse_raw: float
    best_epoch: int
    initial_val_rmse: float
    wall_time: float = 0.0
    aborted: str | None = None

    def to_dict(self, with_time: bool = False) -> dict:
        d = {
            "fold": self.fold,
            "best_val_rmse": self.best_val_rmse,
            "best_val_rmse_raw": self.best_val_rmse_raw,
            "best_epoch": self.best_epoch,
            "initial_val_rmse": self.initial_val_rmse,
            "aborted": self.aborted,
            "history": self.history,
        }
        if with_time:
            d["wall_time"] = self.wall_time
        return d

    def history_jsonl(self) -> str:
        return "".join(json.dumps(h) + "\n" for h in self.history)


def rmse(model: GearModel, ds: Dataset) -> tuple[float, float]:
    """(normalized, raw-unit) RMSE of the target pipeline on ``ds``."""
    err = np.asarray(model.target.predict(ds.x)) - ds.y
    r = float(np.sqrt(np.mean(err**2)))
    return r, r * ds.y_std


def dropout_masks(model: GearModel, direction: str, rate: float, rows: int, rng: np.random.Generator, single: bool = False):
    """Inverted-dropout masks for the hidden layers of transfer, inverse and head."""
    if rate == 0:
        return None
    main, other = model.pipelines(direction)
    roles = (("t", main),) if single else (("t", main), ("s", other))
    out = {}
    for role, pipe in roles:
        for name in DROPOUT_MODULES:
            layers = getattr(pipe, name).layers
            masks = [(rng.random((rows, l.n_out)) >= rate) / (1.0 - rate) for l in layers[:-1]]
            out[(role, name)] = masks + [None]
    return out


@lru_cache(maxsize=32)
def _step_fn(settings: LossSettings, direction: str, hyper: AdamWConfig):
    @jax.jit
    def step(model, m, v, t, x, y, w, masks):
        batch = PairBatch(x, y, None, w)

        def f(params):
            lb = evaluate_losses(params, batch, settings, direction, masks)
            return lb.total, lb.parts()

        (total, parts), g = jax.value_and_grad(f, has_aux=True)(model)
        finite = jnp.all(jnp.array([jnp.all(jnp.isfinite(a)) for a in tree_util.tree_leaves(g)]))
        new, m, v = _adamw_update(model, g, m, v, t, hyper)
        return new, m, v, total, parts, finite

    return step


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        idx = perm[start : start + size]
        pad = size - len(idx)
        w = np.ones(size)
        if pad:
            w[len(idx) :] = 0.0
            idx = np.concatenate([idx, np.full(pad, idx[0])])
        yield idx, w


def train(model: GearModel, data: TrainData, cfg: TrainConfig, fold: int = 0) -> tuple[GearModel, FoldReport]:
    """Alternate task roles over epochs and keep the best-validation parameters.

    Each epoch visits the source task's batches (source in the target role) and
    then the target task's batches, one AdamW step per batch. Validation RMSE
    of the target head decides early stopping and the returned parameters.
    """
    t0 = time.perf_counter()
    model = replace(to_numpy(model), weights=cfg.weights)
    settings = cfg.settings()
    rng = np.random.default_rng(cfg.seed)
    init_rmse, init_raw = rmse(model, data.val)
    best = (init_rmse, init_raw, 0, model)
    history: list[dict] = []
    aborted = None
    tasks = [(SOURCE_TO_TARGET, data.target)]
    if not cfg.single_task:
        if data.source is None:
            raise ConfigError("GEAR training needs a source dataset")
        tasks.insert(0, (TARGET_TO_SOURCE, data.source))
    params = to_jax(model)
    state = OptimizerState.init(model, cfg.optimizer)
    m, v = to_jax(state.m), to_jax(state.v)
    t = 0
    bs = cfg.batch_size
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in (*LOSS_NAMES, "total")}
        acc = []
        for direction, ds in tasks:
            step = _step_fn(settings, direction, cfg.optimizer)
            for idx, w in _batches(len(ds), bs, rng):
                masks = dropout_masks(model, direction, cfg.dropout, bs, rng, cfg.single_task)
                t += 1
                params, m, v, total, parts, finite = step(params, m, v, t, ds.x[idx], ds.y[idx], w, masks)
                acc.append((total, parts, finite))
        # one host sync per epoch
        n_steps = len(acc)
        host = jax.device_get(acc)
        for total, parts, finite in host:
            sums["total"] += float(total) / n_steps
            for k in LOSS_NAMES:
                sums[k] += float(parts[k]) / n_steps
            if not finite and aborted is None:
                aborted = "gradient"
        bad = _first_nonfinite(sums) or (None if math.isfinite(sums["total"]) else "total")
        if bad or aborted:
            aborted = bad or aborted
            break
        model = replace(to_numpy(params), weights=cfg.weights)
        val, val_raw = rmse(model, data.val)
        history.append(
            {
                "epoch": epoch,
                "train_total": sums["total"],
                "val_rmse": val,
                "val_rmse_raw": val_raw,
                "losses": {k: sums[k] for k in LOSS_NAMES},
            }
        )
        if val < best[0]:
            best = (val, val_raw, epoch, model)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    report = FoldReport(fold, history, best[0], best[1], best[2], init_rmse, time.perf_counter() - t0, aborted)
    return best[3], report


# -- cross-validation ---------------------------------------------------------------


@dataclass
class CVResult:
    folds: list[FoldReport]
    mean_rmse: float
    std_rmse: float
    mean_rmse_raw: float
    std_rmse_raw: float

    def to_dict(self, with_time: bool = False) -> dict:
        return {
            "rmse": self.mean_rmse,
            "std": self.std_rmse,
            "rmse_raw": self.mean_rmse_raw,
            "std_raw": self.std_rmse_raw,
            "folds": [f.to_dict(with_time) for f in self.folds],
        }


def aggregate(reports: list[FoldReport]) -> CVResult:
    """Mean and population std of the per-fold best validation RMSEs."""
    r = np.array([f.best_val_rmse for f in reports])
    raw = np.array([f.best_val_rmse_raw for f in reports])
    return CVResult(reports, float(r.mean()), float(r.std()), float(raw.mean()), float(raw.std()))


def split_fold(source: Dataset | None, target: Dataset, val_idx) -> TrainData:
    """Target rows of ``val_idx`` validate; source rows sharing their features are held out too."""
    train_idx = complement(len(target), val_idx)
    val = target.subset(val_idx)
    src = None
    if source is not None:
        src = source.subset(np.flatnonzero(~np.isin(source.ids, val.ids)))
    return TrainData(target.subset(train_idx), val, src)


def run_cv(source: Dataset | None, target: Dataset, cfg: TrainConfig) -> CVResult:
    """Seeded k-fold cross-validation over the target task."""
    try:
        folds = fold_indices(len(target), cfg.folds, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    reports = []
    for k, val_idx in enumerate(folds):
        data = split_fold(source, target, val_idx)
        model = build_model(replace(cfg.arch, features=target.n_features), seed=cfg.seed * 1000 + k, weights=cfg.weights)
        _, rep = train(model, data, cfg, fold=k)
        reports.append(rep)
    return aggregate(reports)
