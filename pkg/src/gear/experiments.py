"""Verification suite and the experiment drivers behind the CLI modes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticPair, corrupt_labels, fold_indices
from .geometry import InverseMode, curvature_at, flatness_ratio, module_derivatives, pullback_metric
from .net import ActivationKind, DenseLayer, Mlp, forward, init_conditioned, logistic_terms
from .oracle import FdConfig, compare_reports, compare_tensors, fd_derivative, fd_geometry_pipeline

# criterion tolerances for the random-module suite
SUITE_TOLERANCES = {
    "J": 1e-6,
    "H": 1e-4,
    "T3": 1e-4,
    "dg": 1e-4,
    "ddg": 1e-3,
    "gamma": 1e-4,
    "dgamma": 1e-3,
}
FLATNESS_TOL = 1e-6
BIANCHI_TOL = 1e-8
GOLDEN_ABS_TOL = 5e-4
MAX_CONDITION = 1e4


@dataclass
class Check:
    check_name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    kind: str = "rel"

    def to_dict(self) -> dict:
        return {
            "check_name": self.check_name,
            "max_rel_err": self.max_rel_err,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "error_kind": self.kind,
        }


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.check_name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _check(name, err, tol, kind="rel") -> Check:
    return Check(name, float(err), float(tol), bool(err <= tol), kind)


# -- golden fixtures ----------------------------------------------------------------

GOLDEN_QUADRATIC = {
    "W1": [[1.0, 2.0], [3.0, 4.0]],
    "b1": [3.0, 4.0],
    "W2": [[5.0, 6.0], [7.0, 8.0]],
    "x": [1.0, 2.0],
    "J": [[620.0, 880.0], [832.0, 1184.0]],
    "g": [[1076624.0, 1530688.0], [1530688.0, 2176256.0]],
}

GOLDEN_SILU = {
    "W1": [[0.1, 0.2], [0.3, 0.4]],
    "b1": [0.3, 0.4],
    "W2": [[0.5, 0.6], [0.7, 0.8]],
    "x": [0.1, 0.2],
    "sigma": [0.5866, 0.6248],
    "E": [[0.7047, 0.0], [0.0, 0.6005]],
    "J": [[0.1676, 0.2458], [0.2257, 0.3322]],
    "g": [[0.0790, 0.1161], [0.1161, 0.1708]],
}


def golden_module(fix: dict, act: ActivationKind) -> Mlp:
    # the second layer is affine with zero bias in both fixtures
    return Mlp(
        [
            DenseLayer(np.array(fix["W1"]), np.array(fix["b1"]), act),
            DenseLayer(np.array(fix["W2"]), np.zeros(2), ActivationKind.LINEAR),
        ]
    )


def golden_checks() -> list[Check]:
    out = []
    fix = GOLDEN_QUADRATIC
    _, stack = module_derivatives(golden_module(fix, ActivationKind.QUADRATIC), np.array(fix["x"]), 1)
    g = pullback_metric(stack.J)
    out.append(_check("golden_quadratic_J", np.abs(stack.J - fix["J"]).max(), 0.0, "abs"))
    out.append(_check("golden_quadratic_g", np.abs(g - fix["g"]).max(), 0.0, "abs"))

    fix = GOLDEN_SILU
    mlp = golden_module(fix, ActivationKind.SILU)
    x = np.array(fix["x"])
    first = mlp.layers[0]
    sigma, E = logistic_terms(first.W @ x + first.b)
    _, stack = module_derivatives(mlp, x, 1)
    g = pullback_metric(stack.J)
    for name, val in (("sigma", sigma), ("E", np.diag(E)), ("J", stack.J), ("g", g)):
        out.append(_check(f"golden_silu_{name}", np.abs(val - np.array(fix[name])).max(), GOLDEN_ABS_TOL, "abs"))
    return out


# -- random-module suite ------------------------------------------------------------


@dataclass
class SuiteCase:
    dim: int
    n_layers: int
    transfer: Mlp
    inverse: Mlp
    z: np.ndarray
    condition: float


def suite_cases(n_modules: int = 20, seed: int = 0, max_condition: float = MAX_CONDITION) -> list[SuiteCase]:
    """Random SiLU modules (dims 2..6, 1..4 layers) at well-conditioned points.

    Exact-inverse comparisons need g invertible to working precision, so a
    point whose pulled-back metric has condition number above ``max_condition``
    is redrawn (the module too after repeated failures).
    """
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n_modules:
        dim = int(rng.integers(2, 7))
        n_layers = int(rng.integers(1, 5))
        transfer = init_conditioned(dim, n_layers, rng)
        inverse = init_conditioned(dim, n_layers, rng)
        for _ in range(20):
            z = 0.5 * rng.normal(size=dim)
            _, stack = module_derivatives(transfer, z, 1)
            cond = float(np.linalg.cond(pullback_metric(stack.J)))
            if cond <= max_condition:
                cases.append(SuiteCase(dim, n_layers, transfer, inverse, z, cond))
                break
    return cases


def _bianchi(riemann) -> float:
    # R^a_[bcd]: R^a_bcd + R^a_cdb + R^a_dbc
    return float(np.abs(riemann + riemann.transpose(0, 2, 3, 1) + riemann.transpose(0, 3, 1, 2)).max())


def suite_checks(cases: list[SuiteCase], cfg: FdConfig | None = None) -> list[Check]:
    cfg = cfg or FdConfig()
    worst = {k: 0.0 for k in (*SUITE_TOLERANCES, "flatness", "bianchi", "g_sym", "gamma_sym", "riemann_antisym", "learned_scalar")}
    for case in cases:
        f = lambda p, m=case.transfer: forward(m, p).output  # noqa: E731
        _, stack = module_derivatives(case.transfer, case.z, 3)
        for name, arr, order in (("J", stack.J, 1), ("H", stack.H, 2), ("T3", stack.T3, 3)):
            num = fd_derivative(f, case.z, order, cfg)
            worst[name] = max(worst[name], compare_tensors(name, arr, num, 1.0).max_rel_err)
        ana = curvature_at(case.transfer, None, case.z, InverseMode.EXACT)
        num = fd_geometry_pipeline(case.transfer, None, case.z, InverseMode.EXACT, cfg)
        rep = compare_reports(ana, num, cfg)
        for name in ("dg", "ddg", "gamma", "dgamma"):
            worst[name] = max(worst[name], rep[name].max_rel_err)
        scale = max(1.0, float(np.abs(ana.gamma).max()) ** 2, float(np.abs(ana.dgamma).max()))
        worst["flatness"] = max(worst["flatness"], flatness_ratio(ana))
        worst["bianchi"] = max(worst["bianchi"], _bianchi(ana.riemann) / scale)
        g = ana.metric.g
        worst["g_sym"] = max(worst["g_sym"], float(np.abs(g - g.T).max()))
        worst["gamma_sym"] = max(worst["gamma_sym"], float(np.abs(ana.gamma - ana.gamma.transpose(0, 2, 1)).max()))
        worst["riemann_antisym"] = max(
            worst["riemann_antisym"], float(np.abs(ana.riemann + ana.riemann.transpose(0, 1, 3, 2)).max())
        )
        la = curvature_at(case.transfer, case.inverse, case.z, InverseMode.LEARNED)
        ln = fd_geometry_pipeline(case.transfer, case.inverse, case.z, InverseMode.LEARNED, cfg)
        worst["learned_scalar"] = max(worst["learned_scalar"], compare_reports(la, ln, cfg)["scalar"].max_rel_err)
    checks = [_check(f"oracle_{k}", worst[k], tol) for k, tol in SUITE_TOLERANCES.items()]
    checks.append(_check("oracle_learned_scalar", worst["learned_scalar"], cfg.tolerances["scalar"]))
    checks.append(_check("flatness_exact_inverse", worst["flatness"], FLATNESS_TOL))
    checks.append(_check("symmetry_g", worst["g_sym"], 0.0, "abs"))
    checks.append(_check("symmetry_gamma_lower", worst["gamma_sym"], 0.0, "abs"))
    checks.append(_check("antisymmetry_riemann", worst["riemann_antisym"], 0.0, "abs"))
    checks.append(_check("bianchi_first", worst["bianchi"], BIANCHI_TOL))
    return checks


def run_verify(n_modules: int = 20, seed: int = 0, cfg: FdConfig | None = None) -> VerifyReport:
    return VerifyReport(golden_checks() + suite_checks(suite_cases(n_modules, seed), cfg))


# -- training experiments -----------------------------------------------------------


def _split(pair: SyntheticPair, folds: int, seed: int):
    from .train import split_fold

    val_idx = fold_indices(len(pair.target), folds, seed)[0]
    return split_fold(pair.source, pair.target, val_idx), val_idx


def matched_stl_config(cfg, n_source: int, n_target: int):
    """STL config that gets as many optimizer updates as the GEAR run.

    GEAR takes a step for every source and target batch while STL only sees
    target batches, so epochs and patience are scaled by the batch ratio.
    """
    from .train import stl_config

    bs = cfg.batch_size
    ratio = (math.ceil(n_source / bs) + math.ceil(n_target / bs)) / math.ceil(n_target / bs)
    return replace(stl_config(cfg), epochs=int(round(cfg.epochs * ratio)), patience=int(round(cfg.patience * ratio)))


def transfer_benefit(pair: SyntheticPair, cfg, seeds) -> dict:
    """Best validation RMSE of GEAR and of the matched STL baseline per seed."""
    from .model import build_model
    from .train import train

    rows = []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        data, _ = _split(pair, c.folds, seed)
        stl = matched_stl_config(c, len(data.source), len(data.target))
        arch = replace(c.arch, features=pair.target.n_features)
        _, gear_rep = train(build_model(arch, seed, c.weights), data, c)
        _, stl_rep = train(build_model(arch, seed, c.weights), data, stl)
        rows.append({"seed": seed, "gear_rmse": gear_rep.best_val_rmse, "stl_rmse": stl_rep.best_val_rmse,
                     "gear_best_epoch": gear_rep.best_epoch, "stl_best_epoch": stl_rep.best_epoch})
    gear = float(np.median([r["gear_rmse"] for r in rows]))
    stl = float(np.median([r["stl_rmse"] for r in rows]))
    return {"seeds": rows, "median_gear_rmse": gear, "median_stl_rmse": stl, "gear_not_worse": gear <= stl}


ABLATION_GRID = (
    ("both_off", {"enable_map": False, "enable_curv": False}),
    ("map_only", {"enable_map": True, "enable_curv": False}),
    ("both_on", {"enable_map": True, "enable_curv": True}),
)


def ablation(pair: SyntheticPair, cfg, seeds) -> dict:
    """Train the three flag settings per seed; minimum validation MSE per run."""
    from .model import build_model
    from .train import train

    runs = []
    for seed in seeds:
        data, _ = _split(pair, cfg.folds, seed)
        arch = replace(cfg.arch, features=pair.target.n_features)
        for name, flags in ABLATION_GRID:
            c = replace(cfg, seed=seed, **flags)
            _, rep = train(build_model(arch, seed, c.weights), data, c)
            min_loss = min((h["val_rmse"] ** 2 for h in rep.history), default=rep.initial_val_rmse**2)
            runs.append({"seed": seed, "config": name, "min_val_loss": min_loss, "report": rep})
    med = {
        name: float(np.median([r["min_val_loss"] for r in runs if r["config"] == name])) for name, _ in ABLATION_GRID
    }
    return {
        "runs": runs,
        "median_min_val_loss": med,
        "on_le_map_only": med["both_on"] <= med["map_only"],
        "map_only_le_off": med["map_only"] <= med["both_off"],
    }


def corruption(pair: SyntheticPair, cfg, fraction: float = 0.1) -> dict:
    """Label-corruption protocol on the target task with clean-label evaluation."""
    from .model import build_model
    from .train import TrainData, rmse, train

    data, val_idx = _split(pair, cfg.folds, cfg.seed)
    corr = corrupt_labels(pair.target, fraction, cfg.seed, test_idx=val_idx, train=data.target)
    arch = replace(cfg.arch, features=pair.target.n_features)
    model, rep = train(build_model(arch, cfg.seed, cfg.weights), TrainData(corr.train, data.val, data.source), cfg)
    clean = pair.target.subset(corr.indices)
    clean_rmse = rmse(model, clean)[0] if len(clean) else None
    return {
        "fraction": fraction,
        "corrupted_indices": [int(i) for i in corr.indices],
        "clean_labels": [float(v) for v in corr.clean_labels],
        "warning": corr.warning,
        "clean_rmse_corrupted_rows": clean_rmse,
        "best_val_rmse": rep.best_val_rmse,
        "report": rep,
    }
