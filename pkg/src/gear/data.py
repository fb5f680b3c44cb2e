"""Datasets: synthetic shared-structure task pairs, CSV ingestion, label corruption."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .net import ActivationKind, forward, init_params


class DataError(ValueError):
    """Malformed dataset file or inconsistent dataset arrays."""


@dataclass
class Dataset:
    """Normalized features and labels of one task.

    ``y_mean``/``y_std`` undo the label normalization for RMSE in raw units.
    ``ids`` identify feature rows shared between tasks (synthetic pairs); rows
    with equal ids carry the same features.
    """

    x: np.ndarray
    y: np.ndarray
    name: str = "task"
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DataError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if self.ids is None:
            self.ids = np.arange(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx], y=self.y[idx], ids=self.ids[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return replace(
            self,
            x=np.concatenate([self.x, other.x]),
            y=np.concatenate([self.y, other.y]),
            ids=np.concatenate([self.ids, other.ids]),
        )

    def denormalize_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def normalize_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_std


# -- synthetic pair ---------------------------------------------------------------


@dataclass
class SyntheticPairSpec:
    """Two regression tasks reading the same smooth latent map of the features.

    ``similarity`` mixes the target head: f_B = s f_A + sqrt(1 - s^2) f_C with
    f_C independent, each head scaled to unit variance; ``similarity=1`` gives
    identical heads.
    """

    features: int = 8
    latent: int = 4
    hidden: tuple[int, ...] = (16,)
    noise: tuple[float, float] = (0.1, 0.1)  # (source, target)
    n_source: int = 2000
    n_target: int = 200
    similarity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_source <= 0 or self.n_target <= 0:
            raise ValueError("sample counts must be positive")
        if min(self.noise) < 0:
            raise ValueError("noise std must be nonnegative")
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError("similarity must lie in [0, 1]")


@dataclass
class SyntheticPair:
    source: Dataset
    target: Dataset
    correlation: float  # between noiseless labels on shared rows


def generate_synthetic_pair(spec: SyntheticPairSpec | None = None) -> SyntheticPair:
    """Draw x ~ N(0, I), u = phi(x), y_A = f_A(u) + e_A, y_B = f_B(u) + e_B.

    Rows ``0..min(n_source, n_target)-1`` are shared between the tasks.
    """
    spec = spec or SyntheticPairSpec()
    rng = np.random.default_rng(spec.seed)
    silu = ActivationKind.SILU
    phi = init_params([spec.features, *spec.hidden, spec.latent], silu, rng)
    head_a = init_params([spec.latent, 8, 1], silu, rng)
    head_c = init_params([spec.latent, 8, 1], silu, rng)
    n = max(spec.n_source, spec.n_target)
    x = rng.normal(size=(n, spec.features))
    u = forward(phi, x).output

    def unit(h):
        v = forward(h, u).output[:, 0]
        return (v - v.mean()) / v.std()

    f_a = unit(head_a)
    s = spec.similarity
    f_b = f_a if s == 1.0 else s * f_a + np.sqrt(1.0 - s * s) * unit(head_c)
    y_a = f_a + spec.noise[0] * rng.normal(size=n)
    y_b = f_b + spec.noise[1] * rng.normal(size=n)
    m = min(spec.n_source, spec.n_target)
    corr = float(np.corrcoef(f_a[:m], f_b[:m])[0, 1]) if m > 1 else 1.0
    ids = np.arange(n)
    source = Dataset(x[: spec.n_source], y_a[: spec.n_source], "source", ids=ids[: spec.n_source])
    target = Dataset(x[: spec.n_target], y_b[: spec.n_target], "target", ids=ids[: spec.n_target])
    return SyntheticPair(source, target, corr)


# -- CSV ----------------------------------------------------------------------------


def load_csv(path, train_rows=None, name: str | None = None) -> Dataset:
    """Read ``feature_0,...,feature_{d-1},label`` and z-score every column.

    Statistics come from ``train_rows`` (default all rows) so validation rows
    never leak into the normalization. Constant columns keep std 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"feature_{i}" for i in range(d)] + ["label"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DataError(f"{path}:1: header must be feature_0..feature_{{d-1}},label")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{line_no}: expected {d + 1} cells, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-numeric cell") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite value")
    ref = data if train_rows is None else data[np.asarray(train_rows)]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std[std == 0] = 1.0
    z = (data - mean) / std
    return Dataset(z[:, :d], z[:, d], name or path.stem, mean[:d], std[:d], float(mean[d]), float(std[d]))


def write_csv(path, x, y) -> None:
    x = np.asarray(x)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(label))])


# -- splits -------------------------------------------------------------------------


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded permutation split into ``folds`` nearly equal validation folds."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError(f"{n} rows cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def complement(n: int, idx) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[np.asarray(idx, dtype=np.int64)] = False
    return np.flatnonzero(mask)


# -- label corruption ---------------------------------------------------------------


@dataclass
class Corruption:
    train: Dataset  # training split with the negated rows appended
    injected: Dataset  # the negated copies alone
    indices: np.ndarray  # rows of the test partition that were corrupted
    clean_labels: np.ndarray
    warning: str | None = None
    eligible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def corrupt_labels(
    dataset: Dataset,
    fraction: float,
    seed: int = 0,
    test_idx=None,
    train: Dataset | None = None,
) -> Corruption:
    """Negate a fraction of large-magnitude test labels and inject them into training.

    Eligible rows have ``|label| > std(labels)`` (population std over the whole
    dataset). ``round(fraction * n_test)`` of them, capped by the eligible count,
    are drawn without replacement from the test partition ``test_idx`` (default
    all rows), copied with labels times -1 and appended to ``train`` (default
    the dataset itself). Returned indices refer to ``dataset`` rows.
    """
    if len(dataset) == 0:
        raise DataError("cannot corrupt an empty dataset")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    test_idx = np.arange(len(dataset)) if test_idx is None else np.asarray(test_idx, dtype=np.int64)
    train = dataset if train is None else train
    std = float(np.std(dataset.y))
    eligible = test_idx[np.abs(dataset.y[test_idx]) > std]
    k = min(int(round(fraction * len(test_idx))), len(eligible))
    message = None
    if fraction > 0 and len(eligible) == 0:
        message = "no label exceeds the dataset standard deviation; nothing corrupted"
        warnings.warn(message, RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    injected = dataset.subset(chosen)
    injected = replace(injected, y=-injected.y)
    return Corruption(train.concat(injected), injected, chosen, dataset.y[chosen].copy(), message, eligible)
