"""Datasets, preprocessing, splits, batching and the synthetic CSI generator.

Datasets carry the original sample indices and a split tag, so every batch
can be traced back to the samples it came from.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterator

import numpy as np

from .csit import load_csi_tensor
from .errors import ConfigurationError, DataError, DimensionError, ParseError

STD_FLOOR = 1e-8
PRETRAIN_RATIOS = (0.8, 0.2)
FINETUNE_RATIOS = (0.90, 0.05, 0.05)
CTW2020_AREA = (646.0, 943.0, 41.0)


@dataclass(kw_only=True)
class UnlabeledDataset:
    features: np.ndarray
    indices: np.ndarray = None
    tag: str = "all"
    source: str = ""

    def __post_init__(self):
        if self.features.ndim < 2:
            raise DimensionError(f"features need shape [n, ...], got {list(self.features.shape)}")
        if self.indices is None:
            self.indices = np.arange(len(self.features))
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape != (len(self.features),):
            raise DimensionError("indices must give one original index per sample")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, rows: np.ndarray, tag: str | None = None):
        rows = np.asarray(rows, dtype=np.int64)
        kw = {"features": self.features[rows], "indices": self.indices[rows],
              "tag": self.tag if tag is None else tag}
        if isinstance(self, LabeledDataset):
            kw["positions"] = self.positions[rows]
        return replace(self, **kw)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.features)):
            bad = int(np.count_nonzero(~np.isfinite(self.features)))
            raise DataError(f"{self.source or 'dataset'}: {bad} non-finite feature values")


@dataclass(kw_only=True)
class LabeledDataset(UnlabeledDataset):
    positions: np.ndarray

    def __post_init__(self):
        super().__post_init__()
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DimensionError(f"positions must be [n, 3], got {list(self.positions.shape)}")
        if len(self.positions) != len(self.features):
            raise DimensionError(
                f"{len(self.features)} feature samples but {len(self.positions)} positions"
            )

    def validate(self) -> None:
        super().validate()
        if not np.all(np.isfinite(self.positions)):
            raise DataError(f"{self.source or 'dataset'}: non-finite positions")


def average_measurements(raw: np.ndarray) -> np.ndarray:
    """Mean over the trailing measurement axis, ``[n, a, s, m] -> [n, a, s]``."""
    if raw.ndim < 2:
        raise DimensionError(f"expected a measurement axis, got shape {list(raw.shape)}")
    if raw.shape[-1] == 0:
        raise DimensionError("cannot average over zero measurements")
    return raw.mean(axis=-1, dtype=np.float64).astype(raw.dtype, copy=False)


# --------------------------------------------------------------------- splits

def split_sizes(n: int, ratios) -> list[int]:
    """Floor allocation of ``n`` samples; the remainder goes to the first split."""
    fr = [Fraction(r).limit_denominator(10 ** 9) for r in ratios]
    if not fr or any(r <= 0 for r in fr):
        raise ConfigurationError(f"split ratios must be positive, got {list(ratios)}")
    total = sum(fr)
    sizes = [math.floor(n * r / total) for r in fr]
    sizes[0] += n - sum(sizes)
    if any(s == 0 for s in sizes):
        raise ConfigurationError(f"splitting {n} samples by {list(ratios)} leaves an empty split: {sizes}")
    return sizes


def split_tags(k: int) -> list[str]:
    if k == 2:
        return ["train", "val"]
    if k == 3:
        return ["train", "val", "test"]
    return [f"split{i}" for i in range(k)]


def split(dataset, ratios, seed: int):
    """Seeded shuffle followed by contiguous slicing into ``len(ratios)`` parts."""
    sizes = split_sizes(len(dataset), ratios)
    order = np.random.default_rng(seed).permutation(len(dataset))
    out, start = [], 0
    for size, tag in zip(sizes, split_tags(len(sizes))):
        out.append(dataset.subset(order[start:start + size], tag=tag))
        start += size
    return out


# -------------------------------------------------------------------- batches

@dataclass
class Batch:
    features: np.ndarray
    positions: np.ndarray | None
    indices: np.ndarray


def batches(dataset, batch_size: int, seed: int | None = None, epoch: int = 0) -> Iterator[Batch]:
    """Mini-batches in an order reshuffled per ``(seed, epoch)``.

    ``seed=None`` keeps dataset order.  The final short batch is kept.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("cannot batch an empty dataset")
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    positions = getattr(dataset, "positions", None)
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        yield Batch(dataset.features[rows],
                    None if positions is None else positions[rows],
                    dataset.indices[rows])


# ------------------------------------------------------------ standardization

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    enabled: bool = True

    def apply(self, x: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return x
        return ((x - self.mean) / self.std).astype(x.dtype, copy=False)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return x
        return (x * self.std + self.mean).astype(x.dtype, copy=False)


def fit_standardizer(train: np.ndarray, enabled: bool = True) -> Standardizer:
    """Per-cell mean/std over the sample axis, std floored at 1e-8."""
    train64 = np.asarray(train, dtype=np.float64)
    mean = train64.mean(axis=0)
    std = np.maximum(train64.std(axis=0), STD_FLOOR)
    return Standardizer(mean.astype(train.dtype), std.astype(train.dtype), enabled)


def identity_standardizer(shape, dtype=np.float32) -> Standardizer:
    return Standardizer(np.zeros(shape, dtype), np.ones(shape, dtype), enabled=False)


# ------------------------------------------------------------------ synthetic

@dataclass
class SyntheticConfig:
    n_unlabeled: int = 2000
    n_labeled: int = 200
    height: int = 16
    width: int = 32
    area: tuple[float, float, float] = CTW2020_AREA
    noise_std: float = 0.05
    n_components: int = 8
    max_cycles: float = 1.5
    seed: int = 0

    def __post_init__(self):
        self.area = tuple(float(a) for a in self.area)
        if self.height < 4 or self.width < 4:
            raise ConfigurationError(f"synthetic features need h, w >= 4, got {self.height}x{self.width}")
        if len(self.area) != 3 or any(a <= 0 for a in self.area):
            raise ConfigurationError(f"area must be three positive ranges, got {self.area}")
        if self.n_unlabeled < 1 or self.n_labeled < 1:
            raise ConfigurationError(
                f"need at least one unlabeled and one labeled sample, got "
                f"{self.n_unlabeled}/{self.n_labeled}"
            )
        if self.noise_std < 0 or self.n_components < 1 or self.max_cycles <= 0:
            raise ConfigurationError("need noise_std >= 0, n_components >= 1 and max_cycles > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area"] = list(self.area)
        return d


class SyntheticMap:
    """Fixed smooth map from a 3-D position to an ``h x w`` feature matrix.

    ``feature[i, j] = sum_k a_k cos(w_k . p + phi_k[i, j])`` where each phase
    field ``phi_k`` is a linear ramp over antenna/subcarrier index plus a slow
    ripple, so neighbouring cells are strongly correlated.  Spatial
    frequencies ``w_k`` give up to ``max_cycles`` periods across each axis
    of the area.
    """

    def __init__(self, height: int, width: int, area, n_components: int, rng: np.random.Generator,
                 max_cycles: float = 1.5):
        k = n_components
        area = np.asarray(area, dtype=np.float64)
        amp = rng.uniform(0.5, 1.5, size=k)
        self.amplitude = amp * math.sqrt(2.0 / np.sum(amp ** 2))
        self.omega = 2 * np.pi * rng.uniform(-max_cycles, max_cycles, size=(k, 3)) / area
        ii = np.arange(height)[None, :, None] / height
        jj = np.arange(width)[None, None, :] / width
        offset = rng.uniform(0, 2 * np.pi, size=(k, 1, 1))
        ramp_i, ramp_j = (rng.uniform(-1.5, 1.5, size=(2, k, 1, 1)))
        ripple = rng.uniform(0, 1.0, size=(k, 1, 1))
        rip_i, rip_j = rng.uniform(-1.0, 1.0, size=(2, k, 1, 1))
        rip_phase = rng.uniform(0, 2 * np.pi, size=(k, 1, 1))
        self.phase = (offset + 2 * np.pi * (ramp_i * ii + ramp_j * jj)
                      + ripple * np.sin(2 * np.pi * (rip_i * ii + rip_j * jj) + rip_phase))
        self.shape = (height, width)

    def features(self, positions: np.ndarray) -> np.ndarray:
        theta = np.asarray(positions, dtype=np.float64) @ self.omega.T  # n, k
        a_cos = self.amplitude[:, None, None] * np.cos(self.phase)
        a_sin = self.amplitude[:, None, None] * np.sin(self.phase)
        return (np.tensordot(np.cos(theta), a_cos, axes=1)
                - np.tensordot(np.sin(theta), a_sin, axes=1))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[UnlabeledDataset, LabeledDataset]:
    """Seeded unlabeled + labeled datasets drawn from one :class:`SyntheticMap`."""
    map_rng, pos_rng, noise_rng = (np.random.default_rng([cfg.seed, s]) for s in range(3))
    fmap = SyntheticMap(cfg.height, cfg.width, cfg.area, cfg.n_components, map_rng, cfg.max_cycles)
    area = np.asarray(cfg.area)
    pos_u = pos_rng.uniform(0, 1, size=(cfg.n_unlabeled, 3)) * area
    pos_l = pos_rng.uniform(0, 1, size=(cfg.n_labeled, 3)) * area

    def sample(pos):
        x = fmap.features(pos)
        if cfg.noise_std > 0:
            x = x + noise_rng.normal(0.0, cfg.noise_std, size=x.shape)
        return x.astype(np.float32)

    src = f"synthetic(seed={cfg.seed})"
    unlabeled = UnlabeledDataset(features=sample(pos_u), source=src)
    labeled = LabeledDataset(features=sample(pos_l), positions=pos_l.astype(np.float32), source=src)
    return unlabeled, labeled


# ------------------------------------------------------------------------ I/O

def load_positions_csv(path: str | os.PathLike) -> np.ndarray:
    """Read an ``x,y,z`` CSV into a float64 ``[n, 3]`` array (meters)."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != "x,y,z":
        raise ParseError(f"{path}: expected header 'x,y,z'", line=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"{path}: expected 3 columns, found {len(parts)}", line=lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=lineno) from None
    if not rows:
        raise ParseError(f"{path}: no position rows", line=2)
    return np.asarray(rows, dtype=np.float64)


def save_positions_csv(path: str | os.PathLike, positions: np.ndarray) -> None:
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DimensionError(f"positions must be [n, 3], got {list(positions.shape)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,z\n")
        for row in positions.astype(np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _load_features(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    x = load_csi_tensor(path)
    if x.ndim == 4:
        x = average_measurements(x)
    if x.ndim != 3:
        raise DimensionError(f"{path}: expected [n, h, w] or [n, h, w, m] features, got {list(x.shape)}")
    return x


def load_unlabeled(path) -> UnlabeledDataset:
    ds = UnlabeledDataset(features=_load_features(path), source=str(path))
    ds.validate()
    return ds


def load_labeled(features_path, positions_path) -> LabeledDataset:
    if not os.path.exists(positions_path):
        raise DataError(f"no such file: {positions_path}")
    x = _load_features(features_path)
    pos = load_positions_csv(positions_path).astype(x.dtype)
    ds = LabeledDataset(features=x, positions=pos, source=str(features_path))
    ds.validate()
    return ds
