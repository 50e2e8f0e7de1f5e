"""Shared data model: environment maps, transmitters, path-loss maps, masks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WEIGHT_SUM_TOL = 1e-9
RANGE_TOL = 0.0


class SampleValidationError(ValueError):
    """Raised when a loaded or constructed sample breaks a type invariant."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EnvironmentMap:
    """Normalized building heights, 0 marks open ground."""

    heights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "heights", _frozen(self.heights))

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    def __eq__(self, other):
        return isinstance(other, EnvironmentMap) and np.array_equal(self.heights, other.heights)


@dataclass(frozen=True)
class TransmitterSpec:
    i: int
    j: int
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "i", int(self.i))
        object.__setattr__(self, "j", int(self.j))
        object.__setattr__(self, "height", float(self.height))


@dataclass(frozen=True, eq=False)
class TransmitterMap:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PathLossMap:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class RegionMask:
    values: np.ndarray
    role: str = "building"

    def __post_init__(self):
        if self.role not in ("building", "receiver"):
            raise ValueError(f"unknown mask role {self.role!r}")
        object.__setattr__(self, "values", _frozen(self.values, dtype=np.uint8))

    def complement(self) -> "RegionMask":
        other = "receiver" if self.role == "building" else "building"
        return RegionMask(1 - self.values, role=other)


@dataclass(frozen=True, eq=False)
class Sample:
    """One scene: environment, its transmitters and (optionally) the ground truth.

    ``weights`` holds the per-transmitter mixing weight used when rasterizing
    ``tx_map``; single-transmitter samples carry ``(1.0,)``.
    """

    env: EnvironmentMap
    transmitters: tuple[TransmitterSpec, ...]
    tx_map: TransmitterMap
    target: Optional[PathLossMap] = None
    weights: tuple[float, ...] = field(default=())
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transmitters", tuple(self.transmitters))
        weights = tuple(float(w) for w in self.weights)
        if not weights and self.transmitters:
            weights = tuple([1.0 / len(self.transmitters)] * len(self.transmitters))
        object.__setattr__(self, "weights", weights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.env.shape


def rasterize_transmitters(
    specs: Sequence[TransmitterSpec],
    H: int,
    W: int,
    weights: Optional[Sequence[float]] = None,
) -> TransmitterMap:
    """Place ``weights[k] * specs[k].height`` at each transmitter pixel."""
    specs = list(specs)
    if weights is None:
        weights = [1.0 / len(specs)] * len(specs) if specs else []
    weights = [float(w) for w in weights]
    if len(weights) != len(specs):
        raise ValueError(f"got {len(weights)} weights for {len(specs)} transmitters")
    if specs and abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {sum(weights)!r}")
    grid = np.zeros((H, W), dtype=np.float64)
    seen = set()
    for k, (spec, w) in enumerate(zip(specs, weights)):
        if not (0 <= spec.i < H and 0 <= spec.j < W):
            raise IndexError(f"transmitter {k} at ({spec.i}, {spec.j}) is outside a {H}x{W} grid")
        if (spec.i, spec.j) in seen:
            raise ValueError(f"transmitter {k} duplicates position ({spec.i}, {spec.j})")
        seen.add((spec.i, spec.j))
        grid[spec.i, spec.j] = w * spec.height
    return TransmitterMap(grid)


def building_mask(env: EnvironmentMap) -> RegionMask:
    return RegionMask((env.heights > 0).astype(np.uint8), role="building")


def receiver_mask(env: EnvironmentMap) -> RegionMask:
    return building_mask(env).complement()


def make_sample(
    env: EnvironmentMap | np.ndarray,
    transmitters: Sequence[TransmitterSpec],
    target=None,
    weights: Optional[Sequence[float]] = None,
    sample_id: str = "",
) -> Sample:
    """Build a sample, rasterizing the transmitter map from ``transmitters``."""
    if not isinstance(env, EnvironmentMap):
        env = EnvironmentMap(env)
    H, W = env.shape
    transmitters = list(transmitters)
    if weights is None:
        weights = [1.0 / len(transmitters)] * len(transmitters) if transmitters else []
    tx_map = rasterize_transmitters(transmitters, H, W, weights)
    if target is not None and not isinstance(target, PathLossMap):
        target = PathLossMap(target)
    return Sample(env, tuple(transmitters), tx_map, target, tuple(weights), sample_id)


def _range_violation(name: str, grid: np.ndarray) -> Optional[str]:
    if not np.all(np.isfinite(grid)):
        return f"{name}: values must be finite"
    lo, hi = float(grid.min()), float(grid.max())
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        return f"{name}: values must lie in [0, 1], found range [{lo:g}, {hi:g}]"
    return None


def validate_sample(s: Sample, depth: Optional[int] = None) -> list[str]:
    """Return a list of invariant violations; empty means the sample is valid.

    ``depth`` (the network depth L) additionally enforces that H and W are
    divisible by 2**L.
    """
    out: list[str] = []
    H, W = s.env.shape
    if H < 8 or W < 8:
        out.append(f"EnvironmentMap.shape: H and W must be >= 8, got {H}x{W}")
    if depth is not None and (H % 2**depth or W % 2**depth):
        out.append(f"EnvironmentMap.shape: {H}x{W} not divisible by 2**{depth}")
    msg = _range_violation("EnvironmentMap.heights", s.env.heights)
    if msg:
        out.append(msg)

    if s.tx_map.shape != (H, W):
        out.append(f"TransmitterMap.shape: {s.tx_map.shape} does not match environment {H}x{W}")
    else:
        msg = _range_violation("TransmitterMap.values", s.tx_map.values)
        if msg:
            out.append(msg)
    if s.target is not None:
        if s.target.shape != (H, W):
            out.append(f"PathLossMap.shape: {s.target.shape} does not match environment {H}x{W}")
        else:
            msg = _range_violation("PathLossMap.values", s.target.values)
            if msg:
                out.append(msg)

    if len(s.weights) != len(s.transmitters):
        out.append(f"Sample.weights: {len(s.weights)} weights for {len(s.transmitters)} transmitters")
    seen = set()
    in_bounds = []
    for k, tx in enumerate(s.transmitters):
        if not (0 <= tx.i < H and 0 <= tx.j < W):
            out.append(f"TransmitterSpec[{k}]: position ({tx.i}, {tx.j}) out of bounds for {H}x{W}")
            continue
        if not (0.0 < tx.height <= 1.0):
            out.append(f"TransmitterSpec[{k}].height: must be in (0, 1], got {tx.height:g}")
        if (tx.i, tx.j) in seen:
            out.append(f"TransmitterSpec[{k}]: duplicate position ({tx.i}, {tx.j})")
        seen.add((tx.i, tx.j))
        in_bounds.append(k)

    if s.tx_map.shape == (H, W) and len(s.weights) == len(s.transmitters):
        nonzero = int(np.count_nonzero(s.tx_map.values))
        if nonzero != len(s.transmitters):
            out.append(f"TransmitterMap.values: {nonzero} nonzero cells for {len(s.transmitters)} transmitters")
        for k in in_bounds:
            tx = s.transmitters[k]
            expected = s.weights[k] * tx.height
            if abs(s.tx_map.values[tx.i, tx.j] - expected) > 1e-6:
                out.append(
                    f"TransmitterMap.values: cell ({tx.i}, {tx.j}) is {s.tx_map.values[tx.i, tx.j]:g}, "
                    f"expected weighted height {expected:g}"
                )

    if not out:
        env = s.env.heights
        on_roof = [k for k, tx in enumerate(s.transmitters) if env[tx.i, tx.j] > 0]
        if on_roof:
            # permitted (transmitters sit on rooftops in the real data), only flagged
            warnings.warn(f"transmitters {on_roof} are placed on building cells", stacklevel=2)
    return out


def check_sample(s: Sample, depth: Optional[int] = None) -> Sample:
    violations = validate_sample(s, depth)
    if violations:
        raise SampleValidationError(violations)
    return s
