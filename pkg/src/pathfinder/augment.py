"""Grid symmetries, transmitter-oriented mixup and multi-transmitter benchmark sets.

Orientation convention: rotations turn counter-clockwise in the Cartesian
frame where the row index grows upward (the grid drawn with
``origin="lower"``). A pixel (i, j) of an N x N grid goes to (j, N-1-i)
under ``rot90``; in array display order this is ``np.rot90(a, k=-1)``.
"""
from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    EnvironmentMap,
    PathLossMap,
    Sample,
    TransmitterMap,
    TransmitterSpec,
    check_sample,
    rasterize_transmitters,
)

log = logging.getLogger(__name__)


class AugOp(str, enum.Enum):
    identity = "identity"
    rot90 = "rot90"
    rot180 = "rot180"
    rot270 = "rot270"
    flip_h = "flip_h"
    flip_v = "flip_v"
    flip_diag = "flip_diag"

    @property
    def inverse(self) -> "AugOp":
        return {AugOp.rot90: AugOp.rot270, AugOp.rot270: AugOp.rot90}.get(self, self)

    @property
    def needs_square(self) -> bool:
        return self in (AugOp.rot90, AugOp.rot270, AugOp.flip_diag)


def transform_grid(a: np.ndarray, op: AugOp) -> np.ndarray:
    op = AugOp(op)
    if op is AugOp.identity:
        out = a
    elif op is AugOp.rot90:
        out = np.rot90(a, k=-1)
    elif op is AugOp.rot180:
        out = np.rot90(a, k=2)
    elif op is AugOp.rot270:
        out = np.rot90(a, k=1)
    elif op is AugOp.flip_h:
        out = a[:, ::-1]
    elif op is AugOp.flip_v:
        out = a[::-1, :]
    else:
        out = a.T
    return np.ascontiguousarray(out)


def transform_point(i: int, j: int, H: int, W: int, op: AugOp) -> tuple[int, int]:
    op = AugOp(op)
    if op is AugOp.identity:
        return i, j
    if op is AugOp.rot90:
        return j, H - 1 - i
    if op is AugOp.rot180:
        return H - 1 - i, W - 1 - j
    if op is AugOp.rot270:
        return W - 1 - j, i
    if op is AugOp.flip_h:
        return i, W - 1 - j
    if op is AugOp.flip_v:
        return H - 1 - i, j
    return j, i


def apply_aug(sample: Sample, op: AugOp) -> Sample:
    """Apply one pixel bijection jointly to every grid and transmitter of a sample."""
    op = AugOp(op)
    H, W = sample.shape
    if op.needs_square and H != W:
        raise ValueError(f"{op.value} needs a square grid, got {H}x{W}")
    if op is AugOp.identity:
        return sample
    txs = tuple(
        TransmitterSpec(*transform_point(t.i, t.j, H, W, op), t.height) for t in sample.transmitters
    )
    target = None if sample.target is None else PathLossMap(transform_grid(sample.target.values, op))
    return Sample(
        EnvironmentMap(transform_grid(sample.env.heights, op)),
        txs,
        TransmitterMap(transform_grid(sample.tx_map.values, op)),
        target,
        sample.weights,
        sample.sample_id,
    )


@dataclass
class MixSpec:
    alpha: float = 1.0
    beta: Optional[float] = None

    def draw(self, rng: np.random.Generator) -> float:
        if self.beta is not None:
            return float(self.beta)
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        return float(rng.beta(self.alpha, self.alpha))


def tom_mixup(sample_i: Sample, sample_j: Sample, beta: float, op: AugOp = AugOp.identity) -> Sample:
    """Mix two same-map samples: S and Y become beta-weighted sums of the augmented parts.

    Transmitters with zero resulting weight (beta of exactly 0 or 1) are
    dropped from the transmitter list.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if sample_i.env != sample_j.env:
        raise ValueError("tom_mixup needs both samples on the same environment map")
    a = apply_aug(sample_i, op)
    b = apply_aug(sample_j, op)
    txs, weights = [], []
    for s, w in ((a, beta), (b, 1.0 - beta)):
        for tx, wk in zip(s.transmitters, s.weights):
            if w * wk > 0:
                txs.append(tx)
                weights.append(w * wk)
    positions = [(t.i, t.j) for t in txs]
    if len(set(positions)) != len(positions):
        raise ValueError("mixed samples share a transmitter position")
    s_mix = beta * a.tx_map.values + (1.0 - beta) * b.tx_map.values
    y_mix = None
    if a.target is not None and b.target is not None:
        y_mix = PathLossMap(beta * a.target.values + (1.0 - beta) * b.target.values)
    sid = f"mix({a.sample_id},{b.sample_id},{beta:.4f},{AugOp(op).value})"
    return Sample(a.env, tuple(txs), TransmitterMap(s_mix), y_mix, tuple(weights), sid)


# --------------------------------------------------------------------------
# multi-transmitter benchmark
# --------------------------------------------------------------------------

S2MT_COUNTS = (2, 3, 4, 5)


@dataclass
class S2MTSet:
    n_tx: int
    seed: int
    samples: list[Sample] = field(default_factory=list)
    components: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "n_tx": self.n_tx,
            "seed": self.seed,
            "weights": [1.0 / self.n_tx] * self.n_tx,
            "items": [
                {"sample_id": s.sample_id, "map_id": m, "tx_indices": list(idx)}
                for s, (m, idx) in zip(self.samples, self.components)
            ],
        }


def combine_average(parts: Sequence[Sample], sample_id: str = "") -> Sample:
    """Equal-weight combination of single-transmitter samples of one map."""
    N = len(parts)
    env = parts[0].env
    if any(p.env != env for p in parts[1:]):
        raise ValueError("components must share one environment map")
    txs = [t for p in parts for t in p.transmitters]
    H, W = env.shape
    tx_map = rasterize_transmitters(txs, H, W, [1.0 / N] * N)
    target = None
    if all(p.target is not None for p in parts):
        acc = np.zeros((H, W), dtype=np.float64)
        for p in parts:
            acc += p.target.values
        target = PathLossMap(acc / N)
    return Sample(env, tuple(txs), tx_map, target, tuple([1.0 / N] * N), sample_id)


def build_s2mt_set(
    samples_by_map: Mapping[str, Sequence[Sample]],
    n_tx: int,
    seed: int,
    per_map: int = 8,
) -> S2MTSet:
    """Deterministic N-transmitter scenes with averaged labels, no augmentation.

    Every map contributes up to ``per_map`` distinct transmitter combinations.
    Maps with fewer than ``n_tx`` single-transmitter samples are skipped.
    """
    if n_tx < 2:
        raise ValueError(f"multi-transmitter sets need N >= 2, got {n_tx}")
    rng = np.random.default_rng([seed, n_tx])
    out = S2MTSet(n_tx, seed)
    for map_id in sorted(samples_by_map):
        singles = list(samples_by_map[map_id])
        n = len(singles)
        if n < n_tx:
            log.warning("map %s has %d transmitters, skipping N=%d", map_id, n, n_tx)
            continue
        total = math.comb(n, n_tx)
        if total <= per_map:
            combos = list(itertools.combinations(range(n), n_tx))
        else:
            chosen: set[tuple[int, ...]] = set()
            combos = []
            while len(combos) < per_map:
                c = tuple(sorted(int(x) for x in rng.choice(n, size=n_tx, replace=False)))
                if c not in chosen:
                    chosen.add(c)
                    combos.append(c)
        for c_idx, combo in enumerate(combos):
            s = combine_average([singles[k] for k in combo], sample_id=f"{map_id}_n{n_tx}_c{c_idx}")
            out.samples.append(check_sample(s))
            out.components.append((map_id, combo))
    return out


def save_s2mt_set(bench: S2MTSet, root) -> Path:
    """Write a benchmark set in the dataset grid format plus ``sidecar.json``."""
    from .dataset import write_grid, write_tx_list

    root = Path(root)
    written_maps = set()
    for s, (map_id, _) in zip(bench.samples, bench.components):
        if map_id not in written_maps:
            write_grid(root / "maps" / f"{map_id}.env", s.env.heights)
            written_maps.add(map_id)
        write_tx_list(root / "tx" / f"{s.sample_id}.txt", s.transmitters)
        if s.target is not None:
            write_grid(root / "targets" / f"{s.sample_id}.pl", s.target.values)
    path = root / "sidecar.json"
    path.write_text(json.dumps(bench.sidecar(), indent=1))
    return path


def load_s2mt_set(root) -> S2MTSet:
    from .dataset import read_grid, read_tx_list
    from .core import make_sample

    root = Path(root)
    meta = json.loads((root / "sidecar.json").read_text())
    bench = S2MTSet(meta["n_tx"], meta["seed"])
    w = meta["weights"]
    for item in meta["items"]:
        sid = item["sample_id"]
        env = read_grid(root / "maps" / f"{item['map_id']}.env")
        txs = read_tx_list(root / "tx" / f"{sid}.txt")
        tpath = root / "targets" / f"{sid}.pl"
        target = read_grid(tpath) if tpath.exists() else None
        bench.samples.append(make_sample(env, txs, target, w, sample_id=sid))
        bench.components.append((item["map_id"], tuple(item["tx_indices"])))
    return bench
