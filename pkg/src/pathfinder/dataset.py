"""On-disk datasets, the synthetic occlusion oracle and order-based splits.

Layout under a dataset root::

    maps/<id>.env              building heights, binary grid
    tx/<id>.txt                one ``i j I`` triple per line
    targets/<id>/<k>.pl        path loss of transmitter k, binary grid
    manifest.json              index (optional; rebuilt by scanning if absent)

A binary grid is an 8-byte little-endian header ``H:uint32, W:uint32``
followed by ``H*W`` little-endian float32 values in row-major order.
``.png`` files (8-bit grayscale, value/255) are accepted in place of
``.env``/``.pl`` for exported third-party datasets.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import (
    Sample,
    SampleValidationError,
    TransmitterSpec,
    make_sample,
    validate_sample,
)

log = logging.getLogger(__name__)

GRID_EXTS = (".env", ".pl", ".png")


class DatasetError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# grid IO
# --------------------------------------------------------------------------

def write_grid(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([grid.shape], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_grid_shape(path) -> tuple[int, int]:
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return im.height, im.width
    with open(path, "rb") as fh:
        raw = fh.read(8)
    if len(raw) != 8:
        raise DatasetError(f"{path}: truncated header")
    H, W = np.frombuffer(raw, dtype="<u4")
    return int(H), int(W)


def read_grid(path) -> np.ndarray:
    """Read a binary or 8-bit grayscale grid as float64."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    if path.suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "I"):
                im = im.convert("L")
            arr = np.asarray(im)
        if arr.dtype != np.uint8:
            raise DatasetError(f"{path}: expected an 8-bit grayscale image, got {arr.dtype}")
        return arr.astype(np.float64) / 255.0
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    H, W = (int(v) for v in np.frombuffer(raw[:8], dtype="<u4"))
    body = raw[8:]
    if len(body) != 4 * H * W:
        raise DatasetError(f"{path}: expected {4 * H * W} data bytes for {H}x{W}, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float64)


def write_tx_list(path, specs: Sequence[TransmitterSpec]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s.i} {s.j} {s.height!r}\n" for s in specs), encoding="ascii")


def read_tx_list(path) -> list[TransmitterSpec]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            out.append(TransmitterSpec(int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected 'i j I', got {line!r}") from None
    return out


# --------------------------------------------------------------------------
# grid traversal
# --------------------------------------------------------------------------

def traverse_cells(src: tuple[int, int], dst: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells crossed by the segment between two pixel centres, excluding ``src``.

    Float-stepping voxel walk. When the segment passes exactly through a cell
    corner both coordinates advance together, so the two side cells are not
    visited and no cell is counted twice.
    """
    src = (int(src[0]), int(src[1]))
    dst = (int(dst[0]), int(dst[1]))
    x0, y0 = src[0] + 0.5, src[1] + 0.5
    x1, y1 = dst[0] + 0.5, dst[1] + 0.5
    dx, dy = x1 - x0, y1 - y0
    cx, cy = src
    sx = (dx > 0) - (dx < 0)
    sy = (dy > 0) - (dy < 0)
    tdx = abs(1.0 / dx) if dx else math.inf
    tdy = abs(1.0 / dy) if dy else math.inf
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    cells = []
    while (cx, cy) != dst:
        if math.isclose(tmx, tmy, rel_tol=1e-12, abs_tol=1e-12):
            cx += sx
            cy += sy
            tmx += tdx
            tmy += tdy
        elif tmx < tmy:
            cx += sx
            tmx += tdx
        else:
            cy += sy
            tmy += tdy
        cells.append((cx, cy))
    return cells


def count_wall_crossings(solid: np.ndarray, src: tuple[int, int]) -> np.ndarray:
    """For every pixel p, the number of solid cells on the walk src -> p.

    Integer formulation of :func:`traverse_cells`, vectorized over all
    destinations. The source cell is never counted; the destination is.
    """
    H, W = solid.shape
    ri, rj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ri, rj = ri.ravel(), rj.ravel()
    di = ri - src[0]
    dj = rj - src[1]
    adi, adj = np.abs(di), np.abs(dj)
    si, sj = np.sign(di), np.sign(dj)
    ci = np.full_like(ri, src[0])
    cj = np.full_like(rj, src[1])
    # next boundary crossings: i-crossing k happens at t=(2k-1)/(2|di|); compare
    # (2k-1)|dj| against (2m-1)|di| to order them exactly in integers
    k = np.ones_like(ri)
    m = np.ones_like(rj)
    count = np.zeros(ri.shape, dtype=np.int64)
    big = np.iinfo(np.int64).max
    for _ in range(int((adi + adj).max(initial=0))):
        active = (ci != ri) | (cj != rj)
        if not active.any():
            break
        a = np.where(k <= adi, (2 * k - 1) * adj, big)
        b = np.where(m <= adj, (2 * m - 1) * adi, big)
        step_i = active & (a <= b)
        step_j = active & (b <= a)
        ci = ci + np.where(step_i, si, 0)
        k = k + step_i
        cj = cj + np.where(step_j, sj, 0)
        m = m + step_j
        count += active & solid[ci, cj]
    return count.reshape(H, W)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale stand-in for ray-traced ground truth (declared synthetic).

    Path loss at p for a transmitter at q is
    ``clamp01(a**k / (1 + decay * |p - q|))`` with k the number of building
    cells crossed on the way.
    """

    H: int = 64
    W: int = 64
    decay: float = 0.08
    wall_attenuation: float = 0.45
    min_buildings: int = 4
    max_buildings: int = 10
    min_size: int = 4
    max_size: int = 16
    min_height: float = 0.2
    max_height: float = 1.0
    tx_height: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.H < 8 or self.W < 8:
            raise ValueError("H and W must be >= 8")
        if not self.decay > 0:
            raise ValueError("decay must be > 0")
        if not 0 < self.wall_attenuation < 1:
            raise ValueError("wall_attenuation must lie in (0, 1)")
        if not 0 < self.tx_height <= 1:
            raise ValueError("tx_height must lie in (0, 1]")
        if not 0 < self.min_height <= self.max_height <= 1:
            raise ValueError("building heights must satisfy 0 < min <= max <= 1")
        if not 0 <= self.min_buildings <= self.max_buildings:
            raise ValueError("building counts must satisfy 0 <= min <= max")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("building sizes must satisfy 1 <= min <= max")


def oracle_path_loss(
    heights: np.ndarray,
    transmitters: Sequence[TransmitterSpec],
    cfg: SynthConfig,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Synthetic path loss, the weighted sum of per-transmitter oracle maps."""
    transmitters = list(transmitters)
    if weights is None:
        weights = [1.0 / len(transmitters)] * len(transmitters)
    solid = np.asarray(heights) > 0
    H, W = solid.shape
    ri, rj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    out = np.zeros((H, W), dtype=np.float64)
    for tx, w in zip(transmitters, weights):
        d = np.hypot(ri - tx.i, rj - tx.j)
        k = count_wall_crossings(solid, (tx.i, tx.j))
        single = np.clip(cfg.wall_attenuation ** k / (1.0 + cfg.decay * d), 0.0, 1.0)
        out += w * single
    return out


def random_buildings(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    heights = np.zeros((cfg.H, cfg.W), dtype=np.float64)
    for _ in range(int(rng.integers(cfg.min_buildings, cfg.max_buildings + 1))):
        h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        i0 = int(rng.integers(0, max(1, cfg.H - h + 1)))
        j0 = int(rng.integers(0, max(1, cfg.W - w + 1)))
        heights[i0:i0 + h, j0:j0 + w] = rng.uniform(cfg.min_height, cfg.max_height)
    # round-trip through float32 so in-memory and on-disk maps agree exactly
    return heights.astype(np.float32).astype(np.float64)


def random_transmitters(heights: np.ndarray, n: int, cfg: SynthConfig, rng: np.random.Generator):
    free = np.flatnonzero(np.asarray(heights).ravel() == 0)
    if free.size == 0:
        raise DatasetError("map has no free cells to place a transmitter")
    if free.size < n:
        raise DatasetError(f"map has only {free.size} free cells for {n} transmitters")
    picks = rng.choice(free, size=n, replace=False)
    W = heights.shape[1]
    return [TransmitterSpec(int(p // W), int(p % W), cfg.tx_height) for p in picks]


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    map_id: str
    env_path: str
    tx_list_path: str
    target_dir: str
    n_tx: int = 0


@dataclass
class Manifest:
    root: str
    entries: list[ManifestEntry]
    resolution_m: float = 1.0
    H: int = 0
    W: int = 0

    @property
    def map_ids(self) -> list[str]:
        return [e.map_id for e in self.entries]

    @property
    def n_maps(self) -> int:
        return len(self.entries)

    @property
    def n_pairs(self) -> int:
        return sum(e.n_tx for e in self.entries)

    def entry(self, map_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.map_id == map_id:
                return e
        raise KeyError(f"unknown map_id {map_id!r}")

    def pairs(self) -> Iterator[tuple[str, int]]:
        for e in self.entries:
            for k in range(e.n_tx):
                yield e.map_id, k

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel

    def to_json(self) -> dict:
        return {
            "resolution_m": self.resolution_m,
            "H": self.H,
            "W": self.W,
            "n_maps": self.n_maps,
            "n_pairs": self.n_pairs,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path


def _find_grid(directory: Path, stem: str) -> Optional[Path]:
    for ext in GRID_EXTS:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _scan_entries(root: Path) -> list[ManifestEntry]:
    maps_dir = root / "maps"
    if not maps_dir.is_dir():
        return []
    entries = []
    for p in sorted(maps_dir.iterdir(), key=lambda q: _natural_key(q.stem)):
        if p.suffix not in (".env", ".png"):
            continue
        entries.append(
            ManifestEntry(
                map_id=p.stem,
                env_path=str(p.relative_to(root)),
                tx_list_path=f"tx/{p.stem}.txt",
                target_dir=f"targets/{p.stem}",
            )
        )
    return entries


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in _split_digits(s)]


def _split_digits(s: str) -> list[str]:
    out, cur = [], ""
    for ch in s:
        if cur and ch.isdigit() != cur[-1].isdigit():
            out.append(cur)
            cur = ""
        cur += ch
    if cur:
        out.append(cur)
    return out


def load_manifest(root_path, require_targets: bool = True) -> Manifest:
    """Index a dataset root, checking every referenced file.

    Environment grids and transmitter lists are parsed in full; target grids
    only have their headers read.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    index = root / "manifest.json"
    resolution = 1.0
    if index.exists():
        try:
            meta = json.loads(index.read_text())
            entries = [ManifestEntry(**e) for e in meta["entries"]]
            resolution = float(meta.get("resolution_m", 1.0))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{index}: corrupt manifest ({exc})") from None
    else:
        entries = _scan_entries(root)
    if not entries:
        raise DatasetError(f"{root}: no maps found")

    seen = set()
    shape = None
    for e in entries:
        if e.map_id in seen:
            raise DatasetError(f"{index}: duplicate map_id {e.map_id!r}")
        seen.add(e.map_id)
        env_path = root / e.env_path
        H, W = read_grid(env_path).shape
        if shape is None:
            shape = (H, W)
        elif (H, W) != shape:
            raise DatasetError(f"map {e.map_id}: shape {H}x{W} differs from {shape[0]}x{shape[1]}")
        specs = read_tx_list(root / e.tx_list_path)
        e.n_tx = len(specs)
        if require_targets:
            for k in range(len(specs)):
                tpath = _find_grid(root / e.target_dir, str(k))
                if tpath is None:
                    raise DatasetError(f"{root / e.target_dir}/{k}.pl: file not found")
                if read_grid_shape(tpath) != (H, W):
                    raise DatasetError(f"map {e.map_id}: target {k} shape does not match the map")
    return Manifest(str(root), entries, resolution, shape[0], shape[1])


def load_sample(manifest: Manifest, map_id: str, tx_index: int) -> Sample:
    """Load one (map, transmitter) pair as a validated single-transmitter sample.

    A missing target file yields ``target=None`` (inference mode).
    """
    e = manifest.entry(map_id)
    heights = read_grid(manifest.resolve(e.env_path))
    specs = read_tx_list(manifest.resolve(e.tx_list_path))
    if not 0 <= tx_index < len(specs):
        raise IndexError(f"map {map_id} has {len(specs)} transmitters, asked for {tx_index}")
    tpath = _find_grid(manifest.resolve(e.target_dir), str(tx_index))
    target = read_grid(tpath) if tpath is not None else None
    s = make_sample(heights, [specs[tx_index]], target, [1.0], sample_id=f"{map_id}/{tx_index}")
    violations = validate_sample(s)
    if violations:
        raise SampleValidationError([f"{map_id}/{tx_index}: {v}" for v in violations])
    return s


def load_map_samples(manifest: Manifest, map_ids: Sequence[str]) -> dict[str, list[Sample]]:
    return {
        mid: [load_sample(manifest, mid, k) for k in range(manifest.entry(mid).n_tx)]
        for mid in map_ids
    }


def synth_generate(cfg: SynthConfig, n_maps: int, tx_per_map: int, root) -> Manifest:
    """Write a deterministic synthetic corpus to ``root`` and return its manifest."""
    cfg.validate()
    if n_maps < 1 or tx_per_map < 1:
        raise ValueError("n_maps and tx_per_map must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    width = max(3, len(str(n_maps - 1)))
    entries = []
    for m in range(n_maps):
        map_id = f"{m:0{width}d}"
        heights = random_buildings(cfg, rng)
        specs = random_transmitters(heights, tx_per_map, cfg, rng)
        write_grid(root / "maps" / f"{map_id}.env", heights)
        write_tx_list(root / "tx" / f"{map_id}.txt", specs)
        for k, tx in enumerate(specs):
            write_grid(root / "targets" / map_id / f"{k}.pl", oracle_path_loss(heights, [tx], cfg, [1.0]))
        entries.append(ManifestEntry(map_id, f"maps/{map_id}.env", f"tx/{map_id}.txt", f"targets/{map_id}", tx_per_map))
    manifest = Manifest(str(root), entries, 1.0, cfg.H, cfg.W)
    meta = manifest.to_json()
    meta["synth_config"] = asdict(cfg)
    (root / "manifest.json").write_text(json.dumps(meta, indent=1))
    return manifest


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)


def split_by_order(m: Manifest | Sequence[str], ratios: Sequence[int] = (5, 1, 1)) -> SplitSpec:
    """Contiguous train/val/test blocks of whole maps in manifest order.

    Validation and test blocks get ``floor(n * r / sum(ratios))`` maps each;
    the remainder goes to training.
    """
    ids = m.map_ids if isinstance(m, Manifest) else list(m)
    if len(ratios) != 3 or any(int(r) != r or r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive integers, got {ratios!r}")
    total = sum(ratios)
    n = len(ids)
    if n == 0:
        raise ValueError("manifest is empty")
    if n < total:
        raise ValueError(f"{n} maps cannot be split {':'.join(map(str, ratios))}")
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    n_train = n - n_val - n_test
    return SplitSpec(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])


def dataset_root(default=None) -> Optional[str]:
    return os.environ.get("PATHFINDER_DATA", default)
