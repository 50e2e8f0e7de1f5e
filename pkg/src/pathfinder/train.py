"""Momentum prediction loss, delta schedule and the training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save

from .augment import AugOp, apply_aug, tom_mixup
from .core import Sample
from .network import NetworkConfig, PathFinder, collate, forward_batch, predict_many

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def stream_seed(seed: int, name: str) -> list[int]:
    """Seed material for the named random sub-stream of a run."""
    return [int(seed), zlib.crc32(name.encode())]


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def torch_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence(stream_seed(seed, name)).generate_state(1)[0])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def mpl_loss(y: torch.Tensor, yhat: torch.Tensor, delta: float) -> torch.Tensor:
    """Pixel mean of e**2/2 where |e| <= delta and delta*|e| - delta**2/2 elsewhere."""
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    err = (y - yhat).abs()
    quad = 0.5 * err**2
    lin = delta * err - 0.5 * delta**2
    return torch.where(err <= delta, quad, lin).mean()


def mse_loss(y: torch.Tensor, yhat: torch.Tensor) -> torch.Tensor:
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    return ((y - yhat) ** 2).mean()


@dataclass
class MplState:
    delta: float = 1.0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.history:
            self.history = [self.delta]


def update_delta(state: MplState, targets, preds) -> MplState:
    """delta <- max(0.9 * delta, mean absolute error of the batch)."""
    t = torch.as_tensor(targets)
    p = torch.as_tensor(preds)
    if t.numel() == 0:
        raise ValueError("empty batch")
    mae = float((t.detach() - p.detach()).abs().mean())
    new = max(0.9 * state.delta, mae)
    return MplState(new, state.history + [new])


# --------------------------------------------------------------------------
# early stopping / checkpoints
# --------------------------------------------------------------------------

class EarlyStopping:
    """Stop once the monitored value fails to improve for ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def step(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Record one epoch; returns (improved, stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def save_checkpoint(path, model: PathFinder, metadata: Optional[Mapping] = None) -> Path:
    """Flat named-tensor archive (safetensors), every tensor stored as float32.

    The network config travels in the ``config`` metadata key in the same
    key-value text used for config files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in model.state_dict().items()}
    meta = {"config": model.cfg.to_text(), "config_hash": model.cfg.digest()}
    meta.update({k: str(v) for k, v in (metadata or {}).items()})
    path.write_bytes(_canonical_header(save(tensors, metadata=meta)))
    return path


def _canonical_header(blob: bytes) -> bytes:
    """Re-serialize the JSON header with sorted keys so equal models give equal bytes.

    Tensor offsets are relative to the end of the header, so only the header
    block changes; it is space-padded to a multiple of 8 bytes as the format asks.
    """
    n = int.from_bytes(blob[:8], "little")
    header = json.loads(blob[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + blob[8 + n:]


def read_checkpoint_metadata(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        return dict(fh.metadata() or {})


def load_checkpoint(path, dtype=torch.float32) -> PathFinder:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    meta = read_checkpoint_metadata(path)
    model = PathFinder(NetworkConfig.from_text(meta["config"])).to(dtype)
    state = model.state_dict()
    loaded = load_file(str(path))
    missing = set(state) ^ set(loaded)
    if missing:
        raise ValueError(f"{path}: tensor names do not match the network ({sorted(missing)[:3]} ...)")
    model.load_state_dict({k: loaded[k].to(state[k].dtype) for k in state})
    model.eval()
    return model


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0
    use_tom: bool = True
    use_mpl: bool = True
    tom_prob: float = 0.5
    alpha: float = 1.0
    base_aug: bool = True
    delta0: float = 1.0
    max_steps: Optional[int] = None
    val_every: int = 1
    stop_below: Optional[float] = None

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if not 0 <= self.tom_prob <= 1:
            raise ValueError("tom_prob must lie in [0, 1]")

    @property
    def loss_kind(self) -> str:
        return "mpl" if self.use_mpl else "mse"


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: Optional[int]
    best_val_rmse: float
    deltas: list[float]
    step_losses: list[float]
    checkpoint: Optional[Path] = None
    stopped_early: bool = False


def group_by_map(samples: Sequence[Sample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        groups.setdefault(map_key(s), []).append(idx)
    return groups


def map_key(s: Sample) -> str:
    return s.sample_id.split("/", 1)[0] if "/" in s.sample_id else s.env.heights.tobytes().hex()[:32]


def epoch_samples(
    train: Sequence[Sample],
    groups: Mapping[str, list[int]],
    cfg: TrainConfig,
    rng_batch: np.random.Generator,
    rng_mix: np.random.Generator,
) -> list[Sample]:
    """One epoch of (possibly augmented / mixed) training samples in batch order.

    Mixing partners come from a per-map shuffled cycle, so each sample is used
    as a partner at most once per epoch.
    """
    ops = list(AugOp)
    partner = {}
    if cfg.use_tom:
        for idxs in groups.values():
            if len(idxs) < 2:
                continue
            cycle = [idxs[k] for k in rng_mix.permutation(len(idxs))]
            for a, b in zip(cycle, cycle[1:] + cycle[:1]):
                partner[a] = b
    out = []
    for idx in rng_batch.permutation(len(train)):
        s = train[int(idx)]
        op = ops[int(rng_mix.integers(len(ops)))] if cfg.base_aug else AugOp.identity
        if op.needs_square and s.shape[0] != s.shape[1]:
            op = AugOp.identity
        if cfg.use_tom and int(idx) in partner and rng_mix.random() < cfg.tom_prob:
            beta = float(rng_mix.beta(cfg.alpha, cfg.alpha))
            out.append(tom_mixup(s, train[partner[int(idx)]], beta, op))
        else:
            out.append(apply_aug(s, op))
    return out


def validation_rmse(model: PathFinder, samples: Sequence[Sample]) -> float:
    preds = predict_many(model, samples)
    return float(np.mean([math.sqrt(np.mean((s.target.values - p) ** 2)) for s, p in zip(samples, preds)]))


def train_loop(
    train: Sequence[Sample],
    val: Sequence[Sample],
    model: PathFinder,
    cfg: TrainConfig,
    out_dir=None,
    validate_fn: Optional[Callable[[PathFinder, int], float]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train ``model`` in place; the best-validation weights are restored at the end.

    ``cfg.stop_below`` ends the run as soon as a validation RMSE reaches it.
    With ``out_dir`` the best checkpoint goes to ``best.safetensors`` and the
    epoch log to ``train_log.jsonl``. ``validate_fn(model, epoch)`` overrides
    the validation RMSE (used to replay fixed sequences).
    """
    cfg.validate()
    if not train or (not val and validate_fn is None):
        raise ValueError("training and validation sets must be non-empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    dtype = next(model.parameters()).dtype
    torch.manual_seed(torch_seed(cfg.seed, "dropout"))
    rng_batch = stream_rng(cfg.seed, "batching")
    rng_mix = stream_rng(cfg.seed, "mixup")
    groups = group_by_map(train)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    state = MplState(cfg.delta0)
    stopper = EarlyStopping(cfg.patience)
    best_state = None
    ckpt = None
    history: list[dict] = []
    step_losses: list[float] = []
    steps = 0
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        batch_losses = []
        stream = epoch_samples(train, groups, cfg, rng_batch, rng_mix)
        for start in range(0, len(stream), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = collate(stream[start:start + cfg.batch_size], dtype=dtype)
            pred = forward_batch(model, batch)
            target = batch["target"]
            loss = mpl_loss(target, pred, state.delta) if cfg.use_mpl else mse_loss(target, pred)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}, delta={state.delta:g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfg.use_mpl:
                state = update_delta(state, target, pred)
            steps += 1
            batch_losses.append(float(loss.detach()))
        step_losses.extend(batch_losses)

        out_of_steps = cfg.max_steps is not None and steps >= cfg.max_steps
        last = epoch == cfg.max_epochs or out_of_steps
        if epoch % cfg.val_every and not last:
            val_rmse = None
            improved = stop = False
        else:
            val_rmse = validate_fn(model, epoch) if validate_fn is not None else validation_rmse(model, val)
            improved, stop = stopper.step(epoch, val_rmse)
            reached = cfg.stop_below is not None and val_rmse <= cfg.stop_below
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                ckpt = save_checkpoint(
                    out_dir / "best.safetensors",
                    model,
                    {"seed": cfg.seed, "epoch": epoch, "val_rmse": repr(val_rmse), "loss_kind": cfg.loss_kind},
                )
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)) if batch_losses else float("nan"),
            "val_rmse": None if val_rmse is None else float(val_rmse),
            "delta": state.delta,
            "steps": steps,
            "loss_kind": cfg.loss_kind,
            "wall_ms": round(1000 * (time.perf_counter() - t0), 1),
        }
        history.append(row)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d loss %.5f val_rmse %s delta %.4f", epoch, row["train_loss"], val_rmse, state.delta)
        if stop:
            stopped = True
            break
        if out_of_steps or (val_rmse is not None and reached):
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, stopper.best_epoch, stopper.best, state.history, step_losses, ckpt, stopped)


def read_train_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def config_snapshot(net: NetworkConfig, cfg: TrainConfig) -> dict:
    return {"network": asdict(net), "train": asdict(cfg)}
