import math

import pytest
import torch
import torch.nn.functional as F

from pathfinder.network import build_model, preset
from pathfinder.train import (
    EarlyStopping,
    MplState,
    TrainConfig,
    epoch_samples,
    group_by_map,
    mpl_loss,
    mse_loss,
    read_checkpoint_metadata,
    read_train_log,
    stream_rng,
    train_loop,
    update_delta,
)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_mpl_scalar_examples():
    assert mpl_loss(t(0.5), t(0.0), 1.0).item() == 0.125
    assert mpl_loss(t(2.0), t(0.0), 1.0).item() == 1.5
    for d in (0.05, 0.3, 1.0):
        assert mpl_loss(t(d), t(0.0), d).item() == pytest.approx(d * d / 2, abs=1e-15)
        lin = d * d - d * d / 2
        assert lin == pytest.approx(d * d / 2)
    with pytest.raises(ValueError):
        mpl_loss(t(1.0), t(0.0), 0.0)


@pytest.mark.parametrize("delta", [0.01, 0.2, 1.0])
def test_mpl_matches_huber(delta):
    g = torch.Generator().manual_seed(0)
    y = torch.rand(4, 1, 8, 8, generator=g, dtype=torch.float64)
    yh = torch.rand(4, 1, 8, 8, generator=g, dtype=torch.float64)
    ref = F.huber_loss(yh, y, delta=delta)
    assert abs(mpl_loss(y, yh, delta).item() - ref.item()) < 1e-15


def test_mpl_continuity_at_switch():
    d = 0.3
    left = mpl_loss(t(d - 1e-9), t(0.0), d).item()
    right = mpl_loss(t(d + 1e-9), t(0.0), d).item()
    assert abs(left - right) < 1e-9


def test_mpl_gradient_bound_and_fd():
    g = torch.Generator().manual_seed(1)
    y = torch.rand(64, generator=g, dtype=torch.float64)
    yh = (torch.rand(64, generator=g, dtype=torch.float64) * 2 - 0.5).requires_grad_()
    delta = 0.25
    mpl_loss(y, yh, delta).backward()
    # per-pixel derivative magnitude is at most delta; the mean divides by the count
    assert (yh.grad.abs() * 64 <= delta + 1e-15).all()
    eps = 1e-7
    for k in range(64):
        if abs(abs((y - yh)[k].item()) - delta) < 1e-4:
            continue
        up, dn = yh.detach().clone(), yh.detach().clone()
        up[k] += eps
        dn[k] -= eps
        fd = (mpl_loss(y, up, delta) - mpl_loss(y, dn, delta)).item() / (2 * eps)
        assert abs(fd - yh.grad[k].item()) <= 1e-6 * max(abs(yh.grad[k].item()), 1e-3)


def test_mse_identities():
    y = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    assert mse_loss(y, y).item() == 0.0
    assert mse_loss(torch.ones(2, 2), torch.zeros(2, 2)).item() == 1.0
    yh = y + 0.01 * torch.randn_like(y)
    assert abs(mse_loss(y, yh).item() - 2 * mpl_loss(y, yh, 1.0).item()) < 1e-15
    with pytest.raises(ValueError):
        mse_loss(y, y[:1])


def test_delta_update_examples():
    s = update_delta(MplState(1.0), t(0.5, 0.5), t(0.0, 1.0))
    assert s.delta == 0.9 and s.history == [1.0, 0.9]
    assert update_delta(MplState(0.1), t(0.5), t(0.0)).delta == 0.5
    tie = update_delta(MplState(0.5), t(0.45), t(0.0))
    assert tie.delta == 0.9 * 0.5
    with pytest.raises(ValueError):
        update_delta(MplState(1.0), t(), t())
    with pytest.raises(ValueError):
        MplState(0.0)


def test_delta_trace():
    s = MplState(1.0)
    for mae in (0.5, 0.1, 0.95, 0.0):
        s = update_delta(s, t(mae), t(0.0))
    assert s.history == pytest.approx([1.0, 0.9, 0.81, 0.95, 0.855])


def test_early_stopping_trace():
    # epochs are numbered from 1: best is epoch 2 and the stop is raised on the
    # second non-improving epoch after it
    es = EarlyStopping(2)
    trace = [es.step(e, v) for e, v in enumerate([0.5, 0.4, 0.4, 0.4], start=1)]
    assert trace == [(True, False), (True, False), (False, False), (False, True)]
    assert es.best_epoch == 2 and es.best == 0.4
    with pytest.raises(ValueError):
        EarlyStopping(0)


def test_train_loop_replays_validation_sequence(synth_by_map, tmp_path):
    train = synth_by_map["000"][:4]
    seq = iter([0.5, 0.4, 0.4, 0.4, 0.3])
    saved = []
    cfg = TrainConfig(max_epochs=10, batch_size=4, patience=2, use_tom=False, base_aug=False)
    res = train_loop(train, train, build_model(preset("tiny"), seed=0), cfg, out_dir=tmp_path,
                     validate_fn=lambda m, e: next(seq),
                     on_epoch=lambda r: saved.append(read_checkpoint_metadata(tmp_path / "best.safetensors")["epoch"]))
    assert [r["epoch"] for r in res.log] == [1, 2, 3, 4]
    assert res.stopped_early and res.best_epoch == 2 and res.best_val_rmse == 0.4
    # the persisted checkpoint never moves to a worse epoch
    assert saved == ["1", "2", "2", "2"]
    assert read_train_log(tmp_path / "train_log.jsonl")[-1]["epoch"] == 4


def test_epoch_samples_pairs_within_maps(synth_by_map):
    train = [s for m in ("000", "001") for s in synth_by_map[m]]
    cfg = TrainConfig(use_tom=True, tom_prob=1.0, base_aug=False)
    out = epoch_samples(train, group_by_map(train), cfg, stream_rng(0, "b"), stream_rng(0, "m"))
    assert len(out) == len(train)
    for s in out:
        assert len(s.transmitters) in (1, 2)
        assert s.sample_id.startswith("mix(")
        ids = s.sample_id[4:].split(",")[:2]
        assert ids[0].split("/")[0] == ids[1].split("/")[0]


def _run(samples, tmp_path, name, **kw):
    cfg = TrainConfig(max_epochs=2, batch_size=4, seed=7, **kw)
    model = build_model(preset("tiny"), seed=7)
    res = train_loop(samples, samples[:4], model, cfg, out_dir=tmp_path / name)
    return res, model


def test_training_is_deterministic(synth_by_map, tmp_path):
    samples = synth_by_map["000"] + synth_by_map["001"]
    a, _ = _run(samples, tmp_path, "a")
    b, _ = _run(samples, tmp_path, "b")
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_ms"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log)
    assert a.step_losses == b.step_losses
    assert (tmp_path / "a" / "best.safetensors").read_bytes() == (tmp_path / "b" / "best.safetensors").read_bytes()
    meta = read_checkpoint_metadata(tmp_path / "a" / "best.safetensors")
    assert meta["seed"] == "7" and meta["loss_kind"] == "mpl" and "config_hash" in meta
    d = a.deltas
    assert all(d[k + 1] >= 0.9 * d[k] - 1e-15 for k in range(len(d) - 1))
    assert len(d) == a.log[-1]["steps"] + 1


def test_mse_ablation_matches_manual_loop(synth_by_map, tmp_path):
    samples = synth_by_map["002"][:4]
    cfg = TrainConfig(max_epochs=1, batch_size=4, seed=1, use_mpl=False, use_tom=False, base_aug=False, max_steps=1)
    model = build_model(preset("tiny"), seed=1)
    manual = build_model(preset("tiny"), seed=1)
    res = train_loop(samples, samples, model, cfg)
    assert res.deltas == [1.0]

    from pathfinder.network import collate, forward_batch

    torch.manual_seed(0)
    order = stream_rng(1, "batching").permutation(len(samples))
    batch = collate([samples[int(k)] for k in order])
    opt = torch.optim.Adam(manual.parameters(), lr=cfg.lr)
    manual.train()
    loss = ((forward_batch(manual, batch) - batch["target"]) ** 2).mean()
    loss.backward()
    opt.step()
    assert res.step_losses[0] == pytest.approx(loss.item(), abs=1e-7)
    for (k, p), q in zip(model.state_dict().items(), manual.state_dict().values()):
        assert torch.allclose(p.float(), q.float(), atol=1e-6), k


def test_config_validation():
    for bad in (dict(max_epochs=0), dict(patience=0), dict(batch_size=0), dict(tom_prob=2.0), dict(val_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    assert TrainConfig(use_mpl=False).loss_kind == "mse"
    assert math.isfinite(TrainConfig().lr)
