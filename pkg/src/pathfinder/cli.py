"""Command-line entry points: data generation, training, evaluation and plots.

Every command writes a ``config.json`` snapshot of its resolved arguments
next to its outputs. All randomness derives from ``--seed`` through named
sub-streams (data, init, batching, mixup, benchmark).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .augment import S2MT_COUNTS, build_s2mt_set, save_s2mt_set
from .core import Sample
from .dataset import (
    SynthConfig,
    dataset_root,
    load_manifest,
    load_map_samples,
    split_by_order,
    synth_generate,
    write_grid,
)
from .evaluation import (
    COVERAGE_LEVELS,
    cdf,
    constant_predictor,
    coverage_curve,
    evaluate_s2mt,
    metric_report,
    oracle_predictor,
)

log = logging.getLogger("pathfinder")

CDF_GRID = np.linspace(0.0, 1.0, 201)


class CliError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def _snapshot(out: Path, args: argparse.Namespace, **extra) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    _write_json(out / "config.json", cfg)


def _data_root(args) -> Path:
    root = args.data or dataset_root()
    if root is None:
        raise CliError("no dataset root: pass --data or set PATHFINDER_DATA")
    return Path(root)


def _split_samples(root: Path, split: str) -> list[Sample]:
    manifest = load_manifest(root)
    if split == "all":
        ids = manifest.map_ids
    else:
        ids = getattr(split_by_order(manifest), f"{split}_ids")
    by_map = load_map_samples(manifest, ids)
    return [s for mid in ids for s in by_map[mid]]


def _split_by_map(root: Path, split: str) -> dict[str, list[Sample]]:
    manifest = load_manifest(root)
    ids = manifest.map_ids if split == "all" else getattr(split_by_order(manifest), f"{split}_ids")
    return load_map_samples(manifest, ids)


def _predictor(args):
    """A callable mapping samples to predicted grids, from a checkpoint or a stub."""
    if args.checkpoint is not None:
        from .network import predict_many
        from .train import load_checkpoint

        path = Path(args.checkpoint)
        if not path.exists():
            raise CliError(f"{path}: checkpoint not found")
        model = load_checkpoint(path)
        return lambda samples: predict_many(model, list(samples))
    name = args.predictor or ""
    if name == "oracle":
        return oracle_predictor
    if name.startswith("constant:"):
        return constant_predictor(float(name.split(":", 1)[1]))
    raise CliError("pass --checkpoint or --predictor {oracle, constant:<value>}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate_data(args) -> None:
    cfg = SynthConfig(H=args.size, W=args.size, seed=args.seed)
    out = Path(args.out)
    manifest = synth_generate(cfg, args.maps, args.tx, out)
    load_manifest(out)
    _snapshot(out, args, synth_config=asdict(cfg))
    print(f"wrote {manifest.n_maps} maps x {args.tx} transmitters = {manifest.n_pairs} samples "
          f"({args.size}x{args.size}) to {out}")


def cmd_train(args) -> None:
    import torch

    from .network import NetworkConfig, build_model, preset
    from .train import TrainConfig, TrainingDiverged, config_snapshot, torch_seed, train_loop

    if args.threads:
        torch.set_num_threads(args.threads)
    root = _data_root(args)
    net_cfg = NetworkConfig.load(args.config) if args.config else preset(args.preset)
    train_cfg = TrainConfig(
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        patience=args.patience,
        seed=args.seed,
        use_tom=not args.no_tom,
        use_mpl=not args.no_mpl,
        max_steps=args.max_steps,
    )
    train_cfg.validate()
    train = _split_samples(root, "train")
    val = _split_samples(root, "val")
    net_cfg.check_input(*train[0].shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, args, resolved=config_snapshot(net_cfg, train_cfg))
    net_cfg.save(out / "network.cfg")
    model = build_model(net_cfg, seed=torch_seed(args.seed, "init"))
    try:
        res = train_loop(train, val, model, train_cfg, out_dir=out,
                         on_epoch=lambda r: print(json.dumps(r), flush=True))
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}") from exc
    if res.checkpoint is None or not res.checkpoint.exists():
        raise CliError("no checkpoint was written")
    print(f"best epoch {res.best_epoch}, val RMSE {res.best_val_rmse:.6f}, checkpoint {res.checkpoint}")


def cmd_eval(args) -> None:
    root = _data_root(args)
    predict = _predictor(args)
    samples = _split_samples(root, args.split)
    preds = list(predict(samples))
    report = metric_report(samples, preds)
    pooled_pred = np.concatenate([np.ravel(p) for p in preds])
    pooled_true = np.concatenate([s.target.values.ravel() for s in samples])
    body = {
        "metrics": report.row(),
        "count": report.count,
        "coverage": [{"p": p, "rmse": r} for p, r in coverage_curve(samples, preds)],
        "cdf": {
            "predicted": cdf(pooled_pred).on_grid(CDF_GRID).to_json(),
            "target": cdf(pooled_true).on_grid(CDF_GRID).to_json(),
        },
        "per_sample": report.per_sample,
    }
    out = Path(args.out)
    _write_json(out / "report.json", body)
    if args.export_predictions:
        for s, p in zip(samples, preds):
            map_id, k = s.sample_id.split("/", 1)
            write_grid(out / "predictions" / map_id / f"{k}.pl", p)
    _snapshot(out, args)
    print(json.dumps(body["metrics"], indent=1))


def cmd_s2mt_eval(args) -> None:
    from .train import stream_seed

    root = _data_root(args)
    predict = _predictor(args)
    by_map = _split_by_map(root, args.split)
    seed = int(np.random.SeedSequence(stream_seed(args.seed, "benchmark")).generate_state(1)[0])
    sets = {}
    for n in args.counts:
        bench = build_s2mt_set(by_map, n, seed, per_map=args.per_map)
        if args.save_sets:
            save_s2mt_set(bench, Path(args.out) / "sets" / f"n{n}")
        sets[n] = bench.samples
    reports = evaluate_s2mt(predict, sets)
    rows = [{"n_tx": n, "count": r.count, **r.row()} for n, r in reports.items()]
    out = Path(args.out)
    _write_json(out / "s2mt_report.json", {"rows": rows, "seed": seed, "per_map": args.per_map})
    _snapshot(out, args)
    for row in rows:
        print(f"N={row['n_tx']}  RMSE {row['rmse']:.6f}  NMSE {row['nmse']:.6f}  ({row['count']} scenes)")


def cmd_coverage_eval(args) -> None:
    root = _data_root(args)
    predict = _predictor(args)
    samples = _split_samples(root, args.split)
    preds = list(predict(samples))
    levels = [{"p": p, "rmse": r} for p, r in coverage_curve(samples, preds, args.levels)]
    out = Path(args.out)
    _write_json(out / "coverage_report.json", {"levels": levels, "count": len(samples)})
    _snapshot(out, args)
    for row in levels:
        print(f"top {row['p']:g}%  RMSE {row['rmse']:.6f}")


def grid_to_image(values: np.ndarray) -> np.ndarray:
    """Grayscale intensity: 0 -> black, 1 -> white, linear, clipped to [0, 1]."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    from .dataset import read_grid
    from .train import read_train_log

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.log:
        rows = read_train_log(args.log)
        if not rows:
            raise CliError(f"{args.log}: empty training log")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r["epoch"] for r in rows], [r["train_loss"] for r in rows], "o-", label="train loss")
        val = [(r["epoch"], r["val_rmse"]) for r in rows if r["val_rmse"] is not None]
        ax.plot([e for e, _ in val], [v for _, v in val], "s-", label="val RMSE")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curve.png", dpi=100)
        plt.close(fig)
        written.append(out / "loss_curve.png")
    if args.report:
        try:
            curves = json.loads(Path(args.report).read_text())["cdf"]
            series = {k: (np.asarray(v["x"], float), np.asarray(v["f"], float)) for k, v in curves.items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.report}: malformed report ({exc})") from exc
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, (x, f) in series.items():
            if len(x) != len(f) or np.any(np.diff(f) < 0):
                raise CliError(f"{args.report}: cdf '{name}' is not a valid curve")
            ax.step(x, f, where="post", label=name)
        ax.set_xlabel("path loss")
        ax.set_ylabel("cumulative fraction")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "cdf.png", dpi=100)
        plt.close(fig)
        written.append(out / "cdf.png")
    if args.predictions:
        grids = sorted(Path(args.predictions).rglob("*.pl"))[: args.max_maps]
        if not grids:
            raise CliError(f"{args.predictions}: no prediction grids found")
        for g in grids:
            rel = g.relative_to(args.predictions).with_suffix(".png")
            target = out / "maps" / "_".join(rel.parts)
            target.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(grid_to_image(read_grid(g)), mode="L").save(target)
            written.append(target)
    if not written:
        raise CliError("nothing to plot: pass --log, --report or --predictions")
    for p in written:
        print(p)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_predictor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset root (default: $PATHFINDER_DATA)")
    p.add_argument("--checkpoint", help="trained checkpoint (.safetensors)")
    p.add_argument("--predictor", help="stub predictor instead of a checkpoint: oracle or constant:<v>")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathfinder", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic corpus")
    p.add_argument("--maps", type=int, default=20)
    p.add_argument("--tx", type=int, default=8, help="transmitters per map")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="tiny", choices=("tiny", "small", "desk"))
    p.add_argument("--config", help="network config file (overrides --preset)")
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-mpl", action="store_true", help="plain MSE objective")
    p.add_argument("--no-tom", action="store_true", help="disable transmitter mixup")
    p.add_argument("--threads", type=int, default=0, help="torch CPU threads (0: library default)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="six metrics, coverage and CDF report")
    _add_predictor_args(p)
    p.add_argument("--export-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("s2mt-eval", help="multi-transmitter benchmark rows")
    _add_predictor_args(p)
    p.add_argument("--counts", type=int, nargs="+", default=list(S2MT_COUNTS))
    p.add_argument("--per-map", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-sets", action="store_true")
    p.set_defaults(func=cmd_s2mt_eval)

    p = sub.add_parser("coverage-eval", help="RMSE over the top-p%% ground-truth pixels")
    _add_predictor_args(p)
    p.add_argument("--levels", type=float, nargs="+", default=list(COVERAGE_LEVELS))
    p.set_defaults(func=cmd_coverage_eval)

    p = sub.add_parser("plot", help="render loss curves, CDFs and predicted maps")
    p.add_argument("--log", help="train_log.jsonl")
    p.add_argument("--report", help="report.json from eval")
    p.add_argument("--predictions", help="directory of exported prediction grids")
    p.add_argument("--max-maps", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
