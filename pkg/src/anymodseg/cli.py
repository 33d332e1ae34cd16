"""Command-line interface.

Five subcommands cover the experiment lifecycle:

- ``synth-data``: render the synthetic multimodal benchmark to disk;
- ``train``: fit a model from a config, writing checkpoint + log;
- ``eval``: score a checkpoint over modality subsets, writing JSON, CSV
  and figures;
- ``diagnose``: write robustness / variance / complexity reports;
- ``plot``: re-render figures from previously written report files.

Every command resolves its configuration as defaults < config file <
``--override key=value`` pairs, writes the effective config into the
output directory, and is deterministic: identical config and seed give
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import plots
from .config import apply_overrides, load_config, save_config, synth_spec_from
from .data import DatasetSplits, generate_synthetic, load_dataset, load_synthetic, write_dataset
from .data import DatasetManifest
from .diagnostics import collect_diagnostics
from .metrics import evaluate_model
from .train import Checkpoint, fit, restore_model

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anymodseg",
        description="multimodal segmentation robust to missing modalities",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            sp.add_argument("--config", type=Path, default=None, help="YAML config file")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, repeatable (e.g. train.epochs=5)",
        )
        sp.add_argument(
            "--seed",
            type=int,
            default=None,
            help="base seed: sets seed.init=N, seed.data=N+1, seed.mas=N+2, synth.seed=N",
        )

    sp = sub.add_parser("synth-data", help="generate the synthetic benchmark")
    common(sp)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--variant", choices=["a", "b", "c"], default=None, help="ablation variant")

    sp = sub.add_parser("eval", help="evaluate a checkpoint over modality subsets")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, default=None, help="dataset root (default: from config)")
    sp.add_argument("--subset", type=str, default=None, help="restrict to one subset, e.g. cam,dep")
    sp.add_argument("--variant", choices=["a", "b", "c"], default=None)

    sp = sub.add_parser("diagnose", help="write robustness/variance/complexity reports")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, default=None)

    sp = sub.add_parser("plot", help="render figures from report files")
    common(sp, config=False)
    sp.add_argument(
        "--reports", type=Path, default=None, help="directory with report files (default: --out)"
    )
    return parser


def _apply_seed(cfg: dict, seed: int | None) -> None:
    if seed is None:
        return
    cfg["seed"]["init"] = seed
    cfg["seed"]["data"] = seed + 1
    cfg["seed"]["mas"] = seed + 2
    cfg["synth"]["seed"] = seed


def _resolve_dataset(cfg: dict, data_root: Path | None) -> DatasetSplits:
    """Dataset named by flag or config, else the in-memory synthetic one."""
    root = data_root or cfg["data"].get("root")
    if root:
        root = Path(root)
        manifest = DatasetManifest.load(root / "manifest.json")
        return DatasetSplits(
            manifest=manifest,
            train=load_dataset(root, manifest, "train"),
            val=load_dataset(root, manifest, "val"),
        )
    return load_synthetic(synth_spec_from(cfg))


def _cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    _apply_seed(cfg, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    splits = generate_synthetic(synth_spec_from(cfg))
    manifest = write_dataset(splits, args.out)
    save_config(cfg, args.out / "config.yaml")
    n = sum(len(v) for v in manifest.splits.values())
    print(f"wrote {n} samples across {list(manifest.splits)} to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    _apply_seed(cfg, args.seed)
    if args.variant is not None:
        cfg["train"]["variant"] = args.variant
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.yaml")
    splits = _resolve_dataset(cfg, None)
    result = fit(cfg, splits, out_dir=args.out)
    ckpt_path = args.out / "checkpoint.pt"
    result.checkpoint.save(ckpt_path)
    best = result.checkpoint.best_average_miou
    score = "n/a" if best is None else f"{best:.4f}"
    print(f"trained {cfg['train']['epochs']} epochs, best average mIoU {score}")
    print(f"wrote {ckpt_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    cfg = checkpoint.config
    apply_overrides(cfg, args.override)
    _apply_seed(cfg, args.seed)
    variant = args.variant or cfg["train"]["variant"]
    model = restore_model(checkpoint)
    splits = _resolve_dataset(cfg, args.data)
    subsets = None
    if args.subset:
        subsets = [tuple(s.strip() for s in args.subset.split(",") if s.strip())]
    report = evaluate_model(
        model,
        splits.val,
        cfg["model"]["num_classes"],
        splits.manifest.ignore_index,
        subsets=subsets,
        variant=variant,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.yaml")
    report.save_json(args.out / "metrics.json")
    report.save_csv(args.out / "metrics.csv")
    figures = plots.plot_metrics(report, args.out)
    agg = report.aggregate_miou
    print(
        f"mIoU average {agg['average']:.4f}, top1 {agg['top1']:.4f}, last1 {agg['last1']:.4f} "
        f"over {len(report.subsets)} subset(s)"
    )
    for path in [args.out / "metrics.json", args.out / "metrics.csv", *figures]:
        print(f"wrote {path}")
    return 0


def _cmd_diagnose(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    cfg = checkpoint.config
    apply_overrides(cfg, args.override)
    _apply_seed(cfg, args.seed)
    model = restore_model(checkpoint)
    splits = _resolve_dataset(cfg, args.data)
    report = collect_diagnostics(
        model,
        splits.val,
        ignore_index=splits.manifest.ignore_index,
        variant=cfg["train"]["variant"],
        silhouette=bool(cfg["eval"]["silhouette"]),
        silhouette_scale=int(cfg["eval"]["silhouette_scale"]),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.yaml")
    report.save_json(args.out / "diagnostics.json")
    report.save_csv(args.out / "diagnostics.csv")
    figures = plots.plot_robustness(report, args.out) + plots.plot_variance(report, args.out)
    for path in [args.out / "diagnostics.json", args.out / "diagnostics.csv", *figures]:
        print(f"wrote {path}")
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    source = args.reports or args.out
    args.out.mkdir(parents=True, exist_ok=True)
    written = plots.render_all(source, args.out)
    if not written:
        print(f"error: no report files found in {source}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:  # surface one line, not a stack trace
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
