# cli.py

"""Command-line entry point.

    python cli.py gen-data --level L1 --episodes 10 --seed 0 --out runs/data
    python cli.py train --config train.json --out runs/train
    python cli.py eval --ckpt runs/train/checkpoint --level L1 --episodes 50 --seed 1 --out runs/eval
    python cli.py ablate --config ablation.json --out runs/ablation
    python cli.py plot --metrics runs/train/metrics.jsonl --reports runs/eval/report.json --out runs/plots

Every command prints one JSON summary line on stdout and writes manifest.json in --out.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from config.run_config import load_ablation_config, load_train_config
from core.dataset import SplitSide, generate_dataset, make_split, save_dataset
from core.evaluator import OracleModel, RandomModel, evaluate, run_ablation, save_report, write_ablation_csv
from core.scene_codec import build_vocabulary
from core.trainer import train
from services.actllm_model import SceneActionModel
from ui.plots import load_metrics, load_reports, plot_loss_curve, write_per_template, write_success_by_level
from utils.helpers import dumps, log, write_json, write_manifest


def cmd_gen_data(args) -> dict:
    split = make_split(args.level, args.templates)
    dataset = generate_dataset(split, args.episodes, args.seed, SplitSide(args.side), args.workers)
    files = save_dataset(dataset, args.out)
    return {
        "files": files,
        "summary": {"command": "gen-data", "episodes": len(dataset), "frames": dataset.meta.n_frames, "out": str(args.out)},
    }


def cmd_train(args) -> dict:
    config = load_train_config(args.config)
    if args.dataset:
        config = config.copy(update={"dataset_dir": str(args.dataset)})
    out = Path(args.out or config.out_dir)
    args.out = out
    result = train(config, out_dir=out)
    write_json(out / "train_config.json", config.dict())
    files = [Path(result.checkpoint), Path(result.checkpoint).with_suffix(".bin"), Path(result.metrics_path), out / "train_config.json"]
    files += sorted(out.glob("checkpoint_step*"))
    final = result.final.dict() if result.final else {}
    return {
        "files": files,
        "summary": {"command": "train", "steps": result.steps, "checkpoint": result.checkpoint, **{k: final[k] for k in ("total", "scene_loss", "action_loss") if k in final}},
    }


def _model_for(args):
    vocab = build_vocabulary()
    if args.model == "oracle":
        return OracleModel(vocab)
    if args.model == "random":
        return RandomModel(args.seed, vocab)
    if not args.ckpt:
        raise ValueError("--ckpt is required for --model trained")
    return SceneActionModel.from_checkpoint(Path(args.ckpt), vocab)


def cmd_eval(args) -> dict:
    model = _model_for(args)
    records = Path(args.out) / "records.jsonl"
    report = evaluate(model, args.level, args.episodes, args.seed, args.templates, args.workers, records_path=records)
    path = save_report(report, Path(args.out) / "report.json")
    return {
        "files": [path, records],
        "summary": {"command": "eval", "level": report.level, "episodes": report.n_episodes,
                    "success_rate": report.success_rate, "mean_f1": report.mean_f1},
    }


def cmd_ablate(args) -> dict:
    config = load_ablation_config(args.config)
    out = Path(args.out)
    table = run_ablation(config, out, args.workers)
    csv_path = write_ablation_csv(table, out / "ablation.csv")
    json_path = write_json(out / "ablation.json", table.dict())
    files = [csv_path, json_path] + sorted(out.glob("*/report_*.json")) + sorted(out.glob("*/checkpoint.*")) + sorted(out.glob("*/metrics.jsonl"))
    return {
        "files": files,
        "summary": {"command": "ablate", "levels": table.levels,
                    "rows": {row.variant: row.success for row in table.rows}, "checks": table.checks},
    }


def cmd_plot(args) -> dict:
    if not args.metrics and not args.reports:
        raise ValueError("plot needs --metrics and/or --reports")
    out = Path(args.out)
    files, summary = [], {"command": "plot"}
    if args.metrics:
        metrics = load_metrics(args.metrics)
        files.append(plot_loss_curve(metrics, out / "loss_curve.svg"))
        summary["points"] = len(metrics)
    if args.reports:
        reports = load_reports(args.reports)
        files.append(write_success_by_level(reports, out / "success_by_level.csv"))
        per_template = write_per_template(reports, out / "success_by_template.csv")
        if per_template is not None:
            files.append(per_template)
        summary["reports"] = len(reports)
    return {"files": files, "summary": summary}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Desk-scale scene-description and action tuning")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate scripted-expert episodes")
    gen.add_argument("--level", default="L1", choices=["L1", "L2", "L3", "L4"])
    gen.add_argument("--episodes", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--side", default="train", choices=[s.value for s in SplitSide])
    gen.add_argument("--templates", nargs="+", default=None)
    gen.add_argument("--workers", type=int, default=None)
    gen.add_argument("--out", type=Path, required=True)

    tr = sub.add_parser("train", help="teacher-forced multi-turn training")
    tr.add_argument("--config", type=Path, required=True)
    tr.add_argument("--dataset", type=Path, default=None, help="dataset directory (overrides dataset_dir)")
    tr.add_argument("--out", type=Path, default=None, help="defaults to the config's out_dir")

    ev = sub.add_parser("eval", help="closed-loop rollouts on held-out episodes")
    ev.add_argument("--ckpt", type=Path, default=None)
    ev.add_argument("--model", default="trained", choices=["trained", "oracle", "random"])
    ev.add_argument("--level", default="L1", choices=["L1", "L2", "L3", "L4"])
    ev.add_argument("--episodes", type=int, default=50)
    ev.add_argument("--seed", type=int, default=1)
    ev.add_argument("--templates", nargs="+", default=None)
    ev.add_argument("--workers", type=int, default=None)
    ev.add_argument("--out", type=Path, required=True)

    ab = sub.add_parser("ablate", help="train and evaluate every ablation variant")
    ab.add_argument("--config", type=Path, required=True)
    ab.add_argument("--workers", type=int, default=None)
    ab.add_argument("--out", type=Path, required=True)

    pl = sub.add_parser("plot", help="loss-curve SVG and success CSVs")
    pl.add_argument("--metrics", type=Path, default=None)
    pl.add_argument("--reports", type=Path, nargs="+", default=None)
    pl.add_argument("--out", type=Path, required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("episodes", "workers"):
        value = getattr(args, name, None)
        if value is not None and value <= 0:
            build_parser().error(f"--{name} must be positive")

    try:
        result = COMMANDS[args.command](args)
        flags = {k: v for k, v in vars(args).items() if k != "command"}
        manifest = write_manifest(args.out, args.command, flags, result["files"])
    except Exception as e:
        log(f"❌ {args.command} failed: {type(e).__name__}: {e}")
        return 1

    print(dumps({**result["summary"], "manifest": str(manifest)}), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
