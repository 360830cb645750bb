#!/usr/bin/env python3
"""
Command-line surface - generate, train, eval, ablate, check and status.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error,
4 numeric abort, 130 interrupted.
"""

import argparse
import json
import platform
from dataclasses import replace
from pathlib import Path

import torch
from rich.console import Console
from rich.table import Table

from modules import checks, metrics, synthdata
from modules.model import load_checkpoint
from modules.system_monitor import SystemMonitor
from modules.trainer import LAST_CHECKPOINT, METRICS_LOG, BTSegTrainer
from utils.config import Config, check_stride_fit, config_diff, fingerprint, load_run_config, to_dict
from utils.errors import BTSegError, CheckFailure, ConfigError, DatasetIOError
from utils.logger import setup_logger

console = Console()

ABLATION_ROWS = (
    ("source only", dict(use_bt=False, use_warp=False, use_crop=False, pooling="avg")),
    ("BT", dict(use_bt=True, use_warp=False, use_crop=False, pooling="avg")),
    ("BT + warp", dict(use_bt=True, use_warp=True, use_crop=False, pooling="avg")),
    ("BT + warp + crop", dict(use_bt=True, use_warp=True, use_crop=True, pooling="avg")),
    ("pooling segm", dict(use_bt=True, use_warp=True, use_crop=True, pooling="segm")),
    ("pooling conf", dict(use_bt=True, use_warp=True, use_crop=True, pooling="conf")),
    ("pooling segconf", dict(use_bt=True, use_warp=True, use_crop=True, pooling="segconf")),
)
SWITCHES = ("use_bt", "use_warp", "use_crop", "pooling")


def write_json(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"could not write {path.name}: {e}", path) from e
    return path


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"could not write {path.name}: {e}", path) from e
    return path


def _open_split(data_dir, split):
    dataset = synthdata.PairedDataset(data_dir, split=split)
    if len(dataset) == 0:
        raise ConfigError(f"dataset split '{split}' in {data_dir} is empty", key="eval.split")
    return dataset


def _check_dataset_scene(run_config, dataset, stride):
    logger = setup_logger()
    diff = config_diff(run_config.scene, dataset.scene)
    if diff:
        logger.warning(f"Dataset was generated with a different scene ({', '.join(diff)}); "
                       f"using the dataset's scene")
    check_stride_fit(dataset.scene.image_size, stride, "scene.image_size")


# ---------------------------
# Subcommands
# ---------------------------
def cmd_generate(run_config, out_dir):
    manifest = synthdata.write_dataset(run_config.scene, run_config.dataset.count, out_dir,
                                       run_config.dataset.train_fraction)
    table = Table(title=f"Dataset {out_dir}")
    table.add_column("split")
    table.add_column("pairs", justify="right")
    for split in ("train", "val"):
        table.add_row(split, str(sum(1 for s in manifest["samples"] if s["split"] == split)))
    console.print(table)
    console.print(f"scene fingerprint: {manifest['fingerprint']}")
    return 0


def cmd_train(run_config, data_dir, out_dir, resume=False):
    out_dir = Path(out_dir)
    logger = setup_logger(log_file=out_dir / "run.log")
    dataset = synthdata.PairedDataset(data_dir, split="train")
    _check_dataset_scene(run_config, dataset, max(run_config.train.stage_strides))
    trainer = BTSegTrainer(run_config.train, dataset.scene, out_dir=out_dir)
    write_json(out_dir / "config.json", {"fingerprint": trainer.fingerprint,
                                         "scene": to_dict(dataset.scene),
                                         "train": to_dict(run_config.train),
                                         "runtime": Config().as_dict(),
                                         "host": SystemMonitor().get_static_system_info()})
    result = trainer.fit(dataset, resume=resume)
    summary = {
        "fingerprint": trainer.fingerprint,
        "steps": len(result.log),
        "total_steps": run_config.train.total_steps,
        "pairs": result.prepared,
        "final": result.log[-1] if result.log else None,
        "checkpoint": result.checkpoint.name if result.checkpoint else None,
    }
    write_json(out_dir / "train_summary.json", summary)
    logger.info(f"Training finished; checkpoint at {result.checkpoint}")
    return 0


def cmd_eval(run_config, data_dir, checkpoint):
    options = run_config.eval
    model, payload = load_checkpoint(checkpoint)
    dataset = _open_split(data_dir, options.split)
    _check_dataset_scene(run_config, dataset, model.encoder_spec.max_stride)
    report = metrics.evaluate(model, dataset, options, ignore_index=run_config.train.ignore_index,
                              config_fingerprint=payload.get("fingerprint"))
    out_dir = Path(checkpoint).parent
    stem = f"eval_{options.domain}_{options.split}"
    record = report.to_record()
    record["checkpoint_step"] = payload["step"]
    write_json(out_dir / f"{stem}.json", record)
    write_text(out_dir / f"{stem}.txt", report.render_table())
    report.print_table(console, title=f"{options.domain} / {options.split}: IoU (%)")
    return 0


def ablation_configs(train_config):
    return [(name, replace(train_config, **switches)) for name, switches in ABLATION_ROWS]


def cmd_ablate(run_config, data_dir, out_dir):
    """Train and evaluate every switch combination with shared seeds"""
    logger = setup_logger(log_file=Path(out_dir) / "run.log")
    out_dir = Path(out_dir)
    train_set = synthdata.PairedDataset(data_dir, split="train")
    _check_dataset_scene(run_config, train_set, max(run_config.train.stage_strides))
    eval_set = _open_split(data_dir, run_config.eval.split)

    rows = []
    for i, (name, train_config) in enumerate(ablation_configs(run_config.train)):
        logger.info(f"Ablation row {i + 1}/{len(ABLATION_ROWS)}: {name}")
        trainer = BTSegTrainer(train_config, train_set.scene, out_dir=out_dir / f"row{i + 1}")
        result = trainer.fit(train_set)
        report = metrics.evaluate(result.model, eval_set, run_config.eval,
                                  ignore_index=train_config.ignore_index,
                                  config_fingerprint=trainer.fingerprint)
        record = report.to_record()
        record.update(row=name, switches={k: getattr(train_config, k) for k in SWITCHES})
        rows.append(record)

    write_json(out_dir / "ablation.json", {"fingerprint": fingerprint(run_config.experiment_dict()),
                                           "rows": rows})
    write_text(out_dir / "ablation.txt", render_ablation(rows, train_set.scene.class_names))
    print_ablation(rows, train_set.scene.class_names)
    return 0


def _ablation_cells(row):
    return ["-" if v is None else f"{100 * v:.1f}" for v in row["per_class_iou"]] + \
           [f"{100 * row['mean_iou']:.1f}"]


def render_ablation(rows, class_names):
    """Fixed-width table: switches, then per-class IoU and mIoU"""
    names = list(class_names) + ["mIoU"]
    width = max(7, max(len(n) for n in names) + 1)
    lead = max(len(r["row"]) for r in rows) + 2
    lines = [f"{'config':<{lead}}" + "".join(f"{n:>{width}}" for n in names)]
    for row in rows:
        lines.append(f"{row['row']:<{lead}}" + "".join(f"{c:>{width}}" for c in _ablation_cells(row)))
    return "\n".join(lines)


def print_ablation(rows, class_names):
    table = Table(title="Ablation: IoU (%) on the adverse-domain split")
    table.add_column("config")
    for name in class_names:
        table.add_column(name, justify="right")
    table.add_column("mIoU", justify="right", style="bold")
    for row in rows:
        table.add_row(row["row"], *_ablation_cells(row))
    console.print(table)


def cmd_check(scope="all", seed=0):
    results = checks.run_checks(scope, seed=seed)
    table = Table(title=f"Numerical checks ({scope})")
    table.add_column("check")
    table.add_column("max rel. error", justify="right")
    table.add_column("result")
    for r in results:
        table.add_row(r.name, f"{r.max_rel_error:.3e}", "[green]pass[/green]" if r.passed else "[red]FAIL[/red]")
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailure(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0


def cmd_status(run_config, out_dir):
    runtime = Config()
    monitor = SystemMonitor()
    table = Table(title="BTSeg status")
    table.add_column("item")
    table.add_column("value")
    for key, value in runtime.as_dict().items():
        table.add_row(key, str(value))
    table.add_row("torch", torch.__version__)
    table.add_row("python", platform.python_version())
    table.add_row("config fingerprint", run_config.fingerprint())
    table.add_row("host", monitor.get_quick_status(out_dir if Path(out_dir).exists() else "."))

    log_path = Path(out_dir) / METRICS_LOG
    if log_path.exists():
        lines = [line for line in log_path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if lines:
            last = json.loads(lines[-1])
            table.add_row("last step", str(last["step"]))
            table.add_row("last l_ce", f"{last['l_ce']:.4f}")
            table.add_row("last l_bt", "n/a" if last["l_bt"] is None else f"{last['l_bt']:.4f}")
    table.add_row("checkpoint", "yes" if (Path(out_dir) / LAST_CHECKPOINT).exists() else "none")
    console.print(table)
    return 0


# ---------------------------
# Argument handling
# ---------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="btseg", description="Barlow Twins regularized segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory")
        return p

    common(sub.add_parser("generate", help="write a synthetic paired dataset"), data=False)
    train = common(sub.add_parser("train", help="train a model"))
    train.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    train.add_argument("--steps", type=int, help="override train.total_steps")
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    ev.add_argument("--checkpoint", help=f"checkpoint file (default <out>/{LAST_CHECKPOINT})")
    ev.add_argument("--domain", choices=("target", "source"))
    ev.add_argument("--split", choices=("train", "val"))
    ablate = common(sub.add_parser("ablate", help="run the seven-row ablation sweep"))
    ablate.add_argument("--steps", type=int, help="override train.total_steps")
    check = sub.add_parser("check", help="numerical self-checks")
    check.add_argument("--scope", choices=checks.SCOPES, default="all")
    check.add_argument("--seed", type=int, default=0)
    common(sub.add_parser("status", help="environment and run status"), data=False)
    return parser


def overrides_from_args(args):
    """Flags layered over the config file (flag > file > default)"""
    overrides = {}
    if getattr(args, "seed", None) is not None:
        key = "scene.seed" if args.command == "generate" else "train.seed"
        overrides[key] = args.seed
    if getattr(args, "out", None) is not None:
        key = "paths.data_dir" if args.command == "generate" else "paths.out_dir"
        overrides[key] = args.out
    if getattr(args, "data", None) is not None:
        overrides["paths.data_dir"] = args.data
    if getattr(args, "steps", None) is not None:
        overrides["train.total_steps"] = args.steps
    if getattr(args, "domain", None) is not None:
        overrides["eval.domain"] = args.domain
    if getattr(args, "split", None) is not None:
        overrides["eval.split"] = args.split
    return overrides


def dispatch(args):
    if args.command == "check":
        return cmd_check(args.scope, args.seed)
    run_config = load_run_config(args.config, overrides_from_args(args))
    paths = run_config.paths
    if args.command == "generate":
        return cmd_generate(run_config, paths.data_dir)
    if args.command == "train":
        return cmd_train(run_config, paths.data_dir, paths.out_dir, resume=args.resume)
    if args.command == "eval":
        checkpoint = args.checkpoint or Path(paths.out_dir) / LAST_CHECKPOINT
        return cmd_eval(run_config, paths.data_dir, checkpoint)
    if args.command == "ablate":
        return cmd_ablate(run_config, paths.data_dir, paths.out_dir)
    return cmd_status(run_config, paths.out_dir)


def main(argv=None):
    logger = setup_logger()
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as e:
        key = f" [{e.key}]" if e.key else ""
        logger.error(f"Configuration error{key}: {e}")
        return e.exit_code
    except BTSegError as e:
        logger.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1
