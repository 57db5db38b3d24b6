# poselift/api/cli.py
"""
Command-line surface: generate, stats, attrs, train, eval.

Every command resolves its parameters (defaults <- --config JSON <- flags)
before doing any work and writes them to resolved_config.json in --out.
"""
import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from pipeline.regressors.multitask import MultiTaskHead
from pipeline.regressors.progressive import build_net
from pipeline.regressors.store import load_head, load_net, save_model
from pipeline.tasks.evaluation import evaluate, evaluate_ablation
from pipeline.tasks.training import history_rows, train_multitask, train_pose
from poselift.core.config import DEFAULT_TAU_MM, POSELIFT_OUTPUT_DIR, POSELIFT_THREADS
from poselift.core.errors import ConfigError, PoseLiftError
from poselift.models.schemas import (
    Attribute,
    EpochRecord,
    GeneratorConfig,
    Manifest,
    ManifestEntry,
    RunConfig,
    SplitConfig,
    TrainConfig,
)
from poselift.services.dataset_store import load_dataset, save_dataset
from poselift.services.geometry import label_dataset
from poselift.services.metrics import (
    family_table,
    write_ablation_csv,
    write_pck_svg,
    write_report_csv,
    write_report_json,
)
from poselift.services.skeleton import ATTRIBUTE_JOINTS, JointId, group_of, joint_std, split_dataset
from poselift.services.synthetic import synth_generate, wild_generator_config

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"

GENERATE_DEFAULTS: Dict[str, Any] = {
    "n": 1000,
    "n_wild": None,
    "name": "synthetic",
    "train": 0.7,
    "val": 0.1,
    "test": 0.2,
    "noise_px": 1.0,
    "tau_mm": DEFAULT_TAU_MM,
    "tau_mode": "relative",
}
STATS_DEFAULTS: Dict[str, Any] = {"dataset": None}
ATTRS_DEFAULTS: Dict[str, Any] = {"dataset": None, "output": None, "tau_mm": DEFAULT_TAU_MM, "tau_mode": "relative"}
TRAIN_DEFAULTS: Dict[str, Any] = {
    **{name: field.default for name, field in TrainConfig.model_fields.items() if name != "seed"},
    "data": None,
    "head": None,
    "net": None,
    "progress": False,
}
EVAL_DEFAULTS: Dict[str, Any] = {
    "data": None,
    "net": None,
    "head": None,
    "wild": None,
    "oracle_attrs": False,
    "ablation": None,
    "method": None,
    "threads": POSELIFT_THREADS,
}


# ---------------------------------------------------------------- config


def _read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: invalid JSON at line {e.lineno} ({e.msg})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    return data


def resolve_config(command: str, defaults: Dict[str, Any], args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the --config file and command-line flags, in that order.

    Raises:
        ConfigError: If the config file names a key the command does not take
    """
    file_values = _read_config_file(getattr(args, "config", None))
    given = vars(args)
    unknown = sorted(set(file_values) - set(defaults) - {"seed", "out"})
    if unknown:
        raise ConfigError(f"{command}: unknown config key(s) {', '.join(unknown)}")
    params = dict(defaults)
    params.update({k: v for k, v in file_values.items() if k in defaults})
    params.update({k: v for k, v in given.items() if k in defaults})
    seed = given.get("seed", file_values.get("seed", 0))
    out = given.get("out", file_values.get("out", POSELIFT_OUTPUT_DIR))
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return RunConfig(command=command, seed=seed, out=str(out), params=params)


def _prepare_out(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(json.dumps(run.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _require(run: RunConfig, key: str) -> Any:
    value = run.params.get(key)
    if value in (None, ""):
        raise ConfigError(f"{run.command}: missing required parameter --{key.replace('_', '-')}")
    return value


def _validated(schema, /, **values):
    try:
        return schema(**values)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{schema.__name__}.{field}: {first['msg']}") from e


# ---------------------------------------------------------------- commands


def cmd_generate(run: RunConfig) -> int:
    p = run.params
    split = _validated(SplitConfig, train=p["train"], val=p["val"], test=p["test"])
    gen = _validated(
        GeneratorConfig, n=p["n"], name=p["name"], noise_px=p["noise_px"], tau_mm=p["tau_mm"], tau_mode=p["tau_mode"]
    )
    out = _prepare_out(run)

    ds = synth_generate(gen, run.seed)
    parts = dict(zip(("train", "val", "test"), split_dataset(ds, split)))
    n_wild = p["n_wild"] if p["n_wild"] is not None else max(1, len(parts["train"]))
    if n_wild < 1:
        raise ConfigError(f"n_wild must be at least 1, got {n_wild}")
    wild_seed = run.seed + 1
    wild = synth_generate(wild_generator_config(gen, n_wild), wild_seed)

    entries = []
    for name, part in parts.items():
        save_dataset(part, out / f"{name}.jsonl")
        entries.append(ManifestEntry(file=f"{name}.jsonl", domain=gen.domain, records=len(part), seed=run.seed))
    save_dataset(wild, out / "wild.jsonl")
    entries.append(ManifestEntry(file="wild.jsonl", domain=wild.records[0].domain, records=len(wild), seed=wild_seed))

    manifest = Manifest(name=gen.name, seed=run.seed, tau_mm=gen.tau_mm, tau_mode=gen.tau_mode, files=entries)
    (out / "manifest.json").write_text(json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    for entry in entries:
        print(f"{entry.file}: {entry.records} records ({entry.domain.value}, seed {entry.seed})")
    return 0


def cmd_stats(run: RunConfig) -> int:
    ds = load_dataset(_require(run, "dataset"))
    std = joint_std(ds)
    out = _prepare_out(run)
    rows = [(j.name.lower(), group_of(j).value, float(std.per_joint[j])) for j in JointId]
    with (out / "joint_std.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["joint", "group", "std_mm"])
        writer.writerows([name, group, repr(value)] for name, group, value in rows)
        writer.writerow(["mean", "all", repr(std.mean)])
    print(f"{'joint':<12} {'group':<9} std (mm)")
    for name, group, value in rows:
        print(f"{name:<12} {group:<9} {value:8.1f}")
    print(f"{'mean':<12} {'':<9} {std.mean:8.1f}")
    return 0


def cmd_attrs(run: RunConfig) -> int:
    source = Path(_require(run, "dataset"))
    ds = load_dataset(source)
    labeled, skipped = label_dataset(ds, float(run.params["tau_mm"]), run.params["tau_mode"])
    out = _prepare_out(run)
    target = Path(run.params["output"]) if run.params["output"] else out / f"{source.stem}.attrs.jsonl"
    save_dataset(labeled, target)

    histogram = {j: Counter() for j in ATTRIBUTE_JOINTS}
    for record in labeled:
        if record.attributes is not None:
            for joint, label in zip(ATTRIBUTE_JOINTS, record.attributes.labels):
                histogram[joint][label] += 1
    with (out / "attr_histogram.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["joint", *(a.token for a in Attribute), "total"])
        for joint, counts in histogram.items():
            writer.writerow([joint.name.lower(), *(counts[a] for a in Attribute), sum(counts.values())])
    if skipped:
        (out / "attrs_errors.txt").write_text("\n".join(skipped) + "\n", encoding="utf-8")
        logger.warning(f"{len(skipped)} record(s) skipped with a degenerate torso plane; ids in attrs_errors.txt")

    print(f"wrote {len(labeled)} labeled records to {target}")
    for joint, counts in histogram.items():
        print(f"{joint.name.lower():<12} " + " ".join(f"{a.token}={counts[a]}" for a in Attribute))
    return 0


def _write_history(history: Sequence[EpochRecord], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EpochRecord.model_fields), lineterminator="\n")
        writer.writeheader()
        for row in history_rows(history):
            writer.writerow({k: "" if v is None else v for k, v in row.items()})


def cmd_train(run: RunConfig) -> int:
    p = run.params
    cfg = _validated(TrainConfig, seed=run.seed, **{k: p[k] for k in TrainConfig.model_fields if k in p})
    data = Path(_require(run, "data"))
    out = Path(run.out)
    head_path = Path(p["head"]) if p["head"] else out / "head.ckpt"
    net_path = Path(p["net"]) if p["net"] else out / "net.ckpt"
    if cfg.stage >= 2 and not head_path.is_file():
        raise ConfigError(f"stage {cfg.stage} needs the stage-1 head checkpoint {head_path}; run `train --stage 1` first")
    if cfg.stage == 3 and not net_path.is_file():
        raise ConfigError(f"stage 3 needs the stage-2 network checkpoint {net_path}; run `train --stage 2` first")

    train = load_dataset(data / "train.jsonl")
    wild_path = data / "wild.jsonl"
    wild = load_dataset(wild_path) if wild_path.is_file() else None
    out = _prepare_out(run)

    if cfg.stage == 1:
        head = MultiTaskHead(cfg.head_width, cfg.heatmap_size, cfg.heatmap_sigma, cfg.beta_softargmax, cfg.seed)
        head, history = train_multitask(head, train, wild, cfg, progress=p["progress"])
        save_model(out / "head.ckpt", head)
    elif cfg.stage == 2:
        head = load_head(head_path)
        net = build_net(cfg.model, cfg.width, cfg.depth, cfg.use_attributes, cfg.seed)
        net, head, history = train_pose(net, head, train, cfg, progress=p["progress"])
        save_model(out / "net.ckpt", net)
    else:
        head = load_head(head_path)
        net = load_net(net_path)
        net, head, history = train_pose(net, head, train, cfg, wild=wild, progress=p["progress"])
        save_model(out / "head_ft.ckpt", head)
        save_model(out / "net_ft.ckpt", net)

    _write_history(history, out / f"history_stage{cfg.stage}.csv")
    print(f"stage {cfg.stage}: {len(history)} epochs, final loss {history[-1].loss!r}")
    return 0


def cmd_eval(run: RunConfig) -> int:
    p = run.params
    test = load_dataset(_require(run, "data"))
    head = load_head(p["head"]) if p["head"] else None
    wild = load_dataset(p["wild"]) if p["wild"] else None
    threads = int(p["threads"])

    if p["ablation"]:
        if len(p["ablation"]) != 3:
            raise ConfigError("--ablation takes three network checkpoints: BASE PROG PROG_ATTR")
        base, prog, prog_attr = (load_net(path) for path in p["ablation"])
        out = _prepare_out(run)
        reports = evaluate_ablation(
            {"baseline": (base, None), "progressive": (prog, None), "progressive+attr": (prog_attr, head)},
            test,
            oracle_attrs=p["oracle_attrs"],
            threads=threads,
        )
        write_ablation_csv(reports, out / "ablation.csv")
        for method, report in reports.items():
            write_report_json(report, out / f"report_{method.replace('+', '_')}.json")
            print(f"{method:<18} MPJPE {report.mpjpe_p1_mm:8.2f} mm  P2 {report.mpjpe_p2_mm:8.2f} mm")
        return 0

    net = load_net(p["net"] or Path(run.out) / "net.ckpt")
    out = _prepare_out(run)
    result = evaluate(net, head, test, method=p["method"], oracle_attrs=p["oracle_attrs"], wild=wild, threads=threads)
    report = result.report
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    write_pck_svg(result.thresholds, result.curve, out / "pck.svg", title=f"3DPCK ({report.method})")
    print(f"{report.method}: {report.sample_count} samples")
    print(f"  MPJPE P1 {report.mpjpe_p1_mm:.2f} mm, P2 {report.mpjpe_p2_mm:.2f} mm")
    print(f"  3DPCK@{report.pck_threshold_mm:g} {report.pck3d:.3f}, AUC {report.auc:.3f}")
    if report.attr_acc_mean is not None:
        print(f"  attribute accuracy {report.attr_acc_mean:.3f}")
    if report.domain_acc is not None:
        print(f"  domain accuracy {report.domain_acc:.3f}")
    for family, value in family_table(report.per_joint_mpjpe_mm).items():
        print(f"  {family:<9} {value:8.2f} mm")
    return 0


COMMANDS: Dict[str, Tuple[Callable[[RunConfig], int], Dict[str, Any]]] = {
    "generate": (cmd_generate, GENERATE_DEFAULTS),
    "stats": (cmd_stats, STATS_DEFAULTS),
    "attrs": (cmd_attrs, ATTRS_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
}


# ---------------------------------------------------------------- parser


def _bool_flag(parser: argparse.ArgumentParser, name: str, help_text: str) -> None:
    parser.add_argument(name, action="store_true", default=argparse.SUPPRESS, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with parameters for the command")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Random seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help=f"Output directory (default {POSELIFT_OUTPUT_DIR})")

    parser = argparse.ArgumentParser(prog="poselift", description="3D human pose lifting toolkit", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    gen = sub.add_parser("generate", parents=[common], help="Generate synthetic train/val/test/wild datasets")
    gen.add_argument("--n", type=int, default=S, help="Records before splitting")
    gen.add_argument("--n-wild", type=int, default=S, help="Labeled2D records (default: train split size)")
    gen.add_argument("--name", default=S)
    gen.add_argument("--train", type=float, default=S, help="Train fraction")
    gen.add_argument("--val", type=float, default=S, help="Validation fraction")
    gen.add_argument("--test", type=float, default=S, help="Test fraction")
    gen.add_argument("--noise-px", type=float, default=S, help="2D detection noise sigma in pixels")
    gen.add_argument("--tau-mm", type=float, default=S)
    gen.add_argument("--tau-mode", choices=["relative", "absolute"], default=S)

    stats = sub.add_parser("stats", parents=[common], help="Per-joint standard deviation of 3D locations")
    stats.add_argument("dataset", default=S)

    attrs = sub.add_parser("attrs", parents=[common], help="Label a dataset with pose attributes")
    attrs.add_argument("dataset", default=S)
    attrs.add_argument("--output", default=S, help="Labeled dataset path (default OUT/<name>.attrs.jsonl)")
    attrs.add_argument("--tau-mm", type=float, default=S, help="Attribute threshold; 'inf' labels everything OnPlane")
    attrs.add_argument("--tau-mode", choices=["relative", "absolute"], default=S)

    train = sub.add_parser("train", parents=[common], help="Run one training stage")
    train.add_argument("--stage", type=int, choices=[1, 2, 3], default=S)
    train.add_argument("--data", default=S, help="Directory holding train.jsonl and wild.jsonl")
    train.add_argument("--head", default=S, help="Stage-1 head checkpoint (default OUT/head.ckpt)")
    train.add_argument("--net", default=S, help="Stage-2 network checkpoint (default OUT/net.ckpt)")
    train.add_argument("--epochs", type=int, default=S)
    train.add_argument("--lr", type=float, default=S)
    train.add_argument("--lr-decay", type=float, default=S, help="Final learning rate as a fraction of --lr")
    train.add_argument("--batch-size", type=int, default=S)
    train.add_argument("--model", choices=["progressive", "baseline"], default=S)
    train.add_argument("--use-attributes", type=lambda v: v.lower() in ("1", "true", "yes"), default=S)
    train.add_argument("--attr-strategy", choices=["3d_only", "mixed", "mixed_da"], default=S)
    train.add_argument("--lambda-grl", type=float, default=S)
    train.add_argument("--lambda-attr", type=float, default=S)
    train.add_argument("--lambda-domain", type=float, default=S)
    train.add_argument("--width", type=int, default=S)
    train.add_argument("--depth", type=int, default=S)
    train.add_argument("--head-width", type=int, default=S)
    train.add_argument("--heatmap-size", type=int, default=S)
    train.add_argument("--beta-softargmax", type=float, default=S)
    train.add_argument("--scale-jitter", type=float, default=S)
    _bool_flag(train, "--progress", "Show a progress bar per stage")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate checkpoints on a dataset")
    ev.add_argument("--data", default=S, help="Labeled3D dataset file")
    ev.add_argument("--net", default=S, help="Network checkpoint (default OUT/net.ckpt)")
    ev.add_argument("--head", default=S, help="Multi-task head checkpoint")
    ev.add_argument("--wild", default=S, help="Labeled2D dataset for domain accuracy")
    ev.add_argument("--method", default=S, help="Method label in the report")
    ev.add_argument("--ablation", nargs=3, metavar=("BASE", "PROG", "PROG_ATTR"), default=S)
    ev.add_argument("--threads", type=int, default=S, help="Evaluation workers (default POSELIFT_THREADS)")
    _bool_flag(ev, "--oracle-attrs", "Feed ground-truth attributes instead of the head's predictions")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one command, return the exit code."""
    args = build_parser().parse_args(argv)
    handler, defaults = COMMANDS[args.command]
    try:
        resolved = resolve_config(args.command, defaults, args)
        logger.info(f"Running {args.command} (seed={resolved.seed}, out={resolved.out})")
        return handler(resolved)
    except PoseLiftError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{e.prefix}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"io error: {e}", file=sys.stderr)
        return 1
