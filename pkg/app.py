#!/usr/bin/env python3
"""
Command line for the physical patch attack pipeline.

    python app.py synth-data --out runs
    python app.py train --out runs
    python app.py attack --out runs --experiment all --jobs 4
    python app.py report --out runs

Everything lands under --out: data/ (synthetic scenes), model.ckpt,
attacks/<exp_id>/<scene>__to_<target>/ and reports/.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from attacks import attack_sequence, dump_inspection
from classifier import Dataset, build_model, load_checkpoint, save_checkpoint, train
from config import ExperimentSpec, PipelineConfig, derive_seed, load_config
from errors import DataValidationError, PatchAttackError, UsageError, exit_code_for
from evaluation import aggregate, evaluate_attack, load_result, save_result
from geodata import Rejection, filter_admissible, iter_sequence_dirs, load_sequence, write_json
from patch_model import load_patch, save_patch
from reports import write_reports
from scene_synth import generate_dataset, load_split

logger = logging.getLogger("app")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
NON_TARGETED = "any"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _task_name(scene_id: str, target: Optional[int]) -> str:
    return f"{scene_id}__to_{NON_TARGETED if target is None else target}"


def _data_dir(args) -> Path:
    return Path(args.data) if args.data else Path(args.out) / "data"


def _checkpoint(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.ckpt"


# -- synth-data / train ----------------------------------------------------

def cmd_synth_data(args, cfg: PipelineConfig) -> None:
    out = _data_dir(args)
    generate_dataset(cfg.synth, out, force=args.force, jobs=args.jobs, progress=args.verbose)
    logger.info("dataset written to %s", out)


def cmd_train(args, cfg: PipelineConfig) -> None:
    data = _data_dir(args)
    train_set = Dataset.from_sequences(load_split(data, "train"))
    val_set = Dataset.from_sequences(load_split(data, "val"))
    model = build_model(cfg.model)
    t = cfg.training
    log = train(model, train_set, t.epochs, t.learning_rate, t.batch_size, t.seed,
                validation=val_set, progress=args.verbose)
    path = _checkpoint(args)
    save_checkpoint(model, path)
    write_json(log.to_dict(), path.with_name("training_log.json"))
    acc = log.final_val_accuracy
    if acc is not None and acc < 0.90:
        logger.warning("held-out accuracy %.3f is below the 0.90 benchmark gate", acc)
    logger.info("model saved to %s (held-out accuracy %s)", path, "n/a" if acc is None else f"{acc:.3f}")


# -- attack ----------------------------------------------------------------

_MODELS: Dict[Tuple[str, int], object] = {}


def _model_for(checkpoint: str):
    """Per-process model cache keyed by path and modification time."""
    try:
        key = (checkpoint, Path(checkpoint).stat().st_mtime_ns)
    except OSError:
        key = (checkpoint, -1)
    if key not in _MODELS:
        _MODELS[key] = load_checkpoint(checkpoint)
    return _MODELS[key]


def _run_attack(task) -> Tuple[str, int, int]:
    """One (experiment, scene, target) attack; runs inside a worker process."""
    cfg, exp_id, checkpoint, scene_dir, target, targeted, out_dir, dump, progress = task
    model = _model_for(checkpoint)
    seq = filter_admissible(load_sequence(scene_dir), model, cfg.filter)
    if isinstance(seq, Rejection):
        raise DataValidationError(f"{scene_dir}: sequence no longer admissible: {seq.reason}")
    exp = cfg.experiment(exp_id)
    seed = derive_seed(cfg.attack["seed"], exp_id, seq.scene_id, NON_TARGETED if target is None else target)
    attack_cfg = cfg.attack_config(exp, target, targeted=targeted, seed=seed)

    patch, result = attack_sequence(model, seq, attack_cfg, progress=progress)
    out = Path(out_dir)
    save_patch(patch, out / "patch.json")
    result = replace(result, patch_file="patch.json")
    save_result(result, out / "result.json")
    if dump:
        dump_inspection(seq, patch, attack_cfg, out / "inspection")
    return out.name, sum(r.success for r in result.records), len(result.records)


def _read_manifest(path: Path) -> List[Tuple[str, Optional[int]]]:
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
        return [(str(e["scene_id"]), None if e.get("target") is None else int(e["target"])) for e in entries]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"attack manifest {path} is unreadable: {exc}") from exc


def _attack_pairs(args, cfg: PipelineConfig, model) -> List[Tuple[Path, Optional[int]]]:
    """Admissible (scene directory, target) pairs; target == true label is skipped."""
    split_dir = _data_dir(args) / args.split
    dirs = {d.name: d for d in iter_sequence_dirs(split_dir)}
    if not dirs:
        raise DataValidationError(f"{split_dir}: no scene directories found")
    admissible = {}
    for name, d in dirs.items():
        seq = filter_admissible(load_sequence(d), model, cfg.filter)
        if isinstance(seq, Rejection):
            logger.warning("skipping scene %s: %s", name, seq.reason)
        else:
            admissible[seq.scene_id] = (d, seq.true_label)

    if args.manifest:
        wanted = _read_manifest(Path(args.manifest))
    elif args.non_targeted:
        wanted = [(scene, None) for scene in admissible]
    else:
        wanted = [(scene, t) for scene in admissible for t in cfg.targets]

    pairs = []
    for scene, target in wanted:
        if scene not in admissible:
            logger.warning("skipping %s: not an admissible scene of split %s", scene, args.split)
            continue
        directory, true_label = admissible[scene]
        if args.non_targeted:
            target = None
        elif target is None:
            raise UsageError(f"manifest entry for {scene} has no target (use --non-targeted)")
        elif target == true_label:
            logger.warning("skipping %s -> %d: target equals the true label", scene, target)
            continue
        pairs.append((directory, target))
    return pairs


def cmd_attack(args, cfg: PipelineConfig) -> None:
    checkpoint = _checkpoint(args)
    model = _model_for(str(checkpoint))
    experiments = cfg.experiments if args.experiment == "all" else (cfg.experiment(args.experiment),)
    pairs = _attack_pairs(args, cfg, model)
    if not pairs:
        raise DataValidationError("no (scene, target) pairs left to attack")

    tasks = []
    for exp in experiments:
        for scene_dir, target in pairs:
            out_dir = Path(args.out) / "attacks" / exp.exp_id / _task_name(scene_dir.name, target)
            if (out_dir / "result.json").exists() and not args.force:
                raise UsageError(f"{out_dir} already holds a result (use --force to overwrite)")
            tasks.append((cfg, exp.exp_id, str(checkpoint), str(scene_dir), target, not args.non_targeted,
                          str(out_dir), args.dump_composites, args.verbose and args.jobs == 1))
    logger.info("running %d attack task(s) over %d experiment(s) with %d job(s)",
                len(tasks), len(experiments), args.jobs)

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            outcomes = list(ex.map(_run_attack, tasks))
    else:
        outcomes = [_run_attack(t) for t in tasks]
    for name, hits, frames in outcomes:
        logger.info("%s: %d/%d frames successful", name, hits, frames)


# -- evaluate / report -----------------------------------------------------

def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    model = _model_for(str(_checkpoint(args)))
    seq = filter_admissible(load_sequence(args.scene), model, cfg.filter)
    if isinstance(seq, Rejection):
        raise DataValidationError(f"{args.scene}: {seq.reason}")
    patch = load_patch(args.patch)
    if args.non_targeted == (args.target is not None):
        raise UsageError("evaluate needs exactly one of --target or --non-targeted")
    exp = cfg.experiment(args.experiment) if args.experiment else None
    frames_attacked = exp.frames_attacked if exp else args.frames_attacked
    row = ExperimentSpec("evaluate", patch.n, patch.element_size_m, frames_attacked)
    attack_cfg = cfg.attack_config(row, args.target, targeted=not args.non_targeted)
    attack_cfg.check_sequence(seq, model.config.class_count)
    result = evaluate_attack(model, seq, patch, attack_cfg)
    result = replace(result, patch_file=str(args.patch))
    path = Path(args.out) / "evaluations" / f"{_task_name(seq.scene_id, args.target)}.json"
    save_result(result, path)
    hits = sum(r.success for r in result.records)
    logger.info("%s: %d/%d frames successful; result written to %s", seq.scene_id, hits, len(result.records), path)


def cmd_report(args, cfg: PipelineConfig) -> None:
    root = Path(args.attacks) if args.attacks else Path(args.out) / "attacks"
    exp_dirs = sorted(d for d in root.glob("*") if d.is_dir())
    if args.experiment != "all":
        exp_dirs = [d for d in exp_dirs if d.name == args.experiment]
    reports = []
    for exp_dir in exp_dirs:
        results = [load_result(p) for p in sorted(exp_dir.glob("*/result.json"))]
        # targeted and non-targeted runs share an experiment directory but never a report row
        for targeted in (True, False):
            group = [r for r in results if r.targeted == targeted]
            if not group:
                continue
            for scope in cfg.report.scopes:
                reports.append(aggregate(group, scope=scope, exp_id=exp_dir.name, allow_mixed=args.allow_mixed,
                                         bin_width=cfg.report.bin_width, class_count=cfg.model.class_count))
    if not reports:
        raise DataValidationError(f"{root}: no attack results found")
    outputs = write_reports(reports, Path(args.out) / "reports")
    logger.info("report complete: %d row(s), summary at %s", len(reports), outputs["summary"])


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file merged over default_config.json")
    common.add_argument("--seed", type=int, help="master seed; overrides every section's seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")

    parser = _Parser(description="Physically constrained adversarial patch attacks on overhead imagery")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic revisit dataset")
    p.add_argument("--data", help="dataset directory (default: <out>/data)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--data", help="dataset directory (default: <out>/data)")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="optimize patches over (sequence, target) pairs")
    p.add_argument("--data", help="dataset directory (default: <out>/data)")
    p.add_argument("--split", default="val", choices=["train", "val"], help="scenes to attack")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    p.add_argument("--experiment", default="all", help="experiment id from the config, or 'all'")
    p.add_argument("--manifest", help='JSON list of {"scene_id": ..., "target": ...} pairs')
    p.add_argument("--non-targeted", action="store_true", help="push predictions away from the true label")
    p.add_argument("--dump-composites", action="store_true", help="write composite PPMs and edge PBMs")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a saved patch on one sequence")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--patch", required=True, help="patch JSON file")
    p.add_argument("--target", type=int, help="target label")
    p.add_argument("--non-targeted", action="store_true")
    p.add_argument("--experiment", help="take frames_attacked from this experiment")
    p.add_argument("--frames-attacked", type=int, default=1)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="aggregate attack results into CSV/JSON reports")
    p.add_argument("--attacks", help="attack results directory (default: <out>/attacks)")
    p.add_argument("--experiment", default="all", help="experiment id, or 'all'")
    p.add_argument("--allow-mixed", action="store_true", help="pool results from differing configurations")
    p.set_defaults(func=cmd_report)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    # basicConfig is a no-op once handlers exist
    logging.getLogger().setLevel(level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.verbose, args.quiet)
        if args.jobs < 1:
            raise UsageError(f"--jobs must be at least 1, got {args.jobs}")
        cfg = load_config(args.config, seed=args.seed)
        args.func(args, cfg)
    except PatchAttackError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
