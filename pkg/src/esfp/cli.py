"""Command-line front end.

Every subcommand writes into the ``--out`` directory and records the seed and
the produced files in ``run.json``.  The exit code is 0 only when every
listed artifact exists afterwards.  ``ESFP_THREADS=1`` pins the BLAS pools to
one thread and makes ``pipeline`` use the single-threaded streaming path.
"""
from __future__ import annotations

import os

if os.environ.get("ESFP_THREADS") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from esfp.corruption import apply_profile, load_profile
from esfp.experiment import REPORT_FILES, ExperimentConfig, canonical_method, run_experiment, smooth_sequence
from esfp.hpstm import HPSTM
from esfp.kinematics import default_skeleton, load_skeleton, save_skeleton
from esfp.metrics import evaluate
from esfp.pipeline import load_pose_sequence, run_offline, run_threaded, save_pose_sequence
from esfp.presets import get_preset
from esfp.retarget import ArmMapper, RetargetConfig, write_command_log
from esfp.training import CurriculumConfig, MotionDataset, generate_synthetic_dataset, run_curriculum

log = logging.getLogger("esfp")


def deterministic() -> bool:
    return os.environ.get("ESFP_THREADS") == "1"


# --------------------------------------------------------------------------
# dataset directories


def save_dataset(data: MotionDataset, out: Path, seed: int, extra: dict | None = None) -> list[Path]:
    """One pose-sequence file pair per sequence plus ``dataset.json`` (lengths and file list)."""
    files = []
    for i in range(len(data)):
        files.append(save_pose_sequence(data.positions[i], out / f"seq_{i:04d}", extra={"seed": seed}))
    manifest = {"seed": seed, "sequences": [f.stem for f in files], "lengths": data.lengths.tolist(),
                **(extra or {})}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return [out / "dataset.json", *files]


def load_dataset(path: Path) -> MotionDataset:
    manifest = json.loads((path / "dataset.json").read_text())
    positions = np.stack([load_pose_sequence(path / name) for name in manifest["sequences"]])
    return MotionDataset(positions, np.asarray(manifest["lengths"], dtype=np.float64), [])


def _skeleton(args):
    return load_skeleton(args.skeleton) if getattr(args, "skeleton", None) else default_skeleton()


def _load_model(args, skeleton) -> HPSTM:
    if not args.checkpoint:
        raise FileNotFoundError("--checkpoint is required for this method")
    if not Path(args.checkpoint).with_suffix(".json").exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    return HPSTM.load(args.checkpoint, skeleton)


def _arm_indices(config: RetargetConfig, skeleton) -> tuple[int, int, int]:
    return tuple(skeleton.index(name) for name in config.arm_joints)


# --------------------------------------------------------------------------
# subcommands; each returns the list of artifacts it promised


def cmd_gen(args, out: Path) -> list[Path]:
    spec = get_preset(args.preset, args.seed).dataset
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        spec = replace(spec, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    spec = replace(spec, seed=args.seed)
    skeleton = _skeleton(args)
    data = generate_synthetic_dataset(spec, skeleton)
    save_skeleton(skeleton, out / "skeleton.json")
    return [out / "skeleton.json", *save_dataset(data, out, args.seed, {"spec": asdict(spec)})]


def cmd_corrupt(args, out: Path) -> list[Path]:
    profile = load_profile(args.profile).with_seed(args.seed)
    skeleton = _skeleton(args)
    src = Path(args.input)
    if (src / "dataset.json").exists():
        data = load_dataset(src)
        noisy = np.empty_like(data.positions)
        for i in range(len(data)):
            rng = np.random.default_rng([args.seed, 7, i])
            noisy[i] = apply_profile(data.positions[i], profile, skeleton.with_lengths(data.lengths[i]), rng)
        return save_dataset(MotionDataset(noisy, data.lengths, []), out, args.seed,
                            {"profile": asdict(profile), "source": str(src)})
    seq = load_pose_sequence(src)
    noisy = apply_profile(seq, profile, skeleton, np.random.default_rng(args.seed))
    return [save_pose_sequence(noisy, out / "corrupted", extra={"seed": args.seed, "profile": asdict(profile)})]


def cmd_train(args, out: Path) -> list[Path]:
    preset = get_preset(args.preset, args.seed)
    curriculum = preset.curriculum
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        curriculum = replace(curriculum, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    if args.profile:
        curriculum = replace(curriculum, stage2_profile=load_profile(args.profile))
    curriculum = replace(curriculum, seed=args.seed)
    skeleton = _skeleton(args)
    data = load_dataset(Path(args.input)) if args.input else generate_synthetic_dataset(preset.dataset, skeleton)
    model = HPSTM(preset.model, skeleton, seed=args.seed)
    result = run_curriculum(curriculum, data, model, out)
    (out / "curriculum.json").write_text(json.dumps(asdict(curriculum), indent=1, default=str))
    return [*result.checkpoints.values(), out / "train_log.csv", out / "curriculum.json"]


def cmd_smooth(args, out: Path) -> list[Path]:
    method = canonical_method(args.method)
    skeleton = _skeleton(args)
    model = _load_model(args, skeleton) if method.startswith("hpstm") else None
    seq = load_pose_sequence(args.input)
    smoothed = smooth_sequence(method, seq, model=model, stride=args.stride, seed=args.seed)
    return [save_pose_sequence(smoothed, out / "smoothed", extra={"seed": args.seed, "method": method})]


def cmd_eval(args, out: Path) -> list[Path]:
    if not args.reference:
        raise ValueError("--reference is required")
    pred, gt = load_pose_sequence(args.input), load_pose_sequence(args.reference)
    report = evaluate(pred, gt, _skeleton(args))
    path = out / "metrics.json"
    path.write_text(json.dumps({"seed": args.seed, **report.to_dict()}, indent=1))
    print(report.to_json())
    return [path]


def cmd_retarget(args, out: Path) -> list[Path]:
    config = RetargetConfig.load(args.config) if args.config else RetargetConfig()
    skeleton = _skeleton(args)
    commands = ArmMapper(config).run(load_pose_sequence(args.input), _arm_indices(config, skeleton))
    path = out / "commands.jsonl"
    write_command_log(commands, path)
    return [path]


def cmd_pipeline(args, out: Path) -> list[Path]:
    config = RetargetConfig.load(args.config) if args.config else RetargetConfig()
    skeleton = _skeleton(args)
    model = _load_model(args, skeleton)
    seq = load_pose_sequence(args.input)
    runner = run_offline if deterministic() else run_threaded
    smoothed, commands = runner(seq, model, stride=args.stride, retarget_config=config,
                                arm_indices=_arm_indices(config, skeleton))
    cmd_path = out / "commands.jsonl"
    write_command_log(commands, cmd_path)
    return [save_pose_sequence(smoothed, out / "smoothed", extra={"seed": args.seed}), cmd_path]


def cmd_experiment(args, out: Path) -> list[Path]:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.method:
        raw["methods"] = args.method
    raw.setdefault("methods", ["noisy", "savgol", "particle_filter"])
    raw["seed"] = args.seed
    if args.preset_given:
        raw["preset"] = args.preset
    if args.profile:
        raw["profile"] = args.profile
    if args.checkpoint:
        raw["checkpoint"] = args.checkpoint
    if args.stride_given:
        raw["stride"] = args.stride
    run_experiment(ExperimentConfig.from_dict(raw), out, _skeleton(args))
    return [out / name for name in REPORT_FILES]


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic motion dataset"),
    "corrupt": (cmd_corrupt, "corrupt a sequence or dataset with a noise profile"),
    "train": (cmd_train, "run the three-stage training curriculum"),
    "smooth": (cmd_smooth, "smooth one pose sequence with a method"),
    "eval": (cmd_eval, "compute metrics of a prediction against a reference"),
    "retarget": (cmd_retarget, "map a pose sequence to arm commands"),
    "pipeline": (cmd_pipeline, "stream-smooth a sequence and map it to arm commands"),
    "experiment": (cmd_experiment, "compare methods and write report tables"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config (meaning depends on the subcommand)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--preset", choices=("desk", "paper"), default=None)
    common.add_argument("--method", action="append", help="smoothing method; repeatable for experiment")
    common.add_argument("--profile", help="stage2, eval-hard, none or a JSON path")
    common.add_argument("--stride", type=int, default=None)
    common.add_argument("--checkpoint", help="model checkpoint prefix (without .json/.bin)")
    common.add_argument("--input", help="input pose sequence or dataset directory")
    common.add_argument("--reference", help="ground-truth pose sequence (eval)")
    common.add_argument("--skeleton", help="skeleton JSON (default: bundled 24-joint skeleton)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="esfp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.preset_given, args.stride_given = args.preset is not None, args.stride is not None
    args.preset = args.preset or "desk"
    args.stride = args.stride or 5
    if args.command == "smooth":
        args.method = args.method[-1] if args.method else "savgol"
    needs_input = {"corrupt", "smooth", "eval", "retarget", "pipeline"}
    if args.command in needs_input and not args.input:
        print(f"esfp {args.command}: --input is required", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = COMMANDS[args.command][0]
    try:
        artifacts = handler(args, out)
    except (FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"esfp {args.command}: {exc}", file=sys.stderr)
        return 1
    run_record = {"command": args.command, "seed": args.seed, "deterministic": deterministic(),
                  "artifacts": [str(p) for p in artifacts]}
    (out / "run.json").write_text(json.dumps(run_record, indent=1))
    missing = [p for p in artifacts if not Path(p).exists()]
    if missing:
        print(f"esfp {args.command}: missing artifacts {missing}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
