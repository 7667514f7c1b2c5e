"""Method comparison runs and report emission.

A run config is a JSON object::

    {"seed": 0, "preset": "desk", "dataset": {...}, "profile": "eval-hard",
     "methods": ["noisy", "savgol", "particle_filter", "hpstm", "hpstm_cov"],
     "checkpoint": "train/model", "checkpoint_cov": null, "stride": 5,
     "split": "val", "max_sequences": null,
     "savgol": {"window": 7, "order": 2},
     "particle_filter": {"particles": 500, "process_sigma": 0.01, "meas_sigma": 0.03}}

Only ``methods`` is required.  ``dataset`` overrides fields of the preset's
synthetic dataset spec; ``profile`` is a named profile, an inline object or
a JSON path.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from esfp.baselines import particle_filter_smooth, savgol_smooth
from esfp.corruption import NoiseProfile, apply_profile, load_profile
from esfp.hpstm import HPSTM
from esfp.kinematics import SkeletonDefinition, default_skeleton
from esfp.metrics import METRIC_LABELS, MetricReport, evaluate
from esfp.pipeline import run_offline
from esfp.presets import get_preset
from esfp.training import MotionDataset, SyntheticDatasetSpec, generate_synthetic_dataset

log = logging.getLogger(__name__)

METHODS = ("noisy", "savgol", "particle_filter", "hpstm", "hpstm_cov")
ALIASES = {"pf": "particle_filter", "hpstm+cov": "hpstm_cov", "hpstm+covariance": "hpstm_cov"}
REPORT_FILES = ("report.csv", "report.json", "report.md")


def canonical_method(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return name


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    seed: int = 0
    preset: str = "desk"
    dataset: dict = field(default_factory=dict)
    profile: str | dict = "eval-hard"
    checkpoint: str | None = None
    checkpoint_cov: str | None = None
    stride: int = 5
    split: str = "val"
    max_sequences: int | None = None
    savgol: dict = field(default_factory=lambda: {"window": 7, "order": 2})
    particle_filter: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        object.__setattr__(self, "methods", tuple(canonical_method(m) for m in self.methods))
        if self.split not in ("val", "all"):
            raise ValueError("split must be 'val' or 'all'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def noise_profile(self) -> NoiseProfile:
        if isinstance(self.profile, dict):
            return NoiseProfile.from_dict(self.profile)
        return load_profile(self.profile)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        base = get_preset(self.preset, self.seed).dataset
        overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in self.dataset.items()}
        return replace(base, **overrides)


@dataclass
class EvaluationSet:
    clean: np.ndarray  # (N, T, J, 3)
    noisy: np.ndarray
    lengths: np.ndarray  # (N, J)


def corrupt_dataset(data: MotionDataset, profile: NoiseProfile, skeleton: SkeletonDefinition,
                    seed: int) -> np.ndarray:
    """Corrupt every sequence with its own subject skeleton and a per-sequence seed stream."""
    out = np.empty_like(data.positions)
    for i in range(len(data)):
        rng = np.random.default_rng([seed, 7, i])
        out[i] = apply_profile(data.positions[i], profile, skeleton.with_lengths(data.lengths[i]), rng)
    return out


def build_evaluation_set(config: ExperimentConfig, skeleton: SkeletonDefinition) -> EvaluationSet:
    data = generate_synthetic_dataset(config.dataset_spec(), skeleton)
    if config.split == "val":
        data = data.split()[1]
    if config.max_sequences is not None:
        data = data.subset(range(min(len(data), config.max_sequences)))
    return EvaluationSet(data.positions, corrupt_dataset(data, config.noise_profile(), skeleton, config.seed),
                         data.lengths)


def smooth_sequence(method: str, seq, *, model: HPSTM | None = None, stride: int = 5, seed: int = 0,
                    savgol: dict | None = None, particle_filter: dict | None = None) -> np.ndarray:
    method = canonical_method(method)
    seq = np.asarray(seq, dtype=np.float64)
    if method == "noisy":
        return seq.copy()
    if method == "savgol":
        return savgol_smooth(seq, **(savgol or {}))
    if method == "particle_filter":
        return particle_filter_smooth(seq, rng=np.random.default_rng(seed), **(particle_filter or {}))
    if model is None:
        raise ValueError(f"method {method!r} needs a model checkpoint")
    use_cov = method == "hpstm_cov"
    if use_cov and not model.config.covariance:
        raise ValueError("hpstm_cov needs a model configured with the covariance head")
    return run_offline(seq, model, stride=stride, use_covariance=use_cov)


def evaluate_methods(evalset: EvaluationSet, methods, skeleton: SkeletonDefinition, *, models: dict | None = None,
                     stride: int = 5, seed: int = 0, savgol: dict | None = None,
                     particle_filter: dict | None = None) -> dict[str, MetricReport]:
    """Mean MetricReport per method over all sequences.

    Bone metrics use each subject's own lengths as the reference.
    """
    models = models or {}
    results = {}
    for method in map(canonical_method, methods):
        reports = []
        for i in range(evalset.clean.shape[0]):
            pred = smooth_sequence(method, evalset.noisy[i], model=models.get(method), stride=stride,
                                   seed=seed + i, savgol=savgol, particle_filter=particle_filter)
            reports.append(evaluate(pred, evalset.clean[i], skeleton.with_lengths(evalset.lengths[i])))
        results[method] = MetricReport.mean(reports)
        log.info("%s: %s", method, results[method].to_json())
    return results


def load_models(config: ExperimentConfig, skeleton: SkeletonDefinition) -> dict[str, HPSTM]:
    models = {}
    for method in config.methods:
        if not method.startswith("hpstm"):
            continue
        path = config.checkpoint_cov if method == "hpstm_cov" and config.checkpoint_cov else config.checkpoint
        if path is None:
            raise FileNotFoundError(f"method {method!r} requested but no checkpoint was given")
        if not Path(path).with_suffix(".json").exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        models[method] = HPSTM.load(path, skeleton)
    return models


def run_experiment(config: ExperimentConfig | dict | str | Path, out_dir: str | Path,
                   skeleton: SkeletonDefinition | None = None) -> dict[str, MetricReport]:
    """Generate, corrupt, smooth with each method, evaluate and write the report files."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    elif not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.load(config)
    skeleton = skeleton or default_skeleton()
    models = load_models(config, skeleton)  # fail before any heavy work
    evalset = build_evaluation_set(config, skeleton)
    results = evaluate_methods(evalset, config.methods, skeleton, models=models, stride=config.stride,
                               seed=config.seed, savgol=config.savgol, particle_filter=config.particle_filter)
    out_dir = Path(out_dir)
    emit_report(results, out_dir, seed=config.seed)
    (out_dir / "experiment.json").write_text(json.dumps(asdict(config), indent=1, sort_keys=True))
    return results


# --------------------------------------------------------------------------
# reports


def format_value(v: float) -> str:
    return f"{v:.4f}"


def emit_report(results: dict[str, MetricReport], out_dir: str | Path, seed: int | None = None) -> list[Path]:
    """Write report.csv, report.json and report.md; methods are columns, metrics rows.

    CSV and JSON keep full precision so they round-trip; the Markdown table
    is rounded to four decimals.
    """
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = list(results)
    keys = list(METRIC_LABELS)
    csv_path, json_path, md_path = (out_dir / name for name in REPORT_FILES)

    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", *methods])
        for k in keys:
            writer.writerow([METRIC_LABELS[k], *(repr(float(getattr(results[m], k))) for m in methods)])

    payload = {"seed": seed, "metrics": [METRIC_LABELS[k] for k in keys],
               "methods": {m: results[m].to_dict() for m in methods}}
    json_path.write_text(json.dumps(payload, indent=1) + "\n")

    lines = ["| Metric | " + " | ".join(methods) + " |", "|---|" + "---:|" * len(methods)]
    for k in keys:
        lines.append(f"| {METRIC_LABELS[k]} | " + " | ".join(format_value(getattr(results[m], k)) for m in methods)
                     + " |")
    if seed is not None:
        lines += ["", f"seed: {seed}"]
    md_path.write_text("\n".join(lines) + "\n")
    return [csv_path, json_path, md_path]


def read_report_csv(path: str | Path) -> dict[str, MetricReport]:
    by_label = {v: k for k, v in METRIC_LABELS.items()}
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    methods = rows[0][1:]
    values = {m: {} for m in methods}
    for row in rows[1:]:
        for m, v in zip(methods, row[1:]):
            values[m][by_label[row[0]]] = float(v)
    return {m: MetricReport.from_dict(values[m]) for m in methods}


def read_report_json(path: str | Path) -> dict[str, MetricReport]:
    data = json.loads(Path(path).read_text())
    return {m: MetricReport.from_dict(d) for m, d in data["methods"].items()}
