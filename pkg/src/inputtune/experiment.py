"""Config-driven experiments: single runs, strategy sweeps, seed aggregation and figures.

A config is a YAML document validated against a strict schema (unknown keys
are errors). Each (strategy, seed) run writes into
``<out>/<experiment>/<strategy>/<seed>/``::

    config.yaml      effective config (defaults resolved), replayable as-is
    stream.json      stream descriptor (class ids, seeds, sample checksums)
    session_<j>.pt   checkpoint after session j
    matrix.csv       accuracy matrix
    report.json      metrics for this seed
    log.jsonl        per-step losses

and ``<out>/<experiment>/<strategy>/aggregate.json`` holds mean and population
std over seeds.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import multiprocessing as mp
import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .assembly import KINDS, REGULARIZERS, TuningStrategy, make_strategy
from .backbone import load_torchvision_resnet18, resnet18, tiny_resnet
from .errors import CheckpointMissing, ConfigInvalid, IncompatibleStrategy, MissingMatrix
from .metrics import AccuracyMatrix, aggregate_reports, format_report, metrics_report
from .pretrain import TINY_CHECKPOINT, load_tiny_pretrained
from .streams import DOMAIN_INCREMENTAL, build_class_incremental_stream, load_image_folder
from .synthetic import make_multisource_stream, make_synthetic_domain_stream, make_synthetic_stream
from .trainer import TrainConfig, derive_seed, run_joint, run_sequence
from .transforms import save_transform_image

log = logging.getLogger(__name__)

DEVICE_ENV = "INPUTTUNE_DEVICE"
STRATEGY_KINDS = KINDS + ("it_pad_small", "it_pad_fix", "it_pad_latent")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StreamSpec(_Strict):
    kind: Literal["synthetic", "multisource", "domain", "folder"] = "synthetic"
    num_tasks: int = Field(4, ge=1)
    classes_per_task: int = Field(5, ge=1)
    samples_per_class: int = Field(100, ge=1)
    image_side: int = Field(32, ge=4)
    channels: int = Field(3, ge=1)
    num_sources: int = Field(2, ge=1)  # multisource: tasks are split evenly across sources
    num_classes: int = Field(5, ge=1)  # domain: shared label space
    seed: Optional[int] = None  # None: derived from each run's root seed
    root: Optional[str] = None  # folder
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None

    @property
    def mode(self) -> str:
        return DOMAIN_INCREMENTAL if self.kind == "domain" else "class_incremental"


class BackboneSpec(_Strict):
    variant: Literal["tiny", "resnet18"] = "tiny"
    checkpoint: Optional[str] = "shipped"  # shipped | torchvision | <path> | null (random init)
    bn_policy: Literal["running", "frozen_pretrained"] = "running"


class StrategySpec(_Strict):
    kind: str = "it_pad"
    transform_mode: Literal["shared", "per_task"] = "shared"
    thickness: Optional[int] = None
    regularizer: str = "none"
    regularizer_params: dict = Field(default_factory=dict)

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {v!r}; known: {', '.join(STRATEGY_KINDS)}")
        return v

    @field_validator("regularizer")
    @classmethod
    def _reg(cls, v):
        if v not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {v!r}; known: {', '.join(REGULARIZERS)}")
        return v


class TrainSpec(_Strict):
    epochs_per_session: int = Field(20, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, ge=0)
    backbone_lr: float = Field(1e-4, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    online: bool = False


class ExperimentConfig(_Strict):
    experiment: str = "experiment"
    stream: StreamSpec = Field(default_factory=StreamSpec)
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    strategy: StrategySpec = Field(default_factory=StrategySpec)
    train: TrainSpec = Field(default_factory=TrainSpec)
    seeds: list[int] = Field(default_factory=lambda: [0])
    out: str = "runs"
    joint: bool = False  # also record the joint-learning accuracy per seed

    @field_validator("experiment")
    @classmethod
    def _name(cls, v):
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", v):
            raise ValueError("experiment name may only hold letters, digits, '_', '.', '-'")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


# --- parsing -------------------------------------------------------------------

def _check_semantics(cfg: ExperimentConfig) -> None:
    s = cfg.strategy
    if cfg.stream.mode == DOMAIN_INCREMENTAL and s.regularizer in ("lwf", "lwm"):
        raise ConfigInvalid(
            f"regularizer {s.regularizer!r} is not applicable to domain-incremental streams: "
            "distillation-based strategies are left out of the domain-incremental setting"
        )
    if cfg.stream.kind == "folder" and not cfg.stream.root:
        raise ConfigInvalid("stream.kind 'folder' needs stream.root")
    if cfg.stream.kind == "multisource" and cfg.stream.num_tasks % cfg.stream.num_sources:
        raise ConfigInvalid("stream.num_tasks must be a multiple of stream.num_sources")
    try:
        strategy_from_spec(s)
    except IncompatibleStrategy as e:
        raise ConfigInvalid(str(e)) from None


def parse_config(data: dict | None) -> ExperimentConfig:
    """Validate a raw mapping; raises :class:`ConfigInvalid` on any problem."""
    try:
        cfg = ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
                             for err in e.errors())
        raise ConfigInvalid(f"invalid config: {problems}") from None
    _check_semantics(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"config {path} is not valid YAML: {e}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping at the top level")
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_strategy_list(text: str, base: StrategySpec) -> list[StrategySpec]:
    """``"none,it_pad+parallel,ft2+ewc"`` -> strategy specs (other fields kept from ``base``).

    Each item is a kind followed by optional ``+`` modifiers: a regularizer
    name, or ``parallel`` for per-task transforms.
    """
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigInvalid("empty strategy list")
    out = []
    for item in items:
        kind, *mods = item.split("+")
        fields = {"kind": kind, "transform_mode": "shared", "regularizer": "none",
                  "thickness": base.thickness, "regularizer_params": {}}
        for m in mods:
            if m == "parallel":
                fields["transform_mode"] = "per_task"
            else:
                fields["regularizer"] = m
                if m == base.regularizer:
                    fields["regularizer_params"] = dict(base.regularizer_params)
        try:
            out.append(StrategySpec(**fields))
        except ValidationError as e:
            raise ConfigInvalid(f"strategy {item!r}: {e.errors()[0]['msg']}") from None
    return out


# --- building blocks ---------------------------------------------------------------

def build_backbone_from_spec(spec: BackboneSpec, side: int, channels: int):
    ck = spec.checkpoint
    if spec.variant == "tiny":
        if ck == "shipped":
            if side != 32 or channels != 3:
                raise ConfigInvalid("the shipped tiny checkpoint expects 3 x 32 x 32 inputs")
            return load_tiny_pretrained(spec.bn_policy, TINY_CHECKPOINT)
        net = tiny_resnet(in_channels=channels, input_side=side, bn_policy=spec.bn_policy)
    else:
        if ck == "torchvision":
            return load_torchvision_resnet18(spec.bn_policy)
        net = resnet18(in_channels=channels, input_side=side, bn_policy=spec.bn_policy)
    if ck not in (None, "shipped", "torchvision"):
        path = Path(ck)
        if not path.exists():
            raise CheckpointMissing(f"backbone checkpoint {path} does not exist")
        net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return net


def strategy_from_spec(spec: StrategySpec, backbone=None) -> TuningStrategy:
    return make_strategy(spec.kind, backbone, spec.thickness, transform_mode=spec.transform_mode,
                         regularizer=spec.regularizer, regularizer_params=dict(spec.regularizer_params))


def build_stream(spec: StreamSpec, root_seed: int):
    seed = spec.seed if spec.seed is not None else derive_seed(root_seed, "split") % (2 ** 31)
    shape = (spec.channels, spec.image_side, spec.image_side)
    if spec.kind == "synthetic":
        return make_synthetic_stream(spec.num_tasks, spec.classes_per_task, spec.samples_per_class,
                                     shape, seed)
    if spec.kind == "multisource":
        return make_multisource_stream(spec.num_sources, spec.num_tasks // spec.num_sources,
                                       spec.classes_per_task, spec.samples_per_class, shape, seed)
    if spec.kind == "domain":
        return make_synthetic_domain_stream(spec.num_tasks, spec.num_classes, spec.samples_per_class,
                                            shape, seed)
    train = load_image_folder(spec.root, "train", spec.image_side, spec.mean, spec.std)
    test = load_image_folder(spec.root, "test", spec.image_side, spec.mean, spec.std)
    return build_class_incremental_stream(train, spec.num_tasks, seed, test_dataset=test)


def device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def strategy_dir_name(spec: StrategySpec) -> str:
    parts = [spec.kind]
    if spec.thickness is not None and spec.kind.startswith("it_pad"):
        parts.append(f"p{spec.thickness}")
    if spec.transform_mode == "per_task":
        parts.append("parallel")
    if spec.regularizer != "none":
        parts.append(spec.regularizer)
    return "-".join(parts)


# --- runs ------------------------------------------------------------------------

def run_one(cfg: ExperimentConfig, seed: int, out_dir, deterministic: bool = False) -> dict:
    """Run one seed of one strategy; returns its report (also written to disk)."""
    if deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = build_stream(cfg.stream, seed)
    net = build_backbone_from_spec(cfg.backbone, cfg.stream.image_side, cfg.stream.channels)
    strategy = strategy_from_spec(cfg.strategy, net)
    tc = TrainConfig(seed=seed, device=device(), **cfg.train.model_dump())
    single = cfg.model_copy(update={"seeds": [seed]})
    (out_dir / "config.yaml").write_text(dump_config(single))
    stream.save_descriptor(out_dir / "stream.json")
    res = run_sequence(stream, strategy, tc, net, run_dir=out_dir)
    report = metrics_report(res.matrix)
    report.update(seed=seed, strategy=strategy.name, learnt_parameters=res.assembly.learnt_parameter_count(),
                  derived_seeds={s: derive_seed(seed, s) for s in ("split", "init", "shuffle")})
    if cfg.joint:
        report["joint_accuracy"] = run_joint(stream, strategy, tc, net)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _run_job(args):
    cfg_dict, seed, out_dir, deterministic = args
    torch.set_num_threads(1)
    return run_one(ExperimentConfig.model_validate(cfg_dict), seed, out_dir, deterministic)


def run_experiment(cfg: ExperimentConfig, out: str | None = None, seeds=None, jobs: int = 1,
                   deterministic: bool = False, strategies=None) -> dict:
    """Run every (strategy, seed) pair; returns ``{strategy_dir: aggregate}``."""
    root = Path(out or cfg.out) / cfg.experiment
    seeds = list(seeds) if seeds else list(cfg.seeds)
    specs = strategies or [cfg.strategy]
    jobs_list = []
    for spec in specs:
        sub = cfg.model_copy(update={"strategy": spec})
        _check_semantics(sub)
        for seed in seeds:
            jobs_list.append((spec, (sub.model_dump(mode="json"), seed,
                                     str(root / strategy_dir_name(spec) / str(seed)), deterministic)))
    if jobs > 1:
        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as ex:
            reports = list(ex.map(_run_job, [j for _, j in jobs_list]))
    else:
        reports = [_run_job(j) for _, j in jobs_list]
    results = {}
    for spec in specs:
        name = strategy_dir_name(spec)
        mine = [r for (s, _), r in zip(jobs_list, reports) if s is spec]
        agg = aggregate_reports(mine)
        agg["strategy"] = name
        agg["learnt_parameters"] = mine[0]["learnt_parameters"]
        if cfg.joint:
            joint = [r["joint_accuracy"] for r in mine]
            agg.update(joint_mean=float(np.mean(joint)), joint_std=float(np.std(joint)))
        (root / name / "aggregate.json").write_text(json.dumps(agg, indent=2))
        results[name] = agg
    return results


# --- tables and reports ---------------------------------------------------------------

SWEEP_COLUMNS = ("strategy", "extra_parameters", "head_parameters", "accuracy_mean", "accuracy_std",
                 "forgetting_mean", "forgetting_std", "seeds")


def sweep_rows(results: dict) -> list[dict]:
    rows = []
    for name, agg in results.items():
        lp = agg["learnt_parameters"]
        rows.append({"strategy": name, "extra_parameters": lp["extra"],
                     "head_parameters": lp["head"], "accuracy_mean": agg["accuracy_mean"],
                     "accuracy_std": agg["accuracy_std"], "forgetting_mean": agg["forgetting_mean"],
                     "forgetting_std": agg["forgetting_std"], "seeds": agg["num_seeds"]})
    return rows


def write_sweep_table(rows: list[dict], out_dir) -> tuple[Path, Path]:
    import csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / "sweep.csv", out_dir / "sweep.txt"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    lines = [f"{'strategy':<28}{'extra params':>14}{'accuracy':>18}{'forgetting':>18}"]
    for r in rows:
        lines.append(f"{r['strategy']:<28}{r['extra_parameters']:>14,}"
                     f"{100 * r['accuracy_mean']:>11.2f} ± {100 * r['accuracy_std']:<4.2f}"
                     f"{100 * r['forgetting_mean']:>11.2f} ± {100 * r['forgetting_std']:<4.2f}")
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def find_seed_dirs(path) -> list[Path]:
    """Seed directories under ``path`` (itself, or one/two levels of strategy/seed nesting)."""
    path = Path(path)
    if (path / "matrix.csv").exists() or (path / "config.yaml").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("*/matrix.csv")) + sorted(p.parent for p in path.glob("*/*/matrix.csv"))
    return found


def load_matrix(seed_dir) -> AccuracyMatrix:
    path = Path(seed_dir) / "matrix.csv"
    if not path.exists():
        raise MissingMatrix(f"no matrix.csv in {seed_dir}")
    return AccuracyMatrix.from_csv(path)


def report_from_dirs(paths) -> dict:
    """Recompute per-strategy aggregates from persisted matrices."""
    groups: dict[str, list] = {}
    for p in paths:
        seed_dirs = find_seed_dirs(p)
        if not seed_dirs:
            raise MissingMatrix(f"no completed run under {p}")
        for d in seed_dirs:
            rep = metrics_report(load_matrix(d))
            groups.setdefault(d.parent.name, []).append(rep)
    return {name: aggregate_reports(reps) for name, reps in groups.items()}


def format_aggregates(aggs: dict) -> str:
    lines = [f"{'strategy':<28}{'accuracy':>18}{'forgetting':>18}{'seeds':>7}"]
    for name, a in aggs.items():
        lines.append(f"{name:<28}{100 * a['accuracy_mean']:>11.2f} ± {100 * a['accuracy_std']:<4.2f}"
                     f"{100 * a['forgetting_mean']:>11.2f} ± {100 * a['forgetting_std']:<4.2f}{a['num_seeds']:>7}")
    return "\n".join(lines)


# --- figures ---------------------------------------------------------------------------

def plot_runs(paths, out_dir, fmt: str = "png") -> list[Path]:
    """Average-accuracy trajectories, final per-task accuracies and learned transforms."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict[str, list] = {}
    seed_dirs = []
    for p in paths:
        dirs = find_seed_dirs(p)
        if not dirs:
            raise MissingMatrix(f"no completed run under {p}")
        for d in dirs:
            series.setdefault(d.parent.name, []).append(metrics_report(load_matrix(d)))
            seed_dirs.append(d)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, reps in series.items():
        traj = np.mean([r["accuracy_trajectory"] for r in reps], axis=0)
        ax.plot(range(1, len(traj) + 1), 100 * traj, marker="o", label=name)
    ax.set_xlabel("task")
    ax.set_ylabel("average accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / f"average_accuracy.{fmt}")
    fig.savefig(written[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(series), 1)
    for k, (name, reps) in enumerate(series.items()):
        final = np.mean([r["final_task_accuracies"] for r in reps], axis=0)
        ax.bar(np.arange(1, len(final) + 1) + (k - (len(series) - 1) / 2) * width, 100 * final,
               width=width, label=name)
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy after last task (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / f"task_accuracy.{fmt}")
    fig.savefig(written[-1])
    plt.close(fig)

    for d in seed_dirs:
        written.extend(export_transforms(d, out_dir / f"{d.parent.name}_{d.name}", fmt))
    return written


def export_transforms(seed_dir, out_prefix, fmt: str = "png") -> list[Path]:
    """One image per learned frame/perturbation stored in the run's last checkpoint."""
    from .transforms import InputTransform, TransformConfig

    cks = sorted(Path(seed_dir).glob("session_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    if not cks:
        return []
    state = torch.load(cks[-1], weights_only=False)["assembly"]
    tdict = state["strategy"].get("transform")
    if tdict is None:
        return []
    out = []
    for key in state["transform_keys"]:
        t = InputTransform(TransformConfig(**tdict))
        with torch.no_grad():
            t.theta.copy_(state["groups"]["transform"][f"transforms.{key}.theta"])
        path = Path(f"{out_prefix}_{key}.{fmt}")
        save_transform_image(t, path)
        out.append(path)
    return out


__all__ = [
    "ExperimentConfig", "StreamSpec", "BackboneSpec", "StrategySpec", "TrainSpec", "parse_config",
    "load_config", "dump_config", "parse_strategy_list", "build_stream", "build_backbone_from_spec",
    "strategy_from_spec", "run_one", "run_experiment", "sweep_rows", "write_sweep_table",
    "report_from_dirs", "format_aggregates", "plot_runs", "export_transforms", "format_report",
]
