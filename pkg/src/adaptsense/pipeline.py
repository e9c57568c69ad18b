"""End-to-end experiment orchestration over a run directory.

A run directory contains:
    config.json        resolved configuration snapshot
    manifest.json      input hash, timestamps, artifact list
    metrics.csv        one row per epoch
    losses.csv         one row per distillation step (l1, kd, gt, phi)
    decisions.csv      hard decisions and select-probabilities on the test split
    checkpoints/       stage{N}_epoch{M}.ckpt + stage{N}_final.ckpt blobs/manifests
    report.json        final evaluation report (deterministic given config+seed)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoints import load_into, save_checkpoint
from .distillation import DistillConfig, OracleTeacher
from .efficiency import EnergyCoefficients
from .encoders import StudentConfig, StudentModel
from .errors import ConfigError, ContractError, DataError
from .policy import ActionSpace, ControllerConfig, CostModel, PolicyController
from .synthetic import DatasetConfig, Episode, SignalBank, TemplateClassifier
from .training import (MetricsReport, MetricsWriter, TrainConfig, collate, evaluate,
                       export_decisions_csv, train_stage1, train_stage2, train_stage3)

REPORT_FORMAT = "adaptsense.report.v1"
RUN_FORMAT = "adaptsense.run.v1"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    energy: EnergyCoefficients = field(default_factory=EnergyCoefficients)
    lam: tuple[float, ...] = (1.0, 0.05, 0.03)
    gamma: float = 10.0
    teacher_margin: float = 5.0

    def validate(self) -> None:
        self.dataset.validate()
        self.student.validate()
        self.train.validate()
        self.energy.validate()
        k = self.action_space().K
        if len(self.lam) != k:
            raise ConfigError(f"lam must list {k} per-action costs for task {self.train.task}")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")

    def action_space(self) -> ActionSpace:
        if self.train.task == "modality_select":
            return ActionSpace.modalities()
        if self.train.task == "channel_select":
            return ActionSpace.channels(self.dataset.n_ch)
        return ActionSpace.frames(self.dataset.F)

    def cost_model(self) -> CostModel:
        return CostModel(lam=tuple(self.lam), gamma=self.gamma,
                         total_segments=self.dataset.T)


_SECTIONS = {
    "dataset": DatasetConfig,
    "student": StudentConfig,
    "distill": DistillConfig,
    "controller": ControllerConfig,
    "train": TrainConfig,
    "energy": EnergyCoefficients,
}

_TUPLE_FIELDS = {
    ("dataset", "modality_mix"), ("student", "visual_channels"),
    ("student", "audio_channels"), ("student", "behavior_channels"),
    ("controller", "channels"), ("train", "noise_aug_snr_db"),
    ("energy", "watts_per_sensor"),
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    out["lam"] = list(cfg.lam)
    out["gamma"] = cfg.gamma
    out["teacher_margin"] = cfg.teacher_margin
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        for key in section:
            if (name, key) in _TUPLE_FIELDS and isinstance(section[key], list):
                section[key] = tuple(section[key])
        kwargs[name] = cls(**section)
    if "lam" in raw:
        kwargs["lam"] = tuple(raw["lam"])
    if "gamma" in raw:
        kwargs["gamma"] = float(raw["gamma"])
    if "teacher_margin" in raw:
        kwargs["teacher_margin"] = float(raw["teacher_margin"])
    extra = set(raw) - set(_SECTIONS) - {"lam", "gamma", "teacher_margin"}
    if extra:
        raise ConfigError(f"unknown top-level config keys: {sorted(extra)}")
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def input_hash(cfg: ExperimentConfig, dataset_manifest_text: str | None = None) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(config_to_dict(cfg), sort_keys=True).encode())
    if dataset_manifest_text:
        digest.update(dataset_manifest_text.encode())
    return digest.hexdigest()


def build_models(cfg: ExperimentConfig) -> tuple[StudentModel, PolicyController, OracleTeacher]:
    student = StudentModel(cfg.dataset, cfg.student, seed=cfg.train.seed)
    fallback = int(np.argmin(cfg.lam))
    policy = PolicyController(cfg.dataset, cfg.action_space(), cfg.controller,
                              fallback_action=fallback, seed=cfg.train.seed)
    teacher = OracleTeacher(cfg.student.d_f, cfg.dataset.C, margin=cfg.teacher_margin,
                            seed=cfg.train.seed)
    return student, policy, teacher


def split_episodes(episodes: list[Episode]) -> dict[str, list[Episode]]:
    splits = {"train": [], "val": [], "test": []}
    for ep in episodes:
        splits[ep.split].append(ep)
    for name, eps in splits.items():
        if not eps:
            raise DataError(f"dataset has no {name} episodes")
    return splits


def run_pipeline(cfg: ExperimentConfig, episodes: list[Episode], out_dir: str | Path,
                 stages: tuple[int, ...] = (1, 2, 3), resume: bool = False,
                 dataset_manifest_text: str | None = None) -> dict:
    """Execute the requested stages in order and write the run directory.

    Stage prerequisites are enforced: stage 2 needs a stage-1 student
    checkpoint (trained now or found via --resume), stage 3 needs both.
    """
    cfg.validate()
    stages = tuple(sorted(set(stages)))
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise ConfigError(f"stages must be a non-empty subset of 1,2,3, got {stages}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    started = time.time()

    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
    writer = MetricsWriter(out)
    splits = split_episodes(episodes)
    train_data = collate(splits["train"])
    val_data = collate(splits["val"])
    student, policy, teacher = build_models(cfg)
    cost_proto = (tuple(cfg.lam), cfg.gamma)
    bank = SignalBank(cfg.dataset)
    classifier = TemplateClassifier(bank)

    history: dict[str, list] = {"stage1": [], "stage2": [], "stage3": []}
    stage2_eval = None

    def require(stage: int, path: Path, module) -> None:
        if path.exists():
            load_into(module, path)
        else:
            raise ContractError(
                f"stage {stage} needs checkpoint {path.name}; run the earlier stage first "
                f"or pass --resume with an existing run directory")

    if 1 in stages:
        history["stage1"] = train_stage1(train_data, val_data, teacher, student,
                                         cfg.train, cfg.distill, writer)
        save_checkpoint(ckpt_dir / "stage1_final.ckpt", student, {"stage": 1})
    elif resume:
        require(2 if 2 in stages else 3, ckpt_dir / "stage1_final.ckpt", student)
    elif stages:
        raise ContractError("stages 2/3 need the stage-1 checkpoint; "
                            "include stage 1 or pass --resume")

    alternations = cfg.train.alternations if {2, 3} <= set(stages) else 1
    for cycle in range(alternations):
        offset = cycle * (cfg.train.epochs_stage2 + cfg.train.epochs_stage3)
        if 2 in stages:
            history["stage2"] += train_stage2(train_data, val_data, student, policy,
                                              cost_proto, cfg.train, writer,
                                              policy_epoch_offset=offset)
            save_checkpoint(ckpt_dir / "stage2_final.ckpt", policy, {"stage": 2})
            if cycle == 0:
                stage2_eval = evaluate(splits["test"], student, policy, cfg.cost_model(),
                                       cfg.train, mode="learned", teacher=teacher,
                                       coeffs=cfg.energy).to_dict()
        elif 3 in stages and cycle == 0:
            if resume:
                require(3, ckpt_dir / "stage2_final.ckpt", policy)
            else:
                raise ContractError("stage 3 needs the stage-2 checkpoint; "
                                    "include stage 2 or pass --resume")
        if 3 in stages:
            history["stage3"] += train_stage3(
                train_data, val_data, teacher, student, policy, cost_proto,
                cfg.train, cfg.distill, writer,
                policy_epoch_offset=offset + cfg.train.epochs_stage2)
            save_checkpoint(ckpt_dir / "stage3_final.ckpt", student, {"stage": 3})
            save_checkpoint(ckpt_dir / "stage3_policy_final.ckpt", policy, {"stage": 3})

    evals = {}
    reports: list[MetricsReport] = []
    eval_modes = ["learned", "all_on", "random", "heuristic", "oracle"]
    if cfg.train.task != "modality_select":
        eval_modes.remove("heuristic")
        eval_modes.remove("oracle")
    for mode in eval_modes:
        rep = evaluate(splits["test"], student, policy, cfg.cost_model(), cfg.train,
                       mode=mode, teacher=teacher, classifier=classifier, coeffs=cfg.energy)
        evals[mode] = rep.to_dict()
        if mode == "learned":
            reports.append(rep)
    export_decisions_csv(out / "decisions.csv", reports)

    report = {
        "format": REPORT_FORMAT,
        "task": cfg.train.task,
        "seed": cfg.train.seed,
        "stages_run": list(stages),
        "input_hash": input_hash(cfg, dataset_manifest_text),
        "evals": evals,
        "stage2_eval": stage2_eval,
        "history": history,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))

    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()
                       if p.name != "manifest.json")
    manifest = {
        "format": RUN_FORMAT,
        "input_hash": report["input_hash"],
        "started_unix": started,
        "finished_unix": time.time(),
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return report


def load_run_models(cfg: ExperimentConfig, run_dir: str | Path):
    """Rebuild student/policy/teacher from the newest checkpoints in a run."""
    run = Path(run_dir)
    student, policy, teacher = build_models(cfg)
    ckpt = run / "checkpoints"
    student_path = ckpt / "stage3_final.ckpt"
    if not student_path.exists():
        student_path = ckpt / "stage1_final.ckpt"
    policy_path = ckpt / "stage3_policy_final.ckpt"
    if not policy_path.exists():
        policy_path = ckpt / "stage2_final.ckpt"
    if student_path.exists():
        load_into(student, student_path)
    else:
        raise DataError(f"no student checkpoint under {ckpt}")
    if policy_path.exists():
        load_into(policy, policy_path)
    else:
        policy = None
    return student, policy, teacher
