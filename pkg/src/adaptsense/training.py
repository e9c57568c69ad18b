"""Three-stage training schedule, evaluation, and gradient checking.

Stage 1 trains the student alone with the distillation objective and every
modality forced on. Stage 2 trains the selection policy against the frozen
student with the cost-regularised objective through the straight-through
relaxation. Stage 3 fine-tunes both jointly: the policy term uses
straight-through gates while the distillation term sees the same hard
decisions detached, so with eta1 = 0 the policy receives no update.

Stages 2 and 3 optionally corrupt a random fraction of training segments'
audio at varying SNR. The student learns to decode noisy audio and the
policy learns to widen its selection when its audio cue is unreliable, which
is what produces the noise-adaptive usage shift at evaluation time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoints import save_checkpoint
from .distillation import DistillConfig, OracleTeacher, loss_cfd, loss_gt, loss_kd, loss_l1
from .efficiency import (EnergyCoefficients, activation_bytes, count_macs, estimate_energy,
                         sensor_schedule)
from .encoders import DTYPE, StudentModel
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .policy import ActionSpace, CostModel, DecisionTensor, PolicyController
from .synthetic import (AUDIO, BEHAVIOR, MODALITIES, VISUAL, Episode, TemplateClassifier,
                        corrupt_audio, oracle_policy)

POLICY_MODES = ("learned", "oracle", "all_on", "random", "heuristic")


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 20
    epochs_stage3: int = 30
    batch_episodes: int = 8
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9  # used by the sgd option
    tau_gumbel_init: float = 5.0
    tau_gumbel_decay: float = 0.965
    tau_gumbel_floor: float = 0.5
    tau_kd: float = 1.0
    eta1: float = 0.95
    eta2: float = 1.2
    seed: int = 0
    task: str = "modality_select"
    patience: int = 5
    noise_aug_fraction: float = 0.25
    noise_aug_snr_db: tuple[float, ...] = (5.0, 0.0, -5.0, -10.0)
    alternations: int = 1

    def validate(self) -> None:
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_stage3) < 0:
            raise ConfigError("stage budgets must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.tau_gumbel_decay <= 1.0:
            raise ConfigError("tau decay factor must lie in (0, 1]")
        if self.tau_gumbel_init <= 0 or self.tau_gumbel_floor <= 0:
            raise ConfigError("tau schedule values must be positive")
        if self.task not in ("modality_select", "channel_select", "frame_select"):
            raise ConfigError(f"unknown task kind {self.task!r}")
        if not 0.0 <= self.noise_aug_fraction <= 1.0:
            raise ConfigError("noise_aug_fraction must lie in [0, 1]")
        if self.alternations < 1:
            raise ConfigError("alternations must be at least 1")

    def tau_at(self, policy_epoch: int) -> float:
        return max(self.tau_gumbel_floor,
                   self.tau_gumbel_init * self.tau_gumbel_decay ** policy_epoch)

    def make_optimizer(self, params) -> torch.optim.Optimizer:
        if self.optimizer == "sgd":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum)
        return torch.optim.Adam(params, lr=self.lr)


def collate(episodes: list[Episode]) -> dict:
    """Stack a list of episodes into dense (N, T, ...) tensors."""
    if not episodes:
        raise DataError("cannot collate an empty episode list")
    frames = np.stack([[np.transpose(s.frames, (0, 3, 1, 2)) for s in ep.segments]
                       for ep in episodes])
    audio = np.stack([[s.audio for s in ep.segments] for ep in episodes])
    behavior = np.stack([[s.behavior for s in ep.segments] for ep in episodes])
    labels = np.stack([[s.spec.label for s in ep.segments] for ep in episodes])
    sufficient = np.stack([[s.spec.sufficient_modality for s in ep.segments]
                           for ep in episodes])
    return {
        "frames": torch.as_tensor(frames, dtype=DTYPE),
        "audio": torch.as_tensor(audio, dtype=DTYPE),
        "behavior": torch.as_tensor(behavior, dtype=DTYPE),
        "labels": torch.as_tensor(labels, dtype=torch.long),
        "sufficient": sufficient,
        "indices": np.array([ep.index for ep in episodes]),
    }


def _slice_batch(data: dict, idx: np.ndarray) -> dict:
    out = {}
    for key, val in data.items():
        out[key] = val[idx] if torch.is_tensor(val) else val[idx]
    return out


def _flatten_segments(batch: dict) -> dict:
    """(B, T, ...) episode tensors -> (B*T, ...) segment tensors."""
    out = {}
    for key in ("frames", "audio", "behavior"):
        t = batch[key]
        out[key] = t.reshape(t.shape[0] * t.shape[1], *t.shape[2:])
    out["labels"] = batch["labels"].reshape(-1)
    return out


def _augment_audio(audio: torch.Tensor, rng: np.random.Generator, fraction: float,
                   snr_choices: tuple[float, ...]) -> torch.Tensor:
    """Corrupt a random subset of segments' audio at randomly drawn SNRs.

    `audio` is (B, T, n_ch, L); the rng draw order is fixed so runs are
    reproducible. Noise power is exact per segment, as in corrupt_audio.
    """
    if fraction <= 0 or not snr_choices:
        return audio
    b, t = audio.shape[:2]
    mask = rng.random((b, t)) < fraction
    if not mask.any():
        return audio
    out = audio.clone()
    arr = out.numpy()
    for i, j in zip(*np.nonzero(mask)):
        snr = snr_choices[int(rng.integers(len(snr_choices)))]
        seg = arr[i, j]
        power = float(np.mean(seg ** 2))
        noise = rng.standard_normal(seg.shape)
        noise *= math.sqrt(power * 10.0 ** (-snr / 10.0)) / math.sqrt(np.mean(noise ** 2))
        arr[i, j] = seg + noise
    return out


class MetricsWriter:
    """Appends per-epoch metrics and per-step loss traces as CSV rows."""

    def __init__(self, run_dir: str | Path | None):
        self.run_dir = Path(run_dir) if run_dir else None
        self._step = 0
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._init_csv("metrics.csv", ["stage", "epoch", "train_loss", "val_loss",
                                           "val_accuracy", "tau_gumbel"])
            self._init_csv("losses.csv", ["step", "l1", "kd", "gt", "phi"])

    def _init_csv(self, name: str, header: list[str]) -> None:
        path = self.run_dir / name
        if not path.exists():
            with path.open("w", newline="") as fh:
                csv.writer(fh).writerow(header)

    def epoch(self, stage: int, epoch: int, train_loss: float, val_loss: float,
              val_accuracy: float, tau: float) -> None:
        if self.run_dir:
            with (self.run_dir / "metrics.csv").open("a", newline="") as fh:
                csv.writer(fh).writerow([stage, epoch, repr(train_loss), repr(val_loss),
                                         repr(val_accuracy), repr(tau)])

    def losses(self, l1: float, kd: float, gt: float, phi: float) -> None:
        if self.run_dir:
            with (self.run_dir / "losses.csv").open("a", newline="") as fh:
                csv.writer(fh).writerow([self._step, repr(l1), repr(kd), repr(gt), repr(phi)])
        self._step += 1

    def checkpoint(self, module, stage: int, epoch: int | str) -> None:
        if self.run_dir:
            tag = f"{epoch:03d}" if isinstance(epoch, int) else epoch
            save_checkpoint(self.run_dir / "checkpoints" / f"stage{stage}_epoch{tag}.ckpt",
                            module, meta={"stage": stage, "epoch": str(epoch)})


def _check_finite(loss: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"{stage}: loss became non-finite; the last per-epoch checkpoint is still on disk")


def _cfd_terms(teacher: OracleTeacher, labels: torch.Tensor, z: torch.Tensor,
               logits: torch.Tensor, distill_cfg: DistillConfig):
    t_out = teacher(labels)
    l1 = loss_l1(t_out.feature, z)
    kd = loss_kd(t_out.logits, logits, distill_cfg.tau_kd)
    gt = loss_gt(labels, logits)
    phi = loss_cfd(kd, gt, l1, distill_cfg)
    return l1, kd, gt, phi


def train_stage1(train_data: dict, val_data: dict, teacher: OracleTeacher,
                 student: StudentModel, cfg: TrainConfig, distill_cfg: DistillConfig,
                 writer: MetricsWriter | None = None) -> list[dict]:
    """Distillation only: every decision forced on, policy untouched."""
    cfg.validate()
    torch.set_num_threads(1)
    writer = writer or MetricsWriter(None)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    opt = cfg.make_optimizer(student.parameters())
    flat_train = _flatten_segments(train_data)
    n_seg = flat_train["labels"].shape[0]
    batch = cfg.batch_episodes * train_data["labels"].shape[1]
    history, best, stale = [], math.inf, 0
    for epoch in range(cfg.epochs_stage1):
        order = rng.permutation(n_seg)
        epoch_loss = 0.0
        audio_aug = _augment_audio(train_data["audio"], rng, cfg.noise_aug_fraction,
                                   cfg.noise_aug_snr_db)
        flat_audio = audio_aug.reshape(-1, *audio_aug.shape[2:])
        for start in range(0, n_seg, batch):
            idx = order[start:start + batch]
            seg = {"frames": flat_train["frames"][idx], "audio": flat_audio[idx],
                   "behavior": flat_train["behavior"][idx]}
            labels = flat_train["labels"][idx]
            gates = torch.ones(len(idx), len(MODALITIES), dtype=DTYPE)
            z, logits = student.forward_soft(seg, gates)
            try:
                l1, kd, gt, phi = _cfd_terms(teacher, labels, z, logits, distill_cfg)
            except DataError as exc:
                raise DivergenceError(
                    f"stage 1: {exc}; the last per-epoch checkpoint is still on disk")
            _check_finite(phi, "stage 1")
            opt.zero_grad()
            phi.backward()
            opt.step()
            writer.losses(float(l1.detach()), float(kd.detach()), float(gt.detach()), float(phi.detach()))
            epoch_loss += float(phi.detach()) * len(idx)
        val_loss, val_acc = _validate_student(val_data, teacher, student, distill_cfg)
        history.append({"stage": 1, "epoch": epoch, "train_loss": epoch_loss / n_seg,
                        "val_loss": val_loss, "val_accuracy": val_acc})
        writer.epoch(1, epoch, epoch_loss / n_seg, val_loss, val_acc, float("nan"))
        writer.checkpoint(student, 1, epoch)
        best, stale = (val_loss, 0) if val_loss < best - 1e-12 else (best, stale + 1)
        if stale > cfg.patience:
            break
    return history


def _validate_student(val_data: dict, teacher: OracleTeacher, student: StudentModel,
                      distill_cfg: DistillConfig) -> tuple[float, float]:
    flat = _flatten_segments(val_data)
    with torch.no_grad():
        gates = torch.ones(flat["labels"].shape[0], len(MODALITIES), dtype=DTYPE)
        z, logits = student.forward_soft(flat, gates)
        _, _, _, phi = _cfd_terms(teacher, flat["labels"], z, logits, distill_cfg)
        acc = float((logits.argmax(dim=-1) == flat["labels"]).double().mean())
    return float(phi), acc


def _policy_objective(student: StudentModel, batch: dict, gates: torch.Tensor,
                      cost_model: CostModel, action_kind: str):
    """Mean per-segment cross-entropy plus the conditional usage/gamma term."""
    b, t, k = gates.shape
    seg = _flatten_segments(batch)
    _, logits = student.forward_soft(
        {key: seg[key] for key in ("frames", "audio", "behavior")},
        gates.reshape(b * t, k), action_kind)
    logits = logits.reshape(b, t, -1)
    labels = batch["labels"]
    ce = torch.nn.functional.cross_entropy(
        logits.reshape(b * t, -1), labels.reshape(-1), reduction="none").reshape(b, t)
    correct = (logits.argmax(dim=-1) == labels).detach()
    lam = torch.as_tensor(cost_model.lam, dtype=DTYPE)
    frac = gates.sum(dim=1) / t  # (B, K), straight-through differentiable
    ep_cost = (lam * frac ** 2).sum(dim=1, keepdim=True).expand(b, t)
    extra = torch.where(correct, ep_cost, torch.tensor(cost_model.gamma, dtype=DTYPE))
    loss = (ce + extra).mean()
    return loss, float(ce.detach().mean()), float(correct.double().mean())


def train_stage2(train_data: dict, val_data: dict, student: StudentModel,
                 policy: PolicyController, cost_model_proto: tuple, cfg: TrainConfig,
                 writer: MetricsWriter | None = None, policy_epoch_offset: int = 0) -> list[dict]:
    """Cost-regularised policy training against the frozen student."""
    cfg.validate()
    torch.set_num_threads(1)
    writer = writer or MetricsWriter(None)
    lam, gamma = cost_model_proto
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, policy_epoch_offset)))
    opt = cfg.make_optimizer(policy.parameters())
    n_ep, t = train_data["labels"].shape
    cost_model = CostModel(lam=tuple(lam), gamma=gamma, total_segments=t)
    for p in student.parameters():
        p.requires_grad_(False)
    history, best, stale = [], math.inf, 0
    try:
        for epoch in range(cfg.epochs_stage2):
            tau = cfg.tau_at(policy_epoch_offset + epoch)
            order = rng.permutation(n_ep)
            audio_aug = _augment_audio(train_data["audio"], rng, cfg.noise_aug_fraction,
                                       cfg.noise_aug_snr_db)
            epoch_loss = 0.0
            for start in range(0, n_ep, cfg.batch_episodes):
                idx = order[start:start + cfg.batch_episodes]
                batch = _slice_batch(train_data, idx)
                batch["audio"] = audio_aug[idx]
                rollout = policy.run_episode_batch(batch, tau, rng, mode="train")
                loss, _, _ = _policy_objective(student, batch, rollout.gates,
                                               cost_model, cfg.task)
                _check_finite(loss, "stage 2")
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach()) * len(idx)
            val_loss, val_acc, _ = _validate_policy(val_data, student, policy, cost_model,
                                                    cfg, tau)
            history.append({"stage": 2, "epoch": epoch, "train_loss": epoch_loss / n_ep,
                            "val_loss": val_loss, "val_accuracy": val_acc, "tau": tau})
            writer.epoch(2, epoch, epoch_loss / n_ep, val_loss, val_acc, tau)
            writer.checkpoint(policy, 2, epoch)
            best, stale = (val_loss, 0) if val_loss < best - 1e-12 else (best, stale + 1)
            if stale > cfg.patience:
                break
    finally:
        for p in student.parameters():
            p.requires_grad_(True)
    return history


def _validate_policy(val_data: dict, student: StudentModel, policy: PolicyController,
                     cost_model: CostModel, cfg: TrainConfig, tau: float):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xEA7)))
    with torch.no_grad():
        rollout = policy.run_episode_batch(val_data, tau, rng, mode="infer")
        gates = torch.as_tensor(rollout.hard, dtype=DTYPE)
        loss, ce, acc = _policy_objective(student, val_data, gates, cost_model, cfg.task)
    return float(loss), acc, rollout


def train_stage3(train_data: dict, val_data: dict, teacher: OracleTeacher,
                 student: StudentModel, policy: PolicyController, cost_model_proto: tuple,
                 cfg: TrainConfig, distill_cfg: DistillConfig,
                 writer: MetricsWriter | None = None,
                 policy_epoch_offset: int | None = None) -> list[dict]:
    """Joint fine-tuning: eta1 * policy objective + eta2 * distillation objective.

    One shared encoder pass feeds two fusions: straight-through gates for the
    policy term, the same hard decisions detached for the distillation term.
    """
    cfg.validate()
    torch.set_num_threads(1)
    writer = writer or MetricsWriter(None)
    lam, gamma = cost_model_proto
    offset = cfg.epochs_stage2 if policy_epoch_offset is None else policy_epoch_offset
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3, offset)))
    opt = cfg.make_optimizer(list(student.parameters()) + list(policy.parameters()))
    n_ep, t = train_data["labels"].shape
    cost_model = CostModel(lam=tuple(lam), gamma=gamma, total_segments=t)
    history, best, stale = [], math.inf, 0
    for epoch in range(cfg.epochs_stage3):
        tau = cfg.tau_at(offset + epoch)
        order = rng.permutation(n_ep)
        audio_aug = _augment_audio(train_data["audio"], rng, cfg.noise_aug_fraction,
                                   cfg.noise_aug_snr_db)
        epoch_loss = 0.0
        for start in range(0, n_ep, cfg.batch_episodes):
            idx = order[start:start + cfg.batch_episodes]
            batch = _slice_batch(train_data, idx)
            batch["audio"] = audio_aug[idx]
            b = len(idx)
            rollout = policy.run_episode_batch(batch, tau, rng, mode="train")
            gates = rollout.gates  # (B, T, K)
            seg = _flatten_segments(batch)
            seg_inputs = {key: seg[key] for key in ("frames", "audio", "behavior")}

            pi_loss, _, _ = _policy_objective(student, batch, gates, cost_model, cfg.task)
            z_phi, logits_phi = student.forward_soft(
                seg_inputs, gates.detach().reshape(b * t, -1), cfg.task)
            try:
                l1, kd, gt, phi = _cfd_terms(teacher, seg["labels"], z_phi, logits_phi,
                                             distill_cfg)
            except DataError as exc:
                raise DivergenceError(
                    f"stage 3: {exc}; the last per-epoch checkpoint is still on disk")
            loss = cfg.eta1 * pi_loss + cfg.eta2 * phi
            _check_finite(loss, "stage 3")
            opt.zero_grad()
            loss.backward()
            opt.step()
            writer.losses(float(l1.detach()), float(kd.detach()), float(gt.detach()), float(phi.detach()))
            epoch_loss += float(loss.detach()) * b
        val_loss, val_acc, _ = _validate_policy(val_data, student, policy, cost_model,
                                                cfg, tau)
        history.append({"stage": 3, "epoch": epoch, "train_loss": epoch_loss / n_ep,
                        "val_loss": val_loss, "val_accuracy": val_acc, "tau": tau})
        writer.epoch(3, epoch, epoch_loss / n_ep, val_loss, val_acc, tau)
        writer.checkpoint(student, 3, epoch)
        writer.checkpoint(policy, 3, f"{epoch:03d}_policy")
        best, stale = (val_loss, 0) if val_loss < best - 1e-12 else (best, stale + 1)
        if stale > cfg.patience:
            break
    return history


# Evaluation -----------------------------------------------------------------


@dataclass
class MetricsReport:
    policy_mode: str
    task: str
    accuracy: float
    usage_fractions: list[float]
    mean_macs_per_segment: float
    mean_bytes_per_segment: float
    mean_energy_per_segment_j: float
    all_on_macs_per_segment: int
    policy_overhead_macs: int
    segments: int
    seed: int
    snr_db: float | None = None
    losses: dict | None = None
    mae: float | None = None
    traces: list = field(default_factory=list, repr=False)
    soft_traces: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "policy_mode": self.policy_mode,
            "task": self.task,
            "accuracy": self.accuracy,
            "usage_fractions": self.usage_fractions,
            "mean_macs_per_segment": self.mean_macs_per_segment,
            "mean_bytes_per_segment": self.mean_bytes_per_segment,
            "mean_energy_per_segment_j": self.mean_energy_per_segment_j,
            "all_on_macs_per_segment": self.all_on_macs_per_segment,
            "policy_overhead_macs": self.policy_overhead_macs,
            "segments": self.segments,
            "seed": self.seed,
            "snr_db": self.snr_db,
            "losses": self.losses,
            "mae": self.mae,
        }


def _mode_decisions(mode: str, episodes: list[Episode], batch: dict, k: int,
                    policy: PolicyController | None, cost_model: CostModel,
                    tau: float, seed: int):
    n, t = batch["labels"].shape
    soft = None
    if mode == "learned":
        if policy is None:
            raise ContractError("learned-policy evaluation needs a trained policy")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11F)))
        with torch.no_grad():
            rollout = policy.run_episode_batch(batch, tau, rng, mode="infer")
        for i in range(n):  # the emitted tensors must honour the fallback contract
            DecisionTensor(hard=rollout.hard[i], soft=rollout.soft[i],
                           gumbel_seed=seed).validate()
        return rollout.hard, rollout.soft
    if mode == "all_on":
        return np.ones((n, t, k), dtype=np.uint8), soft
    if mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4A2)))
        hard = (rng.random((n, t, k)) < 0.5).astype(np.uint8)
        empty = hard.sum(axis=2) == 0
        hard[empty, cost_model.cheapest_action] = 1
        return hard, soft
    if mode == "heuristic":
        hard = np.zeros((n, t, k), dtype=np.uint8)
        hard[:, :, AUDIO] = 1
        hard[:, :, BEHAVIOR] = 1
        hard[:, ::4, VISUAL] = 1
        return hard, soft
    if mode == "oracle":
        if k != len(MODALITIES):
            raise ConfigError("the oracle policy is defined over modality selection only")
        hard = np.stack([oracle_policy(ep) for ep in episodes])
        return hard.astype(np.uint8), soft
    raise ConfigError(f"unknown policy mode {mode!r}; choose from {POLICY_MODES}")


def evaluate(episodes: list[Episode], student: StudentModel,
             policy: PolicyController | None, cost_model: CostModel, cfg: TrainConfig,
             mode: str = "learned", snr_db: float | None = None,
             teacher: OracleTeacher | None = None,
             classifier: TemplateClassifier | None = None,
             coeffs: EnergyCoefficients | None = None,
             eval_seed: int | None = None) -> MetricsReport:
    """Hard-decision inference over a split.

    The oracle mode is the planted reference pipeline: oracle decisions paired
    with the nearest-template classifier, exact on clean data by construction.
    All other modes run the trained student. Reported MACs include the
    controller's always-on overhead only in learned mode; the all-on baseline
    is the bare student graph.
    """
    torch.set_num_threads(1)
    cfg.validate()
    coeffs = coeffs or EnergyCoefficients()
    seed = cfg.seed if eval_seed is None else eval_seed
    if snr_db is not None:
        episodes = [corrupt_audio(ep, snr_db, seed) for ep in episodes]
    batch = collate(episodes)
    n, t = batch["labels"].shape
    action_space = {
        "modality_select": ActionSpace.modalities(),
        "channel_select": ActionSpace.channels(batch["audio"].shape[2]),
        "frame_select": ActionSpace.frames(batch["frames"].shape[2]),
    }[cfg.task]
    k = action_space.K
    tau = cfg.tau_at(cfg.epochs_stage2 + cfg.epochs_stage3)
    hard, soft = _mode_decisions(mode, episodes, batch, k, policy, cost_model, tau, seed)

    if mode == "oracle":
        if classifier is None:
            raise ContractError("oracle evaluation needs the planted template classifier")
        preds = np.array([
            classifier.predict(segment, selected=np.nonzero(hard[i, j])[0])
            for i, ep in enumerate(episodes) for j, segment in enumerate(ep.segments)
        ]).reshape(n, t)
        correct = preds == batch["labels"].numpy()
        losses = None
        mae = None
    else:
        flat_hard = torch.as_tensor(hard.reshape(n * t, k))
        seg = _flatten_segments(batch)
        with torch.no_grad():
            z, logits = student.forward_gated(
                {key: seg[key] for key in ("frames", "audio", "behavior")},
                flat_hard, cfg.task)
        if student.cfg.head == "classify":
            preds = logits.argmax(dim=-1).numpy().reshape(n, t)
            correct = preds == batch["labels"].numpy()
            mae = None
        else:
            target = batch["behavior"].mean(dim=2).reshape(n * t, -1)
            mae = float((logits - target).abs().mean())
            correct = np.zeros((n, t), dtype=bool)
        losses = None
        if teacher is not None and student.cfg.head == "classify":
            l1, kd, gt, phi = _cfd_terms(teacher, seg["labels"], z, logits,
                                         DistillConfig(tau_kd=cfg.tau_kd))
            losses = {"l1": float(l1), "kd": float(kd), "gt": float(gt), "phi": float(phi)}

    graph = student.layer_graph(cfg.task)
    overhead = 0
    if mode == "learned" and policy is not None:
        overhead = count_macs(policy.layer_graph())
    total_macs = 0
    total_bytes = 0
    total_energy = 0.0
    for i in range(n):
        ep_macs = overhead * t
        ep_bytes = 0
        for j in range(t):
            ep_macs += count_macs(graph, hard[i, j])
            ep_bytes += activation_bytes(graph, hard[i, j])
        seconds = sensor_schedule(_modality_activity(hard[i], cfg.task))
        total_energy += estimate_energy(ep_macs, ep_bytes, seconds, coeffs)
        total_macs += ep_macs
        total_bytes += ep_bytes

    return MetricsReport(
        policy_mode=mode,
        task=cfg.task,
        accuracy=float(correct.mean()),
        usage_fractions=(hard.sum(axis=(0, 1)) / (n * t)).tolist(),
        mean_macs_per_segment=total_macs / (n * t),
        mean_bytes_per_segment=total_bytes / (n * t),
        mean_energy_per_segment_j=total_energy / (n * t),
        all_on_macs_per_segment=count_macs(graph, None),
        policy_overhead_macs=overhead,
        segments=n * t,
        seed=seed,
        snr_db=snr_db,
        losses=losses,
        mae=mae,
        traces=[hard[i] for i in range(n)],
        soft_traces=[] if soft is None else [soft[i] for i in range(n)],
    )


def _modality_activity(decisions: np.ndarray, task: str) -> np.ndarray:
    """Map a (T, K) decision matrix onto per-modality sensor activity."""
    t = decisions.shape[0]
    if task == "modality_select":
        return decisions
    activity = np.ones((t, len(MODALITIES)), dtype=np.uint8)
    if task == "channel_select":
        activity[:, AUDIO] = (decisions.sum(axis=1) > 0).astype(np.uint8)
    return activity


def export_decisions_csv(path: str | Path, reports: list[MetricsReport]) -> Path:
    """Write per-segment decision traces as (episode, t, action, hard, p_select)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "t", "action", "hard", "p_select"])
        for report in reports:
            for ep_idx, trace in enumerate(report.traces):
                soft = report.soft_traces[ep_idx] if report.soft_traces else None
                for t_idx in range(trace.shape[0]):
                    for a_idx in range(trace.shape[1]):
                        p_sel = "" if soft is None else repr(float(soft[t_idx, a_idx, 0]))
                        writer.writerow([ep_idx, t_idx, a_idx, int(trace[t_idx, a_idx]), p_sel])
    return path


# Gradient checking ----------------------------------------------------------


def gradcheck(loss_closure, parameters, epsilon: float = 1e-5, max_coords: int = 512,
              seed: int = 0) -> float:
    """Max normalised difference between analytic and central-difference grads.

    Subsamples at most `max_coords` coordinates across all parameters (fixed
    seed), perturbs each by +/- epsilon, and returns
    max_c |g_analytic - g_fd| / max_c max(|g_analytic|, |g_fd|).
    """
    params = [p for p in parameters]
    if not params:
        raise ContractError("gradcheck needs at least one parameter tensor")
    loss = loss_closure()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFD)))
    coords = (np.arange(total) if total <= max_coords
              else np.sort(rng.choice(total, size=max_coords, replace=False)))

    flat_params = []
    for p, size in zip(params, sizes):
        flat_params.append(p.detach().reshape(-1))
    analytic = torch.cat([g.reshape(-1) for g in grads]).numpy()

    def locate(coord: int):
        for pi, size in enumerate(sizes):
            if coord < size:
                return pi, coord
            coord -= size
        raise IndexError(coord)

    diffs = np.zeros(len(coords))
    fd = np.zeros(len(coords))
    with torch.no_grad():
        for out_idx, coord in enumerate(coords):
            pi, offset = locate(int(coord))
            view = flat_params[pi]
            orig = view[offset].item()
            view[offset] = orig + epsilon
            up = float(loss_closure())
            view[offset] = orig - epsilon
            down = float(loss_closure())
            view[offset] = orig
            fd[out_idx] = (up - down) / (2.0 * epsilon)
            diffs[out_idx] = abs(analytic[coord] - fd[out_idx])
    scale = max(float(np.max(np.abs(analytic[coords]))), float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(diffs) / scale)
