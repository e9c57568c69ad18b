"""Task-aware selection policy.

A recurrent controller reads cheap per-modality features of the current
segment, updates an LSTM state, and emits one two-way decision per action
(keep / skip) through per-action linear heads. Discrete decisions are drawn
with the Gumbel-Max trick; training relaxes them with the temperature
softmax and backpropagates through a straight-through estimator (hard values
forward, soft gradients backward).

Head outputs are treated directly as log-scores, i.e. the quantity that
Gumbel noise is added to. Index 0 of every two-way head means "select", and
ties break toward selecting.

The module also contains the audio-preview saliency network used for frame
selection: a multi-head attention stack and a recurrent-convolution stack
run in parallel, coupled by learnable additive handshake scalars, and a
final recurrent layer scores each fixed-length audio window in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .efficiency import LayerGraph, LayerSpec
from .encoders import DTYPE, audio_spectrogram, init_parameters
from .errors import ConfigError, ContractError, DataError, ShapeError
from .synthetic import AUDIO, BEHAVIOR, MODALITIES, VISUAL, DatasetConfig

ACTION_KINDS = ("modality_select", "channel_select", "frame_select")


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ConfigError(f"unknown action space kind {self.kind!r}")
        if len(self.labels) < 1:
            raise ConfigError("an action space needs at least one action")

    @property
    def K(self) -> int:
        return len(self.labels)

    @staticmethod
    def modalities() -> "ActionSpace":
        return ActionSpace("modality_select", MODALITIES)

    @staticmethod
    def channels(n_ch: int) -> "ActionSpace":
        return ActionSpace("channel_select", tuple(f"channel{i}" for i in range(n_ch)))

    @staticmethod
    def frames(n_frames: int) -> "ActionSpace":
        return ActionSpace("frame_select", tuple(f"frame{i}" for i in range(n_frames)))


@dataclass(frozen=True)
class CostModel:
    """Per-action usage costs, the error penalty, and the segment count."""

    lam: tuple[float, ...]
    gamma: float
    total_segments: int

    def __post_init__(self):
        if any(l < 0 for l in self.lam):
            raise ConfigError("per-action costs must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.total_segments < 1:
            raise ConfigError("total_segments must be positive")

    @property
    def cheapest_action(self) -> int:
        return int(np.argmin(self.lam))


@dataclass
class PolicyState:
    h: torch.Tensor
    o: torch.Tensor


@dataclass
class DecisionTensor:
    """Hard binary decisions for one episode plus their relaxed distributions."""

    hard: np.ndarray  # (T, K) uint8
    soft: np.ndarray  # (T, K, 2) float64, rows sum to 1
    gumbel_seed: int = 0

    def validate(self) -> None:
        if self.hard.ndim != 2 or self.soft.shape != (*self.hard.shape, 2):
            raise ShapeError(
                f"decision tensor shapes disagree: hard {self.hard.shape}, soft {self.soft.shape}")
        if not np.all((self.hard == 0) | (self.hard == 1)):
            raise ContractError("hard decisions must be binary")
        if np.any(np.abs(self.soft.sum(axis=-1) - 1.0) > 1e-9):
            raise ContractError("relaxed decision rows must sum to 1")
        if np.any(self.hard.sum(axis=1) == 0):
            raise ContractError("a hard decision row selects no action; fallback rule violated")


# Gumbel sampling -----------------------------------------------------------


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. standard Gumbel draws G = -log(-log U), U ~ Unif(0, 1)."""
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, np.finfo(np.float64).tiny, None)))


def gumbel_max_sample(log_scores, noise) -> np.ndarray:
    """One-hot at argmax(log_scores + noise); ties break toward index 0."""
    scores = np.asarray(log_scores, dtype=np.float64) + np.asarray(noise, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ContractError("gumbel_max_sample needs finite scores and noise")
    idx = np.argmax(scores, axis=-1)
    out = np.zeros_like(scores)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def gumbel_softmax_relax(log_scores, noise, tau_gumbel: float):
    """Temperature-relaxed categorical sample (differentiable in log_scores)."""
    if tau_gumbel <= 0:
        raise ConfigError(f"tau_gumbel must be positive, got {tau_gumbel}")
    if torch.is_tensor(log_scores) or torch.is_tensor(noise):
        scores = torch.as_tensor(log_scores, dtype=DTYPE)
        g = torch.as_tensor(noise, dtype=DTYPE)
        return torch.softmax((scores + g) / tau_gumbel, dim=-1)
    scores = (np.asarray(log_scores, dtype=np.float64) + np.asarray(noise, dtype=np.float64))
    scores = scores / tau_gumbel
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


# Cost-regularised objective ------------------------------------------------


def usage_cost(decisions, cost_model: CostModel):
    """sum_k lambda_k * (selected_k / total)^2 over an episode's decisions.

    Accepts a DecisionTensor, a (T, K) array, or a differentiable (T, K)
    tensor of straight-through gates.
    """
    if isinstance(decisions, DecisionTensor):
        decisions = decisions.hard
    if torch.is_tensor(decisions):
        t = decisions.shape[0]
        if t != cost_model.total_segments:
            raise ContractError(
                f"decision tensor covers {t} segments, cost model expects {cost_model.total_segments}")
        lam = torch.as_tensor(cost_model.lam, dtype=decisions.dtype)
        frac = decisions.sum(dim=0) / cost_model.total_segments
        return (lam * frac ** 2).sum()
    d = np.asarray(decisions, dtype=np.float64)
    if d.shape[0] != cost_model.total_segments:
        raise ContractError(
            f"decision tensor covers {d.shape[0]} segments, cost model expects {cost_model.total_segments}")
    counts = d.sum(axis=0)
    # plain left-to-right float arithmetic, matching the stated formula exactly
    return sum(l * (c / cost_model.total_segments) ** 2
               for l, c in zip(cost_model.lam, counts.tolist()))


def policy_loss(pred_logits, label: int, decisions, cost_model: CostModel, correct: bool):
    """Prediction cross-entropy plus the usage cost when the prediction is
    correct, or the flat error penalty gamma when it is not."""
    logits = torch.as_tensor(pred_logits, dtype=DTYPE)
    ce = torch.nn.functional.cross_entropy(logits[None], torch.tensor([int(label)]))
    if correct:
        extra = usage_cost(decisions, cost_model)
        extra = extra if torch.is_tensor(extra) else torch.tensor(extra, dtype=DTYPE)
    else:
        extra = torch.tensor(float(cost_model.gamma), dtype=DTYPE)
    return ce + extra


# Recurrent controller ------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    d_hidden: int = 64
    d_feat: int = 16  # per-modality cheap feature width
    channels: tuple[int, int] = (4, 8)
    kernel: int = 3
    pool: int = 2
    select_bias: float = 3.0  # head bias toward "select" at init


class _CheapEncoder(nn.Module):
    """Two tiny conv stages on a downsampled view of one modality."""

    def __init__(self, modality: int, data_cfg: DatasetConfig, cfg: ControllerConfig):
        super().__init__()
        self.modality = modality
        self.data_cfg = data_cfg
        c1, c2 = cfg.channels
        k, pad, pool = cfg.kernel, cfg.kernel // 2, cfg.pool
        if modality == VISUAL:
            self.pre = nn.AvgPool2d(pool)
            self.conv1 = nn.Conv2d(data_cfg.ch, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv2d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool2d(pool)
            h = data_cfg.H // pool // pool // pool
            w = data_cfg.W // pool // pool // pool
            flat = c2 * h * w
        elif modality == AUDIO:
            self.pre = nn.AvgPool2d(pool)
            n_bins = 32 // 2 + 1
            n_win = (data_cfg.L - 32) // 16 + 1
            self.conv1 = nn.Conv2d(data_cfg.n_ch, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv2d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool2d(pool)
            h = n_bins // pool // pool // pool
            w = n_win // pool // pool // pool
            flat = c2 * max(h, 1) * max(w, 1)
        else:
            self.pre = None
            self.conv1 = nn.Conv1d(data_cfg.d_b, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv1d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool1d(pool)
            flat = c2 * (data_cfg.L_b // pool // pool)
        self.flat_dim = flat
        self.proj = nn.Linear(flat, cfg.d_feat, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.modality == VISUAL:
            x = self.pre(x.mean(dim=1))  # average frames, then downsample
        elif self.modality == AUDIO:
            x = self.pre(audio_spectrogram(x, normalized=True))
        else:
            x = x.transpose(1, 2)
        x = torch.relu(self.pool(self.conv1(x)))
        x = torch.relu(self.pool(self.conv2(x)))
        return self.proj(x.flatten(1))


@dataclass
class PolicyRollout:
    """Per-episode-batch policy outputs over all T steps."""

    hard: np.ndarray  # (B, T, K) uint8
    soft: np.ndarray  # (B, T, K, 2)
    gates: torch.Tensor | None  # (B, T, K) straight-through gates, train mode only


class PolicyController(nn.Module):
    """LSTM decision controller with per-action two-way heads."""

    def __init__(self, data_cfg: DatasetConfig, action_space: ActionSpace,
                 cfg: ControllerConfig | None = None, fallback_action: int = 0,
                 seed: int = 0):
        super().__init__()
        cfg = cfg or ControllerConfig()
        self.data_cfg = data_cfg
        self.cfg = cfg
        self.action_space = action_space
        self.fallback_action = int(fallback_action)
        if not 0 <= self.fallback_action < action_space.K:
            raise ConfigError("fallback action outside the action space")
        self.encoders = nn.ModuleList(
            [_CheapEncoder(m, data_cfg, cfg) for m in range(len(MODALITIES))])
        self.d_in = cfg.d_feat * len(MODALITIES)
        self.lstm = nn.LSTMCell(self.d_in, cfg.d_hidden, dtype=DTYPE)
        self.heads = nn.ModuleList(
            [nn.Linear(cfg.d_hidden, 2, dtype=DTYPE) for _ in range(action_space.K)])
        init_parameters(self, np.random.default_rng(np.random.SeedSequence((seed, 0x901))))
        with torch.no_grad():
            for head in self.heads:
                head.bias.copy_(torch.tensor([cfg.select_bias, 0.0], dtype=DTYPE))

    def init_state(self, batch_size: int) -> PolicyState:
        z = torch.zeros(batch_size, self.cfg.d_hidden, dtype=DTYPE)
        return PolicyState(h=z.clone(), o=z.clone())

    def joint_feature(self, frames: torch.Tensor, audio: torch.Tensor,
                      behavior: torch.Tensor) -> torch.Tensor:
        return torch.cat([
            self.encoders[VISUAL](frames),
            self.encoders[AUDIO](audio),
            self.encoders[BEHAVIOR](behavior),
        ], dim=1)

    def head_scores(self, h: torch.Tensor) -> torch.Tensor:
        return torch.stack([head(h) for head in self.heads], dim=1)  # (B, K, 2)

    def policy_step(self, f_t: torch.Tensor, state: PolicyState, tau_gumbel: float,
                    rng: np.random.Generator | None = None, mode: str = "train",
                    noise: np.ndarray | None = None):
        """One controller update.

        Returns (new_state, hard (B, K) uint8 array, soft (B, K, 2) array,
        gates). In train mode `gates` are straight-through: hard values with
        the relaxed sample's gradient. In infer mode they are detached hard
        values, and in soft mode the differentiable relaxed probabilities
        themselves (used by gradient checks). At least one action per row is
        always on: all-skip rows have the fallback action forced to select.
        """
        if mode not in ("train", "infer", "soft"):
            raise ConfigError(f"unknown policy mode {mode!r}")
        if f_t.shape[-1] != self.d_in:
            raise ShapeError(f"joint feature has width {f_t.shape[-1]}, expected {self.d_in}")
        h, o = self.lstm(f_t, (state.h, state.o))
        scores = self.head_scores(h)  # (B, K, 2) log-scores
        b, k = scores.shape[0], scores.shape[1]
        if noise is None:
            if rng is None:
                raise ContractError("policy_step needs a seeded rng when no noise is supplied")
            noise = gumbel_noise((b, k, 2), rng)
        noise_t = torch.as_tensor(noise, dtype=DTYPE)
        soft = gumbel_softmax_relax(scores, noise_t, tau_gumbel)  # (B, K, 2)
        hard = gumbel_max_sample(scores.detach().numpy(), noise)  # one-hot (B, K, 2)
        hard_sel = torch.as_tensor(hard[..., 0], dtype=DTYPE)

        # fallback: never emit an all-skip row
        empty = hard_sel.sum(dim=1) == 0
        if torch.any(empty):
            hard_sel[empty, self.fallback_action] = 1.0

        soft_sel = soft[..., 0]
        if mode == "train":
            gates = soft_sel + (hard_sel - soft_sel).detach()
        elif mode == "soft":
            gates = soft_sel
        else:
            gates = hard_sel.detach()
        new_state = PolicyState(h=h, o=o)
        return (new_state, hard_sel.detach().numpy().astype(np.uint8),
                soft.detach().numpy(), gates)

    def run_episode_batch(self, batch: dict, tau_gumbel: float,
                          rng: np.random.Generator, mode: str = "train") -> PolicyRollout:
        """Roll the controller over all T segments of a batch of episodes."""
        b, t = batch["frames"].shape[:2]
        state = self.init_state(b)
        hards, softs, gates = [], [], []
        for step in range(t):
            f_t = self.joint_feature(batch["frames"][:, step], batch["audio"][:, step],
                                     batch["behavior"][:, step])
            state, hard, soft, gate = self.policy_step(f_t, state, tau_gumbel, rng, mode)
            hards.append(hard)
            softs.append(soft)
            gates.append(gate)
        return PolicyRollout(
            hard=np.stack(hards, axis=1),
            soft=np.stack(softs, axis=1),
            gates=torch.stack(gates, dim=1) if mode in ("train", "soft") else None,
        )

    def layer_graph(self) -> LayerGraph:
        """Always-on controller cost: cheap encoders + LSTM step + heads."""
        cfg, d = self.cfg, self.data_cfg
        k = cfg.kernel
        c1, c2 = cfg.channels
        layers: list[LayerSpec] = []

        def trunk2d(prefix, in_ch, h0, w0):
            h, w = h0 // cfg.pool, w0 // cfg.pool  # cheap downsample first
            layers.append(LayerSpec(f"{prefix}.down", "pool", in_ch * h * w, None, prefix))
            layers.append(LayerSpec(f"{prefix}.conv1", "conv2d", c1 * h * w, None, prefix, {
                "in_ch": in_ch, "out_ch": c1, "kh": k, "kw": k, "out_h": h, "out_w": w}))
            h, w = h // cfg.pool, w // cfg.pool
            layers.append(LayerSpec(f"{prefix}.pool1", "pool", c1 * h * w, None, prefix))
            layers.append(LayerSpec(f"{prefix}.relu1", "rectify", c1 * h * w, None, prefix))
            layers.append(LayerSpec(f"{prefix}.conv2", "conv2d", c2 * h * w, None, prefix, {
                "in_ch": c1, "out_ch": c2, "kh": k, "kw": k, "out_h": h, "out_w": w}))
            h, w = h // cfg.pool, w // cfg.pool
            layers.append(LayerSpec(f"{prefix}.pool2", "pool", c2 * h * w, None, prefix))
            layers.append(LayerSpec(f"{prefix}.relu2", "rectify", c2 * h * w, None, prefix))

        trunk2d("policy.visual", d.ch, d.H, d.W)
        layers.append(LayerSpec("policy.visual.proj", "linear", cfg.d_feat, None, "pv", {
            "in_dim": self.encoders[VISUAL].flat_dim, "out_dim": cfg.d_feat}))
        trunk2d("policy.audio", d.n_ch, 32 // 2 + 1, (d.L - 32) // 16 + 1)
        layers.append(LayerSpec("policy.audio.proj", "linear", cfg.d_feat, None, "pa", {
            "in_dim": self.encoders[AUDIO].flat_dim, "out_dim": cfg.d_feat}))
        length = d.L_b
        layers.append(LayerSpec("policy.behavior.conv1", "conv1d", c1 * length, None, "pb", {
            "in_ch": d.d_b, "out_ch": c1, "k": k, "out_len": length}))
        length //= cfg.pool
        layers.append(LayerSpec("policy.behavior.pool1", "pool", c1 * length, None, "pb"))
        layers.append(LayerSpec("policy.behavior.relu1", "rectify", c1 * length, None, "pb"))
        layers.append(LayerSpec("policy.behavior.conv2", "conv1d", c2 * length, None, "pb", {
            "in_ch": c1, "out_ch": c2, "k": k, "out_len": length}))
        length //= cfg.pool
        layers.append(LayerSpec("policy.behavior.pool2", "pool", c2 * length, None, "pb"))
        layers.append(LayerSpec("policy.behavior.relu2", "rectify", c2 * length, None, "pb"))
        layers.append(LayerSpec("policy.behavior.proj", "linear", cfg.d_feat, None, "pbp", {
            "in_dim": self.encoders[BEHAVIOR].flat_dim, "out_dim": cfg.d_feat}))
        layers.append(LayerSpec("policy.lstm", "recurrent_cell", cfg.d_hidden, None, "ctl", {
            "in_dim": self.d_in, "hidden": cfg.d_hidden, "steps": 1}))
        for i in range(self.action_space.K):
            layers.append(LayerSpec(f"policy.head{i}", "linear", 2, None, f"head{i}", {
                "in_dim": cfg.d_hidden, "out_dim": 2}))
        graph = LayerGraph(layers=layers, n_actions=None)
        graph.validate()
        return graph


# Audio-previewed frame selection -------------------------------------------


@dataclass(frozen=True)
class PreviewConfig:
    window: int = 64  # samples per saliency window (one window per frame slot)
    sub_window: int = 16  # samples per recurrent sub-step inside a window
    d_model: int = 32
    attn_layers: int = 3
    n_heads: int = 8
    rcnn_filters: int = 64
    rcnn_kernel: int = 3
    bilstm_hidden: int = 128
    final_hidden: int = 256
    delta: float = 0.5
    n_max: int = 3

    def validate(self) -> None:
        if self.window < 1 or self.sub_window < 1 or self.window % self.sub_window:
            raise ConfigError("window must be a positive multiple of sub_window")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.n_max < 1:
            raise ConfigError("n_max must be at least 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by the head count")


class _SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.in_proj = nn.Linear(d_model, 3 * d_model, dtype=DTYPE)
        self.out_proj = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, n, d)
        b, n, d = x.shape
        qkv = self.in_proj(x).reshape(b, n, 3, self.n_heads, self.d_head)
        q, k, v = qkv.unbind(dim=2)  # each (B, n, heads, d_head)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class _RcnnLayer(nn.Module):
    """conv + norm + rectify over each window's (sub-step, feature) map, then a
    bidirectional recurrent pass over the window's sub-steps."""

    def __init__(self, cfg: PreviewConfig):
        super().__init__()
        pad = cfg.rcnn_kernel // 2
        self.conv = nn.Conv2d(1, cfg.rcnn_filters, cfg.rcnn_kernel, stride=1, padding=pad,
                              dtype=DTYPE)
        self.norm = nn.BatchNorm2d(cfg.rcnn_filters, track_running_stats=False, dtype=DTYPE)
        self.fold = nn.Conv2d(cfg.rcnn_filters, 1, 1, dtype=DTYPE)
        self.bilstm = nn.LSTM(cfg.d_model, cfg.bilstm_hidden, bidirectional=True,
                              batch_first=True, dtype=DTYPE)
        self.out = nn.Linear(2 * cfg.bilstm_hidden, cfg.d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B*W, n_sub, d)
        maps = x[:, None]  # (B*W, 1, n_sub, d)
        maps = self.fold(torch.relu(self.norm(self.conv(maps))))[:, 0]
        seq, _ = self.bilstm(maps)
        return self.out(seq)


class AudioPreviewNet(nn.Module):
    """Per-window audio saliency in [0, 1].

    Cross-window context flows only through the attention stack, which is
    equivariant over windows, so identical windows always receive identical
    saliency; all recurrence runs inside a window.
    """

    def __init__(self, n_ch: int, cfg: PreviewConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or PreviewConfig()
        cfg.validate()
        self.cfg = cfg
        self.n_ch = n_ch
        self.n_sub = cfg.window // cfg.sub_window
        n_bins = cfg.sub_window // 2 + 1
        self.sub_embed = nn.Linear(n_ch * n_bins, cfg.d_model, dtype=DTYPE)
        self.win_embed = nn.Linear(self.n_sub * cfg.d_model, cfg.d_model, dtype=DTYPE)
        self.attn = nn.ModuleList(
            [_SelfAttention(cfg.d_model, cfg.n_heads) for _ in range(cfg.attn_layers)])
        self.rcnn = nn.ModuleList([_RcnnLayer(cfg) for _ in range(cfg.attn_layers)])
        self.rho = nn.Parameter(torch.full((cfg.attn_layers,), 0.1, dtype=DTYPE))
        self.final = nn.LSTM(cfg.d_model, cfg.final_hidden, batch_first=True, dtype=DTYPE)
        self.score = nn.Linear(cfg.final_hidden, 1, dtype=DTYPE)
        init_parameters(self, np.random.default_rng(np.random.SeedSequence((seed, 0xA11))))
        with torch.no_grad():
            self.rho.fill_(0.1)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        """(B, n_ch, L) waveform -> (B, n_windows) saliency scores."""
        cfg = self.cfg
        if audio.ndim != 3 or audio.shape[1] != self.n_ch:
            raise ShapeError(f"expected (batch, {self.n_ch}, samples), got {tuple(audio.shape)}")
        if audio.shape[-1] < cfg.window:
            raise DataError(
                f"audio length {audio.shape[-1]} is shorter than one window ({cfg.window})")
        b = audio.shape[0]
        n_win = audio.shape[-1] // cfg.window
        trimmed = audio[..., :n_win * cfg.window]
        subs = trimmed.reshape(b, self.n_ch, n_win, self.n_sub, cfg.sub_window)
        spec = torch.fft.rfft(subs, dim=-1).abs()  # (B, ch, W, n_sub, bins)
        spec = spec.permute(0, 2, 3, 1, 4).reshape(b, n_win, self.n_sub, -1)
        sub_tokens = self.sub_embed(spec)  # (B, W, n_sub, d)
        win_tokens = self.win_embed(sub_tokens.reshape(b, n_win, -1))  # (B, W, d)

        mh = win_tokens
        r = sub_tokens
        for layer_idx in range(cfg.attn_layers):
            handshake = r + self.rho[layer_idx] * mh[:, :, None, :]
            r = self.rcnn[layer_idx](handshake.reshape(b * n_win, self.n_sub, -1))
            r = r.reshape(b, n_win, self.n_sub, -1)
            mh = self.attn[layer_idx](mh)
        seq, _ = self.final(r.reshape(b * n_win, self.n_sub, -1))
        return torch.sigmoid(self.score(seq[:, -1])).reshape(b, n_win)

    def layer_graph(self, n_windows: int) -> LayerGraph:
        cfg = self.cfg
        apps = n_windows * self.n_sub
        n_bins = cfg.sub_window // 2 + 1
        d = cfg.d_model
        layers = [
            LayerSpec("preview.sub_embed", "linear", apps * d, None, "pe", {
                "in_dim": self.n_ch * n_bins, "out_dim": d, "applications": apps}),
            LayerSpec("preview.win_embed", "linear", n_windows * d, None, "we", {
                "in_dim": self.n_sub * d, "out_dim": d, "applications": n_windows}),
        ]
        for i in range(cfg.attn_layers):
            layers.append(LayerSpec(f"preview.attn{i}", "attention", n_windows * d, None,
                                    f"at{i}", {"seq_len": n_windows, "d_model": d,
                                               "heads": cfg.n_heads}))
            layers.append(LayerSpec(f"preview.rcnn{i}.conv", "conv2d",
                                    apps * d * cfg.rcnn_filters, None, f"rc{i}", {
                                        "in_ch": 1, "out_ch": cfg.rcnn_filters,
                                        "kh": cfg.rcnn_kernel, "kw": cfg.rcnn_kernel,
                                        "out_h": apps, "out_w": d, "norm_affine": True}))
            layers.append(LayerSpec(f"preview.rcnn{i}.relu", "rectify",
                                    apps * d * cfg.rcnn_filters, None, f"rc{i}"))
            layers.append(LayerSpec(f"preview.rcnn{i}.fold", "conv2d", apps * d, None,
                                    f"rcf{i}", {"in_ch": cfg.rcnn_filters, "out_ch": 1,
                                                "kh": 1, "kw": 1, "out_h": apps, "out_w": d}))
            layers.append(LayerSpec(f"preview.rcnn{i}.bilstm", "recurrent_cell",
                                    apps * 2 * cfg.bilstm_hidden, None, f"rcb{i}", {
                                        "in_dim": d, "hidden": cfg.bilstm_hidden,
                                        "steps": apps, "bidirectional": True}))
            layers.append(LayerSpec(f"preview.rcnn{i}.out", "linear", apps * d, None,
                                    f"rco{i}", {"in_dim": 2 * cfg.bilstm_hidden, "out_dim": d,
                                                "applications": apps}))
        layers.append(LayerSpec("preview.final", "recurrent_cell",
                                apps * cfg.final_hidden, None, "fin", {
                                    "in_dim": d, "hidden": cfg.final_hidden, "steps": apps}))
        layers.append(LayerSpec("preview.score", "linear", n_windows, None, "sc", {
            "in_dim": cfg.final_hidden, "out_dim": 1, "applications": n_windows}))
        graph = LayerGraph(layers=layers, n_actions=None)
        graph.validate()
        return graph


def audio_preview_saliency(audio, net: AudioPreviewNet) -> torch.Tensor:
    """Saliency scores for one audio sequence, one per window of net.cfg.window."""
    x = torch.as_tensor(np.asarray(audio), dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"expected (n_ch, samples) audio, got {tuple(x.shape)}")
    return net(x[None])[0]


def select_salient_frames(saliency, delta: float, w: int = 1, n_max: int = 3) -> list[int]:
    """Frame indices of event regions in a per-window saliency sequence.

    Windows strictly above `delta` form event regions; contiguous
    above-threshold windows merge into one region. Each region contributes
    exactly one frame, the earliest argmax window within it, and at most
    `n_max` regions survive, ranked by peak saliency (earliest first on
    ties). `w` maps window indices to frame indices when one window spans
    several frame slots. The result is in temporal order.
    """
    if n_max < 1:
        raise ConfigError("n_max must be at least 1")
    if w < 1:
        raise ConfigError("w must be at least 1")
    sal = np.asarray(saliency, dtype=np.float64).reshape(-1)
    above = sal > delta
    regions = []
    start = None
    for i, flag in enumerate(above.tolist() + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            seg = sal[start:i]
            peak = start + int(np.argmax(seg))
            regions.append((-sal[peak], peak))
            start = None
    regions.sort()
    chosen = sorted(peak for _, peak in regions[:n_max])
    return [peak * w + (w // 2 if w > 1 else 0) for peak in chosen]


def assemble_partial_clip(selected, history=()) -> tuple[int, ...]:
    """Append newly selected frame indices to a partial clip, keeping order."""
    if isinstance(selected, (int, np.integer)):
        selected = (int(selected),)
    clip = tuple(int(i) for i in history) + tuple(int(i) for i in selected)
    for a, b in zip(clip, clip[1:]):
        if b <= a:
            raise ContractError(f"frame indices must be strictly increasing, got {a} then {b}")
    return clip
