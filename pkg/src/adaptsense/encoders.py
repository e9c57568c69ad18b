"""Lightweight multimodal student: per-modality encoders, late fusion, head.

Each encoder is two convolution stages (2-D for visual and audio, 1-D for the
behavior signal), each followed by max pooling and rectification, then a
linear projection to a shared feature width. Fusion is a weighted sum of the
per-modality features with learnable scalar weights, one linear mixing map,
and a linear prediction head.

Masking contract: a masked-out modality contributes an exact zero to the
fused sum, so its encoder never needs to run and its data cannot influence
the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .efficiency import LayerGraph, LayerSpec
from .errors import ConfigError, EmptySelectionError, ShapeError
from .synthetic import (AUDIO, BEHAVIOR, MODALITIES, SPECTRO_HOP, SPECTRO_WINDOW, VISUAL,
                        DatasetConfig)

DTYPE = torch.float64


@dataclass
class Feature:
    """A fixed-width feature vector tagged with the modality that produced it."""

    values: torch.Tensor
    source_modality: str


@dataclass(frozen=True)
class StudentConfig:
    d_f: int = 64
    visual_channels: tuple[int, int] = (8, 16)
    audio_channels: tuple[int, int] = (4, 8)
    behavior_channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    pool: int = 2
    window: int = SPECTRO_WINDOW
    hop: int = SPECTRO_HOP
    head: str = "classify"  # or "regress"

    def validate(self) -> None:
        if self.d_f < 1:
            raise ConfigError("d_f must be positive")
        if self.head not in ("classify", "regress"):
            raise ConfigError(f"unknown head kind {self.head!r}")


def audio_spectrogram(audio: torch.Tensor, window: int = SPECTRO_WINDOW,
                      hop: int = SPECTRO_HOP, normalized: bool = False) -> torch.Tensor:
    """(..., n_ch, L) waveform -> (..., n_ch, bins, n_windows) rfft magnitudes.

    With `normalized`, magnitudes are scaled by 2/window so a unit-amplitude
    bin-centred tone reads as 1.0, keeping activations comparable across
    modalities.
    """
    if audio.shape[-1] < window:
        raise ShapeError(f"audio length {audio.shape[-1]} shorter than window {window}")
    frames = audio.unfold(-1, window, hop)  # (..., n_ch, n_win, window)
    spec = torch.fft.rfft(frames, dim=-1).abs().transpose(-1, -2)
    return spec * (2.0 / window) if normalized else spec


def init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init driven by a numpy generator (registration order).

    Weight matrices draw uniform(+-1/sqrt(fan_in)); one-dimensional scale
    parameters (norm gains, fusion weights) start at 1; biases start at 0.
    """
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                p.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=tuple(p.shape)),
                                        dtype=p.dtype))
            elif name.endswith("fusion_weights") or name.endswith(".weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def _pooled(size: int, pool: int) -> int:
    return size // pool


class ModalityEncoder(nn.Module):
    """conv -> pool -> relu, twice, then a linear projection to d_f."""

    def __init__(self, modality: int, data_cfg: DatasetConfig, cfg: StudentConfig):
        super().__init__()
        self.modality = modality
        self.data_cfg = data_cfg
        self.cfg = cfg
        k, pad = cfg.kernel, cfg.kernel // 2
        if modality == VISUAL:
            c1, c2 = cfg.visual_channels
            self.conv1 = nn.Conv2d(data_cfg.ch, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv2d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool2d(cfg.pool)
            h = _pooled(_pooled(data_cfg.H, cfg.pool), cfg.pool)
            w = _pooled(_pooled(data_cfg.W, cfg.pool), cfg.pool)
            flat = c2 * h * w
        elif modality == AUDIO:
            c1, c2 = cfg.audio_channels
            self.n_bins = cfg.window // 2 + 1
            self.n_windows = (data_cfg.L - cfg.window) // cfg.hop + 1
            self.conv1 = nn.Conv2d(data_cfg.n_ch, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv2d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool2d(cfg.pool)
            h = _pooled(_pooled(self.n_bins, cfg.pool), cfg.pool)
            w = _pooled(_pooled(self.n_windows, cfg.pool), cfg.pool)
            flat = c2 * h * w
        elif modality == BEHAVIOR:
            c1, c2 = cfg.behavior_channels
            self.conv1 = nn.Conv1d(data_cfg.d_b, c1, k, padding=pad, dtype=DTYPE)
            self.conv2 = nn.Conv1d(c1, c2, k, padding=pad, dtype=DTYPE)
            self.pool = nn.MaxPool1d(cfg.pool)
            flat = c2 * _pooled(_pooled(data_cfg.L_b, cfg.pool), cfg.pool)
        else:
            raise ConfigError(f"unknown modality index {modality}")
        self.flat_dim = flat
        self.proj = nn.Linear(flat, cfg.d_f, dtype=DTYPE)

    def expected_shape(self) -> tuple[int, ...]:
        d = self.data_cfg
        if self.modality == VISUAL:
            return (d.F, d.ch, d.H, d.W)
        if self.modality == AUDIO:
            return (d.n_ch, d.L)
        return (d.L_b, d.d_b)

    def _trunk(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.pool(self.conv1(x)))
        x = torch.relu(self.pool(self.conv2(x)))
        return x.flatten(1)

    def forward(self, x: torch.Tensor, frame_mask: torch.Tensor | None = None,
                channel_mask: torch.Tensor | None = None) -> torch.Tensor:
        expected = self.expected_shape()
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"{MODALITIES[self.modality]} input: expected (batch, {', '.join(map(str, expected))}),"
                f" got {tuple(x.shape)}")
        if self.modality == VISUAL:
            b, f = x.shape[0], x.shape[1]
            per_frame = self._trunk(x.reshape(b * f, *x.shape[2:])).reshape(b, f, -1)
            if frame_mask is None:
                feat = per_frame.mean(dim=1)
            else:
                m = frame_mask.to(per_frame.dtype)
                denom = m.sum(dim=1, keepdim=True)
                if torch.any(denom == 0):
                    raise EmptySelectionError("frame mask selects no frames for some segment")
                feat = (per_frame * m[..., None]).sum(dim=1) / denom
            return self.proj(feat)
        if self.modality == AUDIO:
            if channel_mask is not None:
                x = x * channel_mask.to(x.dtype)[..., None]
            spec = audio_spectrogram(x, self.cfg.window, self.cfg.hop, normalized=True)
            return self.proj(self._trunk(spec))
        return self.proj(self._trunk(x.transpose(1, 2)))


class StudentModel(nn.Module):
    """Modality encoders + learnable-weight late fusion + prediction head."""

    def __init__(self, data_cfg: DatasetConfig, cfg: StudentConfig | None = None,
                 seed: int = 0):
        super().__init__()
        cfg = cfg or StudentConfig()
        cfg.validate()
        data_cfg.validate()
        self.data_cfg = data_cfg
        self.cfg = cfg
        self.encoders = nn.ModuleList(
            [ModalityEncoder(m, data_cfg, cfg) for m in range(len(MODALITIES))])
        self.fusion_weights = nn.Parameter(torch.ones(len(MODALITIES), dtype=DTYPE))
        self.mix = nn.Linear(cfg.d_f, cfg.d_f, dtype=DTYPE)
        out_dim = data_cfg.C if cfg.head == "classify" else data_cfg.d_b
        self.head = nn.Linear(cfg.d_f, out_dim, dtype=DTYPE)
        init_parameters(self, np.random.default_rng(np.random.SeedSequence((seed, 0x57D))))
        with torch.no_grad():
            self.mix.weight.copy_(torch.eye(cfg.d_f, dtype=DTYPE))
            self.mix.bias.zero_()
        self.call_counts = {name: 0 for name in MODALITIES}

    # single-segment convenience API -------------------------------------

    def encode(self, modality_input, modality) -> Feature:
        """Encode one segment's data for one modality.

        Accepts the storage layout of generated segments: visual (F, H, W, ch),
        audio (n_ch, L), behavior (L_b, d_b).
        """
        m = MODALITIES.index(modality) if isinstance(modality, str) else int(modality)
        x = torch.as_tensor(np.asarray(modality_input), dtype=DTYPE)
        if m == VISUAL:
            if x.ndim != 4:
                raise ShapeError(f"visual segment must be (F, H, W, ch), got {tuple(x.shape)}")
            x = x.permute(0, 3, 1, 2)
        values = self.encoders[m](x[None])[0]
        self.call_counts[MODALITIES[m]] += 1
        return Feature(values=values, source_modality=MODALITIES[m])

    def fuse(self, features: list[Feature], mask=None) -> Feature:
        """Weighted masked sum of features followed by the mixing map."""
        stack = torch.stack([f.values for f in features])[None]  # (1, K, d_f)
        if mask is None:
            mask_t = torch.ones(1, len(features), dtype=DTYPE)
        else:
            mask_t = torch.as_tensor(np.asarray(mask), dtype=DTYPE).reshape(1, -1)
        return Feature(values=self.fuse_batch(stack, mask_t)[0], source_modality="fused")

    def classify(self, z: Feature | torch.Tensor) -> torch.Tensor:
        values = z.values if isinstance(z, Feature) else z
        return self.head(values)

    # batched paths -------------------------------------------------------

    def fuse_batch(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, K, d_f) features and (B, K) mask -> (B, d_f) fused feature."""
        if features.shape[1] != len(MODALITIES) or mask.shape != features.shape[:2]:
            raise ShapeError(
                f"fusion expects (B, {len(MODALITIES)}, d_f) features with a matching mask, "
                f"got {tuple(features.shape)} and {tuple(mask.shape)}")
        hard = mask.detach()
        if torch.any(hard.sum(dim=1) == 0):
            raise EmptySelectionError("every segment must keep at least one modality")
        weighted = features * (mask * self.fusion_weights[None, :])[..., None]
        return self.mix(weighted.sum(dim=1))

    def encode_selected(self, modality: int, x: torch.Tensor, rows: torch.Tensor,
                        **enc_kwargs) -> torch.Tensor:
        """Run one encoder only on the selected rows; others get exact zeros."""
        b = x.shape[0]
        out = torch.zeros(b, self.cfg.d_f, dtype=DTYPE)
        if torch.any(rows):
            idx = torch.nonzero(rows, as_tuple=True)[0]
            kwargs = {k: (v[idx] if torch.is_tensor(v) else v) for k, v in enc_kwargs.items()}
            out[idx] = self.encoders[modality](x[idx], **kwargs)
            self.call_counts[MODALITIES[modality]] += 1
        return out

    def forward_gated(self, batch: dict, decisions: torch.Tensor,
                      action_kind: str = "modality_select") -> tuple[torch.Tensor, torch.Tensor]:
        """Hard-decision inference path: deselected encoders never run.

        `decisions` is a (B, K) 0/1 matrix whose meaning depends on
        `action_kind`: modality bits, audio-channel bits, or frame bits.
        """
        d = decisions.to(DTYPE)
        b = d.shape[0]
        if action_kind == "modality_select":
            feats = torch.stack([
                self.encode_selected(VISUAL, batch["frames"], d[:, VISUAL] > 0),
                self.encode_selected(AUDIO, batch["audio"], d[:, AUDIO] > 0),
                self.encode_selected(BEHAVIOR, batch["behavior"], d[:, BEHAVIOR] > 0),
            ], dim=1)
            mask = d
        elif action_kind == "channel_select":
            feats = self._all_features(batch, channel_mask=d)
            mask = torch.ones(b, len(MODALITIES), dtype=DTYPE)
        elif action_kind == "frame_select":
            feats = self._all_features(batch, frame_mask=d)
            mask = torch.ones(b, len(MODALITIES), dtype=DTYPE)
        else:
            raise ConfigError(f"unknown action kind {action_kind!r}")
        z = self.fuse_batch(feats, mask)
        return z, self.head(z)

    def forward_soft(self, batch: dict, gates: torch.Tensor,
                     action_kind: str = "modality_select") -> tuple[torch.Tensor, torch.Tensor]:
        """Training path: every encoder runs so gate gradients exist."""
        b = gates.shape[0]
        ones = torch.ones(b, len(MODALITIES), dtype=DTYPE)
        if action_kind == "modality_select":
            feats = self._all_features(batch)
            z = self.fuse_batch(feats, gates)
        elif action_kind == "channel_select":
            feats = self._all_features(batch, channel_mask=gates)
            z = self.fuse_batch(feats, ones)
        elif action_kind == "frame_select":
            feats = self._all_features(batch, frame_mask=gates)
            z = self.fuse_batch(feats, ones)
        else:
            raise ConfigError(f"unknown action kind {action_kind!r}")
        return z, self.head(z)

    def _all_features(self, batch: dict, frame_mask=None, channel_mask=None) -> torch.Tensor:
        feats = [
            self.encoders[VISUAL](batch["frames"], frame_mask=frame_mask),
            self.encoders[AUDIO](batch["audio"], channel_mask=channel_mask),
            self.encoders[BEHAVIOR](batch["behavior"]),
        ]
        for m in MODALITIES:
            self.call_counts[m] += 1
        return torch.stack(feats, dim=1)

    def reset_call_counts(self) -> None:
        for k in self.call_counts:
            self.call_counts[k] = 0

    # accounting ----------------------------------------------------------

    def layer_graph(self, action_kind: str = "modality_select") -> LayerGraph:
        d, cfg = self.data_cfg, self.cfg
        k = cfg.kernel
        layers: list[LayerSpec] = []
        n_actions = {"modality_select": len(MODALITIES), "channel_select": d.n_ch,
                     "frame_select": d.F}[action_kind]

        def add_conv2d(name, branch, gate, in_ch, out_ch, h, w, **extra):
            layers.append(LayerSpec(name, "conv2d", out_ch * h * w, gate, branch, {
                "in_ch": in_ch, "out_ch": out_ch, "kh": k, "kw": k,
                "out_h": h, "out_w": w, **extra}))

        def add_stage2(name, branch, gate, out_ch, h, w):
            ph, pw = h // cfg.pool, w // cfg.pool
            layers.append(LayerSpec(f"{name}.pool", "pool", out_ch * ph * pw, gate, branch))
            layers.append(LayerSpec(f"{name}.relu", "rectify", out_ch * ph * pw, gate, branch))
            return ph, pw

        # visual trunk: the shared two-conv stack appears once per frame slot so
        # that frame gating is expressible; only slot 0 carries the parameters
        v1, v2 = cfg.visual_channels
        vis_gate = {"modality_select": VISUAL, "channel_select": None, "frame_select": None}
        for f in range(d.F):
            gate = f if action_kind == "frame_select" else vis_gate[action_kind]
            br = f"visual.frame{f}"
            shared = {"params_counted": f == 0}
            add_conv2d(f"{br}.conv1", br, gate, d.ch, v1, d.H, d.W, **shared)
            h, w = add_stage2(f"{br}.conv1", br, gate, v1, d.H, d.W)
            add_conv2d(f"{br}.conv2", br, gate, v1, v2, h, w, **shared)
            h, w = add_stage2(f"{br}.conv2", br, gate, v2, h, w)
        vis_flat = self.encoders[VISUAL].flat_dim
        proj_gate = VISUAL if action_kind == "modality_select" else None
        layers.append(LayerSpec("visual.proj", "linear", cfg.d_f, proj_gate, "visual.proj",
                                {"in_dim": vis_flat, "out_dim": cfg.d_f}))

        # audio trunk; under channel selection the first conv splits per channel
        a1, a2 = cfg.audio_channels
        enc = self.encoders[AUDIO]
        bins, wins = enc.n_bins, enc.n_windows
        aud_gate = AUDIO if action_kind == "modality_select" else None
        if action_kind == "channel_select":
            # first conv split per input channel; the bias belongs to slice 0
            for c in range(d.n_ch):
                add_conv2d(f"audio.conv1.ch{c}", f"audio.ch{c}", c, 1, a1, bins, wins,
                           bias=(c == 0))
        else:
            add_conv2d("audio.conv1", "audio", aud_gate, d.n_ch, a1, bins, wins)
        h, w = add_stage2("audio.conv1", "audio.trunk", aud_gate, a1, bins, wins)
        add_conv2d("audio.conv2", "audio.trunk2", aud_gate, a1, a2, h, w)
        h, w = add_stage2("audio.conv2", "audio.trunk2", aud_gate, a2, h, w)
        layers.append(LayerSpec("audio.proj", "linear", cfg.d_f, aud_gate, "audio.proj",
                                {"in_dim": enc.flat_dim, "out_dim": cfg.d_f}))

        # behavior trunk
        b1, b2 = cfg.behavior_channels
        beh_gate = BEHAVIOR if action_kind == "modality_select" else None
        layers.append(LayerSpec("behavior.conv1", "conv1d", b1 * d.L_b, beh_gate, "behavior", {
            "in_ch": d.d_b, "out_ch": b1, "k": k, "out_len": d.L_b}))
        length = d.L_b // cfg.pool
        layers.append(LayerSpec("behavior.conv1.pool", "pool", b1 * length, beh_gate, "behavior"))
        layers.append(LayerSpec("behavior.conv1.relu", "rectify", b1 * length, beh_gate, "behavior"))
        layers.append(LayerSpec("behavior.conv2", "conv1d", b2 * length, beh_gate, "behavior", {
            "in_ch": b1, "out_ch": b2, "k": k, "out_len": length}))
        length //= cfg.pool
        layers.append(LayerSpec("behavior.conv2.pool", "pool", b2 * length, beh_gate, "behavior"))
        layers.append(LayerSpec("behavior.conv2.relu", "rectify", b2 * length, beh_gate, "behavior"))
        layers.append(LayerSpec("behavior.proj", "linear", cfg.d_f, beh_gate, "behavior.proj",
                                {"in_dim": self.encoders[BEHAVIOR].flat_dim, "out_dim": cfg.d_f}))

        # fusion and head are never gated
        layers.append(LayerSpec("fusion.mix", "linear", cfg.d_f, None, "fusion",
                                {"in_dim": cfg.d_f, "out_dim": cfg.d_f}))
        out_dim = d.C if cfg.head == "classify" else d.d_b
        layers.append(LayerSpec("head", "linear", out_dim, None, "fusion",
                                {"in_dim": cfg.d_f, "out_dim": out_dim}))
        graph = LayerGraph(layers=layers, n_actions=n_actions)
        graph.validate()
        return graph
