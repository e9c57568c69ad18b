"""Planted-ground-truth multimodal episodes.

Every segment carries a class signal in exactly one "sufficient" modality;
the other modalities contain class-uninformative noise. Because the planting
is known, the minimum-cost zero-error selection policy and the achievable
accuracy are known by construction, which is what makes the benchmark
quantitatively checkable without real datasets.

Signal forms (chosen so tiny encoders can learn them quickly):
  visual    class-dependent spatial plane-wave pattern in one frame
  audio     class-dependent pure tone (one rfft bin per class) carried on all
            channels with a class-dependent per-channel amplitude fingerprint
  behavior  class-dependent constant offset vector plus noise

Segments flagged with an audio event additionally carry a high-energy
wideband burst whose temporal position marks the informative frame slot.

`redundant_visual` plants a weaker copy of the class's visual pattern on
audio-sufficient segments. This mirrors the partial redundancy of real
multimodal streams: with it, switching to the visual stream can compensate
for degraded audio. Set it to 0 for strictly disjoint signals.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError

MODALITIES = ("visual", "audio", "behavior")
VISUAL, AUDIO, BEHAVIOR = 0, 1, 2

SPECTRO_WINDOW = 32
SPECTRO_HOP = 16

# amplitude of planted signals vs. background noise sigma
SIGNAL_AMP = 1.0
NOISE_SIGMA = 0.25
BURST_AMP = 3.0

# sub-stream tags so template draws never collide with per-episode draws
_TEMPLATE_STREAM = 0x7E4D
_CORRUPT_STREAM = 0xC0FF

EPISODE_FORMAT = "adaptsense.episode.v1"
_ARRAY_DTYPE = "<f4"


@dataclass(frozen=True)
class SegmentSpec:
    """Planted annotations for one segment."""

    label: int
    sufficient_modality: int
    audio_event: bool
    noise_snr_db: float  # math.inf means clean
    informative_frame: int


@dataclass
class Segment:
    frames: np.ndarray  # (F, H, W, ch) float32
    audio: np.ndarray  # (n_ch, L) float32
    behavior: np.ndarray  # (L_b, d_b) float32
    spec: SegmentSpec | None


@dataclass
class Episode:
    index: int
    split: str
    segments: list[Segment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class DatasetConfig:
    n_episodes: int = 100
    T: int = 8
    F: int = 4
    H: int = 16
    W: int = 16
    ch: int = 1
    n_ch: int = 4
    L: int = 256
    L_b: int = 32
    d_b: int = 6
    C: int = 10
    modality_mix: tuple[float, float, float] = (0.25, 0.375, 0.375)
    event_rate: float = 0.5
    redundant_visual: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        dims = {
            "n_episodes": self.n_episodes, "T": self.T, "F": self.F,
            "H": self.H, "W": self.W, "ch": self.ch, "n_ch": self.n_ch,
            "L": self.L, "L_b": self.L_b, "d_b": self.d_b, "C": self.C,
        }
        for name, value in dims.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if len(self.modality_mix) != len(MODALITIES):
            raise ConfigError("modality_mix must have one entry per modality")
        if any(p < 0 for p in self.modality_mix):
            raise ConfigError("modality_mix entries must be non-negative")
        if abs(sum(self.modality_mix) - 1.0) > 1e-9:
            raise ConfigError(f"modality_mix must sum to 1, got {sum(self.modality_mix)}")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ConfigError(f"event_rate must be in [0, 1], got {self.event_rate}")
        if not 0.0 <= self.redundant_visual <= 1.0:
            raise ConfigError(f"redundant_visual must be in [0, 1], got {self.redundant_visual}")
        if self.L < SPECTRO_WINDOW:
            raise ConfigError(f"L must be at least {SPECTRO_WINDOW}")
        if self.L % self.F != 0:
            raise ConfigError("L must be divisible by F so audio windows align with frames")
        n_bins = SPECTRO_WINDOW // 2 + 1
        if self.C > n_bins - 3:
            raise ConfigError(f"C must be at most {n_bins - 3} to give each class its own tone bin")


def _plane_wave_pairs(count: int, h: int, w: int) -> list[tuple[int, int]]:
    """First `count` distinct low spatial frequencies below Nyquist, fixed order."""
    pairs = []
    s = 1
    while len(pairs) < count:
        for u in range(s + 1):
            v = s - u
            if u < h // 2 and v < w // 2:
                pairs.append((u, v))
                if len(pairs) == count:
                    break
        s += 1
        if s > h + w:
            raise ConfigError(f"cannot place {count} distinct visual patterns on a {h}x{w} grid")
    return pairs


class SignalBank:
    """The per-class planted templates implied by one dataset configuration."""

    def __init__(self, config: DatasetConfig):
        config.validate()
        self.config = config
        c, h, w = config.C, config.H, config.W
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        self.visual_templates = np.empty((c, h, w), dtype=np.float64)
        for k, (u, v) in enumerate(_plane_wave_pairs(c, h, w)):
            phase = 2.0 * math.pi * (u * xs / w + v * ys / h) + 0.7 * k
            self.visual_templates[k] = math.sqrt(2.0) * np.cos(phase)
        self.tone_bins = np.arange(2, 2 + c)
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TEMPLATE_STREAM)))
        offsets = rng.standard_normal((c, config.d_b))
        self.behavior_offsets = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
        # per-class channel-amplitude fingerprint: a second, position-free audio
        # cue, and the reason dropping channels degrades gracefully
        self.channel_amplitudes = 1.0 + 0.5 * rng.uniform(-1.0, 1.0, size=(c, config.n_ch))

    def tone(self, label: int, channel: int, n_samples: int, phase: float) -> np.ndarray:
        k = self.tone_bins[label]
        n = np.arange(n_samples)
        amp = SIGNAL_AMP * self.channel_amplitudes[label, channel]
        return amp * np.sin(2.0 * math.pi * k * n / SPECTRO_WINDOW + phase)


def split_of_index(config: DatasetConfig, index: int) -> str:
    """Fixed 70/15/15 train/val/test split by episode index."""
    n = config.n_episodes
    n_train = int(n * 0.70)
    n_val = int(n * 0.15)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_episode(config: DatasetConfig, index: int, bank: SignalBank | None = None) -> Episode:
    """Generate one episode, deterministic in (config.seed, index)."""
    config.validate()
    if bank is None:
        bank = SignalBank(config)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, int(index))))
    mix = np.asarray(config.modality_mix, dtype=np.float64)
    mix = mix / mix.sum()

    episode = Episode(index=index, split=split_of_index(config, index))
    for _ in range(config.T):
        label = int(rng.integers(config.C))
        sufficient = int(rng.choice(len(MODALITIES), p=mix))
        has_event = bool(rng.random() < config.event_rate)
        info_frame = int(rng.integers(config.F))

        frames = NOISE_SIGMA * rng.standard_normal(
            (config.F, config.H, config.W, config.ch))
        audio = NOISE_SIGMA * rng.standard_normal((config.n_ch, config.L))
        behavior = NOISE_SIGMA * rng.standard_normal((config.L_b, config.d_b))

        if sufficient == VISUAL:
            frames[info_frame] += bank.visual_templates[label][..., None]
        elif sufficient == AUDIO:
            for chan in range(config.n_ch):
                audio[chan] += bank.tone(label, chan, config.L,
                                         phase=rng.uniform(0, 2 * math.pi))
            if config.redundant_visual > 0:
                frames[info_frame] += (config.redundant_visual
                                       * bank.visual_templates[label][..., None])
        else:
            behavior += SIGNAL_AMP * bank.behavior_offsets[label]

        if has_event:
            burst_len = config.L // config.F
            start = info_frame * burst_len
            audio[:, start:start + burst_len] += BURST_AMP * rng.standard_normal(
                (config.n_ch, burst_len))

        spec = SegmentSpec(
            label=label,
            sufficient_modality=sufficient,
            audio_event=has_event,
            noise_snr_db=math.inf,
            informative_frame=info_frame,
        )
        episode.segments.append(Segment(
            frames=frames.astype(np.float32),
            audio=audio.astype(np.float32),
            behavior=behavior.astype(np.float32),
            spec=spec,
        ))
    return episode


def generate_dataset(config: DatasetConfig) -> list[Episode]:
    config.validate()
    bank = SignalBank(config)
    return [generate_episode(config, i, bank) for i in range(config.n_episodes)]


def oracle_policy(episode: Episode) -> np.ndarray:
    """(T, 3) binary matrix selecting exactly the planted sufficient modality.

    This is the minimum-cost zero-error policy by construction whenever all
    per-action costs are positive.
    """
    decisions = np.zeros((len(episode), len(MODALITIES)), dtype=np.uint8)
    for t, segment in enumerate(episode.segments):
        if segment.spec is None:
            raise ContractError("episode lacks planted annotations; cannot derive the oracle policy")
        decisions[t, segment.spec.sufficient_modality] = 1
    return decisions


def corrupt_audio(episode: Episode, snr_db: float, seed: int) -> Episode:
    """Additive white noise scaled so each segment's audio SNR equals snr_db.

    The noise draw is normalised to its empirical RMS before scaling, so the
    realised per-segment power ratio matches the request to float precision.
    Frames and behavior arrays are returned untouched (same contents).
    """
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite, got {snr_db}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _CORRUPT_STREAM, episode.index)))
    out = Episode(index=episode.index, split=episode.split)
    for segment in episode.segments:
        audio = segment.audio.astype(np.float64)
        signal_power = float(np.mean(audio ** 2))
        noise = rng.standard_normal(audio.shape)
        noise *= math.sqrt(signal_power * 10.0 ** (-snr_db / 10.0)) / math.sqrt(np.mean(noise ** 2))
        spec = segment.spec
        if spec is not None:
            spec = SegmentSpec(spec.label, spec.sufficient_modality, spec.audio_event,
                               float(snr_db), spec.informative_frame)
        out.segments.append(Segment(
            frames=segment.frames.copy(),
            audio=(audio + noise).astype(np.float32),
            behavior=segment.behavior.copy(),
            spec=spec,
        ))
    return out


def magnitude_spectrogram(audio: np.ndarray, window: int = SPECTRO_WINDOW,
                          hop: int = SPECTRO_HOP) -> np.ndarray:
    """(n_ch, L) waveform -> (n_ch, bins, n_windows) rfft magnitudes."""
    n_ch, length = audio.shape
    if length < window:
        raise DataError(f"audio length {length} is shorter than one window ({window})")
    n_win = (length - window) // hop + 1
    idx = hop * np.arange(n_win)[:, None] + np.arange(window)[None, :]
    frames = audio[:, idx]  # (n_ch, n_win, window)
    return np.abs(np.fft.rfft(frames, axis=-1)).transpose(0, 2, 1)


class TemplateClassifier:
    """Brute-force nearest-template reference classifier.

    Scores each class against the planted signal form of each modality and
    predicts the argmax. On clean data this is exact on the sufficient
    modality and at chance on the others, which several tests rely on.
    """

    def __init__(self, bank: SignalBank):
        self.bank = bank

    def modality_scores(self, segment: Segment, modality: int) -> np.ndarray:
        cfg = self.bank.config
        if modality == VISUAL:
            flat = segment.frames.astype(np.float64).mean(axis=-1).reshape(cfg.F, -1)
            templates = self.bank.visual_templates.reshape(cfg.C, -1)
            return (flat @ templates.T).max(axis=0)
        if modality == AUDIO:
            spec = magnitude_spectrogram(segment.audio.astype(np.float64))
            per_bin = spec.sum(axis=(0, 2))
            return per_bin[self.bank.tone_bins]
        if modality == BEHAVIOR:
            mean = segment.behavior.astype(np.float64).mean(axis=0)
            return -np.linalg.norm(mean[None, :] - SIGNAL_AMP * self.bank.behavior_offsets, axis=1)
        raise ContractError(f"unknown modality index {modality}")

    def predict(self, segment: Segment, selected=None) -> int:
        if selected is None:
            selected = range(len(MODALITIES))
        selected = [m for m in selected]
        if not selected:
            raise ContractError("at least one modality must be selected")
        total = np.zeros(self.bank.config.C)
        for m in selected:
            scores = self.modality_scores(segment, m)
            total += (scores - scores.mean()) / (scores.std() + 1e-12)
        return int(np.argmax(total))


def save_dataset(episodes: list[Episode], config: DatasetConfig, out_dir: str | Path) -> Path:
    """Write flat little-endian float32 arrays plus a versioned JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": EPISODE_FORMAT,
        "dtype": _ARRAY_DTYPE,
        "config": asdict(config),
        "episodes": [],
    }
    for ep in episodes:
        stem = f"ep{ep.index:05d}"
        arrays = {
            "frames": np.stack([s.frames for s in ep.segments]),
            "audio": np.stack([s.audio for s in ep.segments]),
            "behavior": np.stack([s.behavior for s in ep.segments]),
        }
        entry = {"index": ep.index, "split": ep.split, "arrays": {}, "segments": []}
        for name, arr in arrays.items():
            fname = f"{stem}_{name}.bin"
            arr.astype(_ARRAY_DTYPE).tofile(out / fname)
            entry["arrays"][name] = {"file": fname, "shape": list(arr.shape)}
        for seg in ep.segments:
            spec = seg.spec
            entry["segments"].append(None if spec is None else {
                "label": spec.label,
                "sufficient_modality": spec.sufficient_modality,
                "audio_event": spec.audio_event,
                "noise_snr_db": None if math.isinf(spec.noise_snr_db) else spec.noise_snr_db,
                "informative_frame": spec.informative_frame,
            })
        manifest["episodes"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(in_dir: str | Path) -> tuple[DatasetConfig, list[Episode]]:
    path = Path(in_dir)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != EPISODE_FORMAT:
        raise DataError(f"unsupported dataset format {manifest.get('format')!r}")
    raw_cfg = dict(manifest["config"])
    raw_cfg["modality_mix"] = tuple(raw_cfg["modality_mix"])
    config = DatasetConfig(**raw_cfg)
    episodes = []
    for entry in manifest["episodes"]:
        arrays = {}
        for name, meta in entry["arrays"].items():
            arr = np.fromfile(path / meta["file"], dtype=_ARRAY_DTYPE)
            arrays[name] = arr.reshape(meta["shape"])
        ep = Episode(index=entry["index"], split=entry["split"])
        for t, raw_spec in enumerate(entry["segments"]):
            spec = None
            if raw_spec is not None:
                snr = raw_spec["noise_snr_db"]
                spec = SegmentSpec(
                    label=raw_spec["label"],
                    sufficient_modality=raw_spec["sufficient_modality"],
                    audio_event=raw_spec["audio_event"],
                    noise_snr_db=math.inf if snr is None else float(snr),
                    informative_frame=raw_spec["informative_frame"],
                )
            ep.segments.append(Segment(
                frames=arrays["frames"][t],
                audio=arrays["audio"][t],
                behavior=arrays["behavior"][t],
                spec=spec,
            ))
        episodes.append(ep)
    return config, episodes


def clone_episode(episode: Episode) -> Episode:
    return copy.deepcopy(episode)
