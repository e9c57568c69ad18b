import numpy as np
import pytest
import torch

from adaptsense import (AUDIO, BEHAVIOR, VISUAL, DatasetConfig, EmptySelectionError, Feature,
                        ShapeError, StudentModel, audio_spectrogram, count_macs, gradcheck,
                        load_into, save_checkpoint)
from adaptsense.training import collate, _flatten_segments

DT = torch.float64


@pytest.fixture(scope="module")
def cfg():
    return DatasetConfig(n_episodes=8, T=4, seed=5)


@pytest.fixture(scope="module")
def student(cfg):
    return StudentModel(cfg, seed=0)


@pytest.fixture(scope="module")
def seg_batch(cfg, tiny_episodes):
    flat = _flatten_segments(collate(tiny_episodes[:2]))
    return {k: flat[k] for k in ("frames", "audio", "behavior")}, flat["labels"]


def zeroed(cfg) -> StudentModel:
    s = StudentModel(cfg, seed=0)
    with torch.no_grad():
        for p in s.parameters():
            p.zero_()
    return s


class TestEncode:
    def test_zero_input_zero_bias_gives_zero_feature(self, cfg):
        s = zeroed(cfg)
        frames = np.zeros((cfg.F, cfg.H, cfg.W, cfg.ch))
        feat = s.encode(frames, "visual")
        assert isinstance(feat, Feature) and feat.source_modality == "visual"
        assert torch.all(feat.values == 0)

    def test_conv_linearity_in_input(self, cfg, student):
        # doubling the input doubles pre-pool activations when biases are zero
        enc = StudentModel(cfg, seed=3).encoders[VISUAL]
        with torch.no_grad():
            enc.conv1.bias.zero_()
        x = torch.as_tensor(np.random.default_rng(0).standard_normal((2, cfg.ch, cfg.H, cfg.W)),
                            dtype=DT)
        assert torch.allclose(enc.conv1(2 * x), 2 * enc.conv1(x))

    def test_shape_error_names_expected_and_actual(self, student, cfg):
        with pytest.raises(ShapeError, match="visual"):
            student.encoders[VISUAL](torch.zeros(1, cfg.F, cfg.ch, cfg.H + 1, cfg.W, dtype=DT))

    @pytest.mark.parametrize("modality", [VISUAL, AUDIO, BEHAVIOR])
    def test_gradient_matches_finite_differences(self, cfg, modality):
        s = StudentModel(cfg, seed=7)
        enc = s.encoders[modality]
        shape = (2, *enc.expected_shape())
        x = torch.as_tensor(np.random.default_rng(modality).standard_normal(shape), dtype=DT)
        w = torch.as_tensor(np.random.default_rng(99).standard_normal((2, s.cfg.d_f)), dtype=DT)
        err = gradcheck(lambda: (enc(x) * w).sum(), list(enc.parameters()), max_coords=128)
        assert err < 1e-4

    def test_deterministic(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        a = s.encoders[AUDIO](seg_batch[0]["audio"])
        b = s.encoders[AUDIO](seg_batch[0]["audio"])
        assert torch.equal(a, b)


class TestSpectrogram:
    def test_shapes_and_tone_bin(self, cfg):
        t = np.arange(cfg.L)
        tone = np.sin(2 * np.pi * 5 * t / 32)[None, :].repeat(cfg.n_ch, axis=0)
        spec = audio_spectrogram(torch.as_tensor(tone, dtype=DT), normalized=True)
        assert spec.shape == (cfg.n_ch, 17, 15)
        assert spec[:, 5].min() > 0.9  # unit tone reads ~1.0 in its bin
        assert spec[:, 8].max() < 0.1

    def test_too_short_audio(self):
        with pytest.raises(ShapeError):
            audio_spectrogram(torch.zeros(1, 16, dtype=DT))


class TestFuse:
    def test_single_modality_identity_passthrough(self, cfg):
        s = StudentModel(cfg, seed=1)  # mix starts as identity with zero bias
        feats = [Feature(torch.as_tensor(np.random.default_rng(m).standard_normal(64),
                                         dtype=DT), src)
                 for m, src in enumerate(("visual", "audio", "behavior"))]
        fused = s.fuse(feats, mask=[1, 0, 0])
        assert torch.allclose(fused.values, feats[0].values)

    def test_mask_difference_is_exactly_one_term(self, cfg):
        s = StudentModel(cfg, seed=1)
        with torch.no_grad():
            s.mix.weight.copy_(torch.as_tensor(
                np.random.default_rng(4).standard_normal((64, 64)), dtype=DT))
        feats = [Feature(torch.as_tensor(np.random.default_rng(m).standard_normal(64),
                                         dtype=DT), "x") for m in range(3)]
        full = s.fuse(feats, mask=[1, 1, 1]).values
        partial = s.fuse(feats, mask=[1, 1, 0]).values
        behavior_term = s.mix.weight @ (s.fusion_weights[2] * feats[2].values)
        assert torch.allclose(full - partial, behavior_term)

    def test_masked_content_is_ignored_bitwise(self, cfg):
        s = StudentModel(cfg, seed=1)
        rng = np.random.default_rng(0)
        feats = torch.as_tensor(rng.standard_normal((4, 3, 64)), dtype=DT)
        mask = torch.as_tensor([[1, 1, 0], [0, 1, 0], [1, 0, 1], [0, 0, 1]], dtype=DT)
        out1 = s.fuse_batch(feats, mask)
        scrambled = feats.clone()
        n_off = int((mask == 0).sum())
        scrambled[mask == 0] = torch.as_tensor(rng.standard_normal((n_off, 64)), dtype=DT)
        out2 = s.fuse_batch(scrambled, mask)
        assert torch.equal(out1, out2)

    def test_all_masked_rejected(self, cfg):
        s = StudentModel(cfg, seed=1)
        feats = torch.zeros(1, 3, 64, dtype=DT)
        with pytest.raises(EmptySelectionError):
            s.fuse_batch(feats, torch.zeros(1, 3, dtype=DT))


class TestClassify:
    def test_affine_bias_only(self, cfg):
        s = zeroed(cfg)
        bias = torch.as_tensor(np.arange(cfg.C, dtype=np.float64))
        with torch.no_grad():
            s.head.bias.copy_(bias)
        logits = s.classify(torch.zeros(64, dtype=DT))
        assert torch.equal(logits, bias)

    def test_softmax_normalised(self, cfg, student, seg_batch):
        gates = torch.ones(seg_batch[0]["frames"].shape[0], 3, dtype=DT)
        _, logits = student.forward_soft(seg_batch[0], gates)
        probs = torch.softmax(logits, dim=-1)
        assert torch.allclose(probs.sum(dim=-1), torch.ones(logits.shape[0], dtype=DT),
                              atol=1e-9)

    def test_argmax_shift_invariant(self, cfg, student, seg_batch):
        gates = torch.ones(seg_batch[0]["frames"].shape[0], 3, dtype=DT)
        _, logits = student.forward_soft(seg_batch[0], gates)
        assert torch.equal(logits.argmax(dim=-1), (logits + 7.5).argmax(dim=-1))


class TestStudentForward:
    def test_all_on_gated_equals_soft(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        b = seg_batch[0]["frames"].shape[0]
        ones = torch.ones(b, 3, dtype=DT)
        z1, l1 = s.forward_gated(seg_batch[0], ones)
        z2, l2 = s.forward_soft(seg_batch[0], ones)
        assert torch.allclose(z1, z2) and torch.allclose(l1, l2)

    def test_deselected_encoder_never_evaluated(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        b = seg_batch[0]["frames"].shape[0]
        decisions = torch.zeros(b, 3, dtype=DT)
        decisions[:, AUDIO] = 1
        s.reset_call_counts()
        s.forward_gated(seg_batch[0], decisions)
        assert s.call_counts["visual"] == 0
        assert s.call_counts["audio"] == 1
        assert s.call_counts["behavior"] == 0

    def test_gating_soundness_randomised_deselected_data(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        b = seg_batch[0]["frames"].shape[0]
        decisions = torch.zeros(b, 3, dtype=DT)
        decisions[:, AUDIO] = 1
        z1, l1 = s.forward_gated(seg_batch[0], decisions)
        tampered = dict(seg_batch[0])
        tampered["frames"] = torch.as_tensor(
            np.random.default_rng(8).standard_normal(tuple(seg_batch[0]["frames"].shape)),
            dtype=DT)
        z2, l2 = s.forward_gated(tampered, decisions)
        assert torch.equal(z1, z2) and torch.equal(l1, l2)

    def test_audio_only_macs_below_all_on(self, cfg):
        s = StudentModel(cfg, seed=0)
        g = s.layer_graph()
        assert count_macs(g, [0, 1, 0]) < count_macs(g, None)

    def test_channel_masking_zeroes_before_encoding(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        b = seg_batch[0]["frames"].shape[0]
        mask = torch.ones(b, cfg.n_ch, dtype=DT)
        mask[:, 0] = 0
        zeroed_in = dict(seg_batch[0])
        zeroed_in["audio"] = seg_batch[0]["audio"].clone()
        zeroed_in["audio"][:, 0] = 0
        z1, _ = s.forward_gated(seg_batch[0], mask, "channel_select")
        z2, _ = s.forward_gated(zeroed_in, torch.ones(b, cfg.n_ch, dtype=DT), "channel_select")
        assert torch.allclose(z1, z2)

    def test_frame_masking_uses_selected_frames_only(self, cfg, seg_batch):
        s = StudentModel(cfg, seed=0)
        b = seg_batch[0]["frames"].shape[0]
        mask = torch.zeros(b, cfg.F, dtype=DT)
        mask[:, 2] = 1
        z1, _ = s.forward_gated(seg_batch[0], mask, "frame_select")
        tampered = dict(seg_batch[0])
        tampered["frames"] = seg_batch[0]["frames"].clone()
        tampered["frames"][:, [0, 1, 3]] = 9.9
        z2, _ = s.forward_gated(tampered, mask, "frame_select")
        assert torch.equal(z1, z2)


class TestCheckpointRoundTrip:
    def test_outputs_identical_after_reload(self, cfg, seg_batch, tmp_path):
        s1 = StudentModel(cfg, seed=0)
        with torch.no_grad():
            for p in s1.parameters():
                p.add_(torch.as_tensor(np.random.default_rng(5).standard_normal(tuple(p.shape)),
                                       dtype=DT))
        path = save_checkpoint(tmp_path / "student.ckpt", s1)
        s2 = StudentModel(cfg, seed=99)
        load_into(s2, path)
        gates = torch.ones(seg_batch[0]["frames"].shape[0], 3, dtype=DT)
        z1, l1 = s1.forward_soft(seg_batch[0], gates)
        z2, l2 = s2.forward_soft(seg_batch[0], gates)
        assert torch.equal(z1, z2) and torch.equal(l1, l2)

    def test_blob_is_little_endian_float64(self, cfg, tmp_path):
        import json
        s = StudentModel(cfg, seed=0)
        path = save_checkpoint(tmp_path / "s.ckpt", s)
        manifest = json.loads((tmp_path / "s.ckpt.json").read_text())
        assert manifest["format"] == "adaptsense.ckpt.v1"
        first = manifest["tensors"][0]
        blob = np.fromfile(path, dtype="<f8")
        expect = dict(s.state_dict())[first["name"]].detach().numpy().reshape(-1)
        got = blob[first["offset"]:first["offset"] + expect.size]
        assert np.array_equal(got, expect.astype("<f8"))
