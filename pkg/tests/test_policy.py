import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptsense import (ActionSpace, AudioPreviewNet, ConfigError, ContractError, CostModel,
                        DataError, DatasetConfig, DecisionTensor, PolicyController,
                        PreviewConfig, assemble_partial_clip, audio_preview_saliency,
                        count_params, gradcheck, gumbel_max_sample, gumbel_noise,
                        gumbel_softmax_relax, policy_loss, select_salient_frames, usage_cost)
from adaptsense.training import collate

DT = torch.float64


class _FixedUniform:
    """rng stub returning a preset uniform draw."""

    def __init__(self, value):
        self.value = value

    def random(self, shape):
        return np.full(shape, self.value)


class TestGumbelNoise:
    def test_fixed_point(self):
        g = gumbel_noise((3,), _FixedUniform(math.exp(-1)))
        assert np.allclose(g, 0.0, atol=1e-12)

    def test_moments(self):
        rng = np.random.default_rng(2024)
        g = gumbel_noise(1_000_000, rng)
        assert abs(g.mean() - 0.5772156649) < 0.01
        assert abs(g.var() - math.pi ** 2 / 6) < 0.02

    def test_deterministic_given_seed(self):
        a = gumbel_noise((4, 2), np.random.default_rng(7))
        b = gumbel_noise((4, 2), np.random.default_rng(7))
        assert np.array_equal(a, b)


class TestGumbelMax:
    def test_dominant_score(self):
        assert gumbel_max_sample([10.0, 0.0], [0.0, 0.0]).tolist() == [1.0, 0.0]

    def test_tie_breaks_toward_select(self):
        assert gumbel_max_sample([0.3, 0.3], [0.0, 0.0]).tolist() == [1.0, 0.0]

    def test_marginal_matches_softmax(self):
        rng = np.random.default_rng(3)
        scores = np.array([math.log(0.7), math.log(0.3)])
        noise = gumbel_noise((100_000, 2), rng)
        picks = gumbel_max_sample(np.broadcast_to(scores, (100_000, 2)), noise)
        freq = picks[:, 0].mean()
        assert 0.69 <= freq <= 0.71

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            gumbel_max_sample([math.inf, 0.0], [0.0, 0.0])


class TestGumbelSoftmaxRelax:
    def test_symmetry(self):
        for tau in (0.3, 1.0, 5.0):
            p = gumbel_softmax_relax([1.4, 1.4], [0.0, 0.0], tau)
            assert np.allclose(np.asarray(p), [0.5, 0.5], atol=1e-12)

    def test_low_temperature_discreteness(self):
        p = gumbel_softmax_relax([1.0, 0.0], [0.0, 0.0], 1e-3)
        assert float(np.max(np.asarray(p))) >= 0.999

    def test_gradient_matches_finite_differences(self, rng):
        logits = torch.as_tensor(rng.standard_normal(2), dtype=DT).requires_grad_()
        noise = torch.as_tensor(gumbel_noise(2, rng))
        w = torch.tensor([1.7, -0.4], dtype=DT)
        err = gradcheck(lambda: (gumbel_softmax_relax(logits, noise, 0.8) * w).sum(), [logits])
        assert err < 1e-4

    def test_non_positive_tau_rejected(self):
        with pytest.raises(ConfigError):
            gumbel_softmax_relax([0.0, 0.0], [0.0, 0.0], 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=2, max_size=2),
           st.lists(st.floats(-8, 8), min_size=2, max_size=2),
           st.floats(0.05, 10.0))
    def test_rows_sum_to_one(self, scores, noise, tau):
        p = np.asarray(gumbel_softmax_relax(scores, noise, tau))
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0)

    def test_discreteness_monotone_in_inverse_tau(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal((256, 2))
        noise = gumbel_noise((256, 2), rng)
        means = [np.asarray(gumbel_softmax_relax(scores, noise, tau)).max(axis=1).mean()
                 for tau in (5.0, 2.0, 1.0, 0.5, 0.1)]
        assert all(b >= a - 1e-12 for a, b in zip(means, means[1:]))

    def test_numpy_and_torch_paths_agree(self, rng):
        scores = rng.standard_normal(2)
        noise = rng.standard_normal(2)
        p_np = np.asarray(gumbel_softmax_relax(scores, noise, 0.7))
        p_t = gumbel_softmax_relax(torch.as_tensor(scores), torch.as_tensor(noise), 0.7)
        assert np.allclose(p_np, p_t.numpy(), atol=1e-12)


class TestDecisionTensor:
    def test_validation(self):
        hard = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        soft = np.stack([1 - hard * 0.3 - 0.2, hard * 0.3 + 0.2], axis=-1)
        soft = soft / soft.sum(axis=-1, keepdims=True)
        DecisionTensor(hard=hard, soft=soft).validate()
        with pytest.raises(ContractError):
            DecisionTensor(hard=np.zeros((2, 2), dtype=np.uint8), soft=soft).validate()
        bad_soft = soft.copy()
        bad_soft[0, 0, 0] += 0.1
        with pytest.raises(ContractError):
            DecisionTensor(hard=hard, soft=bad_soft).validate()


class TestUsageCost:
    def test_hand_value(self):
        u = np.zeros((10, 3), dtype=np.uint8)
        u[:3, 0] = 1
        u[:, 1] = 1
        cm = CostModel(lam=(1.0, 0.05, 0.03), gamma=0.0, total_segments=10)
        assert usage_cost(u, cm) == pytest.approx(0.14, abs=1e-12)

    def test_all_off_zero(self):
        cm = CostModel(lam=(1.0, 0.05, 0.03), gamma=0.0, total_segments=4)
        assert usage_cost(np.zeros((4, 3)), cm) == 0.0

    def test_quadratic_in_count(self):
        cm = CostModel(lam=(1.0,), gamma=0.0, total_segments=8)
        u1 = np.zeros((8, 1)); u1[:2, 0] = 1
        u2 = np.zeros((8, 1)); u2[:4, 0] = 1
        assert usage_cost(u2, cm) == pytest.approx(4 * usage_cost(u1, cm), abs=1e-12)

    def test_segment_count_mismatch(self):
        cm = CostModel(lam=(1.0, 1.0), gamma=0.0, total_segments=5)
        with pytest.raises(ContractError):
            usage_cost(np.zeros((4, 2)), cm)

    def test_exact_rational_agreement(self):
        from fractions import Fraction
        rng = np.random.default_rng(11)
        lam = (1.0, 0.05, 0.03)
        for _ in range(30):
            t = int(rng.integers(2, 30))
            u = (rng.random((t, 3)) < 0.5).astype(np.uint8)
            cm = CostModel(lam=lam, gamma=0.0, total_segments=t)
            got = usage_cost(u, cm)
            oracle = sum(l * (int(c) / t) ** 2 for l, c in zip(lam, u.sum(axis=0)))
            exact = sum(Fraction(l) * Fraction(int(c), t) ** 2
                        for l, c in zip(lam, u.sum(axis=0)))
            assert got == oracle
            assert abs(got - float(exact)) < 1e-15


class TestPolicyLoss:
    def setup_method(self):
        self.u = np.zeros((4, 3), dtype=np.uint8)
        self.u[:, 2] = 1
        self.logits = torch.tensor([2.0, 0.0, -1.0], dtype=DT)

    def test_correct_zero_usage_is_pure_cross_entropy(self):
        cm = CostModel(lam=(1.0, 1.0, 1.0), gamma=5.0, total_segments=4)
        ce = -torch.log_softmax(self.logits, dim=-1)[0]
        loss = policy_loss(self.logits, 0, np.zeros((4, 3), dtype=np.uint8), cm, correct=True)
        assert float(loss) == pytest.approx(float(ce), abs=1e-12)

    def test_zero_cost_zero_gamma_reduces_to_cross_entropy(self):
        cm = CostModel(lam=(0.0, 0.0, 0.0), gamma=0.0, total_segments=4)
        ce = float(-torch.log_softmax(self.logits, dim=-1)[0])
        for correct in (True, False):
            assert float(policy_loss(self.logits, 0, self.u, cm, correct)) == pytest.approx(
                ce, abs=1e-12)

    def test_gamma_additivity_on_errors(self):
        cm0 = CostModel(lam=(1.0, 0.05, 0.03), gamma=0.0, total_segments=4)
        cm10 = CostModel(lam=(1.0, 0.05, 0.03), gamma=10.0, total_segments=4)
        l0 = float(policy_loss(self.logits, 1, self.u, cm0, correct=False))
        l10 = float(policy_loss(self.logits, 1, self.u, cm10, correct=False))
        assert l10 - l0 == pytest.approx(10.0, abs=1e-12)


@pytest.fixture(scope="module")
def controller_setup():
    cfg = DatasetConfig(n_episodes=4, T=4, seed=5)
    from adaptsense import generate_dataset
    eps = generate_dataset(cfg)
    policy = PolicyController(cfg, ActionSpace.modalities(), fallback_action=2, seed=0)
    return cfg, collate(eps), policy


class TestPolicyController:
    def test_zero_weights_tie_rule_selects_everything(self, controller_setup):
        cfg, batch, _ = controller_setup
        policy = PolicyController(cfg, ActionSpace.modalities(), seed=0)
        with torch.no_grad():
            for p in policy.parameters():
                p.zero_()
        f_t = policy.joint_feature(batch["frames"][:, 0], batch["audio"][:, 0],
                                   batch["behavior"][:, 0])
        state = policy.init_state(f_t.shape[0])
        _, hard, _, _ = policy.policy_step(f_t, state, tau_gumbel=1.0,
                                           noise=np.zeros((f_t.shape[0], 3, 2)))
        assert np.all(hard == 1)

    def test_same_seed_same_decisions(self, controller_setup):
        _, batch, policy = controller_setup
        r1 = policy.run_episode_batch(batch, 1.0, np.random.default_rng(3), mode="infer")
        r2 = policy.run_episode_batch(batch, 1.0, np.random.default_rng(3), mode="infer")
        assert np.array_equal(r1.hard, r2.hard) and np.array_equal(r1.soft, r2.soft)

    def test_gradient_reaches_head_weights(self, controller_setup):
        _, batch, policy = controller_setup
        rollout = policy.run_episode_batch(batch, 2.0, np.random.default_rng(1), mode="train")
        cm = CostModel(lam=(1.0, 0.05, 0.03), gamma=1.0, total_segments=batch["labels"].shape[1])
        loss = sum(usage_cost(rollout.gates[i], cm) for i in range(rollout.gates.shape[0]))
        grads = torch.autograd.grad(loss, [policy.heads[0].weight], allow_unused=True)
        assert grads[0] is not None and float(grads[0].abs().sum()) > 0

    def test_fallback_guarantees_nonempty_rows(self, controller_setup):
        cfg, batch, _ = controller_setup
        policy = PolicyController(cfg, ActionSpace.modalities(), fallback_action=2, seed=0)
        with torch.no_grad():
            for head in policy.heads:  # force "skip" strongly on every action
                head.bias.copy_(torch.tensor([-30.0, 30.0], dtype=DT))
        rollout = policy.run_episode_batch(batch, 1.0, np.random.default_rng(0), mode="infer")
        assert np.all(rollout.hard.sum(axis=2) >= 1)
        assert np.all(rollout.hard[:, :, 2] == 1)  # the cheapest action was forced

    def test_straight_through_forward_is_hard(self, controller_setup):
        _, batch, policy = controller_setup
        rollout = policy.run_episode_batch(batch, 5.0, np.random.default_rng(2), mode="train")
        gates = rollout.gates.detach().numpy()
        assert set(np.unique(gates)).issubset({0.0, 1.0})
        assert np.array_equal(gates, rollout.hard.astype(np.float64))

    def test_straight_through_gradient_equals_soft_gradient(self, controller_setup):
        _, batch, policy = controller_setup
        w = torch.as_tensor(np.random.default_rng(4).standard_normal(3), dtype=DT)

        def run(mode):
            rollout = policy.run_episode_batch(batch, 1.5, np.random.default_rng(9), mode=mode)
            value = (rollout.gates * w).sum()
            return torch.autograd.grad(value, list(policy.parameters()), allow_unused=True)

        g_st = run("train")
        g_soft = run("soft")
        for a, b in zip(g_st, g_soft):
            if a is None or b is None:
                assert a is None and b is None
            else:
                assert torch.allclose(a, b, atol=1e-12)

    def test_param_count_matches_graph(self, controller_setup):
        _, _, policy = controller_setup
        graph_params = count_params(policy.layer_graph())
        torch_params = sum(p.numel() for p in policy.parameters())
        assert graph_params == torch_params


class TestAudioPreview:
    def make_net(self, seed=0):
        cfg = PreviewConfig(window=32, sub_window=16, d_model=8, attn_layers=2, n_heads=2,
                            rcnn_filters=4, bilstm_hidden=6, final_hidden=8)
        net = AudioPreviewNet(n_ch=2, cfg=cfg, seed=seed)
        with torch.no_grad():  # non-zero biases make the invariance checks meaningful
            for name, p in net.named_parameters():
                if p.ndim == 1 and "rho" not in name:
                    p.add_(0.05 * torch.as_tensor(
                        np.random.default_rng(len(name)).standard_normal(tuple(p.shape)),
                        dtype=DT))
        return net

    def test_rho_zero_disables_attention_influence(self):
        import copy
        net = self.make_net()
        with torch.no_grad():
            net.rho.zero_()
        other = copy.deepcopy(net)
        with torch.no_grad():
            for m in other.attn:
                for p in m.parameters():
                    p.add_(1.0)
        x = torch.as_tensor(np.random.default_rng(0).standard_normal((1, 2, 128)), dtype=DT)
        assert torch.equal(net(x), other(x))

    def test_constant_audio_constant_saliency(self):
        net = self.make_net(seed=3)
        sal = net(torch.zeros(1, 2, 128, dtype=DT))[0].detach()
        assert float(sal.max() - sal.min()) == 0.0
        assert torch.all((sal >= 0) & (sal <= 1))

    def test_saliency_range_and_window_count(self):
        net = self.make_net()
        x = torch.as_tensor(np.random.default_rng(5).standard_normal((2, 2, 160)), dtype=DT)
        sal = net(x)
        assert sal.shape == (2, 5)
        assert torch.all((sal > 0) & (sal < 1))

    def test_gradient_matches_finite_differences(self):
        net = self.make_net(seed=1)
        aud = torch.as_tensor(np.random.default_rng(3).standard_normal((1, 2, 96)), dtype=DT)
        w = torch.linspace(1.0, 2.0, 3, dtype=DT)
        err = gradcheck(lambda: (net(aud) * w).sum(), list(net.parameters()), max_coords=256)
        assert err < 1e-4

    def test_audio_shorter_than_window_rejected(self):
        net = self.make_net()
        with pytest.raises(DataError):
            audio_preview_saliency(np.zeros((2, 16)), net)

    def test_param_count_matches_graph(self):
        net = self.make_net()
        graph = net.layer_graph(n_windows=4)
        # the handshake scalars are the only parameters outside the graph
        assert count_params(graph) + net.cfg.attn_layers == sum(
            p.numel() for p in net.parameters())

    def test_default_widths(self):
        net = AudioPreviewNet(n_ch=4)
        assert net.cfg.attn_layers == 3 and net.cfg.n_heads == 8
        assert net.cfg.rcnn_filters == 64 and net.cfg.bilstm_hidden == 128
        assert net.cfg.final_hidden == 256


def brute_force_selection(sal, delta, n_max):
    """Independent O(n^2) enumeration of the region rule."""
    n = len(sal)
    regions = []
    for i in range(n):
        for j in range(i, n):
            inside = all(sal[k] > delta for k in range(i, j + 1))
            left_edge = i == 0 or sal[i - 1] <= delta
            right_edge = j == n - 1 or sal[j + 1] <= delta
            if inside and left_edge and right_edge:
                regions.append((i, j))
    picks = []
    for i, j in regions:
        best = i
        for k in range(i, j + 1):
            if sal[k] > sal[best]:
                best = k
        picks.append(best)
    ranked = sorted(picks, key=lambda idx: (-sal[idx], idx))
    return sorted(ranked[:n_max])


class TestSelectSalientFrames:
    def test_hand_case(self):
        sal = [0.1, 0.9, 0.3, 0.2, 0.8, 0.4]
        assert select_salient_frames(sal, delta=0.5, w=1, n_max=3) == [1, 4]

    def test_all_below_threshold_empty(self):
        assert select_salient_frames([0.1, 0.2, 0.3], delta=0.5, w=1, n_max=3) == []

    def test_cap_keeps_highest_peak(self):
        sal = [0.1, 0.9, 0.3, 0.2, 0.8, 0.4]
        assert select_salient_frames(sal, delta=0.5, w=1, n_max=1) == [1]

    def test_merged_region_returns_single_argmax(self):
        sal = [0.6, 0.7, 0.9, 0.8, 0.1]
        assert select_salient_frames(sal, delta=0.5, w=1, n_max=3) == [2]

    def test_earliest_tie_break(self):
        sal = [0.9, 0.1, 0.9]
        assert select_salient_frames(sal, delta=0.5, w=1, n_max=1) == [0]

    def test_invalid_arguments(self):
        with pytest.raises(ConfigError):
            select_salient_frames([0.9], delta=0.5, w=1, n_max=0)
        with pytest.raises(ConfigError):
            select_salient_frames([0.9], delta=0.5, w=0, n_max=1)

    @settings(max_examples=120, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20),
           st.floats(0.05, 0.95), st.integers(1, 4))
    def test_matches_brute_force(self, sal, delta, n_max):
        assert select_salient_frames(sal, delta, 1, n_max) == brute_force_selection(
            sal, delta, n_max)


class TestAssemblePartialClip:
    def test_single_frame_on_empty_history(self):
        assert assemble_partial_clip(3) == (3,)

    def test_append_preserves_order(self):
        assert assemble_partial_clip(4, history=[1]) == (1, 4)

    def test_length_grows_by_one_per_append(self):
        clip = ()
        for t, frame in enumerate([0, 2, 5, 9], start=1):
            clip = assemble_partial_clip(frame, history=clip)
            assert len(clip) == t

    def test_non_increasing_rejected(self):
        with pytest.raises(ContractError):
            assemble_partial_clip(1, history=[4])
        with pytest.raises(ContractError):
            assemble_partial_clip([3, 3])


class TestActionSpaces:
    def test_kinds_and_sizes(self):
        assert ActionSpace.modalities().K == 3
        assert ActionSpace.channels(4).K == 4
        assert ActionSpace.frames(6).K == 6
        with pytest.raises(ConfigError):
            ActionSpace("bogus", ("a",))

    def test_cost_model_validation(self):
        with pytest.raises(ConfigError):
            CostModel(lam=(-1.0,), gamma=0.0, total_segments=1)
        with pytest.raises(ConfigError):
            CostModel(lam=(1.0,), gamma=-0.5, total_segments=1)
        assert CostModel(lam=(1.0, 0.05, 0.03), gamma=0.0, total_segments=1).cheapest_action == 2
