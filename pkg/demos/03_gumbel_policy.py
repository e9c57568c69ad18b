#!/usr/bin/env python3
# Discrete selection decisions trained with backprop: Gumbel-Max sampling,
# its temperature-controlled softmax relaxation, the straight-through
# estimator, and the cost-regularised selection objective.

import math

import numpy as np
import torch

from adaptsense import (ActionSpace, CostModel, DatasetConfig, PolicyController, collate,
                        generate_dataset, gumbel_max_sample, gumbel_noise,
                        gumbel_softmax_relax, policy_loss, usage_cost)

rng = np.random.default_rng(0)

##############################################################################
# Standard Gumbel noise has mean 0.5772 (Euler-Mascheroni) and variance
# pi^2/6; adding it to log-scores and taking the argmax samples the softmax
# distribution exactly.

g = gumbel_noise(200_000, rng)
print(f"gumbel noise: mean {g.mean():.4f} (0.5772), var {g.var():.4f} "
      f"({math.pi ** 2 / 6:.4f})")

scores = np.array([math.log(0.7), math.log(0.3)])
picks = gumbel_max_sample(np.broadcast_to(scores, (100_000, 2)),
                          gumbel_noise((100_000, 2), rng))
print(f"gumbel-max frequency of option 0: {picks[:, 0].mean():.4f} (target 0.7)")

##############################################################################
# The relaxation interpolates between uniform and one-hot as the temperature
# drops; its rows always sum to one and it is differentiable in the scores.

noise = gumbel_noise((5000, 2), rng)
raw = rng.standard_normal((5000, 2))
print("\nmean max-probability as tau decreases:")
for tau in (5.0, 2.0, 1.0, 0.5, 0.1):
    p = np.asarray(gumbel_softmax_relax(raw, noise, tau))
    print(f"  tau={tau:4.1f}: {p.max(axis=1).mean():.4f}")

##############################################################################
# The controller: cheap per-modality encoders feed an LSTM; per-action heads
# emit two-way log-scores; sampling is straight-through in training (hard
# forward values, relaxed gradients).

config = DatasetConfig(n_episodes=4, seed=3)
batch = collate(generate_dataset(config))
policy = PolicyController(config, ActionSpace.modalities(), fallback_action=2, seed=0)
rollout = policy.run_episode_batch(batch, tau_gumbel=2.0, rng=np.random.default_rng(1),
                                   mode="train")
print("\nrollout decisions for episode 0 (rows = segments):")
print(rollout.hard[0])
print("gates carry gradients:", rollout.gates.requires_grad,
      "and hard forward values:", sorted(set(np.unique(rollout.gates.detach().numpy()))))

##############################################################################
# The objective balances task loss against usage: each action pays
# lambda_k * (fraction of segments that used it)^2 when the prediction is
# right, and errors pay a flat gamma instead.

cm = CostModel(lam=(1.0, 0.05, 0.03), gamma=10.0, total_segments=config.T)
u = rollout.hard[0]
print(f"\nusage fractions {u.mean(axis=0)} -> usage cost {usage_cost(u, cm):.4f}")

logits = torch.tensor([3.0, 0.1, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                      dtype=torch.float64)
print("correct prediction:  ", float(policy_loss(logits, 0, u, cm, correct=True)))
print("incorrect prediction:", float(policy_loss(logits, 1, u, cm, correct=False)),
      "(cross-entropy + gamma)")
