#!/usr/bin/env python3
# Analytic compute accounting: MAC and parameter counts from closed-form
# layer descriptors, conditional on which actions the policy selected, plus
# the three-factor energy model (compute, memory traffic, sensor on-time).

import numpy as np

from adaptsense import (ActionSpace, DatasetConfig, EnergyCoefficients, PolicyController,
                        StudentModel, activation_bytes, count_macs, count_params,
                        estimate_energy, generate_dataset, graph_from_json, graph_to_json,
                        oracle_policy, sensor_schedule, usage_report)

config = DatasetConfig()
student = StudentModel(config, seed=0)
graph = student.layer_graph()

##############################################################################
# Closed forms, not profilers: a same-padded 3x3 conv from 1 to 8 channels on
# a 16x16 input is 16*16*8*1*9 = 18,432 MACs, exactly.

first_conv = graph.layers[0]
print(f"{first_conv.name}: {first_conv.macs():,} MACs, {first_conv.params()} params")
print(f"student all-on: {count_macs(graph):,} MACs, {count_params(graph):,} params, "
      f"{activation_bytes(graph):,} activation bytes")

##############################################################################
# Conditional accounting: deselected branches cost nothing, and the gated
# branches partition the total exactly.

for row, name in (([1, 0, 0], "visual only"), ([0, 1, 0], "audio only"),
                  ([0, 0, 1], "behavior only"), ([0, 1, 1], "audio+behavior")):
    print(f"  {name:15s} {count_macs(graph, row):9,} MACs")
ungated = count_macs(graph, [0, 0, 0])
parts = [count_macs(graph, r) - ungated for r in np.eye(3, dtype=int).tolist()]
print(f"partition check: {sum(parts) + ungated:,} == {count_macs(graph):,}")

##############################################################################
# The policy controller itself is always-on overhead, about 11% of the all-on
# student here.

policy = PolicyController(config, ActionSpace.modalities(), seed=0)
overhead = count_macs(policy.layer_graph())
print(f"\ncontroller overhead: {overhead:,} MACs "
      f"({overhead / count_macs(graph):.1%} of all-on)")

##############################################################################
# Energy = MACs * J/MAC + bytes * J/byte + sensor-seconds * W, with a
# one-second capture floor per contiguous activation. At desk scale the
# sensors dominate, which is exactly why turning modalities off pays.

episodes = generate_dataset(DatasetConfig(n_episodes=50, seed=1))
traces = [oracle_policy(ep) for ep in episodes]
coeffs = EnergyCoefficients()
report = usage_report(traces, graph, coeffs=coeffs)
print(f"\noracle-policy usage fractions: "
      f"{[f'{u:.3f}' for u in report['usage_fractions']]}")
print(f"mean per-segment: {report['mean_macs_per_segment']:,.0f} MACs, "
      f"{report['mean_energy_per_segment_j']:.4f} J")
all_on = usage_report([np.ones_like(t) for t in traces], graph, coeffs=coeffs)
print(f"all-on per-segment: {all_on['mean_macs_per_segment']:,.0f} MACs, "
      f"{all_on['mean_energy_per_segment_j']:.4f} J")

seconds = sensor_schedule(traces[0])
print(f"sensor seconds for episode 0 (floored per activation): {seconds.tolist()}")
print(f"energy for one episode: "
      f"{estimate_energy(count_macs(graph), activation_bytes(graph), seconds, coeffs):.4f} J")

##############################################################################
# Graphs serialise to JSON ("adaptsense.graph.v1") so external tooling can
# audit the accounting; channel- and frame-level action spaces give per-
# channel and per-frame-slot gating.

text = graph_to_json(graph)
print(f"\ngraph JSON round trip: {count_macs(graph_from_json(text)):,} MACs")
chan_graph = student.layer_graph("channel_select")
print("audio MACs by channel subset:",
      {k: f"{count_macs(chan_graph, [1] * k + [0] * (4 - k)) - count_macs(chan_graph, [0] * 4):,}"
       for k in (1, 2, 4)})
