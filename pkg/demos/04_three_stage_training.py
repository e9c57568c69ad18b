#!/usr/bin/env python3
# The full pipeline at demo scale: stage 1 distils the student with all
# modalities on, stage 2 trains the selection policy against the frozen
# student, stage 3 fine-tunes both jointly. Afterwards the learned policy is
# compared against the all-on / random / heuristic / oracle baselines and
# evaluated under audio noise. Takes about half a minute on one core.

import tempfile
from pathlib import Path

from adaptsense import (DatasetConfig, ExperimentConfig, TrainConfig, evaluate,
                        generate_dataset, run_pipeline, split_episodes)
from adaptsense.pipeline import load_run_models
from adaptsense.synthetic import SignalBank, TemplateClassifier

config = ExperimentConfig(
    dataset=DatasetConfig(n_episodes=60, seed=0),
    train=TrainConfig(seed=0, epochs_stage1=24, epochs_stage2=12, epochs_stage3=16),
    lam=(1.0, 0.05, 0.03), gamma=10.0)
episodes = generate_dataset(config.dataset)

with tempfile.TemporaryDirectory() as tmp:
    run_dir = Path(tmp) / "run"
    report = run_pipeline(config, episodes, run_dir)

    print("\npolicy variants on the clean test split:")
    print(f"{'variant':10s} {'acc':>6s} {'MACs/seg':>9s} {'energy(J)':>9s}  usage "
          f"[visual, audio, behavior]")
    for mode, ev in report["evals"].items():
        usage = ", ".join(f"{u:.2f}" for u in ev["usage_fractions"])
        print(f"{mode:10s} {ev['accuracy']:6.3f} {ev['mean_macs_per_segment']:9.0f} "
              f"{ev['mean_energy_per_segment_j']:9.4f}  [{usage}]")

    learned = report["evals"]["learned"]
    all_on = report["evals"]["all_on"]
    print(f"\nlearned policy uses {learned['mean_macs_per_segment'] / all_on['mean_macs_per_segment']:.0%} "
          f"of the all-on compute at {learned['accuracy'] - all_on['accuracy']:+.3f} accuracy")
    print(f"stage-2-only accuracy was {report['stage2_eval']['accuracy']:.3f}; "
          f"joint fine-tuning reached {learned['accuracy']:.3f}")

    ##########################################################################
    # Noise adaptivity: corrupting the audio at evaluation time makes the
    # policy lean harder on the visual stream, the compensation behaviour the
    # whole design is after.

    student, policy, teacher = load_run_models(config, run_dir)
    clf = TemplateClassifier(SignalBank(config.dataset))
    test = split_episodes(episodes)["test"]
    print("\naudio corruption sweep (learned policy):")
    for snr in (None, 0.0, -10.0):
        rep = evaluate(test, student, policy, config.cost_model(), config.train,
                       mode="learned", snr_db=snr, classifier=clf)
        label = "clean" if snr is None else f"{snr:+.0f} dB"
        print(f"  {label:7s} accuracy {rep.accuracy:.3f}, visual usage "
              f"{rep.usage_fractions[0]:.3f}")
