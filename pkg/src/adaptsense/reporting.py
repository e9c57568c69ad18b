"""Render plots and a markdown summary from run or ablation directories.

Read-only over its inputs; outputs are rewritten deterministically.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402


def _load_rows(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


def render(target: Path, out_dir: Path, plots: bool = False) -> list[Path]:
    target = Path(target)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if (target / "ablation.csv").exists():
        return _render_ablation(target, out_dir, plots)
    if (target / "report.json").exists():
        return _render_run(target, out_dir, plots)
    raise DataError(f"{target} holds neither report.json nor ablation.csv")


def _render_run(run_dir: Path, out_dir: Path, plots: bool) -> list[Path]:
    report = json.loads((run_dir / "report.json").read_text())
    written = []
    lines = [f"# Run summary: {run_dir.name}", "",
             f"Task: `{report['task']}`  Seed: {report['seed']}", "",
             "| policy | accuracy | MACs/segment | energy (J/segment) | usage |",
             "|---|---|---|---|---|"]
    for mode, ev in sorted(report["evals"].items()):
        usage = ", ".join(f"{u:.3f}" for u in ev["usage_fractions"])
        lines.append(f"| {mode} | {ev['accuracy']:.4f} | {ev['mean_macs_per_segment']:.0f} "
                     f"| {ev['mean_energy_per_segment_j']:.3e} | {usage} |")
    if report.get("stage2_eval"):
        ev = report["stage2_eval"]
        lines += ["", f"Stage-2 (frozen student) accuracy: {ev['accuracy']:.4f} "
                      f"at {ev['mean_macs_per_segment']:.0f} MACs/segment"]
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)

    if plots:
        fig, ax = plt.subplots(figsize=(5, 4))
        for mode, ev in sorted(report["evals"].items()):
            ax.scatter(ev["mean_energy_per_segment_j"], ev["accuracy"], label=mode)
        ax.set_xlabel("energy per segment (J)")
        ax.set_ylabel("accuracy")
        ax.set_xscale("log")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "accuracy_vs_energy.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        losses_csv = run_dir / "losses.csv"
        if losses_csv.exists():
            rows = _load_rows(losses_csv)
            if rows:
                fig, ax = plt.subplots(figsize=(5, 4))
                steps = [int(r["step"]) for r in rows]
                for key in ("l1", "kd", "gt", "phi"):
                    ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=0.8)
                ax.set_xlabel("step")
                ax.set_ylabel("loss")
                ax.set_yscale("log")
                ax.legend(fontsize=8)
                fig.tight_layout()
                path = out_dir / "loss_curves.png"
                fig.savefig(path, dpi=120)
                plt.close(fig)
                written.append(path)

        snr_points = []
        evals_dir = run_dir / "evals"
        if evals_dir.exists():
            for f in sorted(evals_dir.glob("eval_*_snr*.json")):
                ev = json.loads(f.read_text())
                if ev.get("snr_db") is not None and ev["usage_fractions"]:
                    snr_points.append((ev["snr_db"], ev["usage_fractions"][0],
                                       ev["accuracy"]))
        if snr_points:
            snr_points.sort()
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.plot([p[0] for p in snr_points], [p[1] for p in snr_points],
                    marker="o", label="visual usage")
            ax.plot([p[0] for p in snr_points], [p[2] for p in snr_points],
                    marker="s", label="accuracy")
            ax.set_xlabel("audio SNR (dB)")
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out_dir / "usage_over_snr.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written


def _render_ablation(abl_dir: Path, out_dir: Path, plots: bool) -> list[Path]:
    rows = _load_rows(abl_dir / "ablation.csv")
    if not rows:
        raise DataError(f"{abl_dir}/ablation.csv has no rows")
    written = []
    cols = list(rows[0].keys())
    lines = [f"# Ablation summary: {abl_dir.name}", "",
             "| " + " | ".join(cols) + " |",
             "|" + "---|" * len(cols)]
    for row in rows:
        lines.append("| " + " | ".join(str(row[c]) for c in cols) + " |")
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)

    if plots:
        fig, ax = plt.subplots(figsize=(5, 4))
        xs = [float(r["mean_energy_j"]) for r in rows]
        ys = [float(r["accuracy"]) for r in rows]
        ax.scatter(xs, ys)
        for r, x, y in zip(rows, xs, ys):
            ax.annotate(r["point"], (x, y), fontsize=7)
        ax.set_xlabel("energy per segment (J)")
        ax.set_ylabel("accuracy")
        fig.tight_layout()
        path = out_dir / "accuracy_vs_energy.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
