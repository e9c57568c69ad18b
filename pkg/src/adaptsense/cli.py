"""Batch command surface: gen-data, train, eval, ablate, report.

Configuration is JSON with full defaults; precedence is flag > file >
default, and the ADAPTSENSE_SEED environment variable overrides both seeds.
Every contract violation exits with status 2 and a single "ERROR: ..." line
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

from .errors import AdaptSenseError, ConfigError, DataError
from .pipeline import (ExperimentConfig, config_from_dict, config_to_dict, input_hash,
                       load_run_models, run_pipeline)
from .synthetic import MODALITIES, generate_dataset, load_dataset, save_dataset
from .training import POLICY_MODES, evaluate, export_decisions_csv


def _load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config {path}: {exc}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = json.loads(value) if value and value[0] in "[{0123456789-tfn\"" else value
    env_seed = os.environ.get("ADAPTSENSE_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"ADAPTSENSE_SEED must be an integer, got {env_seed!r}")
        raw.setdefault("dataset", {})["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed
    return config_from_dict(raw)


def _parse_stages(text: str) -> tuple[int, ...]:
    try:
        stages = tuple(int(s) for s in text.split(",") if s)
    except ValueError:
        raise ConfigError(f"--stages expects a comma list like 1,2,3, got {text!r}")
    if not stages:
        raise ConfigError("--stages must name at least one stage")
    return stages


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.set)
    out = Path(args.out)
    episodes = generate_dataset(cfg.dataset)
    save_dataset(episodes, cfg.dataset, out)
    print(f"wrote {len(episodes)} episodes to {out} "
          f"(hash {input_hash(cfg, (out / 'manifest.json').read_text())[:12]})")
    return 0


def _load_run_config(run_dir: Path) -> ExperimentConfig:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise DataError(f"{run_dir} has no config.json; is it a run directory?")
    return config_from_dict(json.loads(cfg_path.read_text()))


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    data_dir = Path(args.data)
    data_cfg, episodes = load_dataset(data_dir)
    if data_cfg != cfg.dataset:
        raise ConfigError("dataset on disk was generated with a different dataset config; "
                          "regenerate it or align the config")
    stages = _parse_stages(args.stages)
    manifest_text = (data_dir / "manifest.json").read_text()
    report = run_pipeline(cfg, episodes, args.out, stages=stages, resume=args.resume,
                          dataset_manifest_text=manifest_text)
    learned = report["evals"].get("learned", {})
    print(f"run complete: accuracy={learned.get('accuracy'):.4f} "
          f"macs/segment={learned.get('mean_macs_per_segment'):.0f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = _load_run_config(run_dir)
    _, episodes = load_dataset(Path(args.data))
    if args.policy not in POLICY_MODES:
        raise ConfigError(f"unknown policy {args.policy!r}; choose from {POLICY_MODES}")
    student, policy, teacher = load_run_models(cfg, run_dir)
    from .synthetic import SignalBank, TemplateClassifier
    classifier = TemplateClassifier(SignalBank(cfg.dataset))
    episodes = [ep for ep in episodes if ep.split == args.split]
    if not episodes:
        raise DataError(f"no {args.split} episodes in the dataset")
    report = evaluate(episodes, student, policy, cfg.cost_model(), cfg.train,
                      mode=args.policy, snr_db=args.snr, teacher=teacher,
                      classifier=classifier, coeffs=cfg.energy)
    out_dir = Path(args.out) if args.out else run_dir / "evals"
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = args.policy + (f"_snr{args.snr:g}" if args.snr is not None else "")
    (out_dir / f"eval_{tag}.json").write_text(
        json.dumps(report.to_dict(), indent=1, sort_keys=True))
    export_decisions_csv(out_dir / f"decisions_{tag}.csv", [report])
    print(f"{args.policy}: accuracy={report.accuracy:.4f} "
          f"usage={['%.3f' % u for u in report.usage_fractions]} "
          f"macs/segment={report.mean_macs_per_segment:.0f}")
    return 0


_GRID_KEYS = ("lam", "gamma", "alpha", "beta", "eta1", "eta2", "tau_kd", "tau_gumbel")


def _apply_grid_point(base: dict, point: dict) -> dict:
    raw = json.loads(json.dumps(base))
    for key, value in point.items():
        if key == "lam":
            raw["lam"] = value
        elif key == "gamma":
            raw["gamma"] = value
        elif key in ("alpha", "beta", "tau_kd"):
            raw.setdefault("distill", {})[key] = value
            if key == "tau_kd":
                raw.setdefault("train", {})["tau_kd"] = value
        elif key in ("eta1", "eta2"):
            raw.setdefault("train", {})[key] = value
        elif key == "tau_gumbel":
            raw.setdefault("train", {})["tau_gumbel_init"] = value
    return raw


def cmd_ablate(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {args.grid}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed grid JSON: {exc}")
    keys = [k for k in _GRID_KEYS if k in grid]
    unknown = set(grid) - set(_GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    if not keys or any(not grid[k] for k in keys):
        raise ConfigError("ablation grid is empty")
    base_cfg = _load_config(args.config, args.set)
    base_raw = config_to_dict(base_cfg)
    data_dir = Path(args.data)
    _, episodes = load_dataset(data_dir)
    manifest_text = (data_dir / "manifest.json").read_text()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, combo))
        cfg = config_from_dict(_apply_grid_point(base_raw, point))
        run_dir = out / f"point_{i:03d}"
        report = run_pipeline(cfg, episodes, run_dir, dataset_manifest_text=manifest_text)
        learned = report["evals"]["learned"]
        all_on = report["evals"]["all_on"]
        row = {
            "point": i,
            "lam": json.dumps(point.get("lam", list(base_cfg.lam))),
            "gamma": point.get("gamma", base_cfg.gamma),
            "alpha": point.get("alpha", base_cfg.distill.alpha),
            "beta": point.get("beta", base_cfg.distill.beta),
            "eta1": point.get("eta1", base_cfg.train.eta1),
            "eta2": point.get("eta2", base_cfg.train.eta2),
            "tau_kd": point.get("tau_kd", base_cfg.distill.tau_kd),
            "tau_gumbel": point.get("tau_gumbel", base_cfg.train.tau_gumbel_init),
            "accuracy": learned["accuracy"],
            "all_on_accuracy": all_on["accuracy"],
            "mean_macs": learned["mean_macs_per_segment"],
            "all_on_macs": all_on["mean_macs_per_segment"],
            "mean_energy_j": learned["mean_energy_per_segment_j"],
        }
        for m, name in enumerate(MODALITIES):
            row[f"usage_{name}"] = (learned["usage_fractions"][m]
                                    if m < len(learned["usage_fractions"]) else "")
        rows.append(row)
        print(f"point {i}: {point} -> acc={row['accuracy']:.4f} macs={row['mean_macs']:.0f}")

    table = out / "ablation.csv"
    with table.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {table}")
    return 0


def cmd_report(args) -> int:
    from . import reporting

    target = Path(args.run)
    if not target.exists():
        raise DataError(f"no such run or ablation directory: {target}")
    out_dir = Path(args.out) if args.out else target / "report"
    paths = reporting.render(target, out_dir, plots=args.plots)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptsense",
        description="Adaptive multisensory inference: data generation, staged training, "
                    "evaluation, ablation sweeps, and report rendering.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults apply for missing keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set train.lr=0.1")

    p = sub.add_parser("gen-data", help="generate a planted dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", default="1,2,3")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default="learned")
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a hyperparameter grid")
    common(p)
    p.add_argument("--grid", required=True, help="JSON file of grid values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render plots and a markdown summary")
    p.add_argument("--run", required=True, help="run or ablation directory")
    p.add_argument("--out", default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AdaptSenseError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
