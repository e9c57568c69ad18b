"""Analytic compute accounting over layer graphs.

A layer graph is an ordered list of layer descriptors. MAC, parameter, and
activation-byte counts are closed-form functions of the descriptors, never of
array contents, so conditional accounting under a decision row is exact.

Closed forms per layer kind (biases never add MACs):
  conv2d           out_h * out_w * out_ch * in_ch * kh * kw
  conv1d           out_len * out_ch * in_ch * k
  linear           in_dim * out_dim * applications
  recurrent_cell   4 * hidden * (in_dim + hidden) * steps   (x2 if bidirectional)
  attention        4 * seq * d_model^2 + 2 * seq^2 * d_model
  pool, rectify    0

Channelwise normalisation folded into a conv (`norm_affine`) adds 2*out_ch
parameters and no MACs, matching inference-time weight folding. A descriptor
with `params_counted: false` reuses another descriptor's weights (e.g. a
shared trunk applied once per frame slot) and contributes no parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GraphError

GRAPH_FORMAT = "adaptsense.graph.v1"

LAYER_KINDS = ("conv1d", "conv2d", "pool", "rectify", "linear", "recurrent_cell", "attention")

_REQUIRED_ATTRS = {
    "conv2d": ("in_ch", "out_ch", "kh", "kw", "out_h", "out_w"),
    "conv1d": ("in_ch", "out_ch", "k", "out_len"),
    "linear": ("in_dim", "out_dim"),
    "recurrent_cell": ("in_dim", "hidden", "steps"),
    "attention": ("seq_len", "d_model"),
    "pool": (),
    "rectify": (),
}


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    `gate` names the action index that enables the layer (None = always on),
    `out_elements` is the layer's output size used for byte accounting, and
    `branch` groups layers for chain-consistency checks.
    """

    name: str
    kind: str
    out_elements: int
    gate: int | None = None
    branch: str = ""
    attrs: dict = field(default_factory=dict)

    def macs(self) -> int:
        a = self.attrs
        if self.kind == "conv2d":
            return a["out_h"] * a["out_w"] * a["out_ch"] * a["in_ch"] * a["kh"] * a["kw"]
        if self.kind == "conv1d":
            return a["out_len"] * a["out_ch"] * a["in_ch"] * a["k"]
        if self.kind == "linear":
            return a["in_dim"] * a["out_dim"] * a.get("applications", 1)
        if self.kind == "recurrent_cell":
            per_step = 4 * a["hidden"] * (a["in_dim"] + a["hidden"])
            total = per_step * a["steps"]
            return 2 * total if a.get("bidirectional", False) else total
        if self.kind == "attention":
            n, d = a["seq_len"], a["d_model"]
            return 4 * n * d * d + 2 * n * n * d
        return 0

    def params(self) -> int:
        a = self.attrs
        if not a.get("params_counted", True):
            return 0
        bias = a.get("bias", True)
        if self.kind == "conv2d":
            n = a["out_ch"] * a["in_ch"] * a["kh"] * a["kw"] + (a["out_ch"] if bias else 0)
            return n + (2 * a["out_ch"] if a.get("norm_affine", False) else 0)
        if self.kind == "conv1d":
            n = a["out_ch"] * a["in_ch"] * a["k"] + (a["out_ch"] if bias else 0)
            return n + (2 * a["out_ch"] if a.get("norm_affine", False) else 0)
        if self.kind == "linear":
            return a["in_dim"] * a["out_dim"] + (a["out_dim"] if bias else 0)
        if self.kind == "recurrent_cell":
            h, d = a["hidden"], a["in_dim"]
            n = 4 * h * (d + h) + (8 * h if bias else 0)  # separate input/hidden biases
            return 2 * n if a.get("bidirectional", False) else n
        if self.kind == "attention":
            d = a["d_model"]
            return 4 * (d * d + (d if bias else 0))
        return 0


@dataclass
class LayerGraph:
    layers: list[LayerSpec]
    n_actions: int | None = None

    def validate(self) -> None:
        prev_by_branch: dict[str, LayerSpec] = {}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise GraphError(f"{layer.name}: unknown layer kind {layer.kind!r}")
            for attr in _REQUIRED_ATTRS[layer.kind]:
                if attr not in layer.attrs:
                    raise GraphError(f"{layer.name}: {layer.kind} descriptor missing {attr!r}")
                if layer.attrs[attr] < 1:
                    raise GraphError(f"{layer.name}: {attr} must be positive")
            if layer.out_elements < 0:
                raise GraphError(f"{layer.name}: negative out_elements")
            if layer.gate is not None:
                if self.n_actions is None or not 0 <= layer.gate < self.n_actions:
                    raise GraphError(
                        f"{layer.name}: gate {layer.gate} outside action range {self.n_actions}")
            prev = prev_by_branch.get(layer.branch)
            if prev is not None:
                self._check_chain(prev, layer)
            prev_by_branch[layer.branch] = layer

    @staticmethod
    def _check_chain(prev: LayerSpec, cur: LayerSpec) -> None:
        out_ch = prev.attrs.get("out_ch")
        in_ch = cur.attrs.get("in_ch")
        if out_ch is not None and in_ch is not None and out_ch != in_ch:
            raise GraphError(
                f"{cur.name}: expects {in_ch} input channels but {prev.name} emits {out_ch}")
        if cur.kind == "linear" and prev.out_elements and cur.attrs["in_dim"] != prev.out_elements:
            raise GraphError(
                f"{cur.name}: expects {cur.attrs['in_dim']} inputs but "
                f"{prev.name} emits {prev.out_elements}")

    def _executed(self, decisions) -> list[LayerSpec]:
        if decisions is None:
            return list(self.layers)
        row = np.asarray(decisions).reshape(-1)
        if self.n_actions is not None and row.size != self.n_actions:
            raise GraphError(f"decision row has {row.size} entries, graph expects {self.n_actions}")
        return [l for l in self.layers if l.gate is None or row[l.gate]]


def count_macs(graph: LayerGraph, decisions=None) -> int:
    """Total MACs of the executed layers; `decisions=None` means all-on."""
    graph.validate()
    return sum(l.macs() for l in graph._executed(decisions))


def count_params(graph: LayerGraph) -> int:
    graph.validate()
    return sum(l.params() for l in graph.layers)


def activation_bytes(graph: LayerGraph, decisions=None) -> int:
    """Sum over executed layers of output elements x 4 bytes."""
    graph.validate()
    return sum(4 * l.out_elements for l in graph._executed(decisions))


@dataclass(frozen=True)
class EnergyCoefficients:
    joules_per_mac: float = 4.6e-12
    joules_per_byte_moved: float = 2.5e-10
    watts_per_sensor: tuple[float, ...] = (0.05, 0.05, 0.05)

    def validate(self) -> None:
        if self.joules_per_mac < 0 or self.joules_per_byte_moved < 0:
            raise ConfigError("energy coefficients must be non-negative")
        if any(w < 0 for w in self.watts_per_sensor):
            raise ConfigError("sensor wattages must be non-negative")


def estimate_energy(macs: float, bytes_moved: float, sensor_seconds,
                    coeffs: EnergyCoefficients, enforce_floor: bool = True) -> float:
    """Three-factor energy model: compute + memory traffic + sensor on-time.

    With the floor enabled, any modality that is active at all is billed for
    at least one second of capture.
    """
    coeffs.validate()
    seconds = np.asarray(sensor_seconds, dtype=np.float64)
    if macs < 0 or bytes_moved < 0 or np.any(seconds < 0):
        raise ConfigError("energy inputs must be non-negative")
    if seconds.size != len(coeffs.watts_per_sensor):
        raise ConfigError("sensor schedule length must match the number of sensor wattages")
    if enforce_floor:
        seconds = np.where(seconds > 0, np.maximum(seconds, 1.0), 0.0)
    sensor_j = float(np.dot(seconds, np.asarray(coeffs.watts_per_sensor)))
    return macs * coeffs.joules_per_mac + bytes_moved * coeffs.joules_per_byte_moved + sensor_j


def sensor_schedule(decisions: np.ndarray, segment_seconds: float = 1.0,
                    min_capture: float = 1.0, enforce_floor: bool = True) -> np.ndarray:
    """Per-action active seconds implied by a (T, K) decision matrix.

    Contiguous selected runs are billed at segment_seconds each; with the
    floor enabled every contiguous activation captures at least min_capture
    seconds.
    """
    d = np.asarray(decisions)
    if d.ndim != 2:
        raise DataError("decisions must be a (T, K) matrix")
    seconds = np.zeros(d.shape[1], dtype=np.float64)
    for k in range(d.shape[1]):
        run = 0
        for t in range(d.shape[0] + 1):
            on = t < d.shape[0] and d[t, k]
            if on:
                run += 1
            elif run:
                dur = run * segment_seconds
                seconds[k] += max(dur, min_capture) if enforce_floor else dur
                run = 0
    return seconds


def usage_report(traces, graph: LayerGraph, coeffs: EnergyCoefficients | None = None,
                 overhead_macs: int = 0, overhead_bytes: int = 0,
                 segment_seconds: float = 1.0) -> dict:
    """Aggregate decision traces into usage fractions and mean per-segment cost.

    `traces` is a sequence of (T, K) decision matrices (one per episode).
    Overhead terms account for ungated machinery (e.g. an always-on policy
    network) that is not part of `graph`.
    """
    traces = [np.asarray(t) for t in traces]
    if not traces or sum(t.shape[0] for t in traces) == 0:
        raise DataError("decision traces are empty")
    k = traces[0].shape[1]
    if coeffs is None:
        coeffs = EnergyCoefficients(watts_per_sensor=(0.05,) * k)
    selected = np.zeros(k, dtype=np.int64)
    total_segments = 0
    total_macs = 0
    total_bytes = 0
    total_energy = 0.0
    for trace in traces:
        if trace.shape[1] != k:
            raise DataError("inconsistent action count across traces")
        selected += trace.sum(axis=0).astype(np.int64)
        total_segments += trace.shape[0]
        ep_macs = overhead_macs * trace.shape[0]
        ep_bytes = overhead_bytes * trace.shape[0]
        for row in trace:
            ep_macs += count_macs(graph, row)
            ep_bytes += activation_bytes(graph, row)
        seconds = sensor_schedule(trace, segment_seconds=segment_seconds)
        total_energy += estimate_energy(ep_macs, ep_bytes, seconds, coeffs)
        total_macs += ep_macs
        total_bytes += ep_bytes
    return {
        "usage_fractions": (selected / total_segments).tolist(),
        "mean_macs_per_segment": total_macs / total_segments,
        "mean_bytes_per_segment": total_bytes / total_segments,
        "mean_energy_per_segment_j": total_energy / total_segments,
        "segments": total_segments,
    }


def graph_to_json(graph: LayerGraph, path: str | Path | None = None) -> str:
    payload = {
        "format": GRAPH_FORMAT,
        "n_actions": graph.n_actions,
        "layers": [
            {"name": l.name, "kind": l.kind, "out_elements": l.out_elements,
             "gate": l.gate, "branch": l.branch, "attrs": l.attrs}
            for l in graph.layers
        ],
    }
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def graph_from_json(source: str | Path) -> LayerGraph:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith(".json")):
        source = Path(source).read_text()
    payload = json.loads(source)
    if payload.get("format") != GRAPH_FORMAT:
        raise DataError(f"unsupported graph format {payload.get('format')!r}")
    layers = [LayerSpec(name=l["name"], kind=l["kind"], out_elements=l["out_elements"],
                        gate=l["gate"], branch=l.get("branch", ""), attrs=dict(l["attrs"]))
              for l in payload["layers"]]
    graph = LayerGraph(layers=layers, n_actions=payload.get("n_actions"))
    graph.validate()
    return graph
