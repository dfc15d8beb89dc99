"""Packet binning, min-max feature normalization and dataset file I/O.

File format
-----------
A scenario file is a JSON document (``format: "tracegnn-scenario"``) whose
field names mirror the domain types. Units: delays in seconds, rates in
bits/second, sizes in bits. Reals are written with Python's shortest
round-trip repr, so ``load_scenario(save_scenario(s)) == s`` bit for bit.
Per-flow bins are stored as the 1000 packet counts of the first captured
second; bits per bin are recomputed from the flow's packet size.

A dataset directory holds scenario files plus ``manifest.json`` listing the
files belonging to each split (``train``, ``validation``, ``test``).

Bin features are normalized with a single global min/max fitted over every
bin of every training flow (not per flow).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataset, IoError, NegativeTimestamp, ParseError, UnknownFeature
from .scenario import BIN_WIDTH_S, N_BINS, Device, Flow, LinkPort, NetworkScenario

SCENARIO_FORMAT = "tracegnn-scenario"
MANIFEST_FORMAT = "tracegnn-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")

FEATURES = ("bandwidth", "avg_load", "num_packets", "packet_size", "bin_count", "bin_bits")


@dataclass(frozen=True)
class PacketRecord:
    timestamp_s: float
    size_bits: float

    def __post_init__(self):
        if self.timestamp_s < 0:
            raise NegativeTimestamp(f"packet timestamp {self.timestamp_s} < 0")
        if not self.size_bits > 0:
            raise ValueError(f"packet size must be positive, got {self.size_bits}")


def bin_counts(timestamps) -> np.ndarray:
    """Packet counts per 1 ms bin over the first second; later packets are dropped."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size and ts.min() < 0:
        raise NegativeTimestamp(f"packet timestamp {ts.min()} < 0")
    ts = ts[ts < N_BINS * BIN_WIDTH_S]
    # floor(t / 0.001) can land one bin low/high at exact boundaries; clamp by the
    # half-open interval definition
    k = np.floor(ts / BIN_WIDTH_S).astype(np.int64)
    k += (k + 1) * BIN_WIDTH_S <= ts
    k -= k * BIN_WIDTH_S > ts
    return np.bincount(np.clip(k, 0, N_BINS - 1), minlength=N_BINS).astype(np.int64)


def bin_packets(packets: Sequence[PacketRecord], packet_size_bits: float) -> np.ndarray:
    """(N_BINS, 2) array of (count, bits) per millisecond of the first second."""
    for p in packets:
        if p.timestamp_s < 0:
            raise NegativeTimestamp(f"packet timestamp {p.timestamp_s} < 0")
    counts = bin_counts([p.timestamp_s for p in packets]).astype(np.float64)
    return np.stack([counts, counts * float(packet_size_bits)], axis=1)


@dataclass(frozen=True)
class NormStats:
    ranges: dict[str, tuple[float, float]]

    def __post_init__(self):
        for name, (lo, hi) in self.ranges.items():
            if not lo <= hi:
                raise ValueError(f"feature {name!r}: min {lo} > max {hi}")

    def to_dict(self) -> dict:
        return {k: [lo, hi] for k, (lo, hi) in sorted(self.ranges.items())}

    @classmethod
    def from_dict(cls, data: dict) -> NormStats:
        return cls({k: (float(v[0]), float(v[1])) for k, v in data.items()})


def feature_values(scenario: NetworkScenario) -> dict[str, np.ndarray]:
    """Every raw occurrence of each normalized feature in one scenario."""
    flows = scenario.flows
    bins = [f.packet_bins for f in flows]
    return {
        "bandwidth": np.array([lp.bandwidth_bps for lp in scenario.linkports]),
        "avg_load": np.array([f.avg_load_bps for f in flows]),
        "num_packets": np.array([f.num_packets for f in flows], dtype=np.float64),
        "packet_size": np.array([f.packet_size_bits for f in flows]),
        "bin_count": np.concatenate([b[:, 0] for b in bins]) if bins else np.empty(0),
        "bin_bits": np.concatenate([b[:, 1] for b in bins]) if bins else np.empty(0),
    }


def fit_normalization(training_scenarios: Iterable[NetworkScenario]) -> NormStats:
    lo = {k: math.inf for k in FEATURES}
    hi = {k: -math.inf for k in FEATURES}
    n_flows = 0
    for sc in training_scenarios:
        n_flows += len(sc.flows)
        for k, v in feature_values(sc).items():
            if v.size:
                lo[k] = min(lo[k], float(v.min()))
                hi[k] = max(hi[k], float(v.max()))
    if n_flows == 0:
        raise EmptyDataset("cannot fit normalization without any flows")
    return NormStats({k: (lo[k], hi[k]) for k in FEATURES})


def apply_normalization(value, feature: str, stats: NormStats):
    """Min-max scale into [0, 1]; a degenerate range maps to 0, outliers clamp."""
    try:
        lo, hi = stats.ranges[feature]
    except KeyError:
        raise UnknownFeature(feature) from None
    x = np.asarray(value, dtype=np.float64)
    if hi == lo:
        out = np.zeros_like(x)
    else:
        with np.errstate(over="ignore"):  # tiny ranges overflow to inf, which clamps correctly
            out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- file I/O

def scenario_to_dict(scenario: NetworkScenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": FORMAT_VERSION,
        "devices": [
            {"id": d.id, "kind": d.kind.value, "port_ids": list(d.port_ids)}
            for d in scenario.devices
        ],
        "linkports": [
            {"id": lp.id, "device_id": lp.device_id, "bandwidth_bps": lp.bandwidth_bps,
             "propagation_delay_s": lp.propagation_delay_s}
            for lp in scenario.linkports
        ],
        "flows": [
            {"id": f.id, "path": list(f.path), "avg_load_bps": f.avg_load_bps,
             "num_packets": f.num_packets, "packet_size_bits": f.packet_size_bits,
             "distribution": None if f.distribution is None else f.distribution.value,
             "packet_counts": list(f.packet_counts)}
            for f in scenario.flows
        ],
        "labels": None if scenario.labels is None else list(scenario.labels),
    }


def dumps_scenario(scenario: NetworkScenario) -> str:
    data = scenario_to_dict(scenario)
    # one entity per line keeps files diffable without exploding the 1000 bins
    lines = ["{"]
    lines.append(f'  "format": {json.dumps(data["format"])},')
    lines.append(f'  "version": {data["version"]},')
    for key in ("devices", "linkports", "flows"):
        items = data[key]
        lines.append(f'  "{key}": [')
        for i, item in enumerate(items):
            sep = "," if i < len(items) - 1 else ""
            lines.append("    " + json.dumps(item, allow_nan=False) + sep)
        lines.append("  ],")
    lines.append(f'  "labels": {json.dumps(data["labels"], allow_nan=False)}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_scenario(scenario: NetworkScenario, path) -> None:
    try:
        Path(path).write_text(dumps_scenario(scenario), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


class _Fields:
    """Typed field access with dotted-path error context."""

    def __init__(self, data, where, source):
        if not isinstance(data, dict):
            raise ParseError("expected an object", path=source, location=where)
        self.data, self.where, self.source = data, where, source

    def _err(self, key, msg):
        return ParseError(msg, path=self.source, location=f"{self.where}.{key}" if self.where else key)

    def get(self, key, types, optional=False):
        if key not in self.data:
            if optional:
                return None
            raise self._err(key, "missing field")
        value = self.data[key]
        if optional and value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, types):
            raise self._err(key, f"expected {_type_name(types)}, got {type(value).__name__}")
        return value

    def number(self, key):
        return float(self.get(key, (int, float)))

    def id_list(self, key):
        value = self.get(key, list)
        if not all(isinstance(x, str) for x in value):
            raise self._err(key, "expected a list of string ids")
        return value

    def reject_unknown(self, allowed):
        extra = sorted(set(self.data) - set(allowed))
        if extra:
            raise self._err(extra[0], "unknown field")


def _type_name(types):
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join(t.__name__ for t in types)


def scenario_from_dict(data, source=None) -> NetworkScenario:
    top = _Fields(data, "", source)
    top.reject_unknown(("format", "version", "devices", "linkports", "flows", "labels"))
    if top.get("format", str) != SCENARIO_FORMAT:
        raise ParseError(f"not a {SCENARIO_FORMAT} document", path=source, location="format")
    if top.get("version", int) != FORMAT_VERSION:
        raise ParseError("unsupported version", path=source, location="version")

    devices = []
    for i, raw in enumerate(top.get("devices", list)):
        f = _Fields(raw, f"devices[{i}]", source)
        f.reject_unknown(("id", "kind", "port_ids"))
        kind = f.get("kind", str)
        if kind not in ("Router", "Switch"):
            raise f._err("kind", f"unknown device kind {kind!r}")
        devices.append(Device(f.get("id", str), kind, tuple(f.id_list("port_ids"))))

    linkports = []
    for i, raw in enumerate(top.get("linkports", list)):
        f = _Fields(raw, f"linkports[{i}]", source)
        f.reject_unknown(("id", "device_id", "bandwidth_bps", "propagation_delay_s"))
        linkports.append(LinkPort(f.get("id", str), f.get("device_id", str),
                                  f.number("bandwidth_bps"), f.number("propagation_delay_s")))

    flows = []
    for i, raw in enumerate(top.get("flows", list)):
        f = _Fields(raw, f"flows[{i}]", source)
        f.reject_unknown(("id", "path", "avg_load_bps", "num_packets", "packet_size_bits",
                          "distribution", "packet_counts"))
        counts = f.get("packet_counts", list)
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
            raise f._err("packet_counts", "expected a list of integers")
        dist = f.get("distribution", str, optional=True)
        if dist is not None and dist not in ("CBR", "MB"):
            raise f._err("distribution", f"unknown distribution {dist!r}")
        flows.append(Flow(
            id=f.get("id", str),
            path=tuple(f.id_list("path")),
            avg_load_bps=f.number("avg_load_bps"),
            num_packets=f.get("num_packets", int),
            packet_size_bits=f.number("packet_size_bits"),
            packet_counts=tuple(counts),
            distribution=dist,
        ))

    labels = top.get("labels", list, optional=True)
    if labels is not None:
        if not all(isinstance(y, (int, float)) and not isinstance(y, bool) for y in labels):
            raise ParseError("expected a list of numbers", path=source, location="labels")
        labels = tuple(float(y) for y in labels)
    return NetworkScenario(tuple(devices), tuple(linkports), tuple(flows), labels)


def loads_scenario(text: str, source=None) -> NetworkScenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=source, location=f"line {exc.lineno}, column {exc.colno}") from None
    return scenario_from_dict(data, source)


def load_scenario(path) -> NetworkScenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return loads_scenario(text, source=path)


# ---------------------------------------------------------------- datasets

def write_manifest(directory, splits: dict[str, list[str]], seed=None, generator=None) -> Path:
    for name in splits:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "seed": seed,
        "generator": generator,
        "splits": {name: list(splits.get(name, [])) for name in SPLITS},
    }
    path = Path(directory) / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, location=f"line {exc.lineno}") from None
    if not isinstance(data, dict) or data.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"not a {MANIFEST_FORMAT} manifest", path=path, location="format")
    splits = data.get("splits")
    if not isinstance(splits, dict):
        raise ParseError("missing splits", path=path, location="splits")
    return data


def load_split(directory, split: str) -> list[tuple[str, NetworkScenario]]:
    """(file name, scenario) pairs of one split, in manifest order."""
    manifest = read_manifest(directory)
    names = manifest["splits"].get(split, [])
    return [(name, load_scenario(Path(directory) / name)) for name in names]


def load_dataset(directory) -> dict[str, list[tuple[str, NetworkScenario]]]:
    manifest = read_manifest(directory)
    return {split: [(n, load_scenario(Path(directory) / n)) for n in manifest["splits"].get(split, [])]
            for split in SPLITS}
