"""Network scenario domain types and the index queries used by message passing.

A scenario is immutable once built. All invariants are checked in
``NetworkScenario.__post_init__`` so a scenario object either exists in a
valid state or was never created.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    DanglingReference,
    DuplicatePortInPath,
    EmptyPath,
    InvalidScenario,
    NonPositiveLabel,
    UnknownDevice,
    UnknownFlow,
    UnknownLinkPort,
)

N_BINS = 1000
BIN_WIDTH_S = 0.001


class DeviceKind(str, Enum):
    ROUTER = "Router"
    SWITCH = "Switch"


class Distribution(str, Enum):
    CBR = "CBR"
    MB = "MB"


@dataclass(frozen=True)
class Device:
    id: str
    kind: DeviceKind
    port_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        object.__setattr__(self, "port_ids", tuple(self.port_ids))
        if not self.port_ids:
            raise InvalidScenario(f"device {self.id!r} has no ports")
        if len(set(self.port_ids)) != len(self.port_ids):
            raise InvalidScenario(f"device {self.id!r} lists a port twice")


@dataclass(frozen=True)
class LinkPort:
    """A physical link fused with the unique device port it attaches to."""

    id: str
    device_id: str
    bandwidth_bps: float
    propagation_delay_s: float = 0.0

    def __post_init__(self):
        bw, prop = float(self.bandwidth_bps), float(self.propagation_delay_s)
        if not (math.isfinite(bw) and bw > 0):
            raise InvalidScenario(f"linkport {self.id!r}: bandwidth must be positive, got {bw}")
        if not (math.isfinite(prop) and prop >= 0):
            raise InvalidScenario(f"linkport {self.id!r}: negative propagation delay {prop}")
        object.__setattr__(self, "bandwidth_bps", bw)
        object.__setattr__(self, "propagation_delay_s", prop)


def _zero_counts():
    return (0,) * N_BINS


@dataclass(frozen=True)
class Flow:
    """A unidirectional packet stream over a fixed path of linkports.

    ``packet_counts`` holds the number of packets sent in each 1 ms bin of the
    first captured second; the bit volume per bin is derived from the constant
    packet size, so the (count, bits) pairs are consistent by construction.
    """

    id: str
    path: tuple[str, ...]
    avg_load_bps: float
    num_packets: int
    packet_size_bits: float
    packet_counts: tuple[int, ...] = field(default_factory=_zero_counts)
    distribution: Distribution | None = None

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(self.path))
        if not self.path:
            raise EmptyPath(f"flow {self.id!r} has an empty path")
        if len(set(self.path)) != len(self.path):
            raise DuplicatePortInPath(f"flow {self.id!r} visits a linkport twice: {self.path}")
        load, size = float(self.avg_load_bps), float(self.packet_size_bits)
        if not (math.isfinite(load) and load > 0):
            raise InvalidScenario(f"flow {self.id!r}: avg_load_bps must be positive")
        if not (math.isfinite(size) and size > 0):
            raise InvalidScenario(f"flow {self.id!r}: packet_size_bits must be positive")
        if int(self.num_packets) != self.num_packets or self.num_packets < 1:
            raise InvalidScenario(f"flow {self.id!r}: num_packets must be a positive integer")
        counts = tuple(int(c) for c in self.packet_counts)
        if len(counts) != N_BINS:
            raise InvalidScenario(f"flow {self.id!r}: expected {N_BINS} bins, got {len(counts)}")
        if min(counts) < 0:
            raise InvalidScenario(f"flow {self.id!r}: negative bin count")
        if sum(counts) > self.num_packets:
            raise InvalidScenario(f"flow {self.id!r}: binned packets exceed num_packets")
        object.__setattr__(self, "avg_load_bps", load)
        object.__setattr__(self, "packet_size_bits", size)
        object.__setattr__(self, "num_packets", int(self.num_packets))
        object.__setattr__(self, "packet_counts", counts)
        if self.distribution is not None:
            object.__setattr__(self, "distribution", Distribution(self.distribution))

    @property
    def packet_bins(self) -> np.ndarray:
        """(N_BINS, 2) array of (packet count, bits) per millisecond bin."""
        counts = np.asarray(self.packet_counts, dtype=np.float64)
        return np.stack([counts, counts * self.packet_size_bits], axis=1)


@dataclass(frozen=True)
class NetworkScenario:
    devices: tuple[Device, ...]
    linkports: tuple[LinkPort, ...]
    flows: tuple[Flow, ...]
    labels: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "linkports", tuple(self.linkports))
        object.__setattr__(self, "flows", tuple(self.flows))
        devices = _unique_index(self.devices, "device")
        linkports = _unique_index(self.linkports, "linkport")
        flows = _unique_index(self.flows, "flow")

        for dev in self.devices:
            for pid in dev.port_ids:
                lp = linkports.get(pid)
                if lp is None:
                    raise DanglingReference(f"device {dev.id!r} lists unknown port {pid!r}")
                if lp.device_id != dev.id:
                    raise InvalidScenario(
                        f"port {pid!r} listed by device {dev.id!r} belongs to {lp.device_id!r}"
                    )
        for lp in self.linkports:
            dev = devices.get(lp.device_id)
            if dev is None:
                raise DanglingReference(f"linkport {lp.id!r} references unknown device {lp.device_id!r}")
            if lp.id not in dev.port_ids:
                raise DanglingReference(f"linkport {lp.id!r} is not listed by device {dev.id!r}")
        for fl in self.flows:
            for pid in fl.path:
                if pid not in linkports:
                    raise DanglingReference(f"flow {fl.id!r} path references unknown linkport {pid!r}")

        if self.labels is not None:
            labels = tuple(float(x) for x in self.labels)
            if len(labels) != len(self.flows):
                raise InvalidScenario(f"{len(labels)} labels for {len(self.flows)} flows")
            for fl, y in zip(self.flows, labels):
                if not (math.isfinite(y) and y > 0):
                    raise NonPositiveLabel(f"flow {fl.id!r} has non-positive label {y}")
            object.__setattr__(self, "labels", labels)

        object.__setattr__(self, "_devices", devices)
        object.__setattr__(self, "_linkports", linkports)
        object.__setattr__(self, "_flows", flows)
        through: dict[str, list[tuple[str, int]]] = {lp.id: [] for lp in self.linkports}
        for fl in self.flows:
            for pos, pid in enumerate(fl.path):
                through[pid].append((fl.id, pos))
        object.__setattr__(self, "_through", {k: sorted(v) for k, v in through.items()})

    # lookups
    def device(self, device_id: str) -> Device:
        try:
            return self._devices[device_id]
        except KeyError:
            raise UnknownDevice(device_id) from None

    def linkport(self, linkport_id: str) -> LinkPort:
        try:
            return self._linkports[linkport_id]
        except KeyError:
            raise UnknownLinkPort(linkport_id) from None

    def flow(self, flow_id: str) -> Flow:
        try:
            return self._flows[flow_id]
        except KeyError:
            raise UnknownFlow(flow_id) from None

    def label_of(self, flow_id: str) -> float | None:
        if self.labels is None:
            return None
        return self.labels[self.flows.index(self.flow(flow_id))]

    def with_labels(self, labels: Sequence[float] | None) -> NetworkScenario:
        return NetworkScenario(self.devices, self.linkports, self.flows, labels)


def _unique_index(items, what):
    index = {}
    for item in items:
        if item.id in index:
            raise InvalidScenario(f"duplicate {what} id {item.id!r}")
        index[item.id] = item
    return index


def build_scenario(devices, linkports, flows, labels=None) -> NetworkScenario:
    """Validate raw component lists and assemble a scenario."""
    return NetworkScenario(tuple(devices), tuple(linkports), tuple(flows),
                           None if labels is None else tuple(labels))


def flows_through(scenario: NetworkScenario, linkport_id: str) -> list[tuple[str, int]]:
    """(flow_id, position) pairs crossing ``linkport_id``, sorted."""
    scenario.linkport(linkport_id)
    return list(scenario._through[linkport_id])


def ports_of_device(scenario: NetworkScenario, device_id: str) -> list[str]:
    return list(scenario.device(device_id).port_ids)


def path_hops(scenario: NetworkScenario, flow_id: str) -> list[tuple[str, str]]:
    fl = scenario.flow(flow_id)
    return [(pid, scenario.linkport(pid).device_id) for pid in fl.path]


def transmission_delay(scenario: NetworkScenario, flow: Flow) -> float:
    return sum(flow.packet_size_bits / scenario.linkport(p).bandwidth_bps for p in flow.path)


def propagation_delay(scenario: NetworkScenario, flow: Flow) -> float:
    return sum(scenario.linkport(p).propagation_delay_s for p in flow.path)
