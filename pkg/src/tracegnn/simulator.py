"""Synthetic ground truth: topologies, CBR / Multi-Burst traffic and a FIFO
store-and-forward discrete-event simulator with drop-tail port buffers.

Simulator rules
---------------
* A packet entering a port at time ``t`` is dropped if ``buffer_packets``
  packets (queued plus in transmission) are already held there; otherwise it
  starts transmitting at ``max(t, port free time)`` and occupies the port for
  ``size / bandwidth`` seconds.
* After transmission it reaches the next hop ``propagation_delay_s`` later.
* Simultaneous arrivals at a port are served by (time, flow position in the
  skeleton, packet index).
* Flow labels average the end-to-end delay of packets *sent* during the final
  ``capture_window_s`` seconds that were delivered, whenever they arrived.
* Flow features (packet count, load, 1 ms bins of the first captured second)
  come from the same captured send times, measured from the window start.

Generator defaults (synthetic, not measured anywhere): bottleneck utilization
uniform in [0.1, 0.9], Multi-Burst bursts of 5 to 50 packets sent at the
first hop's line rate, 64-packet port buffers.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidSize, IoError, NoDeliveredPackets, ParseError
from .scenario import Device, DeviceKind, Distribution, Flow, LinkPort, NetworkScenario
from .traces import PacketRecord, bin_counts, save_scenario, write_manifest


@dataclass(frozen=True)
class TrafficSpec:
    distribution: Distribution
    avg_load_bps: float
    packet_size_bits: float
    burst_length_packets: int = 1
    line_rate_bps: float | None = None  # MB burst sending rate; required for MB
    phase_s: float | None = None        # start offset; drawn from the seed when None

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        if not self.avg_load_bps > 0:
            raise ValueError("avg_load_bps must be positive")
        if not self.packet_size_bits > 0:
            raise ValueError("packet_size_bits must be positive")
        if self.burst_length_packets < 1:
            raise ValueError("burst_length_packets must be >= 1")
        if self.distribution is Distribution.MB:
            if self.line_rate_bps is None or self.line_rate_bps < self.avg_load_bps:
                raise ValueError("MB traffic needs a line rate at least equal to the average load")

    @property
    def period_s(self) -> float:
        """Spacing between packets (CBR) or burst starts (MB)."""
        if self.distribution is Distribution.CBR:
            return self.packet_size_bits / self.avg_load_bps
        return self.burst_length_packets * self.packet_size_bits / self.avg_load_bps


@dataclass(frozen=True)
class SimConfig:
    duration_s: float = 10.0
    capture_window_s: float = 5.0
    buffer_packets: int = 64
    seed: int = 0
    horizon_s: float | None = None  # stop processing events after this time; None drains

    def __post_init__(self):
        if not 0 < self.capture_window_s <= self.duration_s:
            raise ValueError("need 0 < capture_window_s <= duration_s")
        if self.buffer_packets < 1:
            raise ValueError("buffer_packets must be >= 1")

    @property
    def capture_start_s(self) -> float:
        return self.duration_s - self.capture_window_s


@dataclass(frozen=True)
class FlowSkeleton:
    id: str
    path: tuple[str, ...]
    packet_size_bits: float
    distribution: Distribution | None = None


@dataclass(frozen=True)
class ScenarioSkeleton:
    devices: tuple[Device, ...]
    linkports: tuple[LinkPort, ...]
    flows: tuple[FlowSkeleton, ...]


# ------------------------------------------------------------ topology

def _device_id(i):
    return f"d{i:02d}"


def gen_topology(seed, n_devices, kind_mix=0.5, bandwidths=(1e7, 2e7),
                 propagation_delay_s=0.0, extra_link_prob=0.25):
    """Random connected topology with one linkport per link direction.

    ``kind_mix`` is the probability that a device is a switch. The linkport
    for traffic from ``a`` to ``b`` is named ``"a>b"`` and owned by ``a``.
    """
    if not 2 <= n_devices <= 16:
        raise InvalidSize(f"n_devices must be in [2, 16], got {n_devices}")
    rng = np.random.default_rng(seed)
    kinds = [DeviceKind.SWITCH if rng.random() < kind_mix else DeviceKind.ROUTER
             for _ in range(n_devices)]
    order = rng.permutation(n_devices)
    edges = set()
    for k in range(1, n_devices):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for a in range(n_devices):
        for b in range(a + 1, n_devices):
            if (a, b) not in edges and rng.random() < extra_link_prob:
                edges.add((a, b))
    ports: dict[int, list[str]] = {i: [] for i in range(n_devices)}
    linkports = []
    for a, b in sorted(edges):
        bw = float(rng.choice(bandwidths))
        for src, dst in ((a, b), (b, a)):
            lp_id = f"{_device_id(src)}>{_device_id(dst)}"
            linkports.append(LinkPort(lp_id, _device_id(src), bw, propagation_delay_s))
            ports[src].append(lp_id)
    devices = [Device(_device_id(i), kinds[i], tuple(sorted(ports[i]))) for i in range(n_devices)]
    return devices, sorted(linkports, key=lambda lp: lp.id)


def adjacency(linkports: Sequence[LinkPort]) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {}
    for lp in linkports:
        src, dst = lp.id.split(">")
        adj.setdefault(src, []).append(dst)
    return {k: sorted(v) for k, v in adj.items()}


def shortest_path(adj: dict[str, list[str]], src: str, dst: str) -> tuple[str, ...]:
    """Linkport ids of a BFS shortest path (neighbors tried in sorted order)."""
    parent = {src: None}
    frontier = deque([src])
    while frontier:
        node = frontier.popleft()
        if node == dst:
            break
        for nxt in adj.get(node, []):
            if nxt not in parent:
                parent[nxt] = node
                frontier.append(nxt)
    if dst not in parent:
        raise ValueError(f"{dst} unreachable from {src}")
    hops = []
    node = dst
    while parent[node] is not None:
        hops.append(f"{parent[node]}>{node}")
        node = parent[node]
    return tuple(reversed(hops))


# ------------------------------------------------------------ traffic

def packet_times(spec: TrafficSpec, duration_s: float, seed=0) -> np.ndarray:
    """Send times in [0, duration_s); the seed only shifts the phase."""
    period = spec.period_s
    phase = spec.phase_s
    if phase is None:
        phase = float(np.random.default_rng(seed).uniform(0.0, period))
    n_periods = max(int(math.ceil((duration_s - phase) / period)) + 1, 0)
    starts = phase + period * np.arange(n_periods)
    if spec.distribution is Distribution.CBR:
        times = starts
    else:
        gap = spec.packet_size_bits / spec.line_rate_bps
        times = (starts[:, None] + gap * np.arange(spec.burst_length_packets)[None, :]).ravel()
    return times[(times >= 0.0) & (times < duration_s)]


def gen_flow_packets(spec: TrafficSpec, duration_s: float, seed=0) -> list[PacketRecord]:
    return [PacketRecord(float(t), spec.packet_size_bits) for t in packet_times(spec, duration_s, seed)]


# ------------------------------------------------------------ simulation

@dataclass
class FlowOutcome:
    send_times: np.ndarray
    arrival_times: np.ndarray  # NaN where not delivered
    dropped: np.ndarray        # bool

    @property
    def injected(self) -> int:
        return len(self.send_times)

    @property
    def delivered(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.arrival_times)))

    @property
    def n_dropped(self) -> int:
        return int(np.count_nonzero(self.dropped))

    @property
    def in_flight(self) -> int:
        return self.injected - self.delivered - self.n_dropped


@dataclass
class DesRun:
    outcomes: dict[str, FlowOutcome]
    port_completions: dict[str, np.ndarray]  # empty unless recorded


@dataclass
class SimResult:
    scenario: NetworkScenario
    run: DesRun


def _as_times(stream) -> np.ndarray:
    if isinstance(stream, np.ndarray):
        return np.asarray(stream, dtype=np.float64)
    return np.array([p.timestamp_s if isinstance(p, PacketRecord) else float(p) for p in stream])


def run_des(skeleton: ScenarioSkeleton, packet_streams, config: SimConfig,
            record_ports=False) -> DesRun:
    """Event-driven FIFO simulation: per-flow outcomes and (optionally) port completions."""
    lp_index = {lp.id: i for i, lp in enumerate(skeleton.linkports)}
    bw = [lp.bandwidth_bps for lp in skeleton.linkports]
    prop = [lp.propagation_delay_s for lp in skeleton.linkports]
    flows = sorted(skeleton.flows, key=lambda f: f.id)
    paths, tx, sends = [], [], []
    for fl in flows:
        if fl.id not in packet_streams:
            raise ValueError(f"no packet stream for flow {fl.id!r}")
        path = [lp_index[p] for p in fl.path]
        paths.append(path)
        tx.append([fl.packet_size_bits / bw[p] for p in path])
        times = np.sort(_as_times(packet_streams[fl.id]))
        if times.size and times[0] < 0:
            raise ValueError(f"flow {fl.id!r} has negative send times")
        sends.append(times)
    arrivals = [np.full(len(s), np.nan) for s in sends]
    dropped = [np.zeros(len(s), dtype=bool) for s in sends]
    n_ports = len(bw)
    busy = [0.0] * n_ports
    held = [deque() for _ in range(n_ports)]
    completions = [[] for _ in range(n_ports)] if record_ports else None
    buffer = config.buffer_packets
    horizon = math.inf if config.horizon_s is None else config.horizon_s

    # only the next unsent packet of each flow sits in the heap
    heap = [(float(s[0]), fi, 0, 0) for fi, s in enumerate(sends) if len(s)]
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        t, fi, k, hop = pop(heap)
        if t > horizon:
            break
        if hop == 0 and k + 1 < len(sends[fi]):
            push(heap, (float(sends[fi][k + 1]), fi, k + 1, 0))
        port = paths[fi][hop]
        q = held[port]
        while q and q[0] <= t:
            q.popleft()
        if len(q) >= buffer:
            dropped[fi][k] = True
            continue
        done = (t if t > busy[port] else busy[port]) + tx[fi][hop]
        busy[port] = done
        q.append(done)
        if record_ports:
            completions[port].append(done)
        nxt = done + prop[port]
        if hop + 1 == len(paths[fi]):
            arrivals[fi][k] = nxt
        else:
            push(heap, (nxt, fi, k, hop + 1))

    outcomes = {fl.id: FlowOutcome(sends[i], arrivals[i], dropped[i]) for i, fl in enumerate(flows)}
    ports = ({lp.id: np.array(completions[i]) for i, lp in enumerate(skeleton.linkports)}
             if record_ports else {})
    return DesRun(outcomes, ports)


def simulate_detailed(skeleton: ScenarioSkeleton, packet_streams, config: SimConfig,
                      record_ports=False) -> SimResult:
    run = run_des(skeleton, packet_streams, config, record_ports)
    outcomes = run.outcomes
    t0, t1 = config.capture_start_s, config.duration_s
    flows, labels = [], []
    for fl in skeleton.flows:
        out = outcomes[fl.id]
        captured = (out.send_times >= t0) & (out.send_times < t1)
        ok = captured & ~np.isnan(out.arrival_times)
        if not ok.any():
            raise NoDeliveredPackets(f"flow {fl.id!r}: no captured packet was delivered")
        n = int(np.count_nonzero(captured))
        flows.append(Flow(
            id=fl.id,
            path=fl.path,
            avg_load_bps=n * fl.packet_size_bits / config.capture_window_s,
            num_packets=n,
            packet_size_bits=fl.packet_size_bits,
            packet_counts=tuple(bin_counts(out.send_times[captured] - t0).tolist()),
            distribution=fl.distribution,
        ))
        labels.append(float(np.mean(out.arrival_times[ok] - out.send_times[ok])))
    scenario = NetworkScenario(tuple(skeleton.devices), tuple(skeleton.linkports), tuple(flows), tuple(labels))
    return SimResult(scenario, run)


def simulate(skeleton: ScenarioSkeleton, packet_streams, config: SimConfig) -> NetworkScenario:
    """Run the DES and return the labeled scenario."""
    return simulate_detailed(skeleton, packet_streams, config).scenario


# ------------------------------------------------------------ datasets

@dataclass(frozen=True)
class DatasetPart:
    split: str
    count: int
    min_devices: int = 4
    max_devices: int = 8


@dataclass(frozen=True)
class GeneratorConfig:
    """Dataset recipe. ``mb_only_fraction`` of scenarios carry only MB flows
    (one per source-destination pair); the rest mix CBR and MB flows (up to
    one of each per pair, sharing the path)."""

    parts: tuple[DatasetPart, ...] = (DatasetPart("train", 8), DatasetPart("validation", 1),
                                      DatasetPart("test", 1))
    seed: int = 0
    mb_only_fraction: float = 0.5
    kind_mix: float = 0.5
    flows_per_device: tuple[float, float] = (1.0, 2.0)
    utilization: tuple[float, float] = (0.1, 0.9)
    burst_packets: tuple[int, int] = (5, 50)
    packet_sizes_bits: tuple[float, ...] = (4000.0, 8000.0, 12000.0)
    bandwidths_bps: tuple[float, ...] = (1e7, 2e7)
    propagation_delay_s: float = 1e-4
    extra_link_prob: float = 0.25
    buffer_packets: int = 64
    duration_s: float = 10.0
    capture_window_s: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(
            p if isinstance(p, DatasetPart) else DatasetPart(**p) for p in self.parts))
        for name in ("flows_per_device", "utilization", "burst_packets",
                     "packet_sizes_bits", "bandwidths_bps"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for p in self.parts:
            if p.split not in ("train", "validation", "test"):
                raise ValueError(f"unknown split {p.split!r}")
            if not 2 <= p.min_devices <= p.max_devices <= 16:
                raise InvalidSize(f"device range [{p.min_devices}, {p.max_devices}] outside [2, 16]")
            if p.count < 0:
                raise ValueError("part count must be >= 0")
        if not 0 < self.utilization[0] <= self.utilization[1] < 1:
            raise ValueError("utilization range must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> GeneratorConfig:
        allowed = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ParseError(f"unknown generator option {unknown[0]!r}", location=unknown[0])
        return cls(**data)


def load_generator_config(path) -> GeneratorConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, location=f"line {exc.lineno}") from None
    try:
        return GeneratorConfig.from_dict(data)
    except ParseError as exc:
        raise ParseError(str(exc), path=path) from None
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), path=path) from None


def generate_scenario(seed, n_devices: int, mb_only: bool, config: GeneratorConfig,
                      max_attempts: int = 5) -> NetworkScenario:
    """One labeled scenario; deterministic in ``seed``."""
    for attempt in range(max_attempts):
        try:
            return simulate(*draw_workload(seed, n_devices, mb_only, config, attempt))
        except NoDeliveredPackets:
            continue
    raise NoDeliveredPackets(f"scenario seed {seed}: every attempt lost a whole flow")


def draw_workload(seed, n_devices: int, mb_only: bool, config: GeneratorConfig,
                  attempt: int = 0) -> tuple[ScenarioSkeleton, dict[str, np.ndarray], SimConfig]:
    """Topology, flows and packet streams of one scenario, before simulation."""
    seq = np.random.SeedSequence([seed, attempt])
    topo_seed, rng_seed = seq.spawn(2)
    rng = np.random.default_rng(rng_seed)
    devices, linkports = gen_topology(topo_seed, n_devices, config.kind_mix, config.bandwidths_bps,
                                      config.propagation_delay_s, config.extra_link_prob)
    lp_by_id = {lp.id: lp for lp in linkports}
    adj = adjacency(linkports)
    pairs = [(a.id, b.id) for a in devices for b in devices if a.id != b.id]
    lo, hi = config.flows_per_device
    n_pairs = int(np.clip(rng.integers(math.ceil(lo * n_devices), math.floor(hi * n_devices) + 1),
                          1, len(pairs)))
    chosen = sorted(rng.choice(len(pairs), size=n_pairs, replace=False).tolist())

    specs = []  # (path, distribution)
    for pi in chosen:
        path = shortest_path(adj, *pairs[pi])
        if mb_only:
            kinds = [Distribution.MB]
        else:
            pick = rng.integers(0, 3)
            kinds = [[Distribution.CBR], [Distribution.MB], [Distribution.CBR, Distribution.MB]][pick]
        for kind in kinds:
            specs.append((path, kind))

    weights = rng.uniform(0.2, 1.0, size=len(specs))
    util = {}
    for (path, _), w in zip(specs, weights):
        for p in path:
            util[p] = util.get(p, 0.0) + w / lp_by_id[p].bandwidth_bps
    target = rng.uniform(*config.utilization)
    scale = target / max(util.values())

    skeleton_flows, streams = [], {}
    for i, ((path, kind), w) in enumerate(zip(specs, weights)):
        size = float(rng.choice(config.packet_sizes_bits))
        fid = f"f{i:03d}"
        if kind is Distribution.CBR:
            spec = TrafficSpec(kind, float(w * scale), size)
        else:
            burst = int(rng.integers(config.burst_packets[0], config.burst_packets[1] + 1))
            spec = TrafficSpec(kind, float(w * scale), size, burst_length_packets=burst,
                               line_rate_bps=lp_by_id[path[0]].bandwidth_bps)
        streams[fid] = packet_times(spec, config.duration_s, int(rng.integers(0, 2**31)))
        skeleton_flows.append(FlowSkeleton(fid, path, size, kind))

    skeleton = ScenarioSkeleton(tuple(devices), tuple(linkports), tuple(skeleton_flows))
    return skeleton, streams, SimConfig(config.duration_s, config.capture_window_s, config.buffer_packets)


def _job(args):
    seed, n_devices, mb_only, config = args
    return generate_scenario(seed, n_devices, mb_only, config)


def dataset_plan(config: GeneratorConfig) -> list[tuple[str, str, tuple]]:
    """(split, file name, generate_scenario args) for every scenario."""
    plan = []
    for pi, part in enumerate(config.parts):
        rng = np.random.default_rng([config.seed, pi])
        for i in range(part.count):
            n_dev = int(rng.integers(part.min_devices, part.max_devices + 1))
            mb_only = bool(rng.random() < config.mb_only_fraction)
            seed = int(rng.integers(0, 2**31))
            name = f"{part.split}_{pi:02d}_{i:05d}.json"
            plan.append((part.split, name, (seed, n_dev, mb_only, config)))
    return plan


def gen_dataset(config: GeneratorConfig, out_dir, jobs: int = 1) -> dict[str, list[str]]:
    """Simulate every planned scenario and write files plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    plan = dataset_plan(config)
    args = [p[2] for p in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenarios = list(pool.map(_job, args))
    else:
        scenarios = [_job(a) for a in args]
    splits: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    for (split, name, _), sc in zip(plan, scenarios):
        save_scenario(sc, out / name)
        splits[split].append(name)
    write_manifest(out, splits, seed=config.seed, generator=config.to_dict())
    return splits


# bookkeeping for the conservation / causality checks

def conservation_holds(run: DesRun) -> bool:
    """delivered + dropped + in flight == injected, per flow."""
    for o in run.outcomes.values():
        in_flight = np.count_nonzero(np.isnan(o.arrival_times) & ~o.dropped)
        if o.delivered + o.n_dropped + in_flight != o.injected or o.in_flight != in_flight:
            return False
    return True


def fifo_causal(run: DesRun) -> bool:
    """Per port, transmission completion times strictly increase."""
    return all(np.all(np.diff(c) > 0) for c in run.port_completions.values())


def analytic_delay(skeleton: ScenarioSkeleton, flow_id: str) -> float:
    """Zero-queuing end-to-end delay of one packet of ``flow_id``."""
    lps = {lp.id: lp for lp in skeleton.linkports}
    fl = next(f for f in skeleton.flows if f.id == flow_id)
    return sum(fl.packet_size_bits / lps[p].bandwidth_bps + lps[p].propagation_delay_s for p in fl.path)
