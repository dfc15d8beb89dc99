"""Scenario builders shared by the test modules."""

import numpy as np

from tracegnn.scenario import Device, DeviceKind, Flow, LinkPort, NetworkScenario
from tracegnn.simulator import adjacency, gen_topology, shortest_path


def random_scenario(seed, n_devices=None, n_flows=None, labeled=True, prop=1e-4) -> NetworkScenario:
    """Random valid scenario without running the simulator (fast)."""
    rng = np.random.default_rng(seed)
    n_devices = n_devices or int(rng.integers(2, 7))
    devices, linkports = gen_topology(int(rng.integers(2**31)), n_devices, propagation_delay_s=prop)
    adj = adjacency(linkports)
    ids = [d.id for d in devices]
    n_flows = n_flows or int(rng.integers(1, 2 * n_devices + 1))
    flows = []
    for i in range(n_flows):
        a, b = rng.choice(len(ids), size=2, replace=False)
        counts = np.zeros(1000, dtype=int)
        hits = rng.integers(0, 1000, size=int(rng.integers(0, 200)))
        np.add.at(counts, hits, 1)
        n_pk = int(counts.sum() + rng.integers(1, 500))
        flows.append(Flow(
            id=f"f{i:02d}",
            path=shortest_path(adj, ids[a], ids[b]),
            avg_load_bps=float(rng.uniform(1e5, 5e6)),
            num_packets=n_pk,
            packet_size_bits=float(rng.choice([4000.0, 8000.0, 12000.0])),
            packet_counts=tuple(counts.tolist()),
        ))
    labels = tuple(float(x) for x in rng.uniform(1e-4, 1e-2, size=n_flows)) if labeled else None
    return NetworkScenario(tuple(devices), tuple(linkports), tuple(flows), labels)


def relabel(scenario: NetworkScenario, seed) -> tuple[NetworkScenario, dict]:
    """Consistently rename (and reorder) every device, linkport and flow id.

    Returns the new scenario and the old -> new flow id map.
    """
    rng = np.random.default_rng(seed)

    def mapping(ids, prefix):
        perm = rng.permutation(len(ids))
        return {old: f"{prefix}{int(k):03d}x{int(rng.integers(1000))}" for old, k in zip(ids, perm)}

    dmap = mapping([d.id for d in scenario.devices], "dev")
    lmap = mapping([lp.id for lp in scenario.linkports], "lp")
    fmap = mapping([f.id for f in scenario.flows], "fl")
    devices = [Device(dmap[d.id], d.kind, tuple(lmap[p] for p in rng.permutation(d.port_ids)))
               for d in scenario.devices]
    linkports = [LinkPort(lmap[lp.id], dmap[lp.device_id], lp.bandwidth_bps, lp.propagation_delay_s)
                 for lp in scenario.linkports]
    flows = [Flow(fmap[f.id], tuple(lmap[p] for p in f.path), f.avg_load_bps, f.num_packets,
                  f.packet_size_bits, f.packet_counts, f.distribution) for f in scenario.flows]
    order = rng.permutation(len(flows))
    labels = None if scenario.labels is None else tuple(scenario.labels[i] for i in order)
    return NetworkScenario(tuple(devices[i] for i in rng.permutation(len(devices))),
                           tuple(linkports[i] for i in rng.permutation(len(linkports))),
                           tuple(flows[i] for i in order), labels), fmap


def line_scenario(bandwidths=(1e6, 2e6), size=8000.0, prop=0.0, kind=DeviceKind.ROUTER):
    """One flow over a chain of devices, one egress port each."""
    devices, linkports = [], []
    for i, bw in enumerate(bandwidths):
        devices.append(Device(f"d{i}", kind, (f"p{i}",)))
        linkports.append(LinkPort(f"p{i}", f"d{i}", bw, prop))
    flow = Flow("f0", tuple(lp.id for lp in linkports), 1e5, 10, size)
    return NetworkScenario(tuple(devices), tuple(linkports), (flow,), (1.0,))
