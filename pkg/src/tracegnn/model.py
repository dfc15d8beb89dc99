"""Per-flow delay model: initial encoding, iterative message passing, readout.

Entities are indexed in sorted-id order internally; every public prediction
is returned in the scenario's own flow order so it lines up with ``labels``.

Readout: each partial flow state is mapped by ``R`` and ``softplus`` to a
non-negative queue length expressed in units of the flow's own packet
transmission time at that hop; the per-hop queuing delays are summed and
added to the analytic transmission and propagation delays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .nn import ModelParams, gru_weights, mlp_layers, stacked_gru_encode
from .scenario import DeviceKind, NetworkScenario
from .traces import NormStats, apply_normalization

DEFAULT_T_MAX = 40
DEFAULT_THRESHOLD = 0.05
DEFAULT_QUANTILE = 0.95
_REL_EPS = 1e-9


@dataclass
class ScenarioGraph:
    """Index arrays and normalized features of one scenario."""

    scenario: NetworkScenario
    flow_ids: list[str]
    linkport_ids: list[str]
    device_ids: list[str]
    flow_order: np.ndarray        # scenario.flows position -> internal flow index
    flow_x: np.ndarray | None     # (F, 3) avg load, packet size, num packets
    bins: np.ndarray | None       # (1000, F, 2) normalized count and bits
    lq_bw: np.ndarray | None      # (NLQ, 1)
    lq_dev: np.ndarray            # (NLQ,) owning device index
    lq_router: np.ndarray         # bool (NLQ,)
    dev_router: np.ndarray        # bool (ND,)
    steps: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # per path position: flows, linkports, devices
    hop_flow: np.ndarray          # per m_tilde row (position-major)
    hop_lq: np.ndarray
    hop_pos: np.ndarray
    hop_tx: np.ndarray            # packet transmission time of the hop (s)
    trans_delay: np.ndarray       # (F,) sum of transmission times
    prop_delay: np.ndarray        # (F,) sum of propagation delays
    labels: np.ndarray | None     # (F,) internal order

    @property
    def n_flows(self):
        return len(self.flow_ids)

    @property
    def n_linkports(self):
        return len(self.linkport_ids)

    @property
    def n_devices(self):
        return len(self.device_ids)

    def to_scenario_order(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.flow_order]


def compile_scenario(scenario: NetworkScenario, stats: NormStats | None = None) -> ScenarioGraph:
    if isinstance(scenario, ScenarioGraph):
        return scenario
    flows = sorted(scenario.flows, key=lambda f: f.id)
    lps = sorted(scenario.linkports, key=lambda lp: lp.id)
    devs = sorted(scenario.devices, key=lambda d: d.id)
    fidx = {f.id: i for i, f in enumerate(flows)}
    lidx = {lp.id: i for i, lp in enumerate(lps)}
    didx = {d.id: i for i, d in enumerate(devs)}
    kind = {d.id: d.kind for d in devs}

    lq_dev = np.array([didx[lp.device_id] for lp in lps], dtype=np.intp)
    lq_router = np.array([kind[lp.device_id] is DeviceKind.ROUTER for lp in lps], dtype=bool)
    dev_router = np.array([d.kind is DeviceKind.ROUTER for d in devs], dtype=bool)

    max_len = max((len(f.path) for f in flows), default=0)
    steps = []
    hop_flow, hop_lq, hop_pos, hop_tx = [], [], [], []
    for j in range(max_len):
        active = [i for i, f in enumerate(flows) if len(f.path) > j]
        lq = [lidx[flows[i].path[j]] for i in active]
        steps.append((np.array(active, dtype=np.intp), np.array(lq, dtype=np.intp), lq_dev[lq]))
        for i, q in zip(active, lq):
            hop_flow.append(i)
            hop_lq.append(q)
            hop_pos.append(j)
            hop_tx.append(flows[i].packet_size_bits / lps[q].bandwidth_bps)

    trans = np.array([sum(f.packet_size_bits / scenario.linkport(p).bandwidth_bps for p in f.path)
                      for f in flows])
    prop = np.array([sum(scenario.linkport(p).propagation_delay_s for p in f.path) for f in flows])

    flow_x = bins = lq_bw = None
    if stats is not None:
        flow_x = np.stack([
            apply_normalization(np.array([f.avg_load_bps for f in flows]), "avg_load", stats),
            apply_normalization(np.array([f.packet_size_bits for f in flows]), "packet_size", stats),
            apply_normalization(np.array([f.num_packets for f in flows], dtype=np.float64), "num_packets", stats),
        ], axis=1) if flows else np.zeros((0, 3))
        raw = np.stack([f.packet_bins for f in flows], axis=1) if flows else np.zeros((1000, 0, 2))
        bins = np.stack([apply_normalization(raw[..., 0], "bin_count", stats),
                         apply_normalization(raw[..., 1], "bin_bits", stats)], axis=-1)
        lq_bw = apply_normalization(np.array([lp.bandwidth_bps for lp in lps]), "bandwidth", stats)[:, None]

    labels = None
    if scenario.labels is not None:
        by_id = dict(zip((f.id for f in scenario.flows), scenario.labels))
        labels = np.array([by_id[f.id] for f in flows])

    return ScenarioGraph(
        scenario=scenario,
        flow_ids=[f.id for f in flows],
        linkport_ids=[lp.id for lp in lps],
        device_ids=[d.id for d in devs],
        flow_order=np.array([fidx[f.id] for f in scenario.flows], dtype=np.intp),
        flow_x=flow_x, bins=bins, lq_bw=lq_bw,
        lq_dev=lq_dev, lq_router=lq_router, dev_router=dev_router,
        steps=steps,
        hop_flow=np.array(hop_flow, dtype=np.intp),
        hop_lq=np.array(hop_lq, dtype=np.intp),
        hop_pos=np.array(hop_pos, dtype=np.intp),
        hop_tx=np.array(hop_tx, dtype=np.float64),
        trans_delay=trans, prop_delay=prop, labels=labels,
    )


@dataclass
class EmbeddingState:
    h_f: ad.Var
    h_lq: ad.Var
    h_d: ad.Var
    m_tilde: ad.Var | None = None  # (n_hops, flow_dim), rows ordered like graph.hop_*
    t: int = 0

    def m_tilde_per_flow(self, graph: ScenarioGraph) -> list[np.ndarray]:
        """Per-flow (|path|, width) arrays, internal flow order."""
        m = self.m_tilde.value
        return [m[graph.hop_flow == i][np.argsort(graph.hop_pos[graph.hop_flow == i])]
                for i in range(graph.n_flows)]


def _weights(params):
    return params.tensors if isinstance(params, ModelParams) else params


def _graph(scenario, stats):
    return scenario if isinstance(scenario, ScenarioGraph) else compile_scenario(scenario, stats)


# ------------------------------------------------------------ encoding

def encode_packets(graph: ScenarioGraph, params) -> ad.Var:
    w = _weights(params)
    return stacked_gru_encode(gru_weights(w, "E_pkts_l1"), gru_weights(w, "E_pkts_l2"), graph.bins)


def encode_flows(scenario, params, stats=None, h_pkts=None) -> ad.Var:
    graph = _graph(scenario, stats)
    w = _weights(params)
    if h_pkts is None:
        h_pkts = encode_packets(graph, w)
    x = ad.concat([ad.Var(graph.flow_x), h_pkts], axis=1)
    return ad.mlp(x, mlp_layers(w, "E_f"))


def encode_linkports(scenario, params, stats=None) -> ad.Var:
    graph = _graph(scenario, stats)
    w = _weights(params)
    width = _out_width(w, "E_lq_router")
    parts = []
    for mask, name in ((graph.lq_router, "E_lq_router"), (~graph.lq_router, "E_lq_switch")):
        idx = np.flatnonzero(mask)
        if len(idx):
            parts.append((idx, ad.mlp(ad.Var(graph.lq_bw[idx]), mlp_layers(w, name))))
    return ad.assemble_rows(graph.n_linkports, width, parts)


def encode_devices(scenario, params, h_lq0: ad.Var, stats=None) -> ad.Var:
    graph = _graph(scenario, stats)
    w = _weights(params)
    agg = ad.segment_sum(h_lq0, graph.lq_dev, graph.n_devices)
    parts = []
    for mask, name in ((graph.dev_router, "E_d_router"), (~graph.dev_router, "E_d_switch")):
        idx = np.flatnonzero(mask)
        if len(idx):
            parts.append((idx, ad.mlp(ad.take_rows(agg, idx), mlp_layers(w, name))))
    return ad.assemble_rows(graph.n_devices, _out_width(w, "E_d_router"), parts)


def _out_width(w, name):
    layers = mlp_layers(w, name)
    W = layers[-1][0]
    return (W.value if isinstance(W, ad.Var) else W).shape[1]


def encode(scenario, params, stats=None, h_pkts=None) -> EmbeddingState:
    graph = _graph(scenario, stats)
    h_lq = encode_linkports(graph, params)
    return EmbeddingState(
        h_f=encode_flows(graph, params, h_pkts=h_pkts),
        h_lq=h_lq,
        h_d=encode_devices(graph, params, h_lq),
    )


# ------------------------------------------------------------ message passing

def message_passing_iteration(scenario, params, state: EmbeddingState, stats=None) -> EmbeddingState:
    graph = _graph(scenario, stats)
    w = _weights(params)
    W_f, b_f = gru_weights(w, "RNN_flows")
    h_f = state.h_f
    msgs = []
    for flow_idx, lq_idx, dev_idx in graph.steps:
        x = ad.concat([ad.take_rows(state.h_d, dev_idx), ad.take_rows(state.h_lq, lq_idx)], axis=1)
        new = ad.gru_cell(x, ad.take_rows(h_f, flow_idx), W_f, b_f)
        h_f = ad.put_rows(h_f, flow_idx, new)
        msgs.append(new)
    m_tilde = ad.concat(msgs, axis=0) if msgs else ad.Var(np.zeros((0, state.h_f.shape[1])))
    agg_lq = ad.segment_sum(m_tilde, graph.hop_lq, graph.n_linkports)
    h_lq = ad.gru_cell(agg_lq, state.h_lq, *gru_weights(w, "U_q"))
    agg_d = ad.segment_sum(h_lq, graph.lq_dev, graph.n_devices)
    h_d = ad.gru_cell(agg_d, state.h_d, *gru_weights(w, "U_d"))
    return EmbeddingState(h_f=h_f, h_lq=h_lq, h_d=h_d, m_tilde=m_tilde, t=state.t + 1)


def relative_change(m_new: np.ndarray, m_old: np.ndarray) -> np.ndarray:
    if m_new.shape != m_old.shape:
        raise ShapeMismatch(f"message shapes differ: {m_new.shape} vs {m_old.shape}")
    return np.abs(m_new - m_old) / (np.abs(m_old) + _REL_EPS)


def has_converged(m_tilde_t: Sequence[np.ndarray], m_tilde_prev: Sequence[np.ndarray],
                  threshold=DEFAULT_THRESHOLD, quantile=DEFAULT_QUANTILE) -> bool:
    """True iff at least ``quantile`` of flows changed by less than ``threshold``.

    Each flow's change is the mean relative difference over its path positions
    and coordinates.
    """
    if len(m_tilde_t) != len(m_tilde_prev):
        raise ShapeMismatch(f"{len(m_tilde_t)} flows vs {len(m_tilde_prev)}")
    if not len(m_tilde_t):
        return True
    rdiff = np.array([relative_change(np.asarray(a, float), np.asarray(b, float)).mean()
                      for a, b in zip(m_tilde_t, m_tilde_prev)])
    return bool(np.count_nonzero(rdiff < threshold) / len(rdiff) >= quantile)


def flow_relative_change(graph: ScenarioGraph, m_new: np.ndarray, m_old: np.ndarray) -> np.ndarray:
    """Vectorized per-flow mean relative change; rows summed in path order."""
    row_mean = relative_change(m_new, m_old).mean(axis=1)
    counts = np.bincount(graph.hop_flow, minlength=graph.n_flows)
    return np.bincount(graph.hop_flow, weights=row_mean, minlength=graph.n_flows) / np.maximum(counts, 1)


def run_message_passing(step: Callable[[EmbeddingState], EmbeddingState], state: EmbeddingState,
                        t_max: int, converged: Callable[[np.ndarray, np.ndarray], bool],
                        fixed_iterations: int | None = None) -> EmbeddingState:
    """Iterate ``step`` until ``converged(m_t, m_{t-1})`` (checked from t = 2) or ``t_max``.

    With ``fixed_iterations`` set, runs exactly that many steps and skips the check.
    """
    limit = fixed_iterations if fixed_iterations is not None else t_max
    if limit < 1:
        raise ValueError("message passing needs at least one iteration")
    prev = None
    while True:
        state = step(state)
        if state.t >= limit:
            return state
        current = state.m_tilde.value
        if fixed_iterations is None and prev is not None and converged(current, prev):
            return state
        prev = current


# ------------------------------------------------------------ readout

@dataclass
class Readout:
    delay: ad.Var          # (F, 1) internal order
    queuing: ad.Var        # (F, 1)
    transmission: np.ndarray
    propagation: np.ndarray


def readout(scenario, params, m_tilde: ad.Var, stats=None) -> Readout:
    graph = _graph(scenario, stats)
    w = _weights(params)
    queue_len = ad.softplus(ad.mlp(m_tilde, mlp_layers(w, "R")))
    per_hop = ad.mul(queue_len, graph.hop_tx[:, None])
    d_q = ad.segment_sum(per_hop, graph.hop_flow, graph.n_flows)
    base = (graph.trans_delay + graph.prop_delay)[:, None]
    return Readout(ad.add(d_q, base), d_q, graph.trans_delay, graph.prop_delay)


# ------------------------------------------------------------ full model

@dataclass
class ForwardResult:
    graph: ScenarioGraph
    delay: ad.Var            # (F, 1) internal flow order
    state: EmbeddingState
    readout: Readout

    @property
    def iterations(self) -> int:
        return self.state.t

    def predictions(self) -> np.ndarray:
        """Per-flow mean delay in the scenario's flow order."""
        return self.graph.to_scenario_order(self.delay.value[:, 0])


def forward(scenario, params, stats=None, t_max=DEFAULT_T_MAX, threshold=DEFAULT_THRESHOLD,
            quantile=DEFAULT_QUANTILE, *, fixed_iterations=None, h_pkts=None) -> ForwardResult:
    graph = _graph(scenario, stats)
    w = _weights(params)
    state = encode(graph, w, h_pkts=h_pkts)

    def converged(m_new, m_old):
        rdiff = flow_relative_change(graph, m_new, m_old)
        return bool(np.count_nonzero(rdiff < threshold) / max(graph.n_flows, 1) >= quantile)

    state = run_message_passing(lambda s: message_passing_iteration(graph, w, s), state,
                                t_max, converged, fixed_iterations)
    out = readout(graph, w, state.m_tilde)
    return ForwardResult(graph, out.delay, state, out)


def predict(scenario, params, stats=None, **kwargs) -> np.ndarray:
    with ad.no_grad():
        return forward(scenario, params, stats, **kwargs).predictions()
