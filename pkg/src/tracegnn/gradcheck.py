"""Central finite-difference check of the full model's log-MSE gradient.

Every parameter element is perturbed by +/- eps and the loss re-evaluated
with the message-passing depth pinned to the unperturbed run's, so the
convergence test cannot switch branches between the two evaluations.

The packet encoder is the expensive part, so perturbations of the other
parameters reuse the unperturbed packet encodings, and perturbations of the
encoder weights are evaluated together by a batched encoder that carries one
weight copy per perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ScenarioGraph, compile_scenario, encode_packets, forward
from .nn import ModelConfig, ModelParams, init_params
from .scenario import NetworkScenario
from .simulator import (FlowSkeleton, ScenarioSkeleton, SimConfig, TrafficSpec, adjacency, gen_topology,
                        packet_times, shortest_path, simulate)
from .scenario import Distribution
from .traces import fit_normalization
from .training import log_mse_loss

TINY = ModelConfig(flow_dim=8, linkport_dim=8, device_dim=4)
DEFAULT_EPS = 1e-5
# |a - n| / max(|a|, |n|, FLOOR): gradients far below the loss's rounding
# level (~1e-16 / eps) are compared in absolute terms
DEFAULT_FLOOR = 1e-6
DEFAULT_T_MAX = 8


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple[str, tuple]
    n_checked: int
    iterations: int
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol


def tiny_scenario(seed: int, n_devices=3, n_flows=2) -> NetworkScenario:
    """Small labeled scenario from the simulator (random pairs, light load)."""
    rng = np.random.default_rng([seed, 7])
    devices, linkports = gen_topology(int(rng.integers(2**31)), n_devices, propagation_delay_s=1e-4)
    adj = adjacency(linkports)
    ids = [d.id for d in devices]
    lps = {lp.id: lp for lp in linkports}
    flows, streams = [], {}
    for i in range(n_flows):
        a, b = rng.choice(len(ids), size=2, replace=False)
        path = shortest_path(adj, ids[a], ids[b])
        size = float(rng.choice([4000.0, 8000.0, 12000.0]))
        bw = min(lps[p].bandwidth_bps for p in path)
        load = float(rng.uniform(0.1, 0.4)) * bw
        if i % 2:
            spec = TrafficSpec(Distribution.MB, load, size, int(rng.integers(5, 20)), lps[path[0]].bandwidth_bps)
        else:
            spec = TrafficSpec(Distribution.CBR, load, size)
        fid = f"f{i}"
        flows.append(FlowSkeleton(fid, path, size, spec.distribution))
        streams[fid] = packet_times(spec, 10.0, int(rng.integers(2**31)))
    return simulate(ScenarioSkeleton(tuple(devices), tuple(linkports), tuple(flows)), streams, SimConfig())


def _loss(graph, weights, iterations, h_pkts=None, t_max=DEFAULT_T_MAX) -> float:
    with ad.no_grad():
        out = forward(graph, weights, t_max=t_max, fixed_iterations=iterations, h_pkts=h_pkts)
        return float(log_mse_loss(out.delay.value, graph.labels))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gru_copies(x, h, W, b):
    """One GRU step for K weight copies: x (K,B,in), h (K,B,H), W (K,in+H,3H)."""
    n_in, H = x.shape[-1], h.shape[-1]
    a = x @ W[:, :n_in] + b[:, None, :]
    zr = _sigmoid(a[..., :2 * H] + h @ W[:, n_in:, :2 * H])
    z, r = zr[..., :H], zr[..., H:]
    c = np.tanh(a[..., 2 * H:] + (r * h) @ W[:, n_in:, 2 * H:])
    return (1.0 - z) * h + z * c


def encoder_copies(bins: np.ndarray, W1, b1, W2, b2) -> np.ndarray:
    """Two-layer encoder for K weight copies at once; returns (K, B, H2)."""
    T, B, _ = bins.shape
    K = W1.shape[0]
    h1 = np.zeros((K, B, W1.shape[2] // 3))
    h2 = np.zeros((K, B, W2.shape[2] // 3))
    for t in range(T):
        h1 = _gru_copies(np.broadcast_to(bins[t], (K,) + bins[t].shape), h1, W1, b1)
        h2 = _gru_copies(h1, h2, W2, b2)
    return h2


def _perturbations(params: ModelParams, names, eps):
    """Yield (name, index, sign, weights) for every element of ``names``."""
    for name in names:
        for idx in np.ndindex(params[name].shape):
            for sign in (1.0, -1.0):
                w = dict(params.tensors)
                arr = params[name].copy()
                arr[idx] += sign * eps
                w[name] = arr
                yield name, idx, sign, w


def gradcheck(seed: int = 0, config: ModelConfig = TINY, eps: float = DEFAULT_EPS,
              floor: float = DEFAULT_FLOOR, t_max: int = DEFAULT_T_MAX,
              scenario: NetworkScenario | None = None) -> GradcheckReport:
    scenario = scenario if scenario is not None else tiny_scenario(seed)
    graph: ScenarioGraph = compile_scenario(scenario, fit_normalization([scenario]))
    params = init_params(seed, config)

    vars_ = params.as_vars()
    out = forward(graph, vars_, t_max=t_max)
    ad.backward(log_mse_loss(out.delay, graph.labels))
    analytic = {k: v.grad if v.grad is not None else np.zeros_like(v.value) for k, v in vars_.items()}
    iters = out.iterations

    numeric = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    enc_names = ("E_pkts_l1.W", "E_pkts_l1.b", "E_pkts_l2.W", "E_pkts_l2.b")
    with ad.no_grad():
        h_base = encode_packets(graph, params).value

    # everything downstream of the packet encoder
    for name, idx, sign, w in _perturbations(params, [n for n in params.names() if n not in enc_names], eps):
        numeric[name][idx] += sign * _loss(graph, w, iters, h_base, t_max) / (2 * eps)

    # encoder weights: batched encodings, then one downstream pass per copy
    perts = list(_perturbations(params, enc_names, eps))
    stack = {n: np.stack([w[n] for _, _, _, w in perts]) for n in enc_names}
    h_copies = encoder_copies(graph.bins, stack["E_pkts_l1.W"], stack["E_pkts_l1.b"],
                              stack["E_pkts_l2.W"], stack["E_pkts_l2.b"])
    for (name, idx, sign, w), hp in zip(perts, h_copies):
        numeric[name][idx] += sign * _loss(graph, w, iters, hp, t_max) / (2 * eps)

    per_param, worst, worst_err = {}, ("", ()), 0.0
    for name in params.names():
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_param[name] = float(err.max())
        if err.max() > worst_err:
            worst_err = float(err.max())
            worst = (name, np.unravel_index(int(err.argmax()), err.shape))
    return GradcheckReport(worst_err, worst, params.count(), iters, per_param)
