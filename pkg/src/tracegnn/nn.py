"""Model configuration, parameters, kernels, Adam and checkpoints.

Parameters live in a flat name -> float64 array map. MLP weights are stored
as ``<name>.<layer>.W`` / ``<name>.<layer>.b``, GRU weights as ``<name>.W``
(shape ``(in + H, 3H)``, column blocks update | reset | candidate) and
``<name>.b``.

Weights are drawn from U(-sqrt(3/fan_in), sqrt(3/fan_in)) (unit variance gain);
biases start at 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import EmptySequence, InvalidConfig, IoError, ParseError, ShapeMismatch

MLP_NAMES = ("E_f", "E_lq_router", "E_lq_switch", "E_d_router", "E_d_switch", "R")
GRU_NAMES = ("E_pkts_l1", "E_pkts_l2", "RNN_flows", "U_q", "U_d")

N_FLOW_FEATURES = 3  # avg load, packet size, number of packets
N_BIN_FEATURES = 2   # packets and bits per bin


@dataclass(frozen=True)
class ModelConfig:
    flow_dim: int = 64
    linkport_dim: int = 64
    device_dim: int = 16
    packet_dim: int | None = None  # packet-encoder state; defaults to flow_dim
    mlp_hidden_layers: int = 2

    def __post_init__(self):
        for name in ("flow_dim", "linkport_dim", "device_dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.packet_dim is not None and self.packet_dim < 1:
            raise InvalidConfig("packet_dim must be >= 1")
        if self.mlp_hidden_layers < 0:
            raise InvalidConfig("mlp_hidden_layers must be >= 0")

    @property
    def pkt_dim(self) -> int:
        return self.flow_dim if self.packet_dim is None else self.packet_dim

    def mlp_widths(self) -> dict[str, list[int]]:
        F, L, D, P, k = self.flow_dim, self.linkport_dim, self.device_dim, self.pkt_dim, self.mlp_hidden_layers
        return {
            "E_f": [N_FLOW_FEATURES + P] + [F] * k + [F],
            "E_lq_router": [1] + [L] * k + [L],
            "E_lq_switch": [1] + [L] * k + [L],
            "E_d_router": [L] + [D] * k + [D],
            "E_d_switch": [L] + [D] * k + [D],
            "R": [F] + [F] * k + [1],
        }

    def gru_sizes(self) -> dict[str, tuple[int, int]]:
        """name -> (input width, state width)."""
        F, L, D, P = self.flow_dim, self.linkport_dim, self.device_dim, self.pkt_dim
        return {
            "E_pkts_l1": (N_BIN_FEATURES, P),
            "E_pkts_l2": (P, P),
            "RNN_flows": (D + L, F),
            "U_q": (F, L),
            "U_d": (L, D),
        }

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for name, widths in self.mlp_widths().items():
            for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                out[f"{name}.{k}.W"] = (a, b)
                out[f"{name}.{k}.b"] = (b,)
        for name, (n_in, H) in self.gru_sizes().items():
            out[f"{name}.W"] = (n_in + H, 3 * H)
            out[f"{name}.b"] = (3 * H,)
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatch(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            self.tensors[name] = arr

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def as_vars(self) -> dict[str, ad.Var]:
        return {k: ad.param(v) for k, v in self.tensors.items()}

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def zeros_like(self) -> ModelParams:
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    config = config or ModelConfig()
    if not isinstance(config, ModelConfig):
        raise InvalidConfig(f"expected ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = math.sqrt(3.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


def mlp_layers(weights, name: str) -> list[tuple]:
    """Collect ``(W, b)`` pairs of MLP ``name`` from a name -> array/Var map."""
    layers, k = [], 0
    while f"{name}.{k}.W" in weights:
        layers.append((weights[f"{name}.{k}.W"], weights[f"{name}.{k}.b"]))
        k += 1
    if not layers:
        raise KeyError(f"no MLP named {name!r}")
    return layers


def gru_weights(weights, name: str) -> tuple:
    return weights[f"{name}.W"], weights[f"{name}.b"]


# ------------------------------------------------------------ public kernels

def mlp_forward(layers, x) -> ad.Var:
    """Apply an MLP given as a list of (W, b); 1-D inputs become a batch of one."""
    if not isinstance(x, ad.Var):
        x = ad.Var(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return ad.mlp(x, layers)


def gru_cell(weights, x, h) -> ad.Var:
    """One GRU step; ``weights`` is a (W, b) pair. 1-D inputs become a batch of one."""
    W, b = weights
    if not isinstance(x, ad.Var):
        x = ad.Var(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if not isinstance(h, ad.Var):
        h = ad.Var(np.atleast_2d(np.asarray(h, dtype=np.float64)))
    return ad.gru_cell(x, h, ad.const(W), ad.const(b))


def gru_sequence(weights, xs, h0):
    """Iterate the GRU cell over ``xs`` (T, B, in) from state ``h0`` (B, H).

    Returns ``(ys, h_final)`` where ``ys[t]`` is the state after consuming
    ``xs[t]``. 2-D ``xs`` (T, in) with 1-D ``h0`` runs a single sequence.
    """
    W, b = weights
    xv = xs.value if isinstance(xs, ad.Var) else np.asarray(xs, dtype=np.float64)
    if xv.shape[0] == 0:
        raise EmptySequence("gru_sequence needs at least one step")
    if xv.ndim == 2:
        xs = ad.const(xv[:, None, :])
        h0 = ad.const(np.asarray(h0.value if isinstance(h0, ad.Var) else h0).reshape(1, -1))
    ys = ad.gru_scan(ad.const(xs), ad.const(h0), ad.const(W), ad.const(b))
    return ys, ad.last_step(ys)


def stacked_gru_encode(weights_l1, weights_l2, xs) -> ad.Var:
    """Two-layer GRU encoder from zero initial states; returns layer 2's final state.

    ``xs`` is (T, B, in) of constant inputs. Identical sequences in the batch
    are encoded once, in content order, and shared.
    """
    xv = np.asarray(xs.value if isinstance(xs, ad.Var) else xs, dtype=np.float64)
    if xv.ndim == 2:
        xv = xv[:, None, :]
    if xv.shape[0] == 0:
        raise EmptySequence("stacked_gru_encode needs at least one step")
    T, B, n_in = xv.shape
    W1, b1 = (ad.const(w) for w in weights_l1)
    W2, b2 = (ad.const(w) for w in weights_l2)
    H1, H2 = W1.value.shape[1] // 3, W2.value.shape[1] // 3
    uniq, inv = ad.canonical_rows(np.ascontiguousarray(xv.transpose(1, 0, 2)).reshape(B, T * n_in))
    xu = np.ascontiguousarray(uniq.reshape(-1, T, n_in).transpose(1, 0, 2))
    U = xu.shape[1]
    ys1 = ad.gru_scan(ad.Var(xu), ad.Var(np.zeros((U, H1))), W1, b1)
    ys2 = ad.gru_scan(ys1, ad.Var(np.zeros((U, H2))), W2, b2)
    return ad.take_rows(ad.last_step(ys2), inv)


# ------------------------------------------------------------ optimization

@dataclass
class OptState:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptState) -> ModelParams:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    for name, g in grads.items():
        if np.shape(g) != params[name].shape:
            raise ShapeMismatch(f"gradient for {name}: {np.shape(g)} vs {params[name].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params.tensors):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params.tensors[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"TRACEGNN-CHECKPOINT 1\n"


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    """Write parameters plus JSON metadata.

    Layout: magic line, one line of JSON header (metadata, model config and
    ``[name, shape, offset]`` entries), then raw little-endian float64
    payloads in name order. Identical inputs give identical bytes.
    """
    entries, offset, blobs = [], 0, []
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append([name, list(arr.shape), offset])
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": params.config.to_dict(), "metadata": metadata or {}, "tensors": entries}
    line = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8") + b"\n"
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(line)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a checkpoint file", path=path, location="line 1")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ParseError("truncated header", path=path, location="line 2")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", path=path, location="line 2") from None
    payload = rest[nl + 1:]
    tensors = {}
    for name, shape, offset in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(payload):
            raise ParseError(f"payload truncated in {name}", path=path, location=name)
        tensors[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    try:
        config = ModelConfig(**header["config"])
        params = ModelParams(config, tensors)
    except (TypeError, ShapeMismatch, InvalidConfig) as exc:
        raise ParseError(str(exc), path=path, location="config") from None
    return params, header.get("metadata", {})
