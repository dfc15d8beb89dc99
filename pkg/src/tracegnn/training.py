"""Loss, metrics, the training loop and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset, InvalidConfig, IoError, MissingLabels, NonPositiveLabel, ParseError, NumericalError
from .model import DEFAULT_T_MAX, DEFAULT_THRESHOLD, ScenarioGraph, compile_scenario, forward
from .nn import ModelConfig, ModelParams, OptState, adam_step, init_params, load_checkpoint, save_checkpoint
from .scenario import NetworkScenario
from .traces import NormStats, fit_normalization

BEST_CHECKPOINT = "best.ckpt"
METRICS_LOG = "metrics.jsonl"
TIMING_LOG = "timing.jsonl"


# ------------------------------------------------------------ loss / metric

def _positive(actual, what="label"):
    a = np.asarray(actual, dtype=np.float64)
    if np.any(~(a > 0)):
        raise NonPositiveLabel(f"every {what} must be > 0")
    return a


def log_mse_loss(predicted, actual):
    """Mean over flows of (ln y_hat - ln y)^2. Accepts a Var for ``predicted``."""
    y = _positive(actual).reshape(-1, 1)
    # ln(p / y) rather than ln p - ln y: one rounding instead of two
    if isinstance(predicted, ad.Var):
        return ad.mean(ad.square(ad.log_ratio(predicted, y.reshape(predicted.value.shape))))
    p = _positive(predicted, "prediction").reshape(-1, 1)
    return float(np.mean(np.log(p / y) ** 2))


def mape(predicted, actual) -> float:
    """100 * mean |y_hat - y| / y."""
    y = _positive(actual).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    return float(100.0 * np.mean(np.abs(p - y) / y))


# ------------------------------------------------------------ config / reports

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-4
    max_epochs: int = 100
    seed: int = 0
    t_max: int = DEFAULT_T_MAX
    threshold: float = DEFAULT_THRESHOLD
    model: ModelConfig = field(default_factory=ModelConfig)
    clip_norm: float | None = None        # global gradient-norm clip; off by default
    lr_decay: float | None = None         # per-epoch multiplicative factor; off by default
    checkpoint_dir: str | None = None
    target_train_mape: float | None = None  # stop after the first epoch whose training MAPE is below
    exact_train_metrics: bool = False       # re-evaluate the training set after each epoch

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if self.t_max < 1:
            raise InvalidConfig("t_max must be >= 1")
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig(**self.model))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_loss: float
    train_mape: float
    val_mape: float
    wall_time_s: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("train_loss", "train_mape", "val_mape"):
            if not np.isfinite(getattr(self, name)):
                raise NumericalError(f"epoch {self.epoch}: {name} is not finite")

    def record(self) -> dict:
        """The reproducible part of the report (no wall time)."""
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "train_mape": self.train_mape, "val_mape": self.val_mape}


@dataclass
class TrainResult:
    params: ModelParams        # best-validation parameters
    stats: NormStats
    best_epoch: int
    best_val_mape: float
    reports: list[EpochReport]
    checkpoint: Path | None

    def __iter__(self):  # (best checkpoint, reports)
        yield self.checkpoint if self.checkpoint is not None else self.params
        yield self.reports


# ------------------------------------------------------------ helpers

def _named(items) -> list[tuple[str, NetworkScenario]]:
    out = []
    for i, item in enumerate(items):
        if isinstance(item, tuple):
            out.append((str(item[0]), item[1]))
        else:
            out.append((f"#{i}", item))
    return out


def _require_labels(name, scenario):
    if scenario.labels is None:
        raise MissingLabels(f"scenario {name} has no labels")


def _grads(vars_: dict[str, ad.Var]) -> dict[str, np.ndarray]:
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vars_.items()}


def predict_graph(graph: ScenarioGraph, params: ModelParams, t_max=DEFAULT_T_MAX,
                  threshold=DEFAULT_THRESHOLD) -> np.ndarray:
    """Predictions in the graph's internal flow order."""
    with ad.no_grad():
        return forward(graph, params, t_max=t_max, threshold=threshold).delay.value[:, 0]


def pooled_mape(graphs: Sequence[ScenarioGraph], params, t_max=DEFAULT_T_MAX,
                threshold=DEFAULT_THRESHOLD) -> float:
    preds = [predict_graph(g, params, t_max, threshold) for g in graphs]
    return mape(np.concatenate(preds), np.concatenate([g.labels for g in graphs]))


def train_step(graph: ScenarioGraph, params: ModelParams, opt: OptState, config: TrainConfig,
               name: str = "?") -> tuple[float, np.ndarray]:
    """One Adam step on one scenario; returns (loss, pre-step predictions)."""
    vars_ = params.as_vars()
    out = forward(graph, vars_, t_max=config.t_max, threshold=config.threshold)
    loss = log_mse_loss(out.delay, graph.labels)
    if not np.isfinite(loss.value).all():
        raise NumericalError(f"non-finite loss on scenario {name}", scenario=name)
    ad.backward(loss)
    grads = _grads(vars_)
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericalError(f"non-finite gradient on scenario {name}", scenario=name)
    if config.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.clip_norm:
            grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
    adam_step(params, grads, opt)
    return float(loss.value.reshape(())), out.delay.value[:, 0].copy()


# ------------------------------------------------------------ training

def train(train_set, validation_set, config: TrainConfig = TrainConfig(),
          init: ModelParams | None = None, log=None) -> TrainResult:
    """Per-scenario Adam steps in seeded-shuffled order; keep the best-validation model.

    ``train_set`` / ``validation_set`` hold scenarios or ``(name, scenario)``
    pairs. Normalization is fitted on the training scenarios only. ``log``,
    if given, is called with each EpochReport.
    """
    train_named, val_named = _named(train_set), _named(validation_set)
    if not train_named:
        raise EmptyDataset("training set is empty")
    if not val_named:
        raise EmptyDataset("validation set is empty")
    for name, sc in train_named + val_named:
        _require_labels(name, sc)
    stats = fit_normalization([sc for _, sc in train_named])
    train_graphs = [compile_scenario(sc, stats) for _, sc in train_named]
    val_graphs = [compile_scenario(sc, stats) for _, sc in val_named]
    names = [n for n, _ in train_named]

    params = init.copy() if init is not None else init_params(config.seed, config.model)
    opt = OptState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / METRICS_LOG).write_text("")
            (out_dir / TIMING_LOG).write_text("")
        except OSError as exc:
            raise IoError(f"cannot prepare {out_dir}: {exc}") from exc

    reports: list[EpochReport] = []
    best = (np.inf, -1, None)
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        if config.lr_decay is not None:
            opt.lr = config.learning_rate * config.lr_decay ** epoch
        order = rng.permutation(len(train_graphs))
        losses, preds = np.empty(len(order)), [None] * len(order)
        for i in order:
            losses[i], preds[i] = train_step(train_graphs[i], params, opt, config, names[i])
        labels = np.concatenate([g.labels for g in train_graphs])
        if config.exact_train_metrics:
            preds = [predict_graph(g, params, config.t_max, config.threshold) for g in train_graphs]
            train_loss = float(np.mean([log_mse_loss(p, g.labels) for p, g in zip(preds, train_graphs)]))
        else:
            train_loss = float(np.mean(losses))
        train_mape = mape(np.concatenate(preds), labels)
        val_mape = pooled_mape(val_graphs, params, config.t_max, config.threshold)
        report = EpochReport(epoch, train_loss, train_mape, val_mape, time.perf_counter() - start)
        reports.append(report)
        if log is not None:
            log(report)

        if val_mape < best[0]:
            best = (val_mape, epoch, params.copy())
            if out_dir is not None:
                save_checkpoint(out_dir / BEST_CHECKPOINT, best[2],
                                _metadata(stats, config, epoch, val_mape))
        if out_dir is not None:
            _append(out_dir / METRICS_LOG, report.record())
            _append(out_dir / TIMING_LOG, {"epoch": epoch, "wall_time_s": report.wall_time_s})
        if config.target_train_mape is not None and train_mape < config.target_train_mape:
            break

    return TrainResult(best[2], stats, best[1], best[0], reports,
                       out_dir / BEST_CHECKPOINT if out_dir is not None else None)


def _metadata(stats, config, epoch, val_mape):
    tc = config.to_dict()
    tc.pop("checkpoint_dir")  # where a run is written must not change what it writes
    return {"norm_stats": stats.to_dict(), "train_config": tc,
            "best_epoch": epoch, "best_val_mape": val_mape}


def _append(path: Path, record: dict):
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------ evaluation

@dataclass
class Evaluation:
    mape: float
    per_scenario: dict[str, float]
    baseline_mape: float
    predictions: dict[str, np.ndarray]  # scenario flow order


def load_model(path) -> tuple[ModelParams, NormStats, dict]:
    params, meta = load_checkpoint(path)
    if "norm_stats" not in meta:
        raise ParseError("checkpoint carries no normalization statistics", path=path)
    return params, NormStats.from_dict(meta["norm_stats"]), meta


def baseline_no_queuing(scenario: NetworkScenario) -> np.ndarray:
    """Transmission plus propagation delay per flow, zero queuing (scenario order)."""
    lps = {lp.id: lp for lp in scenario.linkports}
    return np.array([sum(f.packet_size_bits / lps[p].bandwidth_bps + lps[p].propagation_delay_s
                         for p in f.path) for f in scenario.flows])


def evaluate(checkpoint, dataset: Iterable, t_max=None, threshold=None) -> Evaluation:
    """Pooled and per-scenario MAPE of a checkpoint (path or (params, stats))."""
    if isinstance(checkpoint, (str, Path)):
        params, stats, meta = load_model(checkpoint)
        tc = meta.get("train_config", {})
        t_max = t_max if t_max is not None else tc.get("t_max", DEFAULT_T_MAX)
        threshold = threshold if threshold is not None else tc.get("threshold", DEFAULT_THRESHOLD)
    else:
        params, stats = checkpoint
    t_max = DEFAULT_T_MAX if t_max is None else t_max
    threshold = DEFAULT_THRESHOLD if threshold is None else threshold
    named = _named(dataset)
    if not named:
        raise EmptyDataset("evaluation set is empty")
    per, preds, all_p, all_y, all_b = {}, {}, [], [], []
    for name, sc in named:
        _require_labels(name, sc)
        g = compile_scenario(sc, stats)
        p = g.to_scenario_order(predict_graph(g, params, t_max, threshold))
        y = np.asarray(sc.labels)
        per[name] = mape(p, y)
        preds[name] = p
        all_p.append(p)
        all_y.append(y)
        all_b.append(baseline_no_queuing(sc))
    y = np.concatenate(all_y)
    return Evaluation(mape(np.concatenate(all_p), y), per, mape(np.concatenate(all_b), y), preds)
