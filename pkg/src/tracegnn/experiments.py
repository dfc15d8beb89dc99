"""Recipes for the overfit and generalization runs (shared by scripts/ and tests)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nn import ModelConfig
from .simulator import DatasetPart, GeneratorConfig, dataset_plan, generate_scenario
from .training import Evaluation, TrainConfig, TrainResult, baseline_no_queuing, evaluate, mape, train

# Message passing is unrolled to 8 steps during these runs: at 40 the untrained
# recurrence washes out the flow features and training stalls at the
# constant-predictor loss (see scripts/depth_ablation.py).
RUN_MODEL = ModelConfig(packet_dim=16)
RUN_T_MAX = 8
RUN_LR = 1e-3


def build(config: GeneratorConfig) -> dict[str, list]:
    """Generate a dataset in memory: split -> [(name, scenario)]."""
    out: dict[str, list] = {"train": [], "validation": [], "test": []}
    for split, name, args in dataset_plan(config):
        out[split].append((name, generate_scenario(*args)))
    return out


@dataclass
class OverfitOutcome:
    result: TrainResult
    baseline_mape: float
    seconds: float

    @property
    def final_train_mape(self) -> float:
        return self.result.reports[-1].train_mape

    @property
    def epochs(self) -> int:
        return len(self.result.reports)


def overfit_data(seed=3) -> list:
    cfg = GeneratorConfig(parts=(DatasetPart("train", 10, 4, 6),), seed=seed)
    return build(cfg)["train"]


def overfit(seed=0, max_epochs=500, target=5.0, lr=RUN_LR, t_max=RUN_T_MAX,
            model: ModelConfig = RUN_MODEL, data=None) -> OverfitOutcome:
    """Fit 10 small scenarios; stop once training MAPE (re-evaluated) < target."""
    data = data if data is not None else overfit_data()
    cfg = TrainConfig(learning_rate=lr, max_epochs=max_epochs, seed=seed, t_max=t_max, model=model,
                      target_train_mape=target, exact_train_metrics=True)
    start = time.perf_counter()
    result = train(data, data, cfg)
    y = np.concatenate([sc.labels for _, sc in data])
    base = mape(np.concatenate([baseline_no_queuing(sc) for _, sc in data]), y)
    return OverfitOutcome(result, base, time.perf_counter() - start)


GENERALIZATION_DATA = GeneratorConfig(
    parts=(DatasetPart("train", 200, 4, 8),
           DatasetPart("validation", 20, 4, 8),
           DatasetPart("test", 25, 4, 8),
           DatasetPart("test", 25, 9, 10)),  # sizes never seen in training
    seed=11,
)


@dataclass
class GeneralizationOutcome:
    result: TrainResult
    test: Evaluation
    test_seen: Evaluation
    test_unseen: Evaluation
    seconds: float


def generalization(seed=0, max_epochs=30, lr=RUN_LR, t_max=RUN_T_MAX, model: ModelConfig = RUN_MODEL,
                   data_config: GeneratorConfig = GENERALIZATION_DATA, checkpoint_dir=None,
                   log=None) -> GeneralizationOutcome:
    start = time.perf_counter()
    data = build(data_config)
    cfg = TrainConfig(learning_rate=lr, max_epochs=max_epochs, seed=seed, t_max=t_max, model=model,
                      checkpoint_dir=checkpoint_dir)
    result = train(data["train"], data["validation"], cfg, log=log)
    model_ = (result.params, result.stats)
    test = data["test"]
    n_dev = {name: len(sc.devices) for name, sc in test}
    seen = [(n, sc) for n, sc in test if n_dev[n] <= 8]
    unseen = [(n, sc) for n, sc in test if n_dev[n] > 8]
    ev = lambda ds: evaluate(model_, ds, t_max=t_max)
    return GeneralizationOutcome(result, ev(test), ev(seen), ev(unseen), time.perf_counter() - start)

