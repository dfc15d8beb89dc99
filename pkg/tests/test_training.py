import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import line_scenario, random_scenario
from tracegnn import autodiff as ad
from tracegnn.errors import EmptyDataset, InvalidConfig, MissingLabels, NonPositiveLabel, ParseError
from tracegnn.model import compile_scenario, predict
from tracegnn.nn import ModelConfig, OptState, init_params, save_checkpoint
from tracegnn.simulator import (FlowSkeleton, ScenarioSkeleton, SimConfig, TrafficSpec, packet_times,
                                simulate)
from tracegnn.scenario import Device, Distribution, LinkPort
from tracegnn.traces import fit_normalization
from tracegnn.training import (METRICS_LOG, TIMING_LOG, TrainConfig, baseline_no_queuing, evaluate,
                               load_model, log_mse_loss, mape, train, train_step)

SMALL = ModelConfig(flow_dim=8, linkport_dim=8, device_dim=4)


def _config(tmp=None, **kw):
    base = dict(learning_rate=1e-3, max_epochs=2, seed=0, t_max=4, model=SMALL)
    base.update(kw)
    return TrainConfig(checkpoint_dir=str(tmp) if tmp else None, **base)


def _data(n=3, offset=0):
    return [(f"s{i}", random_scenario(offset + i, n_devices=3)) for i in range(n)]


# ------------------------------------------------------------ loss / metric

def test_log_mse_unit():
    y = np.array([0.01, 0.5, 3.0])
    assert log_mse_loss(math.e * y, y) == 1.0
    assert log_mse_loss([math.e], [1.0]) == 1.0


def test_log_mse_var_matches_array():
    y = np.array([0.2, 0.3])
    p = np.array([[0.1], [0.6]])
    assert float(log_mse_loss(ad.Var(p), y).value) == log_mse_loss(p, y)


def test_mape_examples():
    assert mape([1.0], [2.0]) == 50.0
    assert mape([3.0, 1.0], [2.0, 2.0]) == 50.0
    assert mape([0.5, 2.0], [0.5, 2.0]) == 0.0


def test_non_positive_label():
    with pytest.raises(NonPositiveLabel):
        mape([1.0], [0.0])
    with pytest.raises(NonPositiveLabel):
        log_mse_loss([1.0], [-1.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=20), st.floats(0.1, 10.0))
def test_loss_scale_only_depends_on_ratio(ys, k):
    y = np.array(ys)
    assert log_mse_loss(k * y, y) == pytest.approx(math.log(k) ** 2, rel=1e-9, abs=1e-15)
    assert mape(k * y, y) == pytest.approx(100 * abs(k - 1), rel=1e-9, abs=1e-9)


# ------------------------------------------------------------ training loop

def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(max_epochs=0)


def test_empty_and_unlabeled():
    with pytest.raises(EmptyDataset):
        train([], _data(1), _config())
    with pytest.raises(MissingLabels):
        train([random_scenario(0, labeled=False)], _data(1), _config())


def test_one_epoch_one_report():
    res = train(_data(2), _data(1, 10), _config(max_epochs=1))
    assert len(res.reports) == 1 and res.best_epoch == 0


def test_training_is_deterministic(tmp_path):
    runs = [train(_data(), _data(1, 10), _config(tmp_path / k)) for k in "ab"]
    assert [r.record() for r in runs[0].reports] == [r.record() for r in runs[1].reports]
    assert (tmp_path / "a/best.ckpt").read_bytes() == (tmp_path / "b/best.ckpt").read_bytes()
    assert (tmp_path / "a" / METRICS_LOG).read_bytes() == (tmp_path / "b" / METRICS_LOG).read_bytes()


def test_logs_keep_wall_time_separate(tmp_path):
    train(_data(2), _data(1, 10), _config(tmp_path))
    records = [json.loads(line) for line in (tmp_path / METRICS_LOG).read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert all("wall_time_s" not in r for r in records)
    timing = [json.loads(line) for line in (tmp_path / TIMING_LOG).read_text().splitlines()]
    assert all(t["wall_time_s"] > 0 for t in timing)


def test_best_checkpoint_reevaluates_exactly(tmp_path):
    val = _data(2, 10)
    res = train(_data(), val, _config(tmp_path, max_epochs=3))
    ev = evaluate(tmp_path / "best.ckpt", val)
    assert ev.mape == res.best_val_mape
    params, stats, meta = load_model(tmp_path / "best.ckpt")
    assert meta["best_epoch"] == res.best_epoch
    assert all(np.array_equal(params[n], res.params[n]) for n in params.names())


def test_loss_decreases_early():
    sc = random_scenario(3, n_devices=4)
    g = compile_scenario(sc, fit_normalization([sc]))
    p, opt = init_params(0, SMALL), OptState(lr=1e-3)
    losses = [train_step(g, p, opt, _config())[0] for _ in range(10)]
    assert losses[-1] < losses[0]


def test_target_mape_stops_early():
    res = train(_data(2), _data(1), _config(max_epochs=5, target_train_mape=1e9))
    assert len(res.reports) == 1


# ------------------------------------------------------------ evaluation

def _perfect():
    sc = random_scenario(4, n_devices=4)
    stats = fit_normalization([sc])
    p = init_params(1, SMALL)
    return sc.with_labels(predict(sc, p, stats, t_max=4)), p, stats


def test_evaluate_perfect_fixture():
    sc, p, stats = _perfect()
    ev = evaluate((p, stats), [("s", sc)], t_max=4)
    assert ev.mape == 0.0 and ev.per_scenario == {"s": 0.0}
    assert ev.baseline_mape > 0


def test_evaluate_via_checkpoint(tmp_path):
    sc, p, stats = _perfect()
    save_checkpoint(tmp_path / "m.ckpt", p, {"norm_stats": stats.to_dict(), "train_config": {"t_max": 4}})
    assert evaluate(tmp_path / "m.ckpt", [sc]).mape == 0.0


def test_evaluate_needs_labels_and_stats(tmp_path):
    sc, p, stats = _perfect()
    with pytest.raises(MissingLabels):
        evaluate((p, stats), [sc.with_labels(None)])
    save_checkpoint(tmp_path / "bare.ckpt", p)
    with pytest.raises(ParseError):
        evaluate(tmp_path / "bare.ckpt", [sc])


def _skeleton(n_flows):
    devices = (Device("a", "Router", ("pa",)), Device("b", "Switch", ("pb",)))
    lps = (LinkPort("pa", "a", 1e6, 1e-4), LinkPort("pb", "b", 1e6, 1e-4))
    flows = (FlowSkeleton("f0", ("pa", "pb"), 8000.0, Distribution.CBR),
             FlowSkeleton("f1", ("pa",), 8000.0, Distribution.MB))
    return ScenarioSkeleton(devices, lps, flows[:n_flows])


def test_baseline_exact_when_uncontended():
    sc = simulate(_skeleton(1), {"f0": packet_times(TrafficSpec(Distribution.CBR, 1e5, 8000.0), 3.0, 0)},
                  SimConfig(3.0, 1.0))
    np.testing.assert_allclose(baseline_no_queuing(sc), sc.labels, rtol=1e-9)


def test_baseline_below_congested_labels():
    streams = {"f0": packet_times(TrafficSpec(Distribution.CBR, 4e5, 8000.0), 3.0, 0),
               "f1": packet_times(TrafficSpec(Distribution.MB, 4e5, 8000.0, 20, 1e7), 3.0, 1)}
    sc = simulate(_skeleton(2), streams, SimConfig(3.0, 1.0))
    assert np.all(baseline_no_queuing(sc) < np.asarray(sc.labels))


def test_baseline_line():
    sc = line_scenario(bandwidths=(1e6, 2e6), size=8000.0, prop=1e-3)
    assert baseline_no_queuing(sc)[0] == pytest.approx(0.008 + 0.004 + 2e-3)
