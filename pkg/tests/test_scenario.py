import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_scenario
from tracegnn.errors import (DanglingReference, DuplicatePortInPath, EmptyPath, InvalidScenario,
                             NonPositiveLabel, UnknownDevice, UnknownFlow, UnknownLinkPort)
from tracegnn.scenario import (Device, Flow, LinkPort, build_scenario, flows_through, path_hops,
                               ports_of_device, propagation_delay, transmission_delay)


def _two_device(paths=(("a", "b"), ("b", "c"))):
    devices = [Device("d0", "Router", ("a", "c")), Device("d1", "Switch", ("b",))]
    lps = [LinkPort("a", "d0", 1e6), LinkPort("b", "d1", 2e6), LinkPort("c", "d0", 1e7)]
    flows = [Flow(f"f{i}", p, 1e5, 10, 8000.0) for i, p in enumerate(paths)]
    return build_scenario(devices, lps, flows)


def test_minimal_scenario():
    sc = build_scenario([Device("d0", "Router", ("p0",))], [LinkPort("p0", "d0", 1e6)],
                        [Flow("f0", ("p0",), 1e5, 10, 8000.0)])
    assert len(sc.flows) == 1 and sc.labels is None


def test_duplicate_port_in_path():
    with pytest.raises(DuplicatePortInPath):
        Flow("f0", ("p0", "p0"), 1e5, 10, 8000.0)


def test_empty_path():
    with pytest.raises(EmptyPath):
        Flow("f0", (), 1e5, 10, 8000.0)


def test_dangling_path():
    with pytest.raises(DanglingReference):
        build_scenario([Device("d0", "Router", ("p0",))], [LinkPort("p0", "d0", 1e6)],
                       [Flow("f0", ("p9",), 1e5, 10, 8000.0)])


def test_dangling_device():
    with pytest.raises(DanglingReference):
        build_scenario([Device("d0", "Router", ("p0",))], [LinkPort("p0", "d0", 1e6), LinkPort("p1", "dx", 1e6)],
                       [Flow("f0", ("p0",), 1e5, 10, 8000.0)])


@pytest.mark.parametrize("label", [0.0, -1.0, float("nan")])
def test_non_positive_label(label):
    with pytest.raises(NonPositiveLabel):
        build_scenario([Device("d0", "Router", ("p0",))], [LinkPort("p0", "d0", 1e6)],
                       [Flow("f0", ("p0",), 1e5, 10, 8000.0)], [label])


def test_non_positive_label_is_invalid_scenario():
    assert issubclass(NonPositiveLabel, InvalidScenario)


def test_duplicate_ids():
    with pytest.raises(InvalidScenario):
        build_scenario([Device("d0", "Router", ("p0",))], [LinkPort("p0", "d0", 1e6)],
                       [Flow("f0", ("p0",), 1e5, 10, 8000.0), Flow("f0", ("p0",), 1e5, 10, 8000.0)])


def test_flows_through():
    sc = _two_device()
    assert flows_through(sc, "b") == [("f0", 1), ("f1", 0)]
    assert flows_through(sc, "c") == [("f1", 1)]


def test_flows_through_unused_port():
    sc = _two_device(paths=(("a",),))
    assert flows_through(sc, "c") == []
    with pytest.raises(UnknownLinkPort):
        flows_through(sc, "zz")


def test_ports_of_device():
    sc = _two_device()
    assert ports_of_device(sc, "d0") == ["a", "c"]
    assert ports_of_device(sc, "d1") == ["b"]
    with pytest.raises(UnknownDevice):
        ports_of_device(sc, "nope")


def test_path_hops():
    sc = _two_device()
    assert path_hops(sc, "f0") == [("a", "d0"), ("b", "d1")]
    with pytest.raises(UnknownFlow):
        path_hops(sc, "nope")


def test_delays():
    sc = _two_device()
    f0 = sc.flow("f0")
    assert transmission_delay(sc, f0) == 8000 / 1e6 + 8000 / 2e6
    assert propagation_delay(sc, f0) == 0.0


def test_bins_cannot_exceed_packets():
    with pytest.raises(InvalidScenario):
        Flow("f0", ("p0",), 1e5, 1, 8000.0, (1, 1) + (0,) * 998)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_through_and_hops_agree(seed):
    sc = random_scenario(seed)
    for lp in sc.linkports:
        for fid, pos in flows_through(sc, lp.id):
            assert path_hops(sc, fid)[pos][0] == lp.id
    for f in sc.flows:
        for pos, (lp_id, dev_id) in enumerate(path_hops(sc, f.id)):
            assert (f.id, pos) in flows_through(sc, lp_id)
            assert sc.linkport(lp_id).device_id == dev_id
