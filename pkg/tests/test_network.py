import itertools
import pytest
import numpy as np
from dnn_dsse.feeder import FeederParser, FeederError, SwitchConfig
from dnn_dsse.network import NetworkBuilder
from conftest import random_feeder_data


def reachable_by_search(model, config):
    """Plain breadth-first search over closed branches, independent of networkx."""
    status = dict(zip(model.switch_ids, config.statuses))
    edges = [(b.from_bus, b.to_bus) for b in model.branches if not b.is_switch or status[b.id]]
    seen, frontier = {model.source.bus}, [model.source.bus]
    while frontier:
        bus = frontier.pop()
        for f, t in edges:
            for a, b in ((f, t), (t, f)):
                if a == bus and b not in seen:
                    seen.add(b)
                    frontier.append(b)
    return seen


def test_enumerate_small(switch_feeder):
    catalog = NetworkBuilder.enumerate_feasible_topologies(switch_feeder)
    assert [c.label() for c in catalog.configs] == ["01", "10", "11"]
    assert catalog.switch_ids == ("SW1", "SW2")


@pytest.mark.parametrize("label, feasible, radial", [
    ("00", False, False),
    ("01", True, True),
    ("10", True, True),
    ("11", True, False),
])
def test_check_connectivity(switch_feeder, label, feasible, radial):
    config = SwitchConfig.from_string(label)
    assert NetworkBuilder.check_connectivity(switch_feeder, config) is feasible
    assert NetworkBuilder.check_connectivity(switch_feeder, config, radial=True) is radial


def test_enumerate_matches_search(ieee34_switchable):
    catalog = NetworkBuilder.enumerate_feasible_topologies(ieee34_switchable)
    expected = []
    for statuses in itertools.product((False, True), repeat=4):
        config = SwitchConfig(statuses)
        seen = reachable_by_search(ieee34_switchable, config)
        if all(bus in seen for bus in ieee34_switchable.injection_buses()):
            expected.append(config.label())
    assert [c.label() for c in catalog.configs] == expected
    assert len(catalog) == 9
    for label in ("0101", "1010", "1100"):
        assert catalog.index_of(SwitchConfig.from_string(label)) >= 0


@pytest.mark.parametrize("seed", range(100))
def test_enumerate_matches_search_on_random_feeders(seed):
    data = random_feeder_data(seed, n_buses=4 + seed % 9, n_switches=1 + seed % 10, extra_branches=seed % 4)
    model = FeederParser.from_dict(data)
    assert 1 <= len(model.switch_ids) <= 10
    expected, expected_radial = [], []
    for statuses in itertools.product((False, True), repeat=len(model.switch_ids)):
        config = SwitchConfig(statuses)
        seen = reachable_by_search(model, config)
        if all(bus in seen for bus in model.injection_buses()):
            expected.append(config.label())
            status = dict(zip(model.switch_ids, statuses))
            energized = [b for b in model.branches
                         if (not b.is_switch or status[b.id]) and b.from_bus in seen]
            # a connected bus set is loop free when it carries one branch fewer than it has buses
            if len(energized) == len(seen) - 1:
                expected_radial.append(config.label())
    assert expected
    catalog = NetworkBuilder.enumerate_feasible_topologies(model)
    assert [c.label() for c in catalog.configs] == expected
    radial = NetworkBuilder.enumerate_feasible_topologies(model, radial=True)
    assert [c.label() for c in radial.configs] == expected_radial


def test_no_switches(small_feeder):
    catalog = NetworkBuilder.enumerate_feasible_topologies(small_feeder)
    assert len(catalog) == 1
    assert catalog.configs[0].label() == ""


def test_radial_filter(switch_feeder):
    # closing both switches makes the loop A-B-D-A
    radial = NetworkBuilder.enumerate_feasible_topologies(switch_feeder, radial=True)
    assert [c.label() for c in radial.configs] == ["01", "10"]


def test_config_length_checked(switch_feeder):
    with pytest.raises(FeederError):
        NetworkBuilder.closed_branches(switch_feeder, SwitchConfig.from_string("1"))


def test_apply_switch_config(switch_feeder):
    view = NetworkBuilder.apply_switch_config(switch_feeder, SwitchConfig.from_string("10"))
    assert "SW2" not in view.closed_branches
    assert view.is_energized("D")
    assert len(view.node_index) == 3 + 3 + 3 + 1 + 3
    with pytest.raises(FeederError, match="islands"):
        NetworkBuilder.apply_switch_config(switch_feeder, SwitchConfig.from_string("00"))


def test_deenergized_bus_without_injection(switch_feeder):
    data = FeederParser.to_dict(switch_feeder)
    data["loads"] = [ld for ld in data["loads"] if ld["bus"] != "D"]
    model = FeederParser.from_dict(data)
    view = NetworkBuilder.apply_switch_config(model, SwitchConfig.from_string("00"))
    assert not view.is_energized("D")
    assert ("D", "a") not in view.node_index


def test_ybus_properties(ieee34):
    y, index = NetworkBuilder.build_ybus(ieee34, ieee34.normal_config())
    assert y.shape == (len(index), len(index))
    assert len(index) == sum(len(b.phases) for b in ieee34.buses)
    assert np.allclose(y, y.T)


def test_ybus_rows_sum_to_shunts(small_feeder):
    # without shunts every row sums to zero, so capacitor admittance is all that remains
    y, index = NetworkBuilder.build_ybus(small_feeder, small_feeder.normal_config())
    row_sums = y.sum(axis=1)
    expected = np.zeros(len(index), dtype=complex)
    for k in index.positions("B", "abc"):
        expected[k] = 1j * 30 / 1000
    assert np.allclose(row_sums, expected)


def test_tap_raises_downstream_voltage(small_feeder_data):
    small_feeder_data["branches"][0].update({"kind": "regulator", "tap": [1.05, 1.05, 1.05]})
    model = FeederParser.from_dict(small_feeder_data)
    prim = NetworkBuilder.branch_primitive(model, model.branch("L1"))
    # with no current the to side sits at tap times the from side
    v_f = np.array([1.0, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)])
    v_t = 1.05 * v_f
    assert np.allclose(prim.ytf @ v_f + prim.ytt @ v_t, 0)
    assert np.allclose(prim.yff @ v_f + prim.yft @ v_t, 0)


def test_primitive_units(small_feeder):
    prim = NetworkBuilder.branch_primitive(small_feeder, small_feeder.branch("L3"))
    z_base = small_feeder.impedance_base("C")
    assert prim.yff[0, 0] == pytest.approx(z_base / complex(0.8, 0.9))
    assert prim.yft[0, 0] == pytest.approx(-prim.yff[0, 0])


def test_source_voltages(small_feeder):
    slack = NetworkBuilder.source_voltages(small_feeder)
    assert abs(slack["a"]) == pytest.approx(1.0)
    assert np.degrees(np.angle(slack["b"])) == pytest.approx(-120.0)
    assert np.degrees(np.angle(slack["c"])) == pytest.approx(120.0)


if __name__ == '__main__':
    pytest.main()
