import copy
import pytest
import numpy as np
from pathlib import Path
from dnn_dsse.feeder import FeederParser
from dnn_dsse.loads import LoadPdf, SamplerConfig

DATA_DIR = Path(__file__).parent.parent / 'data'


def line_z(self_z=complex(0.5, 1.0), mutual=complex(0.15, 0.4), phases=3):
    return [[[(self_z if i == j else mutual).real, (self_z if i == j else mutual).imag] for j in range(phases)]
            for i in range(phases)]


SMALL_FEEDER = {
    "name": "small",
    "bases": {"kva": 3000},
    "source": {"bus": "S", "voltage_pu": 1.0, "angle_deg": 0.0},
    "buses": [
        {"id": "S", "phases": "abc", "base_kv": 12.47},
        {"id": "A", "phases": "abc", "base_kv": 12.47},
        {"id": "B", "phases": "abc", "base_kv": 12.47},
        {"id": "C", "phases": "a", "base_kv": 12.47},
    ],
    "branches": [
        {"id": "L1", "from": "S", "to": "A", "phases": "abc", "z": line_z()},
        {"id": "L2", "from": "A", "to": "B", "phases": "abc", "z": line_z()},
        {"id": "L3", "from": "A", "to": "C", "phases": "a", "z": [[[0.8, 0.9]]]},
    ],
    "loads": [
        {"id": "LB", "bus": "B", "connection": "wye", "meter_group": "TB",
         "pq": [{"phase": "a", "kw": 100, "kvar": 50}, {"phase": "b", "kw": 80, "kvar": 40},
                {"phase": "c", "kw": 120, "kvar": 60}]},
        {"id": "LC", "bus": "C", "connection": "wye", "meter_group": "TC",
         "pq": [{"phase": "a", "kw": 50, "kvar": 20}]},
        {"id": "LAD", "bus": "A", "connection": "delta",
         "pq": [{"phase": "ab", "kw": 60, "kvar": 30}]},
    ],
    "dgs": [{"id": "DGB", "bus": "B", "rating_kw": 90, "phases": "abc"}],
    "capacitors": [{"id": "CB", "bus": "B", "phases": "abc", "kvar_per_phase": 30}],
}


def switch_feeder_data():
    """The small feeder plus bus D fed either from A (SW1, normally closed) or from B (SW2, normally open)."""
    data = copy.deepcopy(SMALL_FEEDER)
    data["name"] = "small_switchable"
    data["buses"].append({"id": "D", "phases": "abc", "base_kv": 12.47})
    data["branches"] += [
        {"id": "SW1", "from": "A", "to": "D", "phases": "abc", "kind": "switch", "status": "closed"},
        {"id": "SW2", "from": "B", "to": "D", "phases": "abc", "kind": "switch", "status": "open"},
    ]
    data["loads"].append({"id": "LD", "bus": "D", "connection": "wye", "meter_group": "TD",
                          "pq": [{"phase": ph, "kw": 40, "kvar": 20} for ph in "abc"]})
    return data


def random_feeder_data(seed, n_buses, n_switches=0, extra_branches=0):
    """
    A random feeder: a spanning tree rooted at the three-phase source with occasional single-phase laterals,
    optional extra branches that close loops, and switches drawn among all branches. Closing every switch
    always energizes the whole tree.
    """
    rng = np.random.default_rng(seed)
    phases = ["abc"]
    branches = []

    def line(branch_id, f, t, ph):
        self_z = complex(*rng.uniform([0.2, 0.4], [0.8, 1.2]))
        mutual = complex(*rng.uniform([0.05, 0.1], [0.15, 0.3]))
        return {"id": branch_id, "from": f"B{f}", "to": f"B{t}", "phases": ph, "z": line_z(self_z, mutual, len(ph))}

    for k in range(1, n_buses):
        parent = int(rng.integers(0, k))
        ph = phases[parent]
        if len(ph) == 3 and rng.random() < 0.3:
            ph = str(rng.choice(list(ph)))
        phases.append(ph)
        branches.append(line(f"L{k}", parent, k, ph))

    linked = {frozenset((b["from"], b["to"])) for b in branches}
    for m in range(extra_branches):
        i, j = (int(v) for v in rng.choice(n_buses, size=2, replace=False))
        common = "".join(p for p in "abc" if p in phases[i] and p in phases[j])
        if common and frozenset((f"B{i}", f"B{j}")) not in linked:
            linked.add(frozenset((f"B{i}", f"B{j}")))
            branches.append(line(f"X{m}", i, j, common))

    for k in rng.choice(len(branches), size=min(n_switches, len(branches)), replace=False):
        branch = branches[int(k)]
        del branch["z"]
        branch.update(kind="switch", status="closed" if rng.random() < 0.5 else "open")

    loads = []
    for k in range(1, n_buses):
        if rng.random() < 0.6 or (k == n_buses - 1 and not loads):
            pq = []
            for p in phases[k]:
                kw = float(rng.uniform(10, 80))
                pq.append({"phase": p, "kw": kw, "kvar": 0.4 * kw})
            loads.append({"id": f"LD{k}", "bus": f"B{k}", "connection": "wye", "meter_group": f"T{k}", "pq": pq})
        if len(phases[k]) == 3 and rng.random() < 0.2:
            loads.append({"id": f"LX{k}", "bus": f"B{k}", "connection": "delta",
                          "pq": [{"phase": "ab", "kw": float(rng.uniform(10, 40)), "kvar": 5.0}]})
    dgs = []
    three_phase = [k for k in range(1, n_buses) if len(phases[k]) == 3]
    if three_phase and rng.random() < 0.3:
        dgs.append({"id": "DG1", "bus": f"B{int(rng.choice(three_phase))}", "rating_kw": 60, "phases": "abc"})
    return {
        "name": f"random_{seed}",
        "bases": {"kva": 3000},
        "source": {"bus": "B0", "voltage_pu": 1.0, "angle_deg": 0.0},
        "buses": [{"id": f"B{k}", "phases": ph, "base_kv": 12.47} for k, ph in enumerate(phases)],
        "branches": branches,
        "loads": loads,
        "dgs": dgs,
    }


@pytest.fixture
def small_feeder_data():
    return copy.deepcopy(SMALL_FEEDER)


@pytest.fixture
def small_feeder():
    return FeederParser.from_dict(copy.deepcopy(SMALL_FEEDER))


@pytest.fixture
def switch_feeder():
    return FeederParser.from_dict(switch_feeder_data())


@pytest.fixture(scope='session')
def ieee34():
    return FeederParser.load(str(DATA_DIR / 'ieee34.json'))


@pytest.fixture(scope='session')
def ieee34_switchable():
    return FeederParser.load(str(DATA_DIR / 'ieee34_switchable.json'))


@pytest.fixture
def sampler():
    return SamplerConfig((0.95, 1.0), (0.5, 1.5), 7)


def pdfs_for(model, spread=0.1):
    """Narrow load distributions around the nameplate power of every metered group."""
    nominal = {}
    for ld in model.loads:
        if ld.meter_group:
            nominal[ld.meter_group] = nominal.get(ld.meter_group, 0.0) + ld.total_kw
    return {g: LoadPdf(g, np.array([kw * (1 - spread), kw, kw * (1 + spread)]), kw * spread / 2)
            for g, kw in nominal.items()}


@pytest.fixture
def small_pdfs(small_feeder):
    return pdfs_for(small_feeder)


@pytest.fixture
def switch_pdfs(switch_feeder):
    return pdfs_for(switch_feeder)
