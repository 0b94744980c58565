import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np

"""
feeder.py

Immutable description of an unbalanced three-phase feeder: buses, branches (lines, transformers, regulators and
switches), wye and delta loads, distributed generators, capacitor banks and the slack source. Feeder files are JSON
documents; the parser resolves linecodes into per-branch impedance matrices and validates every cross-reference.
"""

PHASES = ('a', 'b', 'c')
PHASE_SHIFT_DEG = {'a': 0.0, 'b': -120.0, 'c': 120.0}
DELTA_PAIRS = ('ab', 'bc', 'ca')
BRANCH_KINDS = ('line', 'transformer', 'regulator', 'switch')
SWITCH_IMPEDANCE_OHM = 1e-4 + 0j
LENGTH_PER_MILE = {'mi': 1.0, 'ft': 1.0 / 5280.0, 'km': 1.0 / 1.609344, 'm': 1.0 / 1609.344}
MAX_ENUMERATION_SWITCHES = 20

ComplexMatrix = Tuple[Tuple[complex, ...], ...]


class FeederError(ValueError):
    """Raised for feeder files or switch configurations that violate the feeder schema or its invariants."""


def wrap_angle(degrees):
    """
    Wrap angles in degrees into (-180, 180]. Works on scalars and numpy arrays.
    :param degrees: angle or array of angles
    :return: wrapped angle(s)
    """
    return 180.0 - np.mod(180.0 - np.asarray(degrees, dtype=float), 360.0)


@dataclass(frozen=True)
class Phasor:
    magnitude: float
    angle_deg: float

    def __post_init__(self):
        if not self.magnitude >= 0:
            raise ValueError(f"Phasor magnitude must be nonnegative, got {self.magnitude}")
        object.__setattr__(self, 'magnitude', float(self.magnitude))
        object.__setattr__(self, 'angle_deg', float(wrap_angle(self.angle_deg)))

    @classmethod
    def from_complex(cls, value: complex) -> 'Phasor':
        return cls(abs(value), float(np.degrees(np.angle(value))))

    def to_complex(self) -> complex:
        return complex(self.magnitude * np.exp(1j * np.radians(self.angle_deg)))


@dataclass(frozen=True)
class Bus:
    id: str
    phases: Tuple[str, ...]
    base_kv: float


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: Tuple[str, ...]
    kind: str
    series_impedance: ComplexMatrix
    shunt_admittance: Optional[ComplexMatrix] = None
    tap: Optional[Tuple[float, ...]] = None
    normally_closed: bool = True

    @property
    def is_switch(self) -> bool:
        return self.kind == 'switch'

    def impedance_matrix(self) -> np.ndarray:
        return np.array(self.series_impedance, dtype=complex)

    def shunt_matrix(self) -> np.ndarray:
        n = len(self.phases)
        if self.shunt_admittance is None:
            return np.zeros((n, n), dtype=complex)
        return np.array(self.shunt_admittance, dtype=complex)

    def tap_vector(self) -> np.ndarray:
        if self.tap is None:
            return np.ones(len(self.phases))
        return np.array(self.tap, dtype=float)


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    connection: str
    per_phase_pq: Tuple[Tuple[str, float, float], ...]
    meter_group: Optional[str] = None

    @property
    def total_kw(self) -> float:
        return sum(kw for _, kw, _ in self.per_phase_pq)


@dataclass(frozen=True)
class Dg:
    id: str
    bus: str
    rating_kw: float
    phases: Tuple[str, ...]


@dataclass(frozen=True)
class Capacitor:
    id: str
    bus: str
    phases: Tuple[str, ...]
    kvar_per_phase: float


@dataclass(frozen=True)
class Source:
    bus: str
    voltage_pu: float = 1.0
    angle_deg: float = 0.0


@dataclass(frozen=True)
class SwitchConfig:
    statuses: Tuple[bool, ...]

    @classmethod
    def from_string(cls, text: str) -> 'SwitchConfig':
        """
        Parse a status string such as '1011' (1 = closed) into a SwitchConfig.
        """
        if any(ch not in '01' for ch in text):
            raise FeederError(f"Switch status string may only hold 0 and 1: '{text}'")
        return cls(tuple(ch == '1' for ch in text))

    def label(self) -> str:
        return ''.join('1' if s else '0' for s in self.statuses)

    def __len__(self):
        return len(self.statuses)


@dataclass(frozen=True)
class TopologyCatalog:
    switch_ids: Tuple[str, ...]
    configs: Tuple[SwitchConfig, ...]

    def __post_init__(self):
        if len(set(self.configs)) != len(self.configs):
            raise FeederError("Topology catalog holds duplicate switch configurations")

    def __len__(self):
        return len(self.configs)

    def __getitem__(self, index) -> SwitchConfig:
        return self.configs[index]

    def index_of(self, config: SwitchConfig) -> int:
        try:
            return self.configs.index(config)
        except ValueError:
            raise FeederError(f"Switch configuration {config.label()} is not in the topology catalog")

    def label_map(self) -> Dict[int, str]:
        return {i: c.label() for i, c in enumerate(self.configs)}

    def to_dict(self) -> dict:
        return {'switch_ids': list(self.switch_ids), 'configs': [c.label() for c in self.configs]}

    @classmethod
    def from_dict(cls, data: dict) -> 'TopologyCatalog':
        return cls(tuple(data['switch_ids']), tuple(SwitchConfig.from_string(s) for s in data['configs']))


class NodeIndex:
    """
    Canonical ordering of (bus, phase) pairs: bus id sort, then phase a < b < c. Every vector over node-phases in the
    package follows this order.
    """

    def __init__(self, nodes: Iterable[Tuple[str, str]]):
        self.nodes: Tuple[Tuple[str, str], ...] = tuple(sorted(nodes, key=lambda n: (n[0], PHASES.index(n[1]))))
        self.position: Dict[Tuple[str, str], int] = {node: i for i, node in enumerate(self.nodes)}

    @classmethod
    def for_buses(cls, buses: Iterable[Bus]) -> 'NodeIndex':
        return cls((bus.id, ph) for bus in buses for ph in bus.phases)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node):
        return node in self.position

    def __getitem__(self, node) -> int:
        return self.position[node]

    def __eq__(self, other):
        return isinstance(other, NodeIndex) and self.nodes == other.nodes

    def __hash__(self):
        return hash(self.nodes)

    def names(self) -> List[str]:
        return [f"{bus}.{ph}" for bus, ph in self.nodes]

    def positions(self, bus_id: str, phases: Sequence[str]) -> List[int]:
        return [self.position[(bus_id, ph)] for ph in phases]


@dataclass(frozen=True)
class FeederModel:
    name: str
    kva_base: float
    source: Source
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    loads: Tuple[Load, ...] = ()
    dgs: Tuple[Dg, ...] = ()
    capacitors: Tuple[Capacitor, ...] = ()
    _bus_map: Dict[str, Bus] = field(default=None, init=False, repr=False, compare=False, hash=False)
    _branch_map: Dict[str, Branch] = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, '_bus_map', {b.id: b for b in self.buses})
        object.__setattr__(self, '_branch_map', {b.id: b for b in self.branches})

    @property
    def switch_ids(self) -> Tuple[str, ...]:
        return tuple(b.id for b in self.branches if b.is_switch)

    @property
    def phase_base_kva(self) -> float:
        return self.kva_base / 3.0

    def bus(self, bus_id: str) -> Bus:
        try:
            return self._bus_map[bus_id]
        except KeyError:
            raise FeederError(f"Unknown bus '{bus_id}'")

    def branch(self, branch_id: str) -> Branch:
        try:
            return self._branch_map[branch_id]
        except KeyError:
            raise FeederError(f"Unknown branch '{branch_id}'")

    def has_branch(self, branch_id: str) -> bool:
        return branch_id in self._branch_map

    def impedance_base(self, bus_id: str) -> float:
        """Impedance base in ohms for a bus, from its line-to-line kV and the three-phase kVA base."""
        kv = self.bus(bus_id).base_kv
        return kv * kv * 1000.0 / self.kva_base

    def normal_config(self) -> SwitchConfig:
        return SwitchConfig(tuple(self.branch(s).normally_closed for s in self.switch_ids))

    def node_index(self) -> NodeIndex:
        return NodeIndex.for_buses(self.buses)

    def injection_buses(self) -> List[str]:
        return sorted({ld.bus for ld in self.loads} | {dg.bus for dg in self.dgs})

    def fingerprint(self) -> str:
        """SHA-256 over the canonical serialization. Checkpoints and datasets carry it to detect feeder mismatch."""
        text = json.dumps(FeederParser.to_dict(self), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


class FeederParser:
    """
    Reads and writes feeder documents. Powers are kW/kvar, impedances ohms, admittances siemens, voltages kV
    line-to-line, angles degrees. Branch impedances are referred to the voltage base of the to-bus.
    """

    @classmethod
    def load(cls, path: str) -> FeederModel:
        logging.info(f"Reading feeder file {path}")
        with open(path, 'r') as handle:
            return cls.parse(handle.read())

    @classmethod
    def parse(cls, text: str) -> FeederModel:
        """
        Parse and validate a feeder document.
        :param text: JSON feeder document
        :return: A validated FeederModel
        """
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise FeederError(f"Invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        if not isinstance(data, dict):
            raise FeederError("Feeder document must be an object at the top level")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> FeederModel:
        for key in ('buses', 'branches', 'source', 'bases'):
            if key not in data:
                raise FeederError(f"Missing required top-level key '{key}'")

        kva = cls._positive(data['bases'], 'kva', 'bases')
        buses = tuple(cls._parse_bus(b, i) for i, b in enumerate(cls._list(data, 'buses')))
        cls._check_unique((b.id for b in buses), 'bus')
        bus_map = {b.id: b for b in buses}

        linecodes = data.get('linecodes', {}) or {}
        branches = tuple(cls._parse_branch(b, i, bus_map, linecodes) for i, b in enumerate(cls._list(data, 'branches')))
        cls._check_unique((b.id for b in branches), 'branch')

        loads = tuple(cls._parse_load(ld, i, bus_map) for i, ld in enumerate(cls._list(data, 'loads')))
        dgs = tuple(cls._parse_dg(dg, i, bus_map) for i, dg in enumerate(cls._list(data, 'dgs')))
        capacitors = tuple(cls._parse_capacitor(c, i, bus_map) for i, c in enumerate(cls._list(data, 'capacitors')))
        cls._check_unique([e.id for e in loads] + [e.id for e in dgs] + [e.id for e in capacitors], 'element')

        source = cls._parse_source(data['source'], bus_map)
        model = FeederModel(name=str(data.get('name', 'feeder')), kva_base=kva, source=source, buses=buses,
                            branches=branches, loads=loads, dgs=dgs, capacitors=capacitors)
        cls._check_energizable(model)
        return model

    @classmethod
    def serialize(cls, model: FeederModel) -> str:
        return json.dumps(cls.to_dict(model), indent=2)

    @classmethod
    def to_dict(cls, model: FeederModel) -> dict:
        def matrix(m):
            return [[[z.real, z.imag] for z in row] for row in m]

        branches = []
        for br in model.branches:
            entry = {'id': br.id, 'from': br.from_bus, 'to': br.to_bus, 'phases': ''.join(br.phases),
                     'kind': br.kind, 'z': matrix(br.series_impedance)}
            if br.shunt_admittance is not None:
                entry['y_shunt'] = matrix(br.shunt_admittance)
            if br.tap is not None:
                entry['tap'] = list(br.tap)
            if br.is_switch:
                entry['status'] = 'closed' if br.normally_closed else 'open'
            branches.append(entry)

        return {
            'name': model.name,
            'bases': {'kva': model.kva_base},
            'source': {'bus': model.source.bus, 'voltage_pu': model.source.voltage_pu,
                       'angle_deg': model.source.angle_deg},
            'buses': [{'id': b.id, 'phases': ''.join(b.phases), 'base_kv': b.base_kv} for b in model.buses],
            'branches': branches,
            'loads': [{'id': ld.id, 'bus': ld.bus, 'connection': ld.connection,
                       'pq': [{'phase': ph, 'kw': kw, 'kvar': kvar} for ph, kw, kvar in ld.per_phase_pq],
                       'meter_group': ld.meter_group} for ld in model.loads],
            'dgs': [{'id': dg.id, 'bus': dg.bus, 'rating_kw': dg.rating_kw, 'phases': ''.join(dg.phases)}
                    for dg in model.dgs],
            'capacitors': [{'id': c.id, 'bus': c.bus, 'phases': ''.join(c.phases), 'kvar_per_phase': c.kvar_per_phase}
                           for c in model.capacitors],
        }

    @classmethod
    def _list(cls, data, key):
        value = data.get(key, [])
        if value is None:
            return []
        if not isinstance(value, list):
            raise FeederError(f"'{key}' must be a list")
        return value

    @classmethod
    def _check_unique(cls, ids, what):
        seen = set()
        for element_id in ids:
            if element_id in seen:
                raise FeederError(f"Duplicate {what} id '{element_id}'")
            seen.add(element_id)

    @classmethod
    def _field(cls, entry, key, path):
        if not isinstance(entry, dict):
            raise FeederError(f"{path}: expected an object")
        if key not in entry:
            raise FeederError(f"{path}: missing field '{key}'")
        return entry[key]

    @classmethod
    def _positive(cls, entry, key, path):
        value = cls._field(entry, key, path)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise FeederError(f"{path}.{key}: must be a positive number, got {value!r}")
        return float(value)

    @classmethod
    def _phases(cls, text, path):
        if not isinstance(text, str) or not text or any(ch not in PHASES for ch in text) or len(set(text)) != len(text):
            raise FeederError(f"{path}: phases must be a nonempty subset of 'abc', got {text!r}")
        return tuple(ph for ph in PHASES if ph in text)

    @classmethod
    def _matrix(cls, value, n, path):
        try:
            m = np.array([[complex(z[0], z[1]) for z in row] for row in value], dtype=complex)
        except (TypeError, IndexError, ValueError):
            raise FeederError(f"{path}: matrix entries must be [real, imaginary] pairs")
        if m.shape != (n, n):
            raise FeederError(f"{path}: expected a {n}x{n} matrix, got shape {m.shape}")
        return m

    @classmethod
    def _as_tuple(cls, m):
        return tuple(tuple(complex(z) for z in row) for row in m)

    @classmethod
    def _parse_bus(cls, entry, i) -> Bus:
        path = f"buses[{i}]"
        bus_id = str(cls._field(entry, 'id', path))
        path = f"buses[{i}] (bus '{bus_id}')"
        return Bus(bus_id, cls._phases(cls._field(entry, 'phases', path), f"{path}.phases"),
                   cls._positive(entry, 'base_kv', path))

    @classmethod
    def _parse_branch(cls, entry, i, bus_map, linecodes) -> Branch:
        branch_id = str(cls._field(entry, 'id', f"branches[{i}]"))
        path = f"branches[{i}] (branch '{branch_id}')"
        from_bus, to_bus = str(cls._field(entry, 'from', path)), str(cls._field(entry, 'to', path))
        for end in (from_bus, to_bus):
            if end not in bus_map:
                raise FeederError(f"{path}: dangling reference to bus '{end}'")
        if from_bus == to_bus:
            raise FeederError(f"{path}: from and to bus are identical")
        phases = cls._phases(cls._field(entry, 'phases', path), f"{path}.phases")
        for end in (from_bus, to_bus):
            missing = [ph for ph in phases if ph not in bus_map[end].phases]
            if missing:
                raise FeederError(f"{path}: phases {''.join(missing)} not present on bus '{end}'")
        kind = entry.get('kind', 'line')
        if kind not in BRANCH_KINDS:
            raise FeederError(f"{path}.kind: must be one of {BRANCH_KINDS}, got {kind!r}")
        if kind != 'transformer' and bus_map[from_bus].base_kv != bus_map[to_bus].base_kv:
            raise FeederError(f"{path}: only transformers may connect buses with different base_kv")

        n = len(phases)
        shunt = None
        if 'z' in entry:
            z = cls._matrix(entry['z'], n, f"{path}.z")
            if 'y_shunt' in entry:
                shunt = cls._matrix(entry['y_shunt'], n, f"{path}.y_shunt")
        elif 'linecode' in entry:
            z, shunt = cls._resolve_linecode(entry, phases, linecodes, path)
        elif kind == 'switch':
            z = np.eye(n, dtype=complex) * SWITCH_IMPEDANCE_OHM
        else:
            raise FeederError(f"{path}: needs either 'z' or 'linecode' with 'length'")

        if not np.allclose(z, z.T, rtol=1e-9, atol=1e-12):
            raise FeederError(f"{path}.z: impedance matrix must be symmetric")
        if abs(np.linalg.det(z)) < 1e-300 or np.linalg.cond(z) > 1e12:
            raise FeederError(f"{path}.z: singular branch impedance")

        tap = None
        if 'tap' in entry:
            if kind not in ('transformer', 'regulator'):
                raise FeederError(f"{path}.tap: only transformers and regulators carry taps")
            tap_value = entry['tap']
            tap = tuple(float(t) for t in (tap_value if isinstance(tap_value, list) else [tap_value] * n))
            if len(tap) != n or any(t <= 0 for t in tap):
                raise FeederError(f"{path}.tap: expected {n} positive per-phase ratios")

        status = entry.get('status', 'closed')
        if status not in ('closed', 'open'):
            raise FeederError(f"{path}.status: must be 'closed' or 'open', got {status!r}")
        if status == 'open' and kind != 'switch':
            raise FeederError(f"{path}.status: only switches may be open")

        return Branch(branch_id, from_bus, to_bus, phases, kind, cls._as_tuple(z),
                      None if shunt is None else cls._as_tuple(shunt), tap, status == 'closed')

    @classmethod
    def _resolve_linecode(cls, entry, phases, linecodes, path):
        code = str(entry['linecode'])
        if code not in linecodes:
            raise FeederError(f"{path}.linecode: dangling reference to linecode '{code}'")
        spec = linecodes[code]
        length = cls._positive(entry, 'length', path)
        unit = entry.get('length_unit', 'ft')
        if unit not in LENGTH_PER_MILE:
            raise FeederError(f"{path}.length_unit: must be one of {sorted(LENGTH_PER_MILE)}, got {unit!r}")
        miles = length * LENGTH_PER_MILE[unit]
        n = len(phases)
        z = cls._matrix(cls._field(spec, 'z', f"linecodes.{code}"), n, f"linecodes.{code}.z") * miles
        shunt = None
        if 'b_us' in spec:
            b = np.array(spec['b_us'], dtype=float)
            if b.shape != (n, n):
                raise FeederError(f"linecodes.{code}.b_us: expected a {n}x{n} matrix, got shape {b.shape}")
            shunt = 1j * b * 1e-6 * miles
        return z, shunt

    @classmethod
    def _parse_load(cls, entry, i, bus_map) -> Load:
        load_id = str(cls._field(entry, 'id', f"loads[{i}]"))
        path = f"loads[{i}] (load '{load_id}')"
        bus_id = str(cls._field(entry, 'bus', path))
        if bus_id not in bus_map:
            raise FeederError(f"{path}: dangling reference to bus '{bus_id}'")
        bus = bus_map[bus_id]
        connection = entry.get('connection', 'wye')
        if connection not in ('wye', 'delta'):
            raise FeederError(f"{path}.connection: must be 'wye' or 'delta'")
        if connection == 'delta' and len(bus.phases) < 2:
            raise FeederError(f"{path}: delta load on bus '{bus_id}' with fewer than two phases")

        per_phase = []
        for j, pq in enumerate(cls._field(entry, 'pq', path)):
            item = f"{path}.pq[{j}]"
            key = str(cls._field(pq, 'phase', item))
            allowed = PHASES if connection == 'wye' else DELTA_PAIRS
            if key not in allowed:
                raise FeederError(f"{item}.phase: {connection} loads use one of {allowed}, got {key!r}")
            missing = [ph for ph in key if ph not in bus.phases]
            if missing:
                raise FeederError(f"{item}: dangling reference, load '{load_id}' uses phase "
                                  f"{''.join(missing)} missing on bus '{bus_id}'")
            kw, kvar = float(cls._field(pq, 'kw', item)), float(pq.get('kvar', 0.0))
            if kw < 0:
                raise FeederError(f"{item}.kw: loads must not be negative, use a DG entry for generation")
            per_phase.append((key, kw, kvar))
        if not per_phase:
            raise FeederError(f"{path}.pq: at least one phase entry is required")
        group = entry.get('meter_group')
        return Load(load_id, bus_id, connection, tuple(per_phase), None if group is None else str(group))

    @classmethod
    def _parse_dg(cls, entry, i, bus_map) -> Dg:
        dg_id = str(cls._field(entry, 'id', f"dgs[{i}]"))
        path = f"dgs[{i}] (dg '{dg_id}')"
        bus_id = str(cls._field(entry, 'bus', path))
        if bus_id not in bus_map:
            raise FeederError(f"{path}: dangling reference to bus '{bus_id}'")
        phases = cls._phases(entry.get('phases', ''.join(bus_map[bus_id].phases)), f"{path}.phases")
        if any(ph not in bus_map[bus_id].phases for ph in phases):
            raise FeederError(f"{path}: dangling reference, phases not present on bus '{bus_id}'")
        return Dg(dg_id, bus_id, cls._positive(entry, 'rating_kw', path), phases)

    @classmethod
    def _parse_capacitor(cls, entry, i, bus_map) -> Capacitor:
        cap_id = str(cls._field(entry, 'id', f"capacitors[{i}]"))
        path = f"capacitors[{i}] (capacitor '{cap_id}')"
        bus_id = str(cls._field(entry, 'bus', path))
        if bus_id not in bus_map:
            raise FeederError(f"{path}: dangling reference to bus '{bus_id}'")
        phases = cls._phases(entry.get('phases', ''.join(bus_map[bus_id].phases)), f"{path}.phases")
        if any(ph not in bus_map[bus_id].phases for ph in phases):
            raise FeederError(f"{path}: dangling reference, phases not present on bus '{bus_id}'")
        return Capacitor(cap_id, bus_id, phases, cls._positive(entry, 'kvar_per_phase', path))

    @classmethod
    def _parse_source(cls, entry, bus_map) -> Source:
        bus_id = str(cls._field(entry, 'bus', 'source'))
        if bus_id not in bus_map:
            raise FeederError(f"source: dangling reference to bus '{bus_id}'")
        return Source(bus_id, float(entry.get('voltage_pu', 1.0)), float(entry.get('angle_deg', 0.0)))

    @classmethod
    def _check_energizable(cls, model: FeederModel):
        # Deferred import, the network module depends on the types defined here
        from dnn_dsse.network import NetworkBuilder
        if len(model.switch_ids) > MAX_ENUMERATION_SWITCHES:
            logging.warning(f"Feeder has {len(model.switch_ids)} switches, skipping the feasibility scan")
            return
        if not NetworkBuilder.any_feasible(model):
            raise FeederError("No switch configuration connects every load and DG bus to the source")
