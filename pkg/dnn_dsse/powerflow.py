import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple
import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg
from dnn_dsse.feeder import FeederModel, FeederError, SwitchConfig, NodeIndex, PHASE_SHIFT_DEG
from dnn_dsse.network import NetworkBuilder, TopologyView

"""
powerflow.py

Unbalanced three-phase power flow by fixed-point current injection. The non-slack block of the nodal admittance
matrix is factorized once per topology and reused for every Monte-Carlo operating point. Loads and DG are constant
PQ; powers are given per element as (phase or phase pair, kW, kvar) with consumption positive, so a DG enters with
negative kW and kvar.
"""

# element id -> ((phase key, kW, kvar), ...)
Injections = Mapping[str, Sequence[Tuple[str, float, float]]]


class PowerFlowError(RuntimeError):
    """Raised when the admittance matrix of a topology cannot be factorized."""


@dataclass(eq=False)
class PowerFlowSolution:
    config: SwitchConfig
    node_index: NodeIndex
    voltages: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    branch_currents: Optional[Dict[Tuple[str, str, str], complex]] = None

    def voltage(self, bus_id: str, phase: str) -> complex:
        return complex(self.voltages[self.node_index[(bus_id, phase)]])


def nominal_injections(model: FeederModel, dg_pf: float = 1.0) -> Dict[str, Tuple[Tuple[str, float, float], ...]]:
    """
    Injections at nameplate values: loads at their nominal PQ and each DG at its rating, spread evenly over its
    phases.
    """
    injections = {ld.id: ld.per_phase_pq for ld in model.loads}
    q_ratio = np.tan(np.arccos(dg_pf))
    for dg in model.dgs:
        per_phase = dg.rating_kw / len(dg.phases)
        injections[dg.id] = tuple((ph, -per_phase, -per_phase * q_ratio) for ph in dg.phases)
    return injections


class PowerFlowSolver:
    """
    Power-flow engine bound to one topology. Construction factorizes Y_nn; solve() can then be called any number
    of times with different injections.
    """

    def __init__(self, model: FeederModel, config: SwitchConfig, tolerance: float = 1e-6,
                 max_iterations: int = 100, view: Optional[TopologyView] = None):
        self.model = model
        self.config = config
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.view = view if view is not None else NetworkBuilder.apply_switch_config(model, config)
        self.y_bus, self.node_index = NetworkBuilder.build_ybus(model, config, self.view)
        self.y_sparse = sparse.csr_matrix(self.y_bus)

        src = model.source.bus
        self.source_positions = np.array(self.node_index.positions(src, model.bus(src).phases), dtype=int)
        is_source = np.zeros(len(self.node_index), dtype=bool)
        is_source[self.source_positions] = True
        self.free_positions = np.flatnonzero(~is_source)

        slack = NetworkBuilder.source_voltages(model)
        self.v_source = np.array([slack[ph] for ph in model.bus(src).phases], dtype=complex)
        self.v_flat = np.array([np.exp(1j * np.radians(model.source.angle_deg + PHASE_SHIFT_DEG[ph]))
                                for _, ph in self.node_index.nodes], dtype=complex)
        self.v_flat[self.source_positions] = self.v_source

        y_nn = sparse.csc_matrix(self.y_bus[np.ix_(self.free_positions, self.free_positions)])
        self.y_ns_vs = self.y_bus[np.ix_(self.free_positions, self.source_positions)] @ self.v_source
        try:
            self.lu = sparse_linalg.splu(y_nn)
        except RuntimeError as e:
            raise PowerFlowError(f"Admittance matrix of topology {config.label()} is singular: {e}")
        self._elements = self._element_positions()
        self._primitives = {}

    def _primitive(self, branch):
        if branch.id not in self._primitives:
            self._primitives[branch.id] = NetworkBuilder.branch_primitive(self.model, branch)
        return self._primitives[branch.id]

    def _element_positions(self):
        positions = {}
        for ld in self.model.loads:
            if ld.bus in self.view.energized_buses:
                positions[ld.id] = (ld.bus, ld.connection)
        for dg in self.model.dgs:
            if dg.bus in self.view.energized_buses:
                positions[dg.id] = (dg.bus, 'wye')
        return positions

    def _injection_arrays(self, injections: Injections):
        missing = [e for e in self._elements if e not in injections]
        if missing:
            raise ValueError(f"Injections missing for elements {missing}")
        base = self.model.phase_base_kva
        wye_pos, wye_s, delta_i, delta_j, delta_s = [], [], [], [], []
        for element_id, (bus_id, connection) in self._elements.items():
            for key, kw, kvar in injections[element_id]:
                s = complex(kw, kvar) / base
                if connection == 'wye':
                    wye_pos.append(self.node_index[(bus_id, key)])
                    wye_s.append(s)
                else:
                    delta_i.append(self.node_index[(bus_id, key[0])])
                    delta_j.append(self.node_index[(bus_id, key[1])])
                    delta_s.append(s)
        return (np.array(wye_pos, dtype=int), np.array(wye_s, dtype=complex), np.array(delta_i, dtype=int),
                np.array(delta_j, dtype=int), np.array(delta_s, dtype=complex))

    def _specified_currents(self, v: np.ndarray, arrays) -> np.ndarray:
        wye_pos, wye_s, delta_i, delta_j, delta_s = arrays
        current = np.zeros(len(v), dtype=complex)
        if len(wye_pos):
            np.add.at(current, wye_pos, -np.conj(wye_s / v[wye_pos]))
        if len(delta_i):
            i_pair = np.conj(delta_s / (v[delta_i] - v[delta_j]))
            np.add.at(current, delta_i, -i_pair)
            np.add.at(current, delta_j, i_pair)
        return current

    def _mismatch(self, v: np.ndarray, arrays) -> float:
        s_spec = v * np.conj(self._specified_currents(v, arrays))
        s_calc = v * np.conj(self.y_sparse @ v)
        return float(np.max(np.abs(s_spec - s_calc)[self.free_positions], initial=0.0))

    def solve(self, injections: Injections) -> PowerFlowSolution:
        """
        Fixed-point iteration V_n <- Y_nn^-1 (I_n(V) - Y_ns V_s) from a flat start.
        :param injections: Per-element PQ in kW/kvar, consumption positive
        :return: A PowerFlowSolution; converged is False if the iteration cap was reached
        """
        arrays = self._injection_arrays(injections)
        v = self.v_flat.copy()
        mismatch = np.inf
        iterations = 0
        with np.errstate(divide='ignore', invalid='ignore'):
            for iterations in range(1, self.max_iterations + 1):
                current = self._specified_currents(v, arrays)
                v[self.free_positions] = self.lu.solve(current[self.free_positions] - self.y_ns_vs)
                mismatch = self._mismatch(v, arrays)
                if not np.isfinite(mismatch):
                    break
                if mismatch < self.tolerance:
                    break
        converged = bool(np.isfinite(mismatch) and mismatch < self.tolerance)
        if not converged:
            logging.warning(f"Power flow on topology {self.config.label()} did not converge after {iterations} "
                            f"iterations, mismatch {mismatch:.3e} pu")
        solution = PowerFlowSolution(self.config, self.node_index, v, converged, iterations, mismatch)
        if converged:
            solution.branch_currents = self.branch_currents(v)
        return solution

    def residual(self, voltages: np.ndarray, injections: Injections) -> float:
        return self._mismatch(np.asarray(voltages, dtype=complex), self._injection_arrays(injections))

    def branch_currents(self, voltages: np.ndarray,
                        branch_ids: Optional[Iterable[str]] = None) -> Dict[Tuple[str, str, str], complex]:
        """
        Terminal currents of branches in per-unit, keyed by (branch id, phase, bus id) where the current leaves that
        bus into the branch. The from-bus entries follow the from->to sign convention. Open switches between energized
        buses carry zero current.
        """
        model = self.model
        closed = set(self.view.closed_branches)
        if branch_ids is None:
            branch_ids = [b.id for b in model.branches
                          if b.from_bus in self.view.energized_buses or b.to_bus in self.view.energized_buses]
        currents = {}
        for branch_id in branch_ids:
            branch = model.branch(branch_id)
            if branch_id not in closed:
                for ph in branch.phases:
                    currents[(branch_id, ph, branch.from_bus)] = 0j
                    currents[(branch_id, ph, branch.to_bus)] = 0j
                continue
            prim = self._primitive(branch)
            v_f = voltages[self.node_index.positions(branch.from_bus, branch.phases)]
            v_t = voltages[self.node_index.positions(branch.to_bus, branch.phases)]
            i_f = prim.yff @ v_f + prim.yft @ v_t
            i_t = prim.ytf @ v_f + prim.ytt @ v_t
            for k, ph in enumerate(branch.phases):
                currents[(branch_id, ph, branch.from_bus)] = complex(i_f[k])
                currents[(branch_id, ph, branch.to_bus)] = complex(i_t[k])
        return currents


def solve_power_flow(model: FeederModel, config: SwitchConfig, injections: Injections,
                     tolerance: float = 1e-6, max_iterations: int = 100) -> PowerFlowSolution:
    return PowerFlowSolver(model, config, tolerance, max_iterations).solve(injections)


def branch_currents(model: FeederModel, config: SwitchConfig, voltages,
                    branch_ids: Optional[Iterable[str]] = None) -> Dict[Tuple[str, str, str], complex]:
    """
    Branch terminal currents for arbitrary node voltages.
    :param voltages: complex array in the topology's canonical order, or a mapping (bus, phase) -> complex
    """
    solver = PowerFlowSolver(model, config)
    if branch_ids is not None:
        for branch_id in branch_ids:
            if not model.has_branch(branch_id):
                raise FeederError(f"Unknown branch '{branch_id}'")
    return solver.branch_currents(_as_vector(voltages, solver.node_index), branch_ids)


def injection_residual(model: FeederModel, config: SwitchConfig, voltages, injections: Injections) -> float:
    solver = PowerFlowSolver(model, config)
    return solver.residual(_as_vector(voltages, solver.node_index), injections)


def _as_vector(voltages, node_index: NodeIndex) -> np.ndarray:
    if isinstance(voltages, dict):
        missing = [n for n in node_index.nodes if n not in voltages]
        if missing:
            raise ValueError(f"Voltages missing for node-phases {missing[:5]}")
        return np.array([complex(voltages[n]) for n in node_index.nodes], dtype=complex)
    vector = np.asarray(voltages, dtype=complex)
    if vector.shape != (len(node_index),):
        raise ValueError(f"Expected {len(node_index)} voltages, got shape {vector.shape}")
    return vector
