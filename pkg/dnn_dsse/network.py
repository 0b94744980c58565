import logging
import itertools
from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Tuple
import numpy as np
import networkx as nx
from dnn_dsse.feeder import (FeederModel, FeederError, SwitchConfig, TopologyCatalog, NodeIndex, Branch,
                             MAX_ENUMERATION_SWITCHES, PHASE_SHIFT_DEG)


@dataclass(frozen=True)
class TopologyView:
    """Energized part of a feeder under one switch configuration."""
    config: SwitchConfig
    closed_branches: Tuple[str, ...]
    energized_buses: FrozenSet[str]
    node_index: NodeIndex

    def is_energized(self, bus_id: str) -> bool:
        return bus_id in self.energized_buses


@dataclass(frozen=True)
class BranchPrimitive:
    """Per-unit two-port admittance blocks of a branch, rows and columns ordered by the branch phases."""
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray


class NetworkBuilder:

    @classmethod
    def _check_length(cls, model: FeederModel, config: SwitchConfig):
        if len(config.statuses) != len(model.switch_ids):
            raise FeederError(f"Switch configuration has {len(config.statuses)} entries, "
                              f"feeder has {len(model.switch_ids)} switches")

    @classmethod
    def closed_branches(cls, model: FeederModel, config: SwitchConfig) -> Tuple[str, ...]:
        cls._check_length(model, config)
        status = dict(zip(model.switch_ids, config.statuses))
        return tuple(b.id for b in model.branches if not b.is_switch or status[b.id])

    @classmethod
    def graph(cls, model: FeederModel, config: SwitchConfig) -> nx.MultiGraph:
        """
        Bus graph of all non-switch branches plus the closed switches.
        :param model: A FeederModel
        :param config: A SwitchConfig aligned with model.switch_ids
        :return: A networkx MultiGraph keyed by branch id
        """
        g = nx.MultiGraph()
        g.add_nodes_from(b.id for b in model.buses)
        for branch_id in cls.closed_branches(model, config):
            branch = model.branch(branch_id)
            g.add_edge(branch.from_bus, branch.to_bus, key=branch.id)
        return g

    @classmethod
    def check_connectivity(cls, model: FeederModel, config: SwitchConfig, radial: bool = False) -> bool:
        """
        A configuration is feasible when every bus carrying a load or DG reaches the source. With radial=True the
        energized part must in addition be free of loops.
        """
        g = cls.graph(model, config)
        reachable = nx.node_connected_component(g, model.source.bus)
        if not all(bus in reachable for bus in model.injection_buses()):
            return False
        if radial and not nx.is_forest(g.subgraph(reachable)):
            return False
        return True

    @classmethod
    def enumerate_feasible_topologies(cls, model: FeederModel, radial: bool = False) -> TopologyCatalog:
        """
        Exhaustively test all 2^S switch configurations in lexicographic order (open before closed, first switch
        most significant) and keep the feasible ones.
        :param model: A FeederModel
        :param radial: Additionally reject configurations with loops
        :return: A TopologyCatalog whose indices are the topology class labels
        """
        count = len(model.switch_ids)
        if count > MAX_ENUMERATION_SWITCHES:
            raise FeederError(f"{count} switches exceed the exhaustive enumeration bound of "
                              f"{MAX_ENUMERATION_SWITCHES}")
        feasible = []
        for statuses in itertools.product((False, True), repeat=count):
            config = SwitchConfig(tuple(statuses))
            if cls.check_connectivity(model, config, radial):
                feasible.append(config)
        logging.info(f"Found {len(feasible)} feasible topologies out of {2 ** count}")
        return TopologyCatalog(model.switch_ids, tuple(feasible))

    @classmethod
    def any_feasible(cls, model: FeederModel) -> bool:
        for statuses in itertools.product((False, True), repeat=len(model.switch_ids)):
            if cls.check_connectivity(model, SwitchConfig(tuple(statuses))):
                return True
        return False

    @classmethod
    def apply_switch_config(cls, model: FeederModel, config: SwitchConfig, radial: bool = False) -> TopologyView:
        if not cls.check_connectivity(model, config, radial):
            raise FeederError(f"Switch configuration {config.label()} islands a load or DG bus")
        g = cls.graph(model, config)
        energized = frozenset(nx.node_connected_component(g, model.source.bus))
        closed = tuple(b for b in cls.closed_branches(model, config)
                       if model.branch(b).from_bus in energized)
        dead = sorted(b.id for b in model.buses if b.id not in energized)
        if dead:
            logging.debug(f"Topology {config.label()} de-energizes buses {dead}")
        index = NodeIndex.for_buses(b for b in model.buses if b.id in energized)
        return TopologyView(config, closed, energized, index)

    @classmethod
    def branch_primitive(cls, model: FeederModel, branch: Branch) -> BranchPrimitive:
        """
        Per-unit primitive of a branch. The series impedance is referred to the to-bus base. A per-phase tap A (to-side
        over from-side voltage, applied on the from side) gives Yff = A (y + ysh/2) A, Yft = -A y, Ytf = -y A,
        Ytt = y + ysh/2, which keeps the nodal matrix symmetric.
        """
        z_base = model.impedance_base(branch.to_bus)
        try:
            y = np.linalg.inv(branch.impedance_matrix() / z_base)
        except np.linalg.LinAlgError:
            raise FeederError(f"Branch '{branch.id}': singular series impedance")
        half_shunt = branch.shunt_matrix() * z_base / 2.0
        ratio = np.diag(branch.tap_vector())
        return BranchPrimitive(yff=ratio @ (y + half_shunt) @ ratio,
                               yft=-ratio @ y,
                               ytf=-y @ ratio,
                               ytt=y + half_shunt)

    @classmethod
    def build_ybus(cls, model: FeederModel, config: SwitchConfig,
                   view: Optional[TopologyView] = None) -> Tuple[np.ndarray, NodeIndex]:
        """
        Assemble the complex nodal admittance matrix over the energized node-phases.
        :param model: A FeederModel
        :param config: A feasible SwitchConfig
        :param view: Optional precomputed TopologyView for config
        :return: Y in per-unit and its NodeIndex
        """
        if view is None:
            view = cls.apply_switch_config(model, config)
        index = view.node_index
        y_bus = np.zeros((len(index), len(index)), dtype=complex)
        for branch_id in view.closed_branches:
            branch = model.branch(branch_id)
            prim = cls.branch_primitive(model, branch)
            f = index.positions(branch.from_bus, branch.phases)
            t = index.positions(branch.to_bus, branch.phases)
            y_bus[np.ix_(f, f)] += prim.yff
            y_bus[np.ix_(f, t)] += prim.yft
            y_bus[np.ix_(t, f)] += prim.ytf
            y_bus[np.ix_(t, t)] += prim.ytt
        for cap in model.capacitors:
            if cap.bus not in view.energized_buses:
                continue
            for k in index.positions(cap.bus, cap.phases):
                y_bus[k, k] += 1j * cap.kvar_per_phase / model.phase_base_kva
        return y_bus, index

    @classmethod
    def source_voltages(cls, model: FeederModel) -> Dict[str, complex]:
        """Slack phasors per phase of the source bus, 0/-120/+120 degrees around the source angle."""
        src = model.source
        return {ph: src.voltage_pu * np.exp(1j * np.radians(src.angle_deg + PHASE_SHIFT_DEG[ph]))
                for ph in model.bus(src.bus).phases}
