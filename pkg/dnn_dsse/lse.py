import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from dnn_dsse.feeder import FeederModel, NodeIndex, SwitchConfig
from dnn_dsse.network import NetworkBuilder
from dnn_dsse.noise import TveSpec
from dnn_dsse.dataset import MeasurementLayout
from dnn_dsse.placement import PlacementError, PlacementPlan, PlacementSelector, SmdLocation

"""
lse.py

Linear weighted least squares state estimation in rectangular coordinates. With synchrophasor measurements every
channel is linear in the real and imaginary parts of the node voltages: voltage channels select a column pair,
current channels follow from the branch admittance primitives. The estimator needs full observability, so this module
also checks numeric rank and builds a greedy full-observability placement.
"""

RANK_TOLERANCE = 1e-8
SIGMA_FLOOR = 1e-6


class ObservabilityError(ValueError):
    """Raised when the measurement matrix is rank deficient or no placement can make it full rank."""


@dataclass(eq=False)
class LinearMeasurementModel:
    """Rows come in (real, imaginary) pairs per measured phasor; columns in (real, imaginary) pairs per node-phase."""
    h: np.ndarray
    node_index: NodeIndex
    row_names: List[str]
    layout: Optional[MeasurementLayout] = None

    def __post_init__(self):
        if self.h.shape != (len(self.row_names), 2 * len(self.node_index)):
            raise ValueError(f"H has shape {self.h.shape}, expected ({len(self.row_names)}, "
                             f"{2 * len(self.node_index)})")

    @property
    def column_names(self) -> List[str]:
        return [f"{name}:{part}" for name in self.node_index.names() for part in ('re', 'im')]


@dataclass
class ObservabilityReport:
    observable: bool
    rank: int
    columns: int
    unobservable: List[str] = field(default_factory=list)

    @property
    def deficiency(self) -> int:
        return self.columns - self.rank


class LinearStateEstimator:

    @classmethod
    def build_h(cls, model: FeederModel, config: SwitchConfig, plan: PlacementPlan) -> LinearMeasurementModel:
        """
        Measurement matrix of a placement plan on one topology, channel order as in MeasurementLayout.
        :return: LinearMeasurementModel
        """
        view = NetworkBuilder.apply_switch_config(model, config)
        node_index = view.node_index
        layout = MeasurementLayout.from_plan(model, plan, 'all')
        closed = set(view.closed_branches)
        h = np.zeros((2 * len(layout.channels), 2 * len(node_index)))
        names = []
        for k, channel in enumerate(layout.channels):
            r = 2 * k
            names.extend([f"{channel.name}:re", f"{channel.name}:im"])
            if (channel.bus, channel.phase) not in node_index:
                raise PlacementError(f"Channel {channel.name} sits on a de-energized bus under topology "
                                     f"{config.label()}")
            if channel.kind == 'v':
                col = 2 * node_index[(channel.bus, channel.phase)]
                h[r, col] = 1.0
                h[r + 1, col + 1] = 1.0
                continue
            if channel.branch not in closed:
                continue
            branch = model.branch(channel.branch)
            if channel.phase not in branch.phases:
                raise PlacementError(f"Branch {branch.id} has no phase {channel.phase}")
            prim = NetworkBuilder.branch_primitive(model, branch)
            row = branch.phases.index(channel.phase)
            if channel.bus == branch.from_bus:
                own, other = prim.yff[row], prim.yft[row]
            else:
                own, other = prim.ytt[row], prim.ytf[row]
            for coeffs, bus in ((own, channel.bus), (other, branch.to_bus if channel.bus == branch.from_bus
                                                      else branch.from_bus)):
                for ph, a in zip(branch.phases, coeffs):
                    col = 2 * node_index[(bus, ph)]
                    h[r, col] += a.real
                    h[r, col + 1] -= a.imag
                    h[r + 1, col] += a.imag
                    h[r + 1, col + 1] += a.real
        return LinearMeasurementModel(h, node_index, names, layout)

    @classmethod
    def measurement_vector(cls, phasors) -> np.ndarray:
        """Interleave complex channel values into (real, imaginary) rows."""
        phasors = np.asarray(phasors, dtype=complex)
        return np.column_stack([phasors.real, phasors.imag]).ravel()

    @classmethod
    def weights(cls, phasors, tve: TveSpec) -> np.ndarray:
        """Inverse variances of the per-axis TVE noise, both rows of a phasor sharing one weight."""
        sigma = np.maximum(tve.sigma(np.abs(np.asarray(phasors, dtype=complex))), SIGMA_FLOOR)
        return np.repeat(1.0 / sigma ** 2, 2)

    @classmethod
    def observability_check(cls, h, column_names: Optional[Sequence[str]] = None) -> ObservabilityReport:
        """
        Numeric column rank of H (singular values above 1e-8 of the largest). Columns with a component in the null
        space are reported as unobservable.
        """
        h = np.atleast_2d(np.asarray(h, dtype=float))
        columns = h.shape[1]
        if h.size == 0 or not np.any(h):
            return ObservabilityReport(False, 0, columns, list(column_names or range(columns)))
        _, s, vt = np.linalg.svd(h, full_matrices=True)
        rank = int(np.sum(s > RANK_TOLERANCE * s[0]))
        null = vt[rank:]
        weak = np.flatnonzero(np.linalg.norm(null, axis=0) > 1e-6) if len(null) else np.array([], dtype=int)
        names = list(column_names) if column_names is not None else list(range(columns))
        return ObservabilityReport(rank == columns, rank, columns, [names[j] for j in weak])

    @classmethod
    def _rank(cls, h: np.ndarray) -> int:
        if h.size == 0 or not np.any(h):
            return 0
        s = np.linalg.svd(h, compute_uv=False)
        return int(np.sum(s > RANK_TOLERANCE * s[0]))

    @classmethod
    def greedy_observability_placement(cls, model: FeederModel, config: Optional[SwitchConfig] = None,
                                       candidates: Optional[Sequence[SmdLocation]] = None) -> PlacementPlan:
        """
        Add locations one at a time, each time the one raising the numeric rank of H the most (ties to the
        smaller location id), until H has full column rank.
        """
        config = config or model.normal_config()
        candidates = sorted(candidates or PlacementSelector.candidate_locations(model), key=lambda c: c.id)
        view = NetworkBuilder.apply_switch_config(model, config)
        candidates = [c for c in candidates if c.bus in view.energized_buses]
        blocks = {c.id: cls.build_h(model, config, PlacementPlan((c,))).h for c in candidates}
        target = 2 * len(view.node_index)
        plan = PlacementPlan()
        current = np.zeros((0, target))
        rank = 0
        while rank < target:
            best, best_rank = None, rank
            for c in candidates:
                if c.id in plan.ids:
                    continue
                r = cls._rank(np.vstack([current, blocks[c.id]]))
                if r > best_rank:
                    best, best_rank = c, r
            if best is None:
                raise ObservabilityError(f"Cannot reach full observability: rank {rank} of {target} with "
                                         f"{len(plan)} SMDs")
            plan.add(best, 'dsse')
            current = np.vstack([current, blocks[best.id]])
            rank = best_rank
            plan.trace.append({'step': len(plan), 'location': best.id, 'rank': rank})
            logging.debug(f"Observability placement step {len(plan)}: {best.id}, rank {rank}/{target}")
        logging.info(f"Greedy observability placement: {len(plan)} SMDs for {target // 2} node-phases")
        return plan

    @classmethod
    def solve_wls(cls, lmm: LinearMeasurementModel, z, weights) -> Tuple[np.ndarray, float]:
        """
        Weighted least squares through the normal equations and a Cholesky factorization.
        :param lmm: LinearMeasurementModel
        :param z: measurement rows, interleaved real/imaginary
        :param weights: positive row weights
        :return: (complex node voltages in the model's node order, weighted residual norm)
        """
        h = lmm.h
        z = np.asarray(z, dtype=float)
        w = np.asarray(weights, dtype=float)
        if z.shape != (h.shape[0],) or w.shape != (h.shape[0],):
            raise ValueError(f"Expected {h.shape[0]} measurements and weights, got {z.shape} and {w.shape}")
        if np.any(w <= 0):
            raise ValueError("Weights must be positive")
        report = cls.observability_check(h, lmm.column_names)
        if not report.observable:
            raise ObservabilityError(f"Measurement matrix is rank deficient by {report.deficiency}; unobservable "
                                     f"columns {report.unobservable[:6]}")
        gain = h.T @ (w[:, None] * h)
        try:
            factor = cho_factor(gain)
        except LinAlgError as e:
            raise ObservabilityError(f"Gain matrix is not positive definite: {e}")
        x = cho_solve(factor, h.T @ (w * z))
        residual = z - h @ x
        return x[0::2] + 1j * x[1::2], float(np.sqrt(residual @ (w * residual)))

    @classmethod
    def state_vector(cls, voltages, node_index: NodeIndex, full_index: NodeIndex) -> np.ndarray:
        """Interleaved (magnitude, angle) rows over full_index; node-phases missing from node_index are zero."""
        state = np.zeros(2 * len(full_index))
        for k, node in enumerate(full_index.nodes):
            if node in node_index:
                v = voltages[node_index[node]]
                state[2 * k], state[2 * k + 1] = abs(v), np.degrees(np.angle(v))
        return state
