import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
from joblib import Parallel, delayed
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.stats import spearmanr
from sklearn.linear_model import SGDClassifier
from sklearn.model_selection import train_test_split
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler
from dnn_dsse.feeder import FeederModel, TopologyCatalog
from dnn_dsse.loads import LoadPdf, SamplerConfig
from dnn_dsse.dataset import DatasetBuilder, Snapshot

"""
placement.py

Where to put the synchrophasor devices. Topology identification locations come from a greedy sequential forward
selection wrapped around a linear max-margin classifier; state estimation locations come from clustering node-phase
voltage magnitudes by rank correlation and covering every cluster with the location of highest phase observability.
"""

PURPOSES = ('ti', 'dsse', 'both')
EXCLUDED_KINDS = ('transformer', 'regulator')
MIN_SCENARIOS = 30
STREAM_SFS = 7


class PlacementError(ValueError):
    """Raised for unknown or invalid locations and degenerate selection inputs."""


@dataclass(frozen=True)
class SmdLocation:
    """An SMD at a bus, measuring the bus voltages and the currents leaving the bus into one incident branch."""
    bus: str
    branch: str
    remote_bus: str
    voltage_phases: Tuple[str, ...]
    current_phases: Tuple[str, ...]

    def __post_init__(self):
        if len(self.voltage_phases) > 3 or len(self.current_phases) > 3:
            raise PlacementError(f"SMD {self.id} has more than six channels")

    @property
    def id(self) -> str:
        return f"{self.bus}-{self.remote_bus}"

    @property
    def channel_count(self) -> int:
        return len(self.voltage_phases) + len(self.current_phases)

    def to_dict(self) -> dict:
        return {'bus': self.bus, 'branch': self.branch, 'remote_bus': self.remote_bus,
                'voltage_phases': ''.join(self.voltage_phases), 'current_phases': ''.join(self.current_phases)}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'SmdLocation':
        return cls(str(data['bus']), str(data['branch']), str(data['remote_bus']), tuple(data['voltage_phases']),
                   tuple(data['current_phases']))


@dataclass
class PlacementPlan:
    locations: Tuple[SmdLocation, ...] = ()
    purposes: Dict[str, str] = field(default_factory=dict)
    trace: List[dict] = field(default_factory=list)
    target_reached: bool = True

    def __post_init__(self):
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            raise PlacementError(f"Placement plan lists a location twice: {sorted(ids)}")
        for loc_id, purpose in self.purposes.items():
            if purpose not in PURPOSES:
                raise PlacementError(f"Unknown purpose '{purpose}' for {loc_id}")

    def __len__(self):
        return len(self.locations)

    @property
    def ids(self) -> List[str]:
        return [loc.id for loc in self.locations]

    @property
    def buses(self) -> List[str]:
        return [loc.bus for loc in self.locations]

    def add(self, location: SmdLocation, purpose: str) -> None:
        if location.id in self.ids:
            raise PlacementError(f"Location {location.id} is already in the plan")
        self.locations = self.locations + (location,)
        self.purposes[location.id] = purpose

    def to_dict(self) -> dict:
        return {'locations': [loc.to_dict() for loc in self.locations], 'purposes': dict(self.purposes),
                'trace': list(self.trace), 'target_reached': self.target_reached}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'PlacementPlan':
        locations = tuple(SmdLocation.from_dict(d) for d in data.get('locations', []))
        purposes = dict(data.get('purposes') or {loc.id: 'dsse' for loc in locations})
        return cls(locations, purposes, list(data.get('trace', [])), bool(data.get('target_reached', True)))


class PlacementSelector:

    @classmethod
    def candidate_locations(cls, model: FeederModel, allow: Optional[Sequence[str]] = None) -> List[SmdLocation]:
        """
        Every (bus, incident branch) pair except transformer and regulator windings, sorted by location id.
        Parallel branches between the same two buses keep the lowest branch id.
        :param allow: optional allow-list of location ids
        """
        found: Dict[str, SmdLocation] = {}
        for branch in sorted(model.branches, key=lambda b: b.id):
            if branch.kind in EXCLUDED_KINDS:
                continue
            for bus_id, remote in ((branch.from_bus, branch.to_bus), (branch.to_bus, branch.from_bus)):
                loc = SmdLocation(bus_id, branch.id, remote, model.bus(bus_id).phases, branch.phases)
                found.setdefault(loc.id, loc)
        candidates = [found[k] for k in sorted(found)]
        if allow is not None:
            unknown = sorted(set(allow) - set(found))
            if unknown:
                raise PlacementError(f"Allow-list names unknown locations {unknown}")
            candidates = [c for c in candidates if c.id in set(allow)]
        return candidates

    @classmethod
    def location(cls, model: FeederModel, location_id: str) -> SmdLocation:
        for candidate in cls.candidate_locations(model):
            if candidate.id == location_id:
                return candidate
        raise PlacementError(f"No SMD location '{location_id}' on feeder {model.name}")

    @classmethod
    def plan_from_ids(cls, model: FeederModel, location_ids: Sequence[str], purpose: str = 'dsse') -> PlacementPlan:
        plan = PlacementPlan()
        for location_id in location_ids:
            plan.add(cls.location(model, location_id), purpose)
        return plan

    @classmethod
    def poi(cls, model: FeederModel, location: SmdLocation) -> int:
        """Phase observability index: own bus phases plus the phases reached through the measured branch."""
        if not model.has_branch(location.branch):
            raise PlacementError(f"Unknown branch '{location.branch}' in location {location.id}")
        branch = model.branch(location.branch)
        if location.bus not in (branch.from_bus, branch.to_bus):
            raise PlacementError(f"Branch {branch.id} is not incident to bus {location.bus}")
        return len(model.bus(location.bus).phases) + len(branch.phases)

    @classmethod
    def current_features(cls, snapshots: Sequence[Snapshot], location: SmdLocation) -> np.ndarray:
        """Noiseless real and imaginary current parts of one location over the snapshots."""
        block = np.zeros((len(snapshots), 2 * len(location.current_phases)))
        for r, snap in enumerate(snapshots):
            currents = snap.solution.branch_currents or {}
            for k, ph in enumerate(location.current_phases):
                value = currents.get((location.branch, ph, location.bus), 0j)
                block[r, 2 * k], block[r, 2 * k + 1] = value.real, value.imag
        return block

    @classmethod
    def _classifier_accuracy(cls, x_train, y_train, x_val, y_val, seed: int) -> float:
        classifier = Pipeline([
            ('scale', StandardScaler()),
            ('svm', SGDClassifier(loss='hinge', alpha=1e-4, max_iter=2000, tol=1e-5, random_state=seed)),
        ])
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            classifier.fit(x_train, y_train)
        return float(np.mean(classifier.predict(x_val) == y_val) * 100.0)

    @classmethod
    def sfs_ti(cls, model: FeederModel, catalog: TopologyCatalog, pdfs: Mapping[str, LoadPdf],
               sampler: SamplerConfig, candidates: Sequence[SmdLocation], alpha: float = 99.0, budget: int = 4,
               seed: int = 0, samples_per_topology: int = 100, val_fraction: float = 0.3,
               workers: int = 1) -> PlacementPlan:
        """
        Sequential forward selection of TI locations. Each step adds the candidate whose current block gives the
        highest validation accuracy together with the already selected blocks; ties go to the smaller location id.
        Selection ends at the target accuracy, at the budget, or when no remaining candidate improves the accuracy.
        :param alpha: target validation accuracy in percent
        :param budget: maximum number of locations
        :return: PlacementPlan tagged 'ti'; target_reached is False if alpha was not met
        """
        if not candidates:
            raise PlacementError("Sequential forward selection needs at least one candidate location")
        if len(catalog) < 2:
            raise PlacementError("Topology identification needs at least two feasible topologies")
        if budget < 1:
            raise PlacementError("The SMD budget must allow at least one location")
        candidates = sorted(candidates, key=lambda c: c.id)
        topologies = list(enumerate(catalog.configs))
        sampler = SamplerConfig(sampler.pf_range, sampler.dg_variation, seed)
        snapshots = DatasetBuilder.simulate(model, topologies, pdfs, sampler, samples_per_topology, workers=workers)
        labels = np.array([s.topology for s in snapshots], dtype=int)
        blocks = {c.id: cls.current_features(snapshots, c) for c in candidates}
        train, val = train_test_split(np.arange(len(labels)), test_size=val_fraction, stratify=labels,
                                      random_state=int(np.random.SeedSequence([seed, STREAM_SFS]).generate_state(1)[0]))

        plan = PlacementPlan()
        selected: List[np.ndarray] = []
        accuracy = 0.0
        while len(plan) < budget and accuracy < alpha:
            remaining = [c for c in candidates if c.id not in plan.ids]
            if not remaining:
                break
            stacks = [np.hstack(selected + [blocks[c.id]]) for c in remaining]
            scores = Parallel(n_jobs=workers)(
                delayed(cls._classifier_accuracy)(x[train], labels[train], x[val], labels[val], seed)
                for x in stacks)
            best = int(np.argmax(scores))
            # a location is only kept if it raises the accuracy, so the trace is strictly increasing
            if plan.ids and scores[best] <= accuracy:
                logging.info(f"SFS step {len(plan) + 1}: no remaining location improves on {accuracy:.2f}%")
                break
            accuracy = scores[best]
            plan.add(remaining[best], 'ti')
            selected.append(blocks[remaining[best].id])
            plan.trace.append({'step': len(plan), 'location': remaining[best].id, 'accuracy_pct': accuracy})
            logging.info(f"SFS step {len(plan)}: added {remaining[best].id}, validation accuracy {accuracy:.2f}%")
        plan.target_reached = accuracy >= alpha
        if not plan.target_reached:
            logging.warning(f"SFS stopped with {len(plan)} of at most {budget} SMDs at {accuracy:.2f}% < {alpha}%")
        return plan

    @classmethod
    def spearman_matrix(cls, samples) -> Tuple[np.ndarray, np.ndarray]:
        """
        Pairwise Spearman rank correlation of series stored as columns, average ranks for ties.
        :param samples: (scenarios, series) array
        :return: (correlation matrix, boolean flags of constant series); constant series correlate 0 with others
        """
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] < MIN_SCENARIOS:
            raise PlacementError(f"Rank correlation needs at least {MIN_SCENARIOS} scenarios")
        constant = np.ptp(samples, axis=0) == 0
        if constant.any():
            logging.warning(f"{int(constant.sum())} constant voltage series set to zero correlation")
        width = samples.shape[1]
        rho = np.eye(width)
        varying = np.flatnonzero(~constant)
        if len(varying) >= 2:
            result = spearmanr(samples[:, varying])
            block = np.atleast_2d(getattr(result, 'statistic', result[0]))
            if block.shape != (len(varying), len(varying)):
                value = float(block.ravel()[0])
                block = np.array([[1.0, value], [value, 1.0]])
            rho[np.ix_(varying, varying)] = block
        np.fill_diagonal(rho, 1.0)
        return rho, constant

    @classmethod
    def cluster_voltages(cls, rho, tau: float = 0.05) -> np.ndarray:
        """
        Complete-linkage clustering on the distance 1 - rho, cut at tau.
        :return: cluster number per series, numbered 1.. in order of first appearance
        """
        rho = np.asarray(rho, dtype=float)
        n = rho.shape[0]
        if n == 1:
            return np.ones(1, dtype=int)
        distance = np.clip(1.0 - rho, 0.0, 2.0)
        distance = (distance + distance.T) / 2.0
        np.fill_diagonal(distance, 0.0)
        raw = fcluster(linkage(squareform(distance, checks=False), method='complete'), t=tau, criterion='distance')
        order = {}
        for label in raw:
            order.setdefault(label, len(order) + 1)
        return np.array([order[label] for label in raw], dtype=int)

    @classmethod
    def node_clusters(cls, names: Sequence[str], labels: Sequence[int]) -> Dict[str, int]:
        """Merge node-phase clusters to buses by majority vote; ties go to the lower cluster number."""
        votes: Dict[str, Counter] = {}
        for name, label in zip(names, labels):
            votes.setdefault(name.rsplit('.', 1)[0], Counter())[int(label)] += 1
        return {bus: min(counter, key=lambda c: (-counter[c], c)) for bus, counter in votes.items()}

    @classmethod
    def voltage_clusters(cls, model: FeederModel, pdfs: Mapping[str, LoadPdf], sampler: SamplerConfig,
                         tau: float = 0.05, seed: int = 0, samples: int = 200,
                         workers: int = 1) -> Dict[str, int]:
        """Bus clusters of the base topology from simulated voltage magnitudes; the source bus is left out."""
        sampler = SamplerConfig(sampler.pf_range, sampler.dg_variation, seed)
        snapshots = DatasetBuilder.simulate(model, [(0, model.normal_config())], pdfs, sampler, samples,
                                            workers=workers)
        node_index = snapshots[0].solution.node_index
        keep = [k for k, (bus, _) in enumerate(node_index.nodes) if bus != model.source.bus]
        magnitudes = np.abs(np.array([s.solution.voltages[keep] for s in snapshots]))
        rho, _ = cls.spearman_matrix(magnitudes)
        labels = cls.cluster_voltages(rho, tau)
        names = [node_index.names()[k] for k in keep]
        clusters = cls.node_clusters(names, labels)
        logging.info(f"Voltage clustering at tau={tau}: {len(set(clusters.values()))} clusters over "
                     f"{len(clusters)} buses")
        return clusters

    @classmethod
    def integrated_placement(cls, model: FeederModel, catalog: TopologyCatalog, pdfs: Mapping[str, LoadPdf],
                             sampler: SamplerConfig, alpha: float = 99.0, tau: float = 0.05, budget: int = 4,
                             seed: int = 0, samples: int = 200, workers: int = 1,
                             candidates: Optional[Sequence[SmdLocation]] = None) -> PlacementPlan:
        """
        TI selection first (skipped on feeders with a single feasible topology), then one extra location for every
        voltage cluster that no planned SMD bus falls in, chosen by highest POI and then smallest location id.
        """
        candidates = sorted(candidates or cls.candidate_locations(model), key=lambda c: c.id)
        if len(catalog) >= 2:
            plan = cls.sfs_ti(model, catalog, pdfs, sampler, candidates, alpha, budget, seed,
                              samples_per_topology=max(samples // len(catalog), MIN_SCENARIOS), workers=workers)
        else:
            plan = PlacementPlan()
        clusters = cls.voltage_clusters(model, pdfs, sampler, tau, seed, samples, workers)
        for number in sorted(set(clusters.values())):
            members = {bus for bus, c in clusters.items() if c == number}
            covering = [loc for loc in plan.locations if loc.bus in members]
            if covering:
                for loc in covering:
                    if plan.purposes[loc.id] == 'ti':
                        plan.purposes[loc.id] = 'both'
                continue
            options = [c for c in candidates if c.bus in members]
            if not options:
                logging.warning(f"No candidate location inside voltage cluster {number}")
                continue
            best = min(options, key=lambda c: (-cls.poi(model, c), c.id))
            plan.add(best, 'dsse')
            plan.trace.append({'cluster': number, 'location': best.id, 'poi': cls.poi(model, best)})
            logging.info(f"Cluster {number} ({len(members)} buses) covered by {best.id}")
        return plan
