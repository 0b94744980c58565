import os
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.model_selection import train_test_split
from dnn_dsse.feeder import FeederModel, SwitchConfig, TopologyCatalog, NodeIndex, FeederError
from dnn_dsse.network import NetworkBuilder
from dnn_dsse.powerflow import PowerFlowSolver, PowerFlowSolution
from dnn_dsse.loads import LoadModeler, LoadPdf, SamplerConfig
from dnn_dsse.noise import ErrorModelConfig, MeasurementNoise

"""
dataset.py

Synthetic measurement/state datasets. Operating points are sampled from the load distributions, solved with the power
flow, read out through the SMD channels of a placement plan, corrupted by the error model and stored as feature rows
with either the true state vector (state estimation) or the topology class (topology identification) as label.
"""

STREAM_NOISE = 2
MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class Channel:
    location_id: str
    kind: str
    phase: str
    bus: str
    branch: Optional[str] = None

    @property
    def name(self) -> str:
        return f"{self.location_id}:{self.kind}{self.phase}"


@dataclass(frozen=True)
class MeasurementLayout:
    """
    Ordered SMD channels. Features are magnitude then angle (degrees) per channel, SMDs sorted by location id,
    voltages before currents. When some topology can de-energize an SMD bus, each channel gets a validity flag.
    """
    channels: Tuple[Channel, ...]
    with_flags: bool = False

    @classmethod
    def from_plan(cls, model: FeederModel, plan, channels: str = 'all',
                  catalog: Optional[TopologyCatalog] = None) -> 'MeasurementLayout':
        if channels not in ('all', 'current'):
            raise ValueError(f"channels must be 'all' or 'current', got {channels!r}")
        entries = []
        for loc in sorted(plan.locations, key=lambda l: l.id):
            if channels == 'all':
                entries.extend(Channel(loc.id, 'v', ph, loc.bus) for ph in loc.voltage_phases)
            entries.extend(Channel(loc.id, 'i', ph, loc.bus, loc.branch) for ph in loc.current_phases)
        if not entries:
            raise ValueError("Placement plan yields no measurement channels")
        with_flags = False
        if catalog is not None:
            buses = {c.bus for c in entries}
            for config in catalog.configs:
                view = NetworkBuilder.apply_switch_config(model, config)
                if not buses <= view.energized_buses:
                    with_flags = True
                    break
        return cls(tuple(entries), with_flags)

    @property
    def kinds(self) -> List[str]:
        return [c.kind for c in self.channels]

    @property
    def width(self) -> int:
        return len(self.channels) * (3 if self.with_flags else 2)

    def feature_names(self) -> List[str]:
        names = []
        for c in self.channels:
            names.extend([f"{c.name}:mag", f"{c.name}:ang"])
            if self.with_flags:
                names.append(f"{c.name}:valid")
        return names

    def measure(self, solution: PowerFlowSolution) -> Tuple[np.ndarray, np.ndarray]:
        """True channel phasors of a solved operating point, zero on de-energized SMD buses."""
        values = np.zeros(len(self.channels), dtype=complex)
        valid = np.ones(len(self.channels), dtype=bool)
        currents = solution.branch_currents or {}
        for k, c in enumerate(self.channels):
            if (c.bus, c.phase) not in solution.node_index:
                valid[k] = False
                continue
            if c.kind == 'v':
                values[k] = solution.voltage(c.bus, c.phase)
            else:
                values[k] = currents.get((c.branch, c.phase, c.bus), 0j)
        return values, valid

    def features(self, phasors: np.ndarray, valid: np.ndarray) -> np.ndarray:
        mag = np.abs(phasors)
        ang = np.where(mag > 0, np.degrees(np.angle(phasors)), 0.0)
        columns = [mag, ang] + ([valid.astype(float)] if self.with_flags else [])
        return np.column_stack(columns).ravel()

    def to_dict(self) -> dict:
        return {'with_flags': self.with_flags,
                'channels': [[c.location_id, c.kind, c.phase, c.bus, c.branch] for c in self.channels]}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'MeasurementLayout':
        return cls(tuple(Channel(*c) for c in data['channels']), bool(data.get('with_flags', False)))


@dataclass(eq=False)
class Snapshot:
    topology: int
    index: int
    solution: PowerFlowSolution

    def state_vector(self, node_index: NodeIndex) -> Tuple[np.ndarray, np.ndarray]:
        """
        Magnitude (pu) and angle (degrees) per node-phase of the full feeder, interleaved; de-energized node-phases
        are zero and masked out.
        """
        state = np.zeros(2 * len(node_index))
        mask = np.zeros(len(node_index), dtype=bool)
        for k, node in enumerate(node_index.nodes):
            if node in self.solution.node_index:
                v = self.solution.voltages[self.solution.node_index[node]]
                state[2 * k] = abs(v)
                state[2 * k + 1] = np.degrees(np.angle(v))
                mask[k] = True
        return state, mask


@dataclass(eq=False)
class Dataset:
    kind: str
    features: np.ndarray
    labels: np.ndarray
    topology: np.ndarray
    feature_names: List[str]
    label_names: List[str]
    manifest: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ('dsse', 'ti'):
            raise ValueError(f"Dataset kind must be 'dsse' or 'ti', got {self.kind!r}")
        if self.features.shape[1:] != (len(self.feature_names),):
            raise ValueError("Feature matrix width does not match the feature names")
        if len(self.labels) != len(self.features) or len(self.topology) != len(self.features):
            raise ValueError("Features, labels and topology columns differ in length")

    def __len__(self):
        return len(self.features)

    def subset(self, rows) -> 'Dataset':
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.kind, self.features[rows], self.labels[rows], self.topology[rows], self.feature_names,
                       self.label_names, dict(self.manifest))

    def split(self, test_fraction: float = 0.2, val_fraction: float = 0.1,
              seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Train / validation / test row indices: test_fraction of the rows are held out for testing and val_fraction
        of the remainder for validation. Classification datasets are split stratified by class.
        """
        rows = np.arange(len(self))
        stratify = self.labels if self.kind == 'ti' else None
        if test_fraction > 0:
            rest, test = train_test_split(rows, test_size=test_fraction, random_state=seed, stratify=stratify)
        else:
            rest, test = rows, rows[:0]
        if val_fraction > 0:
            strat_rest = self.labels[rest] if stratify is not None else None
            train, val = train_test_split(rest, test_size=val_fraction, random_state=seed + 1, stratify=strat_rest)
        else:
            train, val = rest, rest[:0]
        return np.sort(train), np.sort(val), np.sort(test)

    def state_masks(self) -> Dict[int, np.ndarray]:
        masks = self.manifest.get('state_masks', {})
        return {int(k): np.asarray(v, dtype=bool) for k, v in masks.items()}

    def to_text(self) -> Tuple[str, str]:
        """
        Render the rows as CSV and the manifest as JSON.
        :return: (csv text, manifest text)
        """
        label_columns = self.label_names if self.kind == 'dsse' else ['label']
        labels = pd.DataFrame(self.labels.reshape(len(self), -1), columns=[f"label:{n}" for n in label_columns])
        frame = pd.concat([pd.DataFrame(self.features, columns=self.feature_names), labels,
                           pd.DataFrame({'topology': self.topology})], axis=1)
        document = dict(self.manifest, kind=self.kind, feature_names=self.feature_names, label_names=self.label_names)
        return frame.to_csv(index=False, float_format='%.17g'), json.dumps(document, sort_keys=True, indent=1)

    def save(self, path: str) -> Tuple[str, str]:
        """
        Write the rows as CSV and the manifest as a JSON sidecar next to it.
        :return: (csv path, manifest path)
        """
        csv_text, manifest_text = self.to_text()
        manifest_path = f"{path}.manifest.json"
        with open(path, 'w') as handle:
            handle.write(csv_text)
        with open(manifest_path, 'w') as handle:
            handle.write(manifest_text)
        return path, manifest_path

    @classmethod
    def load(cls, path: str) -> 'Dataset':
        manifest_path = f"{path}.manifest.json"
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
        with open(manifest_path, 'r') as handle:
            manifest = json.load(handle)
        frame = pd.read_csv(path)
        kind = manifest.pop('kind')
        feature_names = manifest.pop('feature_names')
        label_names = manifest.pop('label_names')
        label_columns = [f"label:{n}" for n in label_names] if kind == 'dsse' else ['label:label']
        labels = frame[label_columns].to_numpy(dtype=float)
        labels = labels if kind == 'dsse' else labels[:, 0].astype(int)
        return cls(kind, frame[feature_names].to_numpy(dtype=float), labels, frame['topology'].to_numpy(dtype=int),
                   feature_names, label_names, manifest)


class DatasetBuilder:

    @classmethod
    def _simulate_chunk(cls, model: FeederModel, topology: int, config: SwitchConfig, pdfs: Mapping[str, LoadPdf],
                        sampler: SamplerConfig, indices: Sequence[int], tolerance: float,
                        max_iterations: int) -> Tuple[List[Snapshot], int]:
        solver = PowerFlowSolver(model, config, tolerance, max_iterations)
        snapshots, retries = [], 0
        for i in indices:
            for attempt in range(MAX_ATTEMPTS):
                rng = LoadModeler.scenario_rng(sampler.master_seed, i, topology, attempt)
                solution = solver.solve(LoadModeler.sample_scenario(pdfs, model, sampler, rng))
                if solution.converged:
                    snapshots.append(Snapshot(topology, i, solution))
                    break
                retries += 1
            else:
                raise RuntimeError(f"Scenario {i} on topology {config.label()} did not converge in "
                                   f"{MAX_ATTEMPTS} attempts")
        return snapshots, retries

    @classmethod
    def simulate(cls, model: FeederModel, topologies: Sequence[Tuple[int, SwitchConfig]], pdfs: Mapping[str, LoadPdf],
                 sampler: SamplerConfig, n: int, start: int = 0, workers: int = 1, tolerance: float = 1e-6,
                 max_iterations: int = 100, chunk_size: int = 250) -> List[Snapshot]:
        """
        Solve n operating points per topology. Scenario seeds depend only on (master seed, topology, index), so
        the result is independent of the worker count.
        :param topologies: (class index, SwitchConfig) pairs
        :return: Snapshots ordered by topology, then scenario index
        """
        tasks = []
        for topology, config in topologies:
            for lo in range(start, start + n, chunk_size):
                tasks.append((topology, config, list(range(lo, min(lo + chunk_size, start + n)))))
        logging.info(f"Simulating {n} operating points on each of {len(topologies)} topologies "
                     f"({len(tasks)} chunks, {workers} workers)")
        results = Parallel(n_jobs=workers)(
            delayed(cls._simulate_chunk)(model, topology, config, pdfs, sampler, indices, tolerance, max_iterations)
            for topology, config, indices in tasks)
        snapshots = [s for chunk, _ in results for s in chunk]
        retries = sum(r for _, r in results)
        if retries:
            logging.warning(f"Resampled {retries} non-converged operating points")
        return snapshots

    @classmethod
    def featurize(cls, snapshots: Sequence[Snapshot], layout: MeasurementLayout, error_cfg: ErrorModelConfig,
                  seed: int) -> np.ndarray:
        """Noisy feature rows; the noise stream of a row depends on (seed, topology, scenario index) only."""
        rows = np.zeros((len(snapshots), layout.width))
        kinds = layout.kinds
        for r, snap in enumerate(snapshots):
            truth, valid = layout.measure(snap.solution)
            rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_NOISE, snap.topology, snap.index]))
            noisy = MeasurementNoise.apply_two_level_error(truth, kinds, error_cfg, rng)
            rows[r] = layout.features(noisy, valid)
            if len(snapshots) >= 10 and (r + 1) % max(1, len(snapshots) // 10) == 0:
                logging.debug(f"Featurized {r + 1}/{len(snapshots)} rows")
        return rows

    @classmethod
    def build_dataset(cls, model: FeederModel, topologies, pdfs: Mapping[str, LoadPdf], plan,
                      error_cfg: ErrorModelConfig, sampler: SamplerConfig, n: int, seed: int, kind: str,
                      ti_channels: str = 'current', workers: int = 1, start: int = 0,
                      catalog: Optional[TopologyCatalog] = None) -> Dataset:
        """
        Build a dsse or ti dataset.
        :param topologies: a TopologyCatalog (every member, class index = position) or a single SwitchConfig
        :param plan: PlacementPlan whose locations define the SMD channels
        :param n: rows for dsse, rows per topology for ti
        :param catalog: catalog used for channel validity flags and the label map, defaults to topologies
        """
        if kind not in ('dsse', 'ti'):
            raise ValueError(f"Dataset kind must be 'dsse' or 'ti', got {kind!r}")
        if isinstance(topologies, TopologyCatalog):
            catalog = catalog or topologies
            pairs = [(i, c) for i, c in enumerate(topologies.configs)]
        else:
            if kind == 'ti':
                raise ValueError("Topology identification datasets need a topology catalog")
            index = catalog.index_of(topologies) if catalog is not None else 0
            pairs = [(index, topologies)]
        if not pairs:
            raise FeederError("No topologies to simulate")
        channels = ti_channels if kind == 'ti' else 'all'
        layout = MeasurementLayout.from_plan(model, plan, channels, catalog)

        sampler = SamplerConfig(sampler.pf_range, sampler.dg_variation, seed)
        snapshots = cls.simulate(model, pairs, pdfs, sampler, n, start=start, workers=workers)
        return cls.assemble(model, snapshots, layout, error_cfg, seed, kind, plan, catalog, ti_channels)

    @classmethod
    def assemble(cls, model: FeederModel, snapshots: Sequence[Snapshot], layout: MeasurementLayout,
                 error_cfg: ErrorModelConfig, seed: int, kind: str, plan=None,
                 catalog: Optional[TopologyCatalog] = None, ti_channels: str = 'current') -> Dataset:
        features = cls.featurize(snapshots, layout, error_cfg, seed)
        node_index = model.node_index()
        masks: Dict[int, List[bool]] = {}
        if kind == 'dsse':
            labels = np.zeros((len(snapshots), 2 * len(node_index)))
            for r, snap in enumerate(snapshots):
                labels[r], mask = snap.state_vector(node_index)
                masks.setdefault(snap.topology, mask.tolist())
            label_names = [f"{name}:{part}" for name in node_index.names() for part in ('mag', 'ang')]
        else:
            labels = np.array([s.topology for s in snapshots], dtype=int)
            label_names = ['topology']
        manifest = {
            'feeder_fingerprint': model.fingerprint(),
            'feeder_name': model.name,
            'seed': seed,
            'rows': len(snapshots),
            'error_model': error_cfg.to_dict(),
            'layout': layout.to_dict(),
            'ti_channels': ti_channels,
            'placement': plan.to_dict() if plan is not None and hasattr(plan, 'to_dict') else None,
            'label_map': catalog.label_map() if catalog is not None else None,
            'switch_ids': list(model.switch_ids),
            'state_masks': {str(k): v for k, v in sorted(masks.items())},
        }
        logging.info(f"Assembled {kind} dataset: {len(snapshots)} rows, {layout.width} features, "
                     f"{len(label_names)} label columns")
        return Dataset(kind, features, labels, np.array([s.topology for s in snapshots], dtype=int),
                       layout.feature_names(), label_names, manifest)
