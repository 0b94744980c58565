import os
import json
import logging
from typing import Dict, List, Optional, Tuple
import numpy as np
import pandas as pd
from dnn_dsse.config import Config
from dnn_dsse.feeder import FeederModel, FeederParser, SwitchConfig, TopologyCatalog
from dnn_dsse.network import NetworkBuilder
from dnn_dsse.loads import LoadModeler, LoadPdf, SamplerConfig, SmartMeterSeries, STREAM_METER_NOISE
from dnn_dsse.noise import ErrorModelConfig, MeasurementNoise
from dnn_dsse.mlp import MlpParams, NeuralNetwork, TrainConfig
from dnn_dsse.dataset import Dataset, DatasetBuilder
from dnn_dsse.estimators import DnnStateEstimator, DnnTopologyIdentifier, TrainingOutcome
from dnn_dsse.result import MetricsReport
from dnn_dsse.lse import LinearStateEstimator
from dnn_dsse.placement import PlacementPlan, PlacementSelector
from dnn_dsse.realtime import ScenarioRunner, ScenarioStep
from dnn_dsse.artifacts import ArtifactStore

"""
core.py

The offline-learning and real-time workflow over one experiment configuration: feeder and topology catalog, load
distributions learned from smart-meter history, SMD placement, dataset generation, training and evaluation of both
networks, the linear baseline, and topology-change scenarios. Every product is written to the artifact store.
"""

DSSE_DEFAULTS = {'hidden_layers': 5, 'hidden_width': 500, 'output_activation': 'linear', 'epochs': 200,
                 'loss': 'mse'}
TI_DEFAULTS = {'hidden_layers': 5, 'hidden_width': 800, 'output_activation': 'softmax', 'epochs': 50,
               'loss': 'categorical_cross_entropy'}
FINE_TUNE_DEFAULTS = {'epochs': 10, 'lr_init': 1e-3, 'test_fraction': 0.0}
STREAM_LSE_NOISE = 8


class ExperimentPipeline:
    def __init__(self, config: Config, workers: Optional[int] = None):
        """
        :param config: An initialized Config object
        :param workers: Parallel worker count, overriding the config's 'workers'
        """
        self.config = config
        self.seed = int(config.get('seed', 0))
        self.workers = int(workers or config.get('workers', 1))
        self.store = ArtifactStore(config.get('output_dir', 'output'))
        self.config_hash = config.config_hash()
        self._model: Optional[FeederModel] = None
        self._catalog: Optional[TopologyCatalog] = None
        self._pdfs: Optional[Dict[str, LoadPdf]] = None
        self._plans: Dict[str, PlacementPlan] = {}

    @property
    def model(self) -> FeederModel:
        if self._model is None:
            feeder_file = self.config.get('feeder_file')
            if not feeder_file:
                raise ValueError("Config lacks 'feeder_file'")
            self._model = FeederParser.load(feeder_file)
            logging.info(f"Loaded feeder {self._model.name}: {len(self._model.buses)} buses, "
                         f"{len(self._model.branches)} branches, {len(self._model.switch_ids)} switches")
        return self._model

    @property
    def catalog(self) -> TopologyCatalog:
        if self._catalog is None:
            self._catalog = NetworkBuilder.enumerate_feasible_topologies(self.model)
        return self._catalog

    def sampler(self) -> SamplerConfig:
        return SamplerConfig.from_dict(self.config.section('sampler'), self.seed)

    def error_model(self, mode: Optional[str] = None) -> ErrorModelConfig:
        cfg = ErrorModelConfig.from_dict(self.config.section('error_model'))
        return cfg.with_mode(mode) if mode else cfg

    def train_config(self, kind: str) -> TrainConfig:
        """
        Training settings of one network: the config section on top of the default architecture.
        :param kind: 'dsse', 'ti' or 'fine_tune'
        """
        if kind == 'fine_tune':
            section = dict(self.config.section('fine_tune'))
            section.pop('rows', None)
            defaults = dict(DSSE_DEFAULTS, **FINE_TUNE_DEFAULTS)
        else:
            section = self.config.section(f"train_{kind}")
            defaults = DSSE_DEFAULTS if kind == 'dsse' else TI_DEFAULTS
        return TrainConfig.from_dict(section, seed=self.seed, **defaults)

    # Load model

    def meter_series(self) -> List[SmartMeterSeries]:
        meter_file = self.config.get('meter_file')
        if meter_file and os.path.exists(meter_file):
            return LoadModeler.read_meter_file(meter_file)
        logging.warning(f"Smart-meter file {meter_file} not found, synthesizing a meter year from the feeder loads")
        return LoadModeler.synthesize_meter_year(self.model, self.seed)

    def load_pdfs(self) -> Dict[str, LoadPdf]:
        """
        Load distributions of this configuration: those of an earlier 'loads fit' under the same config hash and
        feeder, or a fresh fit of the smart-meter history.
        """
        if self._pdfs is None:
            self._pdfs = self.stored_pdfs()
        if self._pdfs is None:
            kde = self.config.section('kde')
            self._pdfs = LoadModeler.fit_all(self.meter_series(), self.model, self.seed, **kde)
        return self._pdfs

    def stored_pdfs(self) -> Optional[Dict[str, LoadPdf]]:
        path = self.store.find('load-pdfs', self.config_hash, 'json')
        if path is None:
            return None
        document, provenance = ArtifactStore.read_json(path)
        if provenance.get('config_hash') != self.config_hash or \
                document.get('feeder_fingerprint') != self.model.fingerprint():
            logging.warning(f"Ignoring {path}: written for another configuration or feeder")
            return None
        logging.info(f"Reusing load distributions from {path}")
        return {g: LoadPdf.from_dict(pdf) for g, pdf in document['pdfs'].items()}

    def fit_loads(self) -> str:
        pdfs = self.load_pdfs()
        document = {'feeder_fingerprint': self.model.fingerprint(),
                    'pdfs': {g: pdf.to_dict() for g, pdf in sorted(pdfs.items())},
                    'moments': {g: {'mean_kw': pdf.mean(), 'variance_kw2': pdf.variance()}
                                for g, pdf in sorted(pdfs.items())}}
        return self.store.write_json('load-pdfs', document, self.config_hash, self.seed)

    def sample_loads(self, n: int) -> str:
        """Write n sampled operating points as one row per (scenario, element, phase key)."""
        rows = []
        for i, injections in enumerate(LoadModeler.sample_loads(self.load_pdfs(), self.model, self.sampler(), n)):
            for element, entries in sorted(injections.items()):
                for key, kw, kvar in entries:
                    rows.append((i, element, key, kw, kvar))
        frame = pd.DataFrame(rows, columns=['scenario', 'element', 'phase', 'kw', 'kvar'])
        frame['config_hash'] = self.config_hash
        return self.store.write_text('load-samples', frame.to_csv(index=False, float_format='%.17g'),
                                     self.config_hash, 'csv')

    def screen_loads(self) -> pd.DataFrame:
        """Perturb the metered history and compare it per transformer group with a two-sample KS test."""
        series = self.meter_series()
        groups = sorted({ld.meter_group for ld in self.model.loads if ld.meter_group})
        original = LoadModeler.aggregate_to_transformer(series, groups)
        pct = self.error_model().meter_noise_pct
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, STREAM_METER_NOISE, 1]))
        noisy = []
        for s in series:
            energies = MeasurementNoise.perturb_smart_meter(s.energies(), pct, rng)
            noisy.append(SmartMeterSeries(s.meter_id, s.transformer_group, tuple(zip(s.intervals(), energies))))
        perturbed = LoadModeler.aggregate_to_transformer(noisy, groups)
        alpha = float(self.config.section('kde').get('alpha', 0.05))
        rows = []
        for g in groups:
            ks = LoadModeler.ks_two_sample(original[g], perturbed[g], alpha)
            rows.append({'group': g, 'statistic': ks.statistic, 'p_value': ks.p_value, 'reject': ks.reject})
        rejected = sum(r['reject'] for r in rows)
        logging.info(f"Smart-meter screening at {pct}% noise: {rejected} of {len(rows)} groups rejected")
        frame = pd.DataFrame(rows, columns=['group', 'statistic', 'p_value', 'reject'])
        frame['config_hash'] = self.config_hash
        return frame

    # Placement

    def placement(self, case: Optional[str] = None) -> PlacementPlan:
        """
        The SMD plan of a named placement case, of the configured fixed locations, or of the integrated selection.
        """
        key = case or 'default'
        if key in self._plans:
            return self._plans[key]
        section = self.config.section('placement')
        if case:
            cases = self.config.section('placement_cases')
            if case not in cases:
                raise ValueError(f"Unknown placement case '{case}', known: {sorted(cases)}")
            plan = PlacementSelector.plan_from_ids(self.model, cases[case])
        elif section.get('locations'):
            plan = PlacementSelector.plan_from_ids(self.model, section['locations'])
        else:
            plan = self.integrated_placement()
        self._plans[key] = plan
        return plan

    def integrated_placement(self) -> PlacementPlan:
        section = self.config.section('placement')
        candidates = PlacementSelector.candidate_locations(self.model, section.get('allow'))
        return PlacementSelector.integrated_placement(
            self.model, self.catalog, self.load_pdfs(), self.sampler(), alpha=float(section.get('alpha', 99.0)),
            tau=float(section.get('tau', 0.05)), budget=int(section.get('budget', 4)), seed=self.seed,
            samples=int(section.get('samples', 200)), workers=self.workers, candidates=candidates)

    def place(self) -> Tuple[PlacementPlan, str]:
        plan = self.integrated_placement()
        self._plans['default'] = plan
        return plan, self.store.write_json('placement', plan.to_dict(), self.config_hash, self.seed)

    # Datasets and training

    def build_dataset(self, kind: str, case: Optional[str] = None, rows: Optional[int] = None,
                      topology: Optional[SwitchConfig] = None, mode: Optional[str] = None) -> Dataset:
        section = self.config.section('dataset')
        if kind == 'dsse':
            n = int(rows or section.get('dsse_rows', 12500))
            topologies = topology or self.model.normal_config()
        else:
            n = int(rows or section.get('ti_rows_per_topology', 1000))
            topologies = self.catalog
        return DatasetBuilder.build_dataset(self.model, topologies, self.load_pdfs(), self.placement(case),
                                            self.error_model(mode), self.sampler(), n, self.seed, kind,
                                            ti_channels=section.get('ti_channels', 'current'),
                                            workers=self.workers, catalog=self.catalog)

    def generate_dataset(self, kind: str, case: Optional[str] = None) -> str:
        return self.store.write_dataset(f"dataset-{kind}", self.build_dataset(kind, case), self.config_hash,
                                        self.seed)

    def train(self, kind: str, dataset: Optional[Dataset] = None) -> Tuple[TrainingOutcome, str]:
        """
        Train the DSSE regressor or the TI classifier and store the checkpoint.
        :return: (TrainingOutcome, checkpoint path)
        """
        dataset = dataset or self.build_dataset(kind)
        cfg = self.train_config(kind)
        if kind == 'dsse':
            outcome = DnnStateEstimator.train_dsse(dataset, cfg)
        else:
            outcome = DnnTopologyIdentifier.train_ti(dataset, cfg)
        path = self.save_checkpoint(f"checkpoint-{kind}", outcome.params)
        return outcome, path

    def save_checkpoint(self, kind: str, params: MlpParams) -> str:
        params.metadata = dict(params.metadata, config_hash=self.config_hash, seed=self.seed)
        return self.store.write_bytes(kind, NeuralNetwork.save_checkpoint(params), self.config_hash, 'json')

    @classmethod
    def load_checkpoint(cls, path: str) -> MlpParams:
        with open(path, 'rb') as handle:
            return NeuralNetwork.load_checkpoint(handle.read())

    # Evaluation

    def evaluate_dsse(self, case: Optional[str] = None, baseline: bool = False,
                      mode: Optional[str] = None) -> List[MetricsReport]:
        """
        Train and test the DSSE network for a placement; with baseline, also run the linear estimator on its
        full-observability plan under Gaussian TVE noise.
        """
        outcome, _ = self.train('dsse', self.build_dataset('dsse', case, mode=mode))
        report = outcome.report
        report.method = f"DNN ({self.error_model(mode).mode}{', ' + case if case else ''})"
        reports = [report]
        if baseline:
            reports.append(self.evaluate_lse())
            better = reports[0].phase_mae < reports[1].phase_mae and reports[0].mape < reports[1].mape
            reports[0].notes.append(f"dnn_beats_lse={better}")
        return reports

    def evaluate_ti(self) -> MetricsReport:
        outcome, _ = self.train('ti')
        return outcome.report

    def evaluate_lse(self, rows: Optional[int] = None) -> MetricsReport:
        """Linear WLS on its own greedy full-observability plan with Gaussian TVE noise only."""
        model = self.model
        config = model.normal_config()
        plan = LinearStateEstimator.greedy_observability_placement(model, config)
        lmm = LinearStateEstimator.build_h(model, config, plan)
        error_cfg = self.error_model('gaussian_tve_only')
        n = int(rows or self.config.section('dataset').get('lse_rows', 500))
        snapshots = DatasetBuilder.simulate(model, [(0, config)], self.load_pdfs(), self.sampler(), n,
                                            workers=self.workers)
        full_index = model.node_index()
        estimates, truths, masks, tves = [], [], [], []
        for snap in snapshots:
            truth, _ = lmm.layout.measure(snap.solution)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, STREAM_LSE_NOISE, snap.index]))
            noisy = MeasurementNoise.apply_two_level_error(truth, lmm.layout.kinds, error_cfg, rng)
            energized = np.abs(truth) > 0
            tves.append(MeasurementNoise.tve(noisy[energized], truth[energized]))
            voltages, _ = LinearStateEstimator.solve_wls(lmm, LinearStateEstimator.measurement_vector(noisy),
                                                         LinearStateEstimator.weights(noisy, error_cfg.tve))
            estimates.append(LinearStateEstimator.state_vector(voltages, lmm.node_index, full_index))
            state, mask = snap.state_vector(full_index)
            truths.append(state)
            masks.append(mask)
        report = MetricsReport.for_states('LSE (gaussian_tve_only)', np.array(estimates), np.array(truths),
                                          np.array(masks), full_index.names(), len(plan))
        within = float(np.mean(np.concatenate(tves) <= error_cfg.tve.tve_limit)) * 100
        report.notes.append(f"tve_within_limit_pct={within:.2f}")
        return report

    def evaluate_placement(self) -> Tuple[List[MetricsReport], bool]:
        """
        DSSE phase MAE for every named placement case. Cross-cluster dominance holds when the two-SMD plan whose
        sites lie in different voltage clusters beats every two-SMD plan within one cluster.
        """
        cases = self.config.section('placement_cases')
        section = self.config.section('placement')
        clusters = PlacementSelector.voltage_clusters(self.model, self.load_pdfs(), self.sampler(),
                                                      float(section.get('tau', 0.05)),
                                                      self.seed, samples=int(section.get('samples', 200)),
                                                      workers=self.workers)
        reports, cross, same = [], [], []
        for case in sorted(cases):
            report = self.evaluate_dsse(case)[0]
            reports.append(report)
            plan = self.placement(case)
            if len(plan) == 2:
                labels = {clusters.get(bus) for bus in plan.buses}
                (cross if len(labels) == 2 else same).append(report.phase_mae)
        dominance = bool(cross) and bool(same) and min(cross) < min(same)
        logging.info(f"Cross-cluster dominance: {dominance}")
        return reports, dominance

    # Scenarios

    def run_scenario(self, name: str) -> List[ScenarioStep]:
        scenarios = self.config.section('scenarios')
        if name not in scenarios:
            raise ValueError(f"Unknown scenario '{name}', known: {sorted(scenarios)}")
        script = [SwitchConfig.from_string(str(label)) for label in scenarios[name]]
        dsse_set = self.build_dataset('dsse', topology=script[0])
        dsse, _ = self.train('dsse', dsse_set)
        ti, _ = self.train('ti')
        fine_tune = self.config.section('fine_tune')
        section = self.config.section('dataset')
        runner = ScenarioRunner(self.model, self.catalog, self.load_pdfs(), self.sampler(), self.error_model(),
                                self.placement(), self.train_config('fine_tune'),
                                fine_tune_rows=int(fine_tune.get('rows', 1000)),
                                live_rows=int(section.get('live_rows', 200)), seed=self.seed, workers=self.workers)
        steps = runner.run_scenario(script, dsse.params, ti.params)
        document = {'scenario': name, 'script': [c.label() for c in script],
                    'steps': [{k: v for k, v in s.to_dict().items() if k not in ('timings', 'fine_tune_s')}
                              for s in steps]}
        self.store.write_json(f"scenario-{name}", document, self.config_hash, self.seed)
        return steps

    def write_report(self, name: str, reports: List[MetricsReport], extra: Optional[dict] = None) -> str:
        document = {'reports': [r.to_dict() for r in reports]}
        for r in document['reports']:
            r.pop('timings_s', None)
        document.update(extra or {})
        return self.store.write_json(f"report-{name}", json.loads(json.dumps(document, default=float)),
                                     self.config_hash, self.seed)
