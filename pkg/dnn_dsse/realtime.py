import time
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence
import numpy as np
from dnn_dsse.feeder import FeederModel, SwitchConfig, TopologyCatalog
from dnn_dsse.loads import LoadPdf, SamplerConfig
from dnn_dsse.noise import ErrorModelConfig
from dnn_dsse.mlp import MlpParams, TrainConfig
from dnn_dsse.dataset import DatasetBuilder, MeasurementLayout
from dnn_dsse.estimators import DnnStateEstimator, DnnTopologyIdentifier

"""
realtime.py

Replays a topology-change script the way the estimators would run in operation: each step brings snapshots from
the true topology, the topology classifier votes on them, and when it names a topology other than the current base
the state estimator is fine-tuned on fresh samples of the identified topology, which then becomes the base. A copy
of the original estimator is kept frozen for comparison.
"""

LIVE_OFFSET = 10 ** 6
FINE_TUNE_OFFSET = 2 * 10 ** 6


@dataclass
class ScenarioStep:
    step: int
    topology: str
    identified: str
    ti_accuracy: float
    fine_tuned: bool
    mae_fine_tuned: float
    mae_frozen: float
    mape_fine_tuned: float
    mape_frozen: float
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def ti_correct(self) -> bool:
        return self.topology == self.identified

    @classmethod
    def result_fields(cls) -> List[str]:
        return ["step", "topology", "identified", "ti_correct", "ti_accuracy_pct", "fine_tuned",
                "mae_fine_tuned_deg", "mae_frozen_deg", "mape_fine_tuned_pct", "mape_frozen_pct", "fine_tune_s"]

    def get_values(self) -> list:
        return [self.step, self.topology, self.identified, self.ti_correct, round(self.ti_accuracy, 2),
                self.fine_tuned, round(self.mae_fine_tuned, 4), round(self.mae_frozen, 4),
                round(self.mape_fine_tuned, 4), round(self.mape_frozen, 4),
                round(self.timings.get('fine_tune', 0.0), 3)]

    def to_dict(self) -> dict:
        return dict(zip(self.result_fields(), self.get_values()), timings=self.timings)


class ScenarioRunner:

    def __init__(self, model: FeederModel, catalog: TopologyCatalog, pdfs: Mapping[str, LoadPdf],
                 sampler: SamplerConfig, error_cfg: ErrorModelConfig, plan, fine_tune_cfg: TrainConfig,
                 fine_tune_rows: int = 1000, live_rows: int = 200, seed: int = 0, workers: int = 1):
        self.model = model
        self.catalog = catalog
        self.pdfs = pdfs
        self.sampler = SamplerConfig(sampler.pf_range, sampler.dg_variation, seed)
        self.error_cfg = error_cfg
        self.plan = plan
        self.fine_tune_cfg = fine_tune_cfg
        self.fine_tune_rows = fine_tune_rows
        self.live_rows = live_rows
        self.seed = seed
        self.workers = workers

    def _resolve(self, topology) -> SwitchConfig:
        if isinstance(topology, SwitchConfig):
            config = topology
        else:
            config = SwitchConfig.from_string(str(topology))
        self.catalog.index_of(config)
        return config

    def _dsse_dataset(self, config: SwitchConfig, layout: MeasurementLayout, rows: int, start: int):
        snapshots = DatasetBuilder.simulate(self.model, [(self.catalog.index_of(config), config)], self.pdfs,
                                            self.sampler, rows, start=start, workers=self.workers)
        return DatasetBuilder.assemble(self.model, snapshots, layout, self.error_cfg, self.seed, 'dsse', self.plan,
                                       self.catalog)

    def run_scenario(self, script: Sequence, dsse_params: MlpParams, ti_params: MlpParams) -> List[ScenarioStep]:
        """
        Run a topology script.
        :param script: ordered topology labels ('0101') or SwitchConfigs; the first entry is the base the DSSE
                       network was trained on
        :param dsse_params: DSSE network trained on the first topology
        :param ti_params: TI network over the catalog
        :return: one ScenarioStep per script entry
        """
        if not script:
            raise ValueError("Scenario script is empty")
        configs = [self._resolve(t) for t in script]
        dsse_layout = MeasurementLayout.from_dict(dsse_params.metadata['layout'])
        ti_layout = MeasurementLayout.from_dict(ti_params.metadata['layout'])
        base_index = self.catalog.index_of(configs[0])
        base_params, frozen = dsse_params, dsse_params
        steps = []
        for s, config in enumerate(configs):
            index = self.catalog.index_of(config)
            started = time.perf_counter()
            snapshots = DatasetBuilder.simulate(self.model, [(index, config)], self.pdfs, self.sampler,
                                                self.live_rows, start=LIVE_OFFSET * (s + 1), workers=self.workers)
            live = DatasetBuilder.assemble(self.model, snapshots, dsse_layout, self.error_cfg, self.seed, 'dsse',
                                           self.plan, self.catalog)
            ti_live = DatasetBuilder.assemble(self.model, snapshots, ti_layout, self.error_cfg, self.seed, 'ti',
                                              self.plan, self.catalog)
            timings = {'simulate': time.perf_counter() - started}

            started = time.perf_counter()
            predicted, _ = DnnTopologyIdentifier.identify_topology(ti_params, ti_live.features)
            votes = np.bincount(predicted, minlength=len(self.catalog))
            identified = int(np.argmax(votes))
            timings['identify'] = time.perf_counter() - started
            ti_accuracy = float(np.mean(predicted == index) * 100.0)
            if identified != index:
                logging.warning(f"Step {s + 1}: topology {config.label()} identified as "
                                f"{self.catalog.configs[identified].label()}")

            fine_tuned = False
            if identified != base_index:
                target = self.catalog.configs[identified]
                tune_set = self._dsse_dataset(target, dsse_layout, self.fine_tune_rows, FINE_TUNE_OFFSET * (s + 1))
                outcome = DnnStateEstimator.fine_tune(base_params, tune_set, self.fine_tune_cfg)
                base_params, base_index, fine_tuned = outcome.params, identified, True
                timings['fine_tune'] = outcome.history.seconds
                logging.info(f"Step {s + 1}: fine-tuned to {target.label()} in {outcome.history.seconds:.2f}s")

            tuned_report = DnnStateEstimator.evaluate(base_params, live)
            frozen_report = DnnStateEstimator.evaluate(frozen, live)
            step = ScenarioStep(s + 1, config.label(), self.catalog.configs[identified].label(), ti_accuracy,
                                fine_tuned, tuned_report.phase_mae, frozen_report.phase_mae, tuned_report.mape,
                                frozen_report.mape, timings)
            logging.info(f"Step {s + 1} ({config.label()}): MAE {step.mae_fine_tuned:.4f} deg with updates, "
                         f"{step.mae_frozen:.4f} deg frozen")
            steps.append(step)
        return steps

    @classmethod
    def table(cls, steps: Sequence[ScenarioStep]) -> str:
        rows = [ScenarioStep.result_fields()] + [[str(v) for v in s.get_values()] for s in steps]
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        return '\n'.join('  '.join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)
