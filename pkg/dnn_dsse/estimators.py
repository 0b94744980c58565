import time
import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Tuple
import numpy as np
from dnn_dsse.dataset import Dataset
from dnn_dsse.feeder import wrap_angle
from dnn_dsse.mlp import MlpParams, NeuralNetwork, TrainConfig, TrainingError, TrainingHistory
from dnn_dsse.result import MetricsReport

"""
estimators.py

The two learned estimators: a regression network mapping SMD measurements to the full voltage state (an
approximation of the conditional mean of the state given the measurements) and a classification network mapping
SMD current measurements to the active switch configuration. Trained parameters carry a metadata block with the
feeder fingerprint and the feature and label layout, which is checked before inference.
"""


class EstimatorError(ValueError):
    """Raised for wrong dataset kinds, width or feeder fingerprint mismatches, and classes missing from training."""


@dataclass(eq=False)
class TrainingOutcome:
    params: MlpParams
    history: TrainingHistory
    train_rows: np.ndarray
    val_rows: np.ndarray
    test_rows: np.ndarray
    report: Optional[MetricsReport] = None


def _metadata(dataset: Dataset, cfg: TrainConfig, history: TrainingHistory) -> dict:
    manifest = dataset.manifest
    placement = manifest.get('placement') or {}
    return {
        'kind': dataset.kind,
        'feeder_fingerprint': manifest.get('feeder_fingerprint'),
        'feature_names': list(dataset.feature_names),
        'label_names': list(dataset.label_names),
        'layout': manifest.get('layout'),
        'label_map': manifest.get('label_map'),
        'state_masks': manifest.get('state_masks'),
        'placement': placement,
        'n_smd': len(placement.get('locations', [])) or None,
        'train_config': cfg.to_dict(),
        'history': {k: v for k, v in history.to_dict().items() if k != 'seconds'},
    }


def _check_inputs(params: MlpParams, z, kind: str, fingerprint: Optional[str]) -> np.ndarray:
    meta = params.metadata
    if meta.get('kind', kind) != kind:
        raise EstimatorError(f"Checkpoint holds a {meta.get('kind')} network, expected {kind}")
    if fingerprint is not None and meta.get('feeder_fingerprint') not in (None, fingerprint):
        raise EstimatorError(f"Checkpoint was trained on feeder {meta.get('feeder_fingerprint', '')[:12]}, "
                             f"not {fingerprint[:12]}")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != params.input_width:
        raise EstimatorError(f"Measurement vector has {z.shape[1]} features, the network expects "
                             f"{params.input_width}")
    return z


def _check_dataset(params: MlpParams, dataset: Dataset):
    meta = params.metadata
    fingerprint = dataset.manifest.get('feeder_fingerprint')
    if fingerprint is not None and meta.get('feeder_fingerprint') not in (None, fingerprint):
        raise EstimatorError("Dataset and checkpoint were built on different feeders")
    if dataset.features.shape[1] != params.input_width:
        raise EstimatorError(f"Dataset has {dataset.features.shape[1]} features, the network expects "
                             f"{params.input_width}")
    names = meta.get('feature_names')
    if names is not None and list(names) != list(dataset.feature_names):
        raise EstimatorError("Dataset feature ordering differs from the checkpoint's")


class DnnStateEstimator:

    @classmethod
    def train_dsse(cls, dataset: Dataset, cfg: TrainConfig) -> TrainingOutcome:
        """
        Train the state estimation regressor on a dsse dataset and score it on the held-out test rows.
        :param dataset: A dsse Dataset
        :param cfg: TrainConfig; the output layer width is the label width
        :return: TrainingOutcome with the best-validation parameters
        """
        if dataset.kind != 'dsse':
            raise EstimatorError(f"train_dsse needs a dsse dataset, got {dataset.kind}")
        train, val, test = dataset.split(cfg.test_fraction, cfg.val_fraction, cfg.seed)
        logging.info(f"Training DSSE network on {len(train)} rows ({len(val)} validation, {len(test)} test)")
        params = NeuralNetwork.init_he_normal(cfg.layer_specs(dataset.labels.shape[1]), dataset.features.shape[1],
                                              cfg.seed)
        params, history = NeuralNetwork.train(params, dataset.features[train], dataset.labels[train],
                                               dataset.features[val], dataset.labels[val], cfg)
        params.metadata = _metadata(dataset, cfg, history)
        outcome = TrainingOutcome(params, history, train, val, test)
        if len(test):
            outcome.report = cls.evaluate(params, dataset, test)
            outcome.report.timings['train'] = history.seconds
        return outcome

    @classmethod
    def estimate_states(cls, params: MlpParams, z, fingerprint: Optional[str] = None) -> np.ndarray:
        """
        Estimate the state from measurement rows.
        :param params: Trained DSSE parameters
        :param z: one measurement vector or a batch of them
        :param fingerprint: feeder fingerprint to check against the checkpoint, if given
        :return: rows of interleaved (magnitude pu, angle degrees) estimates
        """
        z = _check_inputs(params, z, 'dsse', fingerprint)
        states = NeuralNetwork.predict(params, z)
        states[:, 1::2] = wrap_angle(states[:, 1::2])
        return states

    @classmethod
    def evaluate(cls, params: MlpParams, dataset: Dataset, rows=None, method: str = 'DNN') -> MetricsReport:
        _check_dataset(params, dataset)
        part = dataset if rows is None else dataset.subset(rows)
        started = time.perf_counter()
        estimates = cls.estimate_states(params, part.features)
        elapsed = time.perf_counter() - started
        masks = dataset.state_masks()
        width = dataset.labels.shape[1] // 2
        mask = np.array([masks.get(int(t), np.ones(width, dtype=bool)) for t in part.topology])
        n_smd = len((dataset.manifest.get('placement') or {}).get('locations', [])) or None
        report = MetricsReport.for_states(method, estimates, part.labels, mask,
                                          [n.rsplit(':', 1)[0] for n in dataset.label_names[0::2]], n_smd)
        report.timings['inference'] = elapsed
        return report

    @classmethod
    def fine_tune(cls, params: MlpParams, dataset: Dataset, cfg: TrainConfig) -> TrainingOutcome:
        """
        Transfer the regressor to a new topology: start from the trained weights, keep the input scaler, refit the
        output scaler on the new data and retrain all layers. The given parameters are left untouched.
        :param params: Trained DSSE parameters of the base topology
        :param dataset: A dsse Dataset generated on the new topology
        :param cfg: TrainConfig for the fine-tuning run (epochs, learning rate)
        :return: TrainingOutcome holding the updated copy
        """
        if dataset.kind != 'dsse':
            raise EstimatorError(f"fine_tune needs a dsse dataset, got {dataset.kind}")
        _check_dataset(params, dataset)
        if dataset.labels.shape[1] != params.output_width:
            raise EstimatorError(f"Dataset has {dataset.labels.shape[1]} labels, the network outputs "
                                 f"{params.output_width}")
        train, val, test = dataset.split(cfg.test_fraction, cfg.val_fraction, cfg.seed)
        parent = hashlib.sha256(NeuralNetwork.save_checkpoint(params)).hexdigest()
        tuned, history = NeuralNetwork.train(params.copy(), dataset.features[train], dataset.labels[train],
                                             dataset.features[val], dataset.labels[val], cfg,
                                             fit_input_scaler=False, fit_output_scaler=True)
        tuned.metadata = dict(params.metadata, state_masks=dataset.manifest.get('state_masks'),
                              fine_tuned_from=parent, fine_tune_config=cfg.to_dict())
        logging.info(f"Fine-tuned DSSE network on {len(train)} rows in {history.seconds:.2f}s")
        outcome = TrainingOutcome(tuned, history, train, val, test)
        if len(test):
            outcome.report = cls.evaluate(tuned, dataset, test)
        return outcome


class DnnTopologyIdentifier:

    @classmethod
    def train_ti(cls, dataset: Dataset, cfg: TrainConfig) -> TrainingOutcome:
        """
        Train the topology classifier; one softmax output per catalog topology.
        :param dataset: A ti Dataset
        :param cfg: TrainConfig with a softmax output and cross-entropy loss
        :return: TrainingOutcome whose report carries overall and per-class test accuracy
        """
        if dataset.kind != 'ti':
            raise EstimatorError(f"train_ti needs a ti dataset, got {dataset.kind}")
        label_map = dataset.manifest.get('label_map') or {}
        classes = max(len(label_map), int(dataset.labels.max()) + 1)
        train, val, test = dataset.split(cfg.test_fraction, cfg.val_fraction, cfg.seed)
        missing = sorted(set(range(classes)) - set(dataset.labels[train].tolist()))
        if missing:
            raise EstimatorError(f"Topology classes {missing} are absent from the training split")
        logging.info(f"Training TI network on {len(train)} rows over {classes} topologies")
        params = NeuralNetwork.init_he_normal(cfg.layer_specs(classes), dataset.features.shape[1], cfg.seed)
        try:
            params, history = NeuralNetwork.train(
                params, dataset.features[train], NeuralNetwork.one_hot(dataset.labels[train], classes),
                dataset.features[val], NeuralNetwork.one_hot(dataset.labels[val], classes), cfg)
        except ValueError as e:
            raise TrainingError(f"TI training failed: {e}")
        params.metadata = _metadata(dataset, cfg, history)
        outcome = TrainingOutcome(params, history, train, val, test)
        if len(test):
            outcome.report = cls.evaluate(params, dataset, test)
            outcome.report.timings['train'] = history.seconds
        return outcome

    @classmethod
    def identify_topology(cls, params: MlpParams, z, fingerprint: Optional[str] = None) -> Tuple[np.ndarray,
                                                                                                   np.ndarray]:
        """
        Classify measurement rows.
        :return: (class index per row, posterior rows); ties go to the lowest index
        """
        z = _check_inputs(params, z, 'ti', fingerprint)
        posterior = NeuralNetwork.predict(params, z)
        return np.argmax(posterior, axis=1), posterior

    @classmethod
    def evaluate(cls, params: MlpParams, dataset: Dataset, rows=None, method: str = 'DNN-TI') -> MetricsReport:
        _check_dataset(params, dataset)
        part = dataset if rows is None else dataset.subset(rows)
        started = time.perf_counter()
        predicted, _ = cls.identify_topology(params, part.features)
        elapsed = time.perf_counter() - started
        n_smd = len((dataset.manifest.get('placement') or {}).get('locations', [])) or None
        report = MetricsReport.for_topologies(method, predicted, part.labels, params.output_width, n_smd)
        report.timings['inference'] = elapsed
        return report
