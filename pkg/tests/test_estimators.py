import pytest
import numpy as np
from dnn_dsse.network import NetworkBuilder
from dnn_dsse.noise import ErrorModelConfig
from dnn_dsse.placement import PlacementSelector
from dnn_dsse.dataset import DatasetBuilder, Dataset
from dnn_dsse.mlp import NeuralNetwork, TrainConfig
from dnn_dsse.estimators import DnnStateEstimator, DnnTopologyIdentifier, EstimatorError


@pytest.fixture
def small_cfg():
    return TrainConfig(hidden_layers=2, hidden_width=16, epochs=5, batch_size=16, dropout_rate=0.1, lr_init=0.01,
                       test_fraction=0.25, val_fraction=0.2)


@pytest.fixture
def dsse_dataset(small_feeder, small_pdfs, sampler):
    plan = PlacementSelector.plan_from_ids(small_feeder, ["A-B", "C-A"])
    return DatasetBuilder.build_dataset(small_feeder, small_feeder.normal_config(), small_pdfs, plan,
                                        ErrorModelConfig(), sampler, 60, seed=5, kind='dsse')


@pytest.fixture
def ti_dataset(switch_feeder, switch_pdfs, sampler):
    catalog = NetworkBuilder.enumerate_feasible_topologies(switch_feeder)
    plan = PlacementSelector.plan_from_ids(switch_feeder, ["A-B", "D-A"])
    return DatasetBuilder.build_dataset(switch_feeder, catalog, switch_pdfs, plan, ErrorModelConfig(), sampler, 40,
                                        seed=5, kind='ti')


@pytest.fixture
def trained_dsse(dsse_dataset, small_cfg):
    return DnnStateEstimator.train_dsse(dsse_dataset, small_cfg)


def test_train_dsse(trained_dsse, dsse_dataset, small_feeder):
    params = trained_dsse.params
    assert params.input_width == dsse_dataset.features.shape[1]
    assert params.output_width == 2 * len(small_feeder.node_index())
    assert len(trained_dsse.test_rows) == 15
    assert len(trained_dsse.history.val_loss) == 5
    meta = params.metadata
    assert meta["kind"] == "dsse"
    assert meta["feeder_fingerprint"] == small_feeder.fingerprint()
    assert meta["n_smd"] == 2
    assert meta["feature_names"] == dsse_dataset.feature_names
    report = trained_dsse.report
    assert report.rows == 15
    assert report.n_smd == 2
    assert "inference" in report.timings and "train" in report.timings
    assert set(report.node_mae) == set(small_feeder.node_index().names())


def test_evaluate_row_selection(trained_dsse, dsse_dataset):
    rows = trained_dsse.test_rows[:6]
    selected = DnnStateEstimator.evaluate(trained_dsse.params, dsse_dataset, rows)
    assert selected.rows == 6
    whole = DnnStateEstimator.evaluate(trained_dsse.params, dsse_dataset.subset(rows))
    assert selected.phase_mae == pytest.approx(whole.phase_mae)
    assert selected.mape == pytest.approx(whole.mape)
    assert DnnStateEstimator.evaluate(trained_dsse.params, dsse_dataset).rows == len(dsse_dataset)


def test_estimate_states(trained_dsse, dsse_dataset, small_feeder):
    states = DnnStateEstimator.estimate_states(trained_dsse.params, dsse_dataset.features[0],
                                               fingerprint=small_feeder.fingerprint())
    assert states.shape == (1, dsse_dataset.labels.shape[1])
    assert np.all(states[:, 1::2] > -180) and np.all(states[:, 1::2] <= 180)
    batch = DnnStateEstimator.estimate_states(trained_dsse.params, dsse_dataset.features[:4])
    assert np.allclose(batch[0], states[0])


def test_estimate_states_checks(trained_dsse, dsse_dataset):
    with pytest.raises(EstimatorError, match="features"):
        DnnStateEstimator.estimate_states(trained_dsse.params, dsse_dataset.features[:, :-1])
    with pytest.raises(EstimatorError, match="feeder"):
        DnnStateEstimator.estimate_states(trained_dsse.params, dsse_dataset.features, fingerprint="0" * 64)
    with pytest.raises(EstimatorError, match="dsse network"):
        DnnTopologyIdentifier.identify_topology(trained_dsse.params, dsse_dataset.features)


def test_checkpoint_keeps_metadata(trained_dsse, dsse_dataset):
    loaded = NeuralNetwork.load_checkpoint(NeuralNetwork.save_checkpoint(trained_dsse.params))
    assert loaded.metadata["feeder_fingerprint"] == trained_dsse.params.metadata["feeder_fingerprint"]
    assert np.array_equal(DnnStateEstimator.estimate_states(loaded, dsse_dataset.features[:3]),
                          DnnStateEstimator.estimate_states(trained_dsse.params, dsse_dataset.features[:3]))


def test_evaluate_rejects_reordered_features(trained_dsse, dsse_dataset):
    names = list(reversed(dsse_dataset.feature_names))
    reordered = Dataset('dsse', dsse_dataset.features, dsse_dataset.labels, dsse_dataset.topology, names,
                        dsse_dataset.label_names, dict(dsse_dataset.manifest))
    with pytest.raises(EstimatorError, match="ordering"):
        DnnStateEstimator.evaluate(trained_dsse.params, reordered)


def test_evaluate_rejects_other_feeder(trained_dsse, dsse_dataset):
    other = dsse_dataset.subset(range(len(dsse_dataset)))
    other.manifest["feeder_fingerprint"] = "f" * 64
    with pytest.raises(EstimatorError, match="different feeders"):
        DnnStateEstimator.evaluate(trained_dsse.params, other)


def test_train_dsse_needs_dsse(ti_dataset, small_cfg):
    with pytest.raises(EstimatorError):
        DnnStateEstimator.train_dsse(ti_dataset, small_cfg)


def test_fine_tune(trained_dsse, small_feeder, small_pdfs, sampler):
    plan = PlacementSelector.plan_from_ids(small_feeder, ["A-B", "C-A"])
    fresh = DatasetBuilder.build_dataset(small_feeder, small_feeder.normal_config(), small_pdfs, plan,
                                         ErrorModelConfig(), sampler, 20, seed=6, kind='dsse')
    original = [w.copy() for w in trained_dsse.params.weights]
    cfg = TrainConfig(hidden_layers=2, hidden_width=16, epochs=2, lr_init=0.001, test_fraction=0.0)
    outcome = DnnStateEstimator.fine_tune(trained_dsse.params, fresh, cfg)
    # the base network is untouched and the input scaler carries over
    assert all(np.array_equal(a, b) for a, b in zip(original, trained_dsse.params.weights))
    assert np.array_equal(outcome.params.input_scaler.mean, trained_dsse.params.input_scaler.mean)
    assert not np.array_equal(outcome.params.weights[0], original[0])
    assert len(outcome.params.metadata["fine_tuned_from"]) == 64
    assert outcome.report is None
    assert len(outcome.test_rows) == 0


def test_fine_tune_checks_width(trained_dsse, ti_dataset):
    with pytest.raises(EstimatorError):
        DnnStateEstimator.fine_tune(trained_dsse.params, ti_dataset, TrainConfig())


def test_train_ti(ti_dataset):
    cfg = TrainConfig(hidden_layers=2, hidden_width=32, output_activation='softmax', epochs=30, batch_size=16,
                      dropout_rate=0.0, lr_init=0.01, loss='categorical_cross_entropy')
    outcome = DnnTopologyIdentifier.train_ti(ti_dataset, cfg)
    assert outcome.params.output_width == 3
    assert outcome.params.metadata["label_map"] == {0: "01", 1: "10", 2: "11"}
    report = outcome.report
    assert report.kind == 'ti'
    assert report.confusion.shape == (3, 3)
    # the switch currents separate the three topologies cleanly
    assert report.accuracy >= 80.0
    assert DnnTopologyIdentifier.evaluate(outcome.params, ti_dataset, outcome.test_rows[:4]).rows == 4

    labels, posterior = DnnTopologyIdentifier.identify_topology(outcome.params, ti_dataset.features[:5])
    assert labels.shape == (5,)
    assert np.allclose(posterior.sum(axis=1), 1.0)
    assert np.array_equal(labels, posterior.argmax(axis=1))


def test_train_ti_missing_class(small_cfg):
    rng = np.random.default_rng(0)
    dataset = Dataset('ti', rng.normal(size=(30, 2)), np.repeat([0, 1], 15), np.repeat([0, 1], 15), ["a", "b"],
                      ["topology"], {"label_map": {0: "01", 1: "10", 2: "11"}})
    with pytest.raises(EstimatorError, match=r"\[2\]"):
        DnnTopologyIdentifier.train_ti(dataset, small_cfg)


def test_train_ti_needs_ti(dsse_dataset, small_cfg):
    with pytest.raises(EstimatorError):
        DnnTopologyIdentifier.train_ti(dsse_dataset, small_cfg)


if __name__ == '__main__':
    pytest.main()
