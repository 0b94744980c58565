import json
import pytest
import numpy as np
from dnn_dsse.mlp import (NeuralNetwork, LayerSpec, MlpParams, Scaler, TrainConfig, PlateauConfig, TrainingError,
                          CheckpointError, AdamState, CHECKPOINT_FORMAT)


@pytest.fixture
def regression_net():
    specs = (LayerSpec(6, 'relu'), LayerSpec(5, 'relu'), LayerSpec(2, 'linear'))
    return NeuralNetwork.init_he_normal(specs, 3, seed=4)


@pytest.fixture
def classifier_net():
    specs = (LayerSpec(6, 'relu'), LayerSpec(3, 'softmax'))
    return NeuralNetwork.init_he_normal(specs, 2, seed=4)


def numeric_gradient(params, x, target, kind, masks, eps=1e-6):
    """Central differences of the loss for every weight and bias entry."""

    def differentiate(arrays):
        grads = []
        for w in arrays:
            g = np.zeros_like(w)
            for idx in np.ndindex(w.shape):
                saved = w[idx]
                w[idx] = saved + eps
                up = NeuralNetwork.loss(NeuralNetwork.forward(params, x, masks=masks).output, target, kind)
                w[idx] = saved - eps
                down = NeuralNetwork.loss(NeuralNetwork.forward(params, x, masks=masks).output, target, kind)
                w[idx] = saved
                g[idx] = (up - down) / (2 * eps)
            grads.append(g)
        return grads

    return differentiate(params.weights), differentiate(params.biases)


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


def random_network(seed, output):
    rng = np.random.default_rng(seed)
    hidden = [LayerSpec(int(rng.integers(2, 7)), 'relu') for _ in range(int(rng.integers(1, 4)))]
    outputs = int(rng.integers(2, 5))
    params = NeuralNetwork.init_he_normal(tuple(hidden) + (LayerSpec(outputs, output),), int(rng.integers(2, 6)),
                                          seed=seed)
    for b in params.biases:
        b += 0.1 * rng.normal(size=b.shape)
    return params, rng


def test_init_shapes(regression_net):
    assert [w.shape for w in regression_net.weights] == [(6, 3), (5, 6), (2, 5)]
    assert all(np.all(b == 0) for b in regression_net.biases)
    assert regression_net.output_width == 2
    assert np.array_equal(regression_net.input_scaler.std, np.ones(3))
    again = NeuralNetwork.init_he_normal(regression_net.specs, 3, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(again.weights, regression_net.weights))


def test_he_normal_variance():
    params = NeuralNetwork.init_he_normal((LayerSpec(400, 'relu'), LayerSpec(1, 'linear')), 200, seed=1)
    assert params.weights[0].std() == pytest.approx(np.sqrt(2.0 / 200), rel=0.05)


def test_classifier_has_no_output_scaler(classifier_net):
    assert classifier_net.output_scaler is None
    probabilities = NeuralNetwork.predict(classifier_net, np.random.default_rng(0).normal(size=(4, 2)))
    assert np.allclose(probabilities.sum(axis=1), 1.0)


def test_softmax_only_on_output():
    with pytest.raises(ValueError, match="Softmax"):
        NeuralNetwork.init_he_normal((LayerSpec(4, 'softmax'), LayerSpec(2, 'linear')), 3)


@pytest.mark.parametrize("width, activation", [(0, 'relu'), (3, 'tanh')])
def test_layer_spec_validation(width, activation):
    with pytest.raises(ValueError):
        LayerSpec(width, activation)


def test_params_must_chain(regression_net):
    with pytest.raises(ValueError, match="chain"):
        MlpParams(regression_net.specs, 4, regression_net.weights, regression_net.biases, Scaler.identity(4))


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("kind, output", [("mse", "linear"), ("categorical_cross_entropy", "softmax"),
                                          ("mse", "softmax")])
def test_gradient_matches_finite_differences(seed, kind, output):
    params, rng = random_network(seed, output)
    batch = int(rng.integers(3, 9))
    # inputs are redrawn until no unit sits on the relu kink, where central differences are meaningless
    while True:
        x = rng.normal(size=(batch, params.input_width))
        cache = NeuralNetwork.forward(params, x, train=True, dropout_rate=0.2, rng=rng)
        if min(np.abs(z).min() for z in cache.pre_activations[:-1]) > 1e-3:
            break
    if output == 'softmax':
        target = NeuralNetwork.one_hot(rng.integers(0, params.output_width, size=batch), params.output_width)
    else:
        target = rng.normal(size=(batch, params.output_width))
    grads_w, grads_b = NeuralNetwork.backward(params, cache, target, kind)
    numeric_w, numeric_b = numeric_gradient(params, x, target, kind, cache.masks)
    assert [g.shape for g in grads_b] == [b.shape for b in params.biases]
    for analytic, numeric in zip(grads_w + grads_b, numeric_w + numeric_b):
        assert relative_error(analytic, numeric) < 1e-5


def test_cross_entropy_needs_softmax(regression_net):
    cache = NeuralNetwork.forward(regression_net, np.zeros((1, 3)))
    with pytest.raises(ValueError, match="softmax"):
        NeuralNetwork.backward(regression_net, cache, np.zeros((1, 2)), 'categorical_cross_entropy')


def test_loss_values():
    assert NeuralNetwork.loss([[1.0, 2.0]], [[0.0, 0.0]], 'mse') == pytest.approx(2.5)
    assert NeuralNetwork.loss([[0.5, 0.5]], [[1.0, 0.0]], 'categorical_cross_entropy') == pytest.approx(np.log(2))
    # log is floored, so a confident wrong answer stays finite
    assert np.isfinite(NeuralNetwork.loss([[0.0, 1.0]], [[1.0, 0.0]], 'categorical_cross_entropy'))
    with pytest.raises(ValueError):
        NeuralNetwork.loss([[1.0]], [[1.0, 2.0]], 'mse')
    with pytest.raises(ValueError):
        NeuralNetwork.loss([[1.0]], [[1.0]], 'hinge')


def test_forward_checks_width(regression_net):
    with pytest.raises(ValueError, match="width"):
        NeuralNetwork.forward(regression_net, np.zeros((2, 4)))
    with pytest.raises(ValueError, match="random generator"):
        NeuralNetwork.forward(regression_net, np.zeros((2, 3)), train=True, dropout_rate=0.5)


def test_dropout_masks(regression_net):
    rng = np.random.default_rng(0)
    cache = NeuralNetwork.forward(regression_net, np.ones((2000, 3)), train=True, dropout_rate=0.25, rng=rng)
    mask = cache.masks[0]
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    assert np.mean(mask == 0) == pytest.approx(0.25, abs=0.02)
    assert cache.masks[-1] is None
    evaluation = NeuralNetwork.forward(regression_net, np.ones((1, 3)))
    assert all(m is None for m in evaluation.masks)


def test_adam_step_moves_against_gradient(regression_net):
    state = AdamState.zeros(regression_net)
    before = regression_net.weights[0].copy()
    grads_w = [np.ones_like(w) for w in regression_net.weights]
    grads_b = [np.zeros_like(b) for b in regression_net.biases]
    NeuralNetwork.adam_step(regression_net, (grads_w, grads_b), state, lr=0.01)
    # the first bias-corrected step has magnitude lr
    assert np.allclose(before - regression_net.weights[0], 0.01, rtol=1e-5)
    assert state.step == 1


def test_one_hot():
    assert NeuralNetwork.one_hot([2, 0], 3).tolist() == [[0, 0, 1], [1, 0, 0]]


def test_scaler():
    data = np.array([[1.0, 5.0], [3.0, 5.0]])
    scaler = Scaler.fit(data)
    assert np.allclose(scaler.transform(data)[:, 0], [-1.0, 1.0])
    # constant columns get the floor instead of a zero division
    assert np.all(np.isfinite(scaler.transform(data)))
    assert np.allclose(scaler.inverse(scaler.transform(data)), data)


def test_training_reduces_loss():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    y = np.column_stack([2 * x[:, 0] - x[:, 1], x[:, 0] * x[:, 1]])
    cfg = TrainConfig(hidden_layers=2, hidden_width=32, epochs=40, batch_size=32, dropout_rate=0.0, lr_init=0.01)
    params = NeuralNetwork.init_he_normal(cfg.layer_specs(2), 2, seed=cfg.seed)
    untrained = np.mean((NeuralNetwork.predict(params.copy(), x[320:]) - y[320:]) ** 2)
    best, history = NeuralNetwork.train(params, x[:320], y[:320], x[320:], y[320:], cfg)
    assert len(history.val_loss) == 40
    assert history.val_loss[history.best_epoch - 1] == min(history.val_loss)
    prediction = NeuralNetwork.predict(best, x[320:])
    assert np.mean((prediction - y[320:]) ** 2) < 0.25 * untrained
    assert np.mean((prediction[:, 0] - y[320:, 0]) ** 2) < 0.3


def test_training_classifier():
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 3.0], [3.0, 0.0], [-3.0, -3.0]])
    labels = rng.integers(0, 3, size=300)
    x = centers[labels] + rng.normal(scale=0.5, size=(300, 2))
    cfg = TrainConfig(hidden_layers=1, hidden_width=16, output_activation='softmax', epochs=15, dropout_rate=0.1,
                      lr_init=0.01, loss='categorical_cross_entropy')
    params = NeuralNetwork.init_he_normal(cfg.layer_specs(3), 2)
    best, _ = NeuralNetwork.train(params, x[:250], NeuralNetwork.one_hot(labels[:250], 3), x[250:],
                                  NeuralNetwork.one_hot(labels[250:], 3), cfg)
    predicted = NeuralNetwork.predict(best, x[250:]).argmax(axis=1)
    assert np.mean(predicted == labels[250:]) > 0.9


def test_training_deterministic():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(64, 3)), rng.normal(size=(64, 1))
    cfg = TrainConfig(hidden_layers=1, hidden_width=8, epochs=3, lr_init=0.01)
    first, _ = NeuralNetwork.train(NeuralNetwork.init_he_normal(cfg.layer_specs(1), 3), x, y, x, y, cfg)
    again, _ = NeuralNetwork.train(NeuralNetwork.init_he_normal(cfg.layer_specs(1), 3), x, y, x, y, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(first.weights, again.weights))


def test_plateau_lowers_learning_rate():
    x = np.zeros((16, 1))
    y = np.zeros((16, 1))
    cfg = TrainConfig(hidden_layers=1, hidden_width=4, epochs=8, lr_init=0.08, dropout_rate=0.0,
                      plateau=PlateauConfig(factor=0.5, patience=2, min_lr=0.03))
    _, history = NeuralNetwork.train(NeuralNetwork.init_he_normal(cfg.layer_specs(1), 1), x, y, x, y, cfg)
    assert history.lr[0] == 0.08
    assert history.lr[-1] == 0.03
    assert all(a >= b for a, b in zip(history.lr, history.lr[1:]))


def test_empty_training_set(regression_net):
    with pytest.raises(TrainingError):
        NeuralNetwork.train(regression_net, np.zeros((0, 3)), np.zeros((0, 2)), [], [], TrainConfig())


def test_diverging_loss_raises(regression_net):
    x = np.full((8, 3), np.nan)
    with pytest.raises(TrainingError, match="Loss became"):
        NeuralNetwork.train(regression_net, x, np.zeros((8, 2)), x, np.zeros((8, 2)),
                            TrainConfig(epochs=1, dropout_rate=0.0), fit_input_scaler=False)


def test_checkpoint_round_trip(regression_net):
    regression_net.input_scaler = Scaler(np.array([1.0, 2.0, 3.0]), np.array([0.5, 1.0, 2.0]))
    regression_net.output_scaler = Scaler(np.array([0.1, 0.2]), np.array([3.0, 4.0]))
    regression_net.metadata = {"kind": "dsse", "rows": 12}
    loaded = NeuralNetwork.load_checkpoint(NeuralNetwork.save_checkpoint(regression_net))
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(NeuralNetwork.predict(loaded, x), NeuralNetwork.predict(regression_net, x))
    assert loaded.metadata == {"kind": "dsse", "rows": 12}
    assert loaded.specs == regression_net.specs


def test_checkpoint_without_output_scaler(classifier_net):
    loaded = NeuralNetwork.load_checkpoint(NeuralNetwork.save_checkpoint(classifier_net))
    assert loaded.output_scaler is None


def _edit(payload, mutate):
    document = json.loads(payload)
    mutate(document)
    return json.dumps(document).encode('utf-8')


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update({"format": "other"}), "not a network"),
    (lambda d: d.update({"version": 99}), "version 99"),
    (lambda d: d.pop("weights"), "Corrupt"),
    (lambda d: d["weights"].pop(), "Corrupt"),
    (lambda d: d["biases"][0].append(1.0), "Corrupt"),
    (lambda d: d["layers"][0].update({"activation": "tanh"}), "Corrupt"),
])
def test_checkpoint_corruption(regression_net, mutate, message):
    payload = _edit(NeuralNetwork.save_checkpoint(regression_net), mutate)
    with pytest.raises(CheckpointError, match=message):
        NeuralNetwork.load_checkpoint(payload)


def test_checkpoint_truncated(regression_net):
    payload = NeuralNetwork.save_checkpoint(regression_net)
    with pytest.raises(CheckpointError):
        NeuralNetwork.load_checkpoint(payload[:len(payload) // 2])
    with pytest.raises(CheckpointError):
        NeuralNetwork.load_checkpoint(b'\xff\xfe')
    assert json.loads(payload)["format"] == CHECKPOINT_FORMAT


def test_train_config():
    cfg = TrainConfig.from_dict({"epochs": 5, "plateau": {"patience": 2}}, lr_init=0.05)
    assert cfg.epochs == 5 and cfg.lr_init == 0.05
    assert cfg.plateau.patience == 2 and cfg.plateau.factor == 0.5
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert [s.width for s in cfg.layer_specs(7)] == [500] * 5 + [7]
    with pytest.raises(ValueError, match="Unknown"):
        TrainConfig.from_dict({"momentum": 0.9})


@pytest.mark.parametrize("values", [
    {"epochs": 0},
    {"batch_size": 0},
    {"dropout_rate": 1.0},
    {"test_fraction": -0.1},
    {"lr_init": 0.0},
    {"loss": "hinge"},
])
def test_train_config_validation(values):
    with pytest.raises(ValueError):
        TrainConfig(**values)


if __name__ == '__main__':
    pytest.main()
