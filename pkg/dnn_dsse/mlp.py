import json
import copy
import time
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np

"""
mlp.py

Dense feed-forward network in numpy: He-normal initialization, ReLU hidden layers with inverted dropout, linear or
softmax output, mean squared error and categorical cross-entropy, Adam with a reduce-on-plateau learning rate, and
JSON checkpoints. Everything is float64.
"""

ACTIVATIONS = ('relu', 'linear', 'softmax')
LOSSES = ('mse', 'categorical_cross_entropy')
CHECKPOINT_FORMAT = 'dnn_dsse.checkpoint'
CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-12
STD_FLOOR = 1e-8


class TrainingError(RuntimeError):
    """Raised for empty datasets or a diverging (NaN) loss."""


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or incompatible checkpoints."""


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = 'relu'

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"Layer width must be positive, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Activation must be one of {ACTIVATIONS}, got {self.activation!r}")


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> 'Scaler':
        data = np.asarray(data, dtype=float)
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, width: int) -> 'Scaler':
        return cls(np.zeros(width), np.ones(width))

    def transform(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean) / self.std

    def inverse(self, data) -> np.ndarray:
        return np.asarray(data, dtype=float) * self.std + self.mean


@dataclass
class MlpParams:
    specs: Tuple[LayerSpec, ...]
    input_width: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_scaler: Scaler
    output_scaler: Optional[Scaler] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        widths = [self.input_width] + [s.width for s in self.specs]
        for k, spec in enumerate(self.specs):
            if spec.activation == 'softmax' and k != len(self.specs) - 1:
                raise ValueError("Softmax is only allowed on the output layer")
            if self.weights[k].shape != (widths[k + 1], widths[k]) or self.biases[k].shape != (widths[k + 1],):
                raise ValueError(f"Layer {k} parameters do not chain: expected W {(widths[k + 1], widths[k])}")

    @property
    def output_width(self) -> int:
        return self.specs[-1].width

    def copy(self) -> 'MlpParams':
        return copy.deepcopy(self)


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-4
    threshold: float = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    hidden_layers: int = 5
    hidden_width: int = 500
    output_activation: str = 'linear'
    epochs: int = 200
    batch_size: int = 32
    dropout_rate: float = 0.30
    lr_init: float = 0.1
    plateau: PlateauConfig = PlateauConfig()
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    seed: int = 0
    loss: str = 'mse'

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        for name in ('dropout_rate', 'test_fraction', 'val_fraction'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not 0 < self.lr_init < 1:
            raise ValueError(f"lr_init must lie in (0, 1), got {self.lr_init}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    @classmethod
    def from_dict(cls, data: Optional[Mapping], **defaults) -> 'TrainConfig':
        values = dict(defaults)
        values.update(data or {})
        plateau = values.pop('plateau', None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(k for k in values if k not in known)
        if unknown:
            raise ValueError(f"Unknown training options {unknown}")
        if isinstance(plateau, Mapping):
            values['plateau'] = PlateauConfig(**plateau)
        return cls(**values)

    def layer_specs(self, output_width: int) -> Tuple[LayerSpec, ...]:
        hidden = tuple(LayerSpec(self.hidden_width, 'relu') for _ in range(self.hidden_layers))
        return hidden + (LayerSpec(output_width, self.output_activation),)

    def to_dict(self) -> dict:
        values = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != 'plateau'}
        values['plateau'] = self.plateau.__dict__.copy()
        return values


@dataclass
class ForwardPass:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    output: np.ndarray


@dataclass
class AdamState:
    step: int
    m_w: List[np.ndarray]
    v_w: List[np.ndarray]
    m_b: List[np.ndarray]
    v_b: List[np.ndarray]

    @classmethod
    def zeros(cls, params: MlpParams) -> 'AdamState':
        return cls(0, [np.zeros_like(w) for w in params.weights], [np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases], [np.zeros_like(b) for b in params.biases])


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {'train_loss': self.train_loss, 'val_loss': self.val_loss, 'lr': self.lr,
                'best_epoch': self.best_epoch, 'seconds': self.seconds}


class NeuralNetwork:

    @classmethod
    def init_he_normal(cls, specs: Sequence[LayerSpec], input_width: int, seed: int = 0) -> MlpParams:
        """
        Weights ~ N(0, 2 / fan_in), biases zero. Scalers start as identities.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        widths = [input_width] + [s.width for s in specs]
        weights = [rng.standard_normal((widths[k + 1], widths[k])) * np.sqrt(2.0 / widths[k])
                   for k in range(len(specs))]
        biases = [np.zeros(widths[k + 1]) for k in range(len(specs))]
        return MlpParams(tuple(specs), input_width, weights, biases, Scaler.identity(input_width),
                         Scaler.identity(specs[-1].width) if specs[-1].activation != 'softmax' else None)

    @classmethod
    def _activate(cls, z: np.ndarray, activation: str) -> np.ndarray:
        if activation == 'relu':
            return np.maximum(z, 0.0)
        if activation == 'softmax':
            shifted = z - z.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            return e / e.sum(axis=1, keepdims=True)
        return z

    @classmethod
    def forward(cls, params: MlpParams, x, train: bool = False, dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None,
                masks: Optional[List[Optional[np.ndarray]]] = None) -> ForwardPass:
        """
        Forward pass on standardized inputs. In train mode every hidden unit is dropped with probability
        dropout_rate and survivors are scaled by 1 / (1 - dropout_rate); explicit masks override sampling.
        """
        a = np.atleast_2d(np.asarray(x, dtype=float))
        if a.shape[1] != params.input_width:
            raise ValueError(f"Input width {a.shape[1]} does not match network input width {params.input_width}")
        inputs, pre, used_masks = [], [], []
        last = len(params.specs) - 1
        for k, spec in enumerate(params.specs):
            inputs.append(a)
            z = a @ params.weights[k].T + params.biases[k]
            pre.append(z)
            a = cls._activate(z, spec.activation)
            mask = None
            if k < last:
                if masks is not None:
                    mask = masks[k]
                elif train and dropout_rate > 0:
                    if rng is None:
                        raise ValueError("Dropout in train mode needs a random generator")
                    mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
                if mask is not None:
                    a = a * mask
            used_masks.append(mask)
        return ForwardPass(inputs, pre, used_masks, a)

    @classmethod
    def loss(cls, output, target, kind: str) -> float:
        output = np.atleast_2d(np.asarray(output, dtype=float))
        target = np.atleast_2d(np.asarray(target, dtype=float))
        if output.shape != target.shape:
            raise ValueError(f"Output shape {output.shape} does not match target shape {target.shape}")
        if kind == 'mse':
            return float(np.mean((output - target) ** 2))
        if kind == 'categorical_cross_entropy':
            return float(-np.sum(target * np.log(np.maximum(output, LOG_FLOOR))) / output.shape[0])
        raise ValueError(f"Unknown loss '{kind}'")

    @classmethod
    def backward(cls, params: MlpParams, cache: ForwardPass, target,
                 kind: str) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """
        Exact gradients of the batch-mean loss with the dropout masks of the cached forward pass held fixed.
        :return: (weight gradients, bias gradients) per layer
        """
        y = cache.output
        t = np.atleast_2d(np.asarray(target, dtype=float))
        batch = y.shape[0]
        out_act = params.specs[-1].activation
        if kind == 'categorical_cross_entropy':
            if out_act != 'softmax':
                raise ValueError("Categorical cross-entropy needs a softmax output layer")
            delta = (y - t) / batch
        elif kind == 'mse':
            grad_y = 2.0 * (y - t) / y.size
            if out_act == 'softmax':
                delta = y * (grad_y - np.sum(grad_y * y, axis=1, keepdims=True))
            elif out_act == 'relu':
                delta = grad_y * (cache.pre_activations[-1] > 0)
            else:
                delta = grad_y
        else:
            raise ValueError(f"Unknown loss '{kind}'")

        grads_w = [None] * len(params.specs)
        grads_b = [None] * len(params.specs)
        for k in range(len(params.specs) - 1, -1, -1):
            grads_w[k] = delta.T @ cache.inputs[k]
            grads_b[k] = delta.sum(axis=0)
            if k == 0:
                break
            upstream = delta @ params.weights[k]
            if cache.masks[k - 1] is not None:
                upstream = upstream * cache.masks[k - 1]
            if params.specs[k - 1].activation == 'relu':
                upstream = upstream * (cache.pre_activations[k - 1] > 0)
            delta = upstream
        return grads_w, grads_b

    @classmethod
    def adam_step(cls, params: MlpParams, grads: Tuple[List[np.ndarray], List[np.ndarray]], state: AdamState,
                  lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  epsilon: float = 1e-8) -> Tuple[MlpParams, AdamState]:
        """Adam with bias correction; updates params and state in place and returns both."""
        grads_w, grads_b = grads
        state.step += 1
        c1 = 1.0 - beta1 ** state.step
        c2 = 1.0 - beta2 ** state.step
        for k in range(len(params.weights)):
            for p, g, m, v in ((params.weights[k], grads_w[k], state.m_w[k], state.v_w[k]),
                               (params.biases[k], grads_b[k], state.m_b[k], state.v_b[k])):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)
        return params, state

    @classmethod
    def predict(cls, params: MlpParams, x) -> np.ndarray:
        """Inference on raw features: standardize, forward without dropout, de-standardize regression outputs."""
        out = cls.forward(params, params.input_scaler.transform(np.atleast_2d(x))).output
        if params.output_scaler is not None:
            out = params.output_scaler.inverse(out)
        return out

    @classmethod
    def evaluate_loss(cls, params: MlpParams, x: np.ndarray, y: np.ndarray, kind: str) -> float:
        out = cls.forward(params, x).output
        return cls.loss(out, y, kind)

    @classmethod
    def train(cls, params: MlpParams, x_train, y_train, x_val, y_val, cfg: TrainConfig,
              fit_input_scaler: bool = True, fit_output_scaler: bool = True) -> Tuple[MlpParams, TrainingHistory]:
        """
        Mini-batch training with Adam, per-epoch seeded shuffling and dropout, reduce-on-plateau on the validation
        loss, and best-validation checkpoint selection. Scalers are fitted on the training rows only.
        :param params: initial parameters, modified in place
        :param x_train: raw training features
        :param y_train: raw regression targets or one-hot class targets
        :param x_val: raw validation features
        :param y_val: raw validation targets
        :param cfg: TrainConfig
        :return: (best parameters, TrainingHistory)
        """
        started = time.perf_counter()
        x_train = np.asarray(x_train, dtype=float)
        y_train = np.asarray(y_train, dtype=float)
        if len(x_train) == 0:
            raise TrainingError("Cannot train on an empty dataset")
        if len(x_val) == 0:
            x_val, y_val = x_train, y_train
        if fit_input_scaler:
            params.input_scaler = Scaler.fit(x_train)
        if params.output_scaler is not None and fit_output_scaler:
            params.output_scaler = Scaler.fit(y_train)

        xs, xv = params.input_scaler.transform(x_train), params.input_scaler.transform(x_val)
        if params.output_scaler is not None:
            ys, yv = params.output_scaler.transform(y_train), params.output_scaler.transform(y_val)
        else:
            ys, yv = y_train, np.asarray(y_val, dtype=float)

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        state = AdamState.zeros(params)
        history = TrainingHistory()
        lr = cfg.lr_init
        best_val, best = np.inf, params.copy()
        plateau_best, wait = np.inf, 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(xs))
            total = 0.0
            for b, start in enumerate(range(0, len(xs), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                cache = cls.forward(params, xs[idx], train=True, dropout_rate=cfg.dropout_rate, rng=rng)
                batch_loss = cls.loss(cache.output, ys[idx], cfg.loss)
                if not np.isfinite(batch_loss):
                    raise TrainingError(f"Loss became {batch_loss} at epoch {epoch + 1}, batch {b}")
                total += batch_loss * len(idx)
                cls.adam_step(params, cls.backward(params, cache, ys[idx], cfg.loss), state, lr,
                              cfg.beta1, cfg.beta2, cfg.epsilon)
            val_loss = cls.evaluate_loss(params, xv, yv, cfg.loss)
            if not np.isfinite(val_loss):
                raise TrainingError(f"Validation loss became {val_loss} at epoch {epoch + 1}")
            history.train_loss.append(total / len(xs))
            history.val_loss.append(val_loss)
            history.lr.append(lr)
            logging.debug(f"Epoch {epoch + 1}/{cfg.epochs}: train {total / len(xs):.6g}, val {val_loss:.6g}, "
                          f"lr {lr:.3g}")

            if val_loss < best_val:
                best_val, best = val_loss, params.copy()
                history.best_epoch = epoch + 1
            if val_loss < plateau_best - cfg.plateau.threshold:
                plateau_best, wait = val_loss, 0
            else:
                wait += 1
                if wait >= cfg.plateau.patience:
                    lr = max(lr * cfg.plateau.factor, cfg.plateau.min_lr)
                    wait = 0

        history.seconds = time.perf_counter() - started
        logging.info(f"Trained {cfg.epochs} epochs in {history.seconds:.1f}s, best validation loss {best_val:.6g} "
                     f"at epoch {history.best_epoch}")
        return best, history

    @classmethod
    def save_checkpoint(cls, params: MlpParams) -> bytes:
        document = {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'input_width': params.input_width,
            'layers': [{'width': s.width, 'activation': s.activation} for s in params.specs],
            'weights': [w.tolist() for w in params.weights],
            'biases': [b.tolist() for b in params.biases],
            'input_scaler': {'mean': params.input_scaler.mean.tolist(), 'std': params.input_scaler.std.tolist()},
            'output_scaler': None if params.output_scaler is None else
            {'mean': params.output_scaler.mean.tolist(), 'std': params.output_scaler.std.tolist()},
            'metadata': params.metadata,
        }
        return json.dumps(document, sort_keys=True).encode('utf-8')

    @classmethod
    def load_checkpoint(cls, payload: bytes) -> MlpParams:
        try:
            document = json.loads(payload.decode('utf-8') if isinstance(payload, bytes) else payload)
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Corrupt checkpoint payload: {e}")
        if not isinstance(document, dict) or document.get('format') != CHECKPOINT_FORMAT:
            raise CheckpointError("Corrupt checkpoint payload: not a network checkpoint")
        if document.get('version') != CHECKPOINT_VERSION:
            raise CheckpointError(f"Checkpoint version {document.get('version')} is not supported, "
                                  f"expected {CHECKPOINT_VERSION}")
        try:
            specs = tuple(LayerSpec(int(l['width']), l['activation']) for l in document['layers'])
            out_scaler = document['output_scaler']
            return MlpParams(
                specs=specs,
                input_width=int(document['input_width']),
                weights=[np.array(w, dtype=float).reshape(s.width, -1) for w, s in zip(document['weights'], specs)],
                biases=[np.array(b, dtype=float) for b in document['biases']],
                input_scaler=Scaler(np.array(document['input_scaler']['mean'], dtype=float),
                                    np.array(document['input_scaler']['std'], dtype=float)),
                output_scaler=None if out_scaler is None else Scaler(np.array(out_scaler['mean'], dtype=float),
                                                                     np.array(out_scaler['std'], dtype=float)),
                metadata=document.get('metadata', {}),
            )
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise CheckpointError(f"Corrupt checkpoint payload: {e}")

    @classmethod
    def one_hot(cls, labels, classes: int) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        out = np.zeros((len(labels), classes))
        out[np.arange(len(labels)), labels] = 1.0
        return out
