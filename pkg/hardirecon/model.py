"""1D convolutional encoder-decoder mapping reduced measurements to full q-space signals.

Input pipeline: the K_L measurements are interpolated to all K_H directions and
stacked with the x, y and z components of the directions into a 4 x K_H input.
The encoder is a stack of strided convolutions with bias and ReLU producing a
non-negative code; the decoder is a stack of bias-free transposed convolutions
and is therefore linear in the code. Inner decoder filters have the shape of the
encoder filters they mirror; the last decoder layer emits a single channel.
"""

import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from .autodiff import (SGD, Adam, ConvSpec, Tensor, as_dtype, backward, conv1d, conv1d_transposed,
                       init_params, nmse_loss, relu)
from .errors import NonFiniteError, ShapeError, TrainingError, ValidationError
from .geometry import (MIN_DIRECTIONS, UPSAMPLE_METHODS, apply_permutation, derive_seed, make_permutation,
                       make_rng, upsample_to_full)
from .io_formats import read_checkpoint, read_training_log, write_checkpoint, write_training_log
from .log import Log

INPUT_CHANNELS = 4
OPTIMIZERS = ('adam', 'sgd')
# Separates test-time permutation seeds from the per-epoch training ones
TTA_STREAM = 7919
TRAINING_LOG = 'training_log.csv'
_TUPLE_FIELDS = ('encoder_channels', 'strides', 'encoder_padding', 'decoder_padding', 'decoder_output_padding')


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyper-parameters of one network (one network per K_L)."""

    k_high: int = 90
    k_low: int = 30
    encoder_channels: tuple = (400, 200, 100)
    strides: tuple = (3, 3, 2)
    kernel: int = 9
    encoder_padding: tuple = (3, 3, 4)
    decoder_padding: tuple = (4, 3, 3)
    decoder_output_padding: tuple = (1, 0, 0)
    upsample_method: str = 'idw'
    permute: bool = True
    lr: float = 0.001
    batch_size: int = 500
    epochs: int = 300
    patience: int = 30
    optimizer: str = 'adam'
    validation_split: float = 0.1
    seed: int = 0
    zero_init_last: bool = False
    precision: str = 'f32'
    tta_perms: int = 0

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

        depth = len(self.encoder_channels)
        if depth < 1 or any(len(getattr(self, name)) != depth for name in _TUPLE_FIELDS):
            raise ValidationError('channels, strides, paddings and output paddings need one entry per layer')
        if not MIN_DIRECTIONS <= self.k_low <= self.k_high:
            raise ValidationError('k_low must lie in [%d, %d], got %d' % (MIN_DIRECTIONS, self.k_high, self.k_low))
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError('unknown optimizer %r, expected one of %s' % (self.optimizer, ', '.join(OPTIMIZERS)))
        if self.upsample_method not in UPSAMPLE_METHODS:
            raise ValidationError('unknown upsampling method %r' % (self.upsample_method,))
        as_dtype(self.precision)
        if not self.lr > 0 or self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.tta_perms < 0:
            raise ValidationError('need lr > 0, batch_size >= 1, epochs >= 1, patience >= 1 and tta_perms >= 0')
        if not 0 <= self.validation_split < 1:
            raise ValidationError('validation_split must lie in [0, 1), got %r' % (self.validation_split,))

        lengths = self.encoder_lengths()
        decoded = self.decoder_lengths()
        if decoded != lengths[::-1]:
            raise ValidationError('stride chain does not return to %d directions: encoder lengths %s, decoder lengths %s'
                                  % (self.k_high, lengths, decoded))

    @classmethod
    def from_settings(cls, config, **overrides):
        """Builds a config from the Model settings section; non-None overrides win."""

        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in config.items() if k in names and v is not None}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_json(cls, data):
        return cls(**data)

    def to_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def architecture(self):
        return (self.k_high, self.encoder_channels, self.strides, self.kernel,
                self.encoder_padding, self.decoder_padding, self.decoder_output_padding)

    @property
    def dtype(self):
        return as_dtype(self.precision)

    def encoder_specs(self):
        channels = (INPUT_CHANNELS,) + self.encoder_channels
        return [ConvSpec(channels[i], channels[i + 1], self.kernel, self.strides[i], self.encoder_padding[i])
                for i in range(len(self.encoder_channels))]

    def decoder_specs(self):
        channels = (INPUT_CHANNELS,) + self.encoder_channels
        depth = len(self.encoder_channels)
        specs = []
        for i in range(depth):
            mirror = depth - 1 - i
            out_channels = 1 if i == depth - 1 else channels[mirror]
            specs.append(ConvSpec(channels[mirror + 1], out_channels, self.kernel, self.strides[mirror],
                                  self.decoder_padding[i], self.decoder_output_padding[i],
                                  has_bias=False, transposed=True))
        return specs

    def encoder_lengths(self):
        lengths = [self.k_high]
        for spec in self.encoder_specs():
            lengths.append(spec.output_length(lengths[-1]))
        return lengths

    def decoder_lengths(self):
        lengths = [self.encoder_lengths()[-1]]
        for spec in self.decoder_specs():
            lengths.append(spec.output_length(lengths[-1]))
        return lengths

    @property
    def code_shape(self):
        return (self.encoder_channels[-1], self.encoder_lengths()[-1])


class ModelParams:
    """Encoder filters and biases, decoder filters."""

    def __init__(self, config, encoder, decoder):
        self.config = config
        self.encoder = [(w, b) for w, b in encoder]
        self.decoder = list(decoder)
        self._check_shapes()

    def _check_shapes(self):
        encoder_specs, decoder_specs = self.config.encoder_specs(), self.config.decoder_specs()
        if len(self.encoder) != len(encoder_specs) or len(self.decoder) != len(decoder_specs):
            raise ShapeError('expected %d encoder and %d decoder layers, got %d and %d'
                             % (len(encoder_specs), len(decoder_specs), len(self.encoder), len(self.decoder)))
        for (weight, bias), spec in zip(self.encoder, encoder_specs):
            if weight.shape != spec.filter_shape or bias.shape != (spec.out_channels,):
                raise ShapeError('encoder layer expects filters %s and bias (%d,), got %s and %s'
                                 % (spec.filter_shape, spec.out_channels, weight.shape, bias.shape))
        for weight, spec in zip(self.decoder, decoder_specs):
            if weight.shape != spec.filter_shape:
                raise ShapeError('decoder layer expects filters %s, got %s' % (spec.filter_shape, weight.shape))

        depth = len(self.encoder)
        for i in range(depth - 1):
            if self.decoder[i].shape != self.encoder[depth - 1 - i][0].shape:
                raise ShapeError('decoder filter %d has shape %s but mirrors encoder filter %d of shape %s'
                                 % (i + 1, self.decoder[i].shape, depth - i, self.encoder[depth - 1 - i][0].shape))

        for name, tensor in self.named():
            if not np.all(np.isfinite(tensor.values)):
                raise ValidationError('parameter %s contains non-finite values' % name)

    @classmethod
    def initialize(cls, config, dtype=None):
        """He-uniform filters with per-layer seeds derived from config.seed; zero biases."""

        dtype = dtype or config.dtype
        encoder = [init_params(spec, derive_seed(config.seed, i), dtype) for i, spec in enumerate(config.encoder_specs())]
        offset = len(encoder)
        decoder = [init_params(spec, derive_seed(config.seed, offset + i), dtype)[0]
                   for i, spec in enumerate(config.decoder_specs())]
        if config.zero_init_last:
            decoder[-1].values[...] = 0
        return cls(config, encoder, decoder)

    def named(self):
        named = []
        for i, (weight, bias) in enumerate(self.encoder):
            named.append(('encoder.%d.weight' % i, weight))
            named.append(('encoder.%d.bias' % i, bias))
        for i, weight in enumerate(self.decoder):
            named.append(('decoder.%d.weight' % i, weight))
        return named

    def tensors(self):
        return [tensor for _, tensor in self.named()]

    def arrays(self):
        return {name: tensor.values.copy() for name, tensor in self.named()}

    def load_arrays(self, arrays):
        for name, tensor in self.named():
            if name not in arrays:
                raise ValidationError('missing parameter %s' % name)
            value = np.asarray(arrays[name], dtype=tensor.dtype)
            if value.shape != tensor.shape:
                raise ShapeError('parameter %s has shape %s, expected %s' % (name, value.shape, tensor.shape))
            tensor.values = value.copy()

    @classmethod
    def from_arrays(cls, config, arrays, dtype=None):
        params = cls.initialize(config, dtype)
        params.load_arrays(arrays)
        return params

    def astype(self, dtype):
        return ModelParams.from_arrays(self.config, self.arrays(), dtype)

    @property
    def dtype(self):
        return self.encoder[0][0].dtype

    @property
    def size(self):
        return sum(tensor.size for tensor in self.tensors())


def prepare_input(measurement, subset, scheme, perm=None, method='idw'):
    """Builds the 1 x 4 x K_H network input of one voxel.

    Channel 0 holds the measurement interpolated to every direction; channels 1-3
    hold the direction components. A permutation reorders all four channels.
    """

    channels = np.vstack([upsample_to_full(measurement, subset, scheme, method)[None, :], scheme.coordinates])
    if perm is not None:
        channels = apply_permutation(channels, perm)
    return channels[None, :, :]


def prepare_batch(measurements, subset, scheme, method='idw', orders=None, dtype=np.float64):
    """Network inputs of an n x K_L batch.

    Args:
        orders: optional n x K_H integer array, row i the permutation of voxel i.
    Returns:
        n x 4 x K_H array.
    """

    measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    full = upsample_to_full(measurements, subset, scheme, method)
    coordinates = np.broadcast_to(scheme.coordinates, (len(full), 3, len(scheme)))
    batch = np.concatenate([full[:, None, :], coordinates], axis=1)
    if orders is not None:
        batch = np.take_along_axis(batch, np.asarray(orders)[:, None, :], axis=2)
    return np.ascontiguousarray(batch, dtype=dtype)


def encode(x, params):
    h = x
    for (weight, bias), spec in zip(params.encoder, params.config.encoder_specs()):
        h = relu(conv1d(h, weight, bias, spec))
    return h


def decode(code, params):
    h = code
    for weight, spec in zip(params.decoder, params.config.decoder_specs()):
        h = conv1d_transposed(h, weight, spec)
    return h


def forward(x, params):
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    return decode(encode(x, params), params)


def voxel_permutations(seed, epoch, voxels, k):
    """Per-voxel permutation orders of one epoch, n x k."""

    return np.stack([make_permutation(k, derive_seed(seed, epoch, int(v))).as_array() for v in voxels])


@dataclass
class TrainingResult:
    params: ModelParams
    history: list
    best_epoch: int
    stopped_early: bool


class Trainer:
    """Mini-batch training with direction permutation augmentation and early stopping.

    With permutation enabled every training voxel gets a fresh permutation per
    epoch, applied jointly to its four input channels and to its target. The
    validation voxels are scored unpermuted. Training stops when the validation
    NMSE has not improved for `patience` epochs and the best weights are restored.
    """

    def __init__(self, config, scheme, subset, params=None, optimizer_state=None, start_epoch=0, history=None):
        if len(scheme) != config.k_high:
            raise ValidationError('scheme has %d directions but the model expects %d' % (len(scheme), config.k_high))
        subset.check_parent(len(scheme))
        if len(subset) != config.k_low:
            raise ValidationError('subset has %d directions but the model expects %d' % (len(subset), config.k_low))

        self.config = config
        self.scheme = scheme
        self.subset = subset
        self.params = params if params is not None else ModelParams.initialize(config)
        if self.params.config.architecture() != config.architecture():
            raise ValidationError('parameters were built for a different architecture')
        if config.optimizer == 'adam':
            self.optimizer = Adam(self.params.tensors(), lr=config.lr)
        else:
            self.optimizer = SGD(self.params.tensors(), lr=config.lr)
        if optimizer_state is not None:
            self.optimizer.load_state_arrays(*optimizer_state)
        self.start_epoch = start_epoch
        self.history = list(history or [])

    def _targets(self, signals):
        signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
        norms = np.linalg.norm(signals, axis=1)
        small = np.flatnonzero(norms <= 1e-12)
        if small.size:
            raise ValidationError('target voxel %d has zero norm' % small[0])
        return np.ascontiguousarray(signals[:, None, :], dtype=self.params.dtype)

    def _split(self, n):
        indices = np.arange(n)
        n_validation = int(math.ceil(n * self.config.validation_split))
        if n_validation < 1 or n - n_validation < 1:
            return indices, indices[:0]
        train, validation = train_test_split(indices, test_size=n_validation, random_state=self.config.seed)
        return np.sort(train), np.sort(validation)

    def evaluate(self, inputs, targets):
        """Mean per-voxel NMSE of unpermuted inputs."""

        total = 0.0
        for start in range(0, len(inputs), self.config.batch_size):
            x, y = inputs[start:start + self.config.batch_size], targets[start:start + self.config.batch_size]
            total += nmse_loss(forward(x, self.params), y).item() * len(x)
        return total / len(inputs)

    def fit(self, measurements, signals, epochs=None):
        """Trains on noisy reduced measurements and their full ground truth signals.

        Args:
            measurements: n x K_L matrix.
            signals: n x K_H matrix.
            epochs (int): epochs to run, config.epochs by default.
        Returns:
            TrainingResult with the best parameters and the training history.
        """

        measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
        if measurements.size == 0 or len(measurements) == 0:
            raise ValidationError('training needs at least one voxel')
        if measurements.shape[1] != len(self.subset):
            raise ShapeError('measurements have %d columns, subset has %d directions'
                             % (measurements.shape[1], len(self.subset)))
        targets = self._targets(signals)
        if len(targets) != len(measurements) or targets.shape[2] != len(self.scheme):
            raise ShapeError('expected %d x %d targets, got %s' % (len(measurements), len(self.scheme), (targets.shape[0], targets.shape[2])))

        config = self.config
        inputs = prepare_batch(measurements, self.subset, self.scheme, config.upsample_method, dtype=self.params.dtype)
        train_idx, val_idx = self._split(len(inputs))
        epochs = config.epochs if epochs is None else int(epochs)
        if epochs < 1:
            raise ValidationError('epochs must be positive, got %d' % epochs)
        Log.info('Training on %d voxels, validating on %d, K_L=%d, %d parameters'
                 % (len(train_idx), len(val_idx), config.k_low, self.params.size))

        best, best_epoch, wait, stopped = np.inf, self.start_epoch, 0, False
        best_arrays, best_state = self.params.arrays(), self._optimizer_snapshot()
        for epoch in range(self.start_epoch, self.start_epoch + epochs):
            started = time.perf_counter()
            order = train_idx[make_rng(config.seed, epoch).permutation(len(train_idx))]
            total = 0.0
            for batch, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                x, y = inputs[idx], targets[idx]
                if config.permute:
                    orders = voxel_permutations(config.seed, epoch, idx, len(self.scheme))[:, None, :]
                    x = np.take_along_axis(x, orders, axis=2)
                    y = np.take_along_axis(y, orders, axis=2)
                try:
                    loss = nmse_loss(forward(x, self.params), y)
                    self.optimizer.zero_grad()
                    backward(loss)
                    self.optimizer.step()
                except NonFiniteError as error:
                    raise TrainingError('epoch %d, batch %d: %s' % (epoch, batch, error))
                if not all(np.all(np.isfinite(t.values)) for t in self.params.tensors()):
                    raise TrainingError('epoch %d, batch %d: parameters became non-finite' % (epoch, batch))
                total += loss.item() * len(idx)

            train_nmse = total / len(order)
            val_nmse = self.evaluate(inputs[val_idx], targets[val_idx]) if len(val_idx) else float('nan')
            seconds = time.perf_counter() - started
            self.history.append((epoch, train_nmse, val_nmse, seconds))
            Log.debug('epoch %d: train NMSE %.6f, validation NMSE %.6f (%.2fs)' % (epoch, train_nmse, val_nmse, seconds))

            monitored = val_nmse if len(val_idx) else train_nmse
            if monitored < best:
                best, best_epoch, wait = monitored, epoch, 0
                best_arrays, best_state = self.params.arrays(), self._optimizer_snapshot()
            else:
                wait += 1
                if wait >= config.patience:
                    Log.info('Early stopping at epoch %d, best epoch %d' % (epoch, best_epoch))
                    stopped = True
                    break

        # Adam moments follow the restored parameters
        self.params.load_arrays(best_arrays)
        self.optimizer.load_state_arrays(**best_state)
        self.start_epoch = self.history[-1][0] + 1
        return TrainingResult(self.params, self.history, best_epoch, stopped)

    def _optimizer_snapshot(self):
        state = self.optimizer.state_arrays()
        return {'t': int(state['t']), 'm': [np.array(a) for a in state['m']], 'v': [np.array(a) for a in state['v']]}


def _check_compatible(params, config, subset, scheme):
    if params.config.architecture() != config.architecture():
        raise ValidationError('parameters were trained for a different architecture')
    if len(scheme) != config.k_high:
        raise ValidationError('scheme has %d directions but the model expects %d' % (len(scheme), config.k_high))
    subset.check_parent(len(scheme))
    if len(subset) != params.config.k_low:
        raise ValidationError('subset has %d directions but the model was trained for K_L=%d'
                              % (len(subset), params.config.k_low))


def infer_batch(measurements, subset, scheme, params, config=None, tta_perms=None):
    """Full signals for an n x K_L batch, in the original direction order.

    With tta_perms > 0 the prediction is averaged with predictions on that many
    fixed direction permutations, each mapped back to the original order.
    """

    config = config or params.config
    _check_compatible(params, config, subset, scheme)
    tta_perms = config.tta_perms if tta_perms is None else tta_perms
    measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    if measurements.shape[1] != len(subset):
        raise ShapeError('measurements have %d columns, subset has %d directions' % (measurements.shape[1], len(subset)))

    k = len(scheme)
    perms = [make_permutation(k, derive_seed(config.seed, TTA_STREAM, t)).as_array() for t in range(tta_perms)]
    outputs = []
    for start in range(0, len(measurements), config.batch_size):
        x = prepare_batch(measurements[start:start + config.batch_size], subset, scheme,
                          config.upsample_method, dtype=params.dtype)
        prediction = forward(x, params).values[:, 0, :].astype(np.float64)
        for order in perms:
            permuted = forward(np.ascontiguousarray(x[:, :, order]), params).values[:, 0, :]
            restored = np.empty_like(prediction)
            restored[:, order] = permuted
            prediction += restored
        outputs.append(prediction / (1 + len(perms)))
    return np.vstack(outputs)


def infer(measurement, subset, scheme, params, config=None):
    """Full K_H signal of one voxel; identity permutation."""

    return infer_batch(np.asarray(measurement)[None, :], subset, scheme, params, config, tta_perms=0)[0]


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer_state: tuple
    epoch: int
    metrics: dict
    history: list


def save_checkpoint(directory, params, optimizer=None, epoch=0, metrics=None, history=None):
    """Manifest plus float32 blobs of the parameters and, for Adam, its moments."""

    named = [(name, tensor.values) for name, tensor in params.named()]
    arrays = list(named)
    optimizer_manifest = {'name': params.config.optimizer, 't': 0}
    if isinstance(optimizer, Adam):
        state = optimizer.state_arrays()
        optimizer_manifest['t'] = state['t']
        arrays += [('adam_m.' + name, m) for (name, _), m in zip(named, state['m'])]
        arrays += [('adam_v.' + name, v) for (name, _), v in zip(named, state['v'])]

    manifest = {
        'config': params.config.to_json(),
        'epoch': int(epoch),
        'metrics': metrics or {},
        'optimizer': optimizer_manifest,
        'parameters': [name for name, _ in named],
        'seed': params.config.seed,
    }
    write_checkpoint(directory, manifest, arrays)
    if history:
        write_training_log(history, Path(directory) / TRAINING_LOG)


def load_checkpoint(directory, precision=None):
    """Reads a checkpoint written by save_checkpoint."""

    manifest, arrays = read_checkpoint(directory)
    config = ModelConfig.from_json(manifest['config'])
    if precision is not None:
        config = ModelConfig.from_json(dict(config.to_json(), precision=precision))
    arrays = dict(arrays)
    params = ModelParams.from_arrays(config, {name: arrays[name] for name in manifest['parameters']})

    optimizer_state = None
    t = manifest.get('optimizer', {}).get('t', 0)
    if t and all('adam_m.' + name in arrays for name in manifest['parameters']):
        optimizer_state = (t, [arrays['adam_m.' + name] for name in manifest['parameters']],
                           [arrays['adam_v.' + name] for name in manifest['parameters']])

    log_path = Path(directory) / TRAINING_LOG
    history = read_training_log(log_path) if log_path.exists() else []
    return Checkpoint(params, optimizer_state, int(manifest['epoch']), manifest.get('metrics', {}), history)
