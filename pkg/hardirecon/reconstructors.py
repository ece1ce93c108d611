# Copyright (c) 2019 Edvinas Byla
# Licensed under MIT License

from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .cs_solvers import SolverConfig, select_lambda, solve_l1_fista, solve_l2
from .dictionary import BasisDescriptor, build_dictionary, reconstruct_signal, restrict_dictionary
from .errors import UsageError, ValidationError
from .io_formats import read_json, write_json
from .log import Log
from .model import Trainer, infer_batch, load_checkpoint, save_checkpoint
from .storage import hash_scheme

METHODS = ('l2', 'cs', 'cnn')
METHOD_ALIASES = {'l1': 'cs'}
# Chunks per worker thread; more chunks balance uneven per-voxel solve times
CHUNKS_PER_THREAD = 4


def _finite_or_none(value):
    return float(value) if value is not None and np.isfinite(value) else None


def canonical_method(name):
    name = METHOD_ALIASES.get(name, name)
    if name not in METHODS:
        raise UsageError('unknown method %r, valid methods: %s' % (name, ', '.join(METHODS)))
    return name


class BaseReconstructor(ABC):
    """Abstract class used to define the reconstruction API."""

    method = None

    def __init__(self, scheme, subset, threads=1):
        subset.check_parent(len(scheme))
        self.scheme = scheme
        self.subset = subset
        self.threads = max(1, int(threads))

    @abstractmethod
    def fit(self, measurements, signals):
        """Fits whatever the method learns from training data.

        Args:
            measurements: n x K_L noisy reduced signals.
            signals: n x K_H ground truth signals.
        Returns:
            self.
        """

    @abstractmethod
    def reconstruct_chunk(self, measurements):
        """Reconstructs an n x K_L block into an n x K_H block."""

    @abstractmethod
    def save(self, path):
        """Saves the fitted state."""

    @abstractmethod
    def load(self, path):
        """Restores state written by save; returns self."""

    def reconstruct(self, measurements, threads=None):
        """Reconstructs every row; the result does not depend on the thread count."""

        measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
        if measurements.shape[1] != len(self.subset):
            raise ValidationError('measurements have %d columns, subset has %d directions'
                                  % (measurements.shape[1], len(self.subset)))
        threads = self.threads if threads is None else max(1, int(threads))
        if threads == 1 or len(measurements) < 2:
            return self.reconstruct_chunk(measurements)

        chunks = np.array_split(measurements, min(len(measurements), threads * CHUNKS_PER_THREAD))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # map yields results in submission order
            return np.vstack(list(pool.map(self.reconstruct_chunk, chunks)))


class DictionaryReconstructor(BaseReconstructor):
    """Shared dictionary pipeline of the two compressed sensing baselines."""

    solver_method = None

    def __init__(self, scheme, subset, basis=None, config=None, cross_validate=False, lambda_grid=None,
                 cv_folds=5, cv_voxels=500, seed=0, threads=1):
        super().__init__(scheme, subset, threads)
        self.basis = basis or BasisDescriptor()
        self.dict_H = build_dictionary(scheme, self.basis, hash_scheme(scheme))
        self.dict_L = restrict_dictionary(self.dict_H, subset)
        self.config = config or SolverConfig()
        self.lambda_grid = list(lambda_grid or [])
        self.cv_folds = cv_folds
        self.cv_voxels = cv_voxels
        self.seed = seed
        self.cv_scores = []
        self.cross_validate = cross_validate

    def fit(self, measurements, signals):
        """Cross-validates lambda over the grid unless a lambda was given."""

        if not self.cross_validate:
            return self
        measurements = np.atleast_2d(measurements)[:self.cv_voxels]
        signals = np.atleast_2d(signals)[:self.cv_voxels]
        lam, self.cv_scores = select_lambda(self.dict_L, self.dict_H, measurements, signals, self.lambda_grid,
                                            self.config, self.solver_method, self.cv_folds, self.seed)
        self.config = SolverConfig(lam, self.config.max_iters, self.config.tolerance,
                                   self.config.step_rule, self.config.restart)
        Log.info('%s at K_L=%d: cross-validated lambda %g' % (self.method, len(self.subset), lam))
        if lam in (min(self.lambda_grid), max(self.lambda_grid)):
            Log.warning('%s at K_L=%d: lambda %g lies on the edge of the grid' % (self.method, len(self.subset), lam))
        return self

    def save(self, path):
        write_json({
            'method': self.method,
            'lambda': self.config.lam,
            'basis': self.basis.to_json(),
            'scheme_hash': self.dict_H.scheme_hash,
            'cv_scores': self.cv_scores,
        }, path)

    def load(self, path):
        data = read_json(path)
        if data.get('method') != self.method:
            raise ValidationError('%s holds a %s model, not %s' % (path, data.get('method'), self.method))
        if data.get('scheme_hash') != self.dict_H.scheme_hash:
            raise ValidationError('%s was fitted on a different gradient scheme' % path)
        self.config = SolverConfig(float(data['lambda']), self.config.max_iters, self.config.tolerance,
                                   self.config.step_rule, self.config.restart)
        self.cv_scores = data.get('cv_scores', [])
        return self


class L2Reconstructor(DictionaryReconstructor):
    """Ridge regularized dictionary fit (RGD-L2)."""

    method = 'l2'
    solver_method = 'l2'

    def reconstruct_chunk(self, measurements):
        return reconstruct_signal(self.dict_H, solve_l2(self.dict_L, measurements, self.config).coeffs)


class CSReconstructor(DictionaryReconstructor):
    """L1 regularized dictionary fit solved with FISTA (RGD-CS)."""

    method = 'cs'
    solver_method = 'l1'

    def reconstruct_chunk(self, measurements):
        reports = [solve_l1_fista(self.dict_L, m, self.config) for m in measurements]
        stalled = sum(not r.converged for r in reports)
        if stalled:
            Log.warning('FISTA hit %d iterations on %d of %d voxels' % (self.config.max_iters, stalled, len(reports)))
        return reconstruct_signal(self.dict_H, np.stack([r.coeffs for r in reports]))


class CNNReconstructor(BaseReconstructor):
    """Encoder-decoder network trained for one K_L."""

    method = 'cnn'

    def __init__(self, scheme, subset, config, threads=1):
        super().__init__(scheme, subset, threads)
        self.config = config
        self.params = None
        self.trainer = None
        self.history = []

    def fit(self, measurements, signals, epochs=None, resume=None):
        """Trains the network; resume is a Checkpoint to continue from."""

        if resume is not None:
            self.trainer = Trainer(self.config, self.scheme, self.subset, resume.params, resume.optimizer_state,
                                   resume.epoch + 1, resume.history)
        else:
            self.trainer = Trainer(self.config, self.scheme, self.subset)
        result = self.trainer.fit(measurements, signals, epochs)
        self.params = result.params
        self.history = result.history
        return self

    def reconstruct_chunk(self, measurements):
        if self.params is None:
            raise UsageError('the network has not been trained or loaded')
        return infer_batch(measurements, self.subset, self.scheme, self.params, self.config)

    def save(self, path):
        if self.params is None:
            raise UsageError('the network has not been trained or loaded')
        last = self.history[-1] if self.history else (0, None, None, 0.0)
        optimizer = self.trainer.optimizer if self.trainer is not None else None
        save_checkpoint(path, self.params, optimizer, last[0],
                        {'train_nmse': _finite_or_none(last[1]), 'val_nmse': _finite_or_none(last[2])}, self.history)

    def load(self, path):
        checkpoint = load_checkpoint(path, self.config.precision)
        self.params = checkpoint.params
        # The checkpoint fixes the architecture; inference settings stay configurable
        self.config = replace(checkpoint.params.config, tta_perms=self.config.tta_perms,
                              batch_size=self.config.batch_size)
        self.history = checkpoint.history
        if checkpoint.params.config.k_low != len(self.subset):
            raise ValidationError('checkpoint %s was trained for K_L=%d, subset has %d directions'
                                  % (path, checkpoint.params.config.k_low, len(self.subset)))
        return self
