# Copyright (c) 2019 Edvinas Byla
# Licensed under MIT License

import time
from dataclasses import dataclass, replace

import numpy as np

from . import (data_config, dictionary_config, experiment_config, model_config, settings, solver_config,
               subset_config)
from .cs_solvers import SolverConfig
from .dictionary import BasisDescriptor, build_dictionary, fit_coefficients, odf_from_coeffs
from .errors import HardiReconError, ValidationError
from .geometry import hemisphere_scheme, select_subset
from .io_formats import (load_gradient_table, read_json, read_signal_matrix, read_subset, write_dataset_meta,
                         write_gradient_table, write_json, write_metrics_report, write_signal_matrix, write_subset)
from .log import Log
from .metrics import MetricsReport, nmse_per_voxel, summarize
from .model import ModelConfig
from .reconstructors import CNNReconstructor, CSReconstructor, L2Reconstructor, canonical_method
from .selftest import run_selftest
from .storage import Storage, hash_scheme
from .synth import FiberDistribution, NoiseConfig, generate_dataset

SPLITS = ('train', 'test')
TIMINGS = 'timings.json'
MIN_K_LOW = 6


@dataclass
class DatasetSplit:
    scheme: object
    noisy: np.ndarray
    clean: np.ndarray

    def __len__(self):
        return len(self.clean)


def _first(*values):
    for value in values:
        if value is not None:
            return value
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    """Reduced scheme sizes and methods compared by one experiment."""

    k_lows: tuple = (30, 23, 18)
    methods: tuple = ('l2', 'cs', 'cnn')
    threads: int = 1
    odf_voxels: int = 20
    deterministic_report: bool = True
    plots: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'k_lows', tuple(int(k) for k in self.k_lows))
        object.__setattr__(self, 'methods', tuple(canonical_method(m) for m in self.methods))
        if not self.k_lows:
            raise ValidationError('at least one K_L is required')
        if not self.methods:
            raise ValidationError('at least one method is required')
        if self.threads < 1:
            raise ValidationError('threads must be at least 1, got %d' % self.threads)
        if self.odf_voxels < 0:
            raise ValidationError('odf_voxels must be non-negative, got %d' % self.odf_voxels)

    @classmethod
    def from_settings(cls, config, subsets, **overrides):
        values = {
            'k_lows': subsets.get('k_low', cls.k_lows),
            'methods': config.get('methods', cls.methods),
            'threads': config.get('threads', cls.threads),
            'odf_voxels': config.get('odf_voxels', cls.odf_voxels),
            'deterministic_report': config.get('deterministic_report', cls.deterministic_report),
            'plots': config.get('plots', cls.plots),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def check_scheme(self, k_high):
        """Every K_L must lie in [6, K_H]."""

        for k in self.k_lows:
            if not MIN_K_LOW <= k <= k_high:
                raise ValidationError('K_L=%d is outside [%d, %d]' % (k, MIN_K_LOW, k_high))


class HardiRecon:
    """Class responsible for providing user facing interface."""

    def __init__(self, out_dir=None, threads=None, precision=None, seed=None, verbose=True):
        self.storage = Storage(out_dir)
        self.experiment = ExperimentConfig.from_settings(experiment_config, subset_config, threads=threads)
        self.threads = self.experiment.threads
        self.precision = precision
        self.seed = seed
        self.setup_logging(verbose)

    def setup_logging(self, verbose=True):
        """Enables logging and logs current settings."""

        Log.enable(self.storage, verbose)
        Log.header("HARDIRECON SETTINGS")
        Log.info(settings)

    def synthesize(self, n_train=None, n_test=None, k_high=None, bvalue=None, sigma=None, seed=None):
        """Generates the training and testing sets on a hemisphere scheme.

        Returns:
            dict mapping split name to its SyntheticDataset.
        """

        n_train = int(_first(n_train, data_config['n_train']))
        n_test = int(_first(n_test, data_config['n_test']))
        if n_train < 1 or n_test < 1:
            raise ValidationError('need at least one training and one testing voxel')
        seed = int(_first(seed, self.seed, data_config['seed']))
        scheme = hemisphere_scheme(int(_first(k_high, data_config['k_high'])),
                                   float(_first(bvalue, data_config['bvalue'])))
        distribution = FiberDistribution.from_settings(data_config)
        noise = NoiseConfig.from_settings(data_config, sigma)

        Log.header('SYNTHESIZING DATA')
        datasets = {}
        for split, n, split_seed in (('train', n_train, seed), ('test', n_test, seed + 1)):
            dataset = generate_dataset(n, scheme, distribution, noise, split_seed, self.threads)
            self.write_split(split, dataset)
            Log.info('%s: %d voxels, %d directions, %d clamped noise values'
                     % (split, len(dataset), len(scheme), dataset.clamp_count))
            datasets[split] = dataset
        return datasets

    def write_split(self, split, dataset):
        directory = self.storage.dataset_path(split)
        write_signal_matrix(dataset.noisy, directory / 'signals.csv')
        write_signal_matrix(dataset.clean, directory / 'clean.csv')
        write_gradient_table(dataset.scheme, directory / 'bvecs', directory / 'bvals')
        write_dataset_meta(dict(dataset.meta(), scheme_hash=hash_scheme(dataset.scheme)), directory / 'meta.json')

    def load_split(self, split):
        directory = self.storage.dataset_path(split)
        if not (directory / 'signals.csv').exists():
            raise HardiReconError('no %s data in %s, run synth first' % (split, directory))
        scheme = load_gradient_table(directory / 'bvecs', directory / 'bvals')
        noisy = read_signal_matrix(directory / 'signals.csv')
        clean = read_signal_matrix(directory / 'clean.csv')
        if noisy.shape != clean.shape or noisy.shape[1] != len(scheme):
            raise ValidationError('%s data shapes %s and %s do not match %d directions'
                                  % (split, noisy.shape, clean.shape, len(scheme)))
        return DatasetSplit(scheme, noisy, clean)

    def k_lows(self, k_lows=None, k_high=None):
        experiment = self.experiment if k_lows is None else replace(self.experiment, k_lows=k_lows)
        if k_high is not None:
            experiment.check_scheme(k_high)
        return list(experiment.k_lows)

    def select_subsets(self, k_lows=None, strategy=None, seed=None):
        """Selects and stores Q_L for every K_L."""

        scheme = self.load_split('train').scheme
        strategy = _first(strategy, subset_config.get('strategy'), 'uniform-angular')
        seed = self.subset_seed(seed)
        subsets = {}
        for k in self.k_lows(k_lows, len(scheme)):
            subsets[k] = select_subset(scheme, k, strategy, seed)
            write_subset(subsets[k], self.storage.subset_path(k))
        return subsets

    def subset_seed(self, seed=None):
        return int(_first(seed, self.seed, subset_config.get('seed'), 0))

    def subset(self, k, scheme):
        path = self.storage.subset_path(k)
        if path.exists():
            subset = read_subset(path)
        else:
            subset = select_subset(scheme, k, subset_config.get('strategy', 'uniform-angular'), self.subset_seed())
            write_subset(subset, path)
        subset.check_parent(len(scheme))
        return subset

    def model_config(self, k, scheme, **overrides):
        return ModelConfig.from_settings(model_config, k_low=k, k_high=len(scheme), precision=self.precision,
                                         seed=self.seed, **overrides)

    def train(self, k_lows=None, epochs=None, resume=False, **overrides):
        """Trains one network per K_L on the training split.

        Returns:
            dict mapping K_L to its training history.
        """

        data = self.load_split('train')
        histories = {}
        for k in self.k_lows(k_lows, len(data.scheme)):
            Log.header('TRAINING NETWORK FOR K_L=%d' % k)
            subset = self.subset(k, data.scheme)
            config = self.model_config(k, data.scheme, **overrides)
            reconstructor = CNNReconstructor(data.scheme, subset, config, self.threads)
            checkpoint = self.storage.load_checkpoint(k, config.precision) if resume else None
            reconstructor.fit(data.noisy[:, list(subset.indices)], data.clean, epochs, checkpoint)
            reconstructor.save(self.storage.model_path(k))
            histories[k] = reconstructor.history
            if self.experiment.plots:
                self.plot_training(k, reconstructor.history)
        return histories

    def solver_settings(self, lam=None, max_iters=None, tol=None):
        overrides = {k: v for k, v in (('max_iters', max_iters), ('tol', tol)) if v is not None}
        return SolverConfig.from_settings(dict(solver_config, **overrides), lam)

    def reconstructor(self, method, k, scheme, lam=None, tta_perms=None, max_iters=None, tol=None):
        """Builds a fitted reconstructor of one method for one K_L."""

        method = canonical_method(method)
        subset = self.subset(k, scheme)
        if method == 'cnn':
            config = self.model_config(k, scheme, tta_perms=tta_perms)
            path = self.storage.model_path(k)
            if not (path / 'manifest.json').exists():
                raise HardiReconError('no network checkpoint for K_L=%d in %s, run train first' % (k, path))
            return CNNReconstructor(scheme, subset, config, self.threads).load(path)

        lam = _first(lam, solver_config.get('lambda'))
        max_order = int(dictionary_config.get('max_order', 8))
        if dictionary_config.get('laplace_beltrami'):
            basis = BasisDescriptor.with_laplace_beltrami(max_order)
        else:
            basis = BasisDescriptor(max_order)
        cls = L2Reconstructor if method == 'l2' else CSReconstructor
        reconstructor = cls(scheme, subset, basis, self.solver_settings(lam, max_iters, tol),
                            cross_validate=lam is None, lambda_grid=solver_config.get('lambda_grid'),
                            cv_folds=int(solver_config.get('cv_folds', 5)),
                            cv_voxels=int(solver_config.get('cv_voxels', 500)),
                            seed=int(_first(self.seed, 0)), threads=self.threads)
        if lam is None:
            train = self.load_split('train')
            reconstructor.fit(train.noisy[:, list(subset.indices)], train.clean)
        reconstructor.save(self.storage.solver_path(method, k))
        return reconstructor

    def reconstruct(self, method, k_lows=None, lam=None, split='test', tta_perms=None, max_iters=None, tol=None):
        """Reconstructs the full signals of a split from its reduced measurements.

        Returns:
            dict mapping K_L to the reconstructed matrix.
        """

        method = canonical_method(method)
        data = self.load_split(split)
        timings = self.timings()
        results = {}
        for k in self.k_lows(k_lows, len(data.scheme)):
            Log.header('RECONSTRUCTING %s K_L=%d' % (method.upper(), k))
            reconstructor = self.reconstructor(method, k, data.scheme, lam, tta_perms, max_iters, tol)
            started = time.perf_counter()
            recon = reconstructor.reconstruct(data.noisy[:, list(reconstructor.subset.indices)])
            timings['%s_k%d' % (method, k)] = time.perf_counter() - started
            write_signal_matrix(recon, self.storage.reconstruction_path(method, k, split))
            per_voxel = nmse_per_voxel(recon, data.clean)
            Log.info('%s K_L=%d: NMSE min %.6f, max %.6f, average %.6f'
                     % (method, k, per_voxel.min(), per_voxel.max(), per_voxel.mean()))
            results[k] = recon
        write_json(timings, self.storage.report_path(TIMINGS))
        return results

    def timings(self):
        path = self.storage.report_path(TIMINGS)
        return read_json(path) if path.exists() else {}

    def evaluate(self, methods=None, k_lows=None, per_voxel=True, odf_voxels=None, deterministic=None):
        """Aggregates per-voxel NMSE into the metrics report and exports ODF coefficients.

        Returns:
            MetricsReport ordered by method, then K_L.
        """

        overrides = {'methods': methods, 'odf_voxels': odf_voxels, 'deterministic_report': deterministic}
        experiment = replace(self.experiment, **{k: v for k, v in overrides.items() if v is not None})
        methods = list(experiment.methods)
        data = self.load_split('test')
        k_lows = self.k_lows(k_lows, len(data.scheme))
        timings = self.timings()

        Log.header('EVALUATING RECONSTRUCTIONS')
        records, errors, reconstructions = [], {}, {}
        for method in methods:
            for k in k_lows:
                path = self.storage.reconstruction_path(method, k)
                if not path.exists():
                    raise HardiReconError('missing reconstruction %s, run reconstruct first' % path)
                recon = read_signal_matrix(path)
                if recon.shape != data.clean.shape:
                    raise ValidationError('%s holds %d x %d values, ground truth is %d x %d'
                                          % ((path,) + recon.shape + data.clean.shape))
                errors[(method, k)] = nmse_per_voxel(recon, data.clean)
                reconstructions[(method, k)] = recon
                seconds = 0.0 if experiment.deterministic_report else timings.get('%s_k%d' % (method, k), 0.0)
                records.append(summarize(method, k, errors[(method, k)], seconds))
                if per_voxel:
                    write_signal_matrix(errors[(method, k)][:, None],
                                        self.storage.report_path('per_voxel_%s_k%d.csv' % (method, k)), header=False)

        report = MetricsReport(records).ordered(methods, k_lows)
        write_metrics_report(report, self.storage.report_path('metrics.csv'))
        write_metrics_report(report, self.storage.report_path('metrics.json'))
        for record in report.records:
            Log.info(record.to_json())

        if experiment.odf_voxels > 0:
            self.export_odfs(data, reconstructions, experiment.odf_voxels)
        if self.experiment.plots:
            self.plot_errors(errors)
        return report

    def export_odfs(self, data, reconstructions, n_voxels):
        """ODF SH coefficients of the first voxels, ground truth and every reconstruction."""

        basis = BasisDescriptor(int(dictionary_config.get('max_order', 8)))
        dictionary = build_dictionary(data.scheme, basis, hash_scheme(data.scheme))
        n_voxels = min(n_voxels, len(data))
        truth = odf_from_coeffs(fit_coefficients(dictionary, data.clean[:n_voxels]), basis)
        write_signal_matrix(truth, self.storage.odf_path('truth.csv'), header=False)
        odfs = {}
        for (method, k), recon in reconstructions.items():
            odf = odf_from_coeffs(fit_coefficients(dictionary, recon[:n_voxels]), basis)
            write_signal_matrix(odf, self.storage.odf_path('%s_k%d.csv' % (method, k)), header=False)
            odfs['%s K_L=%d' % (method, k)] = odf
        if self.experiment.plots:
            from vizualization import painter

            self.storage.save_plot('odf_voxel0.png', painter.odf_maps(truth, odfs, basis.max_order))
        return truth, odfs

    def plot_training(self, k, history):
        from vizualization import painter

        self.storage.save_plot('training_k%d.png' % k, painter.training_loss(history))

    def plot_errors(self, errors):
        from vizualization import painter

        self.storage.save_plot('nmse_boxplot.png', painter.nmse_boxplot(errors))

    def selftest(self, gradients_only=False, fault=None):
        Log.header('SELFTEST')
        return run_selftest(gradients_only, fault, int(_first(self.seed, 0)))
