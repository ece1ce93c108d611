import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hardirecon.errors import HardiReconError, SelftestFailure, UsageError, ValidationError
from hardirecon.hardirecon import ExperimentConfig, HardiRecon
from hardirecon.io_formats import METRICS_COLUMNS, read_signal_matrix, read_subset

SMALL_NETWORK = dict(encoder_channels=(8, 6, 4), batch_size=16)


@pytest.fixture
def app(tmp_path):
    return HardiRecon(out_dir=tmp_path, seed=0, verbose=False)


def test_experiment_config():
    config = ExperimentConfig(k_lows=[30, 18], methods=['l1', 'cnn'])
    assert config.k_lows == (30, 18)
    assert config.methods == ('cs', 'cnn')
    config.check_scheme(90)
    with pytest.raises(ValidationError):
        ExperimentConfig(k_lows=(5,)).check_scheme(90)
    with pytest.raises(ValidationError):
        ExperimentConfig(k_lows=(91,)).check_scheme(90)
    with pytest.raises(UsageError):
        ExperimentConfig(methods=('l0',))
    with pytest.raises(ValidationError):
        ExperimentConfig(threads=0)

    loaded = ExperimentConfig.from_settings({'methods': ['l2'], 'threads': 2}, {'k_low': [23]}, threads=None)
    assert (loaded.methods, loaded.k_lows, loaded.threads) == (('l2',), (23,), 2)


def test_commands_need_data(app):
    with pytest.raises(HardiReconError, match='run synth first'):
        app.load_split('train')
    with pytest.raises(ValidationError):
        app.synthesize(n_train=0, n_test=5)


def test_synthesize_writes_splits(app, tmp_path):
    datasets = app.synthesize(n_train=12, n_test=4, k_high=90, sigma=0.02)
    assert len(datasets['train']) == 12 and len(datasets['test']) == 4

    for split in ('train', 'test'):
        directory = tmp_path / 'dataset' / split
        assert {p.name for p in directory.iterdir()} >= {'signals.csv', 'clean.csv', 'bvecs', 'bvals', 'meta.json'}
    with open(tmp_path / 'dataset' / 'train' / 'meta.json') as f:
        meta = json.load(f)
    assert meta['n_voxels'] == 12 and len(meta['scheme_hash']) == 64

    test = app.load_split('test')
    assert_array_equal(test.noisy, datasets['test'].noisy)
    assert not np.array_equal(datasets['train'].clean[:4], test.clean)


def test_synthesis_is_reproducible(tmp_path):
    first = HardiRecon(out_dir=tmp_path / 'a', seed=3, verbose=False, threads=1)
    second = HardiRecon(out_dir=tmp_path / 'b', seed=3, verbose=False, threads=3)
    first.synthesize(n_train=10, n_test=3)
    second.synthesize(n_train=10, n_test=3)
    for name in ('signals.csv', 'clean.csv', 'bvecs', 'bvals'):
        assert (tmp_path / 'a' / 'dataset' / 'train' / name).read_bytes() == \
            (tmp_path / 'b' / 'dataset' / 'train' / name).read_bytes()


def test_zero_sigma_gives_clean_measurements(app):
    datasets = app.synthesize(n_train=5, n_test=2, sigma=0.0)
    assert_array_equal(datasets['train'].noisy, datasets['train'].clean)


def test_select_subsets(app):
    app.synthesize(n_train=5, n_test=2)
    subsets = app.select_subsets(k_lows=[30, 18])
    assert sorted(subsets) == [18, 30]
    assert read_subset(app.storage.subset_path(18)) == subsets[18]
    with pytest.raises(ValidationError):
        app.select_subsets(k_lows=[5])


def test_seed_reaches_subsets_and_training(tmp_path):
    first = HardiRecon(out_dir=tmp_path, seed=1, verbose=False)
    first.synthesize(n_train=20, n_test=2)
    second = HardiRecon(out_dir=tmp_path, seed=2, verbose=False)
    scheme = first.load_split('train').scheme
    assert (first.model_config(30, scheme).seed, second.model_config(30, scheme).seed) == (1, 2)

    subsets = [app.select_subsets(k_lows=[18], strategy='random')[18] for app in (first, second)]
    assert (subsets[0].seed, subsets[1].seed) == (1, 2)
    assert subsets[0].indices != subsets[1].indices

    weights = []
    for app in (first, second):
        app.train(k_lows=[30], epochs=1, **SMALL_NETWORK)
        weights.append(app.storage.load_checkpoint(30).params.arrays()['encoder.0.weight'])
    assert not np.array_equal(weights[0], weights[1])


def test_reconstruct_requires_trained_network(app):
    app.synthesize(n_train=5, n_test=2)
    with pytest.raises(HardiReconError, match='run train first'):
        app.reconstruct('cnn', k_lows=[30])
    with pytest.raises(UsageError):
        app.reconstruct('l0', k_lows=[30])


def test_full_experiment(app, tmp_path):
    app.synthesize(n_train=40, n_test=10)
    app.select_subsets(k_lows=[30])

    histories = app.train(k_lows=[30], epochs=2, **SMALL_NETWORK)
    assert [row[0] for row in histories[30]] == [0, 1]
    assert (tmp_path / 'models' / 'cnn_k30' / 'manifest.json').exists()

    results = {
        'cnn': app.reconstruct('cnn', k_lows=[30]),
        'l2': app.reconstruct('l2', k_lows=[30], lam=0.01),
        'cs': app.reconstruct('l1', k_lows=[30], lam=0.01, max_iters=200),
    }
    for method, recon in results.items():
        assert recon[30].shape == (10, 90)
        assert_array_equal(read_signal_matrix(app.storage.reconstruction_path(method, 30)), recon[30])

    report = app.evaluate(methods=['l2', 'cs', 'cnn'], k_lows=[30], odf_voxels=3)
    assert [(r.method, r.k_low) for r in report.records] == [('l2', 30), ('cs', 30), ('cnn', 30)]
    for record in report.records:
        assert record.n_voxels == 10 and record.seconds == 0.0
        assert record.min_nmse <= record.avg_nmse <= record.max_nmse

    reports = tmp_path / 'reports'
    with open(reports / 'metrics.csv') as f:
        assert f.readline().strip() == ','.join(METRICS_COLUMNS)
    with open(reports / 'timings.json') as f:
        assert set(json.load(f)) == {'cnn_k30', 'l2_k30', 'cs_k30'}
    assert read_signal_matrix(reports / 'per_voxel_cs_k30.csv').shape == (10, 1)
    assert read_signal_matrix(reports / 'odf' / 'truth.csv').shape == (3, 45)
    assert read_signal_matrix(reports / 'odf' / 'cnn_k30.csv').shape == (3, 45)

    with pytest.raises(HardiReconError, match='run reconstruct first'):
        app.evaluate(methods=['l2'], k_lows=[23])


def run_pipeline(out_dir):
    app = HardiRecon(out_dir=out_dir, seed=5, verbose=False)
    app.synthesize(n_train=30, n_test=6)
    app.train(k_lows=[18], epochs=2, **SMALL_NETWORK)
    app.reconstruct('cnn', k_lows=[18])
    app.reconstruct('l2', k_lows=[18])
    app.reconstruct('cs', k_lows=[18], lam=0.01, max_iters=100)
    app.evaluate(methods=['l2', 'cs', 'cnn'], k_lows=[18], odf_voxels=2)
    return (out_dir / 'reports' / 'metrics.csv').read_bytes()


def test_pipeline_rerun_reproduces_metrics(tmp_path):
    first = run_pipeline(tmp_path / 'a')
    assert first.count(b'\n') == 4
    assert run_pipeline(tmp_path / 'b') == first


def test_resume_training(app):
    app.synthesize(n_train=20, n_test=2)
    app.train(k_lows=[18], epochs=1, **SMALL_NETWORK)
    histories = app.train(k_lows=[18], epochs=1, resume=True, **SMALL_NETWORK)
    assert [row[0] for row in histories[18]] == [0, 1]


def test_selftest_gradients(app):
    results = app.selftest(gradients_only=True)
    assert all(r.passed for r in results)
    with pytest.raises(SelftestFailure, match='gradient:relu'):
        app.selftest(gradients_only=True, fault='relu')


@pytest.mark.slow
def test_network_wins_as_directions_drop(tmp_path):
    app = HardiRecon(out_dir=tmp_path, seed=7, verbose=False)
    app.synthesize(n_train=2000, n_test=200, sigma=0.02)
    app.select_subsets(k_lows=[30, 23, 18])
    for method in ('l2', 'cs'):
        app.reconstruct(method, k_lows=[30, 23, 18], max_iters=500)
    baselines = app.evaluate(methods=['l2', 'cs'], k_lows=[30, 23, 18], odf_voxels=0)

    for method in ('l2', 'cs'):
        averages = [baselines.record(method, k).avg_nmse for k in (30, 23, 18)]
        assert averages[0] < averages[1] < averages[2], (method, averages)

    app.train(k_lows=[18], epochs=60, batch_size=50, patience=15)
    app.reconstruct('cnn', k_lows=[18])
    network = app.evaluate(methods=['cnn'], k_lows=[18], odf_voxels=0).record('cnn', 18).avg_nmse
    assert network <= 0.5 * baselines.record('l2', 18).avg_nmse
    assert network <= baselines.record('cs', 18).avg_nmse
