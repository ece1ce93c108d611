import numpy as np
import pytest
from numpy.testing import assert_allclose

from hardirecon.cs_solvers import SolverConfig, solve_l2
from hardirecon.dictionary import BasisDescriptor, reconstruct_signal
from hardirecon.errors import UsageError, ValidationError
from hardirecon.geometry import hemisphere_scheme, make_rng, select_subset
from hardirecon.io_formats import read_json
from hardirecon.log import Log
from hardirecon.metrics import nmse_per_voxel
from hardirecon.model import ModelConfig, load_checkpoint
from hardirecon.reconstructors import CNNReconstructor, CSReconstructor, L2Reconstructor, canonical_method
from hardirecon.synth import FiberDistribution, NoiseConfig, generate_dataset


@pytest.fixture(scope='module')
def scheme():
    return hemisphere_scheme(90)


@pytest.fixture(scope='module')
def subset(scheme):
    return select_subset(scheme, 30)


@pytest.fixture(scope='module')
def dataset(scheme):
    return generate_dataset(30, scheme, FiberDistribution(), NoiseConfig('rician', 0.02, 0), seed=0)


def reduced(dataset, subset):
    return dataset.noisy[:, list(subset.indices)]


def test_canonical_method():
    assert canonical_method('l1') == 'cs'
    assert [canonical_method(m) for m in ('l2', 'cs', 'cnn')] == ['l2', 'cs', 'cnn']
    with pytest.raises(UsageError, match='valid methods'):
        canonical_method('l0')


def test_l2_reconstructs_band_limited_signals(scheme, subset):
    reconstructor = L2Reconstructor(scheme, subset, BasisDescriptor(4), SolverConfig(lam=1e-10))
    coeffs = make_rng(0).standard_normal((5, 15))
    signals = reconstruct_signal(reconstructor.dict_H, coeffs)
    recon = reconstructor.reconstruct(signals[:, list(subset.indices)])
    assert recon.shape == (5, 90)
    assert nmse_per_voxel(recon, signals).max() < 1e-8


def test_l2_matches_solver(scheme, subset, dataset):
    config = SolverConfig(lam=0.05)
    reconstructor = L2Reconstructor(scheme, subset, BasisDescriptor(8), config)
    expected = reconstruct_signal(reconstructor.dict_H, solve_l2(reconstructor.dict_L, reduced(dataset, subset),
                                                                 config).coeffs)
    assert_allclose(reconstructor.reconstruct(reduced(dataset, subset)), expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize('cls', [L2Reconstructor, CSReconstructor])
def test_threads_do_not_change_results(scheme, subset, dataset, cls):
    config = SolverConfig(lam=0.01, max_iters=500)
    serial = cls(scheme, subset, BasisDescriptor(8), config, threads=1).reconstruct(reduced(dataset, subset))
    threaded = cls(scheme, subset, BasisDescriptor(8), config, threads=3).reconstruct(reduced(dataset, subset))
    assert_allclose(threaded, serial, rtol=1e-12, atol=1e-14)


def test_cs_reconstruction_is_reasonable(scheme, subset, dataset):
    reconstructor = CSReconstructor(scheme, subset, BasisDescriptor(8), SolverConfig(lam=0.001, max_iters=2000))
    errors = nmse_per_voxel(reconstructor.reconstruct(reduced(dataset, subset)), dataset.clean)
    assert errors.mean() < 0.1


def test_stalled_fista_is_reported(monkeypatch, scheme, subset, dataset):
    warnings = []
    monkeypatch.setattr(Log, 'warning', warnings.append)
    reconstructor = CSReconstructor(scheme, subset, config=SolverConfig(lam=0.001, max_iters=2))
    reconstructor.reconstruct(reduced(dataset, subset)[:4])
    assert warnings == ['FISTA hit 2 iterations on 4 of 4 voxels']


def test_measurement_width_is_checked(scheme, subset):
    reconstructor = L2Reconstructor(scheme, subset)
    with pytest.raises(ValidationError):
        reconstructor.reconstruct(np.ones((2, 29)))


def test_cross_validation_picks_from_grid(scheme, subset, dataset):
    reconstructor = L2Reconstructor(scheme, subset, BasisDescriptor(8), SolverConfig(), cross_validate=True,
                                    lambda_grid=[1.0, 1e-2, 1e-4], cv_folds=3)
    reconstructor.fit(reduced(dataset, subset), dataset.clean)
    assert reconstructor.config.lam in (1.0, 1e-2, 1e-4)
    assert [s['lambda'] for s in reconstructor.cv_scores] == [1e-4, 1e-2, 1.0]
    best = min(reconstructor.cv_scores, key=lambda s: s['mean_nmse'])
    assert reconstructor.config.lam == best['lambda']


def test_fit_without_cross_validation_keeps_lambda(scheme, subset, dataset):
    reconstructor = CSReconstructor(scheme, subset, config=SolverConfig(lam=0.3))
    assert reconstructor.fit(reduced(dataset, subset), dataset.clean) is reconstructor
    assert reconstructor.config.lam == 0.3


def test_solver_state_round_trip(tmp_path, scheme, subset):
    L2Reconstructor(scheme, subset, config=SolverConfig(lam=0.25)).save(tmp_path / 'l2.json')
    data = read_json(tmp_path / 'l2.json')
    assert data['method'] == 'l2' and data['lambda'] == 0.25

    loaded = L2Reconstructor(scheme, subset).load(tmp_path / 'l2.json')
    assert loaded.config.lam == 0.25
    with pytest.raises(ValidationError, match='not cs'):
        CSReconstructor(scheme, subset).load(tmp_path / 'l2.json')
    other = hemisphere_scheme(90, 3000.0)
    with pytest.raises(ValidationError, match='different gradient scheme'):
        L2Reconstructor(other, select_subset(other, 30)).load(tmp_path / 'l2.json')


def cnn_config(**overrides):
    values = dict(encoder_channels=(8, 6, 4), k_low=30, batch_size=16, epochs=2, patience=5)
    values.update(overrides)
    return ModelConfig(**values)


def test_cnn_needs_training(scheme, subset):
    reconstructor = CNNReconstructor(scheme, subset, cnn_config())
    with pytest.raises(UsageError):
        reconstructor.reconstruct(np.ones((1, 30)))
    with pytest.raises(UsageError):
        reconstructor.save('unused')


def test_cnn_fit_save_load(tmp_path, scheme, subset, dataset):
    trained = CNNReconstructor(scheme, subset, cnn_config()).fit(reduced(dataset, subset), dataset.clean)
    assert [row[0] for row in trained.history] == [0, 1]
    expected = trained.reconstruct(reduced(dataset, subset))
    assert expected.shape == (30, 90)
    trained.save(tmp_path / 'cnn')

    # Inference settings may differ from the checkpoint
    loaded = CNNReconstructor(scheme, subset, ModelConfig(k_low=30, batch_size=7)).load(tmp_path / 'cnn')
    assert loaded.config.encoder_channels == (8, 6, 4)
    assert loaded.config.batch_size == 7
    assert_allclose(loaded.reconstruct(reduced(dataset, subset), threads=2), expected, rtol=1e-5, atol=1e-6)

    resumed = CNNReconstructor(scheme, subset, cnn_config())
    resumed.fit(reduced(dataset, subset), dataset.clean, epochs=1, resume=load_checkpoint(tmp_path / 'cnn'))
    assert [row[0] for row in resumed.history] == [0, 1, 2]

    with pytest.raises(ValidationError, match='K_L=30'):
        CNNReconstructor(scheme, select_subset(scheme, 23), cnn_config(k_low=23)).load(tmp_path / 'cnn')
