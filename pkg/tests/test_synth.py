import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hardirecon.dictionary import BasisDescriptor, build_dictionary, fit_coefficients, reconstruct_signal
from hardirecon.errors import SynthesisError, ValidationError
from hardirecon.geometry import GradientScheme, hemisphere_scheme, make_rng
from hardirecon.synth import (CLAMP_LIMIT, FiberConfig, FiberDistribution, NoiseConfig, add_rician_noise,
                              generate_dataset, simulate_voxel)

AXES = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.8, 0.0, 0.6]]


def single_fiber(u=(0.0, 0.0, 1.0), par=1.7e-3, perp=0.3e-3):
    return FiberConfig((1.0,), (u,), ((par, perp),))


def test_single_fiber_closed_form():
    signal = simulate_voxel(single_fiber(), GradientScheme(AXES, 2000.0))
    assert signal[2] == pytest.approx(np.exp(-3.4), rel=1e-12)
    assert signal[0] == pytest.approx(np.exp(-0.6), rel=1e-12)
    assert signal[1] == pytest.approx(np.exp(-0.6), rel=1e-12)
    # 0.8^2 of the way along the fiber
    assert signal[4] == pytest.approx(np.exp(-2000.0 * (0.3e-3 + 1.4e-3 * 0.64)), rel=1e-12)


def test_crossing_is_weighted_sum():
    scheme = hemisphere_scheme(30)
    a, b = single_fiber((0.0, 0.0, 1.0)), single_fiber((1.0, 0.0, 0.0))
    crossing = FiberConfig((0.25, 0.75), ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0)), ((1.7e-3, 0.3e-3),) * 2)
    expected = 0.25 * simulate_voxel(a, scheme) + 0.75 * simulate_voxel(b, scheme)
    assert np.abs(simulate_voxel(crossing, scheme) - expected).max() < 1e-15
    assert crossing.crossing_angle() == pytest.approx(90.0)


def test_fiber_config_validation():
    with pytest.raises(ValidationError):
        FiberConfig((0.5, 0.4), ((0, 0, 1), (1, 0, 0)), ((1.7e-3, 0.3e-3),) * 2)
    with pytest.raises(ValidationError):
        FiberConfig((0.25,) * 4, ((0, 0, 1),) * 4, ((1.7e-3, 0.3e-3),) * 4)
    with pytest.raises(ValidationError):
        single_fiber((0.0, 0.0, 2.0))
    with pytest.raises(ValidationError):
        single_fiber(par=0.3e-3, perp=1.7e-3)


def test_isotropic_voxels_are_constant():
    dataset = generate_dataset(5, hemisphere_scheme(90), FiberDistribution(isotropic=True), NoiseConfig('none', 0.0),
                               seed=1)
    assert np.ptp(dataset.clean, axis=1).max() < 1e-12


def test_signals_stay_in_unit_range():
    dataset = generate_dataset(50, hemisphere_scheme(90), FiberDistribution(), NoiseConfig('none', 0.0), seed=2)
    assert dataset.clean.min() > 0.0 and dataset.clean.max() <= 1.0
    assert_array_equal(dataset.noisy, dataset.clean)
    assert dataset.clamp_count == 0


def test_fibers_respect_min_angle():
    distribution = FiberDistribution(mix=(0.0, 0.0, 1.0), min_angle=30.0)
    for seed in range(20):
        fibers = distribution.sample(make_rng(seed))
        assert fibers.num_fibers == 3
        assert fibers.crossing_angle() >= 30.0 - 1e-9
        assert sum(fibers.weights) == pytest.approx(1.0)


def test_impossible_min_angle_fails():
    distribution = FiberDistribution(mix=(0.0, 0.0, 1.0), min_angle=90.0, max_tries=10)
    with pytest.raises(SynthesisError, match='smaller min angle'):
        distribution.sample(make_rng(0))


def test_distribution_validation():
    with pytest.raises(ValidationError):
        FiberDistribution(mix=(0.5, 0.5, 0.5))
    with pytest.raises(ValidationError):
        FiberDistribution(jitter=1.0)
    with pytest.raises(ValidationError):
        FiberDistribution(min_angle=120.0)


def test_rayleigh_mean_on_zero_signal():
    sigma = 0.1
    noisy = add_rician_noise(np.zeros(100000), NoiseConfig('rician', sigma, 3))
    assert noisy.mean() == pytest.approx(sigma * np.sqrt(np.pi / 2.0), rel=0.02)
    assert noisy.min() >= 0.0


def test_noise_is_clamped():
    noisy = add_rician_noise(np.ones(1000), NoiseConfig('rician', 1.0, 4))
    assert noisy.max() <= CLAMP_LIMIT


def test_noise_validation():
    with pytest.raises(ValidationError):
        add_rician_noise(np.array([0.5, 1.2]), NoiseConfig())
    with pytest.raises(ValidationError):
        NoiseConfig(sigma=-0.1)
    with pytest.raises(ValidationError):
        NoiseConfig(model='gaussian')
    assert_array_equal(add_rician_noise(np.array([0.2, 0.4]), NoiseConfig('rician', 0.0)), [0.2, 0.4])
    assert NoiseConfig.from_settings({}, sigma=0.0).model == 'none'


def test_generation_is_deterministic_across_threads():
    scheme = hemisphere_scheme(90)
    args = (40, scheme, FiberDistribution(), NoiseConfig('rician', 0.02, 5))
    serial = generate_dataset(*args, seed=7, threads=1)
    threaded = generate_dataset(*args, seed=7, threads=4)
    assert_array_equal(serial.clean, threaded.clean)
    assert_array_equal(serial.noisy, threaded.noisy)
    assert serial.fibers == threaded.fibers
    other = generate_dataset(*args, seed=8)
    assert not np.array_equal(serial.clean, other.clean)


def test_dataset_meta():
    dataset = generate_dataset(3, hemisphere_scheme(30), FiberDistribution(), NoiseConfig('rician', 0.02, 1), seed=0)
    meta = dataset.meta()
    assert meta['n_voxels'] == 3 and meta['directions'] == 30
    assert meta['noise'] == {'model': 'rician', 'sigma': 0.02, 'seed': 1}
    assert len(meta['voxels']) == 3
    with pytest.raises(ValidationError):
        generate_dataset(0, hemisphere_scheme(30), FiberDistribution(), NoiseConfig(), seed=0)


def test_signals_are_nearly_band_limited():
    scheme = hemisphere_scheme(90)
    dictionary = build_dictionary(scheme, BasisDescriptor(8))
    dataset = generate_dataset(20, scheme, FiberDistribution(), NoiseConfig('none', 0.0), seed=3)
    fitted = reconstruct_signal(dictionary, fit_coefficients(dictionary, dataset.clean))
    errors = np.linalg.norm(fitted - dataset.clean, axis=1) / np.linalg.norm(dataset.clean, axis=1)
    assert errors.max() < 0.05
