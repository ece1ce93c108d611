"""Numeric self-checks: gradients, adjointness, solver optimality and loss identities.

All checks run in 64-bit precision.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (ConvSpec, Tensor, add, backward, conv1d, conv1d_transposed, inject_gradient_fault,
                       nmse_loss, relu, scale)
from .cs_solvers import SolverConfig, solve_l1_fista
from .dictionary import BasisDescriptor, build_dictionary
from .errors import SelftestFailure
from .geometry import hemisphere_scheme, make_rng
from .log import Log
from .model import ModelConfig, ModelParams, forward

GRADIENT_TOLERANCE = 1e-5
ADJOINT_TOLERANCE = 1e-10
KKT_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-12
# Relative errors use max(|analytic|, |numeric|, floor); the floor scales with the largest gradient entry
GRADIENT_FLOOR = 1e-4
GRADIENT_FLOOR_FRACTION = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ''

    def __str__(self):
        status = 'PASS' if self.passed else 'FAIL'
        return '%s %-32s max error %.3e %s' % (status, self.name, self.max_error, self.detail)


def gradient_check(fn, params, n_samples=100, eps=1e-6, seed=0):
    """Largest relative error between backward() and central differences.

    Args:
        fn: callable building a scalar loss Tensor from the current parameter values.
        params: leaf Tensors with requires_grad set.
        n_samples (int): parameter entries to check, drawn uniformly over all entries.
        eps (float): finite difference step.
        seed (int): sampling seed.
    Returns:
        maximum relative error.
    """

    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
    floor = max(GRADIENT_FLOOR, GRADIENT_FLOOR_FRACTION * max(float(np.abs(g).max()) for g in analytic))

    sizes = np.array([p.size for p in params])
    rng = make_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    owners = np.searchsorted(np.cumsum(sizes), flat, side='right')

    worst = 0.0
    for owner, position in zip(owners, flat):
        p = params[owner]
        index = np.unravel_index(position - (sizes[:owner].sum() if owner else 0), p.shape)
        original = p.values[index]
        p.values[index] = original + eps
        plus = fn().item()
        p.values[index] = original - eps
        minus = fn().item()
        p.values[index] = original

        numeric = (plus - minus) / (2 * eps)
        exact = analytic[owner][index]
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    return worst


def _leaf(rng, shape, away_from_zero=False):
    values = rng.standard_normal(shape)
    if away_from_zero:
        values = np.sign(values) * (0.1 + np.abs(values))
    return Tensor(values, requires_grad=True)


def check_layer_gradients(seed=0, n_samples=100):
    """Gradient check of every layer type in isolation, scored through an NMSE loss."""

    rng = make_rng(seed)
    conv = ConvSpec(3, 5, 4, stride=2, padding=1)
    transposed = ConvSpec(5, 3, 4, stride=2, padding=1, output_padding=1, has_bias=False, transposed=True)

    x = _leaf(rng, (2, 3, 11))
    w, b = _leaf(rng, conv.filter_shape), _leaf(rng, (5,))
    y = _leaf(rng, (2, 5, 6))
    wt = _leaf(rng, transposed.filter_shape)
    r = _leaf(rng, (2, 3, 7), away_from_zero=True)
    p = _leaf(rng, (2, 1, 9))
    q = _leaf(rng, (2, 1, 9))
    target_conv = rng.standard_normal((2, 5, 5))
    target_transposed = rng.standard_normal((2, 3, 13))
    target_relu = rng.standard_normal((2, 3, 7))
    target_loss = rng.standard_normal((2, 1, 9))

    cases = [
        ('conv1d', lambda: nmse_loss(conv1d(x, w, b, conv), target_conv), [x, w, b]),
        ('conv1d_transposed', lambda: nmse_loss(conv1d_transposed(y, wt, transposed), target_transposed), [y, wt]),
        ('relu', lambda: nmse_loss(relu(r), target_relu), [r]),
        ('nmse_loss', lambda: nmse_loss(p, target_loss), [p]),
        ('scale', lambda: nmse_loss(scale(p, -1.5), target_loss), [p]),
        ('add', lambda: nmse_loss(add(p, q), target_loss), [p, q]),
    ]

    results = []
    for name, fn, params in cases:
        error = gradient_check(fn, params, n_samples, seed=seed)
        results.append(CheckResult('gradient:' + name, error < GRADIENT_TOLERANCE, error))
    return results


def check_model_gradients(seed=0, n_samples=100, config=None):
    """Gradient check of the composed encoder-decoder in 64-bit precision."""

    config = config or ModelConfig(precision='f64', seed=seed)
    params = ModelParams.initialize(config, np.float64)
    rng = make_rng(seed, 1)
    x = rng.standard_normal((2, 4, config.k_high))
    target = rng.uniform(0.2, 1.0, size=(2, 1, config.k_high))

    error = gradient_check(lambda: nmse_loss(forward(x, params), target), params.tensors(), n_samples, seed=seed)
    return CheckResult('gradient:model', error < GRADIENT_TOLERANCE, error, '%d parameters' % params.size)


def _adjoint_error(spec, n, batch, rng):
    """|<conv(x), y> - <x, conv^T(y)>| relative to the larger inner product magnitude."""

    m = spec.output_length(n)
    residue = (n + 2 * spec.padding - spec.kernel) % spec.stride
    mirror = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding,
                      residue, has_bias=False, transposed=True)
    weight = rng.standard_normal(spec.filter_shape)
    x = rng.standard_normal((batch, spec.in_channels, n))
    y = rng.standard_normal((batch, spec.out_channels, m))
    forward_product = float(np.sum(conv1d(x, weight, None, spec).values * y))
    adjoint_product = float(np.sum(x * conv1d_transposed(y, weight, mirror).values))
    magnitude = max(abs(forward_product), abs(adjoint_product), np.finfo(float).tiny)
    return abs(forward_product - adjoint_product) / magnitude


def check_adjoint(n_draws=50, seed=0, config=None):
    """Inner product test over random layer shapes plus every layer of the model."""

    rng = make_rng(seed)
    config = config or ModelConfig(precision='f64')
    draws = []
    lengths = config.encoder_lengths()
    for spec, n in zip(config.encoder_specs(), lengths):
        draws.append((ConvSpec(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding,
                               has_bias=False), n))
    for spec, n in zip(config.decoder_specs(), config.decoder_lengths()):
        # A transposed layer is the adjoint of the convolution it maps back from
        m = spec.output_length(n)
        draws.append((ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding,
                               has_bias=False), m))

    while len(draws) < n_draws + 6:
        kernel = int(rng.integers(1, 8))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, kernel))
        n = int(rng.integers(max(1, kernel - 2 * padding), 40))
        spec = ConvSpec(int(rng.integers(1, 6)), int(rng.integers(1, 6)), kernel, stride, padding, has_bias=False)
        draws.append((spec, n))

    errors = [_adjoint_error(spec, n, 2, rng) for spec, n in draws]
    worst = max(errors)
    return CheckResult('adjoint:conv1d', worst < ADJOINT_TOLERANCE, worst, '%d shapes' % len(draws))


def kkt_residual(A, measurement, coeffs, lam):
    """Distance of 0 from the subdifferential of ||A f - l||^2 + lam ||f||_1 at coeffs."""

    gradient = 2.0 * A.T @ (A @ coeffs - measurement)
    active = coeffs != 0
    residual = np.where(active, np.abs(gradient + lam * np.sign(coeffs)), np.maximum(np.abs(gradient) - lam, 0.0))
    return float(residual.max())


def check_solver_kkt(seed=0, n_instances=10, lam=0.01):
    """FISTA optimality on random measurements of a 30 direction, order 8 dictionary."""

    scheme = hemisphere_scheme(30)
    dictionary = build_dictionary(scheme, BasisDescriptor(8))
    config = SolverConfig(lam=lam, max_iters=50000, tolerance=1e-15)
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        measurement = rng.uniform(0.2, 1.0, size=len(scheme))
        report = solve_l1_fista(dictionary, measurement, config)
        worst = max(worst, kkt_residual(dictionary.matrix, measurement, report.coeffs, lam) / lam)
    return CheckResult('kkt:fista', worst < KKT_TOLERANCE, worst, 'residual / lambda')


def check_loss_identities(seed=0):
    rng = make_rng(seed)
    s = rng.uniform(0.1, 1.0, size=(3, 1, 90))
    errors = [
        abs(nmse_loss(s, s).item()),
        abs(nmse_loss(np.zeros_like(s), s).item() - 1.0),
        abs(nmse_loss(2 * s, s).item() - 1.0),
        abs(nmse_loss(-3.0 * (s + 0.1), -3.0 * s).item() - nmse_loss(s + 0.1, s).item()),
    ]
    worst = max(errors)
    return CheckResult('loss:nmse', worst < LOSS_TOLERANCE, worst)


def run_selftest(gradients_only=False, fault=None, seed=0):
    """Runs the checks, logs one line per check and raises SelftestFailure on any failure.

    Args:
        gradients_only (bool): only the gradient checks (selftest-grad).
        fault (str): op name whose gradient is deliberately corrupted, a negative control.
        seed (int): seed of every random draw.
    Returns:
        list of CheckResult.
    """

    def checks():
        results = check_layer_gradients(seed)
        results.append(check_model_gradients(seed))
        if not gradients_only:
            results.append(check_adjoint(seed=seed))
            results.append(check_solver_kkt(seed))
            results.append(check_loss_identities(seed))
        return results

    if fault is not None:
        with inject_gradient_fault(fault):
            results = checks()
    else:
        results = checks()

    for result in results:
        (Log.info if result.passed else Log.error)(str(result))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise SelftestFailure('failed checks: %s' % ', '.join(failed))
    return results
