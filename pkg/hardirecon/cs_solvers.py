"""Coefficient recovery from reduced measurements.

Both baselines minimize a squared data term:

    RGD-L2:  ||A_L f - l||^2 + lambda sum_j w_j f_j^2    (closed form, Cholesky)
    RGD-CS:  ||A_L f - l||^2 + lambda ||f||_1      (FISTA)
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.model_selection import KFold

from .dictionary import reconstruct_signal
from .errors import ShapeError, SolverError, ValidationError
from .geometry import make_rng
from .io_formats import write_json
from .metrics import nmse_per_voxel

STEP_RULES = ('fixed', 'backtracking')
METHODS = ('l1', 'l2')
POWER_ITERATION_STEPS = 100
POWER_ITERATION_TOL = 1e-10
POWER_ITERATION_SEED = 0


@dataclass(frozen=True)
class SolverConfig:
    """Regularization weight and stopping rule of a solver."""

    lam: float = 0.01
    max_iters: int = 2000
    tolerance: float = 1e-8
    step_rule: str = 'fixed'
    restart: bool = True

    def __post_init__(self):
        if self.lam is None or not self.lam >= 0:
            raise ValidationError('lambda must be non-negative, got %r' % (self.lam,))
        if self.max_iters < 1:
            raise ValidationError('max_iters must be at least 1, got %r' % (self.max_iters,))
        if not self.tolerance > 0:
            raise ValidationError('tolerance must be positive, got %r' % (self.tolerance,))
        if self.step_rule not in STEP_RULES:
            raise ValidationError('unknown step rule %r, expected one of %s' % (self.step_rule, ', '.join(STEP_RULES)))

    @classmethod
    def from_settings(cls, config, lam=None):
        """Builds a config from the Solvers settings section; lam overrides the settings value."""

        lam = config.get('lambda') if lam is None else lam
        return cls(lam=0.01 if lam is None else float(lam),
                   max_iters=int(config.get('max_iters', 2000)),
                   tolerance=float(config.get('tol', 1e-8)),
                   step_rule=config.get('step_rule', 'fixed'),
                   restart=bool(config.get('restart', True)))


@dataclass
class SolveReport:
    """Result of a solve. coeffs is J, or n x J for a batched L2 solve."""

    coeffs: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True

    def to_json(self):
        return {
            'coeffs': np.asarray(self.coeffs).tolist(),
            'objective_trace': [float(v) for v in self.objective_trace],
            'iterations': self.iterations,
            'converged': self.converged,
        }

    def save(self, path):
        write_json(self.to_json(), path)


def _check_dimensions(dict_L, measurement):
    measurement = np.asarray(measurement, dtype=np.float64)
    if measurement.shape[-1] != dict_L.shape[0]:
        raise ShapeError('measurement has %d values but the dictionary has %d rows'
                         % (measurement.shape[-1], dict_L.shape[0]))
    return measurement


def solve_l2(dict_L, measurement, config):
    """Ridge solution (A^T A + lambda diag(w))^-1 A^T l by a Cholesky factorization.

    w are the per-atom penalties of the basis (all ones for plain ridge).

    measurement may be a single K_L vector or an n x K_L matrix, in which case the
    factorization is shared and coeffs is n x J.
    """

    measurement = _check_dimensions(dict_L, measurement)
    A = dict_L.matrix
    weights = np.asarray(dict_L.basis.regularization, dtype=np.float64)
    normal = A.T @ A + config.lam * np.diag(weights)

    if A.shape[0] < A.shape[1] and config.lam == 0:
        raise SolverError('underdetermined system (%d measurements, %d atoms) needs lambda > 0'
                          % (A.shape[0], A.shape[1]))
    try:
        factor = cho_factor(normal, lower=True)
    except LinAlgError:
        raise SolverError('normal matrix is singular (%d measurements, %d atoms, lambda=%g); use lambda > 0'
                          % (A.shape[0], A.shape[1], config.lam))

    coeffs = cho_solve(factor, A.T @ np.atleast_2d(measurement).T).T
    if measurement.ndim == 1:
        coeffs = coeffs[0]
    residual = coeffs @ A.T - measurement
    objective = np.sum(residual ** 2, axis=-1) + config.lam * np.sum(weights * coeffs ** 2, axis=-1)
    return SolveReport(coeffs, [float(np.sum(objective))], 1, True)


def soft_threshold(v, t):
    """Proximal operator of t ||.||_1: sign(v) max(|v| - t, 0)."""

    if t < 0:
        raise ValidationError('threshold must be non-negative, got %r' % (t,))
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def power_iteration(A, steps=POWER_ITERATION_STEPS, tol=POWER_ITERATION_TOL, seed=POWER_ITERATION_SEED):
    """Largest eigenvalue of A^T A, i.e. sigma_max(A)^2."""

    gram = A.T @ A
    v = make_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    eigenvalue = 0.0
    for _ in range(steps):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        previous, eigenvalue = eigenvalue, float(v @ gram @ v)
        if abs(eigenvalue - previous) <= tol * max(eigenvalue, 1e-300):
            break
    return eigenvalue


def l1_objective(A, measurement, coeffs, lam):
    residual = A @ coeffs - measurement
    return float(residual @ residual + lam * np.sum(np.abs(coeffs)))


def solve_l1_fista(dict_L, measurement, config):
    """Minimizes ||A_L f - l||^2 + lambda ||f||_1 with FISTA.

    With restart enabled the momentum is dropped whenever an accelerated step
    increases the objective and a plain proximal gradient step from the current
    iterate is taken instead, so objective_trace never increases.
    """

    measurement = _check_dimensions(dict_L, measurement)
    if measurement.ndim != 1:
        raise ShapeError('solve_l1_fista expects a single measurement vector')

    A = dict_L.matrix
    gram = A.T @ A
    correlation = A.T @ measurement
    lam = config.lam

    def objective(f):
        return l1_objective(A, measurement, f, lam)

    def gradient(f):
        return 2.0 * (gram @ f - correlation)

    def prox_step(point, lipschitz):
        return soft_threshold(point - gradient(point) / lipschitz, lam / lipschitz)

    if config.step_rule == 'fixed':
        lipschitz = 2.0 * power_iteration(A)
    else:
        lipschitz = 1.0
    if lipschitz <= 0.0:
        return SolveReport(np.zeros(A.shape[1]), [objective(np.zeros(A.shape[1]))], 0, True)

    def backtrack(point, lipschitz):
        """Doubles L until the quadratic model majorizes the smooth term."""

        smooth = float(np.sum((A @ point - measurement) ** 2))
        grad = gradient(point)
        while True:
            candidate = soft_threshold(point - grad / lipschitz, lam / lipschitz)
            step = candidate - point
            bound = smooth + grad @ step + 0.5 * lipschitz * (step @ step)
            if np.sum((A @ candidate - measurement) ** 2) <= bound * (1 + 1e-12) + 1e-300:
                return candidate, lipschitz
            lipschitz *= 2.0

    f = np.zeros(A.shape[1])
    y = f.copy()
    t = 1.0
    current = objective(f)
    trace = [current]
    converged = False
    iterations = 0

    for iterations in range(1, config.max_iters + 1):
        if config.step_rule == 'fixed':
            f_next = prox_step(y, lipschitz)
        else:
            f_next, lipschitz = backtrack(y, lipschitz)
        value = objective(f_next)

        if config.restart and value > current:
            t = 1.0
            if config.step_rule == 'fixed':
                f_next = prox_step(f, lipschitz)
            else:
                f_next, lipschitz = backtrack(f, lipschitz)
            value = objective(f_next)
            if value > current:
                # Rounding (or an underestimated L) only; f is already optimal to working precision
                f_next, value = f, current

        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = f_next + ((t - 1.0) / t_next) * (f_next - f)
        change = abs(current - value)
        f, t, current = f_next, t_next, value
        trace.append(value)

        if change <= config.tolerance * max(abs(current), 1e-300):
            converged = True
            break

    return SolveReport(f, trace, iterations, converged)


def reconstruct_from_measurement(dict_L, dict_H, measurement, config, method='l1'):
    """Solves for coefficients on Q_L and maps them to every direction of Q_H."""

    if method not in METHODS:
        raise ValidationError('unknown solver method %r, expected one of %s' % (method, ', '.join(METHODS)))
    if dict_L.basis != dict_H.basis:
        raise ValidationError('measurement and signal dictionaries use different bases')
    if dict_L.shape[1] != dict_H.shape[1]:
        raise ShapeError('dictionaries have %d and %d atoms' % (dict_L.shape[1], dict_H.shape[1]))

    if method == 'l2':
        report = solve_l2(dict_L, measurement, config)
    else:
        report = solve_l1_fista(dict_L, measurement, config)
    return reconstruct_signal(dict_H, report.coeffs)


def _solve_many(dict_L, dict_H, measurements, config, method):
    if method == 'l2':
        return reconstruct_signal(dict_H, solve_l2(dict_L, measurements, config).coeffs)
    return np.stack([reconstruct_from_measurement(dict_L, dict_H, m, config, 'l1') for m in measurements])


def select_lambda(dict_L, dict_H, measurements, targets, grid, config, method='l2', folds=5, seed=0):
    """Picks lambda from a grid by K-fold cross-validation.

    Every fold reconstructs its held-out voxels with each candidate and scores the
    mean NMSE against the clean targets; the candidate with the lowest mean over
    folds wins (the smaller lambda on ties).

    Args:
        dict_L, dict_H: measurement and signal dictionaries.
        measurements: n x K_L reduced signals.
        targets: n x K_H ground truth signals.
        grid: candidate lambda values.
        config: SolverConfig supplying every setting except lambda.
        method (str): 'l1' or 'l2'.
        folds (int): number of folds.
        seed (int): fold shuffling seed.
    Returns:
        (best lambda, list of {'lambda', 'mean_nmse', 'std_nmse'} per candidate).
    """

    if method not in METHODS:
        raise ValidationError('unknown solver method %r, expected one of %s' % (method, ', '.join(METHODS)))
    measurements = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(measurements) != len(targets):
        raise ShapeError('got %d measurements and %d targets' % (len(measurements), len(targets)))
    if not grid:
        raise ValidationError('lambda grid is empty')
    if len(measurements) < max(folds, 2):
        raise ValidationError('cross-validation with %d folds needs at least %d voxels, got %d'
                              % (folds, max(folds, 2), len(measurements)))

    splits = list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(measurements))
    scores = []
    for lam in sorted(float(v) for v in grid):
        candidate = SolverConfig(lam, config.max_iters, config.tolerance, config.step_rule, config.restart)
        fold_scores = []
        for _, held_out in splits:
            recon = _solve_many(dict_L, dict_H, measurements[held_out], candidate, method)
            fold_scores.append(float(np.mean(nmse_per_voxel(recon, targets[held_out]))))
        scores.append({'lambda': lam, 'mean_nmse': float(np.mean(fold_scores)), 'std_nmse': float(np.std(fold_scores))})

    best = min(scores, key=lambda s: s['mean_nmse'])
    return best['lambda'], scores
