"""Synthetic HARDI voxels from a multi-tensor model with Rician noise.

Each voxel is a mixture of 1 to 3 axially symmetric tensors:

    s(q) = sum_i w_i exp(-b q^T D_i q),  D_i = l_perp I + (l_par - l_perp) u_i u_i^T

Voxel n draws its configuration from PCG64(seed, n) and its noise from
PCG64(noise seed, seed, n), so serial and threaded generation agree exactly.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SynthesisError, ValidationError
from .geometry import make_rng, min_pairwise_angle

NOISE_MODELS = ('none', 'rician')
CLAMP_LIMIT = 1.5
MAX_TRIES = 10 ** 4


@dataclass(frozen=True)
class FiberConfig:
    """Fiber mixture of one voxel.

    Attributes:
        weights: volume fractions, positive, summing to 1.
        orientations: unit 3-vectors, one per fiber.
        eigenvalues: (lambda_par, lambda_perp) per fiber in mm^2/s.
    """

    weights: tuple
    orientations: tuple
    eigenvalues: tuple

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        orientations = tuple(tuple(float(c) for c in u) for u in self.orientations)
        eigenvalues = tuple((float(par), float(perp)) for par, perp in self.eigenvalues)

        if not 1 <= len(weights) <= 3:
            raise ValidationError('a voxel holds 1 to 3 fibers, got %d' % len(weights))
        if len(orientations) != len(weights) or len(eigenvalues) != len(weights):
            raise ValidationError('weights, orientations and eigenvalues must have one entry per fiber')
        if min(weights) <= 0 or abs(sum(weights) - 1.0) > 1e-9:
            raise ValidationError('fiber weights must be positive and sum to 1, got %s' % (weights,))
        for u in orientations:
            if len(u) != 3 or abs(np.linalg.norm(u) - 1.0) > 1e-9:
                raise ValidationError('fiber orientation %s is not a unit 3-vector' % (u,))
        for par, perp in eigenvalues:
            if not par >= perp > 0:
                raise ValidationError('need lambda_par >= lambda_perp > 0, got (%g, %g)' % (par, perp))

        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'orientations', orientations)
        object.__setattr__(self, 'eigenvalues', eigenvalues)

    @property
    def num_fibers(self):
        return len(self.weights)

    def crossing_angle(self):
        """Smallest angle between fibers in degrees, 90 for a single fiber."""

        if self.num_fibers == 1:
            return 90.0
        return float(np.degrees(min_pairwise_angle(np.array(self.orientations))))

    def to_json(self):
        return {
            'weights': list(self.weights),
            'orientations': [list(u) for u in self.orientations],
            'eigenvalues': [list(e) for e in self.eigenvalues],
        }


@dataclass(frozen=True)
class NoiseConfig:
    model: str = 'rician'
    sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ValidationError('unknown noise model %r, expected one of %s' % (self.model, ', '.join(NOISE_MODELS)))
        if not self.sigma >= 0:
            raise ValidationError('noise sigma must be non-negative, got %r' % (self.sigma,))

    @property
    def active(self):
        return self.model == 'rician' and self.sigma > 0

    @classmethod
    def from_settings(cls, config, sigma=None, seed=None):
        sigma = config.get('sigma', 0.02) if sigma is None else sigma
        return cls('rician' if sigma > 0 else 'none', float(sigma),
                   int(config.get('noise_seed', 0) if seed is None else seed))

    def to_json(self):
        return {'model': self.model, 'sigma': self.sigma, 'seed': self.seed}


@dataclass(frozen=True)
class FiberDistribution:
    """How voxel configurations are drawn.

    Attributes:
        mix: probabilities of 1, 2 and 3 fibers.
        lambda_par, lambda_perp: nominal eigenvalues in mm^2/s.
        jitter: eigenvalues are scaled by 1 + U(-jitter, jitter).
        min_angle: smallest allowed crossing angle in degrees.
        isotropic: use lambda_perp = lambda_par for every fiber.
    """

    mix: tuple = (0.3, 0.5, 0.2)
    lambda_par: float = 1.7e-3
    lambda_perp: float = 0.3e-3
    jitter: float = 0.15
    min_angle: float = 30.0
    isotropic: bool = False
    max_tries: int = field(default=MAX_TRIES, compare=False)

    def __post_init__(self):
        mix = tuple(float(p) for p in self.mix)
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValidationError('fiber mix must be 3 non-negative probabilities summing to 1, got %s' % (mix,))
        if not self.lambda_par >= self.lambda_perp > 0:
            raise ValidationError('need lambda_par >= lambda_perp > 0')
        if not 0 <= self.jitter < 1:
            raise ValidationError('jitter must lie in [0, 1), got %r' % (self.jitter,))
        if not 0 <= self.min_angle <= 90:
            raise ValidationError('min_angle must lie in [0, 90] degrees, got %r' % (self.min_angle,))
        object.__setattr__(self, 'mix', mix)

    @classmethod
    def from_settings(cls, config):
        return cls(mix=tuple(config.get('fiber_mix', (0.3, 0.5, 0.2))),
                   lambda_par=float(config.get('lambda_par', 1.7e-3)),
                   lambda_perp=float(config.get('lambda_perp', 0.3e-3)),
                   jitter=float(config.get('jitter', 0.15)),
                   min_angle=float(config.get('min_angle', 30.0)),
                   isotropic=bool(config.get('isotropic', False)))

    def to_json(self):
        return {
            'mix': list(self.mix),
            'lambda_par': self.lambda_par,
            'lambda_perp': self.lambda_perp,
            'jitter': self.jitter,
            'min_angle': self.min_angle,
            'isotropic': self.isotropic,
        }

    def _orientations(self, count, rng):
        min_cos = np.cos(np.radians(self.min_angle))
        chosen = []
        for _ in range(self.max_tries):
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            if all(abs(float(u @ v)) <= min_cos for v in chosen):
                chosen.append(u)
                if len(chosen) == count:
                    return chosen
        raise SynthesisError('could not place %d fibers %g degrees apart in %d tries; use a smaller min angle'
                             % (count, self.min_angle, self.max_tries))

    def sample(self, rng):
        """Draws one FiberConfig."""

        count = int(rng.choice(3, p=self.mix)) + 1
        orientations = self._orientations(count, rng)
        scales = 1.0 + rng.uniform(-self.jitter, self.jitter, size=(count, 2))
        eigenvalues = []
        for par_scale, perp_scale in scales:
            par = self.lambda_par * par_scale
            perp = par if self.isotropic else min(self.lambda_perp * perp_scale, par)
            eigenvalues.append((par, perp))
        weights = rng.dirichlet(np.ones(count))
        weights /= weights.sum()
        return FiberConfig(tuple(weights), tuple(tuple(u) for u in orientations), tuple(eigenvalues))


def simulate_voxel(fibers, scheme):
    """Noise-free B0-normalized signal of a fiber mixture on every scheme direction."""

    directions = scheme.directions
    signal = np.zeros(len(scheme))
    for weight, u, (par, perp) in zip(fibers.weights, fibers.orientations, fibers.eigenvalues):
        projection = directions @ np.asarray(u)
        diffusivity = perp + (par - perp) * projection ** 2
        signal += weight * np.exp(-scheme.bvalue * diffusivity)
    return signal


def _rician(signal, sigma, rng):
    n1 = rng.normal(0.0, sigma, size=signal.shape)
    n2 = rng.normal(0.0, sigma, size=signal.shape)
    noisy = np.sqrt((signal + n1) ** 2 + n2 ** 2)
    clamped = noisy > CLAMP_LIMIT
    return np.minimum(noisy, CLAMP_LIMIT), int(clamped.sum())


def add_rician_noise(signal, noise, rng=None):
    """v -> sqrt((v + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma^2), clamped to 1.5.

    Args:
        signal: values in [0, 1].
        noise: NoiseConfig.
        rng: generator to draw from, PCG64(noise.seed) by default.
    """

    signal = np.asarray(signal, dtype=np.float64)
    if np.any(signal < 0) or np.any(signal > 1):
        raise ValidationError('signal values must lie in [0, 1]')
    if not noise.active:
        return signal.copy()
    return _rician(signal, noise.sigma, rng if rng is not None else make_rng(noise.seed))[0]


@dataclass
class SyntheticDataset:
    """Clean and noisy signals with the per-voxel configurations that produced them."""

    scheme: object
    clean: np.ndarray
    noisy: np.ndarray
    fibers: list
    noise: NoiseConfig
    distribution: FiberDistribution
    seed: int
    clamp_count: int = 0

    def __len__(self):
        return len(self.clean)

    def meta(self):
        return {
            'n_voxels': len(self),
            'seed': self.seed,
            'bvalue': self.scheme.bvalue,
            'directions': len(self.scheme),
            'noise': self.noise.to_json(),
            'distribution': self.distribution.to_json(),
            'clamp_count': self.clamp_count,
            'seed_mixing': 'voxel n: PCG64(SeedSequence([seed, n])); noise: PCG64(SeedSequence([noise.seed, seed, n]))',
            'voxels': [f.to_json() for f in self.fibers],
        }


def _voxel(index, scheme, distribution, noise, seed):
    fibers = distribution.sample(make_rng(seed, index))
    clean = simulate_voxel(fibers, scheme)
    if not noise.active:
        return fibers, clean, clean.copy(), 0
    noisy, clamps = _rician(clean, noise.sigma, make_rng(noise.seed, seed, index))
    return fibers, clean, noisy, clamps


def generate_dataset(n_voxels, scheme, distribution, noise, seed, threads=1):
    """Draws n_voxels voxels.

    Args:
        n_voxels (int): number of voxels, at least 1.
        scheme: GradientScheme to sample.
        distribution: FiberDistribution.
        noise: NoiseConfig; with sigma 0 the noisy copy equals the clean one.
        seed (int): dataset seed, use disjoint seeds for train and test.
        threads (int): worker threads; the result does not depend on it.
    Returns:
        SyntheticDataset.
    """

    if n_voxels < 1:
        raise ValidationError('n_voxels must be at least 1, got %d' % n_voxels)

    def work(index):
        return _voxel(index, scheme, distribution, noise, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            voxels = list(pool.map(work, range(n_voxels)))
    else:
        voxels = [work(index) for index in range(n_voxels)]

    fibers, clean, noisy, clamps = zip(*voxels)
    return SyntheticDataset(scheme, np.array(clean), np.array(noisy), list(fibers), noise, distribution,
                            int(seed), int(sum(clamps)))
