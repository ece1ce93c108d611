"""Gradient schemes on the unit sphere and the direction bookkeeping around them.

Random draws use numpy's PCG64 bit generator. Integer seeds are mixed with
``numpy.random.SeedSequence`` so that a (seed, voxel, epoch, ...) key always
yields the same stream regardless of the order in which keys are visited.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

UNIT_TOLERANCE = 1e-9
MIN_DIRECTIONS = 6
STRATEGIES = ('uniform-angular', 'random')
UPSAMPLE_METHODS = ('nearest', 'idw')
IDW_NEIGHBOURS = 3


def derive_seed(*keys):
    """Mixes integer keys into a single 64-bit seed."""

    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)
    return int(state[0])


def make_rng(*keys):
    """Returns a PCG64 generator seeded by the mixed keys."""

    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Ordered unit directions acquired at a single b-value.

    Attributes:
        directions: K x 3 array of unit vectors.
        bvalue: b-value in s/mm^2.
    """

    directions: np.ndarray
    bvalue: float

    def __post_init__(self):
        directions = np.array(self.directions, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != 3:
            raise ValidationError('directions must be a K x 3 array, got shape %s' % (directions.shape,))
        if directions.shape[0] < MIN_DIRECTIONS:
            raise ValidationError('a gradient scheme needs at least %d directions, got %d'
                                  % (MIN_DIRECTIONS, directions.shape[0]))
        if not np.all(np.isfinite(directions)):
            raise ValidationError('directions contain non-finite values')

        norms = np.linalg.norm(directions, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)
        if bad.size:
            raise ValidationError('direction %d is not unit norm (|q| = %.12g)' % (bad[0], norms[bad[0]]))

        dots = np.abs(directions @ directions.T)
        np.fill_diagonal(dots, 0.0)
        i, j = np.unravel_index(np.argmax(dots), dots.shape)
        if dots[i, j] >= 1.0 - UNIT_TOLERANCE:
            raise ValidationError('directions %d and %d are duplicated or antipodal' % (min(i, j), max(i, j)))

        if not np.isfinite(self.bvalue) or self.bvalue <= 0:
            raise ValidationError('b-value must be positive, got %r' % (self.bvalue,))

        directions.setflags(write=False)
        object.__setattr__(self, 'directions', directions)
        object.__setattr__(self, 'bvalue', float(self.bvalue))

    def __len__(self):
        return self.directions.shape[0]

    @property
    def coordinates(self):
        """Q_x, Q_y and Q_z as a 3 x K array."""

        return self.directions.T

    def subscheme(self, subset):
        """Returns the scheme restricted to the selected directions."""

        subset.check_parent(len(self))
        return GradientScheme(self.directions[list(subset.indices)], self.bvalue)


@dataclass(frozen=True)
class SubsetSelection:
    """Indices of the measured directions Q_L inside a parent scheme Q_H."""

    indices: tuple
    parent_size: int
    strategy: str = 'uniform-angular'
    seed: int = None

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if not indices:
            raise ValidationError('a subset needs at least one index')
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError('subset indices must be strictly increasing')
        if indices[0] < 0 or indices[-1] >= self.parent_size:
            raise ValidationError('subset indices must lie in [0, %d)' % self.parent_size)
        object.__setattr__(self, 'indices', indices)

    def __len__(self):
        return len(self.indices)

    def check_parent(self, size):
        if size != self.parent_size:
            raise ValidationError('subset was selected from %d directions but the scheme has %d'
                                  % (self.parent_size, size))

    def to_json(self):
        return {
            'parent_size': self.parent_size,
            'indices': list(self.indices),
            'strategy': self.strategy,
            'seed': self.seed,
        }

    @classmethod
    def from_json(cls, data):
        return cls(tuple(data['indices']), int(data['parent_size']),
                   data.get('strategy', 'uniform-angular'), data.get('seed'))


@dataclass(frozen=True)
class Permutation:
    """Bijection on direction positions; position p holds original position order[p]."""

    order: tuple
    seed: int = None

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValidationError('permutation order is not a bijection on 0..%d' % (len(order) - 1))
        object.__setattr__(self, 'order', order)

    def __len__(self):
        return len(self.order)

    def as_array(self):
        return np.asarray(self.order, dtype=np.intp)


def hemisphere_scheme(n, bvalue=2000.0):
    """Near uniform directions on the upper hemisphere (Fibonacci lattice).

    Heights are spaced uniformly in (0, 1], which spreads the points evenly in area
    and keeps every direction antipodally unique.
    """

    if n < MIN_DIRECTIONS:
        raise ValidationError('a gradient scheme needs at least %d directions' % MIN_DIRECTIONS)
    golden_angle = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(n)
    z = (i + 0.5) / n
    radius = np.sqrt(1.0 - z * z)
    phi = golden_angle * i
    directions = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return GradientScheme(directions, bvalue)


def fibonacci_sphere(n):
    """Near uniform points on the whole sphere, used as a quadrature grid."""

    golden_angle = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    radius = np.sqrt(1.0 - z * z)
    phi = golden_angle * i
    points = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def _check_unit(vector, name):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape[-1] != 3:
        raise ValidationError('%s must be a 3-vector' % name)
    norm = np.linalg.norm(vector, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOLERANCE):
        raise ValidationError('%s is not unit norm' % name)
    return vector


def angular_distance(a, b):
    """Antipodally symmetric angle arccos(|a.b|) in [0, pi/2]."""

    a = _check_unit(a, 'a')
    b = _check_unit(b, 'b')
    return float(np.arccos(np.clip(abs(float(a @ b)), 0.0, 1.0)))


def angular_distance_matrix(a, b):
    """Pairwise antipodally symmetric angles between the rows of a and b."""

    return np.arccos(np.clip(np.abs(np.asarray(a) @ np.asarray(b).T), 0.0, 1.0))


def min_pairwise_angle(directions):
    """Smallest antipodally symmetric angle between distinct rows."""

    distances = angular_distance_matrix(directions, directions)
    np.fill_diagonal(distances, np.inf)
    return float(distances.min())


def select_subset(scheme, k, strategy='uniform-angular', seed=0):
    """Chooses k of the scheme's directions.

    uniform-angular grows the set greedily from direction 0, each time adding the
    direction farthest from the chosen ones (lowest index on ties); the k-subset is
    therefore a prefix of one fixed sequence. random draws k indices without
    replacement from a seeded generator.

    Args:
        scheme: parent GradientScheme.
        k (int): number of directions to keep, 6 <= k <= K.
        strategy (str): 'uniform-angular' or 'random'.
        seed (int): seed of the random strategy.
    Returns:
        SubsetSelection with sorted indices.
    """

    size = len(scheme)
    if not MIN_DIRECTIONS <= k <= size:
        raise ValidationError('k must lie in [%d, %d], got %d' % (MIN_DIRECTIONS, size, k))
    if strategy not in STRATEGIES:
        raise ValidationError('unknown subset strategy %r, expected one of %s' % (strategy, ', '.join(STRATEGIES)))

    if strategy == 'random':
        chosen = make_rng(seed).choice(size, size=k, replace=False)
        return SubsetSelection(tuple(sorted(int(i) for i in chosen)), size, strategy, seed)

    distances = angular_distance_matrix(scheme.directions, scheme.directions)
    chosen = [0]
    closest = distances[0].copy()
    for _ in range(k - 1):
        closest[chosen] = -1.0
        # argmax returns the first maximum, i.e. the lowest index on ties
        candidate = int(np.argmax(closest))
        chosen.append(candidate)
        closest = np.minimum(closest, distances[candidate])
    return SubsetSelection(tuple(sorted(chosen)), size, strategy, None)


def interpolation_weights(subset, scheme, method='idw'):
    """Neighbour indices (into the subset) and weights for every full direction.

    Returns:
        (neighbours, weights), both K_H x n arrays, n = 1 for nearest and 3 for idw.
    """

    subset.check_parent(len(scheme))
    if method not in UPSAMPLE_METHODS:
        raise ValidationError('unknown upsampling method %r, expected one of %s'
                              % (method, ', '.join(UPSAMPLE_METHODS)))

    measured = scheme.directions[list(subset.indices)]
    distances = angular_distance_matrix(scheme.directions, measured)
    count = 1 if method == 'nearest' else min(IDW_NEIGHBOURS, len(subset))

    # Stable sort keeps the lowest subset position first on ties
    neighbours = np.argsort(distances, axis=1, kind='stable')[:, :count]
    if count == 1:
        return neighbours, np.ones_like(neighbours, dtype=np.float64)

    nearest = np.take_along_axis(distances, neighbours, axis=1)
    with np.errstate(divide='ignore'):
        weights = 1.0 / nearest
    coincident = nearest[:, 0] < 1e-12
    weights[coincident] = 0.0
    weights[coincident, 0] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    return neighbours, weights


def upsample_to_full(values, subset, scheme, method='idw'):
    """Interpolates measurements on Q_L to every direction of Q_H.

    Measured directions get their measured value back exactly. Works on a single
    K_L vector or on an n x K_L matrix.
    """

    values = np.asarray(values)
    if values.shape[-1] != len(subset):
        raise ValidationError('got %d values for a subset of %d directions' % (values.shape[-1], len(subset)))

    neighbours, weights = interpolation_weights(subset, scheme, method)
    full = np.sum(values[..., neighbours] * weights, axis=-1)
    full[..., list(subset.indices)] = values
    return full


def make_permutation(k, seed):
    """Fisher-Yates shuffle of 0..k-1 driven by PCG64(seed)."""

    if k < 1:
        raise ValidationError('a permutation needs k >= 1, got %d' % k)

    order = np.arange(k)
    if k > 1:
        positions = np.arange(k - 1, 0, -1)
        swaps = make_rng(seed).integers(0, positions + 1)
        for i, j in zip(positions, swaps):
            order[i], order[j] = order[j], order[i]
    return Permutation(tuple(int(i) for i in order), seed)


def inverse_permutation(perm):
    return Permutation(tuple(int(i) for i in np.argsort(perm.as_array())), perm.seed)


def apply_permutation(channels, perm):
    """Reorders the last axis of every channel by the same permutation."""

    channels = np.asarray(channels)
    if channels.shape[-1] != len(perm):
        raise ValidationError('permutation of length %d applied to %d positions'
                              % (len(perm), channels.shape[-1]))
    return channels[..., perm.as_array()]
