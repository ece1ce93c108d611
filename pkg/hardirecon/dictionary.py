"""Spherical harmonic signal dictionaries.

Atoms are the real, orthonormal, even-order spherical harmonics, without the
Condon-Shortley phase, ordered by l = 0, 2, ..., L and m = -l..l:

    Y_lm = sqrt(2) N_l|m| P_l^|m|(cos t) sin(|m| p)   m < 0
    Y_l0 = N_l0 P_l(cos t)
    Y_lm = sqrt(2) N_lm P_l^m(cos t) cos(m p)           m > 0

with N_lm = sqrt((2l + 1) / (4 pi) (l - m)! / (l + m)!).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import eval_legendre, lpmv

from .errors import ShapeError, ValidationError
from .io_formats import write_json, write_signal_matrix

FAMILY = 'real-symmetric-spherical-harmonics'
ZERO_ATOM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class BasisDescriptor:
    """Describes the spherical basis of a dictionary.

    Attributes:
        max_order: even maximum order L.
        regularization: per-atom weights used by the L2 solver, defaults to ones.
        family: basis family name.
    """

    max_order: int = 8
    regularization: tuple = None
    family: str = FAMILY

    def __post_init__(self):
        if self.family != FAMILY:
            raise ValidationError('unsupported basis family %r' % (self.family,))
        if self.max_order < 0 or self.max_order % 2:
            raise ValidationError('max_order must be an even, non-negative integer, got %r' % (self.max_order,))
        if self.regularization is None:
            object.__setattr__(self, 'regularization', tuple([1.0] * self.atom_count))
        elif len(self.regularization) != self.atom_count:
            raise ValidationError('expected %d regularization weights, got %d'
                                  % (self.atom_count, len(self.regularization)))
        else:
            object.__setattr__(self, 'regularization', tuple(float(w) for w in self.regularization))

    @property
    def atom_count(self):
        return (self.max_order + 1) * (self.max_order + 2) // 2

    @property
    def orders(self):
        """(l, m) of every atom, in column order."""

        return [(l, m) for l in range(0, self.max_order + 1, 2) for m in range(-l, l + 1)]

    @classmethod
    def with_laplace_beltrami(cls, max_order):
        """Basis whose L2 regularization weights are (l(l+1))^2."""

        return cls(max_order, laplace_beltrami_weights(max_order))

    def to_json(self):
        return {'family': self.family, 'max_order': self.max_order}


def laplace_beltrami_weights(max_order):
    return tuple(float((l * (l + 1)) ** 2) for l in range(0, max_order + 1, 2) for _ in range(2 * l + 1))


@dataclass(frozen=True, eq=False)
class Dictionary:
    """K x J design matrix: rows are directions, columns are atoms."""

    matrix: np.ndarray
    basis: BasisDescriptor
    scheme_hash: str = None

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != self.basis.atom_count:
            raise ShapeError('dictionary must have %d columns, got shape %s' % (self.basis.atom_count, matrix.shape))
        if not np.all(np.isfinite(matrix)):
            raise ValidationError('dictionary contains non-finite entries')
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)

    @property
    def shape(self):
        return self.matrix.shape


def _canonical(directions):
    """Maps each direction to the representative of its antipodal pair."""

    directions = np.array(directions, dtype=np.float64)
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    flip = (z < 0) | ((z == 0) & ((y < 0) | ((y == 0) & (x < 0))))
    directions[flip] *= -1.0
    return directions


def sh_matrix(directions, max_order):
    """Evaluates every even-order atom at every direction (rows)."""

    directions = _canonical(np.atleast_2d(directions))
    cos_theta = np.clip(directions[:, 2], -1.0, 1.0)
    phi = np.arctan2(directions[:, 1], directions[:, 0])

    columns = []
    for l in range(0, max_order + 1, 2):
        for m in range(-l, l + 1):
            am = abs(m)
            norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
            # lpmv includes the Condon-Shortley phase (-1)^m, which is removed here
            legendre = (-1) ** am * lpmv(am, l, cos_theta)
            if m < 0:
                columns.append(math.sqrt(2.0) * norm * legendre * np.sin(am * phi))
            elif m == 0:
                columns.append(norm * legendre)
            else:
                columns.append(math.sqrt(2.0) * norm * legendre * np.cos(am * phi))
    return np.stack(columns, axis=1)


def _check_atoms(matrix, where):
    """Rejects atoms whose column is numerically zero on every row."""

    norms = np.linalg.norm(matrix, axis=0)
    zero_columns = np.flatnonzero(norms <= ZERO_ATOM_TOLERANCE * max(float(norms.max()), 1.0))
    if zero_columns.size:
        raise ValidationError('atoms %s vanish on every direction of the %s'
                              % (', '.join(str(i) for i in zero_columns), where))
    return matrix


def build_dictionary(scheme, basis, scheme_hash=None):
    """Builds A(Q) for a gradient scheme.

    Args:
        scheme: GradientScheme.
        basis: BasisDescriptor.
        scheme_hash (str): optional digest recorded with the dictionary.
    Returns:
        Dictionary with one row per direction.
    """

    matrix = _check_atoms(sh_matrix(scheme.directions, basis.max_order), 'scheme')
    return Dictionary(matrix, basis, scheme_hash)


def restrict_dictionary(full, subset):
    """Row restriction A_L of A_H to the measured directions; every atom must stay nonzero."""

    subset.check_parent(full.shape[0])
    matrix = _check_atoms(full.matrix[list(subset.indices)], 'subset')
    return Dictionary(matrix, full.basis, full.scheme_hash)


def reconstruct_signal(dictionary, coeffs):
    """Signal s = A f for one coefficient vector or an n x J matrix of them."""

    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != dictionary.shape[1]:
        raise ShapeError('got %d coefficients for a dictionary with %d atoms' % (coeffs.shape[-1], dictionary.shape[1]))
    return coeffs @ dictionary.matrix.T


def fit_coefficients(dictionary, signals):
    """Least-squares coefficients of one signal or of the rows of an n x K matrix."""

    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[-1] != dictionary.shape[0]:
        raise ShapeError('got signals of length %d for a dictionary with %d rows'
                         % (signals.shape[-1], dictionary.shape[0]))
    solution, *_ = np.linalg.lstsq(dictionary.matrix, np.atleast_2d(signals).T, rcond=None)
    solution = solution.T
    return solution[0] if signals.ndim == 1 else solution


def funk_radon_eigenvalues(basis):
    """2 pi P_l(0) for the order of every atom."""

    return np.array([2.0 * np.pi * eval_legendre(l, 0.0) for l, _ in basis.orders])


def odf_from_coeffs(coeffs, basis):
    """ODF coefficients through the Funk-Radon transform."""

    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != basis.atom_count:
        raise ShapeError('got %d coefficients for a basis with %d atoms' % (coeffs.shape[-1], basis.atom_count))
    return coeffs * funk_radon_eigenvalues(basis)


def export_dictionary(dictionary, path):
    """Writes the matrix as CSV and a JSON sidecar next to it.

    Args:
        dictionary: Dictionary to export.
        path: CSV path, the sidecar gets the .json suffix.
    """

    write_signal_matrix(dictionary.matrix, path, header=False)
    sidecar = dict(dictionary.basis.to_json(), scheme_hash=dictionary.scheme_hash)
    write_json(sidecar, Path(path).with_suffix('.json'))
