"""Per-voxel NMSE and its min / max / average aggregation per method and K_L."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

NORM_EPSILON = 1e-12


def nmse_per_voxel(pred, truth):
    """||pred_n - truth_n||^2 / ||truth_n||^2 for every row n."""

    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ShapeError('prediction shape %s differs from ground truth shape %s' % (pred.shape, truth.shape))

    energy = np.sum(truth ** 2, axis=1)
    small = np.flatnonzero(np.sqrt(energy) <= NORM_EPSILON)
    if small.size:
        raise ValidationError('ground truth voxel %d has zero norm' % small[0])
    return np.sum((pred - truth) ** 2, axis=1) / energy


@dataclass
class MetricsRecord:
    """Table row: NMSE statistics of one method at one K_L."""

    method: str
    k_low: int
    min_nmse: float
    max_nmse: float
    avg_nmse: float
    n_voxels: int
    seconds: float = 0.0

    def validate(self):
        if self.n_voxels < 1:
            raise ValidationError('%s at K_L=%d covers no voxels' % (self.method, self.k_low))
        if not self.min_nmse <= self.avg_nmse <= self.max_nmse:
            raise ValidationError('%s at K_L=%d violates min <= avg <= max (%r, %r, %r)'
                                  % (self.method, self.k_low, self.min_nmse, self.avg_nmse, self.max_nmse))

    def to_json(self):
        return {
            'method': self.method,
            'k_low': self.k_low,
            'min_nmse': self.min_nmse,
            'max_nmse': self.max_nmse,
            'avg_nmse': self.avg_nmse,
            'n_voxels': self.n_voxels,
            'seconds': self.seconds,
        }


def summarize(method, k_low, per_voxel, seconds=0.0):
    per_voxel = np.asarray(per_voxel, dtype=np.float64)
    if per_voxel.size == 0:
        raise ValidationError('no voxels to summarize for %s at K_L=%d' % (method, k_low))
    low, high = float(per_voxel.min()), float(per_voxel.max())
    # Rounding in the mean must not break min <= avg <= max
    average = min(max(float(per_voxel.mean()), low), high)
    return MetricsRecord(method, int(k_low), low, high, average, int(per_voxel.size), float(seconds))


@dataclass
class MetricsReport:
    records: list

    def validate(self):
        if not self.records:
            raise ValidationError('metrics report is empty')
        for record in self.records:
            record.validate()

    def ordered(self, methods, k_lows):
        """Rows grouped by method in the given order, K_L in the given order inside each."""

        lookup = {(r.method, r.k_low): r for r in self.records}
        return MetricsReport([lookup[(m, k)] for m in methods for k in k_lows if (m, k) in lookup])

    def record(self, method, k_low):
        for r in self.records:
            if r.method == method and r.k_low == k_low:
                return r
        raise KeyError((method, k_low))
