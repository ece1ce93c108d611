import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hardirecon.errors import ShapeError, ValidationError
from hardirecon.geometry import make_rng
from hardirecon.metrics import MetricsRecord, MetricsReport, nmse_per_voxel, summarize


def test_nmse_per_voxel():
    truth = make_rng(0).uniform(0.1, 1.0, size=(20, 90))
    assert_array_equal(nmse_per_voxel(truth, truth), np.zeros(20))
    assert_allclose(nmse_per_voxel(np.zeros_like(truth), truth), np.ones(20), rtol=1e-15)
    assert_allclose(nmse_per_voxel(2.0 * truth, truth), np.ones(20), rtol=1e-15)


def test_nmse_matches_hand_computation():
    rng = make_rng(1)
    truth = rng.uniform(0.1, 1.0, size=(20, 30))
    pred = truth + 0.05 * rng.standard_normal((20, 30))
    errors = nmse_per_voxel(pred, truth)
    for n in range(20):
        expected = sum((p - t) ** 2 for p, t in zip(pred[n], truth[n])) / sum(t * t for t in truth[n])
        assert errors[n] == pytest.approx(expected, rel=1e-12)


def test_nmse_errors():
    with pytest.raises(ShapeError):
        nmse_per_voxel(np.ones((2, 3)), np.ones((2, 4)))
    truth = np.ones((3, 4))
    truth[1] = 0.0
    with pytest.raises(ValidationError, match='voxel 1'):
        nmse_per_voxel(np.ones((3, 4)), truth)


def test_summarize():
    per_voxel = make_rng(2).uniform(size=20)
    record = summarize('cs', 23, per_voxel, seconds=1.5)
    assert record.min_nmse == per_voxel.min()
    assert record.max_nmse == per_voxel.max()
    assert record.avg_nmse == pytest.approx(per_voxel.mean(), rel=1e-12)
    assert record.min_nmse <= record.avg_nmse <= record.max_nmse
    assert (record.n_voxels, record.seconds, record.k_low) == (20, 1.5, 23)
    with pytest.raises(ValidationError):
        summarize('cs', 23, [])


def test_constant_errors_keep_ordering():
    record = summarize('l2', 30, np.full(7, 0.1))
    assert record.min_nmse == record.avg_nmse == record.max_nmse == 0.1


def test_report_validation():
    MetricsReport([MetricsRecord('l2', 30, 0.1, 0.3, 0.2, 5)]).validate()
    with pytest.raises(ValidationError):
        MetricsReport([MetricsRecord('l2', 30, 0.1, 0.3, 0.4, 5)]).validate()
    with pytest.raises(ValidationError):
        MetricsReport([MetricsRecord('l2', 30, 0.1, 0.3, 0.2, 0)]).validate()
    with pytest.raises(ValidationError):
        MetricsReport([]).validate()


def test_report_order_follows_methods_then_k_low():
    records = [summarize(m, k, [0.1, 0.2]) for k in (18, 30, 23) for m in ('cnn', 'l2', 'cs')]
    report = MetricsReport(records).ordered(['l2', 'cs', 'cnn'], [30, 23, 18])
    assert [(r.method, r.k_low) for r in report.records] == [
        ('l2', 30), ('l2', 23), ('l2', 18),
        ('cs', 30), ('cs', 23), ('cs', 18),
        ('cnn', 30), ('cnn', 23), ('cnn', 18),
    ]
    assert report.record('cs', 23).k_low == 23
    with pytest.raises(KeyError):
        report.record('cs', 45)
