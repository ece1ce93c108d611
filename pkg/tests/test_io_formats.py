import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hardirecon.errors import FormatError, HardiReconError, ValidationError
from hardirecon.geometry import SubsetSelection, hemisphere_scheme, make_rng
from hardirecon.io_formats import (METRICS_COLUMNS, load_gradient_table, read_binary_matrix, read_checkpoint,
                                   read_gradient_table, read_json, read_signal_matrix, read_subset,
                                   read_training_log, write_binary_matrix, write_checkpoint, write_gradient_table,
                                   write_json, write_metrics_report, write_signal_matrix, write_subset,
                                   write_training_log)
from hardirecon.metrics import MetricsRecord, MetricsReport, summarize


def table_text(directions, bvals):
    bvecs = '\n'.join(' '.join(repr(float(v)) for v in row) for row in np.asarray(directions).T)
    return bvecs + '\n', ' '.join(repr(float(b)) for b in bvals) + '\n'


def test_read_gradient_table():
    scheme = hemisphere_scheme(90)
    bvecs, bvals = table_text(scheme.directions, [2000.0] * 90)
    parsed = read_gradient_table(bvecs, bvals)
    assert len(parsed) == 90
    assert parsed.bvalue == 2000.0
    assert np.abs(parsed.directions - scheme.directions).max() < 1e-15


def test_b0_columns_are_dropped():
    scheme = hemisphere_scheme(10)
    directions = np.vstack([[0.0, 0.0, 0.0], scheme.directions, [0.0, 0.0, 0.0]])
    bvecs, bvals = table_text(directions, [0.0] + [1000.0] * 10 + [5.0])
    parsed = read_gradient_table(bvecs, bvals)
    assert len(parsed) == 10
    assert parsed.bvalue == 1000.0


def test_directions_are_renormalized():
    scheme = hemisphere_scheme(8)
    bvecs, bvals = table_text(scheme.directions * 1.001, [1000.0] * 8)
    parsed = read_gradient_table(bvecs, bvals)
    assert np.abs(np.linalg.norm(parsed.directions, axis=1) - 1.0).max() < 1e-12


def test_multi_shell_is_rejected():
    scheme = hemisphere_scheme(10)
    bvecs, bvals = table_text(scheme.directions, [1000.0] * 5 + [2000.0] * 5)
    with pytest.raises(ValidationError, match='multi-shell unsupported'):
        read_gradient_table(bvecs, bvals)


def test_gradient_table_format_errors():
    scheme = hemisphere_scheme(10)
    bvecs, bvals = table_text(scheme.directions, [1000.0] * 10)
    with pytest.raises(FormatError, match='exactly 3 rows'):
        read_gradient_table('\n'.join(bvecs.splitlines()[:2]), bvals)
    ragged = bvecs.splitlines()
    ragged[1] = ' '.join(ragged[1].split()[:-1])
    with pytest.raises(FormatError, match='ragged') as error:
        read_gradient_table('\n'.join(ragged), bvals, 'bvecs')
    assert error.value.line == 2 and error.value.path == 'bvecs'
    with pytest.raises(FormatError, match='9 entries'):
        read_gradient_table(bvecs, ' '.join(['1000'] * 9))
    lines = bvecs.splitlines()
    tokens = lines[0].split()
    tokens[3] = 'x'
    with pytest.raises(FormatError) as error:
        read_gradient_table('\n'.join([' '.join(tokens)] + lines[1:]), bvals)
    assert error.value.line == 1 and error.value.column == 4
    few, few_bvals = table_text(hemisphere_scheme(10).directions[:5], [1000.0] * 5)
    with pytest.raises(ValidationError, match='at least 6'):
        read_gradient_table(few, few_bvals)


def test_gradient_table_files(tmp_path):
    scheme = hemisphere_scheme(30, 3000.0)
    write_gradient_table(scheme, tmp_path / 'bvecs', tmp_path / 'bvals')
    parsed = load_gradient_table(tmp_path / 'bvecs', tmp_path / 'bvals')
    assert np.abs(parsed.directions - scheme.directions).max() < 1e-15
    assert parsed.bvalue == 3000.0
    with pytest.raises(HardiReconError, match='cannot open'):
        load_gradient_table(tmp_path / 'missing', tmp_path / 'bvals')


def test_signal_matrix_round_trip(tmp_path):
    matrix = make_rng(0).uniform(size=(2000, 90))
    write_signal_matrix(matrix, tmp_path / 'signals.csv')
    with open(tmp_path / 'signals.csv') as f:
        assert f.readline().startswith('q0,q1,q2,')
    loaded = read_signal_matrix(tmp_path / 'signals.csv')
    assert loaded.shape == (2000, 90)
    assert_array_equal(loaded, matrix)

    write_signal_matrix(matrix[:3], tmp_path / 'plain.csv', header=False)
    assert_array_equal(read_signal_matrix(tmp_path / 'plain.csv'), matrix[:3])


def test_signal_matrix_errors(tmp_path):
    (tmp_path / 'empty.csv').write_text('')
    with pytest.raises(FormatError, match='empty'):
        read_signal_matrix(tmp_path / 'empty.csv')

    (tmp_path / 'ragged.csv').write_text('q0,q1,q2\n0.1,0.2,0.3\n0.1,0.2\n')
    with pytest.raises(FormatError, match='ragged') as error:
        read_signal_matrix(tmp_path / 'ragged.csv')
    assert error.value.line == 3

    (tmp_path / 'text.csv').write_text('0.1,0.2\n0.3,abc\n')
    with pytest.raises(FormatError) as error:
        read_signal_matrix(tmp_path / 'text.csv')
    assert (error.value.line, error.value.column) == (2, 2)
    assert 'text.csv' in str(error.value)

    with pytest.raises(ValidationError):
        write_signal_matrix(np.array([[np.nan, 1.0]]), tmp_path / 'nan.csv')


def test_binary_matrix(tmp_path):
    matrix = make_rng(1).standard_normal((7, 5))
    write_binary_matrix(matrix, tmp_path / 'm.bin')
    assert read_json(tmp_path / 'm.json') == {'dtype': '<f4', 'shape': [7, 5]}
    assert_array_equal(read_binary_matrix(tmp_path / 'm.bin'), matrix.astype(np.float32))

    with open(tmp_path / 'm.bin', 'ab') as f:
        f.write(b'\x00')
    with pytest.raises(FormatError, match='bytes'):
        read_binary_matrix(tmp_path / 'm.bin')


def test_subset_file(tmp_path):
    subset = SubsetSelection((1, 4, 9), 90, 'random', 3)
    write_subset(subset, tmp_path / 'subset.json')
    assert read_json(tmp_path / 'subset.json') == {'parent_size': 90, 'indices': [1, 4, 9],
                                                   'strategy': 'random', 'seed': 3}
    assert read_subset(tmp_path / 'subset.json') == subset

    (tmp_path / 'bad.json').write_text('{"indices": [1, 2]}')
    with pytest.raises(FormatError):
        read_subset(tmp_path / 'bad.json')


def test_read_json_reports_position(tmp_path):
    (tmp_path / 'broken.json').write_text('{\n  "a": 1,\n  "b": }\n')
    with pytest.raises(FormatError) as error:
        read_json(tmp_path / 'broken.json')
    assert error.value.line == 3


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    rng = make_rng(2)
    arrays = [('encoder.0.weight', rng.standard_normal((4, 3, 9))), ('encoder.0.bias', np.zeros(4))]
    manifest = {'epoch': 3, 'metrics': {'train_nmse': 0.25}, 'seed': 0}
    write_checkpoint(tmp_path / 'a', manifest, arrays)
    loaded_manifest, loaded = read_checkpoint(tmp_path / 'a')
    assert [name for name, _ in loaded] == ['encoder.0.weight', 'encoder.0.bias']
    assert_array_equal(loaded[0][1], arrays[0][1].astype(np.float32))
    assert loaded_manifest['blobs'][0] == {'file': 'encoder.0.weight.bin', 'name': 'encoder.0.weight',
                                           'shape': [4, 3, 9]}

    rewritten = {k: v for k, v in loaded_manifest.items() if k != 'blobs'}
    write_checkpoint(tmp_path / 'b', rewritten, loaded)
    for name in ('manifest.json', 'encoder.0.weight.bin', 'encoder.0.bias.bin'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(HardiReconError, match='no checkpoint'):
        read_checkpoint(tmp_path)


def test_training_log(tmp_path):
    history = [(0, 0.5, 0.6, 1.25), (1, 0.25, float('nan'), 1.5)]
    write_training_log(history, tmp_path / 'log.csv')
    loaded = read_training_log(tmp_path / 'log.csv')
    assert loaded[0] == history[0]
    assert loaded[1][:2] == (1, 0.25) and np.isnan(loaded[1][2])

    (tmp_path / 'bad.csv').write_text('epoch,loss\n')
    with pytest.raises(FormatError, match='header'):
        read_training_log(tmp_path / 'bad.csv')


def metrics_report():
    records = []
    for method in ('l2', 'cs', 'cnn'):
        for k in (30, 23, 18):
            records.append(summarize(method, k, make_rng(k, len(method)).uniform(0.01, 0.2, size=50)))
    return MetricsReport(records)


def test_metrics_report_csv_and_json_agree(tmp_path):
    report = metrics_report()
    write_metrics_report(report, tmp_path / 'metrics.csv')
    write_metrics_report(report, tmp_path / 'metrics.json')

    with open(tmp_path / 'metrics.csv') as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert len(rows) == 10
    with open(tmp_path / 'metrics.json') as f:
        records = json.load(f)['records']
    for row, record in zip(rows[1:], records):
        assert row[0] == record['method'] and int(row[1]) == record['k_low']
        assert float(row[2]) == record['min_nmse']
        assert float(row[3]) == record['max_nmse']
        assert float(row[4]) == record['avg_nmse']
        assert int(row[5]) == record['n_voxels'] == 50


def test_metrics_report_invariant_checked_before_write(tmp_path):
    report = MetricsReport([MetricsRecord('l2', 30, 0.5, 0.1, 0.3, 10)])
    with pytest.raises(ValidationError):
        write_metrics_report(report, tmp_path / 'metrics.csv')
    assert not (tmp_path / 'metrics.csv').exists()
    with pytest.raises(ValidationError):
        write_metrics_report(MetricsReport([]), tmp_path / 'metrics.csv')
    with pytest.raises(ValidationError):
        write_metrics_report(metrics_report(), tmp_path / 'metrics.txt')


def test_write_json_is_canonical(tmp_path):
    write_json({'b': 1, 'a': [1, 2]}, tmp_path / 'x.json')
    assert (tmp_path / 'x.json').read_text() == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}\n'
