"""Readers and writers for every file the pipeline produces or consumes.

FSL gradient tables (bvecs: 3 rows, bvals: 1 row), signal matrices (CSV, one
voxel per row), subset and dataset metadata (canonical JSON), float32 binary
matrices with a JSON shape sidecar, model checkpoints and training logs.
Readers reject malformed input with a FormatError naming file, line and column.
"""

import csv
import json
from pathlib import Path

import numpy as np

from .errors import FormatError, HardiReconError, ValidationError
from .geometry import MIN_DIRECTIONS, GradientScheme, SubsetSelection

B0_TOLERANCE = 1e-6
BVALUE_RTOL = 1e-6
BLOB_DTYPE = '<f4'
METRICS_COLUMNS = ('method', 'k_low', 'min_nmse', 'max_nmse', 'avg_nmse', 'n_voxels', 'seconds')
TRAINING_LOG_COLUMNS = ('epoch', 'train_nmse', 'val_nmse', 'wall_seconds')
MANIFEST_NAME = 'manifest.json'


def _open(path, mode='r'):
    try:
        if 'b' in mode:
            return open(path, mode)
        return open(path, mode, newline='')
    except OSError as error:
        raise HardiReconError('cannot open %s: %s' % (path, error.strerror or error))


def format_float(value):
    """Shortest text that reads back as the same double."""

    return repr(float(value))


def write_json(data, path):
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""

    with _open(path, 'w') as f:
        f.write(json.dumps(data, indent=2, sort_keys=True))
        f.write('\n')


def read_json(path):
    with _open(path) as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as error:
        raise FormatError(error.msg, path, error.lineno, error.colno)


def _numeric_rows(text, path, name):
    """Parses whitespace separated numbers, skipping blank lines."""

    rows = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        row = []
        for column, token in enumerate(tokens, start=1):
            try:
                row.append(float(token))
            except ValueError:
                raise FormatError('%s entry %r is not a number' % (name, token), path, line_number, column)
        rows.append((line_number, row))
    return rows


def read_gradient_table(bvecs_text, bvals_text, bvecs_path=None, bvals_path=None):
    """Builds a single-shell GradientScheme from FSL bvecs/bvals text.

    Columns whose vector has zero norm or whose b-value is zero are b0 volumes
    and are dropped. The remaining directions are renormalized.
    """

    vector_rows = _numeric_rows(bvecs_text, bvecs_path, 'bvecs')
    if len(vector_rows) != 3:
        raise FormatError('bvecs must have exactly 3 rows, got %d' % len(vector_rows), bvecs_path)
    count = len(vector_rows[0][1])
    for line_number, row in vector_rows[1:]:
        if len(row) != count:
            raise FormatError('ragged bvecs: expected %d columns, got %d' % (count, len(row)),
                              bvecs_path, line_number, min(len(row), count) + 1)

    value_rows = _numeric_rows(bvals_text, bvals_path, 'bvals')
    if len(value_rows) != 1:
        raise FormatError('bvals must have exactly 1 row, got %d' % len(value_rows), bvals_path)
    line_number, bvals = value_rows[0]
    if len(bvals) != count:
        raise FormatError('bvals has %d entries but bvecs has %d columns' % (len(bvals), count),
                          bvals_path, line_number, min(len(bvals), count) + 1)

    vectors = np.array([row for _, row in vector_rows]).T
    bvals = np.array(bvals)
    if not np.all(np.isfinite(vectors)) or not np.all(np.isfinite(bvals)):
        raise FormatError('gradient table contains non-finite values', bvecs_path)

    norms = np.linalg.norm(vectors, axis=1)
    keep = (norms > B0_TOLERANCE) & (bvals > B0_TOLERANCE)
    vectors, norms, bvals = vectors[keep], norms[keep], bvals[keep]

    if bvals.size and not np.allclose(bvals, bvals[0], rtol=BVALUE_RTOL, atol=0.0):
        raise ValidationError('multi-shell unsupported: found b-values %s'
                              % ', '.join('%g' % b for b in np.unique(bvals)))
    if len(vectors) < MIN_DIRECTIONS:
        raise ValidationError('need at least %d diffusion weighted directions, found %d'
                              % (MIN_DIRECTIONS, len(vectors)))
    return GradientScheme(vectors / norms[:, None], float(bvals[0]))


def load_gradient_table(bvecs_path, bvals_path):
    with _open(bvecs_path) as f:
        bvecs_text = f.read()
    with _open(bvals_path) as f:
        bvals_text = f.read()
    return read_gradient_table(bvecs_text, bvals_text, bvecs_path, bvals_path)


def write_gradient_table(scheme, bvecs_path, bvals_path):
    with _open(bvecs_path, 'w') as f:
        for row in scheme.coordinates:
            f.write(' '.join(format_float(v) for v in row) + '\n')
    with _open(bvals_path, 'w') as f:
        f.write(' '.join(format_float(scheme.bvalue) for _ in range(len(scheme))) + '\n')


def write_signal_matrix(matrix, path, header=True):
    """Writes rows of a 2D matrix as CSV, optionally below a q0,q1,... header."""

    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if not np.all(np.isfinite(matrix)):
        raise ValidationError('refusing to write non-finite values to %s' % path)
    with _open(path, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        if header:
            writer.writerow(['q%d' % k for k in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow([format_float(v) for v in row])


def read_signal_matrix(path):
    """Reads a CSV matrix written by write_signal_matrix; the header row is optional.

    Returns:
        2D float64 array, one row per voxel.
    """

    with _open(path) as f:
        rows = list(enumerate(csv.reader(f), start=1))
    rows = [(number, row) for number, row in rows if row]
    if not rows:
        raise FormatError('empty signal matrix', path)

    if rows[0][1][0].strip().startswith('q'):
        width = len(rows[0][1])
        rows = rows[1:]
        if not rows:
            raise FormatError('signal matrix has a header but no rows', path)
    else:
        width = len(rows[0][1])

    matrix = np.empty((len(rows), width))
    for i, (number, row) in enumerate(rows):
        if len(row) != width:
            raise FormatError('ragged row: expected %d columns, got %d' % (width, len(row)),
                              path, number, min(len(row), width) + 1)
        for column, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise FormatError('cell %r is not a number' % cell, path, number, column + 1)
            if not np.isfinite(value):
                raise FormatError('cell %r is not finite' % cell, path, number, column + 1)
            matrix[i, column] = value
    return matrix


def _sidecar(path):
    return Path(path).with_suffix('.json')


def write_binary_matrix(matrix, path):
    """Little-endian float32 blob plus a JSON sidecar with its shape."""

    matrix = np.ascontiguousarray(matrix, dtype=BLOB_DTYPE)
    with _open(path, 'wb') as f:
        f.write(matrix.tobytes())
    write_json({'dtype': BLOB_DTYPE, 'shape': list(matrix.shape)}, _sidecar(path))


def read_binary_matrix(path):
    meta = read_json(_sidecar(path))
    shape = tuple(int(n) for n in meta.get('shape', ()))
    if meta.get('dtype') != BLOB_DTYPE:
        raise FormatError('unsupported blob dtype %r' % (meta.get('dtype'),), _sidecar(path))
    with _open(path, 'rb') as f:
        data = f.read()
    expected = int(np.prod(shape)) * np.dtype(BLOB_DTYPE).itemsize
    if len(data) != expected:
        raise FormatError('blob holds %d bytes, shape %s needs %d' % (len(data), shape, expected), path)
    return np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).copy()


def write_subset(subset, path):
    write_json(subset.to_json(), path)


def read_subset(path):
    data = read_json(path)
    try:
        return SubsetSelection.from_json(data)
    except (KeyError, TypeError) as error:
        raise FormatError('malformed subset file (%s)' % error, path)


def write_dataset_meta(meta, path):
    write_json(meta, path)


def write_checkpoint(directory, manifest, arrays):
    """Writes a manifest and one float32 blob per array.

    Args:
        directory: checkpoint directory, created if missing.
        manifest (dict): JSON metadata; a 'blobs' entry listing the arrays is added.
        arrays (list): (name, array) pairs in the order they are listed.
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = []
    for name, array in arrays:
        array = np.ascontiguousarray(array, dtype=BLOB_DTYPE)
        filename = name + '.bin'
        with _open(directory / filename, 'wb') as f:
            f.write(array.tobytes())
        blobs.append({'file': filename, 'name': name, 'shape': list(array.shape)})
    write_json(dict(manifest, blobs=blobs), directory / MANIFEST_NAME)


def read_checkpoint(directory):
    """Returns (manifest, list of (name, float32 array)) in manifest order."""

    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise HardiReconError('no checkpoint found in %s' % directory)
    manifest = read_json(manifest_path)
    if 'blobs' not in manifest:
        raise FormatError('manifest lists no blobs', manifest_path)

    arrays = []
    for entry in manifest['blobs']:
        shape = tuple(entry['shape'])
        with _open(directory / entry['file'], 'rb') as f:
            data = f.read()
        expected = int(np.prod(shape)) * np.dtype(BLOB_DTYPE).itemsize
        if len(data) != expected:
            raise FormatError('blob %s holds %d bytes, shape %s needs %d'
                              % (entry['file'], len(data), shape, expected), manifest_path)
        arrays.append((entry['name'], np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).copy()))
    return manifest, arrays


def write_training_log(history, path):
    """history is a list of (epoch, train_nmse, val_nmse, wall_seconds)."""

    with _open(path, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRAINING_LOG_COLUMNS)
        for epoch, train_nmse, val_nmse, seconds in history:
            writer.writerow([int(epoch), format_float(train_nmse), format_float(val_nmse), format_float(seconds)])


def read_training_log(path):
    with _open(path) as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != TRAINING_LOG_COLUMNS:
        raise FormatError('expected header %s' % ','.join(TRAINING_LOG_COLUMNS), path, 1)
    history = []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRAINING_LOG_COLUMNS):
            raise FormatError('expected %d columns, got %d' % (len(TRAINING_LOG_COLUMNS), len(row)), path, number)
        try:
            history.append((int(row[0]), float(row[1]), float(row[2]), float(row[3])))
        except ValueError as error:
            raise FormatError(str(error), path, number)
    return history


def write_metrics_report(report, path, format=None):
    """Writes a validated MetricsReport as CSV (one row per method and K_L) or JSON.

    Args:
        report: MetricsReport.
        path: output file.
        format (str): 'csv' or 'json'; inferred from the suffix when omitted.
    """

    format = format or Path(path).suffix.lstrip('.').lower()
    if format not in ('csv', 'json'):
        raise ValidationError('unknown report format %r, expected csv or json' % (format,))
    report.validate()

    if format == 'json':
        write_json({'records': [record.to_json() for record in report.records]}, path)
        return

    with _open(path, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        for record in report.records:
            writer.writerow([record.method, record.k_low, format_float(record.min_nmse),
                             format_float(record.max_nmse), format_float(record.avg_nmse),
                             record.n_voxels, format_float(record.seconds)])
