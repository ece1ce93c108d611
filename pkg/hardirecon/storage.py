# Copyright (c) 2019 Edvinas Byla
# Licensed under MIT License

import hashlib
from datetime import datetime
from pathlib import Path

from . import base_path
from .io_formats import format_float
from .model import load_checkpoint, save_checkpoint


class Storage:
    """Class responsible for the output directory layout."""

    DIR = {
        "DATASET": "dataset",
        "SUBSET": "subsets",
        "MODEL": "models",
        "RECONSTRUCTION": "reconstructions",
        "REPORT": "reports",
        "PLOT": "plots",
    }

    def __init__(self, out_dir=None):
        self.setup_path(out_dir)
        self.setup_directories()

    def setup_path(self, out_dir):
        """Uses the given directory or creates a timestamped one under saves/."""

        if out_dir is not None:
            self.current_path = Path(out_dir)
            self.current_path.mkdir(parents=True, exist_ok=True)
            return

        storage_path = base_path / 'saves'
        storage_path.mkdir(exist_ok=True)
        self.current_path = storage_path / datetime.now().strftime('%Y-%m-%d-%H-%M-%S')
        self.current_path.mkdir(exist_ok=True)

    def setup_directories(self):
        for directory in Storage.DIR.values():
            (self.current_path / directory).mkdir(exist_ok=True)

    def dataset_path(self, split):
        path = self.current_path / Storage.DIR["DATASET"] / split
        path.mkdir(exist_ok=True)
        return path

    def subset_path(self, k_low):
        return self.current_path / Storage.DIR["SUBSET"] / ('subset_k%d.json' % k_low)

    def model_path(self, k_low):
        return self.current_path / Storage.DIR["MODEL"] / ('cnn_k%d' % k_low)

    def solver_path(self, method, k_low):
        return self.current_path / Storage.DIR["MODEL"] / ('%s_k%d.json' % (method, k_low))

    def reconstruction_path(self, method, k_low, split='test'):
        name = '%s_k%d.csv' % (method, k_low) if split == 'test' else '%s_k%d_%s.csv' % (method, k_low, split)
        return self.current_path / Storage.DIR["RECONSTRUCTION"] / name

    def report_path(self, name):
        return self.current_path / Storage.DIR["REPORT"] / name

    def odf_path(self, name):
        path = self.current_path / Storage.DIR["REPORT"] / 'odf'
        path.mkdir(exist_ok=True)
        return path / name

    def save_plot(self, name, plot):
        plot.savefig(self.current_path / Storage.DIR["PLOT"] / name)
        plot.close()

    def save_checkpoint(self, k_low, params, optimizer=None, epoch=0, metrics=None, history=None):
        save_checkpoint(self.model_path(k_low), params, optimizer, epoch, metrics, history)

    def load_checkpoint(self, k_low, precision=None):
        return load_checkpoint(self.model_path(k_low), precision)


def hash_scheme(scheme):
    """sha3-256 digest of the directions and b-value, in scheme order."""

    description = 'b=%s' % format_float(scheme.bvalue)
    for direction in scheme.directions:
        description += ';' + ','.join(format_float(c) for c in direction)
    return hashlib.sha3_256(description.encode('utf-8')).hexdigest()
