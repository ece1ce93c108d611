# Copyright (c) 2019 Edvinas Byla
# Licensed under MIT License

import argparse
import os
import sys

from pathlib import Path
from shutil import copyfile
from yaml import load, Loader


DEFAULT_SETTINGS = 'hardirecon'

# Allow users to pass a custom settings file name, e.g. --settings sweep
parser = argparse.ArgumentParser(add_help=False)
parser.add_argument('--settings', default=DEFAULT_SETTINGS,
    help='Settings file name inside the settings directory, without the .yaml extension')
args, _ = parser.parse_known_args()

# Retrieve filename without the extension
filename = os.path.splitext(os.path.basename(args.settings))[0]

# If the default settings don't exist next to the package it was installed via pip,
# in which case the current working directory is used as the base path
base_path = Path(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if not (base_path / 'settings' / 'hardirecon.yaml').exists():
    module_path = base_path
    base_path = Path(os.getcwd())
    settings_directory = base_path / 'settings'

    if not settings_directory.exists():
        settings_directory.mkdir()

    # Copy the default settings file from the module directory
    module_default_config = module_path / 'settings' / 'hardirecon.yaml'
    settings_default_config = settings_directory / 'hardirecon.yaml'
    if not settings_default_config.exists() and module_default_config.exists():
        copyfile(module_default_config, settings_default_config)

settings_directory = base_path / 'settings'
settings_file_path = Path(settings_directory, filename).with_suffix('.yaml')

# Fall back to the default settings file
if not settings_file_path.exists():
    settings_file_path = Path(settings_directory, DEFAULT_SETTINGS).with_suffix('.yaml')

with open(settings_file_path, 'r') as settings_file:
    settings = load(settings_file, Loader=Loader)

settings['script'] = os.path.basename(sys.argv[0])
settings['settings_file'] = str(settings_file_path)

# Create convenient variables
data_config = settings['DataConfig']
subset_config = settings['Subsets']
dictionary_config = settings['Dictionary']
solver_config = settings['Solvers']
model_config = settings['Model']
experiment_config = settings['Experiment']
