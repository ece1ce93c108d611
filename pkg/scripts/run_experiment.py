# Synthetic reconstruction experiment: every method at every K_L of the settings file
#
# Usage: python scripts/run_experiment.py [--settings NAME] [--out DIR]
#
# Trains one network per K_L, reconstructs the test voxels with the two
# dictionary baselines and the network, then writes the metrics report
# (reports/metrics.csv) and the ODF coefficient files.

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hardirecon import experiment_config  # noqa: E402
from hardirecon.hardirecon import HardiRecon  # noqa: E402
from hardirecon.log import Log  # noqa: E402

parser = argparse.ArgumentParser()
parser.add_argument('--out', default=experiment_config.get('out_dir'))
parser.add_argument('--threads', type=int)
parser.add_argument('--settings')
args = parser.parse_args()

# The whole protocol shares one output directory
hardirecon = HardiRecon(out_dir=args.out, threads=args.threads)
# Training and testing voxels
hardirecon.synthesize()
# Reduced direction subsets, one per K_L
hardirecon.select_subsets()
# One network per K_L
hardirecon.train()
# Reconstruct the test split with every method
for method in hardirecon.experiment.methods:
    hardirecon.reconstruct(method)
# Report ordered by method, then K_L
report = hardirecon.evaluate()

Log.header('RESULTS', type='GREEN')
for record in report.records:
    Log.info('%-4s K_L=%-3d min %.4f  max %.4f  avg %.4f'
             % (record.method, record.k_low, record.min_nmse, record.max_nmse, record.avg_nmse))
