"""Command line interface, run as ``python -m hardirecon <command>``.

Every command is a thin layer over :class:`hardirecon.hardirecon.HardiRecon`.
Exit codes: 0 success, 1 validation or usage error, 2 runtime failure,
3 selftest failure.
"""

import argparse

from . import experiment_config
from .autodiff import PRECISIONS
from .errors import HardiReconError, UsageError
from .hardirecon import SPLITS, HardiRecon
from .log import Log
from .model import OPTIMIZERS
from .reconstructors import METHOD_ALIASES, METHODS

COMMANDS = ('synth', 'train', 'reconstruct', 'evaluate', 'selftest')
FAULT_OPS = ('conv1d', 'conv1d_transposed', 'relu', 'nmse_loss', 'scale', 'add')


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError('%s: %s' % (self.prog, message))


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError('%r is not an integer' % text)
    if value < 1:
        raise argparse.ArgumentTypeError('%d is not a positive integer' % value)
    return value


def non_negative_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError('%r is not a number' % text)
    if not value >= 0.0:
        raise argparse.ArgumentTypeError('%r is not a non-negative number' % text)
    return value


def global_options():
    """Options accepted before and after the command name."""

    parser = ArgumentParser(add_help=False)
    # SUPPRESS keeps a value given before the command from being reset by the subparser
    parser.add_argument('--seed', type=int, default=argparse.SUPPRESS,
                        help='Seed of every random draw of the command')
    parser.add_argument('--threads', type=positive_int, default=argparse.SUPPRESS,
                        help='Voxel parallel workers; results do not depend on it')
    parser.add_argument('--precision', choices=tuple(PRECISIONS), default=argparse.SUPPRESS,
                        help='Network precision, f32 for training and f64 for checks')
    parser.add_argument('--out', metavar='DIR', default=argparse.SUPPRESS,
                        help='Output directory shared by all commands of one experiment')
    parser.add_argument('--settings', default=argparse.SUPPRESS,
                        help='Settings file name inside the settings directory')
    parser.add_argument('--quiet', action='store_true', default=argparse.SUPPRESS,
                        help='Hide debug messages on the console')
    return parser


def build_parser():
    common = global_options()
    parser = ArgumentParser(prog='hardirecon', parents=[common],
                            description='Reconstruction of HARDI signals from a reduced set of gradient directions.')
    commands = parser.add_subparsers(dest='command', metavar='{%s}' % ','.join(COMMANDS), parser_class=ArgumentParser)
    commands.required = True

    synth = commands.add_parser('synth', parents=[common], help='Generate synthetic training and testing voxels')
    synth.add_argument('--n-train', type=positive_int, help='Training voxels')
    synth.add_argument('--n-test', type=positive_int, help='Testing voxels')
    synth.add_argument('--k', type=positive_int, dest='k_high', help='Directions of the full scheme')
    synth.add_argument('--b', type=non_negative_float, dest='bvalue', help='b-value in s/mm^2')
    synth.add_argument('--sigma', type=non_negative_float, help='Rician noise level, 0 disables noise')
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser('train', parents=[common], help='Train one network per K_L')
    train.add_argument('--k-low', type=positive_int, nargs='+', help='Reduced scheme sizes')
    train.add_argument('--epochs', type=positive_int, help='Epochs to run')
    train.add_argument('--batch-size', type=positive_int, help='Voxels per mini-batch')
    train.add_argument('--lr', type=non_negative_float, help='Learning rate')
    train.add_argument('--patience', type=positive_int, help='Early stopping patience in epochs')
    train.add_argument('--optimizer', choices=OPTIMIZERS, help='Optimizer')
    train.add_argument('--no-permute', action='store_true', help='Disable direction order augmentation')
    train.add_argument('--zero-init-last', action='store_true', help='Zero initialize the last decoder layer')
    train.add_argument('--resume', action='store_true', help='Continue from the stored checkpoint')
    train.set_defaults(handler=cmd_train)

    reconstruct = commands.add_parser('reconstruct', parents=[common], help='Reconstruct full signals of a split')
    reconstruct.add_argument('--method', required=True, choices=METHODS + tuple(METHOD_ALIASES),
                             help='l2 (ridge), cs or l1 (FISTA) or cnn')
    reconstruct.add_argument('--k-low', type=positive_int, nargs='+', help='Reduced scheme sizes')
    reconstruct.add_argument('--lambda', type=non_negative_float, dest='lam',
                             help='Regularization weight; omitted means cross-validation')
    reconstruct.add_argument('--max-iters', type=positive_int, help='FISTA iteration limit')
    reconstruct.add_argument('--tol', type=non_negative_float, help='FISTA relative objective tolerance')
    reconstruct.add_argument('--tta-perms', type=int, help='Test time permutations averaged by the network')
    reconstruct.add_argument('--split', choices=SPLITS, default='test', help='Split to reconstruct')
    reconstruct.set_defaults(handler=cmd_reconstruct)

    evaluate = commands.add_parser('evaluate', parents=[common], help='Write the metrics report and ODF files')
    evaluate.add_argument('--methods', nargs='+', choices=METHODS + tuple(METHOD_ALIASES), help='Compared methods')
    evaluate.add_argument('--k-low', type=positive_int, nargs='+', help='Reduced scheme sizes')
    evaluate.add_argument('--no-per-voxel', action='store_true', help='Skip the per-voxel NMSE files')
    evaluate.add_argument('--odf-voxels', type=int, help='Voxels whose ODF coefficients are exported')
    evaluate.add_argument('--timings', action='store_true', help='Write wall-clock seconds into the metrics CSV')
    evaluate.set_defaults(handler=cmd_evaluate)

    selftest = commands.add_parser('selftest', parents=[common], help='Run every numeric self-check')
    selftest.add_argument('--inject-fault', choices=FAULT_OPS, help=argparse.SUPPRESS)
    selftest.set_defaults(handler=cmd_selftest, gradients_only=False)

    # Not listed in the help
    selftest_grad = commands.add_parser('selftest-grad', parents=[common])
    selftest_grad.add_argument('--inject-fault', choices=FAULT_OPS, help=argparse.SUPPRESS)
    selftest_grad.set_defaults(handler=cmd_selftest, gradients_only=True)

    return parser


def cmd_synth(app, args):
    return app.synthesize(args.n_train, args.n_test, args.k_high, args.bvalue, args.sigma)


def cmd_train(app, args):
    return app.train(args.k_low, args.epochs, args.resume,
                     batch_size=args.batch_size, lr=args.lr, patience=args.patience, optimizer=args.optimizer,
                     permute=False if args.no_permute else None,
                     zero_init_last=True if args.zero_init_last else None)


def cmd_reconstruct(app, args):
    return app.reconstruct(args.method, args.k_low, args.lam, args.split, args.tta_perms, args.max_iters, args.tol)


def cmd_evaluate(app, args):
    return app.evaluate(args.methods, args.k_low, not args.no_per_voxel, args.odf_voxels,
                        False if args.timings else None)


def cmd_selftest(app, args):
    return app.selftest(args.gradients_only, args.inject_fault)


def main(argv=None):
    """Runs one command.

    Returns:
        process exit code.
    """

    try:
        args = build_parser().parse_args(argv)
        app = HardiRecon(out_dir=getattr(args, 'out', None) or experiment_config.get('out_dir'),
                         threads=getattr(args, 'threads', None),
                         precision=getattr(args, 'precision', None),
                         seed=getattr(args, 'seed', None),
                         verbose=not getattr(args, 'quiet', False))
        args.handler(app, args)
    except HardiReconError as error:
        Log.error('%s: %s' % (type(error).__name__, error))
        return error.exit_code
    finally:
        Log.disable()
    return 0
