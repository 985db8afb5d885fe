import sys
import os
import logging
import asyncio
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from utils.errors import EXIT_FAILURE, EXIT_INTERRUPTED, EXIT_OK, MagCapsuleError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = 'magcapsule.log'
OUTPUT_ROOT_VAR = 'MAGCAPSULE_OUTPUT_ROOT'

logger = logging.getLogger(__name__)

# Load environment variables from .env file
load_dotenv()


def configure_logging(out_dir: Path, debug: bool = False) -> None:
    """Console plus a log file inside the run's output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(out_dir / LOG_FILE, encoding='utf-8')
        ],
        force=True,
    )
    if debug:
        logger.debug("Debug logging enabled")


def resolve_out_dir(out: Optional[str], command: str) -> Path:
    """Relative output paths live under $MAGCAPSULE_OUTPUT_ROOT when it is set."""
    path = Path(out or Path('runs') / command)
    root = os.getenv(OUTPUT_ROOT_VAR)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _csv_list(value: str) -> List[str]:
    items = [item.strip() for item in value.split(',') if item.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _float_list(value: str) -> List[float]:
    try:
        return [float(item) for item in _csv_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='magcapsule',
                                     description='Magnetic capsule control: SAC training, sim-to-real '
                                                 'fine-tuning and tracking benchmarks')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='YAML file merged over the defaults')
    common.add_argument('--seed', type=int, help='Root seed (overrides the config)')
    common.add_argument('--out', type=str, help='Output directory (default runs/<command>)')
    common.add_argument('--jobs', type=int, default=1, help='Concurrent evaluation trials')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', parents=[common], help='Train a policy on the randomized simulator')
    train.add_argument('--steps', type=int, help='Environment steps (default sac.total_steps)')
    train.add_argument('--no-buffer', action='store_true', help='Do not save the replay buffer')

    finetune = commands.add_parser('finetune', parents=[common], help='Fine-tune a checkpoint on the stand-in platform')
    finetune.add_argument('--checkpoint', type=str, required=True, help='Checkpoint from a training run')
    finetune.add_argument('--steps', type=int, help='Environment steps (default sac.finetune_steps)')
    finetune.add_argument('--buffer', type=str, help='Replay buffer to retain (needs sac.retain_buffer)')
    finetune.add_argument('--trials', type=int, help='Trials of the before/after square evaluation')

    evaluate = commands.add_parser('eval', parents=[common], help='Compare controllers on reference paths')
    evaluate.add_argument('--checkpoint', type=str, help='Policy for the drl and fcc controllers')
    evaluate.add_argument('--controllers', type=_csv_list, default=['fcc', 'pid', 'drl'],
                          help='Comma-separated subset of fcc,pid,drl,zero')
    evaluate.add_argument('--paths', type=_csv_list, default=['square', 'circle'],
                          help='Comma-separated subset of square,circle,longpath')
    evaluate.add_argument('--trials', type=int, help='Trials per controller and path (default tracking.trials)')
    evaluate.add_argument('--platform', choices=['sim', 'real'], default='sim',
                          help='Nominal simulator or the stand-in platform')

    tune = commands.add_parser('tune-pid', parents=[common], help='Grid search of the PID gains')
    tune.add_argument('--kp', type=_float_list, required=True, help='Comma-separated proportional gains')
    tune.add_argument('--kd', type=_float_list, required=True, help='Comma-separated derivative gains')
    tune.add_argument('--ki', type=float, help='Integral gain (default from the config)')
    tune.add_argument('--path', choices=['square', 'circle', 'longpath'], default='square')

    field_map = commands.add_parser('field-map', parents=[common], help='Export B and |grad B| on a grid')
    field_map.add_argument('--x-range', type=float, nargs=2, default=[-0.04, 0.04], metavar=('MIN', 'MAX'))
    field_map.add_argument('--y-range', type=float, nargs=2, default=[-0.04, 0.04], metavar=('MIN', 'MAX'))
    field_map.add_argument('--nx', type=int, default=41)
    field_map.add_argument('--ny', type=int, default=41)
    field_map.add_argument('--currents', type=float, nargs=4, metavar='I',
                           help='Coil currents in amperes (default 1 A each)')
    field_map.add_argument('--csv', type=str, default='field_map.csv', help='File name inside the output directory')
    return parser


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    return build_parser().parse_args(argv)


async def run_command(args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """
    Load the configuration and dispatch one subcommand.

    Returns:
        Service result dictionary ({'success': bool, ...}).
    """
    from config.settings import load_settings

    overrides = {'seed': args.seed} if args.seed is not None else None
    settings = load_settings(args.config, overrides)

    if args.command == 'train':
        from services.training_service import training_service
        return await training_service.train(settings, out_dir, args.steps, save_replay_buffer=not args.no_buffer)
    if args.command == 'finetune':
        from services.training_service import training_service
        return await training_service.finetune(settings, args.checkpoint, out_dir, args.steps, args.buffer,
                                               args.trials, args.jobs)
    if args.command == 'eval':
        from services.evaluation_service import evaluation_service
        return await evaluation_service.evaluate(settings, out_dir, args.controllers, args.paths, args.trials,
                                                 args.checkpoint, args.jobs, args.platform)
    if args.command == 'tune-pid':
        from services.evaluation_service import evaluation_service
        return await evaluation_service.tune_pid(settings, out_dir, args.path, args.kp, args.kd, args.ki)
    if args.command == 'field-map':
        from services.field_map_service import field_map_service
        return await field_map_service.export(settings.coils, out_dir / args.csv, tuple(args.x_range),
                                              tuple(args.y_range), args.nx, args.ny, args.currents)
    return {'success': False, 'error': f"Unknown command {args.command}", 'exit_code': EXIT_FAILURE}


def report(args: argparse.Namespace, result: Dict[str, Any]) -> None:
    """Print the user-facing summary of a finished command."""
    if not result.get('success'):
        print(f"\n{args.command} failed: {result.get('error', 'Unknown error')}")
        return
    print(f"\n{args.command} completed successfully!")
    if 'table' in result:
        print(f"\n{result['table']}")
    if 'checkpoint' in result:
        print(f"Checkpoint: {result['checkpoint']}")
    if 'report' in result:
        summary = result['report']
        for label in ('nominal', 'zero_shot', 'after'):
            rmse = summary[label].get('dist_rmse')
            print(f"  {label:<10} square RMSE: {'n/a' if rmse is None else f'{rmse * 1e3:.2f} mm'}")
    if 'best' in result:
        print(f"Best gains: {result['best']}")
    if 'path' in result:
        print(f"Written: {result['path']}")


async def cli_mode(args: argparse.Namespace, out_dir: Path) -> int:
    """
    Run one subcommand and map its outcome to an exit status.

    Args:
        args: Parsed command line.
        out_dir: Resolved output directory.
    """
    try:
        result = await run_command(args, out_dir)
        report(args, result)
        if result.get('success'):
            return EXIT_OK
        return int(result.get('exit_code', EXIT_FAILURE))
    except KeyboardInterrupt:
        print("\nOperation cancelled by user")
        return EXIT_INTERRUPTED
    except MagCapsuleError as error:
        print(f"\nError: {error}")
        logger.error(str(error))
        return error.exit_code
    except Exception as e:
        print(f"\nAn error occurred: {str(e)}")
        logger.exception("Unhandled exception in CLI mode")
        return EXIT_FAILURE


def setup_asyncio_event_loop():
    """Set up the asyncio event loop for the current platform."""
    if sys.platform == 'win32':
        # On Windows, use the ProactorEventLoop
        loop = asyncio.ProactorEventLoop()
        asyncio.set_event_loop(loop)
    else:
        loop = asyncio.new_event_loop()
        asyncio.set_event_loop(loop)

    return loop


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    args = parse_args(argv)
    out_dir = resolve_out_dir(args.out, args.command)
    configure_logging(out_dir, args.debug)

    loop = setup_asyncio_event_loop()
    try:
        return loop.run_until_complete(cli_mode(args, out_dir))
    except KeyboardInterrupt:
        logger.info("Application terminated by user")
        return EXIT_INTERRUPTED
    finally:
        # Clean up asyncio event loop
        loop.close()


if __name__ == "__main__":
    sys.exit(main())
