import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config.settings import Settings
from core.checkpoint import PolicyCheckpoint, load_buffer, load_checkpoint, save_buffer, save_checkpoint
from core.controllers import DrlController
from core.sac import finetune, train
from core.tracking import run_comparison
from services.file_service import file_service
from services.manifest_service import RunManifest, manifest_service, utc_timestamp
from utils.errors import MagCapsuleError
from utils.events import CHECKPOINTED
from utils.seeding import derive_seed, trial_seeds

CURVE_COLUMNS = ['step', 'eval_return', 'alpha', 'critic_loss', 'actor_loss']
CHECKPOINT_NAME = 'checkpoint.mcap'
CURVE_NAME = 'learning_curve.csv'
BUFFER_NAME = 'replay_buffer.npz'
FINETUNE_REPORT_NAME = 'finetune_report.json'


def platform_seed(settings: Settings) -> int:
    """Seed that fixes the stand-in platform's parameter draw for a run."""
    return derive_seed(settings.seed, 'platform')


class TrainingService:
    """Simulator training and fine-tuning with artifact bookkeeping."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def _checkpoint_listener(self, out_dir: Path, saved: List[Path]):
        def on_checkpoint(data: Dict[str, Any]) -> None:
            path = out_dir / 'checkpoints' / f"step_{data['step']:08d}.mcap"
            saved.append(save_checkpoint(data['checkpoint'], path))
        return on_checkpoint

    async def train(self, settings: Settings, out_dir: Union[str, Path], steps: Optional[int] = None,
                    save_replay_buffer: bool = True) -> Dict[str, Any]:
        """
        Train a policy on the randomized simulator.

        Args:
            settings: Validated configuration.
            out_dir: Directory receiving the checkpoint, learning curve and manifest.
            steps: Environment steps; defaults to ``sac.total_steps``.
            save_replay_buffer: Also persist the buffer for a retained-buffer fine-tune.

        Returns:
            Dictionary with success status, artifact paths and the final curve row.
        """
        out_dir = Path(out_dir)
        steps = settings.total_steps if steps is None else int(steps)
        manifest = RunManifest('train', settings.snapshot(), seeds=[settings.seed])
        manifest.timestamps['started'] = utc_timestamp()
        saved: List[Path] = []
        try:
            env = settings.make_env(seed=derive_seed(settings.seed, 'sim', 'env'))
            started = time.perf_counter()
            result = await asyncio.to_thread(train, env, settings.sac, steps,
                                             {CHECKPOINTED: self._checkpoint_listener(out_dir, saved)})
            manifest.durations['training_seconds'] = round(time.perf_counter() - started, 3)

            checkpoint_path = await asyncio.to_thread(save_checkpoint, result.checkpoint, out_dir / CHECKPOINT_NAME)
            manifest.add_artifact('checkpoint', checkpoint_path, out_dir)
            if save_replay_buffer and result.buffer is not None:
                buffer_path = await asyncio.to_thread(save_buffer, result.buffer, out_dir / BUFFER_NAME)
                manifest.add_artifact('replay_buffer', buffer_path, out_dir)
        except MagCapsuleError as error:
            self.logger.error(f"Training failed: {error}")
            return {'success': False, 'error': str(error), 'exit_code': error.exit_code}

        curve = await file_service.write_csv(out_dir / CURVE_NAME, result.curve, CURVE_COLUMNS)
        if not curve['success']:
            return curve
        manifest.add_artifact('learning_curve', curve['path'], out_dir)
        for path in saved:
            manifest.add_artifact(f"checkpoint_{path.stem}", path, out_dir)
        manifest.metadata.update({'steps': steps, 'updates': result.updates, 'episodes': result.episodes,
                                  'fingerprint': settings.fingerprint})
        manifest.timestamps['finished'] = utc_timestamp()
        written = await manifest_service.write_manifest(manifest, out_dir)
        if not written['success']:
            return written

        self.logger.info(f"Training finished: {steps} steps, {result.updates} updates, "
                         f"final eval_return {result.curve[-1]['eval_return']:.3f}")
        return {'success': True, 'checkpoint': str(out_dir / CHECKPOINT_NAME), 'curve': result.curve,
                'updates': result.updates, 'manifest': written['path']}

    async def finetune(self, settings: Settings, checkpoint_path: Union[str, Path], out_dir: Union[str, Path],
                       steps: Optional[int] = None, buffer_path: Optional[Union[str, Path]] = None,
                       trials: Optional[int] = None, jobs: int = 1) -> Dict[str, Any]:
        """
        Fine-tune a checkpoint on the stand-in platform and report before/after tracking.

        The platform is built from ``environment.real`` with a seed derived
        from the root seed, so the zero-shot and fine-tuned evaluations see
        the same perturbed physics as the fine-tuning itself.

        Returns:
            Dictionary with success status, the new checkpoint and the before/after report.
        """
        out_dir = Path(out_dir)
        steps = settings.finetune_steps if steps is None else int(steps)
        trials = trials or settings.trials
        manifest = RunManifest('finetune', settings.snapshot(), seeds=[settings.seed])
        manifest.timestamps['started'] = utc_timestamp()
        manifest.metadata['source_checkpoint'] = str(checkpoint_path)
        saved: List[Path] = []
        try:
            checkpoint = await asyncio.to_thread(load_checkpoint, checkpoint_path)
            checkpoint.require_fingerprint(settings.fingerprint)
            buffer = None
            if buffer_path is not None:
                buffer = await asyncio.to_thread(load_buffer, buffer_path)
            real_env = settings.make_real_env(seed=platform_seed(settings))

            started = time.perf_counter()
            result = await asyncio.to_thread(finetune, checkpoint, real_env, settings.sac, steps, buffer,
                                             {CHECKPOINTED: self._checkpoint_listener(out_dir, saved)})
            manifest.durations['finetune_seconds'] = round(time.perf_counter() - started, 3)

            checkpoint_out = await asyncio.to_thread(save_checkpoint, result.checkpoint, out_dir / CHECKPOINT_NAME)
            manifest.add_artifact('checkpoint', checkpoint_out, out_dir)

            started = time.perf_counter()
            report = await asyncio.to_thread(before_after_report, settings, checkpoint, result.checkpoint,
                                             trials, jobs)
            manifest.durations['evaluation_seconds'] = round(time.perf_counter() - started, 3)
        except MagCapsuleError as error:
            self.logger.error(f"Fine-tuning failed: {error}")
            return {'success': False, 'error': str(error), 'exit_code': error.exit_code}

        report['platform'] = {'kappa_multipliers': real_env.kappa_multipliers,
                              'damping_multipliers': real_env.damping_multipliers,
                              'latency_steps': real_env.randomization.latency_steps}
        report['steps'] = steps
        written = await file_service.write_json(out_dir / FINETUNE_REPORT_NAME, report)
        if not written['success']:
            return written
        manifest.add_artifact('finetune_report', written['path'], out_dir)
        written = await file_service.write_csv(out_dir / CURVE_NAME, result.curve, CURVE_COLUMNS)
        if not written['success']:
            return written
        manifest.add_artifact('learning_curve', written['path'], out_dir)
        for path in saved:
            manifest.add_artifact(f"checkpoint_{path.stem}", path, out_dir)
        manifest.seeds = trial_seeds(settings.seed, trials)
        manifest.metadata.update({'steps': steps, 'updates': result.updates, 'fingerprint': settings.fingerprint,
                                  'platform_seed': platform_seed(settings)})
        manifest.timestamps['finished'] = utc_timestamp()
        written = await manifest_service.write_manifest(manifest, out_dir)
        if not written['success']:
            return written

        self.logger.info(f"Fine-tuning finished: square RMSE nominal {_mm(report['nominal'])}, "
                         f"zero-shot {_mm(report['zero_shot'])}, after {_mm(report['after'])}")
        return {'success': True, 'checkpoint': str(out_dir / CHECKPOINT_NAME), 'report': report,
                'manifest': written['path']}


def _mm(row: Dict[str, Any]) -> str:
    value = row.get('dist_rmse')
    return 'n/a' if value is None else f"{value * 1e3:.2f} mm"


def before_after_report(settings: Settings, before: PolicyCheckpoint, after: PolicyCheckpoint,
                        trials: int, jobs: int = 1) -> Dict[str, Any]:
    """
    Square-path tracking of the policy before and after fine-tuning.

    ``nominal`` is the original policy on the nominal simulator,
    ``zero_shot`` the same policy on the stand-in platform and ``after`` the
    fine-tuned policy on the platform.  Each entry holds the trial-averaged
    metrics.
    """
    spec = settings.trajectory('square')
    seeds = trial_seeds(settings.seed, trials)
    i_max, scales = settings.coils.i_max, settings.env.scales
    seed = platform_seed(settings)
    scenarios = {
        'nominal': (before, lambda: settings.make_nominal_env()),
        'zero_shot': (before, lambda: settings.make_real_env(seed=seed)),
        'after': (after, lambda: settings.make_real_env(seed=seed)),
    }
    report: Dict[str, Any] = {'trajectory': spec.name, 'trials': trials}
    for label, (checkpoint, env_factory) in scenarios.items():
        comparison = run_comparison({label: lambda cp=checkpoint: DrlController(cp, i_max, scales)}, [spec],
                                    env_factory, n_trials=trials, seeds=seeds, jobs=jobs,
                                    durations={spec.name: settings.duration(spec.name)})
        row = comparison.rows[0]
        report[label] = {key: value for key, value in vars(row).items() if key not in ('controller', 'trajectory')}
    nominal, after_rmse = report['nominal']['dist_rmse'], report['after']['dist_rmse']
    report['after_to_nominal'] = (after_rmse / nominal if nominal and after_rmse is not None
                                  and np.isfinite(nominal) else None)
    return report


# Export singleton instance
training_service = TrainingService()
