"""
Tracking benchmark orchestration.

Builds controller factories from the configuration (and a checkpoint for the
learned and fixed-current controllers), runs the comparison and persists the
per-trial reports, step series and consolidated tables.
"""

import asyncio
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from config.settings import Settings
from core.checkpoint import PolicyCheckpoint, load_checkpoint
from core.controllers import (Controller, DrlController, PidAllocationController, ZeroController, collect_hold_samples,
                              fcc_control, hold_current_sem)
from core.physics import CurrentCommand
from core.tracking import (ComparisonResult, grid_search_pid_gains, render_comparison_table, render_trial_table,
                           run_comparison)
from services.file_service import file_service
from services.manifest_service import RunManifest, manifest_service, utc_timestamp
from services.training_service import platform_seed
from utils.errors import EXIT_FAILURE, ContractViolationError, MagCapsuleError
from utils.seeding import derive_seed, trial_seeds

CONTROLLERS = ('fcc', 'pid', 'drl', 'zero')
PATHS = ('square', 'circle', 'longpath')
NEEDS_CHECKPOINT = ('fcc', 'drl')
SUPERVISED_PATHS = ('longpath',)
PLATFORMS = ('sim', 'real')


class _FailedFactory:
    """Controller factory that re-raises a setup error inside every trial."""

    def __init__(self, error: MagCapsuleError):
        self.error = error

    def __call__(self) -> Controller:
        raise self.error


class EvaluationService:
    """Runs controller comparisons and writes their artifacts."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def env_factory(self, settings: Settings, platform: str = 'sim') -> Callable:
        if platform == 'real':
            seed = platform_seed(settings)
            return lambda: settings.make_real_env(seed=seed)
        return lambda: settings.make_nominal_env()

    def hold_currents(self, settings: Settings, checkpoint: PolicyCheckpoint) -> Dict[str, Any]:
        """Average and standard error of the learned policy's hold currents on the nominal simulator."""
        policy = DrlController(checkpoint, settings.coils.i_max, settings.env.scales, settings.sac)
        samples = collect_hold_samples(policy, settings.make_nominal_env(), settings.hold_steps,
                                       seed=derive_seed(settings.seed, 'hold'))
        mean = samples.mean(axis=0)
        return {'currents': mean, 'sem': hold_current_sem(samples), 'samples': int(samples.shape[0])}

    def controller_factories(self, settings: Settings, names: Sequence[str],
                             checkpoint: Optional[PolicyCheckpoint] = None,
                             hold: Optional[Dict[str, Any]] = None) -> Dict[str, Callable[[], Controller]]:
        i_max, scales = settings.coils.i_max, settings.env.scales
        factories: Dict[str, Callable[[], Controller]] = {}
        for name in names:
            if name in NEEDS_CHECKPOINT and checkpoint is None:
                raise ContractViolationError(f"Controller '{name}' needs a policy checkpoint (--checkpoint)")
            if name == 'pid':
                factories[name] = lambda: PidAllocationController(settings.pid, settings.coils, settings.magnet,
                                                                  settings.allocation_regularization)
            elif name == 'drl':
                factories[name] = lambda: DrlController(checkpoint, i_max, scales, settings.sac)
            elif name == 'fcc':
                if isinstance(hold, MagCapsuleError):
                    factories[name] = _FailedFactory(hold)
                else:
                    command = CurrentCommand(hold['currents'])
                    factories[name] = lambda: fcc_control(command)
            elif name == 'zero':
                factories[name] = ZeroController
            else:
                raise ContractViolationError(f"Unknown controller '{name}', expected one of {CONTROLLERS}")
        return factories

    def _compare(self, settings: Settings, factories: Dict[str, Callable[[], Controller]], paths: Sequence[str],
                 trials: int, jobs: int, platform: str) -> ComparisonResult:
        specs = [settings.trajectory(name) for name in paths]
        return run_comparison(factories, specs, self.env_factory(settings, platform), n_trials=trials,
                              seeds=trial_seeds(settings.seed, trials), jobs=jobs,
                              durations={name: settings.duration(name) for name in paths},
                              supervisors={name: settings.supervisor for name in paths if name in SUPERVISED_PATHS})

    async def evaluate(self, settings: Settings, out_dir: Union[str, Path], controllers: Sequence[str],
                       paths: Sequence[str], trials: Optional[int] = None,
                       checkpoint_path: Optional[Union[str, Path]] = None, jobs: int = 1,
                       platform: str = 'sim') -> Dict[str, Any]:
        """
        Compare controllers on reference paths.

        Args:
            settings: Validated configuration.
            out_dir: Directory receiving reports/, series/, comparison.txt and the manifest.
            controllers: Any of fcc, pid, drl, zero.
            paths: Any of square, circle, longpath.
            trials: Trials per controller and path; defaults to ``tracking.trials``.
            checkpoint_path: Policy used by drl and, through its hold currents, by fcc.
            jobs: Trials run concurrently.
            platform: ``sim`` for the nominal simulator, ``real`` for the stand-in platform.

        Returns:
            Dictionary with success status, the rendered table and report count.
            Individual trial failures only show in the table; the call fails
            when every trial failed.
        """
        out_dir = Path(out_dir)
        trials = trials or settings.trials
        manifest = RunManifest('eval', settings.snapshot(), seeds=trial_seeds(settings.seed, trials))
        manifest.timestamps['started'] = utc_timestamp()
        manifest.metadata.update({'controllers': list(controllers), 'paths': list(paths), 'platform': platform,
                                  'checkpoint': str(checkpoint_path) if checkpoint_path else None})
        try:
            if platform not in PLATFORMS:
                raise ContractViolationError(f"Unknown platform '{platform}', expected one of {PLATFORMS}")
            for name in paths:
                if name not in PATHS:
                    raise ContractViolationError(f"Unknown path '{name}', expected one of {PATHS}")
            checkpoint = None
            if checkpoint_path is not None:
                checkpoint = await asyncio.to_thread(load_checkpoint, checkpoint_path)
                checkpoint.require_fingerprint(settings.fingerprint)
            hold = None
            if 'fcc' in controllers and checkpoint is not None:
                try:
                    hold = await asyncio.to_thread(self.hold_currents, settings, checkpoint)
                except MagCapsuleError as error:
                    self.logger.warning(f"Fixed-current controller unavailable: {error}")
                    hold = error
            factories = self.controller_factories(settings, controllers, checkpoint, hold)
            result = await asyncio.to_thread(self._compare, settings, factories, paths, trials, jobs, platform)
        except MagCapsuleError as error:
            self.logger.error(f"Evaluation failed: {error}")
            return {'success': False, 'error': str(error), 'exit_code': error.exit_code}

        written = await self._write_artifacts(out_dir, result, manifest, trials, paths, hold)
        if not written['success']:
            return written
        manifest.timestamps['finished'] = utc_timestamp()
        saved = await manifest_service.write_manifest(manifest, out_dir)
        if not saved['success']:
            return saved

        failed = sum(report.failed for report in result.reports)
        self.logger.info(f"Evaluation finished: {len(result.reports)} trials, {failed} failed")
        response = {'success': not result.total_failure, 'table': written['table'],
                    'reports': len(result.reports), 'failed': failed, 'manifest': saved['path']}
        if result.total_failure:
            response.update({'error': 'every trial failed', 'exit_code': EXIT_FAILURE})
        return response

    async def _write_artifacts(self, out_dir: Path, result: ComparisonResult, manifest: RunManifest, trials: int,
                               paths: Sequence[str], hold: Any) -> Dict[str, Any]:
        for report in result.reports:
            stem = f"{report.controller}_{report.trajectory}_{report.seed}"
            written = await file_service.write_json(out_dir / 'reports' / f"{stem}.json", report.summary())
            if not written['success']:
                return written
            manifest.add_artifact(f"reports/{stem}", written['path'], out_dir)
            written = await file_service.write_csv(out_dir / 'series' / f"{stem}.csv", report.series_frame())
            if not written['success']:
                return written
            manifest.add_artifact(f"series/{stem}", written['path'], out_dir)

        table = render_comparison_table(result.rows, trials)
        written = await file_service.write_text(out_dir / 'comparison.txt', table)
        if not written['success']:
            return written
        manifest.add_artifact('comparison', written['path'], out_dir)

        if 'longpath' in paths:
            controllers = list(dict.fromkeys(report.controller for report in result.reports))
            blocks: List[str] = []
            for name in controllers:
                reports = [r for r in result.reports if r.controller == name and r.trajectory == 'longpath']
                blocks.append(f"{name.upper()} on longpath\n{render_trial_table(reports)}")
            written = await file_service.write_text(out_dir / 'longpath_trials.txt', '\n'.join(blocks))
            if not written['success']:
                return written
            manifest.add_artifact('longpath_trials', written['path'], out_dir)

        if isinstance(hold, dict):
            written = await file_service.write_json(out_dir / 'hold_currents.json', hold)
            if not written['success']:
                return written
            manifest.add_artifact('hold_currents', written['path'], out_dir)
        return {'success': True, 'table': table}

    async def tune_pid(self, settings: Settings, out_dir: Union[str, Path], path: str, kp_values: Sequence[float],
                       kd_values: Sequence[float], ki: Optional[float] = None) -> Dict[str, Any]:
        """Grid search of isotropic PID gains on one path; writes pid_grid.csv."""
        out_dir = Path(out_dir)
        ki = settings.pid.ki[0] if ki is None else ki
        try:
            spec = settings.trajectory(path)
            best, rows = await asyncio.to_thread(grid_search_pid_gains, self.env_factory(settings), spec,
                                                 kp_values, kd_values, ki, settings.pid, settings.seed)
        except MagCapsuleError as error:
            self.logger.error(f"PID grid search failed: {error}")
            return {'success': False, 'error': str(error), 'exit_code': error.exit_code}
        written = await file_service.write_csv(out_dir / 'pid_grid.csv', rows, ['kp', 'kd', 'ki', 'dist_rmse'])
        if not written['success']:
            return written
        written['best'] = {'kp': best.kp[0], 'ki': best.ki[0], 'kd': best.kd[0]}
        return written


# Export singleton instance
evaluation_service = EvaluationService()
