"""Exception hierarchy shared by core, services and the command line."""

from typing import Any, List, Optional, Sequence

# Process exit codes used by main.py
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5
EXIT_INTERRUPTED = 130


class MagCapsuleError(Exception):
    """Base class for every error raised by this package."""

    exit_code = EXIT_FAILURE


class ConfigError(MagCapsuleError):
    """Invalid configuration; carries one diagnostic per offending key."""

    exit_code = EXIT_CONFIG

    def __init__(self, diagnostics: Sequence[str]):
        self.diagnostics: List[str] = list(diagnostics)
        super().__init__("Invalid configuration:\n  " + "\n  ".join(self.diagnostics))


class ArtifactIOError(MagCapsuleError):
    """A file could not be read or written."""

    exit_code = EXIT_IO

    def __init__(self, path: Any, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class SingularityError(MagCapsuleError):
    """Field evaluated closer to a dipole than the configured guard radius."""

    def __init__(self, separation: float, r_min: float):
        self.separation = separation
        self.r_min = r_min
        super().__init__(f"Separation {separation:.3e} m is below the singularity guard {r_min:.3e} m")


class IntegrationDivergedError(MagCapsuleError):
    """The physics integrator produced a non-finite state."""

    exit_code = EXIT_DIVERGED


class TrainingDivergedError(MagCapsuleError):
    """A network output or loss became non-finite during training."""

    exit_code = EXIT_DIVERGED

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (training step {step})"
        super().__init__(message)


class IncompatibleCheckpointError(MagCapsuleError):
    """Checkpoint was produced under a different network configuration."""

    exit_code = EXIT_INCOMPATIBLE

    def __init__(self, expected: str, found: str, detail: str = ""):
        self.expected = expected
        self.found = found
        message = f"Config fingerprint mismatch: expected {expected}, checkpoint has {found}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class AllocationDegenerateError(MagCapsuleError):
    """The current-to-force map is numerically rank deficient."""

    def __init__(self, singular_values: Sequence[float]):
        self.singular_values = [float(s) for s in singular_values]
        super().__init__(f"Allocation map is rank deficient, singular values {self.singular_values}")


class ContractViolationError(MagCapsuleError):
    """A caller broke an operation precondition."""


class EpisodeFinishedError(ContractViolationError):
    """env_step was called on an episode that already terminated."""


class HoldMeasurementError(MagCapsuleError):
    """The policy never stabilized, so no hold currents could be measured."""
