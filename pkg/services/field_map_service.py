import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.physics import CoilArrayConfig, CurrentCommand, N_COILS, field_jacobian, total_field
from services.file_service import file_service
from utils.errors import ContractViolationError, MagCapsuleError

FIELD_MAP_COLUMNS = ['x', 'y', 'Bx', 'By', 'Bz', 'grad_norm']


def field_map(config: CoilArrayConfig, currents: Sequence[float], x_range: Tuple[float, float],
              y_range: Tuple[float, float], nx: int, ny: int) -> pd.DataFrame:
    """
    Field and gradient magnitude on a regular grid in the capsule plane.

    Rows run over x fastest, then y.  ``grad_norm`` is the Frobenius norm of
    the 3x3 field Jacobian.  Raises SingularityError when a grid point comes
    closer to a coil than ``config.r_min``.
    """
    if nx < 1 or ny < 1:
        raise ContractViolationError(f"Grid must have at least one point per axis, got {nx}x{ny}")
    cmd = CurrentCommand(np.asarray(currents, dtype=float))
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    rows = []
    for y in ys:
        for x in xs:
            point = np.array([x, y, 0.0])
            field = total_field(config, cmd, point)
            gradient = field_jacobian(config, cmd, point)
            rows.append((float(x), float(y), *map(float, field), float(np.linalg.norm(gradient))))
    return pd.DataFrame(rows, columns=FIELD_MAP_COLUMNS)


class FieldMapService:
    """Exports field maps of the coil array for inspection."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    async def export(self, config: CoilArrayConfig, out_csv: Union[str, Path], x_range: Tuple[float, float],
                     y_range: Tuple[float, float], nx: int, ny: int,
                     currents: Optional[Sequence[float]] = None) -> Dict[str, Any]:
        """
        Write a field map CSV.

        Args:
            config: Coil array geometry and calibration.
            out_csv: Destination file.
            x_range: Grid extent along x, meters.
            y_range: Grid extent along y, meters.
            nx: Points along x.
            ny: Points along y.
            currents: Coil currents in amperes; unit currents by default.

        Returns:
            Dictionary with success status, path and row count or error.
        """
        currents = np.ones(N_COILS) if currents is None else np.asarray(currents, dtype=float)
        try:
            frame = await asyncio.to_thread(field_map, config, currents, x_range, y_range, nx, ny)
        except MagCapsuleError as error:
            self.logger.error(f"Field map failed: {error}")
            return {'success': False, 'error': str(error), 'exit_code': error.exit_code}
        result = await file_service.write_csv(out_csv, frame)
        if result['success']:
            self.logger.info(f"Field map with {len(frame)} points written to {result['path']}")
            result['rows'] = len(frame)
        return result


# Export singleton instance
field_map_service = FieldMapService()
