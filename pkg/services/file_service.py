import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from utils.errors import EXIT_IO


def to_jsonable(value: Any) -> Any:
    """
    Plain-Python copy of ``value`` suitable for strict JSON.

    numpy scalars and arrays become floats and lists; NaN and infinities
    become null.
    """
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(data: Any) -> str:
    """Sorted keys and fixed indentation, so equal data gives equal bytes."""
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, allow_nan=False) + '\n'


class FileService:
    """Service for writing and reading run artifacts."""

    def __init__(self):
        """Initialize the FileService."""
        self.logger = logging.getLogger(__name__)

    def _failure(self, action: str, path: Union[str, Path], error: Exception) -> Dict[str, Any]:
        self.logger.error(f"Error {action} {path}: {error}")
        return {'success': False, 'error': f"{path}: {error}", 'exit_code': EXIT_IO}

    async def write_text(self, file_path: Union[str, Path], content: str) -> Dict[str, Any]:
        """
        Create or replace a text file.

        Args:
            file_path: Path to the file to write.
            content: Content to write to the file.

        Returns:
            Dictionary with success status and path or error.
        """
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            # newline='' keeps '\n' on every platform
            with open(path, 'w', encoding='utf-8', newline='') as f:
                f.write(content)
            self.logger.debug(f"File written: {path}")
            return {'success': True, 'path': str(path)}
        except OSError as error:
            return self._failure('writing', file_path, error)

    async def read_text(self, file_path: Union[str, Path]) -> Dict[str, Any]:
        try:
            path = Path(file_path)
            with open(path, 'r', encoding='utf-8') as f:
                content = f.read()
            return {'success': True, 'content': content}
        except OSError as error:
            return self._failure('reading', file_path, error)

    async def write_json(self, file_path: Union[str, Path], data: Any) -> Dict[str, Any]:
        """Write ``data`` as canonical JSON."""
        return await self.write_text(file_path, canonical_json(data))

    async def read_json(self, file_path: Union[str, Path]) -> Dict[str, Any]:
        result = await self.read_text(file_path)
        if not result['success']:
            return result
        try:
            return {'success': True, 'data': json.loads(result['content'])}
        except json.JSONDecodeError as error:
            return self._failure('parsing', file_path, error)

    async def write_csv(self, file_path: Union[str, Path], rows: Union[pd.DataFrame, Sequence[Dict[str, Any]]],
                        columns: Optional[List[str]] = None) -> Dict[str, Any]:
        """
        Write a table with a header row.

        Floats are written with their shortest round-trip representation, so
        a rerun with the same seeds reproduces the file exactly.
        """
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
        if columns is not None:
            frame = frame[columns]
        return await self.write_text(file_path, frame.to_csv(index=False, lineterminator='\n'))


# Export singleton instance
file_service = FileService()
