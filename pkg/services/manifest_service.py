"""Run manifests: what a command produced, from which configuration and seeds."""

import datetime
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

from services.file_service import file_service
from utils.errors import EXIT_IO

TOOL_NAME = 'magcapsule'
TOOL_VERSION = '1.0.0'
MANIFEST_NAME = 'manifest.json'


def utc_timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """
    Everything needed to trace a run's artifacts back to its inputs.

    Artifact paths are relative to the output directory.  Wall-clock
    timestamps and durations live here and nowhere else, so every other
    artifact is reproducible byte for byte.
    """

    command: str
    config: Dict[str, Any]
    seeds: List[int] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    tool: str = TOOL_NAME
    version: str = TOOL_VERSION
    timestamps: Dict[str, str] = field(default_factory=dict)
    durations: Dict[str, float] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)

    def add_artifact(self, name: str, path: Union[str, Path], out_dir: Union[str, Path]) -> None:
        self.artifacts[name] = Path(path).resolve().relative_to(Path(out_dir).resolve()).as_posix()

    def missing_artifacts(self, out_dir: Union[str, Path]) -> List[str]:
        root = Path(out_dir)
        return sorted(name for name, rel in self.artifacts.items() if not (root / rel).exists())


class ManifestService:
    """Service for writing and reading run manifests."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    async def write_manifest(self, manifest: RunManifest, out_dir: Union[str, Path]) -> Dict[str, Any]:
        """
        Write ``manifest.json`` into ``out_dir``.

        Every referenced artifact must already exist.

        Returns:
            Dictionary with success status and path or error.
        """
        missing = manifest.missing_artifacts(out_dir)
        if missing:
            self.logger.error(f"Manifest references missing artifacts: {missing}")
            return {'success': False, 'error': f"missing artifacts: {', '.join(missing)}", 'exit_code': EXIT_IO}
        manifest.timestamps.setdefault('written', utc_timestamp())
        result = await file_service.write_json(Path(out_dir) / MANIFEST_NAME, manifest.to_dict())
        if result['success']:
            self.logger.info(f"Manifest written to {result['path']}")
        return result

    async def read_manifest(self, out_dir: Union[str, Path]) -> Dict[str, Any]:
        result = await file_service.read_json(Path(out_dir) / MANIFEST_NAME)
        if not result['success']:
            return result
        return {'success': True, 'manifest': RunManifest.from_dict(result['data'])}


# Export singleton instance
manifest_service = ManifestService()
