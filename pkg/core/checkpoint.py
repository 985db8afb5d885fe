"""
Versioned binary policy checkpoints.

Layout::

    b'MCAPCKPT'  | uint16 version | uint32 header length | header (UTF-8 JSON)
    | float64 little-endian tensor payload, in header order

The header is canonical JSON (sorted keys, no whitespace) and floats that
must survive exactly are stored with ``float.hex``, so save -> load -> save
reproduces the file byte for byte.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from core.networks import AdamOptimizer, MlpParams
from core.replay_buffer import ReplayBuffer
from utils.errors import ArtifactIOError, IncompatibleCheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'MCAPCKPT'
FORMAT_VERSION = 1
NETWORK_NAMES = ('actor', 'critic1', 'critic2', 'target1', 'target2')
OPTIMIZER_NAMES = ('actor', 'critic1', 'critic2', 'alpha')


@dataclass
class PolicyCheckpoint:
    actor: MlpParams
    critic1: MlpParams
    critic2: MlpParams
    target1: MlpParams
    target2: MlpParams
    log_alpha: float
    optimizers: Dict[str, AdamOptimizer]
    fingerprint: str
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    def network(self, name: str) -> MlpParams:
        return getattr(self, name)

    def require_fingerprint(self, expected: str) -> None:
        if self.fingerprint != expected:
            raise IncompatibleCheckpointError(expected, self.fingerprint)


def _tensor_table(checkpoint: PolicyCheckpoint) -> List[Tuple[str, np.ndarray]]:
    table = []
    for name in NETWORK_NAMES:
        for index, tensor in enumerate(checkpoint.network(name).tensors()):
            table.append((f"{name}.{index}", tensor))
    for name in OPTIMIZER_NAMES:
        optimizer = checkpoint.optimizers[name]
        for index, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            table.append((f"optim.{name}.m{index}", m))
            table.append((f"optim.{name}.v{index}", v))
    return table


def _optimizer_header(optimizer: AdamOptimizer) -> Dict[str, Any]:
    return {'lr': float(optimizer.lr).hex(), 'beta1': float(optimizer.beta1).hex(),
            'beta2': float(optimizer.beta2).hex(), 'eps': float(optimizer.eps).hex(), 't': int(optimizer.t),
            'n': len(optimizer.m)}


def to_bytes(checkpoint: PolicyCheckpoint) -> bytes:
    table = _tensor_table(checkpoint)
    header = {
        'version': checkpoint.version,
        'fingerprint': checkpoint.fingerprint,
        'step': int(checkpoint.step),
        'log_alpha': float(checkpoint.log_alpha).hex(),
        'config': checkpoint.config,
        'networks': {name: {'sizes': checkpoint.network(name).sizes,
                            'activation': checkpoint.network(name).activation} for name in NETWORK_NAMES},
        'optimizers': {name: _optimizer_header(checkpoint.optimizers[name]) for name in OPTIMIZER_NAMES},
        'tensors': [[name, list(tensor.shape)] for name, tensor in table],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(tensor, dtype='<f8').tobytes() for _, tensor in table)
    return MAGIC + struct.pack('<HI', FORMAT_VERSION, len(header_bytes)) + header_bytes + payload


def from_bytes(data: bytes) -> PolicyCheckpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("Not a policy checkpoint (bad magic)")
    offset = len(MAGIC)
    version, header_length = struct.unpack_from('<HI', data, offset)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"format v{FORMAT_VERSION}", f"format v{version}")
    offset += struct.calcsize('<HI')
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    offset += header_length

    arrays: Dict[str, np.ndarray] = {}
    for name, shape in header['tensors']:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(float).reshape(shape)
        offset += 8 * count

    networks = {}
    for name in NETWORK_NAMES:
        spec = header['networks'][name]
        layers = len(spec['sizes']) - 1
        networks[name] = MlpParams(
            list(spec['sizes']),
            [arrays[f"{name}.{2 * layer}"] for layer in range(layers)],
            [arrays[f"{name}.{2 * layer + 1}"] for layer in range(layers)],
            spec['activation'],
        )

    optimizers = {}
    for name in OPTIMIZER_NAMES:
        spec = header['optimizers'][name]
        optimizers[name] = AdamOptimizer(
            lr=float.fromhex(spec['lr']), beta1=float.fromhex(spec['beta1']), beta2=float.fromhex(spec['beta2']),
            eps=float.fromhex(spec['eps']), t=int(spec['t']),
            m=[arrays[f"optim.{name}.m{index}"] for index in range(spec['n'])],
            v=[arrays[f"optim.{name}.v{index}"] for index in range(spec['n'])],
        )

    return PolicyCheckpoint(
        actor=networks['actor'], critic1=networks['critic1'], critic2=networks['critic2'],
        target1=networks['target1'], target2=networks['target2'],
        log_alpha=float.fromhex(header['log_alpha']), optimizers=optimizers,
        fingerprint=header['fingerprint'], step=int(header['step']), config=header['config'],
        version=int(header['version']),
    )


def save_checkpoint(checkpoint: PolicyCheckpoint, path: Union[str, Path]) -> Path:
    """Written to a sibling ``.partial`` file and renamed into place."""
    path = Path(path)
    partial = path.with_name(path.name + '.partial')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        partial.write_bytes(to_bytes(checkpoint))
        os.replace(partial, path)
    except OSError as error:
        partial.unlink(missing_ok=True)
        raise ArtifactIOError(path, str(error))
    logger.info(f"Checkpoint saved to {path} (step {checkpoint.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> PolicyCheckpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as error:
        raise ArtifactIOError(path, str(error))
    try:
        return from_bytes(data)
    except (ValueError, KeyError, struct.error) as error:
        raise ArtifactIOError(path, f"corrupt checkpoint: {error}")


def save_buffer(buffer: ReplayBuffer, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as handle:
            np.savez(handle, **buffer.state_dict())
    except OSError as error:
        raise ArtifactIOError(path, str(error))
    return path


def load_buffer(path: Union[str, Path]) -> ReplayBuffer:
    path = Path(path)
    try:
        with np.load(path) as data:
            return ReplayBuffer.from_state_dict({key: data[key] for key in data.files})
    except OSError as error:
        raise ArtifactIOError(path, str(error))
