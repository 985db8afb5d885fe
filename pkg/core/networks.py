"""
Dense multilayer perceptrons with explicit backpropagation, plus Adam.

Layers compute z = x W^T + b on row-major batches; hidden layers use tanh and
the output layer is linear.  The forward pass returns a cache holding every
layer input and pre-activation, and ``backward`` consumes it.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ('tanh',)


@dataclass
class MlpParams:
    """Layer sizes, weights (out, in) and biases of one network."""

    sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = 'tanh'

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unsupported activation '{self.activation}'")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise ValueError("Number of layers does not match sizes")
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.sizes[index + 1], self.sizes[index])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"Layer {index} has shapes {w.shape}/{b.shape}, expected {expected}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 1.0) -> 'MlpParams':
        """Xavier-uniform weights, zero biases; the last layer is scaled by ``output_scale``."""
        sizes = [int(size) for size in sizes]
        weights, biases = [], []
        for index in range(len(sizes) - 1):
            fan_in, fan_out = sizes[index], sizes[index + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, (fan_out, fan_in))
            if index == len(sizes) - 2:
                w = w * output_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases)

    def tensors(self) -> List[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> 'MlpParams':
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def assign_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for tensor in self.tensors():
            tensor[...] = flat[offset:offset + tensor.size].reshape(tensor.shape)
            offset += tensor.size

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Batch forward pass; ``x`` is (N, in)."""
    cache = ForwardCache()
    a = np.atleast_2d(np.asarray(x, dtype=float))
    last = len(params.weights) - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre_activations.append(z)
        a = z if index == last else np.tanh(z)
    return a, cache


def backward(params: MlpParams, cache: ForwardCache, d_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Backpropagate ``d_out`` = dL/d(output), shape (N, out).

    Returns:
        Gradients in ``params.tensors()`` order and dL/d(input).
    """
    grads_w: List[Optional[np.ndarray]] = [None] * len(params.weights)
    grads_b: List[Optional[np.ndarray]] = [None] * len(params.weights)
    delta = np.asarray(d_out, dtype=float)
    last = len(params.weights) - 1
    for index in range(last, -1, -1):
        if index != last:
            delta = delta * (1.0 - np.tanh(cache.pre_activations[index]) ** 2)
        grads_w[index] = delta.T @ cache.inputs[index]
        grads_b[index] = delta.sum(axis=0)
        delta = delta @ params.weights[index]
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.extend([gw, gb])
    return grads, delta


@dataclass
class AdamOptimizer:
    """Adam moments for a list of tensors updated in place."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_tensors(cls, tensors: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> 'AdamOptimizer':
        return cls(lr, beta1, beta2, eps, 0, [np.zeros_like(t) for t in tensors],
                   [np.zeros_like(t) for t in tensors])

    def step(self, tensors: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for tensor, grad, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            tensor -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def polyak_update(targets: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    """
    Blend online parameters into the targets: rho * online + (1 - rho) * target.

    Returns a new MlpParams; the inputs are left untouched.
    """
    if targets.sizes != online.sizes:
        raise ValueError(f"Shape mismatch between target {targets.sizes} and online {online.sizes}")
    blended = targets.copy()
    for target, source in zip(blended.tensors(), online.tensors()):
        target[...] = rho * source + (1.0 - rho) * target
    return blended
