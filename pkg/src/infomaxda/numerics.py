"""Dense feed-forward nets with analytic gradients, plus the stable primitives
(softmax, log-sum-exp) and the seeded generator used everywhere else.

Tensors are plain ``float64`` numpy arrays of shape ``(rows, cols)``.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "elu", "relu", "identity")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class NumericalError(ArithmeticError):
    """A NaN/Inf showed up where a finite value is required."""


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (1-D input becomes a single row)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")


class Rng:
    """SplitMix64 stream with Box-Muller normals.

    The generator is counter based: the k-th output mixes ``seed + k * gamma``
    (mod 2**64), so bulk draws vectorise without changing the sequence.
    Uniforms take the top 53 bits of each output. Normals consume uniforms in
    pairs ``(u1, u2)`` and emit ``r cos(2 pi u2), r sin(2 pi u2)`` with
    ``r = sqrt(-2 ln(1 - u1))``; an odd request discards the last sine.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, count: int) -> np.ndarray:
        count = int(count)
        if count < 0:
            raise ValueError("count must be non-negative")
        steps = np.arange(1, count + 1, dtype=np.uint64) * _GAMMA
        z = steps + np.uint64(self.state)
        self.state = (self.state + count * int(_GAMMA)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, count: int) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, count: int) -> np.ndarray:
        pairs = (int(count) + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top index down."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def fork(self) -> "Rng":
        """Independent child stream seeded from the next output."""
        return Rng(int(self.next_u64(1)[0]))


def softmax(logits) -> np.ndarray:
    logits = as_tensor(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    check_finite(v, "values")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "elu":
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    # derivative w.r.t. pre-activation a, given h = act(a)
    if name == "tanh":
        return 1.0 - h * h
    if name == "elu":
        return np.where(a > 0, 1.0, h + 1.0)
    if name == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


class Net:
    """Dense feed-forward network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Hidden layers use ``activation`` (a single name or one per hidden layer);
    the output layer is linear. Weights are Glorot-uniform from ``rng``,
    biases start at zero. ``weights[k]`` has shape
    ``(layer_sizes[k], layer_sizes[k + 1])``.
    """

    def __init__(self, layer_sizes: Sequence[int], activation="tanh", rng: Rng | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes!r}")
        n_hidden = len(sizes) - 2
        if isinstance(activation, str):
            acts = [activation] * n_hidden
        else:
            acts = list(activation)
            if len(acts) != n_hidden:
                raise ValueError("need one activation per hidden layer")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_sizes = sizes
        self.activations = acts
        rng = rng if rng is not None else Rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = (2.0 * rng.uniform(fan_in * fan_out) - 1.0) * bound
            self.weights.append(w.reshape(fan_in, fan_out))
            self.biases.append(np.zeros(fan_out))
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self._velocity = None
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.grad_w, self.grad_b):
            out += [gw, gb]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def copy(self) -> "Net":
        clone = Net.__new__(Net)
        clone.layer_sizes = list(self.layer_sizes)
        clone.activations = list(self.activations)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.grad_w = [g.copy() for g in self.grad_w]
        clone.grad_b = [g.copy() for g in self.grad_b]
        clone._velocity = None if self._velocity is None else [v.copy() for v in self._velocity]
        clone._cache = None
        return clone

    def track_average(self, source: "Net", decay: float) -> None:
        """Move these parameters toward ``source``: ``p <- decay * p + (1 - decay) * p_source``."""
        if source.layer_sizes != self.layer_sizes:
            raise ValueError("architectures differ")
        for mine, theirs in zip(self.parameters(), source.parameters()):
            mine *= decay
            mine += (1.0 - decay) * theirs

    def forward(self, x, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input with {self.layer_sizes[0]} columns, got shape {x.shape}")
        check_finite(x, "net input")
        inputs, pre = [], []
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w + b
            pre.append(a)
            h = a if k == last else _act(self.activations[k], a)
        if cache:
            self._cache = (inputs, pre, h)
        return h

    __call__ = forward

    def backward(self, output_grad, accumulate: bool = True) -> np.ndarray:
        """Backpropagate ``output_grad`` through the last forward pass.

        Adds parameter gradients into the accumulators (unless ``accumulate``
        is false) and returns the gradient w.r.t. the input.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward")
        inputs, pre, out = self._cache
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != out.shape:
            raise ValueError(f"output_grad shape {g.shape} != forward output shape {out.shape}")
        last = self.n_layers - 1
        for k in range(last, -1, -1):
            if k != last:
                h = inputs[k + 1]
                g = g * _act_grad(self.activations[k], pre[k], h)
            if accumulate:
                self.grad_w[k] += inputs[k].T @ g
                self.grad_b[k] += g.sum(axis=0)
            g = g @ self.weights[k].T
        return g

    def zero_grad(self) -> None:
        for g in self.gradients():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.gradients()))

    def sgd_step(self, lr: float, momentum: float = 0.0) -> None:
        """``p <- p - lr * grad`` (heavy-ball when ``momentum > 0``), then zero grads."""
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        for k, (gw, gb) in enumerate(zip(self.grad_w, self.grad_b)):
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NumericalError(f"non-finite gradient in layer {k}")
        if momentum:
            if self._velocity is None:
                self._velocity = [np.zeros_like(p) for p in self.parameters()]
            for p, g, v in zip(self.parameters(), self.gradients(), self._velocity):
                v *= momentum
                v += g
                p -= lr * v
        else:
            for p, g in zip(self.parameters(), self.gradients()):
                p -= lr * g
        self.zero_grad()


def clip_grad_norm(nets: Sequence[Net], max_norm: float) -> float:
    """Scale the combined gradient of ``nets`` to global norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(n.grad_norm() ** 2 for n in nets))
    if total > max_norm > 0:
        scale = max_norm / total
        for n in nets:
            for g in n.gradients():
                g *= scale
    return total
