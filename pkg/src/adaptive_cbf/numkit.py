"""Dense numerics for the learner: a small MLP with hand-written backprop,
diagonal Gaussian action heads and an Adam optimizer.

Vectors and matrices are plain float64 numpy arrays; weights are stored
row-major as (out, in) blocks that are views into one flat parameter buffer,
so an optimizer can update every block with a single array operation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

ACTIVATIONS = ("tanh", "linear")


def as_vec(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected length {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector")
    return v


def as_mat(a, shape: tuple[int, int] | None = None) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"expected shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries in matrix")
    return m


def mlp_param_count(sizes) -> int:
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


@dataclass
class Tape:
    """Activations recorded by :func:`mlp_forward` (inputs and outputs per layer)."""

    inputs: list
    outputs: list
    squeeze: bool
    shapes: tuple


class Mlp:
    """Fully connected network ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``.

    ``params`` may be supplied as a view into a larger flat buffer; the
    network then reads and writes that memory directly.
    """

    def __init__(self, sizes, activations=None, params: np.ndarray | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["linear"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError("need one activation tag per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = activations
        n = mlp_param_count(sizes)
        if params is None:
            params = np.zeros(n)
        if params.shape != (n,):
            raise ValueError(f"parameter buffer has shape {params.shape}, need ({n},)")
        self.params = params
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(params[off : off + fan_in * fan_out].reshape(fan_out, fan_in))
            off += fan_in * fan_out
            self.biases.append(params[off : off + fan_out])
            off += fan_out

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def init_orthogonal(self, rng: np.random.Generator, gains=None) -> None:
        """Orthogonal weights with per-layer gains, zero biases."""
        if gains is None:
            gains = [np.sqrt(2.0)] * (len(self.weights) - 1) + [1.0]
        for W, b, g in zip(self.weights, self.biases, gains):
            W[...] = orthogonal(W.shape, g, rng)
            b[...] = 0.0


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    if gain == 0.0:
        return np.zeros(shape)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _activate(tag: str, x: np.ndarray) -> np.ndarray:
    return np.tanh(x) if tag == "tanh" else x


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on a vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} does not match input width {net.in_dim}")
    inputs, outputs = [], []
    h = x
    for W, b, tag in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        h = _activate(tag, h @ W.T + b)
        outputs.append(h)
    shapes = tuple(W.shape for W in net.weights)
    y = h[0] if squeeze else h
    return y, Tape(inputs, outputs, squeeze, shapes)


def mlp_backward(net: Mlp, tape: Tape, dy) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode pass. Returns (flat parameter gradient, input gradient)."""
    if tape.shapes != tuple(W.shape for W in net.weights):
        raise ValueError("tape was recorded on a network with different shapes")
    g = np.asarray(dy, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != {tape.outputs[-1].shape}")
    grad = np.zeros(net.n_params)
    blocks = _grad_views(net, grad)
    for layer in range(len(net.weights) - 1, -1, -1):
        if net.activations[layer] == "tanh":
            out = tape.outputs[layer]
            g = g * (1.0 - out * out)
        gW, gb = blocks[layer]
        gW[...] = g.T @ tape.inputs[layer]
        gb[...] = g.sum(axis=0)
        g = g @ net.weights[layer]
    dx = g[0] if tape.squeeze else g
    return grad, dx


def _grad_views(net: Mlp, grad: np.ndarray):
    views = []
    off = 0
    for fan_in, fan_out in zip(net.sizes[:-1], net.sizes[1:]):
        gW = grad[off : off + fan_in * fan_out].reshape(fan_out, fan_in)
        off += fan_in * fan_out
        gb = grad[off : off + fan_out]
        off += fan_out
        views.append((gW, gb))
    return views


class DiagGaussian:
    """Gaussian with state-independent log standard deviations.

    ``log_std`` may be a view into a shared parameter buffer.
    """

    def __init__(self, dim: int, log_std: np.ndarray | None = None):
        self.dim = int(dim)
        if log_std is None:
            log_std = np.zeros(self.dim)
        if log_std.shape != (self.dim,):
            raise ValueError("log_std has wrong shape")
        self.log_std = log_std

    def _check(self, mean: np.ndarray) -> np.ndarray:
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape[-1] != self.dim:
            raise ValueError(f"mean has dimension {mean.shape[-1]}, head has {self.dim}")
        return mean

    def sample(self, mean, rng: np.random.Generator):
        mean = self._check(mean)
        return mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)

    def log_prob(self, x, mean) -> np.ndarray:
        mean = self._check(mean)
        z = (np.asarray(x, dtype=np.float64) - mean) * np.exp(-self.log_std)
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.dim * LOG_2PI

    def log_prob_grads(self, x, mean):
        """d log_prob / d mean (per sample) and d log_prob / d log_std (per sample)."""
        mean = self._check(mean)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = np.asarray(x, dtype=np.float64) - mean
        d_mean = diff * inv_var
        d_log_std = diff * diff * inv_var - 1.0
        return d_mean, d_log_std

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.dim * (1.0 + LOG_2PI))

    def entropy_grad(self) -> np.ndarray:
        return np.ones(self.dim)


class PerturbedGaussian(DiagGaussian):
    """Diagonal Gaussian whose mean is shifted by ``U(-alpha, alpha) * scale``.

    The shift drawn at sampling time is returned so that log-probabilities of
    the stored sample can be re-evaluated against the same shifted mean.
    """

    def __init__(self, dim: int, alpha: float, scale=1.0, log_std: np.ndarray | None = None):
        super().__init__(dim, log_std)
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.alpha = float(alpha)
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (self.dim,)).copy()

    def sample(self, mean, rng: np.random.Generator, with_shift: bool = False):
        mean = self._check(mean)
        if self.alpha == 0.0:
            # draw nothing extra so the stream matches DiagGaussian exactly
            shift = np.zeros(mean.shape)
        else:
            shift = rng.uniform(-self.alpha, self.alpha, size=mean.shape) * self.scale
        x = super().sample(mean + shift, rng)
        return (x, shift) if with_shift else x

    def log_prob(self, x, mean, shift=0.0) -> np.ndarray:
        return super().log_prob(x, np.asarray(mean, dtype=np.float64) + shift)

    def log_prob_grads(self, x, mean, shift=0.0):
        return super().log_prob_grads(x, np.asarray(mean, dtype=np.float64) + shift)


@dataclass
class Adam:
    """Adam with bias correction over a flat parameter array."""

    size: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, params: np.ndarray, grads: np.ndarray, lr_scale: float = 1.0) -> np.ndarray:
        """Update ``params`` in place and return it. ``lr_scale`` carries annealing."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ValueError("parameter/gradient shape does not match optimizer state")
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        params -= (self.lr * lr_scale) * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def linear_anneal(step: int, total: int) -> float:
    """Learning-rate factor decaying linearly from 1 to 0 over ``total`` updates."""
    if total <= 0:
        return 1.0
    return max(0.0, 1.0 - step / total)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    """Scale ``grad`` in place to at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        grad *= max_norm / (norm + 1e-12)
    return norm
