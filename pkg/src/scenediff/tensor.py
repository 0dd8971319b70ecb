"""Hand-differentiated layer math on rank-4 ``(n, c, h, w)`` numpy arrays.

Every op here is dtype preserving: parameters default to float32, but the
gradient checker runs everything in float64 so that finite differences are
meaningful.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible; carries both shapes."""

    def __init__(self, message: str, got=None, expected=None):
        self.got = tuple(got) if got is not None else None
        self.expected = tuple(expected) if expected is not None else None
        if got is not None or expected is not None:
            message = f"{message} (got {self.got}, expected {self.expected})"
        super().__init__(message)


def as_tensor4(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w)", x.shape, ("n", "c", "h", "w"))
    return x


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(eq=False)
class ConvParams:
    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    padding: int = 0
    grad_weight: np.ndarray = None
    grad_bias: np.ndarray = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError("conv weight must be (c_out, c_in, k, k)", self.weight.shape)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("conv bias must be (c_out,)", self.bias.shape, (self.weight.shape[0],))
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=DTYPE):
        """Fan-in scaled normal weights (He), zero bias."""
        rng = np.random.default_rng(rng)
        std = np.sqrt(2.0 / (c_in * k * k))
        w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        return cls(w, np.zeros(c_out, dtype=dtype), stride, padding)

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def k(self):
        return self.weight.shape[2]

    def tensors(self):
        yield self.weight, self.grad_weight
        yield self.bias, self.grad_bias


@dataclass(eq=False)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    grad_gamma: np.ndarray = None
    grad_beta: np.ndarray = None

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batchnorm {name} shape", getattr(self, name).shape, c)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.grad_gamma is None:
            self.grad_gamma = np.zeros_like(self.gamma)
        if self.grad_beta is None:
            self.grad_beta = np.zeros_like(self.beta)

    @classmethod
    def init(cls, c, dtype=DTYPE, **kw):
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype), **kw)

    @property
    def channels(self):
        return self.gamma.shape[0]

    def tensors(self):
        yield self.gamma, self.grad_gamma
        yield self.beta, self.grad_beta


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (n, c, h_out, w_out, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x, p):
    x = as_tensor4(x)
    if x.shape[1] != p.c_in:
        raise ShapeError("conv2d input channels do not match weight", x.shape, ("n", p.c_in, "h", "w"))
    h_out = conv_out_size(x.shape[2], p.k, p.stride, p.padding)
    w_out = conv_out_size(x.shape[3], p.k, p.stride, p.padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for k={p.k}, stride={p.stride}, "
                         f"padding={p.padding}", x.shape)
    return x, h_out, w_out


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    x, h_out, w_out = _check_conv(x, p)
    cols = _windows(x, p.k, p.stride, p.padding)
    out = np.tensordot(cols, p.weight, axes=([1, 4, 5], [1, 2, 3]))  # (n, h, w, o)
    out += p.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray) -> np.ndarray:
    """Return dL/dx and accumulate dL/dW, dL/db into ``p``'s gradient buffers."""
    x, h_out, w_out = _check_conv(x, p)
    expected = (x.shape[0], p.c_out, h_out, w_out)
    if grad_out.shape != expected:
        raise ShapeError("conv2d grad_out shape", grad_out.shape, expected)
    k, s, pad = p.k, p.stride, p.padding
    cols = _windows(x, k, s, pad)
    p.grad_weight += np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    p.grad_bias += grad_out.sum(axis=(0, 2, 3))

    gcols = np.tensordot(grad_out, p.weight, axes=([1], [0]))  # (n, h_out, w_out, c, k, k)
    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
    n, c, h, w = x.shape
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += gcols[..., i, j]
    return gpad[:, :, pad:pad + h, pad:pad + w].copy()


def _check_tconv(x, p):
    x = as_tensor4(x)
    if p.stride != 2:
        raise ValueError(f"transposed conv supports stride 2 only, got stride={p.stride}")
    if x.shape[1] != p.c_in:
        raise ShapeError("transposed conv input channels do not match weight", x.shape,
                         ("n", p.c_in, "h", "w"))
    if p.k - 2 * p.padding != 2:
        raise ValueError(f"kernel {p.k} with padding {p.padding} does not double spatial dims")
    return x


def transposed_conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-2 transposed convolution; output is exactly ``(n, c_out, 2h, 2w)``.

    Weight layout is ``(c_out, c_in, k, k)`` like the forward conv; each input
    pixel scatters ``x[c] * weight[:, c]`` onto a k-by-k output patch.
    """
    x = _check_tconv(x, p)
    n, _, h, w = x.shape
    k, s, pad = p.k, p.stride, p.padding
    cols = np.tensordot(x, p.weight, axes=([1], [1]))  # (n, h, w, o, k, k)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((n, p.c_out, (h - 1) * s + k, (w - 1) * s + k), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + s * h:s, j:j + s * w:s] += cols[..., i, j]
    out = full[:, :, pad:pad + 2 * h, pad:pad + 2 * w]
    out += p.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def transposed_conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray) -> np.ndarray:
    x = _check_tconv(x, p)
    n, c, h, w = x.shape
    expected = (n, p.c_out, 2 * h, 2 * w)
    if grad_out.shape != expected:
        raise ShapeError("transposed conv grad_out shape", grad_out.shape, expected)
    k, s, pad = p.k, p.stride, p.padding
    full = np.pad(grad_out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # gather the output patch each input pixel scattered into
    gcols = np.empty((n, p.c_out, h, w, k, k), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            gcols[..., i, j] = full[:, :, i:i + s * h:s, j:j + s * w:s]
    p.grad_bias += grad_out.sum(axis=(0, 2, 3))
    p.grad_weight += np.tensordot(gcols, x, axes=([0, 2, 3], [0, 2, 3])).transpose(0, 3, 1, 2)
    gx = np.tensordot(gcols, p.weight, axes=([1, 4, 5], [0, 2, 3]))  # (n, h, w, c)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# batch norm


def _check_bn(x, p):
    x = as_tensor4(x)
    if x.shape[1] != p.channels:
        raise ShapeError("batchnorm channel count", x.shape, ("n", p.channels, "h", "w"))
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError("batchnorm over a zero-element channel", x.shape)
    return x


def _batch_stats(x):
    # float64 accumulation: a constant channel must give exactly zero variance
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(x - mean[None, :, None, None]).mean(axis=(0, 2, 3))
    return mean.astype(x.dtype), var.astype(x.dtype)


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool) -> np.ndarray:
    """Per-channel normalization.

    In training mode the batch statistics are used and the running stats are
    moved towards them in place (biased variance, so eval on the training
    batch reproduces the training output once the stats settle).
    """
    x = _check_bn(x, p)
    if training:
        mean, var = _batch_stats(x)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var
    else:
        mean, var = p.running_mean, p.running_var
    scale = (p.gamma / np.sqrt(var + p.eps))[None, :, None, None]
    out = (x - mean[None, :, None, None]) * scale + p.beta[None, :, None, None]
    return out.astype(x.dtype, copy=False)


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray,
                       training: bool) -> np.ndarray:
    x = _check_bn(x, p)
    if grad_out.shape != x.shape:
        raise ShapeError("batchnorm grad_out shape", grad_out.shape, x.shape)
    axes = (0, 2, 3)
    if training:
        mean, var = _batch_stats(x)
    else:
        mean, var = p.running_mean, p.running_var
    inv = (1.0 / np.sqrt(var + p.eps))[None, :, None, None]
    xhat = (x - mean[None, :, None, None]) * inv
    p.grad_gamma += (grad_out * xhat).sum(axis=axes)
    p.grad_beta += grad_out.sum(axis=axes)
    g = grad_out * p.gamma[None, :, None, None]
    if not training:
        return (g * inv).astype(x.dtype, copy=False)
    gx = inv * (g - g.mean(axis=axes, keepdims=True)
                - xhat * (g * xhat).mean(axis=axes, keepdims=True))
    return gx.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# activations and loss


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid(x):
    """Logistic function, clamped so the result stays strictly inside (0, 1)."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    fi = np.finfo(out.dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg)


def sigmoid_backward(x, grad_out):
    s = sigmoid(x)
    return grad_out * s * (1 - s)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError("mse_loss shapes differ", pred.shape, target.shape)
    diff = pred - target.astype(pred.dtype, copy=False)
    n = diff.size
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / n) * diff


# ---------------------------------------------------------------------------
# layer objects: cache the forward input so backward can be called without it


class Layer:
    training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def param_groups(self) -> list:
        return []

    def parameters(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for group in self.param_groups():
            yield from group.tensors()

    def zero_grad(self):
        for _, g in self.parameters():
            g[...] = 0

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, rng=None):
        padding = (k - 1) // 2 if padding is None else padding
        self.p = ConvParams.init(c_in, c_out, k, stride, padding, rng)
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.p)

    def backward(self, grad_out):
        return conv2d_backward(self._x, self.p, grad_out)

    def param_groups(self):
        return [self.p]


class ConvTranspose2d(Layer):
    def __init__(self, c_in, c_out, k=2, rng=None):
        self.p = ConvParams.init(c_in, c_out, k, 2, (k - 2) // 2, rng)
        self._x = None

    def forward(self, x):
        self._x = x
        return transposed_conv2d_forward(x, self.p)

    def backward(self, grad_out):
        return transposed_conv2d_backward(self._x, self.p, grad_out)

    def param_groups(self):
        return [self.p]


class BatchNorm2d(Layer):
    def __init__(self, c, eps=1e-5, momentum=0.1):
        self.p = BatchNormParams.init(c, eps=eps, momentum=momentum)
        self._x = None

    def forward(self, x):
        self._x = x
        return batchnorm_forward(x, self.p, self.training)

    def backward(self, grad_out):
        return batchnorm_backward(self._x, self.p, grad_out, self.training)

    def param_groups(self):
        return [self.p]


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class Sigmoid(Layer):
    def forward(self, x):
        self._out = sigmoid(x)
        return self._out

    def backward(self, grad_out):
        s = self._out
        return grad_out * s * (1 - s)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def param_groups(self):
        return [g for layer in self.layers for g in layer.param_groups()]

    def train(self, mode=True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, state: dict, lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update over ``(value, grad)`` pairs; zeroes the grads.

    ``state`` maps the position of each pair to its ``(m, v)`` moment buffers
    and is created lazily.
    """
    if t < 1:
        raise ValueError(f"adam step index must be >= 1, got t={t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (value, grad) in enumerate(params):
        if i not in state:
            state[i] = (np.zeros_like(value), np.zeros_like(value))
        m, v = state[i]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * np.square(grad)
        value -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(value.dtype, copy=False)
        grad[...] = 0


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state: dict = {}

    def step(self):
        self.t += 1
        adam_step(self.params, self.state, self.lr, self.t, *self.betas, eps=self.eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    input_error: float
    param_errors: list[float] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max([self.input_error, *self.param_errors])

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def rel_error(analytic, numeric, floor=1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _to_float64(layer):
    layer = copy.deepcopy(layer)
    for group in layer.param_groups():
        for name, value in vars(group).items():
            if isinstance(value, np.ndarray):
                setattr(group, name, value.astype(np.float64))
    return layer


def finite_diff_check(layer: Layer, x: np.ndarray, eps: float = 1e-3, tol: float | None = None,
                      upstream: np.ndarray | None = None,
                      loss: Callable | None = None, seed: int = 0) -> GradCheckReport:
    """Compare a layer's analytic gradients against central differences.

    The check runs on a float64 copy of ``layer``. The scalar objective is
    ``sum(out * upstream)`` (random upstream by default) unless ``loss`` is
    given, in which case ``loss(out) -> (value, grad)`` is used. ``tol`` is
    accepted for convenience; compare with ``report.passed(tol)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    layer = _to_float64(layer)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x)
    if loss is None:
        if upstream is None:
            upstream = np.random.default_rng(seed).standard_normal(out.shape)
        upstream = np.asarray(upstream, dtype=np.float64)

        def loss(o):
            return float(np.sum(o * upstream)), upstream

    def objective():
        return loss(layer.forward(x))[0]

    layer.zero_grad()
    _, g = loss(layer.forward(x))
    gx = layer.backward(g)
    analytic_params = [grad.copy() for _, grad in layer.parameters()]

    def numeric_grad(arr):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            plus = objective()
            flat[i] = old - eps
            minus = objective()
            flat[i] = old
            nflat[i] = (plus - minus) / (2 * eps)
        return num

    report = GradCheckReport(rel_error(gx, numeric_grad(x)))
    for (value, _), analytic in zip(layer.parameters(), analytic_params):
        report.param_errors.append(rel_error(analytic, numeric_grad(value)))
    return report
