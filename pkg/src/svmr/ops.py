"""Deterministic differentiable sequence operators.

Every layer implements an explicit forward/backward pair on numpy arrays
(float64 internally).  ``forward`` returns ``(y, cache)`` and ``backward``
takes ``(dy, cache)`` so a layer with shared weights can be applied to
several inputs in one step without clobbering its own state; parameter
gradients accumulate into ``layer.grads`` until ``zero_grads`` is called.

Shapes follow the convention ``(..., C, L)`` for channel-major sequences and
``(..., C, L, F)`` for per-concept filter stacks; leading batch dimensions
are optional everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Input dimensions do not match the operator's declared signature."""


@dataclass
class OperatorParams:
    """Named parameter arrays plus the seed they were initialized from."""

    seed: int | None = None
    arrays: dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "OperatorParams":
        return OperatorParams(self.seed, {k: v.copy() for k, v in self.arrays.items()})


def validate_tensor3(x: Array, name: str = "input") -> None:
    """Check the (C, L, F) tensor contract: 3 trailing dims >= 1, finite data."""
    if x.ndim < 3:
        raise ShapeError(f"{name}: expected at least 3 dims (C, L, F), got shape {x.shape}")
    if min(x.shape[-3:]) < 1:
        raise ShapeError(f"{name}: all of (C, L, F) must be >= 1, got {x.shape[-3:]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains non-finite values")


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base for all operators; subclasses fill ``params`` at construction."""

    def __init__(self) -> None:
        self.params = OperatorParams()
        self.grads: dict[str, Array] = {}

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.arrays.items()}

    def _accumulate(self, name: str, value: Array) -> None:
        if name not in self.grads:
            self.grads[name] = np.zeros_like(self.params.arrays[name])
        self.grads[name] += value

    def iter_params(self):
        for name, arr in self.params.arrays.items():
            yield name, arr, self.grads.get(name)

    def forward(self, x: Array):
        raise NotImplementedError

    def backward(self, dy: Array, cache):
        raise NotImplementedError

    def __call__(self, x: Array) -> Array:
        return self.forward(x)[0]


def _apply_activation(y: Array, activation: str):
    if activation == "linear":
        return y, None
    if activation == "relu":
        mask = y > 0.0
        return y * mask, mask
    if activation == "sigmoid":
        out = sigmoid(y)
        return out, out
    raise ValueError(f"unknown activation {activation!r}")


def _activation_backward(dy: Array, activation: str, act_cache) -> Array:
    if activation == "linear":
        return dy
    if activation == "relu":
        return dy * act_cache
    if activation == "sigmoid":
        return dy * act_cache * (1.0 - act_cache)
    raise ValueError(f"unknown activation {activation!r}")


def sigmoid(x: Array) -> Array:
    # Split by sign to stay overflow-free on large |x|.
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fold_batch(a: Array, core_ndim: int) -> Array:
    """Collapse all leading (batch) dims into one axis before the core dims."""
    return a.reshape((-1,) + a.shape[a.ndim - core_ndim:])


def _pad_last(x: Array, pad: int) -> Array:
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, width)


def _conv1d_forward(x: Array, w: Array, b: Array) -> Array:
    # x: (..., C_in, L), w: (C_out, C_in, K), b: (C_out,); zero padding keeps L.
    k = w.shape[2]
    pad = (k - 1) // 2
    length = x.shape[-1]
    xp = _pad_last(x, pad)
    y = np.zeros(x.shape[:-2] + (w.shape[0], length), dtype=float)
    for tap in range(k):
        y += np.einsum("oi,...il->...ol", w[:, :, tap], xp[..., tap:tap + length])
    return y + b[:, None]


def _conv1d_backward(dy: Array, x: Array, w: Array):
    k = w.shape[2]
    pad = (k - 1) // 2
    length = x.shape[-1]
    xp = _pad_last(x, pad)
    dyf = _fold_batch(dy, 2)
    xpf = _fold_batch(xp, 2)
    dw = np.zeros_like(w)
    for tap in range(k):
        dw[:, :, tap] = np.einsum("bol,bil->oi", dyf, xpf[..., tap:tap + length])
    db = dyf.sum(axis=(0, 2))
    dyp = _pad_last(dy, pad)
    dx = np.zeros_like(x)
    for tap in range(k):
        dx += np.einsum("oi,...ol->...il", w[:, :, k - 1 - tap], dyp[..., tap:tap + length])
    return dx, dw, db


class TemporalConv1d(Layer):
    """1-D convolution over the last axis, kernel 3, zero padding 1.

    Maps (..., C_in, L) -> (..., C_out, L).
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3,
                 activation: str = "relu", seed: int | None = 0):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.activation = activation
        rng = np.random.default_rng(seed)
        fan_in = c_in * kernel_size
        self.params = OperatorParams(seed, {
            "weight": _uniform_fan_in(rng, (c_out, c_in, kernel_size), fan_in),
            "bias": _uniform_fan_in(rng, (c_out,), fan_in),
        })

    def forward(self, x: Array):
        if x.ndim < 2 or x.shape[-2] != self.c_in:
            raise ShapeError(
                f"temporal conv expects {self.c_in} input channels, got shape {x.shape}")
        z = _conv1d_forward(x, self.params.arrays["weight"], self.params.arrays["bias"])
        y, act_cache = _apply_activation(z, self.activation)
        return y, (x, act_cache)

    def backward(self, dy: Array, cache):
        x, act_cache = cache
        dz = _activation_backward(dy, self.activation, act_cache)
        dx, dw, db = _conv1d_backward(dz, x, self.params.arrays["weight"])
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class ConceptTemporalConv(Layer):
    """Per-concept temporal filtering: (..., C, L, F_in) -> (..., C, L, F_out).

    The same F_in x F_out bank of temporal 1x3 kernels is applied to every
    channel ("concept") independently, so output channel c depends only on
    input channel c.
    """

    def __init__(self, f_in: int, f_out: int, kernel_size: int = 3,
                 activation: str = "relu", seed: int | None = 0):
        super().__init__()
        self.f_in = f_in
        self.f_out = f_out
        self.activation = activation
        rng = np.random.default_rng(seed)
        fan_in = f_in * kernel_size
        self.params = OperatorParams(seed, {
            "weight": _uniform_fan_in(rng, (f_out, f_in, kernel_size), fan_in),
            "bias": _uniform_fan_in(rng, (f_out,), fan_in),
        })

    def forward(self, x: Array):
        validate_tensor3(x)
        if x.shape[-1] != self.f_in:
            raise ShapeError(f"concept conv expects F_in={self.f_in}, got shape {x.shape}")
        # Fold the channel axis into the batch; filters are channel-shared.
        xt = np.moveaxis(x, -1, -2)  # (..., C, F_in, L)
        z = _conv1d_forward(xt, self.params.arrays["weight"], self.params.arrays["bias"])
        y, act_cache = _apply_activation(z, self.activation)
        return np.moveaxis(y, -2, -1), (xt, act_cache)

    def backward(self, dy: Array, cache):
        xt, act_cache = cache
        dyt = np.moveaxis(dy, -1, -2)
        dz = _activation_backward(dyt, self.activation, act_cache)
        dxt, dw, db = _conv1d_backward(dz, xt, self.params.arrays["weight"])
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return np.moveaxis(dxt, -2, -1)


class ChannelProjection(Layer):
    """Pointwise (kernel-1) channel mixing: (..., C_in, L) -> (..., C_out, L)."""

    def __init__(self, c_in: int, c_out: int, activation: str = "linear",
                 seed: int | None = 0):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params = OperatorParams(seed, {
            "weight": _uniform_fan_in(rng, (c_out, c_in), c_in),
            "bias": _uniform_fan_in(rng, (c_out,), c_in),
        })

    def forward(self, x: Array):
        if x.ndim < 2 or x.shape[-2] != self.c_in:
            raise ShapeError(
                f"channel projection expects {self.c_in} input channels, got shape {x.shape}")
        z = np.einsum("oi,...il->...ol", self.params.arrays["weight"], x)
        z = z + self.params.arrays["bias"][:, None]
        y, act_cache = _apply_activation(z, self.activation)
        return y, (x, act_cache)

    def backward(self, dy: Array, cache):
        x, act_cache = cache
        dz = _activation_backward(dy, self.activation, act_cache)
        dzf = _fold_batch(dz, 2)
        self._accumulate("weight", np.einsum("bol,bil->oi", dzf, _fold_batch(x, 2)))
        self._accumulate("bias", dzf.sum(axis=(0, 2)))
        return np.einsum("oi,...ol->...il", self.params.arrays["weight"], dz)


class SampleAxisConv(Layer):
    """Nx1x1 convolution collapsing the sample axis of a candidate map.

    Maps (..., C_in, N, S, D) -> (..., C_out, S, D) with full channel mixing.
    """

    def __init__(self, c_in: int, c_out: int, n_samples: int,
                 activation: str = "linear", seed: int | None = 0):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.n_samples = n_samples
        self.activation = activation
        rng = np.random.default_rng(seed)
        fan_in = c_in * n_samples
        self.params = OperatorParams(seed, {
            "weight": _uniform_fan_in(rng, (c_out, c_in, n_samples), fan_in),
            "bias": _uniform_fan_in(rng, (c_out,), fan_in),
        })

    def forward(self, x: Array):
        if x.ndim < 4 or x.shape[-4] != self.c_in or x.shape[-3] != self.n_samples:
            raise ShapeError(
                f"sample-axis conv expects (..., {self.c_in}, {self.n_samples}, S, D), "
                f"got shape {x.shape}")
        z = np.einsum("ocn,...cnsd->...osd", self.params.arrays["weight"], x)
        z = z + self.params.arrays["bias"][:, None, None]
        y, act_cache = _apply_activation(z, self.activation)
        return y, (x, act_cache)

    def backward(self, dy: Array, cache):
        x, act_cache = cache
        dz = _activation_backward(dy, self.activation, act_cache)
        dzf = _fold_batch(dz, 3)
        self._accumulate("weight", np.einsum("bosd,bcnsd->ocn", dzf, _fold_batch(x, 4)))
        self._accumulate("bias", dzf.sum(axis=(0, 2, 3)))
        return np.einsum("ocn,...osd->...cnsd", self.params.arrays["weight"], dz)


class MapConv2d(Layer):
    """2-D convolution over the trailing (S, D) axes with zero padding.

    Maps (..., C_in, S, D) -> (..., C_out, S, D); kernel size 1 or 3.
    Implemented as shifted pointwise products so no window tensor is ever
    materialized.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3,
                 activation: str = "linear", seed: int | None = 0):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.activation = activation
        rng = np.random.default_rng(seed)
        fan_in = c_in * kernel_size * kernel_size
        self.params = OperatorParams(seed, {
            "weight": _uniform_fan_in(rng, (c_out, c_in, kernel_size, kernel_size), fan_in),
            "bias": _uniform_fan_in(rng, (c_out,), fan_in),
        })

    @staticmethod
    def _pad2(x: Array, pad: int) -> Array:
        if pad == 0:
            return x
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(x, width)

    def forward(self, x: Array):
        if x.ndim < 3 or x.shape[-3] != self.c_in:
            raise ShapeError(
                f"map conv expects {self.c_in} input channels, got shape {x.shape}")
        k = self.kernel_size
        pad = (k - 1) // 2
        s, d = x.shape[-2:]
        xp = self._pad2(x, pad)
        w = self.params.arrays["weight"]
        z = np.zeros(x.shape[:-3] + (self.c_out, s, d), dtype=float)
        for u in range(k):
            for v in range(k):
                z += np.einsum("oi,...isd->...osd", w[:, :, u, v],
                               xp[..., u:u + s, v:v + d])
        z = z + self.params.arrays["bias"][:, None, None]
        y, act_cache = _apply_activation(z, self.activation)
        return y, (x, act_cache)

    def backward(self, dy: Array, cache):
        x, act_cache = cache
        dz = _activation_backward(dy, self.activation, act_cache)
        k = self.kernel_size
        pad = (k - 1) // 2
        s, d = x.shape[-2:]
        xp = self._pad2(x, pad)
        w = self.params.arrays["weight"]
        dzf = _fold_batch(dz, 3)
        xpf = _fold_batch(xp, 3)
        dw = np.zeros_like(w)
        for u in range(k):
            for v in range(k):
                dw[:, :, u, v] = np.einsum("bosd,bisd->oi", dzf,
                                           xpf[..., u:u + s, v:v + d])
        db = dzf.sum(axis=(0, 2, 3))
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        dzp = self._pad2(dz, pad)
        dx = np.zeros_like(x)
        for u in range(k):
            for v in range(k):
                dx += np.einsum("oi,...osd->...isd", w[:, :, k - 1 - u, k - 1 - v],
                                dzp[..., u:u + s, v:v + d])
        return dx


class AvgPoolTemporal(Layer):
    """Mean pooling over contiguous near-equal windows of the last axis."""

    def __init__(self, target: int):
        super().__init__()
        if target < 1:
            raise ValueError(f"pool target must be >= 1, got {target}")
        self.target = target

    def forward(self, x: Array):
        length = x.shape[-1]
        if self.target > length:
            raise ShapeError(f"pool target {self.target} exceeds input length {length}")
        starts = np.array([i * length // self.target for i in range(self.target + 1)])
        counts = np.diff(starts)
        sums = np.add.reduceat(x, starts[:-1], axis=-1)
        return sums / counts, (length, counts)

    def backward(self, dy: Array, cache):
        length, counts = cache
        return np.repeat(dy / counts, counts, axis=-1)


def avg_pool_temporal(x: Array, target: int) -> Array:
    return AvgPoolTemporal(target).forward(x)[0]


def resize_positions(length: int, target: int) -> Array:
    """Endpoint-aligned sample positions for resizing length -> target."""
    if length < 1 or target < 1:
        raise ShapeError(f"resize needs length, target >= 1, got {length}, {target}")
    if target == 1:
        return np.array([(length - 1) / 2.0])
    return np.linspace(0.0, length - 1, target)


class LinearResize(Layer):
    """Per-channel 1-D linear interpolation of the last axis to a new length.

    Exact on constant sequences and the identity when target equals the
    input length (positions land on integers, so the interpolation residual
    term is exactly zero).
    """

    def __init__(self, target: int):
        super().__init__()
        if target < 1:
            raise ValueError(f"resize target must be >= 1, got {target}")
        self.target = target

    def forward(self, x: Array):
        length = x.shape[-1]
        pos = resize_positions(length, self.target)
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        hi = np.minimum(lo + 1, length - 1)
        y = x[..., lo] + frac * (x[..., hi] - x[..., lo])
        return y, (length, lo, hi, frac)

    def backward(self, dy: Array, cache):
        length, lo, hi, frac = cache
        dx = np.zeros(dy.shape[:-1] + (length,), dtype=float)
        for j in range(self.target):
            dx[..., lo[j]] += dy[..., j] * (1.0 - frac[j])
            dx[..., hi[j]] += dy[..., j] * frac[j]
        return dx


def linear_resize(x: Array, target: int) -> Array:
    return LinearResize(target).forward(x)[0]


class SigmoidHead(Layer):
    """Elementwise sigmoid with no parameters."""

    def forward(self, x: Array):
        y = sigmoid(x)
        return y, y

    def backward(self, dy: Array, cache):
        return dy * cache * (1.0 - cache)


class FunctionOp:
    """Adapter exposing a pure (forward, backward) pair as a checkable op.

    ``layers`` optionally names Layer objects whose parameters the pair
    reads and whose grads its backward fills, so they join the check.
    """

    def __init__(self, forward_fn, backward_fn, layers=()):
        self._forward = forward_fn
        self._backward = backward_fn
        self._layers = tuple(layers)

    def forward(self, x):
        return self._forward(x)

    def backward(self, dy, cache):
        return self._backward(dy, cache)

    def zero_grads(self) -> None:
        for layer in self._layers:
            layer.zero_grads()

    def iter_params(self):
        for layer in self._layers:
            yield from layer.iter_params()


def run_layers(layers, x: Array):
    """Forward through a layer list, collecting per-layer caches."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def back_layers(layers, dy: Array, caches) -> Array:
    """Backward through a layer list in reverse, accumulating param grads."""
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dy = layer.backward(dy, cache)
    return dy


class Adam:
    """Adam over the parameters of a fixed list of layers.

    Moment state is positional, so the layer list must not change between
    steps.  ``step`` consumes whatever is in each layer's ``grads`` and then
    clears it.
    """

    def __init__(self, layers, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.layers = [layer for layer in layers if layer.params.arrays]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [{k: np.zeros_like(v) for k, v in layer.params.arrays.items()}
                   for layer in self.layers]
        self._v = [{k: np.zeros_like(v) for k, v in layer.params.arrays.items()}
                   for layer in self.layers]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, layer in enumerate(self.layers):
            for name, param in layer.params.arrays.items():
                grad = layer.grads.get(name)
                if grad is None:
                    continue
                m = self._m[i][name]
                v = self._v[i][name]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            layer.zero_grads()


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def grad_check(op, x, eps: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` exposes ``forward(x) -> (y, cache)``, ``backward(dy, cache) -> dx``
    and ``iter_params()``; ``x`` may be one array or a tuple of arrays.  The
    output is contracted to a scalar with a fixed random projection so a
    single backward pass yields every analytic derivative.  Relative error is
    |analytic - numeric| / max(1, |numeric|), maximized over all input and
    parameter entries.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    rng = np.random.default_rng(0) if rng is None else rng
    xs = _as_tuple(x)
    for arr in xs:
        if not np.all(np.isfinite(arr)):
            raise ValueError("grad_check input contains non-finite values")

    y, cache = op.forward(x)
    u = rng.standard_normal(np.shape(y)) if np.ndim(y) else 1.0
    op.zero_grads()
    dx = op.backward(np.asarray(u, dtype=float) if np.ndim(y) else 1.0, cache)
    dxs = _as_tuple(dx)
    if any(not np.all(np.isfinite(d)) for d in dxs):
        raise ValueError("analytic gradient contains non-finite values")

    def scalar() -> float:
        y2, _ = op.forward(x)
        return float(np.sum(np.asarray(y2) * u))

    max_err = 0.0

    def check_entry(arr: Array, flat_idx: int, analytic: float) -> None:
        nonlocal max_err
        # arr.flat writes through for any stride layout; reshape(-1) would
        # silently copy a non-contiguous array and the nudge would be lost
        orig = arr.flat[flat_idx]
        arr.flat[flat_idx] = orig + eps
        f_plus = scalar()
        arr.flat[flat_idx] = orig - eps
        f_minus = scalar()
        arr.flat[flat_idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        if not math.isfinite(numeric):
            raise ValueError("central difference produced a non-finite value")
        err = abs(analytic - numeric) / max(1.0, abs(numeric))
        max_err = max(max_err, err)

    for arr, darr in zip(xs, dxs):
        dflat = np.asarray(darr).reshape(-1)
        for i in range(arr.size):
            check_entry(arr, i, float(dflat[i]))
    for _name, arr, grad in op.iter_params():
        if grad is None:
            grad = np.zeros_like(arr)
        gflat = grad.reshape(-1)
        for i in range(arr.size):
            check_entry(arr, i, float(gflat[i]))
    return max_err
