"""Manually differentiated layers over float64 numpy arrays.

Activations flow as (batch, channels, time). Every layer's forward returns
(output, cache); backward consumes that cache plus the upstream gradient,
accumulates into each Param's .grad, and returns the input gradient. Caches
live with the caller, so one layer object can serve several forward passes per
step (shared-weight branches) without state collisions.
"""

from __future__ import annotations

import numpy as np


class Param:
    """A learnable array with its gradient accumulator."""

    __slots__ = ("value", "grad", "decay")

    def __init__(self, value: np.ndarray, decay: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.decay = decay

    def zero_grad(self):
        self.grad[...] = 0.0


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class PointwiseConv:
    """1x1 convolution over time: a dense map applied per frame."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.c_in = c_in
        self.c_out = c_out
        self.w = Param(_kaiming(rng, (c_out, c_in), c_in), decay=True)
        self.b = Param(np.zeros(c_out))

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: np.ndarray, train: bool = False):
        xt = x.transpose(0, 2, 1)
        y = (xt @ self.w.value.T + self.b.value).transpose(0, 2, 1)
        return y, (x,)

    def backward(self, cache, gy: np.ndarray):
        (x,) = cache
        b, _, t = x.shape
        gyt = gy.transpose(0, 2, 1).reshape(b * t, self.c_out)
        xt = x.transpose(0, 2, 1).reshape(b * t, self.c_in)
        self.w.grad += gyt.T @ xt
        self.b.grad += gy.sum(axis=(0, 2))
        gx = (gyt @ self.w.value).reshape(b, t, self.c_in).transpose(0, 2, 1)
        return gx


class StridedConv:
    """Standard 1-D convolution, valid padding, configurable stride."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.w = Param(_kaiming(rng, (c_out, c_in, kernel), c_in * kernel), decay=True)
        self.b = Param(np.zeros(c_out))

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def out_frames(self, t_in: int) -> int:
        return (t_in - self.kernel) // self.stride + 1

    def _windows(self, x: np.ndarray, t_out: int) -> np.ndarray:
        b, c, _ = x.shape
        sb, sc, st = x.strides
        view = np.lib.stride_tricks.as_strided(
            x, shape=(b, c, t_out, self.kernel),
            strides=(sb, sc, self.stride * st, st), writeable=False,
        )
        # (B, T_out, C_in * K) copy for one dgemm
        return view.transpose(0, 2, 1, 3).reshape(b, t_out, c * self.kernel)

    def forward(self, x: np.ndarray, train: bool = False):
        x = np.ascontiguousarray(x)
        b, _, t_in = x.shape
        t_out = self.out_frames(t_in)
        if t_out < 1:
            raise ValueError(f"input of {t_in} frames shorter than kernel {self.kernel}")
        win = self._windows(x, t_out)
        wmat = self.w.value.reshape(self.c_out, -1)
        y = (win @ wmat.T + self.b.value).transpose(0, 2, 1)
        return y, (win, (b, self.c_in, t_in))

    def backward(self, cache, gy: np.ndarray):
        win, (b, c_in, t_in) = cache
        t_out = gy.shape[2]
        gyt = gy.transpose(0, 2, 1).reshape(b * t_out, self.c_out)
        self.w.grad += (gyt.T @ win.reshape(b * t_out, -1)).reshape(self.w.value.shape)
        self.b.grad += gy.sum(axis=(0, 2))
        gx = np.zeros((b, c_in, t_in))
        gy_bt = gy.transpose(0, 2, 1)
        for k in range(self.kernel):
            gxk = gy_bt @ self.w.value[:, :, k]
            gx[:, :, k : k + self.stride * t_out : self.stride] += gxk.transpose(0, 2, 1)
        return gx


class DepthwiseConv:
    """Causal per-channel convolution with dilation; tap 0 sits on the current frame."""

    def __init__(self, channels: int, kernel: int, dilation: int, rng: np.random.Generator):
        self.channels = channels
        self.kernel = kernel
        self.dilation = dilation
        self.w = Param(_kaiming(rng, (channels, kernel), kernel), decay=True)
        self.b = Param(np.zeros(channels))

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: np.ndarray, train: bool = False):
        t = x.shape[2]
        y = np.empty_like(x)
        y[...] = self.b.value[:, None]
        for k in range(self.kernel):
            off = k * self.dilation
            if off >= t:
                break
            if off == 0:
                y += self.w.value[:, 0][:, None] * x
            else:
                y[:, :, off:] += self.w.value[:, k][:, None] * x[:, :, :t - off]
        return y, (x,)

    def backward(self, cache, gy: np.ndarray):
        (x,) = cache
        t = x.shape[2]
        gx = np.zeros_like(x)
        for k in range(self.kernel):
            off = k * self.dilation
            if off >= t:
                break
            if off == 0:
                self.w.grad[:, 0] += (gy * x).sum(axis=(0, 2))
                gx += self.w.value[:, 0][:, None] * gy
            else:
                self.w.grad[:, k] += (gy[:, :, off:] * x[:, :, :t - off]).sum(axis=(0, 2))
                gx[:, :, :t - off] += self.w.value[:, k][:, None] * gy[:, :, off:]
        self.b.grad += gy.sum(axis=(0, 2))
        return gx


class BatchNorm:
    """Per-channel batch normalization over (batch, time).

    Training normalizes with biased batch statistics and refreshes the running
    buffers; evaluation normalizes with the running buffers. Both statistic
    kinds use the biased variance so freezing running stats to a batch's stats
    makes the two modes agree.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x: np.ndarray, train: bool = False):
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None]) * inv[:, None]
        y = self.gamma.value[:, None] * xhat + self.beta.value[:, None]
        n = x.shape[0] * x.shape[2]
        return y, (xhat, inv, train, n)

    def backward(self, cache, gy: np.ndarray):
        xhat, inv, train, n = cache
        self.gamma.grad += (gy * xhat).sum(axis=(0, 2))
        self.beta.grad += gy.sum(axis=(0, 2))
        scale = (self.gamma.value * inv)[:, None]
        if not train:
            return gy * scale
        sum_gy = gy.sum(axis=(0, 2), keepdims=True)
        sum_gy_xhat = (gy * xhat).sum(axis=(0, 2), keepdims=True)
        return (scale / n) * (n * gy - sum_gy - xhat * sum_gy_xhat)


class PReLU:
    """Per-channel parametric ReLU, slope initialized at 0.25."""

    def __init__(self, channels: int):
        self.a = Param(np.full(channels, 0.25))

    def params(self):
        return [("a", self.a)]

    def forward(self, x: np.ndarray, train: bool = False):
        pos = x > 0
        y = np.where(pos, x, self.a.value[:, None] * x)
        return y, (x, pos)

    def backward(self, cache, gy: np.ndarray):
        x, pos = cache
        neg = ~pos
        self.a.grad += (gy * x * neg).sum(axis=(0, 2))
        return gy * np.where(pos, 1.0, self.a.value[:, None])


def sigmoid_forward(x: np.ndarray):
    y = np.empty_like(x)
    nonneg = x >= 0
    y[nonneg] = 1.0 / (1.0 + np.exp(-x[nonneg]))
    ex = np.exp(x[~nonneg])
    y[~nonneg] = ex / (1.0 + ex)
    return y, (y,)


def sigmoid_backward(cache, gy: np.ndarray):
    (y,) = cache
    return gy * y * (1.0 - y)


class ResBlock:
    """Bottleneck residual block: 1x1 up, PReLU, BN, causal depthwise, PReLU, BN, 1x1 down."""

    def __init__(self, d: int, h: int, kernel: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.pw_in = PointwiseConv(d, h, rng)
        self.act_in = PReLU(h)
        self.bn_in = BatchNorm(h)
        self.dw = DepthwiseConv(h, kernel, dilation, rng)
        self.act_out = PReLU(h)
        self.bn_out = BatchNorm(h)
        self.pw_out = PointwiseConv(h, d, rng)

    def sublayers(self):
        return [("pw_in", self.pw_in), ("act_in", self.act_in), ("bn_in", self.bn_in),
                ("dw", self.dw), ("act_out", self.act_out), ("bn_out", self.bn_out),
                ("pw_out", self.pw_out)]

    def params(self):
        out = []
        for lname, layer in self.sublayers():
            for pname, p in layer.params():
                out.append((f"{lname}.{pname}", p))
        return out

    def forward(self, x: np.ndarray, train: bool = False):
        caches = []
        h = x
        for _, layer in self.sublayers():
            h, c = layer.forward(h, train)
            caches.append(c)
        return x + h, caches

    def backward(self, caches, gy: np.ndarray):
        g = gy
        for (_, layer), c in zip(reversed(self.sublayers()), reversed(caches)):
            g = layer.backward(c, g)
        return g + gy
