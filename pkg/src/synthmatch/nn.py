"""Minimal deterministic differentiable layers on numpy arrays.

Layers cache what their backward pass needs on ``self`` and accumulate
parameter gradients in ``self.grads`` (so micro-batches sum naturally);
call ``zero_grads`` between optimizer steps.  The whole stack is single
threaded and seeded: same seed, same arrays, bit for bit.

float32 is the training dtype; gradient-check tests build layers in
float64 where central differences are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class Layer:
    """Base: parameter dict, gradient dict with matching shapes."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _uniform_fan_in(rng, shape, fan_in, dtype):
    limit = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _expect_last_dim(layer_name, x, dim):
    if x.shape[-1] != dim:
        raise ValueError(
            f"{layer_name}: input shape {x.shape} does not match expected "
            f"trailing dimension {dim}"
        )


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        self._register("W", _uniform_fan_in(rng, (in_dim, out_dim), in_dim, dtype))
        self._register("b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x):
        _expect_last_dim("Dense", x, self.params["W"].shape[0])
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads["W"] += self._x.T @ g
        self.grads["b"] += g.sum(axis=0)
        return g @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y * self._y)


def make_activation(name: str):
    if name == "relu":
        return ReLU()
    if name == "tanh":
        return Tanh()
    raise ValueError(f"unknown activation {name!r}")


def _im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh * ow, c * kh * kw), oh, ow


def _col2im(gcol, x_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    n, c, h, w = x_shape
    g = gcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcol.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += g[:, :, i, j]
    return gx[:, :, ph : ph + h, pw : pw + w]


class Conv2d(Layer):
    """3x3-style 2-D convolution via im2col; stride and zero padding per axis."""

    def __init__(self, in_ch, out_ch, ksize, rng, stride=(1, 1), padding=(1, 1),
                 dtype=np.float32):
        super().__init__()
        kh, kw = (ksize, ksize) if isinstance(ksize, int) else ksize
        self.kh, self.kw = kh, kw
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kh * kw
        self._register("W", _uniform_fan_in(rng, (fan_in, out_ch), fan_in, dtype))
        self._register("b", np.zeros(out_ch, dtype=dtype))
        self.in_ch, self.out_ch = in_ch, out_ch

    def out_shape(self, h, w):
        sh, sw = self.stride
        ph, pw = self.padding
        return (h + 2 * ph - self.kh) // sh + 1, (w + 2 * pw - self.kw) // sw + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(
                f"Conv2d: input shape {x.shape} does not match expected "
                f"(N, {self.in_ch}, H, W)"
            )
        self._x_shape = x.shape
        col, oh, ow = _im2col(x, self.kh, self.kw, *self.stride, *self.padding)
        self._col = col
        self._oh, self._ow = oh, ow
        out = col @ self.params["W"] + self.params["b"]
        n = x.shape[0]
        return out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, g):
        n = g.shape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(n, self._oh * self._ow, self.out_ch)
        self.grads["W"] += np.einsum("npk,npo->ko", self._col, gmat)
        self.grads["b"] += gmat.sum(axis=(0, 1))
        gcol = gmat @ self.params["W"].T
        return _col2im(
            gcol, self._x_shape, self.kh, self.kw, *self.stride, *self.padding,
            self._oh, self._ow,
        )


class RecurrentCell(Layer):
    """Single-gate recurrent cell, h_t = tanh(x_t Wx + h_{t-1} Wh + b).

    Consumes (N, T, D) sequences and returns the final hidden state.
    """

    def __init__(self, in_dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self._register("Wx", _uniform_fan_in(rng, (in_dim, hidden), in_dim, dtype))
        self._register("Wh", (0.5 / math.sqrt(hidden) * rng.standard_normal((hidden, hidden))).astype(dtype))
        self._register("b", np.zeros(hidden, dtype=dtype))
        self.hidden = hidden

    def forward(self, x):
        if x.ndim != 3:
            raise ValueError(f"RecurrentCell: expected (N, T, D) input, got {x.shape}")
        _expect_last_dim("RecurrentCell", x, self.params["Wx"].shape[0])
        n, t, _ = x.shape
        self._x = x
        hs = np.zeros((t + 1, n, self.hidden), dtype=x.dtype)
        wx, wh, b = self.params["Wx"], self.params["Wh"], self.params["b"]
        xw = x @ wx  # (N, T, H), one big matmul up front
        for i in range(t):
            hs[i + 1] = np.tanh(xw[:, i] + hs[i] @ wh + b)
        self._hs = hs
        return hs[t]

    def backward(self, g):
        x, hs = self._x, self._hs
        n, t, _ = x.shape
        wx, wh = self.params["Wx"], self.params["Wh"]
        gx = np.empty_like(x)
        dh = g
        for i in range(t - 1, -1, -1):
            dz = dh * (1.0 - hs[i + 1] * hs[i + 1])
            self.grads["Wx"] += x[:, i].T @ dz
            self.grads["Wh"] += hs[i].T @ dz
            self.grads["b"] += dz.sum(axis=0)
            gx[:, i] = dz @ wx.T
            dh = dz @ wh.T
        return gx


class GroupedDense(Layer):
    """Block-diagonal dense layer: group g maps its own slice only.

    Equivalent to one big dense layer whose weight matrix is masked to
    blocks, which is what keeps parameter groups isolated.
    """

    def __init__(self, groups, in_dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        w = np.stack(
            [_uniform_fan_in(rng, (in_dim, out_dim), in_dim, dtype) for _ in range(groups)]
        )
        self._register("W", w)
        self._register("b", np.zeros((groups, out_dim), dtype=dtype))
        self.groups = groups

    def forward(self, x):  # (N, G, in)
        w = self.params["W"]
        if x.ndim != 3 or x.shape[1] != self.groups or x.shape[2] != w.shape[1]:
            raise ValueError(
                f"GroupedDense: input shape {x.shape} does not match expected "
                f"(N, {self.groups}, {w.shape[1]})"
            )
        self._x = x
        return np.einsum("ngi,gio->ngo", x, self.params["W"]) + self.params["b"]

    def backward(self, g):
        self.grads["W"] += np.einsum("ngi,ngo->gio", self._x, g)
        self.grads["b"] += g.sum(axis=0)
        return np.einsum("ngo,gio->ngi", g, self.params["W"])


# ---------------------------------------------------------------------------
# Losses


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy_with_logits(logits, target_probs):
    """Per-row CE against a probability target; returns (loss_vec, grad_for_unit_upstream)."""
    m = np.max(logits, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=-1))
    loss = lse - np.sum(target_probs * logits, axis=-1)
    grad = softmax(logits) - target_probs
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer, schedule, gradient utilities


@dataclass
class OptimizerState:
    """AdamW moments keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adamw_init(params: dict[str, np.ndarray], weight_decay: float = 1e-4) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        weight_decay=weight_decay,
    )


def adamw_step(state: OptimizerState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place, deterministic order."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= lr * update


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear 0 -> peak over the warmup, then cosine peak -> 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step >= total_steps:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(np.square(grads[name].astype(np.float64))))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def add_gaussian_noise(x: np.ndarray, std: float, rng) -> np.ndarray:
    if std <= 0:
        return x
    return x + rng.normal(0.0, std, size=x.shape).astype(x.dtype)
