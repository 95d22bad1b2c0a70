"""Network layers with hand-written backward passes.

Every layer is a small object with ``forward(params, *inputs) -> (out, cache)``
and ``backward(params, cache, grad_out) -> (grad_inputs, grad_params)``.
Parameters live in one flat dict owned by the network, keyed
``"<layer name>.<param>"``; layers never mutate their inputs.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class Conv3:
    """3x3x3 convolution, padding 1."""

    def __init__(self, name, cin, cout, stride=1, bias=False):
        self.name, self.cin, self.cout, self.stride, self.bias = name, cin, cout, stride, bias

    def param_shapes(self):
        shapes = {f"{self.name}.w": (self.cout, self.cin, 3, 3, 3)}
        if self.bias:
            shapes[f"{self.name}.b"] = (self.cout,)
        return shapes

    def fan_in(self):
        return self.cin * 27

    def forward(self, params, x):
        out = kernels.conv3d(x, params[f"{self.name}.w"], self.stride)
        if self.bias:
            out += params[f"{self.name}.b"].reshape(1, -1, 1, 1, 1)
        return out, x

    def backward(self, params, x, g):
        dx, dw = kernels.conv3d_backward(x, params[f"{self.name}.w"], g, self.stride)
        grads = {f"{self.name}.w": dw}
        if self.bias:
            grads[f"{self.name}.b"] = g.sum(axis=(0, 2, 3, 4))
        return (dx,), grads


class InstanceNorm:
    """Per-sample, per-channel standardisation followed by a channel affine."""

    def __init__(self, name, channels, eps=1e-5):
        self.name, self.channels, self.eps = name, channels, eps

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def forward(self, params, x):
        xhat, inv = kernels.instance_norm(x, self.eps)
        gamma = params[f"{self.name}.gamma"].reshape(1, -1, 1, 1, 1)
        beta = params[f"{self.name}.beta"].reshape(1, -1, 1, 1, 1)
        return xhat * gamma + beta, (xhat, inv)

    def backward(self, params, cache, g):
        xhat, inv = cache
        gamma = params[f"{self.name}.gamma"].reshape(1, -1, 1, 1, 1)
        grads = {
            f"{self.name}.gamma": (g * xhat).sum(axis=(0, 2, 3, 4)),
            f"{self.name}.beta": g.sum(axis=(0, 2, 3, 4)),
        }
        gh = g * gamma
        dx = inv * (
            gh - gh.mean(axis=(2, 3, 4), keepdims=True) - xhat * (gh * xhat).mean(axis=(2, 3, 4), keepdims=True)
        )
        return (dx,), grads


class LeakyReLU:
    name = "leaky_relu"

    def __init__(self, slope=0.01):
        self.slope = slope

    def param_shapes(self):
        return {}

    def forward(self, params, x):
        neg = x < 0
        return np.where(neg, x * self.slope, x), neg

    def backward(self, params, neg, g):
        return (np.where(neg, g * self.slope, g),), {}


class UpConv:
    """Transposed convolution, kernel 2, stride 2 (non-overlapping blocks)."""

    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def param_shapes(self):
        return {f"{self.name}.w": (self.cin, self.cout, 2, 2, 2), f"{self.name}.b": (self.cout,)}

    def fan_in(self):
        return self.cin

    def forward(self, params, x):
        n, ci, d, h, w = x.shape
        wt = params[f"{self.name}.w"]
        flat = x.transpose(0, 2, 3, 4, 1).reshape(-1, ci)
        y = (flat @ wt.reshape(ci, -1)).reshape(n, d, h, w, self.cout, 2, 2, 2)
        y = y.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, self.cout, 2 * d, 2 * h, 2 * w)
        y += params[f"{self.name}.b"].reshape(1, -1, 1, 1, 1)
        return np.ascontiguousarray(y), x

    def backward(self, params, x, g):
        n, ci, d, h, w = x.shape
        wt = params[f"{self.name}.w"]
        gb = g.reshape(n, self.cout, d, 2, h, 2, w, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(n * d * h * w, -1)
        flat = x.transpose(0, 2, 3, 4, 1).reshape(-1, ci)
        dw = (flat.T @ gb).reshape(wt.shape)
        dx = (gb @ wt.reshape(ci, -1).T).reshape(n, d, h, w, ci).transpose(0, 4, 1, 2, 3)
        return (np.ascontiguousarray(dx),), {f"{self.name}.w": dw, f"{self.name}.b": g.sum(axis=(0, 2, 3, 4))}


class Pointwise:
    """1x1x1 convolution."""

    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def param_shapes(self):
        return {f"{self.name}.w": (self.cout, self.cin), f"{self.name}.b": (self.cout,)}

    def fan_in(self):
        return self.cin

    def forward(self, params, x):
        y = np.einsum("oc,ncdhw->nodhw", params[f"{self.name}.w"], x)
        return y + params[f"{self.name}.b"].reshape(1, -1, 1, 1, 1), x

    def backward(self, params, x, g):
        w = params[f"{self.name}.w"]
        dw = np.einsum("nodhw,ncdhw->oc", g, x)
        dx = np.einsum("oc,nodhw->ncdhw", w, g)
        return (dx,), {f"{self.name}.w": dw, f"{self.name}.b": g.sum(axis=(0, 2, 3, 4))}


class Concat:
    """Channel concatenation of two tensors with equal spatial shape."""

    name = "concat"

    def param_shapes(self):
        return {}

    def forward(self, params, a, b):
        return np.concatenate([a, b], axis=1), a.shape[1]

    def backward(self, params, split, g):
        return (g[:, :split], g[:, split:]), {}


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
