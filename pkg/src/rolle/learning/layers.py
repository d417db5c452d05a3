"""Network layers with explicit forward/backward passes.

Convolutions are valid (no padding) and run as im2col + GEMM; backward
scatters gradients with one slice-add per kernel offset. All layers work in
whatever float dtype their parameters carry, so the same code runs the
float32 production model and the float64 gradient-check model.
"""

from __future__ import annotations

import numpy as np


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(activation: np.ndarray) -> np.ndarray:
    # Derivative taken as 0 at exactly 0.
    return (activation > 0).astype(activation.dtype)


def conv_output_hw(h: int, w: int, k: int, stride: int) -> tuple[int, int]:
    if h < k or w < k:
        raise ValueError(f"kernel {k} does not fit input {h}x{w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


class Conv2D:
    """Valid convolution (kernel k, stride s) with optional ReLU."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int,
                 activation: str = "relu"):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.stride = stride
        self.activation = activation
        self.w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
        self.b = np.zeros((out_ch,), dtype=np.float32)

    def fan_in(self) -> int:
        return self.in_ch * self.k * self.k

    def output_shape(self, in_shape):
        c, h, w = in_shape
        oh, ow = conv_output_hw(h, w, self.k, self.stride)
        return (self.out_ch, oh, ow)

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        oh, ow = conv_output_hw(h, w, self.k, self.stride)
        windows = np.lib.stride_tricks.sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        windows = windows[:, :, :: self.stride, :: self.stride]  # (n, c, oh, ow, k, k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * self.k * self.k)
        return np.ascontiguousarray(cols)

    def forward(self, x: np.ndarray, want_cache: bool):
        n = x.shape[0]
        oh, ow = conv_output_hw(x.shape[2], x.shape[3], self.k, self.stride)
        cols = self._im2col(x)
        w_mat = self.w.reshape(self.out_ch, -1)
        z = cols @ w_mat.T + self.b
        z = z.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)
        a = relu(z) if self.activation == "relu" else z
        cache = (cols, x.shape, a) if want_cache else None
        return a, cache

    def backward(self, grad_out: np.ndarray, cache):
        cols, x_shape, a = cache
        if self.activation == "relu":
            grad_out = grad_out * relu_grad(a)
        n, _, oh, ow = grad_out.shape
        g_mat = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_ch)

        db = g_mat.sum(axis=0)
        dw = (g_mat.T @ cols).reshape(self.w.shape)

        dcols = g_mat @ self.w.reshape(self.out_ch, -1)
        dcols = dcols.reshape(n, oh, ow, self.in_ch, self.k, self.k).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, :, :, i, j]
        return dx, [dw, db]

    def params(self):
        return [self.w, self.b]

    def set_params(self, tensors):
        self.w, self.b = tensors


class Dense:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.w = np.zeros((out_dim, in_dim), dtype=np.float32)
        self.b = np.zeros((out_dim,), dtype=np.float32)

    def fan_in(self) -> int:
        return self.in_dim

    def output_shape(self, in_shape):
        return (self.out_dim,)

    def forward(self, x: np.ndarray, want_cache: bool):
        z = x @ self.w.T + self.b
        a = relu(z) if self.activation == "relu" else z
        cache = (x, a) if want_cache else None
        return a, cache

    def backward(self, grad_out: np.ndarray, cache):
        x, a = cache
        if self.activation == "relu":
            grad_out = grad_out * relu_grad(a)
        dw = grad_out.T @ x
        db = grad_out.sum(axis=0)
        dx = grad_out @ self.w
        return dx, [dw, db]

    def params(self):
        return [self.w, self.b]

    def set_params(self, tensors):
        self.w, self.b = tensors


class Flatten:
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x: np.ndarray, want_cache: bool):
        n = x.shape[0]
        out = x.reshape(n, -1)
        cache = x.shape if want_cache else None
        return out, cache

    def backward(self, grad_out: np.ndarray, cache):
        return grad_out.reshape(cache), []

    def params(self):
        return []

    def set_params(self, tensors):
        pass
