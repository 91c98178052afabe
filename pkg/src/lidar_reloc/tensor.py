"""Small reverse-mode layer library for the descriptor network.

Activations are float64 NumPy arrays: images channels-last as
``(N, H, W, C)``, vectors as ``(N, D)``. Every layer caches what its backward pass needs during
``forward`` and accumulates parameter gradients in ``backward``, so one
forward must precede each backward.

Checkpoint layout (little endian)::

    b"RLNN"  u32 version  u32 meta_len  meta_json  u32 count
    count x [u16 name_len  name  u8 ndim  u32 dims[ndim]  f64 data[prod(dims)]]
"""

from __future__ import annotations

import json
import struct

import numpy as np


class ShapeError(ValueError):
    pass


class Param:
    """A parameter tensor with its gradient and Adam moment buffers."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape


class Layer:
    def params(self) -> dict[str, Param]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    """Zero padding on height, circular padding on width (NHWC)."""
    if p == 0:
        return x
    x = np.pad(x, ((0, 0), (p, p), (0, 0), (0, 0)))
    return np.concatenate([x[:, :, -p:], x, x[:, :, :p]], axis=2)


class Conv2D(Layer):
    """Same-size cross-correlation, stride 1, odd square kernels.

    Weight layout is ``(out, in, k, k)``; activations are channels-last.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 input_grad: bool = True):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.input_grad = input_grad
        scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = Param(rng.normal(0.0, scale, (c_out, c_in, kernel, kernel)))
        self.bias = Param(np.zeros(c_out))
        self.k = kernel
        self.p = kernel // 2
        self.chunk = 1

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _wmat(self):
        # (out, in, k, k) -> (k*k*in, out), matching the column order below
        return self.weight.value.transpose(2, 3, 1, 0).reshape(-1, self.weight.shape[0])

    def _cols(self, xp, H, W):
        k = self.k
        return np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(k) for j in range(k)],
                              axis=-1).reshape(-1, k * k * xp.shape[-1])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[3] != self.weight.shape[1]:
            raise ShapeError(f"conv2d input {x.shape} (NHWC) does not match weight "
                             f"{self.weight.shape}")
        N, H, W, C = x.shape
        if W < self.p:
            raise ShapeError(f"kernel {self.k} does not fit input {x.shape}")
        xp = _pad(x, self.p)
        Wm = self._wmat()
        F = Wm.shape[1]
        out = np.empty((N, H, W, F))
        for lo in range(0, N, self.chunk):
            cols = self._cols(xp[lo:lo + self.chunk], H, W)
            out[lo:lo + self.chunk] = (cols @ Wm).reshape(-1, H, W, F)
        out += self.bias.value
        self._xp, self._shape = xp, x.shape
        return out

    def backward(self, grad):
        N, H, W, C = self._shape
        xp, p, k = self._xp, self.p, self.k
        Wm = self._wmat()
        F = Wm.shape[1]
        self.bias.grad += grad.sum(axis=(0, 1, 2))
        dW = np.zeros_like(Wm)
        dxp = np.zeros_like(xp) if self.input_grad else None
        for lo in range(0, N, self.chunk):
            gc = grad[lo:lo + self.chunk].reshape(-1, F)
            n = gc.shape[0] // (H * W)
            dW += self._cols(xp[lo:lo + self.chunk], H, W).T @ gc
            if not self.input_grad:
                continue
            dcols = (gc @ Wm.T).reshape(n, H, W, k * k * C)
            for i in range(k):
                for j in range(k):
                    o = (i * k + j) * C
                    dxp[lo:lo + n, i:i + H, j:j + W, :] += dcols[..., o:o + C]
        self.weight.grad += dW.reshape(k, k, C, F).transpose(3, 2, 0, 1)
        if not self.input_grad:
            return None
        if p == 0:
            return dxp
        dx = dxp[:, p:p + H, p:p + W].copy()
        dx[:, :, W - p:] += dxp[:, p:p + H, :p]
        dx[:, :, :p] += dxp[:, p:p + H, p + W:]
        return dx


class MaxPool2D(Layer):
    """2x2 window, stride 2 over NHWC input. Odd sizes are padded by
    replicating the edge.

    Backward routes each window's gradient to its first maximal element in
    row-major window order.
    """

    _OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))

    def forward(self, x):
        N, H, W, C = x.shape
        self._shape = x.shape
        if H % 2:
            x = np.concatenate([x, x[:, -1:]], axis=1)
        if W % 2:
            x = np.concatenate([x, x[:, :, -1:]], axis=2)
        views = [x[:, di::2, dj::2] for di, dj in self._OFFSETS]
        out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for v in views:
            m = (v == out) & ~taken
            taken |= m
            masks.append(m)
        self._masks = masks
        return out

    def backward(self, grad):
        N, H, W, C = self._shape
        Hp, Wp = grad.shape[1], grad.shape[2]
        full = np.empty((N, 2 * Hp, 2 * Wp, C))
        for m, (di, dj) in zip(self._masks, self._OFFSETS):
            full[:, di::2, dj::2] = grad * m
        if not (H % 2 or W % 2):
            return full
        dx = full[:, :H, :W].copy()
        if H % 2:
            dx[:, -1] += full[:, H, :W]
        if W % 2:
            dx[:, :, -1] += full[:, :H, W]
            if H % 2:
                dx[:, -1, -1] += full[:, H, W]
        return dx


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0):
        self.weight = Param(rng.normal(0.0, np.sqrt(gain / n_in), (n_out, n_in)))
        self.bias = Param(np.zeros(n_out))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"dense input {x.shape} does not match weight {self.weight.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return grad * self._mask


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1.0 - self._y ** 2)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    def forward(self, x):
        self._y = softmax(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return y * (grad - np.sum(grad * y, axis=-1, keepdims=True))


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * p.grad
        p.v *= beta2
        p.v += (1 - beta2) * p.grad ** 2
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0


def zero_grad(params) -> None:
    for p in params:
        p.grad[...] = 0.0


CKPT_MAGIC = b"RLNN"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<HB", len(nb), arr.ndim))
            fh.write(nb)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(raw[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", raw, pos)
        pos += 3
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out, meta
