"""Minimal float64 feedforward layers with hand-written backprop.

Only what the codec needs: dense, tanh, strided conv, transposed conv,
and shape plumbing. Everything runs in numpy with exact gradients so the
whole stack stays finite-difference checkable and bit-deterministic.
"""

import numpy as np


class Layer:
    """Base class; layers cache what backward needs during forward."""

    params: list[np.ndarray]
    grads: list[np.ndarray]

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0.0


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, gy):
        self.grads[0] += self._x.T @ gy
        self.grads[1] += gy.sum(axis=0)
        return gy @ self.w.T


class Tanh(Layer):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, gy):
        return gy * (1.0 - self._y**2)


class Reshape(Layer):
    """Fixed reshape of the non-batch dimensions."""

    def __init__(self, shape_out: tuple[int, ...]):
        super().__init__()
        self.shape_out = shape_out
        self._shape_in = None

    def forward(self, x):
        self._shape_in = x.shape[1:]
        return x.reshape((x.shape[0],) + self.shape_out)

    def backward(self, gy):
        return gy.reshape((gy.shape[0],) + self._shape_in)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv2d(Layer):
    """Cross-correlation with stride and symmetric zero padding."""

    def __init__(self, c_in, c_out, kernel, stride, pad, rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = c_in * kernel * kernel
        self.w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, kernel, kernel))
        self.b = np.zeros(c_out)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self._xp = None

    def forward(self, x):
        B, C, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._xp = xp
        out = np.zeros((B, self.c_out, ho, wo))
        for u in range(k):
            for v in range(k):
                patch = xp[:, :, u : u + s * ho : s, v : v + s * wo : s]
                out += np.einsum("oi,biyx->boyx", self.w[:, :, u, v], patch)
        return out + self.b[None, :, None, None]

    def backward(self, gy):
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = gy.shape[2], gy.shape[3]
        gxp = np.zeros_like(self._xp)
        self.grads[1] += gy.sum(axis=(0, 2, 3))
        for u in range(k):
            for v in range(k):
                patch = self._xp[:, :, u : u + s * ho : s, v : v + s * wo : s]
                self.grads[0][:, :, u, v] += np.einsum("boyx,biyx->oi", gy, patch)
                gxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += np.einsum(
                    "oi,boyx->biyx", self.w[:, :, u, v], gy
                )
        if p:
            return gxp[:, :, p:-p, p:-p]
        return gxp


class ConvTranspose2d(Layer):
    """Adjoint of Conv2d; output size pinned by an explicit target."""

    def __init__(self, c_in, c_out, kernel, stride, pad, out_hw, rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.out_hw = out_hw
        fan_in = c_in * kernel * kernel
        self.w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_in, c_out, kernel, kernel))
        self.b = np.zeros(c_out)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self._x = None

    def _check_geometry(self, H, W):
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.out_hw
        # target must be reachable: (H-1)s - 2p + k <= ho <= (H-1)s - 2p + k + s - 1
        base_h = (H - 1) * s - 2 * p + k
        base_w = (W - 1) * s - 2 * p + k
        if not (base_h <= ho < base_h + s and base_w <= wo < base_w + s):
            raise ValueError(
                f"target {self.out_hw} unreachable from input {(H, W)} "
                f"with k={k} s={s} p={p}"
            )

    def forward(self, x):
        B, C, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.out_hw
        self._check_geometry(H, W)
        self._x = x
        canvas = np.zeros((B, self.c_out, ho + 2 * p, wo + 2 * p))
        for u in range(k):
            for v in range(k):
                canvas[:, :, u : u + s * H : s, v : v + s * W : s] += np.einsum(
                    "io,biyx->boyx", self.w[:, :, u, v], x
                )
        out = canvas[:, :, p : p + ho, p : p + wo]
        return out + self.b[None, :, None, None]

    def backward(self, gy):
        B = gy.shape[0]
        k, s, p = self.kernel, self.stride, self.pad
        H, W = self._x.shape[2], self._x.shape[3]
        gcan = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p)))
        self.grads[1] += gy.sum(axis=(0, 2, 3))
        gx = np.zeros_like(self._x)
        for u in range(k):
            for v in range(k):
                patch = gcan[:, :, u : u + s * H : s, v : v + s * W : s]
                self.grads[0][:, :, u, v] += np.einsum("biyx,boyx->io", self._x, patch)
                gx += np.einsum("io,boyx->biyx", self.w[:, :, u, v], patch)
        return gx


class Network:
    """A plain layer sequence with flat parameter-vector access."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _param_arrays(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def _grad_arrays(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self._param_arrays())

    def get_flat(self) -> np.ndarray:
        arrays = self._param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in arrays])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        at = 0
        for p in self._param_arrays():
            p[...] = vec[at : at + p.size].reshape(p.shape)
            at += p.size

    def grad_flat(self) -> np.ndarray:
        arrays = self._grad_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in arrays])

    def sgd_step(self, lr: float):
        for p, g in zip(self._param_arrays(), self._grad_arrays()):
            p -= lr * g
