"""Layer primitives with hand-derived forward and backward passes.

Everything operates on plain numpy arrays laid out (batch, channel, height,
width) for image tensors. Layers cache whatever the backward pass needs on
`forward`; gradients accumulate into `g_*` arrays so a step may run several
backward passes before the optimizer consumes them. Dtypes follow the
parameters (float32 in training, float64 in the gradient-check suite).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_NORM_EPS = 1e-5
_SN_EPS = 1e-12


# ---------------------------------------------------------------------------
# im2col machinery shared by both convolution directions
# ---------------------------------------------------------------------------

def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"invalid conv geometry: size={size} k={k} stride={stride} pad={padding}"
        )
    return out


def deconv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size - 1) * stride - 2 * padding + k
    if out < 1:
        raise ShapeError(
            f"invalid deconv geometry: size={size} k={k} stride={stride} pad={padding}"
        )
    return out


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (C*k*k, N*out_h*out_w) patch matrix, gemm-ready."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x, (n, c, k, k, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return win.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, n * oh * ow)


def col2im(
    cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int
) -> np.ndarray:
    """Adjoint of im2col: scatter-add (C*k*k, N*oh*ow) patches to (N,C,H,W)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(w, k, stride, padding)
    c6 = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                c6[:, i, j].transpose(1, 0, 2, 3)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------

class Linear:
    """y = x @ W.T + b for batched row vectors."""

    def __init__(self, in_features, out_features, bias=True, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype) if bias else None
        self.g_weight = np.zeros_like(self.weight)
        self.g_bias = np.zeros_like(self.bias) if bias else None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"linear expects (N, {self.in_features}), got {x.shape}"
            )
        self._x = x
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.g_weight += dy.T @ self._x
        if self.bias is not None:
            self.g_bias += dy.sum(axis=0)
        return dy @ self.weight

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def grads(self):
        g = {"weight": self.g_weight}
        if self.bias is not None:
            g["bias"] = self.g_bias
        return g

    def buffers(self):
        return {}


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class LeakyReLU:
    def __init__(self, slope=0.0):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"leaky-relu slope must be in [0,1), got {slope}")
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x >= 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._mask, dy, self.slope * dy)


class ReLU(LeakyReLU):
    def __init__(self):
        super().__init__(0.0)


class Tanh:
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y * self._y)


class Sigmoid:
    def forward(self, x):
        # split by sign for overflow-free evaluation
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


_ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "sigmoid": Sigmoid}


def make_activation(kind: str, slope: float = 0.2):
    """Activation factory; `kind` is one of relu/leaky_relu/tanh/sigmoid."""
    if kind == "leaky_relu":
        return LeakyReLU(slope)
    try:
        return _ACTIVATIONS[kind]()
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def apply_activation(x: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    return make_activation(kind, slope).forward(x)


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------

class SpectralState:
    """Persistent power-iteration vectors for one weight matrix.

    `u` (length out) and `v` (length in) are buffers, not parameters; they
    advance only when an update is explicitly requested, so evaluation-mode
    forwards are pure.
    """

    def __init__(self, out_dim, in_dim, n_power_iterations=1, eps=_SN_EPS, dtype=np.float32):
        self.u = np.full(out_dim, 1.0 / np.sqrt(out_dim), dtype=dtype)
        self.v = np.full(in_dim, 1.0 / np.sqrt(in_dim), dtype=dtype)
        self.n_power_iterations = int(n_power_iterations)
        self.eps = eps

    def buffers(self):
        return {"u": self.u, "v": self.v}


def power_iteration_step(w_mat: np.ndarray, state: SpectralState) -> float:
    """One alternating power-iteration update; returns the sigma estimate.

    A zero (or numerically zero) matrix leaves the state untouched and
    reports sigma = eps.
    """
    v = w_mat.T @ state.u
    nv = np.linalg.norm(v)
    if nv < state.eps:
        return state.eps
    v /= nv
    u = w_mat @ v
    nu = np.linalg.norm(u)
    if nu < state.eps:
        return state.eps
    u /= nu
    state.u[...] = u
    state.v[...] = v
    return float(u @ (w_mat @ v))


def spectral_sigma(w_mat: np.ndarray, state: SpectralState) -> float:
    """Sigma estimate from the frozen state (no buffer mutation)."""
    return max(float(state.u @ (w_mat @ state.v)), state.eps)


def spectral_normalize(kernel: np.ndarray, state: SpectralState, update: bool = False):
    """Divide a kernel by its estimated largest singular value.

    The kernel is viewed as a matrix (first axis) x (rest flattened). Returns
    (normalized kernel, sigma); the state advances only when `update` is set.
    """
    w_mat = kernel.reshape(kernel.shape[0], -1)
    if update:
        sigma = state.eps
        for _ in range(state.n_power_iterations):
            sigma = power_iteration_step(w_mat, state)
        sigma = max(sigma, state.eps)
    else:
        sigma = spectral_sigma(w_mat, state)
    return kernel / sigma, sigma


def _spectral_backward(g_norm: np.ndarray, kernel_norm: np.ndarray, sigma: float,
                       state: SpectralState) -> np.ndarray:
    """Chain d(loss)/d(W/sigma) back to W, with u and v held constant."""
    inner = float(np.sum(g_norm * kernel_norm))
    uv = np.outer(state.u, state.v).reshape(kernel_norm.shape)
    return (g_norm - inner * uv) / sigma


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

class Conv2d:
    """Strided cross-correlation without bias, optionally spectrally normalized."""

    def __init__(self, in_channels, out_channels, k, stride, padding,
                 spectral_norm=False, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, k, k), dtype=dtype)
        self.g_weight = np.zeros_like(self.weight)
        self.spectral = (
            SpectralState(out_channels, in_channels * k * k, dtype=dtype)
            if spectral_norm else None
        )
        self._cache = None

    def set_spectral(self, enabled: bool):
        if enabled and self.spectral is None:
            self.spectral = SpectralState(
                self.out_channels, self.in_channels * self.k * self.k,
                dtype=self.weight.dtype,
            )
        elif not enabled:
            self.spectral = None

    def effective_weight(self, update_spectral=False):
        if self.spectral is None:
            return self.weight, None
        return spectral_normalize(self.weight, self.spectral, update=update_spectral)

    def forward(self, x, update_spectral=False):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        w_eff, sigma = self.effective_weight(update_spectral)
        oh = conv_out_size(h, self.k, self.stride, self.padding)
        ow = conv_out_size(w, self.k, self.stride, self.padding)
        cols_big = im2col(x, self.k, self.stride, self.padding)
        # one big gemm over all batch positions beats N small ones
        w_mat = w_eff.reshape(self.out_channels, -1)
        y = (w_mat @ cols_big).reshape(self.out_channels, n, oh, ow)
        self._cache = (cols_big, x.shape, w_eff, sigma)
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))

    def backward(self, dy):
        cols_big, x_shape, w_eff, sigma = self._cache
        n, _, oh, ow = dy.shape
        dy_big = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(
            self.out_channels, n * oh * ow
        )
        g_eff = (dy_big @ cols_big.T).reshape(self.weight.shape)
        if self.spectral is not None:
            self.g_weight += _spectral_backward(g_eff, w_eff, sigma, self.spectral)
        else:
            self.g_weight += g_eff
        w_mat = w_eff.reshape(self.out_channels, -1)
        dcols_big = w_mat.T @ dy_big
        return col2im(dcols_big, x_shape, self.k, self.stride, self.padding)

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.g_weight}

    def buffers(self):
        if self.spectral is None:
            return {}
        return {"sn_" + k: v for k, v in self.spectral.buffers().items()}


class ConvTranspose2d:
    """Fractionally strided convolution; exact adjoint of Conv2d, no bias."""

    def __init__(self, in_channels, out_channels, k, stride, padding, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((in_channels, out_channels, k, k), dtype=dtype)
        self.g_weight = np.zeros_like(self.weight)
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"deconv expects {self.in_channels} channels, got {c}")
        oh = deconv_out_size(h, self.k, self.stride, self.padding)
        ow = deconv_out_size(w, self.k, self.stride, self.padding)
        x_big = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
        w_mat = self.weight.reshape(self.in_channels, -1)
        cols_big = w_mat.T @ x_big  # (C_out*k*k, N*h*w)
        y = col2im(cols_big, (n, self.out_channels, oh, ow), self.k, self.stride, self.padding)
        self._cache = (x_big, (n, c, h, w), (oh, ow))
        return y

    def backward(self, dy):
        x_big, x_shape, _ = self._cache
        n, c, h, w = x_shape
        dcols_big = im2col(dy, self.k, self.stride, self.padding)
        self.g_weight += (x_big @ dcols_big.T).reshape(self.weight.shape)
        w_mat = self.weight.reshape(self.in_channels, -1)
        dx = (w_mat @ dcols_big).reshape(c, n, h, w)
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.g_weight}

    def buffers(self):
        return {}


# ---------------------------------------------------------------------------
# Normalization layers
# ---------------------------------------------------------------------------

class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Uses biased variance both for normalization and for the running buffer;
    momentum follows new = (1-m)*old + m*batch.
    """

    def __init__(self, channels, eps=_NORM_EPS, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {c}")
        if training:
            if n * h * w <= 1:
                raise ShapeError("batch statistics are degenerate for a single element")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, dy):
        xhat, inv_std, training = self._cache
        self.g_gamma += (dy * xhat).sum(axis=(0, 2, 3))
        self.g_beta += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma[None, :, None, None]
        if not training:
            return dxhat * inv_std[None, :, None, None]
        n, _, h, w = dy.shape
        m = n * h * w
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (
            m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
        )

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.g_gamma, "beta": self.g_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def instance_stats(x: np.ndarray):
    """Per-sample, per-channel spatial mean and biased variance: (N,C) each."""
    if x.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W), got {x.shape}")
    return x.mean(axis=(2, 3)), x.var(axis=(2, 3))


class AdaIN:
    """Instance normalization followed by a style-conditioned affine transform.

    scale and shift come from two learnable linear maps of the style vector;
    the normalization core itself has no parameters.
    """

    def __init__(self, channels, w_dim=100, eps=_NORM_EPS, dtype=np.float32):
        self.channels = channels
        self.w_dim = w_dim
        self.eps = eps
        self.alpha_layer = Linear(w_dim, channels, dtype=dtype)
        self.beta_layer = Linear(w_dim, channels, dtype=dtype)
        self._cache = None

    def forward(self, x, w):
        n, c, h, ww = x.shape
        if c != self.channels:
            raise ShapeError(f"adain expects {self.channels} channels, got {c}")
        if w.ndim != 2 or w.shape != (n, self.w_dim):
            raise ShapeError(f"style batch must be ({n}, {self.w_dim}), got {w.shape}")
        alpha = self.alpha_layer.forward(w)  # (N, C)
        beta = self.beta_layer.forward(w)
        mu, var = instance_stats(x)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[:, :, None, None]) * inv_std[:, :, None, None]
        self._cache = (xhat, inv_std, alpha)
        return alpha[:, :, None, None] * xhat + beta[:, :, None, None]

    def backward(self, dy):
        """Returns (dx, dw); accumulates the affine layers' gradients."""
        xhat, inv_std, alpha = self._cache
        d_alpha = (dy * xhat).sum(axis=(2, 3))
        d_beta = dy.sum(axis=(2, 3))
        dw = self.alpha_layer.backward(d_alpha) + self.beta_layer.backward(d_beta)
        dxhat = dy * alpha[:, :, None, None]
        _, _, h, w = dy.shape
        m = h * w
        sum_dxhat = dxhat.sum(axis=(2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        dx = (inv_std[:, :, None, None] / m) * (
            m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
        )
        return dx, dw

    def params(self):
        out = {}
        for prefix, layer in (("alpha", self.alpha_layer), ("beta", self.beta_layer)):
            for k, v in layer.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for prefix, layer in (("alpha", self.alpha_layer), ("beta", self.beta_layer)):
            for k, v in layer.grads().items():
                out[f"{prefix}.{k}"] = v
        return out

    def buffers(self):
        return {}


def adain_forward(x, w, params: AdaIN):
    return params.forward(x, w)
