"""Mapping network, generator and discriminator assembly.

Canonical geometry: 100-d latents, generator channel plan
100-512-256-128-64-3 (kernel 4, first block stride 1 / pad 0, the rest
stride 2 / pad 1), discriminator plan 3-64-128-256-512-1 (stride 2 / pad 1
except the final stride 1 / pad 0 layer). Smaller plans with the same
pattern are accepted for fast tests.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    AdaIN,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    Linear,
    ReLU,
    Sigmoid,
    Tanh,
    power_iteration_step,
)

LATENT_DIM = 100
GENERATOR_PLAN = (100, 512, 256, 128, 64, 3)
DISCRIMINATOR_PLAN = (3, 64, 128, 256, 512, 1)
GENERATOR_MODES = ("adain", "mapping_only", "none")

INIT_STD = 0.02
SN_WARMUP_ITERATIONS = 30


class MappingNetwork:
    """4-layer MLP from latent space to style space, same width throughout."""

    def __init__(self, dim=LATENT_DIM, n_layers=4, slope=0.2, dtype=np.float32):
        self.dim = dim
        self.layers = [Linear(dim, dim, dtype=dtype) for _ in range(n_layers)]
        self.acts = [LeakyReLU(slope) for _ in range(n_layers)]

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"latent batch must be (N, {self.dim}), got {z.shape}")
        h = z
        for lin, act in zip(self.layers, self.acts):
            h = act.forward(lin.forward(h))
        return h

    def backward(self, dw):
        for lin, act in zip(reversed(self.layers), reversed(self.acts)):
            dw = lin.backward(act.backward(dw))
        return dw

    def named_params(self):
        out = {}
        for i, lin in enumerate(self.layers):
            for k, v in lin.params().items():
                out[f"mapping.{i}.{k}"] = v
        return out

    def named_grads(self):
        out = {}
        for i, lin in enumerate(self.layers):
            for k, v in lin.grads().items():
                out[f"mapping.{i}.{k}"] = v
        return out

    def named_buffers(self):
        return {}


class _GenBlock:
    def __init__(self, in_c, out_c, stride, padding, norm, act, dtype):
        self.deconv = ConvTranspose2d(in_c, out_c, 4, stride, padding, dtype=dtype)
        self.norm = norm  # AdaIN | BatchNorm2d | None
        self.act = act


class Generator:
    """Transposed-conv synthesis stack driven by a mapped style vector.

    mode 'adain': latent -> mapping -> style w; w seeds the stack and
    conditions an AdaIN layer after every block but the last.
    mode 'mapping_only': mapping runs and seeds the stack, but blocks use
    plain batch norm (style-injection ablation).
    mode 'none': no mapping head at all, plain batch norm (DCGAN control).
    """

    def __init__(self, mode="adain", channel_plan=GENERATOR_PLAN,
                 w_dim=LATENT_DIM, dtype=np.float32):
        if mode not in GENERATOR_MODES:
            raise ConfigError(f"unknown generator mode {mode!r}")
        if channel_plan[0] != w_dim:
            raise ConfigError("channel plan must start at the latent width")
        self.mode = mode
        self.w_dim = w_dim
        self.channel_plan = tuple(channel_plan)
        self.mapping = (
            MappingNetwork(w_dim, dtype=dtype) if mode != "none" else None
        )
        self.blocks = []
        n_blocks = len(channel_plan) - 1
        for i in range(n_blocks):
            last = i == n_blocks - 1
            stride, padding = (1, 0) if i == 0 else (2, 1)
            if last:
                norm = None
            elif mode == "adain":
                norm = AdaIN(channel_plan[i + 1], w_dim, dtype=dtype)
            else:
                norm = BatchNorm2d(channel_plan[i + 1], dtype=dtype)
            act = Tanh() if last else ReLU()
            self.blocks.append(
                _GenBlock(channel_plan[i], channel_plan[i + 1], stride, padding, norm, act, dtype)
            )

    @property
    def output_size(self):
        return 4 * 2 ** (len(self.blocks) - 1)

    def forward(self, z, training=False):
        if z.ndim != 2 or z.shape[1] != self.w_dim:
            raise ShapeError(f"latent batch must be (N, {self.w_dim}), got {z.shape}")
        n = z.shape[0]
        w = self.mapping.forward(z) if self.mapping is not None else z
        h = w.reshape(n, self.w_dim, 1, 1)
        for blk in self.blocks:
            h = blk.deconv.forward(h)
            if isinstance(blk.norm, AdaIN):
                h = blk.norm.forward(h, w)
            elif isinstance(blk.norm, BatchNorm2d):
                h = blk.norm.forward(h, training=training)
            h = blk.act.forward(h)
        self._last_w_shape = w.shape
        return h

    def backward(self, dy):
        """Backprop an image-space gradient; accumulates all parameter grads."""
        dw_total = np.zeros(self._last_w_shape, dtype=dy.dtype)
        h = dy
        for blk in reversed(self.blocks):
            h = blk.act.backward(h)
            if isinstance(blk.norm, AdaIN):
                h, dw = blk.norm.backward(h)
                dw_total += dw
            elif isinstance(blk.norm, BatchNorm2d):
                h = blk.norm.backward(h)
            h = blk.deconv.backward(h)
        dw_total += h.reshape(self._last_w_shape)
        if self.mapping is not None:
            return self.mapping.backward(dw_total)
        return dw_total

    def named_params(self):
        out = dict(self.mapping.named_params()) if self.mapping else {}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.deconv.params().items():
                out[f"blocks.{i}.deconv.{k}"] = v
            if blk.norm is not None:
                for k, v in blk.norm.params().items():
                    out[f"blocks.{i}.norm.{k}"] = v
        return out

    def named_grads(self):
        out = dict(self.mapping.named_grads()) if self.mapping else {}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.deconv.grads().items():
                out[f"blocks.{i}.deconv.{k}"] = v
            if blk.norm is not None:
                for k, v in blk.norm.grads().items():
                    out[f"blocks.{i}.norm.{k}"] = v
        return out

    def named_buffers(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            if blk.norm is not None:
                for k, v in blk.norm.buffers().items():
                    out[f"blocks.{i}.norm.{k}"] = v
        return out

    def zero_grad(self):
        _zero(self.named_grads())


class Discriminator:
    """Conv classifier emitting a real-vs-fake probability per sample.

    Spectral normalization (when enabled) covers every kernel; batch norm
    covers all layers except the first and last; leaky-ReLU slope 0.01.
    """

    def __init__(self, channel_plan=DISCRIMINATOR_PLAN, sn_enabled=True,
                 dtype=np.float32):
        self.channel_plan = tuple(channel_plan)
        self.sn_enabled = sn_enabled
        n = len(channel_plan) - 1
        self.convs = []
        self.bns = {}
        self.acts = []
        for i in range(n):
            last = i == n - 1
            stride, padding = (1, 0) if last else (2, 1)
            self.convs.append(
                Conv2d(channel_plan[i], channel_plan[i + 1], 4, stride, padding,
                       spectral_norm=sn_enabled, dtype=dtype)
            )
            if 0 < i < n - 1:
                self.bns[i] = BatchNorm2d(channel_plan[i + 1], dtype=dtype)
            self.acts.append(Sigmoid() if last else LeakyReLU(0.01))

    @property
    def input_size(self):
        return 4 * 2 ** (len(self.convs) - 1)

    def forward(self, x, training=False, update_spectral=True):
        if x.ndim != 4 or x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ShapeError(
                f"discriminator expects (N,{self.channel_plan[0]},"
                f"{self.input_size},{self.input_size}), got {x.shape}"
            )
        advance = training and update_spectral and self.sn_enabled
        h = x
        for i, conv in enumerate(self.convs):
            h = conv.forward(h, update_spectral=advance)
            if i in self.bns:
                h = self.bns[i].forward(h, training=training)
            h = self.acts[i].forward(h)
        return h.reshape(x.shape[0])

    def backward(self, dp):
        """Backprop d(loss)/d(probability); returns d(loss)/d(input image)."""
        h = dp.reshape(dp.shape[0], 1, 1, 1)
        for i in reversed(range(len(self.convs))):
            h = self.acts[i].backward(h)
            if i in self.bns:
                h = self.bns[i].backward(h)
            h = self.convs[i].backward(h)
        return h

    def named_params(self):
        out = {}
        for i, conv in enumerate(self.convs):
            for k, v in conv.params().items():
                out[f"convs.{i}.{k}"] = v
            if i in self.bns:
                for k, v in self.bns[i].params().items():
                    out[f"bns.{i}.{k}"] = v
        return out

    def named_grads(self):
        out = {}
        for i, conv in enumerate(self.convs):
            for k, v in conv.grads().items():
                out[f"convs.{i}.{k}"] = v
            if i in self.bns:
                for k, v in self.bns[i].grads().items():
                    out[f"bns.{i}.{k}"] = v
        return out

    def named_buffers(self):
        out = {}
        for i, conv in enumerate(self.convs):
            for k, v in conv.buffers().items():
                out[f"convs.{i}.{k}"] = v
            if i in self.bns:
                for k, v in self.bns[i].buffers().items():
                    out[f"bns.{i}.{k}"] = v
        return out

    def zero_grad(self):
        _zero(self.named_grads())


def _zero(grad_dict):
    for g in grad_dict.values():
        g[...] = 0


def count_parameters(net) -> int:
    """Total learnable entries; excludes every buffer."""
    return int(sum(p.size for p in net.named_params().values()))


def init_weights(net, seed_or_rng):
    """DCGAN-convention initialization, fully determined by the seed.

    Conv / deconv / linear weights ~ N(0, 0.02^2); linear biases 0; batch
    norm gamma ~ N(1, 0.02^2), beta 0; AdaIN scale-head bias 1 and shift-head
    bias 0 so a freshly initialized AdaIN is close to an identity affine.
    Spectrally normalized kernels get a power-iteration warm-up so sigma
    estimates start converged.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )

    def draw(arr, loc=0.0):
        arr[...] = rng.normal(loc, INIT_STD, arr.shape).astype(arr.dtype)

    if isinstance(net, MappingNetwork):
        for lin in net.layers:
            draw(lin.weight)
            lin.bias[...] = 0
    elif isinstance(net, Generator):
        if net.mapping is not None:
            init_weights(net.mapping, rng)
        for blk in net.blocks:
            draw(blk.deconv.weight)
            if isinstance(blk.norm, AdaIN):
                draw(blk.norm.alpha_layer.weight)
                blk.norm.alpha_layer.bias[...] = 1
                draw(blk.norm.beta_layer.weight)
                blk.norm.beta_layer.bias[...] = 0
            elif isinstance(blk.norm, BatchNorm2d):
                draw(blk.norm.gamma, loc=1.0)
                blk.norm.beta[...] = 0
    elif isinstance(net, Discriminator):
        for conv in net.convs:
            draw(conv.weight)
            if conv.spectral is not None:
                w_mat = conv.weight.reshape(conv.weight.shape[0], -1)
                for _ in range(SN_WARMUP_ITERATIONS):
                    power_iteration_step(w_mat, conv.spectral)
        for bn in net.bns.values():
            draw(bn.gamma, loc=1.0)
            bn.beta[...] = 0
    else:
        raise TypeError(f"cannot initialize {type(net).__name__}")


def interpolate_latents(z1: np.ndarray, z2: np.ndarray, steps: int) -> np.ndarray:
    """Evenly spaced linear path from z1 to z2 inclusive, shape (steps, dim)."""
    if steps < 2:
        raise ConfigError("interpolation needs at least 2 steps")
    if z1.shape != z2.shape:
        raise ShapeError("endpoint latents must share a shape")
    t = np.arange(steps, dtype=np.float64) / (steps - 1)
    out = (1.0 - t)[:, None] * z1[None, :].astype(np.float64) + t[:, None] * z2[None, :].astype(np.float64)
    return out.astype(z1.dtype)
