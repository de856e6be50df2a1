"""Adversarial optimization: BCE criterion, Adam, strict 1:1 alternation.

The whole run is a pure function of (config, dataset order, seed). All
stochastic draws come from three streams derived from the config seed:
weight init, the fixed validation noise panel, and the training stream
(fresh fake-batch noise). Only the training stream has state that evolves
across steps, and it is captured in checkpoints so resumed runs replay the
uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, parse_config, render_config
from .data import make_batches
from .errors import ConfigError, TrainingDiverged
from .networks import (
    Discriminator,
    Generator,
    LATENT_DIM,
    count_parameters,
    init_weights,
)

BCE_CLAMP_EPS = 1e-7
VAL_CHUNK = 64


# ---------------------------------------------------------------------------
# Criterion
# ---------------------------------------------------------------------------

def _clamped(predictions):
    predictions = np.asarray(predictions, dtype=np.float64)
    return np.clip(predictions, BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)


def _check_targets(targets):
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("BCE targets must be 0 or 1")
    return targets


def bce_loss(predictions, targets) -> float:
    """Negative mean log-likelihood of hard binary targets."""
    p = _clamped(predictions)
    y = _check_targets(targets)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_grad(predictions, targets) -> np.ndarray:
    """d(bce_loss)/d(predictions), zero where the clamp is active."""
    raw = np.asarray(predictions, dtype=np.float64)
    p = _clamped(raw)
    y = _check_targets(targets)
    g = (-(y / p) + (1.0 - y) / (1.0 - p)) / p.size
    g[raw != p] = 0.0
    return g.astype(np.asarray(predictions).dtype, copy=False)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam updating parameter arrays in place."""

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: dict):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    d_loss: float
    g_loss: float
    d_real_prob: float
    d_fake_prob: float
    g_grad_norm: float

    def finite(self):
        return all(
            math.isfinite(v)
            for v in (self.d_loss, self.g_loss, self.d_real_prob,
                      self.d_fake_prob, self.g_grad_norm)
        )


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)  # (epoch, value)

    def append(self, record: StepRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(record)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def _sample_noise(rng, n, dtype):
    return rng.standard_normal((n, LATENT_DIM)).astype(dtype)


def _param_dtype(net):
    return next(iter(net.named_params().values())).dtype


def _grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def train_discriminator_step(real_batch, G, D, opt_D, rng):
    """One discriminator update on real + freshly generated fake images.

    The fake batch is detached: no gradient reaches the generator. Spectral
    buffers advance once (on the real forward); the fake forward reuses the
    same sigma estimate so both halves of the loss see the same weights.
    """
    n = real_batch.shape[0]
    dtype = _param_dtype(D)
    z = _sample_noise(rng, n, dtype)
    fake = G.forward(z, training=True)

    D.zero_grad()
    p_real = D.forward(real_batch, training=True, update_spectral=True)
    loss_real = bce_loss(p_real, np.ones(n))
    D.backward(bce_grad(p_real, np.ones(n)))
    p_fake = D.forward(fake, training=True, update_spectral=False)
    loss_fake = bce_loss(p_fake, np.zeros(n))
    D.backward(bce_grad(p_fake, np.zeros(n)))

    d_loss = loss_real + loss_fake
    if not math.isfinite(d_loss):
        raise TrainingDiverged(f"discriminator loss is not finite: {d_loss}")
    opt_D.step(D.named_grads())
    return d_loss, float(p_real.mean()), float(p_fake.mean())


def train_generator_step(G, D, opt_G, rng, batch_size):
    """One non-saturating generator update: push D(G(z)) toward the real label.

    Discriminator parameters are left untouched (its gradients are discarded)
    and its spectral buffers do not advance here.
    """
    dtype = _param_dtype(G)
    z = _sample_noise(rng, batch_size, dtype)
    G.zero_grad()
    D.zero_grad()
    fake = G.forward(z, training=True)
    p = D.forward(fake, training=True, update_spectral=False)
    ones = np.ones(batch_size)
    g_loss = bce_loss(p, ones)
    if not math.isfinite(g_loss):
        raise TrainingDiverged(f"generator loss is not finite: {g_loss}")
    dx = D.backward(bce_grad(p, ones))
    G.backward(dx)
    grads = G.named_grads()
    grad_norm = _grad_norm(grads)
    opt_G.step(grads)
    D.zero_grad()
    return g_loss, grad_norm


def validation_generator_loss(G, D, val_noise) -> float:
    """BCE of D(G(fixed noise)) against the real label, all in eval mode."""
    preds = []
    for lo in range(0, val_noise.shape[0], VAL_CHUNK):
        chunk = val_noise[lo : lo + VAL_CHUNK]
        fake = G.forward(chunk, training=False)
        preds.append(D.forward(fake, training=False, update_spectral=False))
    return bce_loss(np.concatenate(preds), np.ones(val_noise.shape[0]))


# ---------------------------------------------------------------------------
# Trainer state and the epoch loop
# ---------------------------------------------------------------------------

STATE_FORMAT_KEYS = ("epoch", "step", "batch_in_epoch", "best_val", "best_epoch")


class Trainer:
    """All mutable training state for one run, capturable to flat tensors."""

    def __init__(self, config: TrainConfig, dtype=np.float32):
        self.config = config
        self.G = Generator(config.generator_mode, dtype=dtype)
        self.D = Discriminator(sn_enabled=config.sn_enabled, dtype=dtype)
        init_weights(self.G, np.random.default_rng([config.seed, 0]))
        init_weights(self.D, np.random.default_rng([config.seed, 0, 1]))
        self.val_noise = (
            np.random.default_rng([config.seed, 1])
            .standard_normal((config.val_noise_count, LATENT_DIM))
            .astype(dtype)
        )
        self.rng = np.random.default_rng([config.seed, 2])
        betas = (config.beta1, config.beta2)
        self.opt_G = Adam(self.G.named_params(), config.lr, *betas, eps=config.adam_eps)
        self.opt_D = Adam(self.D.named_params(), config.lr, *betas, eps=config.adam_eps)
        self.epoch = 0
        self.step = 0
        self.batch_in_epoch = 0
        self.best_val = math.inf
        self.best_epoch = -1

    def state_tensors(self) -> dict:
        """Flat name -> float32 array snapshot of every parameter and buffer."""
        out = {}
        for prefix, net in (("G", self.G), ("D", self.D)):
            for k, v in net.named_params().items():
                out[f"{prefix}.{k}"] = v.copy()
            for k, v in net.named_buffers().items():
                out[f"{prefix}.{k}"] = v.copy()
        for prefix, opt in (("optG", self.opt_G), ("optD", self.opt_D)):
            for k, v in opt.m.items():
                out[f"{prefix}.m.{k}"] = v.copy()
            for k, v in opt.v.items():
                out[f"{prefix}.v.{k}"] = v.copy()
        return out

    def state_meta(self) -> dict:
        meta = {
            "epoch": str(self.epoch),
            "step": str(self.step),
            "batch_in_epoch": str(self.batch_in_epoch),
            "best_val": repr(self.best_val),
            "best_epoch": str(self.best_epoch),
            "optG.t": str(self.opt_G.t),
            "optD.t": str(self.opt_D.t),
            "rng_state": json.dumps(self.rng.bit_generator.state),
            "generator_mode": self.config.generator_mode,
        }
        for line in render_config(self.config).strip().splitlines():
            key, _, val = line.partition("=")
            meta[f"config.{key}"] = val
        return meta

    def restore(self, tensors: dict, meta: dict):
        wanted = self.state_tensors().keys()
        missing = set(wanted) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        targets = {}
        for prefix, net in (("G", self.G), ("D", self.D)):
            for k, v in net.named_params().items():
                targets[f"{prefix}.{k}"] = v
            for k, v in net.named_buffers().items():
                targets[f"{prefix}.{k}"] = v
        for prefix, opt in (("optG", self.opt_G), ("optD", self.opt_D)):
            for k, v in opt.m.items():
                targets[f"{prefix}.m.{k}"] = v
            for k, v in opt.v.items():
                targets[f"{prefix}.v.{k}"] = v
        for name, arr in targets.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise ConfigError(f"checkpoint tensor {name!r} has shape {src.shape}, expected {arr.shape}")
            arr[...] = src.astype(arr.dtype)
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        self.batch_in_epoch = int(meta["batch_in_epoch"])
        self.best_val = float(meta["best_val"])
        self.best_epoch = int(meta["best_epoch"])
        self.opt_G.t = int(meta["optG.t"])
        self.opt_D.t = int(meta["optD.t"])
        self.rng.bit_generator.state = json.loads(meta["rng_state"])


def config_from_meta(meta: dict) -> TrainConfig:
    lines = [
        f"{k[len('config.'):]}={v}" for k, v in meta.items() if k.startswith("config.")
    ]
    return parse_config("\n".join(lines))


@dataclass
class TrainResult:
    log: TrainLog
    best_val: float
    best_epoch: int
    best_tensors: dict | None
    best_meta: dict | None
    trainer: Trainer


def run_training(
    config: TrainConfig,
    train_images: np.ndarray,
    max_steps: int | None = None,
    resume: tuple | None = None,
    step_callback=None,
    epoch_callback=None,
) -> TrainResult:
    """Alternate one discriminator and one generator step per batch.

    `train_images` is the already subsetted (N,3,64,64) float32 tensor in
    [-1,1]. `resume` is an optional (tensors, meta) pair from a checkpoint of
    the same config; the continuation is bitwise identical to a run that was
    never interrupted. Callbacks observe progress (CSV rows, sample grids);
    they must not mutate training state.
    """
    n = int(train_images.shape[0])
    if n < config.batch_size:
        raise ConfigError(
            f"dataset has {n} images; need at least one full batch of {config.batch_size}"
        )
    trainer = Trainer(config)
    best_tensors = None
    best_meta = None
    if resume is not None:
        trainer.restore(*resume)
    log = TrainLog()

    for epoch in range(trainer.epoch, config.epochs):
        trainer.epoch = epoch
        batches = make_batches(n, config.batch_size, config.seed, epoch)
        for b_idx in range(trainer.batch_in_epoch, len(batches)):
            real = train_images[batches[b_idx]]
            try:
                d_loss, p_real, p_fake = train_discriminator_step(
                    real, trainer.G, trainer.D, trainer.opt_D, trainer.rng
                )
                g_loss, grad_norm = train_generator_step(
                    trainer.G, trainer.D, trainer.opt_G, trainer.rng, config.batch_size
                )
            except TrainingDiverged as exc:
                # abort, keeping the partial log and last state reachable
                exc.partial = TrainResult(
                    log, trainer.best_val, trainer.best_epoch,
                    best_tensors, best_meta, trainer,
                )
                raise
            trainer.step += 1
            trainer.batch_in_epoch = b_idx + 1
            record = StepRecord(
                trainer.step, epoch, d_loss, g_loss, p_real, p_fake, grad_norm
            )
            log.append(record)
            if step_callback is not None:
                step_callback(record)
            if max_steps is not None and trainer.step >= max_steps:
                return TrainResult(log, trainer.best_val, trainer.best_epoch,
                                   best_tensors, best_meta, trainer)
        trainer.batch_in_epoch = 0
        trainer.epoch = epoch + 1
        val = validation_generator_loss(trainer.G, trainer.D, trainer.val_noise)
        log.val_losses.append((epoch, val))
        if val < trainer.best_val:
            trainer.best_val = val
            trainer.best_epoch = epoch
            best_tensors = trainer.state_tensors()
            best_meta = trainer.state_meta()
        if epoch_callback is not None:
            epoch_callback(epoch, trainer, val)

    return TrainResult(log, trainer.best_val, trainer.best_epoch,
                       best_tensors, best_meta, trainer)
