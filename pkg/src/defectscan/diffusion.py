"""DDPM machinery: noise schedule, forward corruption, training, and the
single-step noise prediction that drives detection.

The detector never reconstructs: scoring calls the U-Net once per patch on a
minimally-noised input (t* = 1 by default) and uses the predicted-noise map
directly.  Iterative reverse sampling is kept only as a baseline/sanity
operation.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, DimensionError, NumericsError
from .optim import AdamState, adam_step
from .unet import save_checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance plan: beta[t-1] is the step-t variance, 1-indexed t in [1, T].

    Tables are float64 so the telescoping identity alpha_bar[t] ==
    alpha_bar[t-1] * alpha[t] holds to 1e-12.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t):
        ts = np.asarray(t)
        if ts.size == 0 or np.any(ts < 1) or np.any(ts > self.T):
            raise ContractError(f"timestep(s) {t} outside [1, {self.T}]")
        return ts


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule inclusive of both endpoints, with derived products."""
    if T < 1:
        raise ConfigurationError(f"schedule length T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0, t, eps, sched):
    """Closed-form forward corruption: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    `t` is an int or a per-sample vector matching axis 0.  Inputs are data;
    the result does not join any gradient tape.
    """
    x0 = x0 if isinstance(x0, ad.Tensor) else ad.Tensor(x0)
    eps = eps if isinstance(eps, ad.Tensor) else ad.Tensor(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 {x0.shape} != eps {eps.shape}")
    ts = sched.check_t(t)
    ab = sched.alpha_bar[ts - 1]
    a = np.sqrt(ab)
    b = np.sqrt(1.0 - ab)
    if ts.ndim > 0:
        if ts.shape != (x0.shape[0],):
            raise DimensionError(f"q_sample: t vector {ts.shape} != batch ({x0.shape[0]},)")
        extra = (1,) * (x0.data.ndim - 1)
        a = a.reshape(-1, *extra)
        b = b.reshape(-1, *extra)
    out = a * x0.data.astype(np.float64) + b * eps.data.astype(np.float64)
    return ad.Tensor(out.astype(x0.dtype))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_interval: int = 0  # steps between interval checkpoints; 0 disables

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        return self


def loss_simple(model, x0_batch, sched, rng, t=None, eps=None):
    """Noise-prediction objective: MSE between drawn noise and the model's estimate.

    Per item draws t uniform on [1, T] and unit Gaussian noise; both can be
    injected for deterministic checks.  Returns a scalar Tensor on the tape.
    """
    x0 = x0_batch if isinstance(x0_batch, ad.Tensor) else ad.Tensor(x0_batch)
    n = x0.shape[0]
    if n == 0:
        raise ConfigurationError("loss_simple: empty batch")
    if t is None:
        t = rng.integers(1, sched.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(np.float32)
    xt = q_sample(x0, t, ad.Tensor(eps), sched)
    pred = model.forward(xt, t)
    return ad.mse(pred, ad.Tensor(eps))


def train(model, dataset, cfg, sched, out_dir=None):
    """Minimize the noise-prediction loss over shuffled mini-batches.

    Returns (model, loss_history).  Shuffling, t draws and noise draws all
    derive from cfg.seed, so identical configs produce identical histories.
    Interval checkpoints land in out_dir when configured.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigurationError("train: dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.learning_rate)
    history = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x0 = dataset.gather(idx)
            with ad.GradientTape() as tape:
                loss = loss_simple(model, x0, sched, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericsError(f"training diverged at step {step}: loss={value}")
            ad.backward(loss, tape)
            adam_step(model.params, {name: p.grad for name, p in model.params.items()}, opt)
            model.zero_grad()
            history.append(value)
            step += 1
            if out_dir is not None and cfg.checkpoint_interval > 0 \
                    and step % cfg.checkpoint_interval == 0:
                save_checkpoint(model, os.path.join(out_dir, f"checkpoint_{step:06d}.ckpt"),
                                step_count=step)
    return model, history


def write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(history):
            writer.writerow([i, repr(float(value))])


def predict_noise_single_step(model, patches, sched, rng, t_star=1, draws=1):
    """Predicted-noise map from one forward diffusion step (the anomaly signal).

    Runs exactly one U-Net evaluation per patch per draw; with draws > 1 the
    predictions are averaged.  Returns a float32 array shaped like `patches`.
    """
    sched.check_t(t_star)
    if draws < 1:
        raise ConfigurationError(f"draws must be >= 1, got {draws}")
    x = patches if isinstance(patches, ad.Tensor) else ad.Tensor(patches)
    acc = np.zeros(x.shape, dtype=np.float64)
    for _ in range(draws):
        eps = ad.Tensor(rng.standard_normal(x.shape).astype(np.float32))
        xt = q_sample(x, t_star, eps, sched)
        acc += model.forward(xt, t_star).data
    return (acc / draws).astype(np.float32)


def reverse_sample(model, xT, sched, rng, t_start):
    """Iterative ancestral denoising from t_start down to 1 (baseline only).

    x_{t-1} = (x_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t) + sigma_t z,
    with sigma_t^2 = beta_t and no noise injected on the final step.
    """
    sched.check_t(t_start)
    x = np.array(xT.data if isinstance(xT, ad.Tensor) else xT, dtype=np.float32)
    for t in range(int(t_start), 0, -1):
        eps_hat = model.forward(x, t).data
        beta = sched.beta[t - 1]
        coef = beta / np.sqrt(1.0 - sched.alpha_bar[t - 1])
        x = ((x - coef * eps_hat) / np.sqrt(sched.alpha[t - 1])).astype(np.float32)
        if t > 1:
            x = x + (np.sqrt(beta) * rng.standard_normal(x.shape)).astype(np.float32)
    return x
