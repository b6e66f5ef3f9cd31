"""Noise schedules, closed-form noising, ancestral reverse steps and the training loss.

Arrays are indexed by zero-based step ``t`` in ``0..T-1``; step ``t`` here
corresponds to the one-based step ``t+1`` of the usual DDPM notation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, mse
from .errors import ConfigurationError, ContractError, DimensionError, ScheduleError

TERMINAL_ALPHA_BAR = 1e-3
SAMPLE_CHUNK = 256


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigurationError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.schedule_kind not in ("linear", "cosine"):
            raise ConfigurationError(f"unknown schedule kind {self.schedule_kind!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    T: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "T", int(self.beta.shape[0]))
        for arr in (self.beta, self.alpha_bar, self.sigma):
            arr.setflags(write=False)

    def check_index(self, t) -> np.ndarray:
        ts = np.asarray(t)
        if not np.issubdtype(ts.dtype, np.integer):
            raise IndexError(f"step index must be an integer, got {t!r}")
        if ts.size and (ts.min() < 0 or ts.max() >= self.T):
            raise IndexError(f"step index {t!r} outside 0..{self.T - 1}")
        return ts

    def vlb_weight(self, t) -> np.ndarray:
        """Per-step factor turning squared noise error into the fixed-variance KL term.

        With sigma_t^2 = beta_t the Gaussian KL between the true posterior and
        the model's reverse step is ``beta_t / (2 (1 - beta_t) (1 - alpha_bar_t))``
        times the squared noise-prediction error.
        """
        ts = self.check_index(t)
        b = self.beta[ts]
        return b ** 2 / (2.0 * self.sigma[ts] ** 2 * (1.0 - b) * (1.0 - self.alpha_bar[ts]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "beta", "alpha_bar", "sigma"])
            for t in range(self.T):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha_bar[t])),
                            repr(float(self.sigma[t]))])


def schedule_from_betas(betas, strict: bool = False) -> NoiseSchedule:
    """Build a schedule from explicit betas.

    ``strict`` additionally enforces the near-isotropic terminal condition
    ``alpha_bar[T-1] < 1e-3``; short hand-written schedules used in tests
    and round-trip checks normally leave it off.
    """
    beta = np.array(betas, dtype=np.float64).reshape(-1)
    if beta.size < 1:
        raise ScheduleError("schedule needs at least one step")
    if not np.all((beta > 0) & (beta < 1)):
        raise ScheduleError("every beta must lie strictly inside (0, 1)")
    alpha_bar = np.cumprod(1.0 - beta)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    if strict and alpha_bar[-1] >= TERMINAL_ALPHA_BAR:
        raise ScheduleError(
            f"alpha_bar[T-1] = {alpha_bar[-1]:.3g} is not below {TERMINAL_ALPHA_BAR}; "
            "increase T or beta_end")
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, sigma=np.sqrt(beta))


def _cosine_betas(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    def f(u):
        return math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return np.array([min(1.0 - f(i + 1) / f(i), max_beta) for i in range(T)])


def make_schedule(cfg: DiffusionConfig = DiffusionConfig()) -> NoiseSchedule:
    cfg.validate()
    if cfg.schedule_kind == "linear":
        betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T)
    else:
        betas = _cosine_betas(cfg.T)
    return schedule_from_betas(betas, strict=True)


def _unwrap(x):
    return (x.data, True) if isinstance(x, Tensor) else (np.asarray(x, dtype=np.float64), False)


def _per_item(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    # scalar t -> scalar coef; vector t -> one coef per leading item
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``.

    ``t`` may be a scalar or one step per leading item of ``x0``.
    """
    x, wrap = _unwrap(x0)
    e, _ = _unwrap(eps)
    if x.shape != e.shape:
        raise DimensionError(f"forward_sample: x0 {x.shape} vs eps {e.shape}")
    ts = sched.check_index(t)
    ab = _per_item(sched.alpha_bar[ts], x)
    out = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * e
    return Tensor(out) if wrap else out


def reverse_step(xt, t, eps_pred, sched: NoiseSchedule, z=None):
    """One ancestral step x_t -> x_{t-1} with fixed variance sigma_t^2 = beta_t.

    Uses the posterior-mean coefficient ``beta_t / sqrt(1 - alpha_bar_t)``.
    ``z`` must be zero (or None) at the final step t = 0.
    """
    x, wrap = _unwrap(xt)
    e, _ = _unwrap(eps_pred)
    if x.shape != e.shape:
        raise DimensionError(f"reverse_step: xt {x.shape} vs eps_pred {e.shape}")
    ts = sched.check_index(t)
    zz = np.zeros_like(x) if z is None else _unwrap(z)[0]
    if zz.shape != x.shape:
        raise DimensionError(f"reverse_step: z {zz.shape} vs xt {x.shape}")
    final = ts == 0
    if np.any(final):
        zfinal = zz if final.ndim == 0 else zz[final]
        if np.any(zfinal != 0):
            raise ContractError("reverse_step: z must be zero at t = 0")
    b = _per_item(sched.beta[ts], x)
    ab = _per_item(sched.alpha_bar[ts], x)
    sig = _per_item(sched.sigma[ts], x)
    out = (x - (b / np.sqrt(1.0 - ab)) * e) / np.sqrt(1.0 - b) + sig * zz
    return Tensor(out) if wrap else out


def hybrid_loss(eps, eps_pred: Tensor, weight_vlb: float = 0.0, t=None,
                sched: Optional[NoiseSchedule] = None) -> Tensor:
    """``L_simple + weight_vlb * L_vlb`` on noise predictions.

    ``L_vlb`` is the per-step KL of the reverse transition under fixed
    variance, which for noise prediction is the squared error reweighted by
    :meth:`NoiseSchedule.vlb_weight`.  It needs ``t`` and ``sched``.
    """
    if weight_vlb < 0:
        raise ContractError(f"weight_vlb must be >= 0, got {weight_vlb}")
    target = eps if isinstance(eps, Tensor) else Tensor(eps)
    loss = mse(eps_pred, target)
    if weight_vlb == 0:
        return loss
    if t is None or sched is None:
        raise ContractError("hybrid_loss: the vlb term needs step indices and a schedule")
    ts = np.broadcast_to(np.asarray(t), (eps_pred.shape[0],))
    vlb = mse(eps_pred, target, weights=sched.vlb_weight(ts))
    return loss + vlb * float(weight_vlb)


def sample(model, sched: NoiseSchedule, c: int, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` class-conditional samples by running the full reverse chain.

    Chains are processed in fixed chunks, each with its own stream derived
    from ``(seed, chunk index)``, so results do not depend on batching
    elsewhere.  Returns an array of shape ``(n, *model.input_shape)``.
    """
    shape = tuple(model.input_shape)
    if getattr(model, "T", sched.T) != sched.T:
        raise ConfigurationError(f"model was trained with T={model.T}, schedule has T={sched.T}")
    if n < 0:
        raise ContractError(f"sample count must be >= 0, got {n}")
    chunks = []
    for ci, start in enumerate(range(0, n, SAMPLE_CHUNK)):
        m = min(SAMPLE_CHUNK, n - start)
        rng = np.random.default_rng([seed, ci])
        x = rng.standard_normal((m,) + shape)
        labels = np.full(m, c, dtype=np.int64)
        for t in range(sched.T - 1, -1, -1):
            eps_pred = model.predict_noise(x, t, labels)
            z = rng.standard_normal(x.shape) if t > 0 else None
            x = reverse_step(x, t, eps_pred, sched, z)
        chunks.append(x)
    if not chunks:
        return np.zeros((0,) + shape)
    return np.concatenate(chunks, axis=0)
