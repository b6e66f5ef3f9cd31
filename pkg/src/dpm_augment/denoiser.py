"""Class- and time-conditional noise predictor and its SGD training loop.

Two layouts share one U-shaped topology (encoder levels, skip-added
decoder levels, residual blocks with additive conditioning):

* image mode, ``input_shape = (C, H, W)``: 3x3 convolutions, stride-2
  downsampling and nearest-neighbour upsampling;
* vector mode, ``input_shape = (D,)``: the same wiring with dense layers,
  meant for low-dimensional toys.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, no_grad
from .diffusion import NoiseSchedule, forward_sample, hybrid_loss
from .errors import ConfigurationError, ContractError, DimensionError, NonFiniteError


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, loss: float, reason: str = ""):
        self.step = step
        self.loss = loss
        msg = f"training aborted at step {step}: loss = {loss}"
        super().__init__(f"{msg} ({reason})" if reason else msg)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding, interleaved as ``[sin(t w_0), cos(t w_0), ...]``.

    Frequencies are ``w_k = 10000 ** (-2k / dim)``.  Accepts a scalar step
    (returns shape ``(dim,)``) or an array of steps (``(N, dim)``).
    """
    if dim < 2 or dim % 2:
        raise ContractError(f"time embedding dimension must be even, got {dim}")
    ts = np.asarray(t, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    phase = ts[..., None] * omega
    out = np.empty(ts.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass(frozen=True)
class DenoiserArch:
    input_shape: tuple
    base_channels: int = 16
    blocks_per_level: int = 2
    levels: int = 2
    embed_dim: int = 32
    class_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) not in (1, 3):
            raise ConfigurationError(f"input shape must be (D,) or (C, H, W), got {self.input_shape}")
        if self.class_count < 1 or self.levels < 1 or self.blocks_per_level < 0:
            raise ConfigurationError("class_count and levels must be >= 1")
        if self.embed_dim % 2:
            raise ConfigurationError("embed_dim must be even")
        if self.mode == "image":
            _, h, w = self.input_shape
            step = 2 ** (self.levels - 1)
            if h % step or w % step:
                raise ConfigurationError(f"spatial size {h}x{w} not divisible by {step}")

    @property
    def mode(self) -> str:
        return "vector" if len(self.input_shape) == 1 else "image"

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    weight_vlb: float = 0.0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.weight_vlb < 0:
            raise ConfigurationError("weight_vlb must be >= 0")


@dataclass
class LossRecord:
    step: int
    loss: float
    wall_time: float


class DenoiserModel:
    """Noise predictor eps(x_t, t, c) with named, checkpointable parameters."""

    def __init__(self, arch: DenoiserArch, seed: int = 0, T: Optional[int] = None):
        self.arch = arch
        self.T = T
        self.step = 0
        self.history: list[LossRecord] = []
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng([seed, 7])
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------

    @property
    def input_shape(self) -> tuple:
        return self.arch.input_shape

    def _w(self, name, shape, fan_in, gain=1.0):
        std = gain / math.sqrt(fan_in)
        self.params[name] = Tensor(self._rng.standard_normal(shape) * std, requires_grad=True)

    def _b(self, name, n):
        self.params[name] = Tensor(np.zeros(n), requires_grad=True)

    def _layer(self, name, cin, cout, gain=1.0):
        if self.arch.mode == "image":
            self._w(name + ".w", (cout, cin, 3, 3), cin * 9, gain)
        else:
            self._w(name + ".w", (cin, cout), cin, gain)
        self._b(name + ".b", cout)

    def _block(self, name, width):
        e = self.arch.embed_dim
        self._layer(name + ".l1", width, width)
        self._w(name + ".emb.w", (e, width), e)
        self._b(name + ".emb.b", width)
        self._layer(name + ".l2", width, width, gain=0.5)

    def _build(self):
        a = self.arch
        e = a.embed_dim
        self._w("class_table", (a.class_count, e), 1)
        self._w("time1.w", (e, e), e)
        self._b("time1.b", e)
        self._w("time2.w", (e, e), e)
        self._b("time2.b", e)
        cin = a.input_shape[0]
        self._layer("in", cin, a.width(0))
        for lv in range(a.levels):
            if lv:
                self._layer(f"down{lv}", a.width(lv - 1), a.width(lv))
            for b in range(a.blocks_per_level):
                self._block(f"enc{lv}.{b}", a.width(lv))
        for lv in range(a.levels - 2, -1, -1):
            self._layer(f"up{lv}", a.width(lv + 1), a.width(lv))
            for b in range(a.blocks_per_level):
                self._block(f"dec{lv}.{b}", a.width(lv))
        self._layer("out", a.width(0), cin, gain=0.5)

    # -- forward ----------------------------------------------------------

    def _apply(self, name, h, stride=1):
        p = self.params
        if self.arch.mode == "image":
            return ad.conv2d(h, p[name + ".w"], stride, 1, bias=p[name + ".b"])
        return ad.linear(h, p[name + ".w"], p[name + ".b"])

    def _inject(self, h, e):
        if self.arch.mode == "image":
            return ad.channel_bias(h, e)
        return ad.add(h, e)

    def _run_block(self, name, h, emb):
        p = self.params
        r = self._apply(name + ".l1", ad.silu(h))
        r = self._inject(r, ad.linear(emb, p[name + ".emb.w"], p[name + ".emb.b"]))
        r = self._apply(name + ".l2", ad.silu(r))
        return ad.add(h, r)

    def class_embedding(self, c: int) -> np.ndarray:
        if not 0 <= int(c) < self.arch.class_count or int(c) != c:
            raise ContractError(f"unknown class id {c!r}")
        return self.params["class_table"].data[int(c)].copy()

    def conditioning(self, t, c) -> Tensor:
        p = self.params
        temb = Tensor(time_embedding(t, self.arch.embed_dim))
        h = ad.silu(ad.linear(temb, p["time1.w"], p["time1.b"]))
        h = ad.linear(h, p["time2.w"], p["time2.b"])
        if c is None:
            # class-agnostic: average of the class rows
            cvec = Tensor(np.broadcast_to(p["class_table"].data.mean(axis=0), h.shape).copy())
        else:
            cvec = ad.embedding(p["class_table"], c)
        return ad.silu(ad.add(h, cvec))

    def _encode(self, x: Tensor, emb: Tensor):
        a = self.arch
        h = self._apply("in", x)
        skips = []
        for lv in range(a.levels):
            if lv:
                h = self._apply(f"down{lv}", h, stride=2)
            for b in range(a.blocks_per_level):
                h = self._run_block(f"enc{lv}.{b}", h, emb)
            skips.append(h)
        return h, skips

    def forward(self, x: Tensor, t, c) -> Tensor:
        """Batched forward pass; ``x`` has shape ``(N, *input_shape)``."""
        a = self.arch
        if x.shape[1:] != a.input_shape:
            raise DimensionError(f"denoiser expects (N, {a.input_shape}), got {x.shape}")
        n = x.shape[0]
        ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        cs = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if cs.size and (cs.min() < 0 or cs.max() >= a.class_count):
            raise ContractError(f"class ids must lie in 0..{a.class_count - 1}")
        emb = self.conditioning(ts, cs)
        h, skips = self._encode(x, emb)
        for lv in range(a.levels - 2, -1, -1):
            if a.mode == "image":
                h = ad.upsample2x(h)
            h = ad.add(self._apply(f"up{lv}", h), skips[lv])
            for b in range(a.blocks_per_level):
                h = self._run_block(f"dec{lv}.{b}", h, emb)
        return self._apply("out", ad.silu(h))

    def predict_noise(self, xt, t, c) -> np.ndarray:
        """Inference without graph recording; accepts one item or a batch."""
        arr = xt.data if isinstance(xt, Tensor) else np.asarray(xt, dtype=np.float64)
        single = arr.shape == self.arch.input_shape
        if single:
            arr = arr[None]
        elif arr.shape[1:] != self.arch.input_shape:
            raise DimensionError(f"denoiser expects {self.arch.input_shape}, got {arr.shape}")
        with no_grad():
            out = self.forward(Tensor._wrap(arr), t, c).data
        return out[0] if single else out

    def encode_features(self, x, t: int = 0) -> np.ndarray:
        """Mean-pooled deepest-level activations, class-agnostic conditioning."""
        arr = np.asarray(x, dtype=np.float64)
        with no_grad():
            emb = self.conditioning(np.full(arr.shape[0], t), None)
            h, _ = self._encode(Tensor._wrap(arr), emb)
        if self.arch.mode == "image":
            return h.data.mean(axis=(2, 3))
        return h.data

    # -- persistence ------------------------------------------------------

    def meta(self) -> dict:
        return {"arch": {**asdict(self.arch), "input_shape": list(self.arch.input_shape)},
                "T": self.T, "step": self.step}

    def save(self, path) -> None:
        ad.save_parameters(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        params, meta = ad.load_parameters(path)
        model = cls(DenoiserArch(**meta["arch"]), T=meta.get("T"))
        if set(params) != set(model.params):
            raise ConfigurationError("checkpoint parameters do not match the declared architecture")
        for name, t in params.items():
            if t.shape != model.params[name].shape:
                raise ConfigurationError(f"parameter {name}: shape {t.shape} in checkpoint")
        model.params = params
        model.step = int(meta.get("step", 0))
        return model


def write_loss_log(path, history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "wall_time"])
        for rec in history:
            w.writerow([rec.step, repr(rec.loss), f"{rec.wall_time:.6f}"])


def train(dataset, cfg: TrainConfig, sched: NoiseSchedule, model: Optional[DenoiserModel] = None,
          arch: Optional[DenoiserArch] = None) -> DenoiserModel:
    """Fit a denoiser with plain minibatch SGD on the hybrid noise-prediction loss.

    ``dataset`` is ``(x, labels)`` with ``x`` of shape ``(N, *input_shape)``.
    Passing a previously trained ``model`` resumes from its step counter;
    batches and noise are drawn from streams keyed on ``(seed, step)`` so a
    resumed run matches an uninterrupted one.
    """
    cfg.validate()
    x, labels = dataset
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0] if x.ndim else 0
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    if labels.shape != (n,):
        raise ContractError(f"need one label per item: {labels.shape} vs {n} items")
    if model is None:
        arch = arch or DenoiserArch(input_shape=x.shape[1:])
        model = DenoiserModel(arch, seed=cfg.seed, T=sched.T)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"dataset items {x.shape[1:]} vs model input {model.input_shape}")
    if labels.min() < 0 or labels.max() >= model.arch.class_count:
        raise ContractError("labels outside the model's class range")
    if model.T is None:
        model.T = sched.T
    elif model.T != sched.T:
        raise ConfigurationError(f"model was trained with T={model.T}, schedule has T={sched.T}")

    params = list(model.params.values())
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    start = time.perf_counter()
    perm, perm_epoch = None, -1
    for _ in range(total):
        step = model.step
        epoch, pos = divmod(step, per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng([cfg.seed, 0, epoch]).permutation(n)
            perm_epoch = epoch
        idx = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, 1, step])
        ts = rng.integers(0, sched.T, size=idx.size)
        eps = rng.standard_normal((idx.size,) + model.input_shape)
        xt = forward_sample(x[idx], ts, eps, sched)
        try:
            with Graph():
                pred = model.forward(Tensor._wrap(xt), ts, labels[idx])
                loss = hybrid_loss(eps, pred, cfg.weight_vlb, ts, sched)
                ad.backward(loss)
        except NonFiniteError as exc:
            ad.zero_grad(params)
            raise TrainingDiverged(step, float("nan"), str(exc)) from exc
        value = loss.item()
        for p in params:
            if p.grad is not None:
                p.data = p.data - cfg.learning_rate * p.grad
                p.grad = None
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(step, value, "parameters became non-finite")
        model.history.append(LossRecord(step, value, time.perf_counter() - start))
        model.step += 1
    return model
