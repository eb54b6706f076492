"""Rectified-flow training (two stages), Adam, and poster-level evaluation metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .arraymath import ContractError, RngState, draw_int, draw_normal
from .attention import AttentionMode
from .importance import ImportanceMap, RoutingSchedule, sample_timesteps, timestep_weights
from .model import (Batch, ModelConfig, ModelParams, backward, forward, prepare_batch, sample,
                    save_checkpoint)
from .synthdata import PosterSample

EVAL_SEED_BASE = 10_000


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------- metrics

def subject_mse(image: np.ndarray, ref: PosterSample) -> float:
    """Mean squared error inside the subject mask, pixels scaled to [0, 1]."""
    m = ref.subject_mask.astype(bool)
    if not m.any():
        return 0.0
    diff = (image[m].astype(np.float64) - ref.poster[m].astype(np.float64)) / 255.0
    return float(np.mean(diff ** 2))


def glyph_accuracy(image: np.ndarray, ref: PosterSample) -> float:
    """Share of stroke pixels closer to the text colour than to both palette colours."""
    g = ref.glyph_image.astype(bool)
    if not g.any():
        return 1.0
    px = image[g].astype(np.float64)
    d_text = np.linalg.norm(px - np.array(ref.text_color, float), axis=-1)
    d_bg = np.min([np.linalg.norm(px - np.array(c, float), axis=-1) for c in ref.palette], axis=0)
    return float(np.mean(d_text < d_bg))


def _hist(values: np.ndarray, bins: int = 16) -> np.ndarray:
    h = np.bincount((values.astype(np.int64) * bins) // 256, minlength=bins).astype(np.float64)
    return h / max(h.sum(), 1.0)


def palette_distance(image: np.ndarray, ref: PosterSample, bins: int = 16) -> float:
    """Per-channel histogram L1 between generated background and the style image, averaged."""
    bg = ~(ref.subject_mask.astype(bool) | ref.glyph_image.astype(bool))
    return float(np.mean([np.abs(_hist(image[..., ch][bg], bins)
                                 - _hist(ref.style_image[..., ch].ravel(), bins)).sum()
                          for ch in range(3)]))


METRICS = {"subject_mse": subject_mse, "glyph_acc": glyph_accuracy, "palette_dist": palette_distance}
HIGHER_IS_BETTER = {"subject_mse": False, "glyph_acc": True, "palette_dist": False}


def score_images(images, refs) -> dict:
    return {name: float(np.mean([fn(img, ref) for img, ref in zip(images, refs)]))
            for name, fn in METRICS.items()}


def evaluate(params: ModelParams, batch: Batch, mode=AttentionMode.DECOUPLED_CACHED,
             schedule: RoutingSchedule | None = None, seed: int = 0, chunk: int = 32) -> dict:
    """Generate one image per sample and average the three metrics."""
    images = []
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        images.append(sample(params, part, mode, schedule, seed + start))
    return score_images(np.concatenate(images), batch.samples)


# ------------------------------------------------------------------ training

class Adam:
    def __init__(self, params: ModelParams, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.names = params.trainable()
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params: ModelParams, lr: float, clip: float | None = None) -> float:
        G = params.store.grads
        norm = math.sqrt(sum(float(np.sum(G[n].astype(np.float64) ** 2)) for n in self.names))
        scale = min(1.0, clip / (norm + 1e-12)) if clip else 1.0
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n in self.names:
            g = G[n] * scale
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            params.store[n] = (params[n] - upd).astype(params.dtype)
        return norm


def rf_loss(params: ModelParams, batch: Batch, steps: np.ndarray, noise: np.ndarray,
            schedule: RoutingSchedule | None = None, grad: bool = True) -> float:
    """Flow-matching MSE at step indices ``steps``; fills ``params.store.grads`` when ``grad``.

    x_t = (1 - t) x0 + t eps with t = 1 - s/T, target velocity eps - x0.
    """
    c = params.config
    steps = np.asarray(steps)
    t = (1.0 - steps / c.steps).astype(batch.x0.dtype)[:, None, None]
    # rows may outnumber samples: r consecutive rows per poster
    r = len(noise) // len(batch)
    x0 = np.repeat(batch.x0, r, axis=0) if r > 1 else batch.x0
    x_t = (1 - t) * x0 + t * noise
    target = noise - x0
    tape = {} if grad else None
    v = forward(params, batch, x_t, steps, AttentionMode.DECOUPLED, schedule, tape=tape)
    diff = v - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if grad:
        params.store.zero_grad()
        backward(params, tape, (2.0 / diff.size) * diff)
    return loss


@dataclass
class TrainReport:
    stage: int
    seed: int
    steps: int
    losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return float(np.mean(self.losses[:20]))

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.losses[-50:]))

    def to_json(self) -> str:
        d = asdict(self)
        d.update(initial_loss=self.initial_loss if self.losses else None,
                 final_loss=self.final_loss if self.losses else None)
        return json.dumps(d, indent=1)


def _lr_at(i: int, total: int, base: float, warmup: int) -> float:
    if warmup and i < warmup:
        return base * (i + 1) / warmup
    frac = (i - warmup) / max(total - warmup, 1)
    return base * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def _check_dataset(config: ModelConfig, samples):
    if not samples:
        raise ContractError("dataset is empty")
    h, w = samples[0].poster.shape[:2]
    if (h, w) != (config.image_size, config.image_size):
        raise ContractError(f"dataset images are {h}x{w}, config image_size is {config.image_size}")


def _run(params: ModelParams, data: Batch, steps: int, lr: float, rng: RngState, schedule,
         t_weights, report: TrainReport, log: Callable | None, ckpt_dir, warmup: int):
    c = params.config
    opt = Adam(params)
    n = len(data)
    t0 = time.perf_counter()
    for i in range(steps):
        idx, rng = draw_int(rng, c.batch_size // c.steps_per_sample, n)
        if t_weights is None:
            s, rng = draw_int(rng, c.batch_size, c.steps)
        else:
            s, rng = sample_timesteps(t_weights, c.batch_size, rng)
        eps, rng = draw_normal(rng, c.batch_size * c.n_patches * c.latent_dim, params.dtype)
        eps = eps.reshape(c.batch_size, c.n_patches, c.latent_dim)
        loss = rf_loss(params, data.take(idx), s, eps, schedule)
        if not math.isfinite(loss):
            raise TrainingError(f"stage {report.stage}: loss {loss} at step {i} (steps {s.tolist()})")
        gnorm = opt.step(params, _lr_at(i, steps, lr, warmup), c.grad_clip)
        report.losses.append(loss)
        if log and (i % 100 == 0 or i == steps - 1):
            log(f"stage {report.stage} step {i:5d} loss {loss:.4f} grad {gnorm:.3f}")
        if ckpt_dir and c.ckpt_every and (i + 1) % c.ckpt_every == 0:
            save_checkpoint(params, Path(ckpt_dir) / f"stage{report.stage}_step{i + 1}.ckpt")
    report.wall_time = time.perf_counter() - t0


def train_stage1(config: ModelConfig, samples: list[PosterSample], steps: int | None = None,
                 log: Callable | None = None, ckpt_dir=None) -> tuple[ModelParams, TrainReport]:
    """All condition slots kept, uniform step sampling, decoupled attention."""
    config.validate()
    _check_dataset(config, samples)
    steps = config.stage1_steps if steps is None else steps
    params = ModelParams.init(config)
    data = prepare_batch(samples, config)
    report = TrainReport(1, config.seed, steps, config=config.to_dict())
    rng = RngState(config.seed).split(0x57A9E1)
    _run(params, data, steps, config.lr_stage1, rng, None, None, report, log, ckpt_dir, config.warmup)
    return params, report


def train_stage2(params: ModelParams, samples: list[PosterSample], schedule: RoutingSchedule,
                 imap: ImportanceMap, steps: int | None = None, log: Callable | None = None,
                 ckpt_dir=None) -> tuple[ModelParams, TrainReport]:
    """Fine-tune a copy of ``params`` under ``schedule`` with importance-weighted steps."""
    c = params.config
    _check_dataset(c, samples)
    if schedule.keep.shape[1:] != (c.layers, c.steps) or imap.S.shape[1:] != (c.layers, c.steps):
        raise ContractError("schedule/importance grid does not match the model's (layers, steps)")
    steps = c.stage2_steps if steps is None else steps
    params = params.copy()
    data = prepare_batch(samples, c)
    report = TrainReport(2, c.seed, steps, config=c.to_dict())
    rng = RngState(c.seed).split(0x57A9E2)
    _run(params, data, steps, c.lr_stage2, rng, schedule, timestep_weights(imap), report, log,
         ckpt_dir, 0)
    return params, report


# ------------------------------------------------------------- gradient check

def tiny_config(**overrides) -> ModelConfig:
    """The small float64 configuration used for finite-difference checks."""
    base = dict(image_size=20, d=16, heads=2, layers=2, steps=4, prompt_len=4, anchor_len=2,
                max_crops=8, batch_size=4, steps_per_sample=2, tfem_value_init=1.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


def gradient_check(config: ModelConfig | None = None, eps: float = 1e-3, samples: int = 50,
                   seed: int = 0, schedule=None) -> float:
    """Worst relative error of the analytic gradient over ``samples`` random coordinates."""
    from .arraymath import finite_diff_check
    from .model import initial_noise
    from .synthdata import GenerationSpec, generate_dataset

    config = config or tiny_config()
    spec = GenerationSpec(height=config.image_size, width=config.image_size, scales=(1,))
    params = ModelParams.init(config, np.float64)
    n = config.batch_size // config.steps_per_sample
    batch = prepare_batch(generate_dataset(n, seed, spec), config, np.float64)
    noise = initial_noise(seed, config.batch_size, config, np.float64)
    steps, _ = draw_int(RngState(seed).split(0x6C), config.batch_size, config.steps)

    def loss_fn(store):
        return rf_loss(params, batch, steps, noise, schedule)

    return finite_diff_check(loss_fn, params.store, eps=eps, samples=samples,
                             rng=RngState(seed).split(0xFD), names=params.trainable())
