"""Toy MM-DiT with decoupled condition streams, an Euler sampler and checkpoints.

Layout of one forward pass at sampler step ``s``:

* main stream  = [prompt tokens; noisy-latent tokens + timestep embedding]
* conditions   = style, subject and glyph token segments, each its own stream
* every block  = pre-LN attention + pre-LN GELU FFN, weights shared by all
  streams. In decoupled mode the main stream attends to itself and to the
  condition segments kept at ``(block, step)``; each condition segment
  attends only to itself and is updated at every block regardless of the
  schedule, so its activations never depend on the latent or the step.

The latent codec is fixed: a latent token is a 4x4x3 pixel patch mapped to
[-1, 1]. Gradients are hand-written; only the decoupled path has a backward.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .arraymath import (ContractError, ParamStore, RngState, draw_normal, gelu_bwd, gelu_fwd,
                        layer_norm_bwd, layer_norm_fwd, linear_bwd)
from .attention import (AttentionMode, CacheInvalidError, ConditionCache, attn_core,
                        attn_core_bwd, fingerprint, merge_heads, split_heads)
from .conditions import (CONDITIONS, NEG_INF, SegmentTag, crop_codes, image_pos_table,
                         mask_subject, patch_foreground, patchify, prompt_array, unpatchify)
from .synthdata import PosterSample

CKPT_FORMAT = "tricond-ckpt/1"
FROZEN = frozenset({"anchor"})
COND_INDEX = {SegmentTag.STYLE: 0, SegmentTag.SUBJECT: 1, SegmentTag.GLYPH: 2}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    d: int = 64
    heads: int = 4
    layers: int = 6
    steps: int = 8
    prompt_len: int = 8
    anchor_len: int = 4
    font_classes: int = 2
    ffn_mult: int = 4
    max_crops: int = 8
    use_crops: bool = True
    seed: int = 7
    prompt_salt: int = 0
    lr_stage1: float = 2e-3
    lr_stage2: float = 1e-3
    batch_size: int = 8
    steps_per_sample: int = 2
    stage1_steps: int = 2000
    stage2_steps: int = 800
    warmup: int = 50
    grad_clip: float = 1.0
    ckpt_every: int = 0
    rope: bool = True
    rope_ratio: float = 2.0
    tie_qk_init: bool = True
    tfem_value_init: float = 0.0

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch:
            raise ContractError("image_size: must be divisible by patch")
        if self.d % self.heads:
            raise ContractError("d: must be divisible by heads")
        if self.d % 4:
            raise ContractError("d: must be divisible by 4 for 2-d positional codes")
        if self.steps_per_sample < 1 or self.batch_size % self.steps_per_sample:
            raise ContractError("steps_per_sample: must divide batch_size")
        if self.rope and (self.d // self.heads) % 4:
            raise ContractError("heads: head width must be divisible by 4 for 2-d rotary codes")
        if self.layers < 1 or self.steps < 1:
            raise ContractError("layers/steps: must be >= 1")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def latent_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"{sorted(unknown)[0]}: unknown config field")
        return cls(**d).validate()

    def fingerprint(self) -> str:
        return hashlib.blake2b(json.dumps(self.to_dict(), sort_keys=True).encode(),
                               digest_size=8).hexdigest()


# ---------------------------------------------------------------- parameters

def _block_shapes(c: ModelConfig, b: int) -> dict:
    d, f = c.d, c.d * c.ffn_mult
    p = f"blocks.{b}."
    return {p + "ln1.g": (d,), p + "ln1.b": (d,), p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d), p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, d), p + "ffn.b2": (d,)}


def param_shapes(c: ModelConfig) -> dict[str, tuple]:
    d, f, lat, g = c.d, c.d * c.ffn_mult, c.latent_dim, c.patch * c.patch
    shapes = {
        "anchor": (c.anchor_len, d), "seg_emb": (len(SegmentTag), d), "time_emb": (c.steps, d),
        "noise_in.w": (lat, d), "noise_in.b": (d,), "style_in.w": (lat, d), "style_in.b": (d,),
        "subject_in.w": (lat, d), "subject_in.b": (d,), "glyph_in.w": (g, d), "glyph_in.b": (d,),
        "final_ln.g": (d,), "final_ln.b": (d,), "out.w": (d, lat), "out.b": (lat,),
        "tfem.ocr.w1": (64, d), "tfem.ocr.b1": (d,), "tfem.ocr.w2": (d, d), "tfem.ocr.b2": (d,),
        "tfem.wq": (d, d), "tfem.wk": (d, d), "tfem.wv": (d, d),
        "tfem.ffn.w1": (d, f), "tfem.ffn.b1": (f,), "tfem.ffn.w2": (f, d), "tfem.ffn.b2": (d,),
        "tfem.ln.g": (d,), "tfem.ln.b": (d,), "tfem.font_size": (c.font_classes, d),
    }
    for b in range(c.layers):
        shapes.update(_block_shapes(c, b))
    return shapes


def _init_value(name: str, shape: tuple, seed: int) -> np.ndarray:
    key = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    n = int(np.prod(shape))
    z, _ = draw_normal(RngState(seed).split(key), n)
    z = z.reshape(shape)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b") and name not in ("anchor",) and len(shape) == 1:
        return np.zeros(shape)
    if name in ("anchor", "seg_emb", "time_emb", "tfem.font_size"):
        return z
    if name == "out.w":
        return z * 0.1 / np.sqrt(shape[0])
    return z / np.sqrt(shape[0])


class ModelParams:
    """Config plus a ``ParamStore``; ``anchor`` is stored but never trained."""

    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        self.pos = image_pos_table(config.image_size, config.image_size, config.patch,
                                   config.d).astype(store.dtype)

    @classmethod
    def init(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        config.validate()
        values = {n: _init_value(n, s, config.seed) for n, s in param_shapes(config).items()}
        if config.tie_qk_init:
            # W_k = W_q makes q.k positive for matching content, so co-located
            # tokens (same rotary phase) start out favoured
            for b in range(config.layers):
                values[f"blocks.{b}.attn.wk"] = values[f"blocks.{b}.attn.wq"].copy()
            values["tfem.wk"] = values["tfem.wq"].copy()
        # the crop term starts as a no-op so it cannot swamp the glyph-map tokens
        values["tfem.wv"] = values["tfem.wv"] * config.tfem_value_init
        return cls(config, ParamStore({n: v.astype(dtype) for n, v in values.items()}))

    def __getitem__(self, name):
        return self.store[name]

    @property
    def dtype(self):
        return self.store.dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.store.astype(dtype))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.store.copy())

    def trainable(self) -> list[str]:
        return [n for n in self.store.names() if n not in FROZEN]


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Stacked, model-ready arrays for a group of samples sharing one style mode."""

    style_mode: int
    prompt: np.ndarray        # (n, lp, d)
    style: np.ndarray         # (n, P, lat) patches, or (n, lp, d) prompt rows when style_mode=0
    subject: np.ndarray       # (n, P, lat)
    glyph: np.ndarray         # (n, P, p*p)
    crop_bm: np.ndarray       # (n, C, 64)
    crop_abs: np.ndarray      # (n, C, d)
    crop_local: np.ndarray    # (n, C, d)
    crop_cls: np.ndarray      # (n, C) int
    crop_valid: np.ndarray    # (n, C) bool
    x0: np.ndarray            # (n, P, lat) poster latent in [-1, 1]
    fg_subject: np.ndarray    # (n, P) bool
    fg_glyph: np.ndarray      # (n, P) bool
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.prompt.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        kw = {k: (getattr(self, k)[idx] if isinstance(getattr(self, k), np.ndarray) else getattr(self, k))
              for k in self.__dataclass_fields__ if k != "samples"}
        return Batch(**kw, samples=[self.samples[i] for i in idx] if self.samples else [])

    def condition_fingerprint(self) -> str:
        return fingerprint(np.array([self.style_mode]), self.style, self.subject, self.glyph,
                           self.crop_bm, self.crop_abs, self.crop_local, self.crop_cls,
                           self.crop_valid, self.prompt)

    def with_crops_dropped(self) -> "Batch":
        b = self.take(np.arange(len(self)))
        b.crop_valid = np.zeros_like(self.crop_valid)
        return b


def to_latent(image: np.ndarray, p: int) -> np.ndarray:
    return patchify(image.astype(np.float64) / 127.5 - 1.0, p)


def from_latent(tokens: np.ndarray, size: int, p: int, c: int = 3) -> np.ndarray:
    img = unpatchify(tokens.astype(np.float64), size, size, p, c)
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def prepare_batch(samples: list[PosterSample], config: ModelConfig, dtype=np.float32,
                  style_mode: int | None = None, use_crops: bool | None = None) -> Batch:
    c = config
    use_crops = c.use_crops if use_crops is None else use_crops
    modes = {s.style_mode if style_mode is None else style_mode for s in samples}
    if len(modes) != 1:
        raise ContractError("a batch must share one style mode")
    m = modes.pop()
    n, C, d, p = len(samples), c.max_crops, c.d, c.patch
    for s in samples:
        if s.poster.shape[:2] != (c.image_size, c.image_size):
            raise ContractError(f"sample {s.seed}: image {s.poster.shape[:2]} does not match config "
                                f"image_size {c.image_size}")
        if len(s.crops) > C:
            raise ContractError(f"sample {s.seed}: {len(s.crops)} crops exceed max_crops={C}")
        if any(cr.font_size_class >= c.font_classes for cr in s.crops):
            raise ContractError(f"sample {s.seed}: font size class exceeds font_classes={c.font_classes}")
    prompt = np.stack([prompt_array(s.prompt, d, c.prompt_len, c.prompt_salt) for s in samples])
    if m == 1:
        style = np.stack([patchify(s.style_image / 255.0, p) for s in samples])
    else:
        style = np.stack([prompt_array(s.style_prompt, d, c.prompt_len, c.prompt_salt) for s in samples])
    subject = np.stack([patchify(mask_subject(s.subject_image, s.subject_mask) / 255.0, p) for s in samples])
    glyph = np.stack([patchify(s.glyph_image.astype(np.float64), p) for s in samples])
    crop_bm = np.zeros((n, C, 64))
    crop_abs = np.zeros((n, C, d))
    crop_local = np.zeros((n, C, d))
    crop_cls = np.zeros((n, C), int)
    crop_valid = np.zeros((n, C), bool)
    for i, s in enumerate(samples):
        for j, cr in enumerate(s.crops):
            crop_bm[i, j], crop_abs[i, j], crop_local[i, j] = crop_codes(cr, d)
            crop_cls[i, j] = cr.font_size_class
            crop_valid[i, j] = use_crops
    x0 = np.stack([to_latent(s.poster, p) for s in samples])
    fg_s = np.stack([patch_foreground(s.subject_mask, p) for s in samples])
    fg_g = np.stack([patch_foreground(s.glyph_image, p) for s in samples])
    f = lambda a: a.astype(dtype)  # noqa: E731
    return Batch(m, f(prompt), f(style), f(subject), f(glyph), f(crop_bm), f(crop_abs),
                 f(crop_local), crop_cls, crop_valid, f(x0), fg_s, fg_g, list(samples))


def sequence_lengths(config: ModelConfig, style_mode: int = 1) -> dict[SegmentTag, int]:
    P = config.n_patches
    style = P + config.anchor_len if style_mode == 1 else config.prompt_len
    return {SegmentTag.PROMPT: config.prompt_len, SegmentTag.NOISE: P, SegmentTag.STYLE: style,
            SegmentTag.SUBJECT: P, SegmentTag.GLYPH: P}


# ------------------------------------------------------------ condition encoders

def _lin(x, w, b):
    return x @ w + b


def encode_conditions(params: ModelParams, batch: Batch, active=CONDITIONS, tape=None):
    """Condition token arrays ``{tag: (n, L, d)}`` for the requested conditions."""
    P = params.store
    out = {}
    seg = P["seg_emb"]
    if SegmentTag.STYLE in active:
        if batch.style_mode == 1:
            x = _lin(batch.style, P["style_in.w"], P["style_in.b"]) + params.pos
            anchor = np.broadcast_to(P["anchor"], (len(batch),) + P["anchor"].shape)
            x = np.concatenate([x, anchor], axis=1)
        else:
            x = batch.style
        out[SegmentTag.STYLE] = x + seg[SegmentTag.STYLE]
    if SegmentTag.SUBJECT in active:
        x = _lin(batch.subject, P["subject_in.w"], P["subject_in.b"]) + params.pos
        out[SegmentTag.SUBJECT] = x + seg[SegmentTag.SUBJECT]
    if SegmentTag.GLYPH in active:
        g, gcache = _glyph_fwd(params, batch)
        out[SegmentTag.GLYPH] = g + seg[SegmentTag.GLYPH]
        if tape is not None:
            tape["glyph"] = gcache
    return out


def _glyph_fwd(params: ModelParams, batch: Batch):
    P = params.store
    d = params.config.d
    c1 = _lin(batch.glyph, P["glyph_in.w"], P["glyph_in.b"]) + params.pos
    has = batch.crop_valid.any(axis=1)
    cache = {"c1": c1, "has": has}
    h = c1
    if has.any():
        z1 = _lin(batch.crop_bm, P["tfem.ocr.w1"], P["tfem.ocr.b1"])
        a1, th1 = gelu_fwd(z1)
        feat = _lin(a1, P["tfem.ocr.w2"], P["tfem.ocr.b2"])
        c2 = feat + batch.crop_abs + P["tfem.font_size"][batch.crop_cls] + batch.crop_local
        q, k, v = c1 @ P["tfem.wq"], c2 @ P["tfem.wk"], c2 @ P["tfem.wv"]
        s = q @ k.swapaxes(-1, -2) / math.sqrt(d)
        s = s + np.where(batch.crop_valid, 0.0, NEG_INF)[:, None, :].astype(s.dtype)
        s = s - s.max(-1, keepdims=True)
        pr = np.exp(s)
        pr /= pr.sum(-1, keepdims=True)
        hasf = has[:, None, None].astype(c1.dtype)
        h = c1 + hasf * (pr @ v)
        cache.update(z1=z1, th1=th1, a1=a1, c2=c2, q=q, k=k, v=v, p=pr, hasf=hasf)
    z2 = _lin(h, P["tfem.ffn.w1"], P["tfem.ffn.b1"])
    a2, th2 = gelu_fwd(z2)
    f2 = _lin(a2, P["tfem.ffn.w2"], P["tfem.ffn.b2"])
    out, ln = layer_norm_fwd(f2, P["tfem.ln.g"], P["tfem.ln.b"])
    cache.update(h=h, z2=z2, th2=th2, a2=a2, ln=ln)
    return out, cache


def _glyph_bwd(params: ModelParams, batch: Batch, cache, dout):
    P, G = params.store, params.store.grads
    d = params.config.d
    df2, dg, db = layer_norm_bwd(dout, cache["ln"])
    G["tfem.ln.g"] += dg
    G["tfem.ln.b"] += db
    da2, dw, db = linear_bwd(df2, cache["a2"], P["tfem.ffn.w2"])
    G["tfem.ffn.w2"] += dw
    G["tfem.ffn.b2"] += db
    dz2 = gelu_bwd(da2, cache["z2"], cache["th2"])
    dh, dw, db = linear_bwd(dz2, cache["h"], P["tfem.ffn.w1"])
    G["tfem.ffn.w1"] += dw
    G["tfem.ffn.b1"] += db
    dc1 = dh
    if "c2" in cache:
        dterm = dh * cache["hasf"]
        pr, q, k, v, c1, c2 = (cache[x] for x in ("p", "q", "k", "v", "c1", "c2"))
        dv = pr.swapaxes(-1, -2) @ dterm
        dp = dterm @ v.swapaxes(-1, -2)
        ds = pr * (dp - (dp * pr).sum(-1, keepdims=True)) / math.sqrt(d)
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q
        dc1p, dw, _ = linear_bwd(dq, c1, P["tfem.wq"])
        G["tfem.wq"] += dw
        dc1 = dc1 + dc1p
        dc2k, dwk, _ = linear_bwd(dk, c2, P["tfem.wk"])
        dc2v, dwv, _ = linear_bwd(dv, c2, P["tfem.wv"])
        G["tfem.wk"] += dwk
        G["tfem.wv"] += dwv
        dc2 = (dc2k + dc2v) * batch.crop_valid[..., None]
        np.add.at(G["tfem.font_size"], batch.crop_cls[batch.crop_valid], dc2[batch.crop_valid])
        da1, dw, db = linear_bwd(dc2, cache["a1"], P["tfem.ocr.w2"])
        G["tfem.ocr.w2"] += dw
        G["tfem.ocr.b2"] += db
        dz1 = gelu_bwd(da1, cache["z1"], cache["th1"])
        _, dw, db = linear_bwd(dz1, batch.crop_bm, P["tfem.ocr.w1"])
        G["tfem.ocr.w1"] += dw
        G["tfem.ocr.b1"] += db
    _, dw, db = linear_bwd(dc1, batch.glyph, P["glyph_in.w"])
    G["glyph_in.w"] += dw
    G["glyph_in.b"] += db


def _conditions_bwd(params: ModelParams, batch: Batch, dconds: dict, tape):
    P, G = params.store, params.store.grads
    for tag, dx in dconds.items():
        G["seg_emb"][tag] += dx.sum(axis=(0, 1))
        if tag == SegmentTag.STYLE and batch.style_mode == 1:
            n_p = batch.style.shape[1]
            _, dw, db = linear_bwd(dx[:, :n_p], batch.style, P["style_in.w"])
            G["style_in.w"] += dw
            G["style_in.b"] += db
        elif tag == SegmentTag.SUBJECT:
            _, dw, db = linear_bwd(dx, batch.subject, P["subject_in.w"])
            G["subject_in.w"] += dw
            G["subject_in.b"] += db
        elif tag == SegmentTag.GLYPH:
            _glyph_bwd(params, batch, tape["glyph"], dx)


# ------------------------------------------------------------------- blocks

def _ffn_fwd(P, pre, x):
    h, ln = layer_norm_fwd(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
    z = _lin(h, P[pre + "ffn.w1"], P[pre + "ffn.b1"])
    a, th = gelu_fwd(z)
    return x + _lin(a, P[pre + "ffn.w2"], P[pre + "ffn.b2"]), (h, ln, z, a, th)


def _ffn_bwd(P, G, pre, dy, cache):
    h, ln, z, a, th = cache
    da, dw, db = linear_bwd(dy, a, P[pre + "ffn.w2"])
    G[pre + "ffn.w2"] += dw
    G[pre + "ffn.b2"] += db
    dz = gelu_bwd(da, z, th)
    dh, dw, db = linear_bwd(dz, h, P[pre + "ffn.w1"])
    G[pre + "ffn.w1"] += dw
    G[pre + "ffn.b1"] += db
    dx, dg, db = layer_norm_bwd(dh, ln)
    G[pre + "ln2.g"] += dg
    G[pre + "ln2.b"] += db
    return dy + dx


def _rope_angles(rows: np.ndarray, cols: np.ndarray, hd: int, ratio: float) -> np.ndarray:
    """(L, hd/2) rotation angles: first half of the pairs follow the row, second half the column.

    Frequencies start at a quarter turn per patch and fall by ``ratio`` per pair,
    so neighbouring patches are already well separated at the top frequency.
    """
    k = hd // 4
    freq = (np.pi / 2) * float(ratio) ** -np.arange(k)
    return np.concatenate([rows[:, None] * freq, cols[:, None] * freq], axis=1)


@lru_cache(maxsize=32)
def rope_tables(config: ModelConfig, style_mode: int = 1) -> dict:
    """``{"main" | SegmentTag: (cos, sin)}``, each (L, hd/2); ``None`` entries when disabled.

    Grid tokens (noise, subject, glyph, style patches) share patch coordinates;
    prompt and anchor tokens sit at the origin, i.e. are not rotated.
    """
    c = config
    if not c.rope:
        return {k: None for k in ("main",) + CONDITIONS}
    g = c.image_size // c.patch
    grid = np.stack(np.divmod(np.arange(g * g), g)).astype(float)
    hd = c.d // c.heads

    def table(n_before, with_grid, n_after):
        rows = np.concatenate([np.zeros(n_before), grid[0] if with_grid else [], np.zeros(n_after)])
        cols = np.concatenate([np.zeros(n_before), grid[1] if with_grid else [], np.zeros(n_after)])
        a = _rope_angles(rows, cols, hd, c.rope_ratio)
        return np.cos(a), np.sin(a)

    style = table(0, True, c.anchor_len) if style_mode == 1 else table(c.prompt_len, False, 0)
    return {"main": table(c.prompt_len, True, 0), SegmentTag.STYLE: style,
            SegmentTag.SUBJECT: table(0, True, 0), SegmentTag.GLYPH: table(0, True, 0)}


def apply_rope(x: np.ndarray, rope, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive feature pairs of ``x`` (..., L, hd) by the table angles."""
    if rope is None:
        return x
    cos, sin = (t.astype(x.dtype) for t in rope)
    if inverse:
        sin = -sin
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def _qkv(P, pre, x, heads, rope=None):
    h, ln = layer_norm_fwd(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
    q = apply_rope(split_heads(h @ P[pre + "attn.wq"], heads), rope)
    k = apply_rope(split_heads(h @ P[pre + "attn.wk"], heads), rope)
    v = split_heads(h @ P[pre + "attn.wv"], heads)
    return q, k, v, (h, ln, rope)


def _qkv_bwd(P, G, pre, dq, dk, dv, cache):
    h, ln, rope = cache
    dh = np.zeros_like(h)
    for name, dy in (("wq", dq), ("wk", dk), ("wv", dv)):
        if dy is None:
            continue
        if name != "wv":
            dy = apply_rope(dy, rope, inverse=True)
        dyh = merge_heads(dy)
        dx, dw, _ = linear_bwd(dyh, h, P[pre + "attn." + name])
        G[pre + "attn." + name] += dw
        dh += dx
    dx, dg, db = layer_norm_bwd(dh, ln)
    G[pre + "ln1.g"] += dg
    G[pre + "ln1.b"] += db
    return dx


def condition_layer(P, b: int, xc: np.ndarray, heads: int, keep_cache: bool = False, rope=None):
    """One block of a condition stream: returns (K, V, O, x_next[, cache])."""
    pre = f"blocks.{b}."
    q, k, v, c_qkv = _qkv(P, pre, xc, heads, rope)
    o, p = attn_core(q, k, v)
    om = merge_heads(o)
    oc = om @ P[pre + "attn.wo"]
    x1 = xc + oc
    x2, c_ffn = _ffn_fwd(P, pre, x1)
    if keep_cache:
        return k, v, oc, x2, (q, k, v, p, om, c_qkv, c_ffn)
    return k, v, oc, x2


def _condition_layer_bwd(P, G, b, dx2, dk_ext, dv_ext, cache):
    pre = f"blocks.{b}."
    q, k, v, p, om, c_qkv, c_ffn = cache
    dx1 = _ffn_bwd(P, G, pre, dx2, c_ffn)
    dom, dw, _ = linear_bwd(dx1, om, P[pre + "attn.wo"])
    G[pre + "attn.wo"] += dw
    dq, dk, dv = attn_core_bwd(split_heads(dom, q.shape[-3]), q, k, v, p)
    if dk_ext is not None:
        dk = dk + dk_ext
        dv = dv + dv_ext
    return dx1 + _qkv_bwd(P, G, pre, dq, dk, dv, c_qkv)


# ------------------------------------------------------------------ forward

class BranchCounter:
    """Counts condition-branch executions (one per block, all conditions together)."""

    def __init__(self):
        self.condition_branch = 0


def _keep_at(schedule, b: int, steps: np.ndarray) -> np.ndarray:
    """(n, 3) keep flags for block ``b`` at each sample's step."""
    if schedule is None:
        return np.ones((len(steps), 3), bool)
    return schedule.keep[:, b, :][:, steps].T


def active_conditions(schedule) -> tuple:
    if schedule is None:
        return CONDITIONS
    return tuple(tag for tag in CONDITIONS if schedule.keep[COND_INDEX[tag]].any())


def _check_schedule(config: ModelConfig, schedule):
    if schedule is not None and schedule.keep.shape != (3, config.layers, config.steps):
        raise ContractError(f"schedule shaped {schedule.keep.shape} does not match "
                            f"(3, {config.layers}, {config.steps})")


def _main_input(params: ModelParams, batch: Batch, x_t: np.ndarray, steps: np.ndarray):
    P = params.store
    seg = P["seg_emb"]
    r = len(x_t) // len(batch)
    prompt = np.repeat(batch.prompt, r, axis=0) if r > 1 else batch.prompt
    prompt = prompt + seg[SegmentTag.PROMPT]
    noise = (_lin(x_t, P["noise_in.w"], P["noise_in.b"]) + params.pos + seg[SegmentTag.NOISE]
             + P["time_emb"][steps][:, None, :])
    return np.concatenate([prompt, noise], axis=1)


def warm_cache(params: ModelParams, batch: Batch, schedule=None,
               stats: BranchCounter | None = None) -> ConditionCache:
    """Run every active condition stream through all blocks once."""
    c = params.config
    _check_schedule(c, schedule)
    active = active_conditions(schedule)
    ropes = rope_tables(c, batch.style_mode)
    xs = encode_conditions(params, batch, active)
    layers = []
    for b in range(c.layers):
        layer = {}
        for tag in active:
            k, v, o, xs[tag] = condition_layer(params.store, b, xs[tag], c.heads, rope=ropes[tag])
            layer[tag] = (k, v, o)
        layers.append(layer)
        if stats is not None and active:
            stats.condition_branch += 1
    return ConditionCache(layers, _cache_key(params, batch, active), True, c.layers)


def _cache_key(params, batch, active) -> str:
    return f"{id(params.store)}:{batch.condition_fingerprint()}:{[int(t) for t in active]}"


def forward(params: ModelParams, batch: Batch, x_t: np.ndarray, steps, mode=AttentionMode.DECOUPLED,
            schedule=None, cache: ConditionCache | None = None, stats: BranchCounter | None = None,
            capture: bool = False, tape: dict | None = None):
    """Velocity prediction for the noisy-latent tokens, shape (n, P, latent_dim).

    ``steps`` is the sampler step index per row of ``x_t`` (0 = pure noise).
    ``x_t`` may hold ``r`` consecutive rows per sample (training draws several
    steps per poster); the condition streams are then computed once per sample
    and shared by its rows. With
    ``capture=True`` returns ``(velocity, captures)`` where ``captures[b]`` is
    ``(probs, tags)``: the (n, h, L, L) post-softmax attention over the sequence
    assembled at block ``b`` and that sequence's segment tags.
    Passing a ``tape`` dict records what ``backward`` needs (decoupled only).
    """
    c = params.config
    mode = AttentionMode(mode)
    _check_schedule(c, schedule)
    if len(x_t) % len(batch):
        raise ContractError(f"{len(x_t)} latent rows do not split evenly over {len(batch)} samples")
    r = len(x_t) // len(batch)
    if r > 1 and (mode is not AttentionMode.DECOUPLED or capture):
        raise ContractError("several rows per sample are only supported by the plain decoupled forward")
    steps = np.broadcast_to(np.asarray(steps, int), (len(x_t),))
    if np.any(steps < 0) or np.any(steps >= c.steps):
        raise ContractError(f"step index out of range [0, {c.steps})")
    P = params.store
    active = active_conditions(schedule)
    ropes = rope_tables(c, batch.style_mode)
    xm = _main_input(params, batch, x_t, steps)
    probs = [] if capture else None

    if mode is AttentionMode.FULL:
        if tape is not None:
            raise ContractError("training is only supported in decoupled mode")
        if np.any(steps != steps[0]):
            raise ContractError("full mode needs one step index per batch")
        xs = encode_conditions(params, batch, active)
        for b in range(c.layers):
            keep = _keep_at(schedule, b, steps[:1])[0]
            kept = [tag for tag in active if keep[COND_INDEX[tag]]]
            rope = None if ropes["main"] is None else tuple(
                np.concatenate([ropes["main"][i]] + [ropes[t][i] for t in kept]) for i in (0, 1))
            xm, xs_new, p = _full_block(P, b, xm, [xs[t] for t in kept], c.heads, capture, rope)
            xs.update(zip(kept, xs_new))
            if capture:
                probs.append((p, _tags_for(c.prompt_len, c.n_patches, kept,
                                           [x.shape[1] for x in xs_new])))
        vel = _readout(P, xm, c.prompt_len)[0]
        return (vel, probs) if capture else vel

    if mode is AttentionMode.DECOUPLED_CACHED:
        if tape is not None:
            raise ContractError("cannot train through a cached condition branch")
        if cache is None or not cache.valid:
            raise CacheInvalidError("cached mode requires a warmed cache")
        key = _cache_key(params, batch, active)
        if cache.token_fingerprint != key:
            raise CacheInvalidError(f"stale condition cache: cached {cache.token_fingerprint}, "
                                    f"current {key}")
        if capture:
            raise ContractError("attention capture needs the uncached forward")
        xs = None
    else:
        xs = encode_conditions(params, batch, active, tape)

    if tape is not None:
        tape.update(steps=steps, active=active, blocks=[], x_t=x_t, repeats=r)
    for b in range(c.layers):
        keep = _keep_at(schedule, b, steps)
        kv, masks = [], []
        layer_cache, cond_probs = [], []
        for tag in active:
            flags = keep[:, COND_INDEX[tag]]
            if xs is None:
                k, v, _ = cache.layers[b][tag]
            elif tape is not None or capture:
                k, v, _, x_next, cc = condition_layer(P, b, xs[tag], c.heads, True, ropes[tag])
                layer_cache.append(cc)
                if flags.any():
                    cond_probs.append(cc[3])
                xs[tag] = x_next
            else:
                k, v, _, xs[tag] = condition_layer(P, b, xs[tag], c.heads, rope=ropes[tag])
            if flags.any():
                if r > 1:
                    k, v = np.repeat(k, r, axis=0), np.repeat(v, r, axis=0)
                kv.append((tag, k, v))
                masks.append(None if flags.all() else np.where(flags, 0.0, NEG_INF))
        if xs is not None and stats is not None and active:
            stats.condition_branch += 1
        xm, mcache, p = _main_block(P, b, xm, kv, masks, c.heads, tape is not None, capture,
                                    ropes["main"])
        if tape is not None:
            tape["blocks"].append((mcache, layer_cache, [t for t, _, _ in kv]))
        if capture:
            probs.append((_assemble_decoupled(p, cond_probs),
                          _tags_for(c.prompt_len, c.n_patches, [t for t, _, _ in kv],
                                    [kc.shape[-2] for _, kc, _ in kv])))
    vel, rcache = _readout(P, xm, c.prompt_len)
    if tape is not None:
        tape["readout"] = rcache
        tape["batch"] = batch
    return (vel, probs) if capture else vel


def _main_block(P, b, xm, kv, masks, heads, keep_cache, capture, rope=None):
    pre = f"blocks.{b}."
    q, k, v, c_qkv = _qkv(P, pre, xm, heads, rope)
    keys = np.concatenate([k] + [kc for _, kc, _ in kv], axis=-2) if kv else k
    vals = np.concatenate([v] + [vc for _, _, vc in kv], axis=-2) if kv else v
    add = None
    if any(m is not None for m in masks):
        n = xm.shape[0]
        cols = [np.zeros((n, k.shape[-2]), xm.dtype)]
        for (_, kc, _), m in zip(kv, masks):
            m = np.zeros(n) if m is None else m
            cols.append(np.repeat(m[:, None], kc.shape[-2], axis=1).astype(xm.dtype))
        add = np.concatenate(cols, axis=1)[:, None, None, :]
    o, p = attn_core(q, keys, vals, add)
    om = merge_heads(o)
    x1 = xm + om @ P[pre + "attn.wo"]
    x2, c_ffn = _ffn_fwd(P, pre, x1)
    cache = (q, k, v, keys, vals, p, om, c_qkv, c_ffn, [kc.shape[-2] for _, kc, _ in kv]) if keep_cache else None
    return x2, cache, (p if capture else None)


def _full_block(P, b, xm, conds, heads, capture, rope=None):
    pre = f"blocks.{b}."
    sizes = [xm.shape[1]] + [x.shape[1] for x in conds]
    x = np.concatenate([xm] + conds, axis=1)
    q, k, v, _ = _qkv(P, pre, x, heads, rope)
    o, p = attn_core(q, k, v)
    x1 = x + merge_heads(o) @ P[pre + "attn.wo"]
    x2, _ = _ffn_fwd(P, pre, x1)
    parts = np.split(x2, np.cumsum(sizes)[:-1], axis=1)
    return parts[0], parts[1:], (p if capture else None)


def _tags_for(lm_prompt: int, lm_noise: int, kv_tags, kv_lens) -> np.ndarray:
    parts = [np.full(lm_prompt, int(SegmentTag.PROMPT)), np.full(lm_noise, int(SegmentTag.NOISE))]
    parts += [np.full(n, int(t)) for t, n in zip(kv_tags, kv_lens)]
    return np.concatenate(parts)


def _assemble_decoupled(p_main, cond_probs):
    """Dense (n, h, L, L) attention of a decoupled block: main rows + block-diagonal conditions."""
    n, h, lm, L = p_main.shape
    out = np.zeros((n, h, L, L), p_main.dtype)
    out[:, :, :lm] = p_main
    off = lm
    for p in cond_probs:
        lc = p.shape[-1]
        out[:, :, off:off + lc, off:off + lc] = p
        off += lc
    return out


def _readout(P, xm, lp):
    xn = xm[:, lp:]
    h, ln = layer_norm_fwd(xn, P["final_ln.g"], P["final_ln.b"])
    return h @ P["out.w"] + P["out.b"], (xn, h, ln)


# ------------------------------------------------------------------ backward

def backward(params: ModelParams, tape: dict, dvel: np.ndarray) -> None:
    """Accumulate d(loss)/d(param) into ``params.store.grads`` given d(loss)/d(velocity)."""
    P, G = params.store, params.store.grads
    c = params.config
    batch = tape["batch"]
    xn, h, ln = tape["readout"]
    dh, dw, db = linear_bwd(dvel, h, P["out.w"])
    G["out.w"] += dw
    G["out.b"] += db
    dxn, dg, db = layer_norm_bwd(dh, ln)
    G["final_ln.g"] += dg
    G["final_ln.b"] += db
    lp = c.prompt_len
    dxm = np.zeros((xn.shape[0], lp + xn.shape[1], xn.shape[2]), xn.dtype)
    dxm[:, lp:] = dxn
    active = tape["active"]
    dxs = {tag: None for tag in active}

    for b in reversed(range(c.layers)):
        mcache, layer_cache, kept = tape["blocks"][b]
        pre = f"blocks.{b}."
        q, k, v, keys, vals, p, om, c_qkv, c_ffn, kv_lens = mcache
        dx1 = _ffn_bwd(P, G, pre, dxm, c_ffn)
        dom, dw, _ = linear_bwd(dx1, om, P[pre + "attn.wo"])
        G[pre + "attn.wo"] += dw
        dq, dkeys, dvals = attn_core_bwd(split_heads(dom, c.heads), q, keys, vals, p)
        lm = k.shape[-2]
        splits = np.cumsum([lm] + kv_lens)[:-1]
        dk_parts = np.split(dkeys, splits, axis=-2)
        dv_parts = np.split(dvals, splits, axis=-2)
        dxm = dx1 + _qkv_bwd(P, G, pre, dq, dk_parts[0], dv_parts[0], c_qkv)
        r = tape["repeats"]
        fold = (lambda a: a.reshape((-1, r) + a.shape[1:]).sum(axis=1)) if r > 1 else (lambda a: a)
        ext = {tag: (fold(dk_parts[i + 1]), fold(dv_parts[i + 1])) for i, tag in enumerate(kept)}
        for tag, cc in zip(active, layer_cache):
            dk_e, dv_e = ext.get(tag, (None, None))
            dx2 = dxs[tag]
            if dx2 is None:
                if dk_e is None:
                    continue
                dx2 = np.zeros_like(cc[-1][0])  # shape of the block output
            dxs[tag] = _condition_layer_bwd(P, G, b, dx2, dk_e, dv_e, cc)

    # main input
    steps = tape["steps"]
    G["seg_emb"][SegmentTag.PROMPT] += dxm[:, :lp].sum(axis=(0, 1))
    dnoise = dxm[:, lp:]
    G["seg_emb"][SegmentTag.NOISE] += dnoise.sum(axis=(0, 1))
    np.add.at(G["time_emb"], steps, dnoise.sum(axis=1))
    _, dw, db = linear_bwd(dnoise, tape["x_t"], P["noise_in.w"])
    G["noise_in.w"] += dw
    G["noise_in.b"] += db
    _conditions_bwd(params, batch, {t: g for t, g in dxs.items() if g is not None}, tape)


# ------------------------------------------------------------------ sampling

def initial_noise(seed: int, n: int, config: ModelConfig, dtype=np.float32) -> np.ndarray:
    z, _ = draw_normal(RngState(seed).split(0x5A3D), n * config.n_patches * config.latent_dim, dtype)
    return z.reshape(n, config.n_patches, config.latent_dim)


def sample_latents(params: ModelParams, batch: Batch, mode=AttentionMode.DECOUPLED, schedule=None,
                   seed: int = 0, stats: BranchCounter | None = None,
                   cache: ConditionCache | None = None) -> np.ndarray:
    """T Euler steps of dx/dt = v from t=1 (noise) down to t=0."""
    c = params.config
    mode = AttentionMode(mode)
    x = initial_noise(seed, len(batch), c, params.dtype)
    if mode is AttentionMode.DECOUPLED_CACHED and cache is None:
        cache = warm_cache(params, batch, schedule, stats)
    dt = x.dtype.type(1.0 / c.steps)
    for s in range(c.steps):
        v = forward(params, batch, x, s, mode, schedule, cache, stats)
        x = x - dt * v
    return x


def sample(params: ModelParams, batch: Batch, mode=AttentionMode.DECOUPLED, schedule=None,
           seed: int = 0, stats: BranchCounter | None = None,
           cache: ConditionCache | None = None) -> np.ndarray:
    """Generated images, (n, H, W, 3) uint8."""
    c = params.config
    x = sample_latents(params, batch, mode, schedule, seed, stats, cache)
    return np.stack([from_latent(xi, c.image_size, c.patch, c.channels) for xi in x])


# --------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    table, offset, blobs = [], 0, []
    for name, value in params.store.items():
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({"format": CKPT_FORMAT, "config": params.config.to_dict(),
                         "params": table, "blob_bytes": offset}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_header(data, path)[0]


def _parse_header(data: bytes, path):
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise CheckpointError(f"{path}: header claims {hlen} bytes, file has {len(data) - 8}")
    try:
        header = json.loads(data[8:8 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed header JSON at byte {8 + exc.pos}") from None
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format')!r}, "
                              f"expected {CKPT_FORMAT!r}")
    return header, 8 + hlen


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    data = Path(path).read_bytes()
    header, start = _parse_header(data, path)
    config = ModelConfig.from_dict(header["config"])
    blob = data[start:]
    expected = sum(int(np.prod(e["shape"])) * 4 for e in header["params"])
    if expected != header.get("blob_bytes", expected) or len(blob) != expected:
        raise CheckpointError(f"{path}: parameter blob has {len(blob)} bytes, expected {expected}")
    shapes = param_shapes(config)
    entries = {}
    for e in header["params"]:
        name, shape = e["name"], tuple(e["shape"])
        if shapes.get(name) != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, "
                                  f"config expects {shapes.get(name)}")
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(shape)
        entries[name] = arr.astype(dtype)
    missing = set(shapes) - set(entries)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}")
    return ModelParams(config, ParamStore(entries))
