"""Condition tokenization: prompt, style, subject and the dual-branch glyph encoder.

Single-sample helpers here return ``TokenSeq`` objects; the model calls the
same array-level functions on stacked batches (leading batch axis) and owns
their backward passes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .arraymath import (ContractError, RngState, draw_normal, gelu, layer_norm_fwd,
                        softmax_rows)
from .synthdata import GlyphCrop, PosterSample

NEG_INF = -1e30
OCR_RES = 8
ANCHOR_TEXT = "poster"
PAD_WORD = "<pad>"


class SegmentTag(IntEnum):
    PROMPT = 0
    NOISE = 1
    STYLE = 2
    SUBJECT = 3
    GLYPH = 4


MAIN_TAGS = (SegmentTag.PROMPT, SegmentTag.NOISE)
CONDITIONS = (SegmentTag.STYLE, SegmentTag.SUBJECT, SegmentTag.GLYPH)
CONDITION_NAMES = {SegmentTag.STYLE: "style", SegmentTag.SUBJECT: "subject", SegmentTag.GLYPH: "glyph"}


@dataclass
class TokenSeq:
    tokens: np.ndarray      # (N, d)
    tags: np.ndarray        # (N,) int, SegmentTag values
    patch_pos: np.ndarray   # (N, 2) int, (-1, -1) when the token has no image position

    def __post_init__(self):
        n = self.tokens.shape[0]
        if self.tags.shape != (n,) or self.patch_pos.shape != (n, 2):
            raise ContractError("tokens, tags and patch_pos disagree on sequence length")
        if n and np.any(np.diff(self.tags) < 0):
            raise ContractError("segments must appear in order PROMPT, NOISE, STYLE, SUBJECT, GLYPH")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def lengths(self) -> dict[SegmentTag, int]:
        return {tag: int(np.sum(self.tags == tag)) for tag in SegmentTag}

    def segment(self, tag: SegmentTag) -> "TokenSeq":
        sel = self.tags == tag
        return TokenSeq(self.tokens[sel], self.tags[sel], self.patch_pos[sel])

    @classmethod
    def empty(cls, d: int, dtype=np.float64) -> "TokenSeq":
        return cls(np.zeros((0, d), dtype), np.zeros(0, int), np.zeros((0, 2), int))

    @classmethod
    def of(cls, tokens: np.ndarray, tag: SegmentTag, patch_pos=None) -> "TokenSeq":
        n = tokens.shape[0]
        pos = np.full((n, 2), -1, int) if patch_pos is None else np.asarray(patch_pos, int)
        return cls(tokens, np.full(n, int(tag)), pos)


def concat(*seqs: TokenSeq) -> TokenSeq:
    seqs = [s for s in seqs if len(s)]
    if not seqs:
        raise ContractError("concat needs at least one non-empty sequence")
    return TokenSeq(np.concatenate([s.tokens for s in seqs]),
                    np.concatenate([s.tags for s in seqs]),
                    np.concatenate([s.patch_pos for s in seqs]))


@dataclass
class ConditionBundle:
    style_mode: int
    subject_image: np.ndarray
    subject_mask: np.ndarray
    glyph_image: np.ndarray
    crops: list[GlyphCrop]
    style_prompt: str = ""
    style_image: np.ndarray | None = None

    def __post_init__(self):
        if self.style_mode not in (0, 1):
            raise ContractError("style_mode must be 0 or 1")
        if self.style_mode == 1 and self.style_image is None:
            raise ContractError("style_mode=1 requires a style image")
        if self.style_mode == 0 and not self.style_prompt:
            raise ContractError("style_mode=0 requires a style prompt")

    @classmethod
    def from_sample(cls, sample: PosterSample, style_mode: int | None = None) -> "ConditionBundle":
        m = sample.style_mode if style_mode is None else style_mode
        return cls(m, sample.subject_image, sample.subject_mask, sample.glyph_image,
                   sample.crops, sample.style_prompt, sample.style_image)


# ------------------------------------------------------------ positional codes

def sincos_1d(pos: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = np.asarray(pos, float)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def sincos_2d(y, x, d: int) -> np.ndarray:
    """Half the channels encode ``y``, half ``x``; positions are in pixels."""
    if d % 4:
        raise ContractError(f"sinusoidal 2-d codes need d divisible by 4, got {d}")
    return np.concatenate([sincos_1d(y, d // 2), sincos_1d(x, d // 2)], axis=-1)


def patch_centers(h: int, w: int, p: int) -> np.ndarray:
    """(n_patches, 2) pixel centres (y, x) in row-major patch order."""
    rows, cols = np.mgrid[0:h // p, 0:w // p]
    return np.stack([(rows.ravel() + 0.5) * p, (cols.ravel() + 0.5) * p], axis=1)


def image_pos_table(h: int, w: int, p: int, d: int) -> np.ndarray:
    c = patch_centers(h, w, p)
    return sincos_2d(c[:, 0], c[:, 1], d)


# ------------------------------------------------------------------ encoders

def word_vector(word: str, d: int, salt: int = 0) -> np.ndarray:
    digest = hashlib.blake2b(f"{salt}:{word}".encode(), digest_size=8).digest()
    vec, _ = draw_normal(RngState(int.from_bytes(digest, "little")), d)
    return vec


def prompt_array(text: str, d: int, length_cap: int, salt: int = 0,
                 anchor_fallback: bool = True) -> np.ndarray:
    words = text.split()
    if not words:
        if not anchor_fallback:
            return np.zeros((0, d))
        words = ANCHOR_TEXT.split()
    words = words[:length_cap] + [PAD_WORD] * max(length_cap - len(words), 0)
    return np.stack([word_vector(w, d, salt) for w in words])


def encode_prompt(text: str, d: int, length_cap: int, salt: int = 0,
                  anchor_fallback: bool = True) -> TokenSeq:
    """Whitespace words hashed to fixed embedding rows, padded/truncated to the cap."""
    return TokenSeq.of(prompt_array(text, d, length_cap, salt, anchor_fallback), SegmentTag.PROMPT)


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """(H, W[, C]) -> (H/p * W/p, p*p*C), row-major patches, (py, px, c) inside."""
    img = image if image.ndim == 3 else image[..., None]
    h, w, c = img.shape
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} is not divisible by patch size {p}")
    x = img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, p: int, c: int = 3) -> np.ndarray:
    x = tokens.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def pixels01(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


def patch_encode(image: np.ndarray, p: int, w_embed: np.ndarray, b_embed: np.ndarray,
                 tag: SegmentTag = SegmentTag.NOISE) -> TokenSeq:
    """Linear patch embedding. uint8 RGB is scaled to [0, 1]; 2-d bitmaps and float input are used as is."""
    img = pixels01(image) if image.ndim == 3 and image.dtype == np.uint8 else image.astype(np.float64)
    flat = patchify(img, p).astype(w_embed.dtype)
    rows, cols = np.mgrid[0:image.shape[0] // p, 0:image.shape[1] // p]
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return TokenSeq.of(flat @ w_embed + b_embed, tag, pos)


def mask_subject(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if image.shape[:2] != mask.shape:
        raise ContractError(f"subject image {image.shape[:2]} and mask {mask.shape} differ")
    return image * (mask[..., None] > 0)


def build_style_tokens(bundle: ConditionBundle, anchor: np.ndarray, w_embed, b_embed, p: int,
                       length_cap: int, salt: int = 0) -> TokenSeq:
    """m=0: the encoded style prompt; m=1: style patches followed by the fixed anchor."""
    if bundle.style_mode == 0:
        if not bundle.style_prompt:
            raise ContractError("style_mode=0 without a style prompt")
        toks = prompt_array(bundle.style_prompt, w_embed.shape[1], length_cap, salt)
        return TokenSeq.of(toks.astype(w_embed.dtype), SegmentTag.STYLE)
    if bundle.style_image is None:
        raise ContractError("style_mode=1 without a style image")
    patches = patch_encode(bundle.style_image, p, w_embed, b_embed, SegmentTag.STYLE)
    return concat(patches, TokenSeq.of(anchor.astype(w_embed.dtype), SegmentTag.STYLE))


def build_subject_tokens(subject_image, subject_mask, w_embed, b_embed, p: int) -> TokenSeq:
    return patch_encode(mask_subject(subject_image, subject_mask), p, w_embed, b_embed,
                        SegmentTag.SUBJECT)


def patch_foreground(mask: np.ndarray, p: int) -> np.ndarray:
    """Per-patch flag: at least one foreground pixel in the patch."""
    return patchify((mask > 0).astype(np.uint8), p).max(axis=1) > 0


# ---------------------------------------------------------------------- TFEM

def resample_bitmap(bitmap: np.ndarray, res: int = OCR_RES) -> np.ndarray:
    h, w = bitmap.shape
    rows = ((np.arange(res) + 0.5) * h / res).astype(int)
    cols = ((np.arange(res) + 0.5) * w / res).astype(int)
    return bitmap[np.ix_(rows, cols)].astype(np.float64)


def local_pos_mean(w: int, h: int, d: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return sincos_2d(yy.ravel() + 0.5, xx.ravel() + 0.5, d).mean(axis=0)


def crop_codes(crop: GlyphCrop, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed inputs of one crop: (8x8 bitmap flattened, absolute code, local code)."""
    x, y, w, h = crop.bbox
    abs_code = sincos_2d(np.array([y + h / 2]), np.array([x + w / 2]), d)[0]
    return resample_bitmap(crop.bitmap).ravel(), abs_code, local_pos_mean(w, h, d)


@dataclass
class TFEMParams:
    ocr_w1: np.ndarray   # (64, d)
    ocr_b1: np.ndarray
    ocr_w2: np.ndarray   # (d, d)
    ocr_b2: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    ffn_w1: np.ndarray   # (d, 4d)
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray   # (4d, d)
    ffn_b2: np.ndarray
    ln_g: np.ndarray
    ln_b: np.ndarray
    font_size: np.ndarray  # (F, d)

    FIELDS = {
        "ocr_w1": "tfem.ocr.w1", "ocr_b1": "tfem.ocr.b1", "ocr_w2": "tfem.ocr.w2",
        "ocr_b2": "tfem.ocr.b2", "w_q": "tfem.wq", "w_k": "tfem.wk", "w_v": "tfem.wv",
        "ffn_w1": "tfem.ffn.w1", "ffn_b1": "tfem.ffn.b1", "ffn_w2": "tfem.ffn.w2",
        "ffn_b2": "tfem.ffn.b2", "ln_g": "tfem.ln.g", "ln_b": "tfem.ln.b",
        "font_size": "tfem.font_size",
    }

    @classmethod
    def from_store(cls, store) -> "TFEMParams":
        return cls(**{f: store[n] for f, n in cls.FIELDS.items()})

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def ocr_mlp(self, x: np.ndarray) -> np.ndarray:
        return gelu(x @ self.ocr_w1 + self.ocr_b1) @ self.ocr_w2 + self.ocr_b2


def encode_glyph_crop(crop: GlyphCrop, tfem: TFEMParams, extents: tuple[int, int]) -> np.ndarray:
    """One h^{c2} row: OCR features plus absolute, font-size and local codes."""
    h, w = extents
    x, y, bw, bh = crop.bbox
    if not (0 <= x and 0 <= y and x + bw <= w and y + bh <= h):
        raise ContractError(f"crop bbox {crop.bbox} lies outside the {w}x{h} glyph image")
    if not 0 <= crop.font_size_class < tfem.font_size.shape[0]:
        raise ContractError(f"font size class {crop.font_size_class} out of range")
    bm, abs_code, local = crop_codes(crop, tfem.d)
    dt = tfem.w_q.dtype
    return (tfem.ocr_mlp(bm.astype(dt)) + abs_code.astype(dt)
            + tfem.font_size[crop.font_size_class] + local.astype(dt))


def tfem_attend(h_c1, h_c2, w_q, w_k, w_v, valid=None):
    """Single-head cross-attention term of the fusion; returns (term, probs)."""
    d = w_q.shape[0]
    q, k, v = h_c1 @ w_q, h_c2 @ w_k, h_c2 @ w_v
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    if valid is not None:
        s = s + np.where(valid, 0.0, NEG_INF)[..., None, :].astype(s.dtype)
    p = softmax_rows(s)
    return p @ v, p


def tfem_fuse(h_c1: np.ndarray, h_c2: np.ndarray, tfem: TFEMParams, return_pre_ffn: bool = False):
    """Fuse whole-image glyph tokens with per-crop tokens.

    h = softmax((h_c1 Wq)(h_c2 Wk)^T / sqrt(d)) (h_c2 Wv) + h_c1, output
    LayerNorm(FFN(h)). With no crops the attention term is skipped.
    """
    h = h_c1
    if h_c2.shape[0]:
        term, _ = tfem_attend(h_c1, h_c2, tfem.w_q, tfem.w_k, tfem.w_v)
        h = term + h_c1
    f = gelu(h @ tfem.ffn_w1 + tfem.ffn_b1) @ tfem.ffn_w2 + tfem.ffn_b2
    out, _ = layer_norm_fwd(f, tfem.ln_g, tfem.ln_b)
    return (out, h) if return_pre_ffn else out
