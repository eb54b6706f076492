"""Multi-head attention in full, decoupled and decoupled-with-cache modes.

In decoupled mode the main stream (prompt + noisy-latent tokens) queries every
key in the sequence, while each condition segment only attends within itself.
That makes the condition branch independent of the noisy latent and of the
timestep, so its keys, values and outputs can be computed once and reused.
Blocked logits are set to ``NEG_INF = -1e30`` before the softmax; their
probabilities underflow to exactly zero.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .arraymath import ContractError, softmax_rows
from .conditions import CONDITIONS, MAIN_TAGS, NEG_INF, SegmentTag, TokenSeq


class AttentionMode(str, Enum):
    FULL = "full"
    DECOUPLED = "decoupled"
    DECOUPLED_CACHED = "cached"


class CacheInvalidError(RuntimeError):
    """A cached condition branch no longer matches the condition tokens."""


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads:
            raise ContractError(f"model width {d} is not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class AttentionOutput:
    out: np.ndarray        # (N, d), same token order as the input
    tags: np.ndarray
    probs: np.ndarray | None = None  # (h, N, N) when requested

    @property
    def main(self) -> np.ndarray:
        return self.out[np.isin(self.tags, MAIN_TAGS)]

    def condition(self, tag: SegmentTag) -> np.ndarray:
        return self.out[self.tags == tag]


@dataclass
class BlockMask:
    """``allowed[q, k]`` at token level; ``segments`` at (query tag, key tag) level."""

    allowed: np.ndarray
    segments: np.ndarray

    def additive(self, dtype=np.float64) -> np.ndarray:
        return np.where(self.allowed, 0.0, NEG_INF).astype(dtype)


def build_block_mask(tags: np.ndarray) -> BlockMask:
    tags = np.asarray(tags)
    n_tags = len(SegmentTag)
    seg = np.zeros((n_tags, n_tags), bool)
    for q in SegmentTag:
        for k in SegmentTag:
            seg[q, k] = q in MAIN_TAGS or q == k
    return BlockMask(seg[tags[:, None], tags[None, :]], seg)


# ------------------------------------------------------------------ kernels

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attn_core(q, k, v, add_mask=None):
    """softmax(q k^T / sqrt(d_head) + mask) v over arbitrary leading axes."""
    s = q @ k.swapaxes(-1, -2) * (1.0 / math.sqrt(q.shape[-1]))
    if add_mask is not None:
        s = s + add_mask
    p = softmax_rows(s)
    return p @ v, p


def attn_core_bwd(do, q, k, v, p):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = p.swapaxes(-1, -2) @ do
    dp = do @ v.swapaxes(-1, -2)
    ds = p * (dp - (dp * p).sum(-1, keepdims=True))
    dq = ds @ k * scale
    dk = ds.swapaxes(-1, -2) @ q * scale
    return dq, dk, dv


def _project(x, params: AttentionParams):
    h = params.heads
    return (split_heads(x @ params.w_q, h), split_heads(x @ params.w_k, h),
            split_heads(x @ params.w_v, h))


# ---------------------------------------------------------------- operations

def full_attention(seq: TokenSeq, params: AttentionParams, mask: BlockMask | None = None,
                   return_probs: bool = False) -> AttentionOutput:
    if len(seq) == 0:
        raise ContractError("attention over an empty sequence")
    q, k, v = _project(seq.tokens, params)
    add = mask.additive(q.dtype) if mask is not None else None
    o, p = attn_core(q, k, v, add)
    return AttentionOutput(merge_heads(o) @ params.w_o, seq.tags, p if return_probs else None)


def _main_and_conditions(seq: TokenSeq):
    main = np.isin(seq.tags, MAIN_TAGS)
    conds = [(tag, seq.tags == tag) for tag in CONDITIONS if np.any(seq.tags == tag)]
    return main, conds


def condition_branch(tokens: np.ndarray, params: AttentionParams):
    """Self-attention of one condition segment: returns (k, v, o) with o projected by W_O."""
    q, k, v = _project(tokens, params)
    o, _ = attn_core(q, k, v)
    return k, v, merge_heads(o) @ params.w_o


def _main_stream(seq: TokenSeq, params: AttentionParams, main, cond_kv):
    q, k, v = _project(seq.tokens[main], params)
    keys = np.concatenate([k] + [kc for kc, _ in cond_kv], axis=-2)
    vals = np.concatenate([v] + [vc for _, vc in cond_kv], axis=-2)
    o, _ = attn_core(q, keys, vals)
    return merge_heads(o) @ params.w_o


def decoupled_attention(seq: TokenSeq, params: AttentionParams) -> AttentionOutput:
    """O_n = Attn(Q_n, [K_n; K_c...], [V_n; V_c...]); O_ci = Attn(Q_ci, K_ci, V_ci)."""
    if len(seq) == 0:
        raise ContractError("attention over an empty sequence")
    main, conds = _main_and_conditions(seq)
    out = np.zeros_like(seq.tokens)
    branches = [condition_branch(seq.tokens[sel], params) for _, sel in conds]
    for (_, sel), (_, _, o) in zip(conds, branches):
        out[sel] = o
    if np.any(main):
        out[main] = _main_stream(seq, params, main, [(k, v) for k, v, _ in branches])
    return AttentionOutput(out, seq.tags)


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class ConditionCache:
    """Condition-branch activations per layer: ``layers[b][tag] = (K, V, O)``."""

    layers: list[dict] = field(default_factory=list)
    token_fingerprint: str = ""
    valid: bool = False
    executions: int = 0


def warm_layer_cache(seq: TokenSeq, params: AttentionParams) -> ConditionCache:
    """Single-layer cache of every condition segment present in ``seq``."""
    _, conds = _main_and_conditions(seq)
    layer = {tag: condition_branch(seq.tokens[sel], params) for tag, sel in conds}
    return ConditionCache([layer], condition_fingerprint(seq), True, 1)


def condition_fingerprint(seq: TokenSeq) -> str:
    cond = ~np.isin(seq.tags, MAIN_TAGS)
    return fingerprint(seq.tokens[cond], seq.tags[cond])


def attend(seq: TokenSeq, params: AttentionParams, mode: AttentionMode,
           cache: ConditionCache | None = None) -> AttentionOutput:
    mode = AttentionMode(mode)
    if mode is AttentionMode.FULL:
        return full_attention(seq, params)
    if mode is AttentionMode.DECOUPLED:
        return decoupled_attention(seq, params)
    if cache is None or not cache.valid:
        raise CacheInvalidError("cached mode requires a warmed cache")
    if cache.token_fingerprint != condition_fingerprint(seq):
        raise CacheInvalidError(
            f"condition tokens changed: cache {cache.token_fingerprint}, "
            f"sequence {condition_fingerprint(seq)}")
    main, conds = _main_and_conditions(seq)
    layer = cache.layers[0]
    out = np.zeros_like(seq.tokens)
    for tag, sel in conds:
        out[sel] = layer[tag][2]
    if np.any(main):
        out[main] = _main_stream(seq, params, main, [layer[tag][:2] for tag, _ in conds])
    return AttentionOutput(out, seq.tags)
