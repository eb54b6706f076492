"""Attention capture, per-condition importance maps, heatmap CSVs and routing schedules."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arraymath import ContractError, RngState, draw_uniform, permutation
from .attention import AttentionMode
from .conditions import CONDITION_NAMES, CONDITIONS, SegmentTag

COND_ORDER = ("style", "subject", "glyph")
DEFAULT_RETAIN = {"style": 0.4, "subject": 0.5, "glyph": 0.2}
PROVENANCES = ("importance", "uniform", "random", "all")


@dataclass
class AttentionCapture:
    probs: np.ndarray   # (h, L, L), or (n, h, L, L) for a batch
    tags: np.ndarray    # (L,)
    layer: int
    step: int


@dataclass
class ImportanceMap:
    S: np.ndarray                 # (3, B, T), condition order style, subject, glyph
    sample_count: int = 0
    config_fingerprint: str = ""

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 3 or self.S.shape[0] != 3:
            raise ContractError(f"importance grid must be (3, B, T), got {self.S.shape}")
        if not np.all(np.isfinite(self.S)) or self.S.min() < 0 or self.S.max() > 1:
            raise ContractError("importance values must be finite and in [0, 1]")

    @property
    def layers(self) -> int:
        return self.S.shape[1]

    @property
    def steps(self) -> int:
        return self.S.shape[2]

    def to_json(self) -> str:
        return json.dumps({"format": "tricond-importance/1", "S": self.S.tolist(),
                           "conditions": list(COND_ORDER), "sample_count": self.sample_count,
                           "config_fingerprint": self.config_fingerprint}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ImportanceMap":
        d = json.loads(text)
        return cls(np.array(d["S"]), d.get("sample_count", 0), d.get("config_fingerprint", ""))


def budget(fraction: float, layers: int, steps: int) -> int:
    """ceil(f * B * T), immune to float noise such as 0.7 * 10 = 7.000000000000001."""
    return math.ceil(round(fraction * layers * steps, 9))


@dataclass
class RoutingSchedule:
    keep: np.ndarray                      # (3, B, T) bool
    fractions: dict = field(default_factory=dict)
    provenance: str = "importance"
    seed: int | None = None

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 3 or self.keep.shape[0] != 3:
            raise ContractError(f"keep grid must be (3, B, T), got {self.keep.shape}")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        _, B, T = self.keep.shape
        for i, name in enumerate(COND_ORDER):
            if name in self.fractions:
                want = budget(self.fractions[name], B, T)
                if int(self.keep[i].sum()) != want:
                    raise ContractError(f"{name}: keeps {int(self.keep[i].sum())} slots, budget {want}")

    @classmethod
    def all_keep(cls, layers: int, steps: int) -> "RoutingSchedule":
        return cls(np.ones((3, layers, steps), bool), {n: 1.0 for n in COND_ORDER}, "all")

    @property
    def layers(self) -> int:
        return self.keep.shape[1]

    @property
    def steps(self) -> int:
        return self.keep.shape[2]

    def to_json(self) -> str:
        cells = [[c, int(b), int(t)] for c in range(3) for b, t in zip(*np.nonzero(self.keep[c]))]
        return json.dumps({"format": "tricond-schedule/1", "fractions": self.fractions,
                           "provenance": self.provenance, "seed": self.seed, "layers": self.layers,
                           "steps": self.steps, "keep": cells}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoutingSchedule":
        d = json.loads(text)
        keep = np.zeros((3, d["layers"], d["steps"]), bool)
        for c, b, t in d["keep"]:
            keep[c, b, t] = True
        return cls(keep, d.get("fractions", {}), d.get("provenance", "importance"), d.get("seed"))


# ------------------------------------------------------------------- capture

def capture_layers(params, batch, step: int, mode=AttentionMode.DECOUPLED, schedule=None):
    """All blocks' captured attention at one sampler step, from one forward pass."""
    from .model import forward, initial_noise

    c = params.config
    if not 0 <= step < c.steps:
        raise ContractError(f"step {step} out of range [0, {c.steps})")
    x0 = batch.x0
    noise = initial_noise(1000 + step, len(batch), c, x0.dtype)
    t = x0.dtype.type(1.0 - step / c.steps)
    x_t = (1 - t) * x0 + t * noise
    _, caps = forward(params, batch, x_t, step, mode, schedule, capture=True)
    return [AttentionCapture(p, tags, b, step) for b, (p, tags) in enumerate(caps)]


def capture_attention(params, batch, layer: int, step: int, mode=AttentionMode.DECOUPLED,
                      schedule=None) -> AttentionCapture:
    if not 0 <= layer < params.config.layers:
        raise ContractError(f"layer {layer} out of range [0, {params.config.layers})")
    return capture_layers(params, batch, step, mode, schedule)[layer]


# --------------------------------------------------------------------- masks

def build_condition_mask(tags: np.ndarray, condition: SegmentTag,
                         foreground: np.ndarray | None = None) -> np.ndarray:
    """(L, L) bool: NOISE query rows x key columns of ``condition``.

    ``foreground`` is a per-token flag for the condition's segment (patch
    level); when given for SUBJECT or GLYPH, only those columns count. Extra
    trailing segment tokens beyond the foreground length (none for these two
    conditions) are excluded.
    """
    tags = np.asarray(tags)
    rows = tags == SegmentTag.NOISE
    cols = tags == condition
    if foreground is not None and condition in (SegmentTag.SUBJECT, SegmentTag.GLYPH):
        idx = np.flatnonzero(cols)
        fg = np.zeros(len(idx), bool)
        fg[:len(foreground)] = np.asarray(foreground, bool)[:len(idx)]
        cols = np.zeros_like(cols)
        cols[idx[fg]] = True
    return rows[:, None] & cols[None, :]


def masked_mean(probs: np.ndarray, mask: np.ndarray) -> float:
    """Mean of ``probs`` (..., L, L) over leading axes and masked-in entries; 0 if empty."""
    mask = np.broadcast_to(mask, probs.shape)
    count = int(mask.sum())
    return float(probs[mask].sum() / count) if count else 0.0


def _foreground(batch, tag):
    if tag == SegmentTag.SUBJECT:
        return batch.fg_subject
    if tag == SegmentTag.GLYPH:
        return batch.fg_glyph
    return None


def _accumulate(sums, counts, cap: AttentionCapture, batch, b: int, t: int):
    p, tags = cap.probs, cap.tags
    rows = tags == SegmentTag.NOISE
    heads = p.shape[1]
    for i, tag in enumerate(CONDITIONS):
        cols = np.flatnonzero(tags == tag)
        if not len(cols):
            continue
        block = p[:, :, rows][:, :, :, cols].sum(axis=(1, 2))   # (n, Lc)
        fg = _foreground(batch, tag)
        if fg is None:
            w = np.ones(block.shape, bool)
        else:
            w = np.zeros(block.shape, bool)
            w[:, :fg.shape[1]] = fg
        sums[i, b, t] += float((block * w).sum())
        counts[i, b, t] += int(w.sum()) * heads * int(rows.sum())


def compute_importance(params, batch, mode=AttentionMode.DECOUPLED, chunk: int = 16) -> ImportanceMap:
    """Importance grid averaged over every sample of ``batch``."""
    c = params.config
    sums = np.zeros((3, c.layers, c.steps))
    counts = np.zeros((3, c.layers, c.steps), np.int64)
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        for t in range(c.steps):
            for b, cap in enumerate(capture_layers(params, part, t, mode)):
                _accumulate(sums, counts, cap, part, b, t)
    S = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return ImportanceMap(np.clip(S, 0.0, 1.0), len(batch), c.fingerprint())


# ------------------------------------------------------------------ heatmaps

def export_heatmaps(imap: ImportanceMap, directory) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, name in enumerate(COND_ORDER):
        path = out / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer"] + [str(t) for t in range(imap.steps)])
            for b in range(imap.layers):
                w.writerow([str(b)] + [f"{v:.6f}" for v in imap.S[i, b]])
        paths.append(path)
    return paths


def read_heatmaps(directory) -> ImportanceMap:
    grids = []
    for name in COND_ORDER:
        path = Path(directory) / f"{name}.csv"
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "layer":
            raise ContractError(f"{path}: missing 'layer' header")
        try:
            grids.append([[float(v) for v in r[1:]] for r in rows[1:]])
        except ValueError as exc:
            raise ContractError(f"{path}: {exc}") from None
    return ImportanceMap(np.array(grids))


def load_importance(path) -> ImportanceMap:
    """Accepts either an importance JSON file or a heatmap directory."""
    path = Path(path)
    if path.is_dir():
        return read_heatmaps(path)
    return ImportanceMap.from_json(path.read_text())


# ------------------------------------------------------------------ schedules

def parse_retain(text: str) -> dict:
    out = dict(DEFAULT_RETAIN)
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, val = part.partition("=")
        name = name.strip()
        if name not in COND_ORDER:
            raise ContractError(f"retain: unknown condition {name!r}")
        try:
            f = float(val)
        except ValueError:
            raise ContractError(f"retain: bad fraction {val!r} for {name}") from None
        out[name] = f
    _check_fractions(out)
    return out


def retention_from_pruning(glyph: float, subject: float, style: float) -> dict:
    """Pruning percentages listed glyph-first, converted to retention fractions."""
    return {"style": 1 - style / 100, "subject": 1 - subject / 100, "glyph": 1 - glyph / 100}


def uniform_fractions(f: float) -> dict:
    return {n: f for n in COND_ORDER}


def _check_fractions(fractions: dict):
    for name, f in fractions.items():
        if not 0.0 <= f <= 1.0:
            raise ContractError(f"{name}: retention fraction {f} outside [0, 1]")


def derive_schedule(imap: ImportanceMap, fractions: dict = DEFAULT_RETAIN) -> RoutingSchedule:
    """Keep each condition's top-k cells; ties go to the smaller layer, then smaller step."""
    _check_fractions(fractions)
    B, T = imap.layers, imap.steps
    keep = np.zeros((3, B, T), bool)
    bb, tt = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    for i, name in enumerate(COND_ORDER):
        k = budget(fractions[name], B, T)
        order = np.lexsort((tt.ravel(), bb.ravel(), -imap.S[i].ravel()))
        keep[i].reshape(-1)[order[:k]] = True
    return RoutingSchedule(keep, dict(fractions), "importance")


def baseline_schedule(kind: str, fractions: dict, layers: int, steps: int,
                      seed: int = 0) -> RoutingSchedule:
    _check_fractions(fractions)
    n = layers * steps
    keep = np.zeros((3, layers, steps), bool)
    rng = RngState(seed)
    for i, name in enumerate(COND_ORDER):
        k = budget(fractions[name], layers, steps)
        if kind == "uniform":
            cells = [j * n // k for j in range(k)]
        elif kind == "random":
            perm, rng = permutation(rng, n)
            cells = sorted(perm[:k])
        else:
            raise ContractError(f"unknown baseline kind {kind!r}")
        keep[i].reshape(-1)[cells] = True
    return RoutingSchedule(keep, dict(fractions), kind, seed if kind == "random" else None)


def timestep_weights(imap: ImportanceMap) -> np.ndarray:
    mass = imap.S.sum(axis=(0, 1))
    total = mass.sum()
    if total <= 0:
        return np.full(imap.steps, 1.0 / imap.steps)
    return mass / total


def sample_timesteps(weights: np.ndarray, n: int, rng: RngState) -> tuple[np.ndarray, RngState]:
    """Inverse-CDF draws of step indices."""
    u, rng = draw_uniform(rng, n)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1), rng


__all__ = ["AttentionCapture", "ImportanceMap", "RoutingSchedule", "CONDITION_NAMES",
           "budget", "build_condition_mask", "masked_mean", "compute_importance",
           "capture_attention", "capture_layers", "export_heatmaps", "read_heatmaps",
           "load_importance", "derive_schedule", "baseline_schedule", "timestep_weights",
           "sample_timesteps", "parse_retain", "retention_from_pruning"]
