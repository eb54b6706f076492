"""Analytic attention FLOPs per mode and schedule, wall-clock benchmarks, efficiency report.

Conventions: a multiply-add counts as 2 FLOPs; softmax, normalisation and
the FFN are excluded; peak activation is the largest attention probability
tensor held at once (float32), a proxy rather than an allocator reading.
Scope of every total is one complete T-step sampling run of one image.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMode
from .conditions import CONDITIONS, SegmentTag

REPORT_FORMAT = "tricond-efficiency/1"
CONVENTION = ("multiply-add = 2 FLOPs; attention scores and weighted sum plus Q/K/V/O "
              "projections; softmax, layer norm and FFN excluded")
# full-scale figures quoted for context only; nothing here reproduces them
REFERENCE = {
    "note": "published full-scale figures, not reproduced by this toy benchmark",
    "latency_s": {"full": 76.02, "decoupled": 55.87, "decoupled_cached_pruned": 47.32},
    "tflops": {"full": 218.45, "decoupled": 165.56, "decoupled_cached_pruned": 135.25},
    "flops_reduction_pct": {"decoupled": 24.2, "decoupled_cached_pruned": 38.1},
}


def attention_flops(lq: int, lk: int, d: int) -> int:
    """Scores (Q K^T) plus the weighted sum (P V): 2 * (2 * lq * lk * d)."""
    if min(lq, lk, d) < 0:
        raise ValueError("extents must be non-negative")
    return 4 * int(lq) * int(lk) * int(d)


def projection_flops(length: int, d: int) -> int:
    """Q, K, V and O projections of ``length`` tokens, 2 * L * d^2 each."""
    return 8 * int(length) * int(d) * int(d)


@dataclass(frozen=True)
class SequenceProfile:
    prompt: int
    noise: int
    conditions: dict          # SegmentTag -> length
    keep: np.ndarray          # (3, B, T) bool

    @classmethod
    def from_config(cls, config, schedule=None, style_mode: int = 1) -> "SequenceProfile":
        from .model import sequence_lengths

        lens = sequence_lengths(config, style_mode)
        keep = (np.ones((3, config.layers, config.steps), bool) if schedule is None
                else np.asarray(schedule.keep, bool))
        if keep.shape != (3, config.layers, config.steps):
            raise ValueError(f"schedule shaped {keep.shape} does not match "
                             f"(3, {config.layers}, {config.steps})")
        return cls(lens[SegmentTag.PROMPT], lens[SegmentTag.NOISE],
                   {t: lens[t] for t in CONDITIONS}, keep)

    @property
    def layers(self) -> int:
        return self.keep.shape[1]

    @property
    def steps(self) -> int:
        return self.keep.shape[2]

    @property
    def main(self) -> int:
        return self.prompt + self.noise

    def kept(self, b: int, t: int) -> list[int]:
        return [self.conditions[tag] for i, tag in enumerate(CONDITIONS) if self.keep[i, b, t]]

    def active(self) -> list[int]:
        """Lengths of conditions kept anywhere; their branch runs at every block."""
        return [self.conditions[tag] for i, tag in enumerate(CONDITIONS) if self.keep[i].any()]

    def active_length(self, b: int, t: int) -> int:
        return self.main + sum(self.kept(b, t))


@dataclass
class CostReport:
    mode: str
    main_attention: np.ndarray        # (B, T) int64
    condition_attention: np.ndarray   # (B, T) int64; cached runs charge column 0 only
    projection: np.ndarray            # (B, T) int64
    condition_branch_executions: int
    peak_activation_floats: int
    latency: dict = field(default_factory=dict)
    config_fingerprint: str = ""

    @property
    def attention_total(self) -> int:
        return int(self.main_attention.sum() + self.condition_attention.sum())

    @property
    def projection_total(self) -> int:
        return int(self.projection.sum())

    @property
    def total(self) -> int:
        return self.attention_total + self.projection_total

    def cell_attention(self) -> np.ndarray:
        return self.main_attention + self.condition_attention


def mode_cost(profile: SequenceProfile, mode, d: int, heads: int = 1) -> CostReport:
    mode = AttentionMode(mode)
    B, T = profile.layers, profile.steps
    main = np.zeros((B, T), np.int64)
    cond = np.zeros((B, T), np.int64)
    proj = np.zeros((B, T), np.int64)
    active = profile.active()
    lm = profile.main
    peak = 0
    for b in range(B):
        for t in range(T):
            kept = profile.kept(b, t)
            if mode is AttentionMode.FULL:
                L = lm + sum(kept)
                main[b, t] = attention_flops(L, L, d)
                proj[b, t] = projection_flops(L, d)
                peak = max(peak, heads * L * L)
                continue
            main[b, t] = attention_flops(lm, lm + sum(kept), d)
            peak = max(peak, heads * lm * (lm + sum(kept)), *(heads * lc * lc for lc in active))
            branch = sum(attention_flops(lc, lc, d) for lc in active)
            branch_proj = projection_flops(sum(active), d)
            if mode is AttentionMode.DECOUPLED or t == 0:
                cond[b, t] = branch
                proj[b, t] = projection_flops(lm, d) + branch_proj
            else:
                proj[b, t] = projection_flops(lm, d)
    if mode is AttentionMode.FULL or not active:
        executions = 0
    else:
        executions = B if mode is AttentionMode.DECOUPLED_CACHED else B * T
    return CostReport(mode.value, main, cond, proj, executions, peak)


def decoupled_delta_closed_form(lm: int, kept: list[int], dropped_active: list[int], d: int) -> int:
    """FULL minus DECOUPLED attention FLOPs at one cell.

    With every active condition kept this is 4 d (lm * sum(Lc) + sum_{i != j} Lci Lcj);
    an active-but-dropped condition still runs its own branch, costing 4 d Lc^2 extra.
    """
    cross = sum(a * b for i, a in enumerate(kept) for j, b in enumerate(kept) if i != j)
    return 4 * d * (lm * sum(kept) + cross) - 4 * d * sum(lc * lc for lc in dropped_active)


# ---------------------------------------------------------------- benchmarks

def bench_wallclock(params, batch, mode, schedule=None, reps: int = 7, warmup: int = 1,
                    seed: int = 0) -> dict:
    """Median and spread of full T-step sampling wall time (seconds).

    Runs single-threaded in the calling process; concurrent benchmarks on the
    same machine make the numbers meaningless.
    """
    from .model import sample

    if reps < 5:
        raise ValueError("reps must be >= 5")
    for _ in range(warmup):
        sample(params, batch, mode, schedule, seed)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sample(params, batch, mode, schedule, seed)
        times.append(time.perf_counter() - t0)
    q = statistics.quantiles(times, n=4, method="inclusive")
    return {"median": statistics.median(times), "iqr": q[2] - q[0], "min": min(times),
            "max": max(times), "reps": reps, "times": times}


def bench_interleaved(params, batch, runs: list[tuple[str, object, object]], reps: int = 7,
                      warmup: int = 1, seed: int = 0) -> dict:
    """Benchmark several (name, mode, schedule) runs round-robin so drift hits all alike."""
    from .model import sample

    if reps < 5:
        raise ValueError("reps must be >= 5")
    for _, mode, sched in runs:
        for _ in range(warmup):
            sample(params, batch, mode, sched, seed)
    times = {name: [] for name, _, _ in runs}
    for _ in range(reps):
        for name, mode, sched in runs:
            t0 = time.perf_counter()
            sample(params, batch, mode, sched, seed)
            times[name].append(time.perf_counter() - t0)
    out = {}
    for name, ts in times.items():
        q = statistics.quantiles(ts, n=4, method="inclusive")
        out[name] = {"median": statistics.median(ts), "iqr": q[2] - q[0], "min": min(ts),
                     "max": max(ts), "reps": reps, "times": ts}
    return out


def reductions(totals: dict, baseline: str = "full") -> dict:
    base = totals[baseline]
    return {k: round(100.0 * (base - v) / base, 4) for k, v in totals.items()}


def efficiency_report(params, batch, schedule, reps: int = 7, modes=None, measure: bool = True) -> dict:
    """Rows: full attention, decoupled, and decoupled+cache under ``schedule``."""
    c = params.config
    rows = modes or [("full", AttentionMode.FULL, None), ("decoupled", AttentionMode.DECOUPLED, None),
                     ("decoupled_cached_pruned", AttentionMode.DECOUPLED_CACHED, schedule)]
    lat = bench_interleaved(params, batch, rows, reps) if measure else {}
    out_rows, totals = [], {}
    for name, mode, sched in rows:
        rep = mode_cost(SequenceProfile.from_config(c, sched, batch.style_mode), mode, c.d, c.heads)
        totals[name] = rep.total
        out_rows.append({
            "name": name, "mode": AttentionMode(mode).value,
            "schedule": getattr(sched, "provenance", "all"),
            "flops": {"attention": rep.attention_total, "projection": rep.projection_total,
                      "total": rep.total},
            "condition_branch_executions": rep.condition_branch_executions,
            "peak_activation_bytes": 4 * rep.peak_activation_floats,
            "latency_s": {k: v for k, v in lat.get(name, {}).items() if k != "times"},
        })
    red = reductions(totals, rows[0][0])
    for row in out_rows:
        row["flops_reduction_pct"] = red[row["name"]]
    return {"format": REPORT_FORMAT, "convention": CONVENTION,
            "scope": f"one {c.steps}-step sampling run, batch of {len(batch)}",
            "config_fingerprint": c.fingerprint(), "rows": out_rows, "reference": REFERENCE}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "convention", "scope", "config_fingerprint", "rows", "reference"],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "rows": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["name", "mode", "flops", "flops_reduction_pct", "latency_s",
                         "peak_activation_bytes", "condition_branch_executions"],
            "properties": {
                "mode": {"enum": [m.value for m in AttentionMode]},
                "flops": {"type": "object", "required": ["attention", "projection", "total"],
                          "additionalProperties": {"type": "integer", "minimum": 0}},
                "flops_reduction_pct": {"type": "number"},
                "peak_activation_bytes": {"type": "integer", "minimum": 0},
                "condition_branch_executions": {"type": "integer", "minimum": 0},
                "latency_s": {"type": "object"},
            }}},
        "reference": {"type": "object"},
    },
}


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
