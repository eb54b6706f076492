"""Acceptance criteria 1-11, each recording one pass/fail line in the terminal summary.

Criteria 7-10 train real models on the default config and take most of an
hour on one core; they are marked ``slow`` (deselect with ``-m "not slow"``).
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tricond.arraymath import RngState, draw_normal
from tricond.attention import (AttentionMode, AttentionParams, build_block_mask, decoupled_attention,
                               full_attention)
from tricond.conditions import SegmentTag, TokenSeq
from tricond.costmodel import SequenceProfile, bench_interleaved, decoupled_delta_closed_form, mode_cost
from tricond.experiments import (cliff_check, run_pipeline, strategy_wins, tfem_ablation, tfem_wins,
                                 within_relative)
from tricond.importance import (DEFAULT_RETAIN, ImportanceMap, baseline_schedule, build_condition_mask,
                                compute_importance, derive_schedule, export_heatmaps, masked_mean,
                                read_heatmaps, sample_timesteps, timestep_weights)
from tricond.model import (BranchCounter, ModelConfig, ModelParams, load_checkpoint, prepare_batch,
                           sample, save_checkpoint, sequence_lengths)
from tricond.synthdata import generate_dataset, read_dataset, samples_equal, write_dataset
from tricond.training import gradient_check, tiny_config

D, F, C = AttentionMode.DECOUPLED, AttentionMode.FULL, AttentionMode.DECOUPLED_CACHED


def record(n: int, ok: bool, detail: str, seconds: float):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)"


@pytest.fixture(scope="module")
def pipeline():
    t0 = time.perf_counter()
    res, arts = run_pipeline()
    return res, arts, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_criterion_01_decoupled_equals_masked_full():
    t0 = time.perf_counter()
    worst = 0.0
    tags = (SegmentTag.PROMPT, SegmentTag.NOISE, SegmentTag.STYLE, SegmentTag.SUBJECT, SegmentTag.GLYPH)
    for case in range(200):
        rng = np.random.default_rng(case)
        total = int(rng.integers(4, 129))
        heads = int(rng.integers(1, 5))
        d = heads * int(rng.integers(1, 9))
        # random split of the tokens over segments; noise always present
        cuts = np.sort(rng.integers(0, total, size=4))
        lens = np.diff(np.concatenate([[0], cuts, [total]]))
        if lens[1] == 0:
            lens[int(np.argmax(lens))] -= 1
            lens[1] = 1
        tag_arr = np.concatenate([np.full(n, int(t)) for t, n in zip(tags, lens)])
        seq = TokenSeq(rng.normal(size=(len(tag_arr), d)), tag_arr, np.full((len(tag_arr), 2), -1))
        p = AttentionParams(*(rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)), heads=heads)
        ref = full_attention(seq, p, build_block_mask(seq.tags)).out
        worst = max(worst, float(np.max(np.abs(decoupled_attention(seq, p).out - ref))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 60
    record(1, ok, f"200 cases, max |diff| {worst:.2e} (< 1e-9)", dt)
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_02_cache_soundness(default_model):
    t0 = time.perf_counter()
    cfg, params, batch, _ = default_model
    identical, counts = [], []
    for seed in range(10):
        stats = BranchCounter()
        a = sample(params, batch, D, seed=seed)
        b = sample(params, batch, C, seed=seed, stats=stats)
        identical.append(np.array_equal(a, b))
        counts.append(stats.condition_branch)
    dt = time.perf_counter() - t0
    ok = all(identical) and all(c == cfg.layers for c in counts) and dt < 120
    record(2, ok, f"bit-identical {sum(identical)}/10, branch runs {set(counts)} (B={cfg.layers})", dt)
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_importance_calibration():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    params = ModelParams.init(cfg, np.float64)
    for b in range(cfg.layers):
        for w in ("wq", "wk"):
            params.store[f"blocks.{b}.attn.{w}"] = np.zeros((cfg.d, cfg.d))
    batch = prepare_batch(generate_dataset(2, 5), cfg, np.float64)
    imap = compute_importance(params, batch)
    l_tot = sum(sequence_lengths(cfg, batch.style_mode).values())
    dev = float(np.max(np.abs(imap.S - 1.0 / l_tot)))

    A = np.array([[0.25, 0.75], [0.6, 0.4]])
    hand = [masked_mean(A, np.array([[False, True], [False, True]])) == (0.75 + 0.4) / 2,
            masked_mean(A, np.array([[True, False], [False, False]])) == 0.25,
            masked_mean(A, np.array([[True, True], [True, True]])) == 0.5,
            masked_mean(A, np.zeros((2, 2), bool)) == 0.0]
    tags = np.array([int(SegmentTag.NOISE)] * 2 + [int(SegmentTag.GLYPH)] * 2)
    m = build_condition_mask(tags, SegmentTag.GLYPH, np.array([True, False]))
    hand.append(m.sum() == 2 and m[0, 2] and m[1, 2] and not m[:, 3].any())
    dt = time.perf_counter() - t0
    ok = dev < 1e-9 and all(hand)
    record(3, ok, f"max |S - 1/{l_tot}| {dev:.2e}; hand cases {sum(hand)}/{len(hand)}", dt)
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_cost_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = cached_bad = 0
    cells = 0
    for _ in range(300):
        B, T = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        lens = dict(zip((SegmentTag.STYLE, SegmentTag.SUBJECT, SegmentTag.GLYPH),
                        (int(x) for x in rng.integers(1, 300, 3))))
        prof = SequenceProfile(int(rng.integers(1, 80)), int(rng.integers(1, 300)), lens,
                               rng.random((3, B, T)) < rng.random())
        d = int(rng.choice([16, 64, 3072]))
        full, dec, cached = (mode_cost(prof, m, d) for m in (F, D, C))
        delta = full.cell_attention() - dec.cell_attention()
        active = prof.active()
        for b in range(B):
            for t in range(T):
                kept = prof.kept(b, t)
                dropped = list(active)
                for x in kept:
                    dropped.remove(x)
                cells += 1
                mismatches += int(delta[b, t]) != decoupled_delta_closed_form(prof.main, kept, dropped, d)
        cached_bad += int(dec.condition_attention.sum()) != T * int(cached.condition_attention.sum())
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and cached_bad == 0 and dt < 10
    record(4, ok, f"{cells} cells, closed-form mismatches {mismatches}; cached != uncached/T in "
                  f"{cached_bad} profiles", dt)
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_efficiency_ordering(default_model):
    t0 = time.perf_counter()
    cfg, params, batch, samples = default_model
    # which slots are kept does not change the timing, only how many
    sched = derive_schedule(compute_importance(params, batch), DEFAULT_RETAIN)
    one = batch.take([0])
    lat = bench_interleaved(params, one, [("full", F, None), ("decoupled", D, None),
                                          ("cached", C, sched)], reps=9)
    med = {k: v["median"] for k, v in lat.items()}
    g1 = 1 - med["decoupled"] / med["full"]
    g2 = 1 - med["cached"] / med["decoupled"]
    dt = time.perf_counter() - t0
    ok = g1 >= 0.05 and g2 >= 0.05 and dt < 300
    record(5, ok, "median s " + ", ".join(f"{k} {v:.4f}" for k, v in med.items())
           + f"; gaps {100 * g1:.1f}% and {100 * g2:.1f}% (>= 5%)", dt)
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_06_gradient_check():
    t0 = time.perf_counter()
    cfg = tiny_config()
    err = gradient_check(cfg, samples=50)
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and dt < 300
    record(6, ok, f"d={cfg.d}, B={cfg.layers}, 50 coordinates, worst rel err {err:.2e} (< 1e-4)", dt)
    assert ok


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_07_two_stage_pipeline(pipeline):
    res, arts, secs = pipeline
    t0 = time.perf_counter()
    init, final = res["stage1_loss"]
    close = within_relative(res["stage1"], res["stage2"], 0.1)
    w = timestep_weights(arts["importance"])
    draws, _ = sample_timesteps(w, 10_000, RngState(0).split(77))
    tv = 0.5 * float(np.abs(np.bincount(draws, minlength=len(w)) / 10_000 - w).sum())
    dt = secs + time.perf_counter() - t0
    ok = final < 0.5 * init and all(close.values()) and tv < 0.02 and dt < 1800
    s1, s2 = res["stage1"], res["stage2"]
    record(7, ok, f"loss {init:.3f} -> {final:.3f}; stage II vs I " + ", ".join(
        f"{m} {s1[m]:.4f}->{s2[m]:.4f}{'' if close[m] else ' (out of 10%)'}" for m in close)
        + f"; timestep TV {tv:.4f}", dt)
    assert ok


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_pruning_strategies(pipeline):
    res, _, _ = pipeline
    wins = strategy_wins(res["strategies"])
    n = sum(wins.values())
    ok = n >= 3
    record(8, ok, f"importance >= uniform and random on glyph acc and subject MSE at {n}/4 points "
                  f"{wins}", 0.0)
    assert ok


# ---------------------------------------------------------------- 9

@pytest.mark.slow
def test_criterion_09_retention_cliff(pipeline):
    res, _, _ = pipeline
    chk = cliff_check(res["retention_sweep"])
    ok = all(chk["monotone"].values()) and chk["last_drop_largest"]
    drops = ", ".join(f"{x:+.4f}" for x in chk["glyph_drops"])
    record(9, ok, f"monotone {chk['monotone']}; glyph-acc drops {drops}", 0.0)
    assert ok


# ---------------------------------------------------------------- 10

@pytest.mark.slow
def test_criterion_10_tfem_ablation():
    t0 = time.perf_counter()
    rows = tfem_ablation()
    wins = tfem_wins(rows)
    dt = time.perf_counter() - t0
    ok = sum(wins) >= 2 and dt < 1800
    record(10, ok, "glyph acc with/without per seed " + ", ".join(
        f"{r['seed']}: {r['with']['glyph_acc']:.4f}/{r['without']['glyph_acc']:.4f}" for r in rows), dt)
    assert ok


# ---------------------------------------------------------------- 11

def test_criterion_11_serialization(tmp_path, default_model):
    t0 = time.perf_counter()
    cfg, params, _, samples = default_model
    save_checkpoint(params, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    ckpt_ok = ((tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
               and all(np.array_equal(back[n], params[n]) for n in params.store.names()))

    write_dataset(tmp_path / "data", samples)
    again = read_dataset(tmp_path / "data")
    write_dataset(tmp_path / "data2", again)
    files = sorted(p.relative_to(tmp_path / "data") for p in (tmp_path / "data").rglob("*") if p.is_file())
    same_files = all((tmp_path / "data" / f).read_bytes() == (tmp_path / "data2" / f).read_bytes()
                     for f in files)
    data_ok = (len(again) == len(samples) and same_files
               and all(samples_equal(a, b) for a, b in zip(again, samples)))

    S, _ = draw_normal(RngState(3), 3 * cfg.layers * cfg.steps)
    S = np.abs(S.reshape(3, cfg.layers, cfg.steps)) / 10
    export_heatmaps(ImportanceMap(np.clip(S, 0, 1)), tmp_path / "hm")
    err = float(np.max(np.abs(read_heatmaps(tmp_path / "hm").S - np.clip(S, 0, 1))))
    dt = time.perf_counter() - t0
    ok = ckpt_ok and data_ok and err <= 1e-6 and dt < 60
    record(11, ok, f"checkpoint bit-exact {ckpt_ok}; dataset bit-exact {data_ok}; "
                   f"heatmap max err {err:.1e}", dt)
    assert ok
