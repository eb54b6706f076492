import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tricond.attention import AttentionMode
from tricond.conditions import SegmentTag
from tricond.costmodel import (REPORT_SCHEMA, SequenceProfile, attention_flops, bench_wallclock,
                               decoupled_delta_closed_form, dump_report, efficiency_report,
                               mode_cost, projection_flops, reductions)
from tricond.importance import DEFAULT_RETAIN, ImportanceMap, baseline_schedule, derive_schedule
from tricond.model import ModelConfig

FULL, DEC, CACHED = AttentionMode.FULL, AttentionMode.DECOUPLED, AttentionMode.DECOUPLED_CACHED


def test_flop_examples():
    assert attention_flops(1, 1, 1) == 4
    assert attention_flops(2, 3, 5) == 120
    assert attention_flops(3, 2, 5) == 120
    assert projection_flops(1, 1) == 8
    assert projection_flops(64, 64) == 2_097_152
    assert projection_flops(128, 64) == 2 * projection_flops(64, 64)


profiles = st.builds(
    lambda p, n, c, keep: SequenceProfile(p, n, dict(zip((SegmentTag.STYLE, SegmentTag.SUBJECT,
                                                          SegmentTag.GLYPH), c)), np.array(keep, bool)),
    st.integers(1, 16), st.integers(1, 128), st.lists(st.integers(1, 96), min_size=3, max_size=3),
    st.integers(1, 4).flatmap(lambda B: st.integers(1, 5).flatmap(
        lambda T: st.lists(st.lists(st.lists(st.booleans(), min_size=T, max_size=T),
                                    min_size=B, max_size=B), min_size=3, max_size=3))))


@given(profiles, st.sampled_from([8, 16, 64]))
def test_full_minus_decoupled_closed_form(profile, d):
    full, dec = mode_cost(profile, FULL, d), mode_cost(profile, DEC, d)
    delta = full.cell_attention() - dec.cell_attention()
    active = profile.active()
    for b in range(profile.layers):
        for t in range(profile.steps):
            kept = profile.kept(b, t)
            dropped = list(active)
            for lc in kept:
                dropped.remove(lc)
            assert int(delta[b, t]) == decoupled_delta_closed_form(profile.main, kept, dropped, d)


@given(st.integers(1, 64), st.lists(st.integers(1, 64), min_size=1, max_size=3), st.integers(1, 32))
def test_closed_form_is_the_square_expansion(lm, lcs, d):
    L = lm + sum(lcs)
    oracle = 4 * d * (L * L - lm * L - sum(c * c for c in lcs))
    assert decoupled_delta_closed_form(lm, lcs, [], d) == oracle


@given(profiles, st.sampled_from([8, 64]))
def test_cached_condition_attention_is_uncached_over_T(profile, d):
    dec, cached = mode_cost(profile, DEC, d), mode_cost(profile, CACHED, d)
    T = profile.steps
    assert dec.condition_attention.sum() == T * cached.condition_attention.sum()
    assert np.array_equal(dec.main_attention, cached.main_attention)
    assert dec.total == sum(int(x) for x in (dec.main_attention + dec.condition_attention
                                             + dec.projection).ravel())


def test_zero_keep_costs_main_stream_only():
    cfg = ModelConfig()
    prof = SequenceProfile.from_config(cfg, baseline_schedule("uniform", {"style": 0, "subject": 0,
                                                                          "glyph": 0}, 6, 8))
    lm = cfg.prompt_len + cfg.n_patches
    for mode in (FULL, DEC, CACHED):
        rep = mode_cost(prof, mode, cfg.d)
        assert rep.attention_total == 48 * attention_flops(lm, lm, cfg.d)
        assert rep.condition_branch_executions == 0


def test_branch_execution_counts():
    prof = SequenceProfile.from_config(ModelConfig())
    assert mode_cost(prof, DEC, 64).condition_branch_executions == 48
    assert mode_cost(prof, CACHED, 64).condition_branch_executions == 6
    assert mode_cost(prof, FULL, 64).condition_branch_executions == 0


@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from(["style", "subject", "glyph"]),
       st.integers(0, 2**32 - 1))
def test_more_retention_never_costs_less(f1, f2, which, seed):
    # top-k schedules are nested; full-mode cell cost depends on which conditions
    # share a cell, so non-nested schedules (uniform baseline) need not be monotone
    lo, hi = sorted((f1, f2))
    base = dict(DEFAULT_RETAIN)
    imap = ImportanceMap(np.random.default_rng(seed).random((3, 6, 8)))
    a = SequenceProfile.from_config(ModelConfig(), derive_schedule(imap, {**base, which: lo}))
    b = SequenceProfile.from_config(ModelConfig(), derive_schedule(imap, {**base, which: hi}))
    for mode in (FULL, DEC, CACHED):
        assert mode_cost(a, mode, 64).total <= mode_cost(b, mode, 64).total


def test_reductions_arithmetic():
    r = reductions({"full": 200, "decoupled": 150, "cached": 50})
    assert r == {"full": 0.0, "decoupled": 25.0, "cached": 75.0}


def test_report_schema_and_reductions(default_model):
    cfg, params, batch, _ = default_model
    from tricond.importance import ImportanceMap, derive_schedule
    s = derive_schedule(ImportanceMap(np.random.default_rng(0).uniform(size=(3, 6, 8))))
    rep = efficiency_report(params, batch.take([0]), s, measure=False)
    jsonschema.validate(rep, REPORT_SCHEMA)
    back = json.loads(dump_report(rep))
    assert back == json.loads(json.dumps(rep))
    rows = {r["name"]: r for r in back["rows"]}
    assert rows["full"]["flops_reduction_pct"] == 0.0
    full = rows["full"]["flops"]["total"]
    for r in rows.values():
        assert r["flops_reduction_pct"] == pytest.approx(100 * (full - r["flops"]["total"]) / full, abs=1e-4)
    assert rows["full"]["flops"]["total"] > rows["decoupled"]["flops"]["total"] \
        > rows["decoupled_cached_pruned"]["flops"]["total"]
    assert "not reproduced" in back["reference"]["note"]


def test_bench_median_within_range(tiny):
    _, params, batch, _ = tiny
    stats = bench_wallclock(params, batch, DEC, reps=5)
    assert stats["min"] <= stats["median"] <= stats["max"]
    with pytest.raises(ValueError):
        bench_wallclock(params, batch, DEC, reps=3)
