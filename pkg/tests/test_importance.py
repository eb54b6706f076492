import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tricond.arraymath import ContractError, RngState
from tricond.attention import AttentionMode
from tricond.conditions import SegmentTag
from tricond.importance import (DEFAULT_RETAIN, ImportanceMap, RoutingSchedule, baseline_schedule,
                                budget, build_condition_mask, capture_attention, compute_importance,
                                derive_schedule, export_heatmaps, load_importance, masked_mean,
                                parse_retain, read_heatmaps, retention_from_pruning,
                                sample_timesteps, timestep_weights)
from tricond.model import ModelParams


def zero_qk(params: ModelParams) -> ModelParams:
    p = params.copy()
    for b in range(p.config.layers):
        for w in ("wq", "wk"):
            name = f"blocks.{b}.attn.{w}"
            p.store[name] = np.zeros_like(p[name])
    return p


def test_mask_counts_for_style():
    tags = np.array([0] * 8 + [1] * 64 + [2] * 68 + [3] * 64 + [4] * 64)
    m = build_condition_mask(tags, SegmentTag.STYLE)
    assert m.sum() == 64 * 68


def test_mask_empty_foreground_and_disjoint():
    tags = np.array([1] * 4 + [2] * 3 + [3] * 4 + [4] * 4)
    assert not build_condition_mask(tags, SegmentTag.SUBJECT, np.zeros(4, bool)).any()
    masks = [build_condition_mask(tags, t, np.ones(4, bool)) for t in
             (SegmentTag.STYLE, SegmentTag.SUBJECT, SegmentTag.GLYPH)]
    cols = [set(np.flatnonzero(m.any(0))) for m in masks]
    assert not (cols[0] & cols[1]) and not (cols[1] & cols[2]) and not (cols[0] & cols[2])
    fg = np.array([True, False, False, True])
    sub = build_condition_mask(tags, SegmentTag.SUBJECT, fg)
    assert sub.sum() == 4 * 2 and sub[:4].any(1).all() and not sub[4:].any()


def test_masked_mean_hand_cases():
    A = np.array([[0.25, 0.75], [0.6, 0.4]])
    assert masked_mean(A, np.array([[False, True], [False, True]])) == (0.75 + 0.4) / 2
    assert masked_mean(A, np.array([[True, False], [False, False]])) == 0.25
    assert masked_mean(A, np.zeros((2, 2), bool)) == 0.0
    heads = np.stack([A, A[::-1]])
    assert masked_mean(heads, np.array([[True, True], [False, False]])) == pytest.approx(0.5)


def test_capture_rows_and_shape(tiny):
    cfg, params, batch, _ = tiny
    cap = capture_attention(params, batch, 1, 2)
    n, h, L, L2 = cap.probs.shape
    assert (h, L) == (cfg.heads, len(cap.tags)) and L == L2
    assert np.allclose(cap.probs.sum(-1), 1.0, atol=1e-9)
    full = capture_attention(params, batch, 0, 0, AttentionMode.FULL)
    assert np.allclose(full.probs.sum(-1), 1.0, atol=1e-9)
    with pytest.raises(ContractError):
        capture_attention(params, batch, cfg.layers, 0)
    with pytest.raises(ContractError):
        capture_attention(params, batch, 0, cfg.steps)


def test_zeroed_qk_gives_uniform_capture(tiny):
    _, params, batch, _ = tiny
    cap = capture_attention(zero_qk(params), batch, 0, 1, AttentionMode.FULL)
    assert np.allclose(cap.probs, 1.0 / len(cap.tags), atol=1e-12)


@pytest.mark.parametrize("mode", [AttentionMode.FULL, AttentionMode.DECOUPLED])
def test_uniform_calibration(tiny, mode):
    _, params, batch, _ = tiny
    imap = compute_importance(zero_qk(params), batch, mode)
    L = len(capture_attention(params, batch, 0, 0).tags)
    assert np.max(np.abs(imap.S - 1.0 / L)) < 1e-9


def test_importance_ignores_condition_rows(tiny):
    _, params, batch, _ = tiny
    from tricond.importance import _accumulate

    cap = capture_attention(params, batch, 0, 0)
    sums, counts = np.zeros((3, 1, 1)), np.zeros((3, 1, 1), np.int64)
    _accumulate(sums, counts, cap, batch, 0, 0)
    cap.probs[:, :, cap.tags >= SegmentTag.STYLE] = 0.123
    s2, c2 = np.zeros((3, 1, 1)), np.zeros((3, 1, 1), np.int64)
    _accumulate(s2, c2, cap, batch, 0, 0)
    assert np.array_equal(sums, s2) and np.array_equal(counts, c2)


def test_importance_map_validation():
    with pytest.raises(ContractError):
        ImportanceMap(np.full((3, 2, 2), 1.5))
    with pytest.raises(ContractError):
        ImportanceMap(np.zeros((2, 2, 2)))


def test_heatmap_csv_format_and_round_trip(tmp_path):
    S = np.random.default_rng(0).uniform(size=(3, 6, 8))
    paths = export_heatmaps(ImportanceMap(S), tmp_path)
    assert sorted(p.name for p in paths) == ["glyph.csv", "style.csv", "subject.csv"]
    lines = (tmp_path / "style.csv").read_text().splitlines()
    assert len(lines) == 7
    assert all(len(line.split(",")) == 9 for line in lines)
    assert lines[0] == "layer,0,1,2,3,4,5,6,7"
    assert np.max(np.abs(read_heatmaps(tmp_path).S - S)) <= 5e-7
    (tmp_path / "imap.json").write_text(ImportanceMap(S).to_json())
    assert np.array_equal(load_importance(tmp_path / "imap.json").S, S)


def test_budget_rounding():
    assert budget(0.7, 2, 5) == 7
    assert budget(0.4, 6, 8) == 20
    assert budget(0.2, 6, 8) == 10
    assert budget(0.0, 6, 8) == 0


def test_schedule_extremes_and_defaults():
    imap = ImportanceMap(np.random.default_rng(1).uniform(size=(3, 6, 8)))
    assert derive_schedule(imap, {"style": 1, "subject": 1, "glyph": 1}).keep.all()
    assert not derive_schedule(imap, {"style": 0, "subject": 0, "glyph": 0}).keep.any()
    assert DEFAULT_RETAIN == {"style": 0.4, "subject": 0.5, "glyph": 0.2}
    assert parse_retain("style=0.4,subject=0.5,glyph=0.2") == DEFAULT_RETAIN
    with pytest.raises(ContractError):
        parse_retain("style=1.5")
    with pytest.raises(ContractError):
        parse_retain("colour=0.5")


def test_schedule_picks_top_cells_with_tie_break():
    S = np.zeros((3, 2, 3))
    S[0] = [[0.1, 0.5, 0.5], [0.5, 0.2, 0.0]]
    s = derive_schedule(ImportanceMap(S), {"style": 0.5, "subject": 0.5, "glyph": 0.5})
    assert s.keep[0].tolist() == [[False, True, True], [True, False, False]]
    # all-equal grid keeps the first cells in (layer, step) order
    assert s.keep[1].ravel().tolist() == [True, True, True, False, False, False]


@given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
def test_schedule_nesting(seed, f1, f2):
    lo, hi = sorted((f1, f2))
    S = np.round(np.random.default_rng(seed).uniform(size=(3, 4, 5)), 1)  # plenty of ties
    imap = ImportanceMap(S)
    a = derive_schedule(imap, {"style": lo, "subject": lo, "glyph": lo}).keep
    b = derive_schedule(imap, {"style": hi, "subject": hi, "glyph": hi}).keep
    assert not np.any(a & ~b)


@given(st.sampled_from(["uniform", "random"]), st.floats(0, 1), st.integers(1, 6), st.integers(1, 8),
       st.integers(0, 99))
def test_baseline_budgets(kind, f, B, T, seed):
    s = baseline_schedule(kind, {"style": f, "subject": f, "glyph": f}, B, T, seed)
    assert all(int(s.keep[i].sum()) == budget(f, B, T) for i in range(3))


def test_uniform_baseline_spacing_and_random_reproducible():
    s = baseline_schedule("uniform", {"style": 0.5, "subject": 0.5, "glyph": 0.5}, 2, 4)
    assert np.flatnonzero(s.keep[0].ravel()).tolist() == [0, 2, 4, 6]
    r1 = baseline_schedule("random", DEFAULT_RETAIN, 6, 8, 3)
    r2 = baseline_schedule("random", DEFAULT_RETAIN, 6, 8, 3)
    r3 = baseline_schedule("random", DEFAULT_RETAIN, 6, 8, 4)
    assert np.array_equal(r1.keep, r2.keep) and not np.array_equal(r1.keep, r3.keep)


def test_schedule_json_round_trip_and_budget_check():
    s = baseline_schedule("random", DEFAULT_RETAIN, 6, 8, 1)
    back = RoutingSchedule.from_json(s.to_json())
    assert np.array_equal(back.keep, s.keep) and back.provenance == "random" and back.seed == 1
    keep = s.keep.copy()
    keep[0, 0, 0] = not keep[0, 0, 0]
    with pytest.raises(ContractError):
        RoutingSchedule(keep, DEFAULT_RETAIN)


def test_pruning_rows_map_to_retention():
    assert retention_from_pruning(80, 50, 60) == pytest.approx({"style": 0.4, "subject": 0.5, "glyph": 0.2})


def test_timestep_weights_cases():
    assert np.allclose(timestep_weights(ImportanceMap(np.full((3, 2, 4), 0.3))), 0.25)
    assert np.allclose(timestep_weights(ImportanceMap(np.zeros((3, 2, 4)))), 0.25)
    S = np.zeros((3, 2, 5))
    S[1, 1, 3] = 0.2
    assert timestep_weights(ImportanceMap(S)).tolist() == [0, 0, 0, 1, 0]
    w = timestep_weights(ImportanceMap(np.random.default_rng(0).uniform(size=(3, 6, 8))))
    assert abs(w.sum() - 1) < 1e-12


def test_timestep_sampling_matches_weights():
    w = timestep_weights(ImportanceMap(np.random.default_rng(5).uniform(size=(3, 6, 8))))
    draws, _ = sample_timesteps(w, 10_000, RngState(0))
    freq = np.bincount(draws, minlength=8) / 10_000
    assert 0.5 * np.abs(freq - w).sum() < 0.02
