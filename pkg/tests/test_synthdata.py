import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tricond.arraymath import ContractError
from tricond.font import CELLS, CHAR_ID, CHARS
from tricond.synthdata import (DatasetError, GenerationSpec, decode_pnm, encode_pnm,
                               generate_dataset, generate_sample, palette_table,
                               read_dataset, render_glyph_string, samples_equal, write_dataset)


def test_font_cells_distinct():
    flat = {CELLS[i].tobytes() for i in range(len(CHARS))}
    assert len(flat) == len(CHARS)


def test_render_glyph_crops_cover_strokes():
    img, crops = render_glyph_string("AB", (1, 2), 2, (32, 32))
    assert len(crops) == 2
    x, y, w, h = crops[1].bbox
    assert (x, y, w, h) == (1 + 8, 2, 6, 10)
    assert np.array_equal(img[y:y + h, x:x + w], crops[1].bitmap)
    assert crops[0].font_size_class == 1 and crops[0].char_id == CHAR_ID["A"]
    assert img.sum() == sum(c.bitmap.sum() for c in crops)


def test_render_rejects_unknown_char_and_overflow():
    with pytest.raises(ContractError):
        render_glyph_string("a", (0, 0), 1, (32, 32))
    with pytest.raises(ContractError):
        render_glyph_string("ABCDEFGHIJ", (0, 0), 2, (32, 32))


@given(st.integers(0, 10_000))
def test_sample_invariants(seed):
    s = generate_sample(seed)
    frac = s.subject_mask.mean()
    assert 0.05 <= frac <= 0.40
    assert not np.any(s.subject_mask & s.glyph_image)
    assert np.all(s.poster[s.glyph_image == 1] == s.text_color)
    assert s.prompt.startswith("a poster with a ")
    assert np.array_equal(s.subject_image[s.subject_mask == 0], np.zeros((int((s.subject_mask == 0).sum()), 3)))
    assert s.poster.dtype == np.uint8 and s.poster.shape == (32, 32, 3)


def test_generation_is_deterministic():
    assert samples_equal(generate_sample(42), generate_sample(42))
    assert not samples_equal(generate_sample(42), generate_sample(43))


def test_palette_pairs_are_far_apart():
    for a, b in palette_table(GenerationSpec()):
        assert sum(abs(x - y) for x, y in zip(a, b)) >= 120
        assert all(40 <= v <= 215 for v in a + b)


@pytest.mark.parametrize("field,value", [("shapes", ("hexagon",)), ("scales", (0,)),
                                         ("gradient_levels", 1), ("charset", "abc")])
def test_spec_errors_name_the_field(field, value):
    with pytest.raises(ContractError, match=field):
        GenerationSpec(**{field: value}).validate()


def test_spec_unknown_field():
    with pytest.raises(ContractError, match="colour"):
        GenerationSpec.from_dict({"colour": 1})


def test_spec_dict_round_trip():
    spec = GenerationSpec(text_len=(1, 3))
    assert GenerationSpec.from_dict(spec.to_dict()) == spec


@given(st.integers(1, 9), st.integers(1, 9), st.booleans())
def test_pnm_round_trip(h, w, rgb):
    img = np.random.default_rng(h * w).integers(0, 256, size=(h, w, 3) if rgb else (h, w)).astype(np.uint8)
    assert np.array_equal(decode_pnm(encode_pnm(img)), img)


def test_pnm_errors_name_offset():
    data = encode_pnm(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(DatasetError, match="byte"):
        decode_pnm(data[:-1], "x.ppm")
    with pytest.raises(DatasetError, match="magic"):
        decode_pnm(b"P3" + data[2:], "x.ppm")


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(3, 7)
    write_dataset(tmp_path / "d", samples, GenerationSpec())
    back = read_dataset(tmp_path / "d")
    assert all(samples_equal(a, b) for a, b in zip(samples, back))


def test_dataset_bad_manifest(tmp_path):
    write_dataset(tmp_path, generate_dataset(1, 0))
    (tmp_path / "manifest.json").write_text("{bad")
    with pytest.raises(DatasetError, match="manifest.json"):
        read_dataset(tmp_path)
