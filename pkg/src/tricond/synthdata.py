"""Procedural toy posters: gradient background, one solid subject, a glyph string.

A sample is a pure function of ``(seed, GenerationSpec)``. Images are stored
as binary PPM/PGM with a JSON sidecar per sample and a top-level manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arraymath import ContractError, RngState, draw_int, draw_uniform
from .font import CELL_H, CELL_W, CHAR_ID, CHARS, glyph_cell

DATASET_FORMAT = "tricond-dataset/1"

SUBJECT_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 190, 30),
    "purple": (160, 50, 200),
    "cyan": (30, 190, 200),
}

# coarse names used for style prompts when no style image is given
_NAMED = {
    "gray": (128, 128, 128), "red": (200, 60, 60), "green": (60, 170, 70),
    "blue": (60, 80, 200), "yellow": (210, 190, 60), "purple": (150, 70, 180),
    "cyan": (60, 180, 190), "orange": (215, 130, 50), "brown": (120, 80, 50),
    "pink": (210, 120, 160), "olive": (120, 130, 50), "navy": (50, 60, 120),
}

DIRECTIONS = ("left", "right", "down", "up")


class DatasetError(ValueError):
    """Malformed dataset file; the message names the file and byte offset."""


@dataclass(frozen=True)
class GenerationSpec:
    height: int = 32
    width: int = 32
    palette_count: int = 8
    gradient_levels: int = 4
    shapes: tuple[str, ...] = ("square", "circle", "triangle", "diamond")
    text_len: tuple[int, int] = (2, 4)
    scales: tuple[int, ...] = (1, 2)
    charset: str = CHARS
    style_mode: int = 1
    palette_seed: int = 0

    def validate(self) -> "GenerationSpec":
        if self.height < 16 or self.width < 16:
            raise ContractError("height/width: canvas must be at least 16x16")
        if self.palette_count < 1:
            raise ContractError("palette_count: must be >= 1")
        if self.gradient_levels < 2:
            raise ContractError("gradient_levels: must be >= 2")
        unknown = [s for s in self.shapes if s not in _SHAPES]
        if not self.shapes or unknown:
            raise ContractError(f"shapes: unknown or empty {unknown}")
        lo, hi = self.text_len
        if not 0 <= lo <= hi:
            raise ContractError(f"text_len: bad range {self.text_len}")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ContractError(f"scales: bad scale list {self.scales}")
        bad = [c for c in self.charset if c not in CHAR_ID]
        if not self.charset or bad:
            raise ContractError(f"charset: characters missing from font {bad}")
        if self.style_mode not in (0, 1):
            raise ContractError("style_mode: must be 0 or 1")
        for s in self.scales:
            if _max_chars(self.width, s) < lo or 5 * s + 12 > self.height:
                raise ContractError(f"text_len: {lo} characters at scale {s} do not fit the canvas")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"{sorted(extra)[0]}: unknown generation spec field")
        kw = dict(d)
        for key in ("shapes", "text_len", "scales"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            spec = cls(**kw)
        except TypeError as exc:
            raise ContractError(str(exc)) from exc
        return spec.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("shapes", "text_len", "scales"):
            d[key] = list(d[key])
        return d


@dataclass
class GlyphCrop:
    bitmap: np.ndarray            # (h, w) uint8 0/1
    bbox: tuple[int, int, int, int]  # x, y, w, h
    font_size_class: int
    char_id: int


@dataclass
class PosterSample:
    poster: np.ndarray            # (H, W, 3) uint8
    style_image: np.ndarray       # (H, W, 3) uint8
    subject_image: np.ndarray     # (H, W, 3) uint8
    subject_mask: np.ndarray      # (H, W) uint8 0/1
    glyph_image: np.ndarray       # (H, W) uint8 0/1
    crops: list[GlyphCrop]
    prompt: str
    seed: int
    style_prompt: str = ""
    style_mode: int = 1
    text: str = ""
    text_color: tuple[int, int, int] = (255, 255, 255)
    palette: tuple[tuple[int, int, int], ...] = field(default_factory=tuple)


def _max_chars(width: int, scale: int) -> int:
    # one pixel margin each side, 1*scale gap between characters
    return (width - 2 + scale) // ((CELL_W + 1) * scale)


def render_glyph_string(text: str, origin: tuple[int, int], scale: int,
                        canvas: tuple[int, int], scales: tuple[int, ...] = (1, 2)):
    """Stamp ``text`` at ``origin=(x, y)``; returns ``(glyph_image, crops)``."""
    h, w = canvas
    if scale not in scales:
        raise ContractError(f"scale {scale} not in scale list {scales}")
    for ch in text:
        if ch not in CHAR_ID:
            raise ContractError(f"character {ch!r} is not in the font table")
    image = np.zeros((h, w), dtype=np.uint8)
    crops = []
    if not text:
        return image, crops
    x0, y0 = origin
    cw, chh = CELL_W * scale, CELL_H * scale
    total_w = len(text) * (CELL_W + 1) * scale - scale
    if x0 < 0 or y0 < 0 or x0 + total_w > w or y0 + chh > h:
        raise ContractError(f"text {text!r} at {origin} scale {scale} leaves the {w}x{h} canvas")
    cls = scales.index(scale)
    for i, ch in enumerate(text):
        x = x0 + i * (CELL_W + 1) * scale
        bitmap = glyph_cell(CHAR_ID[ch], scale)
        image[y0:y0 + chh, x:x + cw] = bitmap
        crops.append(GlyphCrop(bitmap.copy(), (x, y0, cw, chh), cls, CHAR_ID[ch]))
    return image, crops


def palette_table(spec: GenerationSpec) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """``palette_count`` colour pairs drawn from ``palette_seed``; channels in [40, 215]."""
    rng = RngState(spec.palette_seed).split(0xC0104)
    table = []
    while len(table) < spec.palette_count:
        u, rng = draw_uniform(rng, 6)
        c = np.round(40 + u * 175).astype(int)
        a, b = tuple(int(v) for v in c[:3]), tuple(int(v) for v in c[3:])
        if np.abs(np.subtract(a, b)).sum() >= 120:
            table.append((a, b))
    return table


def _ramp(spec: GenerationSpec, palette, direction: str) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.gradient_levels
    levels = _levels(palette, k)
    if direction in ("left", "right"):
        band = (np.arange(w) * k) // w
        if direction == "right":
            band = k - 1 - band
        idx = np.broadcast_to(band[None, :], (h, w))
    else:
        band = (np.arange(h) * k) // h
        if direction == "up":
            band = k - 1 - band
        idx = np.broadcast_to(band[:, None], (h, w))
    return levels[idx]


def _levels(palette, k: int) -> np.ndarray:
    a, b = np.array(palette[0], float), np.array(palette[1], float)
    return np.stack([np.round(a + (b - a) * i / (k - 1)) for i in range(k)]).astype(np.uint8)


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    r = size / 2
    if kind == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == "circle":
        m = dy * dy + dx * dx <= r * r
    elif kind == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    elif kind == "triangle":
        # apex up, base at cy + r
        m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    else:
        raise ContractError(f"unknown shape {kind!r}")
    return m.astype(np.uint8)


_SHAPES = ("square", "circle", "triangle", "diamond")


def _nearest_name(color) -> str:
    c = np.array(color, float)
    return min(_NAMED, key=lambda n: float(((np.array(_NAMED[n]) - c) ** 2).sum()))


def generate_sample(seed: int, spec: GenerationSpec = GenerationSpec()) -> PosterSample:
    spec.validate()
    h, w = spec.height, spec.width
    rng = RngState(seed)
    palettes = palette_table(spec)

    def ints(n, high):
        nonlocal rng
        v, rng = draw_int(rng, n, high)
        return [int(x) for x in v]

    pal_i = ints(1, len(palettes))[0]
    style_dir = ints(1, 4)[0]
    poster_dir = (style_dir + 1 + ints(1, 3)[0]) % 4
    palette = palettes[pal_i]
    lum = np.mean([0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2] for c in palette])
    text_color = (255, 255, 255) if lum < 128 else (0, 0, 0)

    scale = spec.scales[ints(1, len(spec.scales))[0]]
    lo, hi = spec.text_len
    hi = min(hi, _max_chars(w, scale))
    if hi < lo:
        raise ContractError(f"text_len: {lo} characters at scale {scale} do not fit")
    n_chars = lo + ints(1, hi - lo + 1)[0]
    text = "".join(spec.charset[i] for i in ints(n_chars, len(spec.charset))) if n_chars else ""
    text_w = n_chars * (CELL_W + 1) * scale - scale
    text_h = CELL_H * scale
    text_top = ints(1, 2)[0] == 0
    ty = 1 + ints(1, 2)[0] if text_top else h - text_h - 1 - ints(1, 2)[0]
    tx = 1 + ints(1, max(w - text_w - 1, 1))[0] if n_chars else 1
    glyph, crops = render_glyph_string(text, (tx, ty), scale, (h, w), spec.scales)

    # subject lives in the half not occupied by text
    y_lo, y_hi = (text_h + 4, h - 1) if text_top else (1, h - text_h - 4)
    shape = spec.shapes[ints(1, len(spec.shapes))[0]]
    subj_name = list(SUBJECT_COLORS)[ints(1, len(SUBJECT_COLORS))[0]]
    subj_color = SUBJECT_COLORS[subj_name]
    for _ in range(64):
        size = 8 + ints(1, max(min(y_hi - y_lo, 18) - 8, 1) + 1)[0]
        cy = y_lo + size / 2 + ints(1, max(y_hi - y_lo - size, 0) + 1)[0]
        cx = 1 + size / 2 + ints(1, max(w - 2 - size, 0) + 1)[0]
        mask = _shape_mask(shape, h, w, cy, cx, size) * (1 - glyph)
        frac = mask.mean()
        if 0.05 <= frac <= 0.40:
            break
    else:
        raise ContractError("shapes: could not place a subject covering 5-40% of the canvas")

    style_image = _ramp(spec, palette, DIRECTIONS[style_dir])
    poster = _ramp(spec, palette, DIRECTIONS[poster_dir]).copy()
    poster[mask == 1] = subj_color
    poster[glyph == 1] = text_color
    subject_image = poster * mask[..., None]
    prompt = f"a poster with a {subj_name} {shape}"
    style_prompt = f"{_nearest_name(palette[0])} {_nearest_name(palette[1])} gradient"
    return PosterSample(
        poster=poster, style_image=style_image, subject_image=subject_image.astype(np.uint8),
        subject_mask=mask, glyph_image=glyph, crops=crops, prompt=prompt, seed=seed,
        style_prompt=style_prompt, style_mode=spec.style_mode, text=text,
        text_color=text_color, palette=tuple(palette),
    )


def vocabulary() -> list[str]:
    """Every word a generated prompt or style prompt can contain."""
    words = {"a", "poster", "with", "gradient"} | set(SUBJECT_COLORS) | set(_SHAPES) | set(_NAMED)
    return sorted(words)


def samples_equal(a: PosterSample, b: PosterSample) -> bool:
    arrays = ("poster", "style_image", "subject_image", "subject_mask", "glyph_image")
    if any(not np.array_equal(getattr(a, k), getattr(b, k)) for k in arrays):
        return False
    if len(a.crops) != len(b.crops):
        return False
    for ca, cb in zip(a.crops, b.crops):
        if (tuple(ca.bbox) != tuple(cb.bbox) or ca.font_size_class != cb.font_size_class
                or ca.char_id != cb.char_id or not np.array_equal(ca.bitmap, cb.bitmap)):
            return False
    scalars = ("prompt", "seed", "style_prompt", "style_mode", "text")
    return (all(getattr(a, k) == getattr(b, k) for k in scalars)
            and tuple(a.text_color) == tuple(b.text_color)
            and tuple(map(tuple, a.palette)) == tuple(map(tuple, b.palette)))


# ------------------------------------------------------------------ file IO

def encode_pnm(image: np.ndarray) -> bytes:
    """P6 for (H, W, 3) uint8, P5 for (H, W) uint8; maxval 255."""
    if image.ndim == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ContractError(f"cannot encode image of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes()


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{name}: truncated header at byte {pos}")
        tokens.append((data[start:pos], start))
    magic, magic_at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{name}: bad magic {magic!r} at byte {magic_at}")
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next(at for t, at in tokens[1:] if not t.isdigit())
        raise DatasetError(f"{name}: non-numeric header field at byte {bad}") from None
    if maxval != 255:
        raise DatasetError(f"{name}: unsupported maxval {maxval} at byte {tokens[3][1]}")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(data) - pos != need:
        raise DatasetError(f"{name}: expected {need} pixel bytes at byte {pos}, found {len(data) - pos}")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def _read_pnm(path: Path) -> np.ndarray:
    return decode_pnm(path.read_bytes(), str(path))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_dataset(directory, samples: list[PosterSample], spec: GenerationSpec | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        files = {
            "poster": (f"{stem}_poster.ppm", s.poster),
            "style_image": (f"{stem}_style.ppm", s.style_image),
            "subject_image": (f"{stem}_subject.ppm", s.subject_image),
            "subject_mask": (f"{stem}_mask.pgm", s.subject_mask * 255),
            "glyph_image": (f"{stem}_glyph.pgm", s.glyph_image * 255),
        }
        for fname, img in files.values():
            (d / fname).write_bytes(encode_pnm(img.astype(np.uint8)))
        meta = {
            "seed": int(s.seed), "prompt": s.prompt, "style_prompt": s.style_prompt,
            "style_mode": int(s.style_mode), "text": s.text, "text_color": list(s.text_color),
            "palette": [list(c) for c in s.palette],
            "crops": [{"bbox": [int(v) for v in c.bbox], "font_size_class": int(c.font_size_class),
                       "char_id": int(c.char_id),
                       "bitmap": ["".join(str(int(v)) for v in row) for row in c.bitmap]}
                      for c in s.crops],
        }
        (d / f"{stem}.json").write_text(_dump_json(meta))
        entry = {"id": i, "seed": int(s.seed), "meta": f"{stem}.json"}
        entry.update({k: v[0] for k, v in files.items()})
        entries.append(entry)
    manifest = {"format": DATASET_FORMAT, "spec": spec.to_dict() if spec else None, "samples": entries}
    (d / "manifest.json").write_text(_dump_json(manifest))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at byte {exc.pos}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: unsupported format {manifest.get('format')!r} at byte 0")
    return manifest


def read_dataset(directory) -> list[PosterSample]:
    d = Path(directory)
    manifest = read_manifest(d)
    out = []
    for entry in manifest["samples"]:
        meta_path = d / entry["meta"]
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{meta_path}: invalid JSON at byte {exc.pos}") from None
        crops = [GlyphCrop(np.array([[int(ch) for ch in row] for row in c["bitmap"]], dtype=np.uint8),
                           tuple(c["bbox"]), c["font_size_class"], c["char_id"]) for c in meta["crops"]]
        out.append(PosterSample(
            poster=_read_pnm(d / entry["poster"]),
            style_image=_read_pnm(d / entry["style_image"]),
            subject_image=_read_pnm(d / entry["subject_image"]),
            subject_mask=(_read_pnm(d / entry["subject_mask"]) // 255).astype(np.uint8),
            glyph_image=(_read_pnm(d / entry["glyph_image"]) // 255).astype(np.uint8),
            crops=crops, prompt=meta["prompt"], seed=meta["seed"],
            style_prompt=meta["style_prompt"], style_mode=meta["style_mode"], text=meta["text"],
            text_color=tuple(meta["text_color"]), palette=tuple(tuple(c) for c in meta["palette"]),
        ))
    return out


def generate_dataset(count: int, seed: int, spec: GenerationSpec = GenerationSpec()) -> list[PosterSample]:
    """``count`` samples with seeds ``seed, seed+1, ...``."""
    return [generate_sample(seed + i, spec) for i in range(count)]


def dataset_files(directory) -> list[str]:
    return sorted(os.listdir(directory))
