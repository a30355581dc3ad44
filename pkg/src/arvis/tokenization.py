"""Toy text tokenizer and glyph-codebook image tokenizer.

Text side: a fixed word-to-id table over the scene-caption lexicon, with a
reserved UNK id so arbitrary prompts never crash. Image side: each codebook
index paints a fixed patch, so grid <-> pixels is an exact bijection (unlike a
learned tokenizer) and grid <-> flat token list is raster-scan order.

Id layout inside the unified vocabulary:
    [0, text_vocab)                         words, UNK last
    [text_vocab, text_vocab + image)        image codes
    then BOS, BOI, EOI, PAD, NULLPROMPT     five specials
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, VocabularyError

SHAPES = ("square", "circle", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
NUMBER_WORDS = ("one", "two", "three", "four")

LEXICON = (
    "a", "and", "of", "above", "below", "left", "right",
    *NUMBER_WORDS,
    *SHAPES,
    *tuple(s + "s" for s in SHAPES),
    *COLORS,
)

UNK_WORD = "<unk>"

N_STYLES = 2  # 0: solid, 1: outline
DEFAULT_IMAGE_CODES = 64
BACKGROUND_CODE = 0


@dataclass(frozen=True)
class VocabLayout:
    """Partition of the unified token-id space."""

    text_vocab_size: int = len(LEXICON) + 1
    image_codebook_size: int = DEFAULT_IMAGE_CODES

    def __post_init__(self):
        if self.text_vocab_size < 2 or self.image_codebook_size < 2:
            raise VocabularyError("vocabulary ranges too small")

    @property
    def unk(self) -> int:
        return self.text_vocab_size - 1

    @property
    def image_base(self) -> int:
        return self.text_vocab_size

    @property
    def bos(self) -> int:
        return self.text_vocab_size + self.image_codebook_size

    @property
    def boi(self) -> int:
        return self.bos + 1

    @property
    def eoi(self) -> int:
        return self.bos + 2

    @property
    def pad(self) -> int:
        return self.bos + 3

    @property
    def nullprompt(self) -> int:
        return self.bos + 4

    @property
    def total_vocab(self) -> int:
        return self.text_vocab_size + self.image_codebook_size + 5

    def is_text_id(self, tok: int) -> bool:
        return 0 <= tok < self.text_vocab_size

    def is_image_id(self, tok: int) -> bool:
        return self.image_base <= tok < self.image_base + self.image_codebook_size

    def id_of_code(self, code: int) -> int:
        if not 0 <= code < self.image_codebook_size:
            raise VocabularyError(f"image code {code} out of range")
        return self.image_base + code

    def code_of_id(self, tok: int) -> int:
        if not self.is_image_id(tok):
            raise VocabularyError(f"token {tok} is not an image id")
        return tok - self.image_base


_WORD_TO_ID = {w: i for i, w in enumerate(LEXICON)}


def encode_text(prompt: str, layout: VocabLayout | None = None) -> list[int]:
    """Lowercase, whitespace-split, fixed-table lookup; unknown words -> UNK."""
    layout = layout or VocabLayout()
    out = []
    for word in prompt.lower().split():
        wid = _WORD_TO_ID.get(word, layout.unk)
        out.append(wid if wid < layout.unk else layout.unk)
    return out


def decode_text(ids: list[int], layout: VocabLayout | None = None) -> str:
    layout = layout or VocabLayout()
    words = []
    for tok in ids:
        if not layout.is_text_id(tok):
            raise VocabularyError(f"token {tok} is not a text id")
        words.append(UNK_WORD if tok == layout.unk else LEXICON[tok])
    return " ".join(words)


# ---------------------------------------------------------------------------
# image token grids
# ---------------------------------------------------------------------------

@dataclass
class ImageTokenGrid:
    """h x w grid of image-code indices (not unified ids)."""

    h: int
    w: int
    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        if self.codes.shape != (self.h, self.w):
            raise DimensionError(f"grid codes shape {self.codes.shape} != ({self.h}, {self.w})")


def flatten_raster(grid: ImageTokenGrid) -> np.ndarray:
    """Row-major flattening: top-to-bottom, left-to-right."""
    return grid.codes.reshape(-1).copy()


def unflatten_raster(flat: np.ndarray, h: int, w: int) -> ImageTokenGrid:
    flat = np.asarray(flat, dtype=np.int32)
    if flat.size != h * w:
        raise DimensionError(f"cannot unflatten {flat.size} codes into {h}x{w}")
    return ImageTokenGrid(h, w, flat.reshape(h, w))


@dataclass
class TokenSequence:
    """[BOS, t_1..t_N, BOI, z_1..z_{h*w}, EOI] with segment bookkeeping."""

    ids: np.ndarray
    prompt_len: int
    image_len: int
    h: int
    w: int

    @property
    def boi_index(self) -> int:
        return 1 + self.prompt_len

    @property
    def image_start(self) -> int:
        # index of z_1
        return self.boi_index + 1

    @property
    def image_end(self) -> int:
        # one past z_{h*w}
        return self.image_start + self.image_len

    def __len__(self) -> int:
        return int(self.ids.size)


def build_sequence(prompt_ids: list[int], grid: ImageTokenGrid,
                   layout: VocabLayout | None = None) -> TokenSequence:
    """Concatenate text and image tokens with the framing specials."""
    layout = layout or VocabLayout()
    for tok in prompt_ids:
        if not (layout.is_text_id(tok) or tok == layout.nullprompt):
            raise VocabularyError(f"prompt token {tok} outside text range")
    flat = flatten_raster(grid)
    if np.any(flat < 0) or np.any(flat >= layout.image_codebook_size):
        raise VocabularyError("grid contains out-of-range image codes")
    ids = np.concatenate([
        np.array([layout.bos], dtype=np.int32),
        np.asarray(prompt_ids, dtype=np.int32),
        np.array([layout.boi], dtype=np.int32),
        flat + layout.image_base,
        np.array([layout.eoi], dtype=np.int32),
    ])
    return TokenSequence(ids, len(prompt_ids), grid.h * grid.w, grid.h, grid.w)


def grid_from_sequence(seq: TokenSequence, layout: VocabLayout | None = None) -> ImageTokenGrid:
    layout = layout or VocabLayout()
    flat = seq.ids[seq.image_start:seq.image_end] - layout.image_base
    return unflatten_raster(flat, seq.h, seq.w)


# ---------------------------------------------------------------------------
# glyph palette: code -> painted patch
# ---------------------------------------------------------------------------

BACKGROUND_RGB = (244, 244, 240)

_COLOR_RGB = {
    "red": (214, 48, 44),
    "blue": (36, 110, 210),
    "green": (36, 160, 80),
    "yellow": (228, 196, 32),
}


def glyph_code(shape: str, color: str, style: int = 0) -> int:
    """Codebook index for a shape/color/style cell glyph (codes 1..32)."""
    si = SHAPES.index(shape)
    ci = COLORS.index(color)
    if not 0 <= style < N_STYLES:
        raise VocabularyError(f"style {style} out of range")
    return 1 + (si * len(COLORS) + ci) * N_STYLES + style


def glyph_meta(code: int):
    """Inverse of glyph_code; None for background and reserved codes."""
    n_glyphs = len(SHAPES) * len(COLORS) * N_STYLES
    if not 1 <= code <= n_glyphs:
        return None
    k = code - 1
    style = k % N_STYLES
    ci = (k // N_STYLES) % len(COLORS)
    si = k // (N_STYLES * len(COLORS))
    return SHAPES[si], COLORS[ci], style


def _shape_mask(shape: str, p: int) -> np.ndarray:
    """Boolean coverage mask for one patch; full coverage below 4 px."""
    if p < 4:
        return np.ones((p, p), dtype=bool)
    y, x = np.mgrid[0:p, 0:p]
    cy = cx = (p - 1) / 2.0
    if shape == "square":
        return np.ones((p, p), dtype=bool)
    if shape == "circle":
        return (y - cy) ** 2 + (x - cx) ** 2 <= (p / 2.0) ** 2
    if shape == "triangle":
        # apex at top center, base at bottom
        return np.abs(x - cx) * 2 <= y + 1
    if shape == "star":
        diamond = np.abs(x - cx) + np.abs(y - cy) <= p / 2.0
        cross = (np.abs(y - cy) <= p / 8.0) | (np.abs(x - cx) <= p / 8.0)
        return diamond | cross
    raise VocabularyError(f"unknown shape {shape}")


def _code_fill_rgb(code: int, layout: VocabLayout) -> tuple[int, int, int]:
    """Distinct fill color per code so patches are pairwise unique at any size."""
    meta = glyph_meta(code)
    if meta is not None:
        shape, color, style = meta
        base = _COLOR_RGB[color]
        jitter = SHAPES.index(shape) * 2 + style  # 0..7, keeps the hue readable
        return (base[0] + jitter, base[1] + jitter, base[2] + jitter)
    # reserved codes: a gray ramp clear of all glyph fills and the background
    k = code - (len(SHAPES) * len(COLORS) * N_STYLES) - 1
    v = 16 + (k * 5) % 200
    return (v, v, 255 - v)


def build_palette(patch_px: int, layout: VocabLayout | None = None) -> np.ndarray:
    """(codebook, patch_px, patch_px, 3) uint8 patch table."""
    layout = layout or VocabLayout()
    pal = np.empty((layout.image_codebook_size, patch_px, patch_px, 3), dtype=np.uint8)
    bg = np.array(BACKGROUND_RGB, dtype=np.uint8)
    pal[BACKGROUND_CODE] = bg
    for code in range(1, layout.image_codebook_size):
        fill = np.array(_code_fill_rgb(code, layout), dtype=np.uint8)
        meta = glyph_meta(code)
        patch = np.empty((patch_px, patch_px, 3), dtype=np.uint8)
        patch[:] = bg
        if meta is None:
            mask = np.ones((patch_px, patch_px), dtype=bool)
        else:
            shape, _, style = meta
            mask = _shape_mask(shape, patch_px)
            if style == 1 and patch_px >= 4:
                # outline: keep a border ring of the mask
                inner = np.zeros_like(mask)
                inner[1:-1, 1:-1] = mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1] \
                    & mask[1:-1, :-2] & mask[1:-1, 2:]
                mask = mask & ~inner
        patch[mask] = fill
        pal[code] = patch
    return pal


def detokenize_to_image(grid: ImageTokenGrid, patch_px: int,
                        layout: VocabLayout | None = None) -> np.ndarray:
    """Paint the grid into an (h*patch_px, w*patch_px, 3) uint8 raster."""
    if patch_px < 1:
        raise DimensionError("patch_px must be >= 1")
    layout = layout or VocabLayout()
    pal = build_palette(patch_px, layout)
    patches = pal[grid.codes]                      # (h, w, p, p, 3)
    img = patches.transpose(0, 2, 1, 3, 4).reshape(grid.h * patch_px, grid.w * patch_px, 3)
    return np.ascontiguousarray(img)


def image_to_grid(image: np.ndarray, patch_px: int,
                  layout: VocabLayout | None = None) -> ImageTokenGrid:
    """Inverse palette lookup; exact match required."""
    layout = layout or VocabLayout()
    h_px, w_px, _ = image.shape
    if h_px % patch_px or w_px % patch_px:
        raise DimensionError("image size is not a multiple of patch_px")
    pal = build_palette(patch_px, layout)
    table = {pal[c].tobytes(): c for c in range(layout.image_codebook_size)}
    h, w = h_px // patch_px, w_px // patch_px
    codes = np.zeros((h, w), dtype=np.int32)
    for i in range(h):
        for j in range(w):
            patch = image[i * patch_px:(i + 1) * patch_px, j * patch_px:(j + 1) * patch_px]
            key = np.ascontiguousarray(patch).tobytes()
            if key not in table:
                raise VocabularyError(f"patch at ({i}, {j}) matches no codebook entry")
            codes[i, j] = table[key]
    return ImageTokenGrid(h, w, codes)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Binary PPM (P6, maxval 255)."""
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise DimensionError("write_ppm expects (h, w, 3) uint8")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise DimensionError("not a P6 PPM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise DimensionError("unsupported maxval")
        data = f.read(h * w * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def save_grid_text(grid: ImageTokenGrid, path: str | Path) -> None:
    """Line-oriented text: first line "h w", then h rows of w integers."""
    lines = [f"{grid.h} {grid.w}"]
    for row in grid.codes:
        lines.append(" ".join(str(int(c)) for c in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid_text(path: str | Path) -> ImageTokenGrid:
    lines = Path(path).read_text().strip().splitlines()
    h, w = (int(x) for x in lines[0].split())
    if len(lines) != h + 1:
        raise DimensionError(f"expected {h} rows, found {len(lines) - 1}")
    codes = np.array([[int(x) for x in line.split()] for line in lines[1:]], dtype=np.int32)
    if codes.shape != (h, w):
        raise DimensionError("row width disagrees with header")
    return ImageTokenGrid(h, w, codes)
