"""Synthetic compositional image domain used for training data, reward, and eval.

A Scene is 1-3 object groups (shape, color, count 1-4) placed on a 4x4 lattice
whose cells never touch orthogonally, so rendered glyphs of distinct objects
never merge under 4-connected component analysis. Rendering divides the token
grid into 4x4 lattice cells, each cell into four quadrant item slots; a group
of count c fills its first c slots with the group's glyph code. The verifier
parses a template prompt back into criteria and scores a grid as the satisfied
fraction; compositional_eval scores binary all-criteria success per category.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokenization as tok
from .errors import RenderError, VerifierError

LATTICE = 4
CATEGORIES = ("single", "two_obj", "counting", "colors", "position", "color_attr")
RELATIONS = ("above", "below", "left", "right")

_NUM_FROM_WORD = {w: i + 1 for i, w in enumerate(tok.NUMBER_WORDS)}
_SINGULAR = {s + "s": s for s in tok.SHAPES}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    count: int
    cell: tuple[int, int]  # (row, col) on the placement lattice


@dataclass
class Scene:
    objects: list[SceneObject]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise RenderError("scene must hold 1-3 object groups")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise RenderError("object cells overlap")
        for a in range(len(cells)):
            for b in range(a + 1, len(cells)):
                dr = abs(cells[a][0] - cells[b][0])
                dc = abs(cells[a][1] - cells[b][1])
                if dr + dc == 1:
                    raise RenderError("object cells are orthogonally adjacent")
        shapes = [o.shape for o in self.objects]
        if len(set(shapes)) != len(shapes):
            raise RenderError("duplicate shapes in one scene")
        for o in self.objects:
            if not 1 <= o.count <= 4:
                raise RenderError(f"count {o.count} out of range")
            if not (0 <= o.cell[0] < LATTICE and 0 <= o.cell[1] < LATTICE):
                raise RenderError(f"cell {o.cell} off the lattice")


def _sample_cells(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    """n lattice cells, pairwise non-overlapping and never orthogonal neighbors."""
    while True:
        idx = rng.choice(LATTICE * LATTICE, size=n, replace=False)
        cells = [(int(i) // LATTICE, int(i) % LATTICE) for i in idx]
        ok = all(abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1
                 for i, a in enumerate(cells) for b in cells[i + 1:])
        if ok:
            return cells


def _cells_with_relation(rng: np.random.Generator, relation: str) -> list[tuple[int, int]]:
    while True:
        c1, c2 = _sample_cells(rng, 2)
        if relation == "above" and c1[0] < c2[0]:
            return [c1, c2]
        if relation == "below" and c1[0] > c2[0]:
            return [c1, c2]
        if relation == "left" and c1[1] < c2[1]:
            return [c1, c2]
        if relation == "right" and c1[1] > c2[1]:
            return [c1, c2]


def sample_scene(rng: np.random.Generator, category: str) -> Scene:
    """Uniform scene draw for one prompt category; deterministic per rng state."""
    if category not in CATEGORIES:
        raise VerifierError(f"unknown category {category}")
    pick = lambda seq: seq[int(rng.integers(len(seq)))]
    if category in ("single", "colors"):
        return Scene([SceneObject(pick(tok.SHAPES), pick(tok.COLORS), 1, _sample_cells(rng, 1)[0])])
    if category == "counting":
        return Scene([SceneObject(pick(tok.SHAPES), pick(tok.COLORS),
                                  int(rng.integers(1, 5)), _sample_cells(rng, 1)[0])])
    if category == "position":
        relation = pick(RELATIONS)
        s1, s2 = rng.choice(len(tok.SHAPES), size=2, replace=False)
        cells = _cells_with_relation(rng, relation)
        return Scene([
            SceneObject(tok.SHAPES[int(s1)], pick(tok.COLORS), 1, cells[0]),
            SceneObject(tok.SHAPES[int(s2)], pick(tok.COLORS), 1, cells[1]),
        ])
    # two_obj / color_attr
    s1, s2 = rng.choice(len(tok.SHAPES), size=2, replace=False)
    cells = _sample_cells(rng, 2)
    return Scene([
        SceneObject(tok.SHAPES[int(s1)], pick(tok.COLORS), 1, cells[0]),
        SceneObject(tok.SHAPES[int(s2)], pick(tok.COLORS), 1, cells[1]),
    ])


def sample_dense_scene(rng: np.random.Generator) -> Scene:
    """Generic pretraining scene: 1-3 groups, counts 1-4, any colors.

    Denser than the category scenes so glyph tokens carry a useful share of
    the language-modeling signal.
    """
    n = int(rng.choice([1, 2, 3], p=[0.25, 0.4, 0.35]))
    shapes = rng.choice(len(tok.SHAPES), size=n, replace=False)
    cells = _sample_cells(rng, n)
    return Scene([
        SceneObject(tok.SHAPES[int(s)],
                    tok.COLORS[int(rng.integers(len(tok.COLORS)))],
                    int(rng.integers(1, 5)), cell)
        for s, cell in zip(shapes, cells)
    ])


def caption_dense(scene: Scene, rng: np.random.Generator) -> str:
    """A category-view caption of a generic scene (may under-describe it)."""
    if len(scene.objects) == 1:
        cat = ("single", "colors", "counting")[int(rng.integers(3))]
        view = scene
    else:
        cat = ("two_obj", "position", "color_attr")[int(rng.integers(3))]
        idx = rng.choice(len(scene.objects), size=2, replace=False)
        view = Scene([scene.objects[int(idx[0])], scene.objects[int(idx[1])]])
    return caption(view, cat)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# quadrant slot order within a cell: TL, TR, BL, BR
_SLOTS = ((0, 0), (0, 1), (1, 0), (1, 1))


def render_scene(scene: Scene, h: int, w: int, style: int = 0) -> tok.ImageTokenGrid:
    """Deterministic glyph placement on an h x w code grid (h, w multiples of 8)."""
    if h % (2 * LATTICE) or w % (2 * LATTICE):
        raise RenderError(f"grid {h}x{w} does not tile the {LATTICE}x{LATTICE} lattice")
    cell_h, cell_w = h // LATTICE, w // LATTICE
    item_h, item_w = cell_h // 2, cell_w // 2
    codes = np.full((h, w), tok.BACKGROUND_CODE, dtype=np.int32)
    for obj in scene.objects:
        code = tok.glyph_code(obj.shape, obj.color, style)
        r0, c0 = obj.cell[0] * cell_h, obj.cell[1] * cell_w
        for qr, qc in _SLOTS[: obj.count]:
            rr = r0 + qr * item_h
            cc = c0 + qc * item_w
            codes[rr:rr + item_h, cc:cc + item_w] = code
    return tok.ImageTokenGrid(h, w, codes)


def downsample_grid(grid: tok.ImageTokenGrid, factor: int) -> tok.ImageTokenGrid:
    """Block-downsample codes: uniform block -> its code, else background."""
    h, w = grid.h // factor, grid.w // factor
    blocks = grid.codes.reshape(h, factor, w, factor).transpose(0, 2, 1, 3).reshape(h, w, -1)
    uniform = np.all(blocks == blocks[:, :, :1], axis=2)
    out = np.where(uniform, blocks[:, :, 0], tok.BACKGROUND_CODE)
    return tok.ImageTokenGrid(h, w, out.astype(np.int32))


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

def caption(scene: Scene, category: str) -> str:
    """Fixed-template caption over the tokenizer lexicon."""
    objs = scene.objects
    if category == "single":
        return f"a {objs[0].shape}"
    if category == "colors":
        return f"a {objs[0].color} {objs[0].shape}"
    if category == "counting":
        o = objs[0]
        noun = o.shape if o.count == 1 else o.shape + "s"
        return f"{tok.NUMBER_WORDS[o.count - 1]} {noun}"
    if category == "two_obj":
        return f"a {objs[0].shape} and a {objs[1].shape}"
    if category == "color_attr":
        return (f"a {objs[0].color} {objs[0].shape} and a {objs[1].color} {objs[1].shape}")
    if category == "position":
        a, b = objs[0], objs[1]
        if a.cell[0] < b.cell[0]:
            rel = "above"
        elif a.cell[0] > b.cell[0]:
            rel = "below"
        elif a.cell[1] < b.cell[1]:
            rel = "left of"
        else:
            rel = "right of"
        return f"a {a.shape} {rel} a {b.shape}"
    raise VerifierError(f"unknown category {category}")


# ---------------------------------------------------------------------------
# verifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptSpec:
    category: str
    shapes: tuple[str, ...]
    colors: tuple[str | None, ...]
    count: int | None = None
    relation: str | None = None


def parse_prompt(prompt: str) -> PromptSpec:
    """Parse a template caption back into required criteria."""
    words = prompt.lower().split()
    if not words:
        raise VerifierError("empty prompt")

    def noun(word: str) -> str:
        if word in tok.SHAPES:
            return word
        if word in _SINGULAR:
            return _SINGULAR[word]
        raise VerifierError(f"expected a shape word, got {word!r}")

    # counting: "<num> <shape[s]>"
    if len(words) == 2 and words[0] in _NUM_FROM_WORD:
        return PromptSpec("counting", (noun(words[1]),), (None,), count=_NUM_FROM_WORD[words[0]])
    if words[0] != "a":
        raise VerifierError(f"prompt must start with 'a' or a number word: {prompt!r}")
    # single: "a <shape>"
    if len(words) == 2:
        return PromptSpec("single", (noun(words[1]),), (None,))
    # colors: "a <color> <shape>"
    if len(words) == 3 and words[1] in tok.COLORS:
        return PromptSpec("colors", (noun(words[2]),), (words[1],))
    if "and" in words:
        i = words.index("and")
        left, right = words[:i], words[i + 1:]
        if len(left) == 2 and len(right) == 2:
            return PromptSpec("two_obj", (noun(left[1]), noun(right[1])), (None, None))
        if len(left) == 3 and len(right) == 3 and left[1] in tok.COLORS and right[1] in tok.COLORS:
            return PromptSpec("color_attr", (noun(left[2]), noun(right[2])), (left[1], right[1]))
        raise VerifierError(f"cannot parse conjunction: {prompt!r}")
    # position: "a [color] <shape> above|below a [color] <shape>"
    #           "a [color] <shape> left|right of a [color] <shape>"
    def noun_phrase(ws):
        if len(ws) == 2 and ws[0] == "a":
            return noun(ws[1]), None
        if len(ws) == 3 and ws[0] == "a" and ws[1] in tok.COLORS:
            return noun(ws[2]), ws[1]
        raise VerifierError(f"expected 'a [color] <shape>', got {' '.join(ws)!r}")

    for rel in RELATIONS:
        if rel in words[2:]:
            i = words.index(rel, 2)
            rest = words[i + 1:]
            if rel in ("left", "right"):
                if not rest or rest[0] != "of":
                    raise VerifierError(f"{rel} must be followed by 'of': {prompt!r}")
                rest = rest[1:]
            s1, c1 = noun_phrase(words[:i])
            s2, c2 = noun_phrase(rest)
            return PromptSpec("position", (s1, s2), (c1, c2), relation=rel)
    raise VerifierError(f"cannot parse prompt: {prompt!r}")


@dataclass(frozen=True)
class DetectedObject:
    shape: str
    color: str
    count: int
    cell: tuple[int, int]


def _connected_components(codes: np.ndarray):
    """4-connected components of equal non-background codes. Yields (code, mask)."""
    h, w = codes.shape
    seen = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if seen[i, j] or codes[i, j] == tok.BACKGROUND_CODE:
                continue
            code = codes[i, j]
            stack = [(i, j)]
            seen[i, j] = True
            pixels = []
            while stack:
                r, c = stack.pop()
                pixels.append((r, c))
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and not seen[rr, cc] and codes[rr, cc] == code:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            yield int(code), pixels


def detect_objects(grid: tok.ImageTokenGrid) -> list[DetectedObject]:
    """Glyph components merged per (code, lattice cell); count from covered area."""
    cell_h, cell_w = grid.h / LATTICE, grid.w / LATTICE
    item_area = max(1, (grid.h // (2 * LATTICE)) * (grid.w // (2 * LATTICE)))
    merged: dict[tuple[int, tuple[int, int]], int] = {}
    for code, pixels in _connected_components(grid.codes):
        meta = tok.glyph_meta(code)
        if meta is None:
            continue
        rc = sum(p[0] for p in pixels) / len(pixels)
        cc = sum(p[1] for p in pixels) / len(pixels)
        cell = (min(int(rc / cell_h), LATTICE - 1), min(int(cc / cell_w), LATTICE - 1))
        merged[(code, cell)] = merged.get((code, cell), 0) + len(pixels)
    out = []
    for (code, cell), area in merged.items():
        if area < item_area:
            continue  # too small to be a rendered item; treat as noise
        shape, color, _ = tok.glyph_meta(code)
        count = min(4, max(1, round(area / item_area)))
        out.append(DetectedObject(shape, color, count, cell))
    return out


def _relation_holds(a: DetectedObject, b: DetectedObject, rel: str) -> bool:
    if rel == "above":
        return a.cell[0] < b.cell[0]
    if rel == "below":
        return a.cell[0] > b.cell[0]
    if rel == "left":
        return a.cell[1] < b.cell[1]
    return a.cell[1] > b.cell[1]


def verify(prompt: str, grid: tok.ImageTokenGrid) -> tuple[float, dict[str, bool]]:
    """Score a grid against a prompt: (satisfied-criteria fraction, per-criterion flags)."""
    spec = parse_prompt(prompt)
    detected = detect_objects(grid)

    def best(shape: str, color: str | None):
        cands = [d for d in detected if d.shape == shape and (color is None or d.color == color)]
        return cands[0] if cands else None

    def present(shape: str) -> bool:
        return any(d.shape == shape for d in detected)

    flags: dict[str, bool] = {}
    if spec.category == "single":
        flags["presence"] = present(spec.shapes[0])
    elif spec.category == "colors":
        flags["presence"] = present(spec.shapes[0])
        flags["color"] = best(spec.shapes[0], spec.colors[0]) is not None
    elif spec.category == "counting":
        flags["presence"] = present(spec.shapes[0])
        matches = [d for d in detected if d.shape == spec.shapes[0]]
        flags["count"] = sum(d.count for d in matches) == spec.count if matches else False
    elif spec.category == "two_obj":
        flags["presence_1"] = present(spec.shapes[0])
        flags["presence_2"] = present(spec.shapes[1])
    elif spec.category == "color_attr":
        flags["presence_1"] = present(spec.shapes[0])
        flags["color_1"] = best(spec.shapes[0], spec.colors[0]) is not None
        flags["presence_2"] = present(spec.shapes[1])
        flags["color_2"] = best(spec.shapes[1], spec.colors[1]) is not None
    else:  # position
        a = best(spec.shapes[0], spec.colors[0])
        b = best(spec.shapes[1], spec.colors[1])
        flags["presence"] = a is not None and b is not None
        flags["relation"] = bool(flags["presence"] and _relation_holds(a, b, spec.relation))
    reward = sum(flags.values()) / len(flags)
    return reward, flags


# ---------------------------------------------------------------------------
# scene records
# ---------------------------------------------------------------------------

def scene_to_line(scene: Scene) -> str:
    parts = [f"{o.shape},{o.color},{o.count},{o.cell[0]},{o.cell[1]}" for o in scene.objects]
    return "|".join(parts)


def scene_from_line(line: str) -> Scene:
    objs = []
    for part in line.strip().split("|"):
        shape, color, count, r, c = part.split(",")
        objs.append(SceneObject(shape, color, int(count), (int(r), int(c))))
    return Scene(objs)


# ---------------------------------------------------------------------------
# compositional generation benchmark
# ---------------------------------------------------------------------------

def eval_prompts(category: str, n: int, seed: int) -> list[str]:
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    return [caption(sample_scene(rng, category), category) for _ in range(n)]


def compositional_eval(model, sampler, n_per_category: int, seed: int,
                layout: tok.VocabLayout | None = None, h: int = 16, w: int = 16,
                threads: int = 1) -> dict:
    """Binary all-criteria success rate per category plus the unweighted mean."""
    from . import decoding  # local import; decoding also imports this module

    layout = layout or tok.VocabLayout()
    scores = {}
    for category in CATEGORIES:
        prompts = eval_prompts(category, n_per_category, seed)
        prompt_ids = [tok.encode_text(p, layout) for p in prompts]
        seeds = [seed * 100003 + CATEGORIES.index(category) * 1009 + i
                 for i in range(len(prompts))]
        results = decoding.generate_batch(model, layout, prompt_ids, h, w, sampler,
                                          seeds=seeds, threads=threads)
        hits = 0
        for p, res in zip(prompts, results):
            reward, _ = verify(p, res.grid)
            hits += reward == 1.0
        scores[category] = hits / n_per_category
    scores["overall"] = sum(scores[c] for c in CATEGORIES) / len(CATEGORIES)
    scores["n"] = n_per_category
    return scores


def format_eval_report(scores: dict) -> str:
    lines = [f"category={c} score={scores[c]:.4f} n={scores['n']}" for c in CATEGORIES]
    lines.append(f"overall={scores['overall']:.4f}")
    return "\n".join(lines) + "\n"
