"""Synthetic editing world: source image, edit mask and instruction.

Scenes are a handful of flat gray shapes on a 16x16 canvas, placed in five
fixed cells. Each triple names one cell as the edit target; the mask covers
that cell and the instruction says what to do there. Nothing is stored: a
triple is a pure function of ``(seed, difficulty)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EDIT_KINDS = ("insert", "remove", "replace", "transform")
SHAPE_KINDS = ("square", "circle", "triangle")
POSITIONS = ("left", "right", "top", "bottom", "center")
COLOR_NAMES = ("dark", "gray", "bright")
COLOR_VALUES = (0.35, 0.65, 0.95)
BACKGROUNDS = (0.0, 0.1)
DIFFICULTIES = ("single", "multi-object")
INSERT_COLOR = 2
CELL = 4

PAD, START = "<pad>", "<start>"
_WORDS = (
    "add", "remove", "replace", "turn", "with", "the", "a", "to", "into",
    "shape", "object",
) + SHAPE_KINDS + POSITIONS + COLOR_NAMES


class PlacementError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


class Vocabulary:
    """Closed token set; id 0 is padding and id 1 the start marker."""

    def __init__(self, words=_WORDS):
        self.tokens = (PAD, START) + tuple(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = 0
        self.start_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str], max_tokens: int) -> "Instruction":
        if len(words) + 1 > max_tokens:
            raise ValueError(f"instruction {' '.join(words)!r} exceeds {max_tokens} tokens")
        ids = np.full(max_tokens, self.pad_id, dtype=np.int64)
        ids[0] = self.start_id
        for i, w in enumerate(words):
            ids[i + 1] = self.ids[w]
        return Instruction(ids, self)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass(frozen=True, eq=False)
class Instruction:
    """Fixed-length token ids; ``valid`` marks non-padding, ``relevant`` the words."""

    ids: np.ndarray
    vocab: Vocabulary = field(repr=False)

    @property
    def valid(self) -> np.ndarray:
        return self.ids != self.vocab.pad_id

    @property
    def relevant(self) -> np.ndarray:
        # the start marker sits in the softmax but is not an instruction word
        return self.valid & (self.ids != self.vocab.start_id)

    @property
    def words(self) -> list[str]:
        return [w for w, r in zip(self.vocab.decode(self.ids), self.relevant) if r]

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Instruction) and np.array_equal(self.ids, other.ids)


@dataclass(frozen=True)
class Shape:
    kind: str
    color: int
    position: str
    size: int = 4

    def footprint(self) -> np.ndarray:
        """Boolean ``size x size`` stencil."""
        s = self.size
        r, c = np.mgrid[0:s, 0:s]
        if self.kind == "square":
            return np.ones((s, s), dtype=bool)
        if self.kind == "circle":
            mid = (s - 1) / 2.0
            return (r - mid) ** 2 + (c - mid) ** 2 <= (s / 2.0) ** 2
        if self.kind == "triangle":
            return c <= r
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class Scene:
    size: int = 16
    background: float = 0.0
    shapes: tuple[Shape, ...] = ()

    def occupied(self) -> set[str]:
        return {s.position for s in self.shapes}

    def at(self, position: str) -> Shape | None:
        for s in self.shapes:
            if s.position == position:
                return s
        return None


def cell_origin(position: str, size: int = 16) -> tuple[int, int]:
    """Top-left pixel of a position cell; cells are 4x4 and never overlap."""
    lo, mid, hi = 1, size // 2 - CELL // 2, size - 1 - CELL
    return {
        "left": (mid, lo), "right": (mid, hi), "top": (lo, mid),
        "bottom": (hi, mid), "center": (mid, mid),
    }[position]


def cell_box(position: str, size: int = 16) -> tuple[slice, slice]:
    r0, c0 = cell_origin(position, size)
    return slice(r0, r0 + CELL), slice(c0, c0 + CELL)


def rasterize(scene: Scene) -> np.ndarray:
    """Render to an ``(H, W)`` float image, no anti-aliasing."""
    img = np.full((scene.size, scene.size), scene.background, dtype=np.float64)
    for shape in scene.shapes:
        r0, c0 = cell_origin(shape.position, scene.size)
        off = (CELL - shape.size) // 2
        if min(r0, c0) + off < 0 or max(r0, c0) + off + shape.size > scene.size:
            raise ValueError(f"{shape} does not fit a {scene.size}x{scene.size} canvas")
        stencil = shape.footprint()
        rows = slice(r0 + off, r0 + off + shape.size)
        cols = slice(c0 + off, c0 + off + shape.size)
        img[rows, cols] = np.where(stencil, COLOR_VALUES[shape.color], img[rows, cols])
    return img


@dataclass(frozen=True, eq=False)
class EditTriple:
    """Training input: source image, binary edit mask and instruction.

    ``edited_scene`` describes the intended result; :func:`golden_render`
    rasterizes it for pretraining and evaluation only.
    """

    seed: int
    source: np.ndarray
    mask: np.ndarray
    instruction: Instruction
    edit_kind: str
    target: str
    scene: Scene
    edited_scene: Scene

    @property
    def triple_id(self) -> str:
        return f"seed{self.seed}"


def golden_render(triple: EditTriple) -> np.ndarray:
    return rasterize(triple.edited_scene)


class EditingWorld:
    """Deterministic triple generator."""

    def __init__(self, size: int = 16, max_tokens: int = 8, vocab: Vocabulary | None = None):
        if size < 3 * CELL + 2:
            raise ValueError(f"canvas {size} too small for five {CELL}x{CELL} cells")
        self.size = size
        self.max_tokens = max_tokens
        self.vocab = vocab or Vocabulary()

    def _shape(self, rng, position: str, kind: str | None = None, color: int | None = None) -> Shape:
        kind = kind or SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        color = int(rng.integers(len(COLOR_VALUES))) if color is None else color
        return Shape(kind, color, position, size=4)

    def generate_triple(self, seed: int, difficulty: str = "single",
                        edit_kind: str | None = None, num_distractors: int | None = None,
                        max_retries: int = 16) -> EditTriple:
        if difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {difficulty!r}")
        rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty)])
        kind = edit_kind or EDIT_KINDS[rng.integers(len(EDIT_KINDS))]
        if kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {kind!r}")
        target = POSITIONS[rng.integers(len(POSITIONS))]
        if num_distractors is None:
            num_distractors = 1 if difficulty == "single" else int(rng.integers(2, 4))
        background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]

        shapes: list[Shape] = []
        if kind != "insert":
            shapes.append(self._shape(rng, target))
        placed = 0
        for _ in range(max_retries):
            if placed == num_distractors:
                break
            pos = POSITIONS[rng.integers(len(POSITIONS))]
            if pos == target or any(s.position == pos for s in shapes):
                continue
            shapes.append(self._shape(rng, pos))
            placed += 1
        if placed < num_distractors:
            raise PlacementError(f"seed {seed}: could not place {num_distractors} distractors")

        scene = Scene(self.size, background, tuple(shapes))
        words, edited = self._edit(rng, scene, kind, target)
        mask = np.zeros((self.size, self.size), dtype=np.float64)
        mask[cell_box(target, self.size)] = 1.0
        return EditTriple(
            seed=int(seed), source=rasterize(scene), mask=mask,
            instruction=self.vocab.encode(words, self.max_tokens),
            edit_kind=kind, target=target, scene=scene, edited_scene=edited,
        )

    def _edit(self, rng, scene: Scene, kind: str, target: str) -> tuple[list[str], Scene]:
        others = tuple(s for s in scene.shapes if s.position != target)
        old = scene.at(target)
        if kind == "insert":
            new = self._shape(rng, target, color=INSERT_COLOR)
            return ["add", new.kind, target], dataclasses.replace(scene, shapes=others + (new,))
        if kind == "remove":
            return ["remove", "the", old.kind, target], dataclasses.replace(scene, shapes=others)
        if kind == "replace":
            choices = [k for k in SHAPE_KINDS if k != old.kind]
            new_kind = choices[rng.integers(len(choices))]
            new = dataclasses.replace(old, kind=new_kind)
            return (["replace", old.kind, target, "with", new_kind],
                    dataclasses.replace(scene, shapes=others + (new,)))
        choices = [c for c in range(len(COLOR_VALUES)) if c != old.color]
        new_color = choices[rng.integers(len(choices))]
        new = dataclasses.replace(old, color=new_color)
        return (["turn", old.kind, target, COLOR_NAMES[new_color]],
                dataclasses.replace(scene, shapes=others + (new,)))


def mask_to_groundtruth_attention(mask: np.ndarray, attn_h: int, attn_w: int) -> np.ndarray:
    """Average-pool a binary mask to ``(attn_h, attn_w)`` and normalize to sum 1."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[:2]
    if h % attn_h or w % attn_w:
        raise ValueError(f"attention grid {attn_h}x{attn_w} does not divide mask {h}x{w}")
    if not np.any(mask > 0):
        raise EmptyMaskError("mask has no editing region")
    pooled = mask.reshape(attn_h, h // attn_h, attn_w, w // attn_w).mean(axis=(1, 3))
    return pooled / pooled.sum()


def mask_centroid_position(mask: np.ndarray) -> str:
    """Position cell nearest to the mask centroid."""
    rows, cols = np.nonzero(mask)
    cr, cc = rows.mean(), cols.mean()
    size = mask.shape[0]

    def dist(pos):
        r0, c0 = cell_origin(pos, size)
        return (r0 + 1.5 - cr) ** 2 + (c0 + 1.5 - cc) ** 2

    return min(POSITIONS, key=dist)


# PGM I/O

def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 graymap, maxval 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not a P5 graymap with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / 255.0


def freeze(triples, directory) -> list[Path]:
    """Write each triple to ``directory/<triple_id>/`` for inspection."""
    out = []
    root = Path(directory)
    for tr in triples:
        d = root / tr.triple_id
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / "source.pgm", tr.source)
        write_pgm(d / "mask.pgm", tr.mask)
        (d / "instruction.txt").write_text(" ".join(tr.instruction.words) + "\n")
        out.append(d)
    return out
