"""Deterministic glyph-grid microworld: images, questions, exact answers.

An image is a small grid of cells; each cell is blank or holds one glyph with
an intensity.  A fixed renderer turns the grid into a float raster.  Questions
are templated reading/counting tasks over the grid, and `ground_truth` gives
the exact answer — it exists for supervised pretraining and evaluation only.
Preference-pair synthesis consumes (image, question) pairs and never sees it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

GLYPH_NAMES = list("ABCDEFGHIJKL")

# 4x4 bitmaps with pairwise-distinct supports, so cell grids map injectively
# to rasters for any positive intensity.
_GLYPH_ROWS = {
    "A": ("0110", "1001", "1111", "1001"),
    "B": ("1110", "1001", "1110", "1111"),
    "C": ("0111", "1000", "1000", "0111"),
    "D": ("1110", "1001", "1001", "1110"),
    "E": ("1111", "1000", "1110", "1111"),
    "F": ("1111", "1000", "1110", "1000"),
    "G": ("0111", "1000", "1011", "0111"),
    "H": ("1001", "1001", "1111", "1001"),
    "I": ("1110", "0100", "0100", "1110"),
    "J": ("0011", "0001", "1001", "0110"),
    "K": ("1001", "1010", "1100", "1010"),
    "L": ("1000", "1000", "1000", "1111"),
}

GLYPH_PATTERNS = {
    name: np.array([[int(c) for c in row] for row in rows], dtype=np.float64)
    for name, rows in _GLYPH_ROWS.items()
}

TEMPLATES = ("read_row", "read_col", "count_glyph", "glyph_at", "exists_glyph")

DEFAULT_TEMPLATE_WEIGHTS = {
    "glyph_at": 0.30,
    "exists_glyph": 0.25,
    "count_glyph": 0.20,
    "read_row": 0.15,
    "read_col": 0.10,
}


@dataclass
class WorldConfig:
    width: int = 8
    height: int = 8
    n_glyphs: int = 12
    density: float = 0.14
    cell_px: int = 4
    intensity_min: float = 0.55
    intensity_max: float = 1.0
    questions_per_episode: int = 3
    template_weights: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_TEMPLATE_WEIGHTS)
    )
    # Probability that a question's arguments target something present
    # (an occupied cell, a glyph that occurs, a non-empty row/column);
    # keeps the answer distribution from collapsing onto "blank"/"no".
    focus_bias: float = 0.6

    def glyph_names(self) -> list[str]:
        return GLYPH_NAMES[: self.n_glyphs]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_glyphs": self.n_glyphs,
            "density": self.density,
            "cell_px": self.cell_px,
            "intensity_min": self.intensity_min,
            "intensity_max": self.intensity_max,
            "questions_per_episode": self.questions_per_episode,
            "template_weights": dict(self.template_weights),
            "focus_bias": self.focus_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


def _scaled_pattern(name: str, s: int) -> np.ndarray:
    pat = GLYPH_PATTERNS[name]
    if s == 4:
        return pat
    idx = (np.arange(s) * 4) // s
    return pat[np.ix_(idx, idx)]


def render(cells: np.ndarray, intensity: np.ndarray, cell_px: int) -> np.ndarray:
    """Fixed renderer: each occupied cell becomes its glyph bitmap scaled by
    the cell intensity; blank cells render as zeros."""
    h, w = cells.shape
    s = cell_px
    pixels = np.zeros((h * s, w * s), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            g = cells[r, c]
            if g > 0:
                pat = _scaled_pattern(GLYPH_NAMES[g - 1], s)
                pixels[r * s : (r + 1) * s, c * s : (c + 1) * s] = pat * intensity[r, c]
    return pixels


@dataclass
class ToyImage:
    """Glyph grid plus its rendered raster.

    `cells`/`intensity` are None for derived rasters (augmented views), which
    have no grid semantics and therefore no ground truth.  `norm_range` is set
    by the diffusion augmentation: the raster is unclamped and (min, max) is
    recorded so consumers can renormalize to [0, 1].
    """

    width: int
    height: int
    cells: np.ndarray | None
    intensity: np.ndarray | None
    pixels: np.ndarray
    norm_range: tuple[float, float] | None = None

    @classmethod
    def from_cells(cls, cells: np.ndarray, intensity: np.ndarray, cell_px: int) -> "ToyImage":
        h, w = cells.shape
        return cls(
            width=w,
            height=h,
            cells=cells,
            intensity=intensity,
            pixels=render(cells, intensity, cell_px),
        )

    def with_pixels(self, pixels: np.ndarray, norm_range=None) -> "ToyImage":
        """Derived raster: same canvas, no grid semantics."""
        return ToyImage(
            width=self.width,
            height=self.height,
            cells=None,
            intensity=None,
            pixels=pixels,
            norm_range=norm_range,
        )

    def content_hash(self) -> str:
        h = hashlib.sha1()
        h.update(np.int64(self.width).tobytes())
        h.update(np.int64(self.height).tobytes())
        if self.cells is not None:
            h.update(self.cells.astype(np.int64).tobytes())
            h.update(self.intensity.astype(np.float64).tobytes())
        else:
            h.update(self.pixels.astype(np.float64).tobytes())
        return h.hexdigest()[:16]

    def ascii_grid(self) -> str:
        if self.cells is None:
            return "<derived raster>"
        rows = []
        for r in range(self.height):
            rows.append(
                " ".join(
                    GLYPH_NAMES[g - 1] if g > 0 else "." for g in self.cells[r]
                )
            )
        return "\n".join(rows)


@dataclass(frozen=True)
class Question:
    template_id: str
    args: tuple
    text_tokens: tuple[str, ...]

    def text(self) -> str:
        return " ".join(self.text_tokens)


@dataclass
class Episode:
    image: ToyImage
    questions: list[Question]
    truth: list[list[str]] | None  # token sequences; None in unlabeled exports

    def __post_init__(self):
        if self.truth is not None and len(self.questions) != len(self.truth):
            raise ValueError("episode: |questions| != |truth|")


def number_tokens(n: int) -> list[str]:
    return list(str(int(n)))


def make_question(template_id: str, args: tuple) -> Question:
    if template_id == "read_row":
        (r,) = args
        toks = ["read", "row", *number_tokens(r)]
    elif template_id == "read_col":
        (c,) = args
        toks = ["read", "col", *number_tokens(c)]
    elif template_id == "count_glyph":
        (g,) = args
        toks = ["count", g]
    elif template_id == "glyph_at":
        r, c = args
        toks = ["glyph", "at", *number_tokens(r), *number_tokens(c)]
    elif template_id == "exists_glyph":
        (g,) = args
        toks = ["exists", g]
    else:
        raise ValueError(f"unknown question template {template_id!r}")
    return Question(template_id=template_id, args=tuple(args), text_tokens=tuple(toks))


def ground_truth(image: ToyImage, question: Question) -> list[str]:
    """Exact answer tokens under grid semantics.  Pure; evaluation-only."""
    if image.cells is None:
        raise ValueError("ground_truth: derived raster has no grid semantics")
    cells = image.cells
    h, w = cells.shape
    t = question.template_id
    if t == "read_row":
        (r,) = question.args
        if not 0 <= r < h:
            raise IndexError(f"read_row: row {r} outside grid of height {h}")
        names = [GLYPH_NAMES[g - 1] for g in cells[r] if g > 0]
        return names if names else ["blank"]
    if t == "read_col":
        (c,) = question.args
        if not 0 <= c < w:
            raise IndexError(f"read_col: col {c} outside grid of width {w}")
        names = [GLYPH_NAMES[g - 1] for g in cells[:, c] if g > 0]
        return names if names else ["blank"]
    if t == "count_glyph":
        (g,) = question.args
        gid = GLYPH_NAMES.index(g) + 1
        return number_tokens(int((cells == gid).sum()))
    if t == "glyph_at":
        r, c = question.args
        if not (0 <= r < h and 0 <= c < w):
            raise IndexError(f"glyph_at: ({r},{c}) outside {h}x{w} grid")
        g = cells[r, c]
        return [GLYPH_NAMES[g - 1]] if g > 0 else ["blank"]
    if t == "exists_glyph":
        (g,) = question.args
        gid = GLYPH_NAMES.index(g) + 1
        return ["yes"] if (cells == gid).any() else ["no"]
    raise ValueError(f"unknown question template {t!r}")


def _sample_question(rng: np.random.Generator, cells: np.ndarray, config: WorldConfig) -> Question:
    names = config.glyph_names()
    weights = np.array([config.template_weights.get(t, 0.0) for t in TEMPLATES])
    weights = weights / weights.sum()
    template = TEMPLATES[rng.choice(len(TEMPLATES), p=weights)]
    focused = rng.random() < config.focus_bias
    occupied = np.argwhere(cells > 0)
    present = sorted({GLYPH_NAMES[g - 1] for g in cells[cells > 0]})

    if template == "glyph_at":
        if focused and len(occupied):
            r, c = occupied[rng.integers(len(occupied))]
            return make_question(template, (int(r), int(c)))
        return make_question(
            template,
            (int(rng.integers(config.height)), int(rng.integers(config.width))),
        )
    if template == "exists_glyph":
        if focused and present:
            return make_question(template, (present[rng.integers(len(present))],))
        return make_question(template, (names[rng.integers(len(names))],))
    if template == "count_glyph":
        if focused and present:
            return make_question(template, (present[rng.integers(len(present))],))
        return make_question(template, (names[rng.integers(len(names))],))
    if template == "read_row":
        nonempty = [r for r in range(config.height) if (cells[r] > 0).any()]
        if focused and nonempty:
            return make_question(template, (nonempty[rng.integers(len(nonempty))],))
        return make_question(template, (int(rng.integers(config.height)),))
    # read_col
    nonempty = [c for c in range(config.width) if (cells[:, c] > 0).any()]
    if focused and nonempty:
        return make_question(template, (nonempty[rng.integers(len(nonempty))],))
    return make_question(template, (int(rng.integers(config.width)),))


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def generate_episode(seed: int, index: int, config: WorldConfig) -> Episode:
    rng = _episode_rng(seed, index)
    h, w = config.height, config.width
    mask = rng.random((h, w)) < config.density
    cells = np.where(
        mask, rng.integers(1, config.n_glyphs + 1, size=(h, w)), 0
    ).astype(np.int64)
    intensity = np.where(
        mask, rng.uniform(config.intensity_min, config.intensity_max, size=(h, w)), 0.0
    )
    image = ToyImage.from_cells(cells, intensity, config.cell_px)

    questions: list[Question] = []
    seen = set()
    while len(questions) < config.questions_per_episode:
        q = _sample_question(rng, cells, config)
        key = (q.template_id, q.args)
        if key in seen and len(seen) < 64:
            continue
        seen.add(key)
        questions.append(q)
    truth = [ground_truth(image, q) for q in questions]
    return Episode(image=image, questions=questions, truth=truth)


def generate_corpus(seed: int, n_episodes: int, config: WorldConfig) -> list[Episode]:
    """Deterministic corpus; episodes are independent given (seed, index)."""
    if n_episodes < 1:
        raise ValueError("generate_corpus: n_episodes must be >= 1")
    if config.n_glyphs < 1:
        raise ValueError("generate_corpus: glyph alphabet is empty")
    if config.n_glyphs > len(GLYPH_NAMES):
        raise ValueError(f"generate_corpus: at most {len(GLYPH_NAMES)} glyphs supported")
    if config.questions_per_episode < 2:
        raise ValueError("generate_corpus: episodes need at least 2 questions")
    return [generate_episode(seed, i, config) for i in range(n_episodes)]


def sample_pairs(
    corpus: list[Episode], k_per_episode: int, seed: int
) -> list[tuple[ToyImage, Question]]:
    """Pick k questions per episode without replacement; yields label-free
    (image, question) instances in deterministic order."""
    if not corpus:
        return []
    min_q = min(len(ep.questions) for ep in corpus)
    if k_per_episode > min_q:
        raise ValueError(
            f"sample_pairs: k={k_per_episode} exceeds minimum questions per episode ({min_q})"
        )
    pairs: list[tuple[ToyImage, Question]] = []
    for i, ep in enumerate(corpus):
        rng = _episode_rng(seed, i)
        chosen = rng.choice(len(ep.questions), size=k_per_episode, replace=False)
        for qi in chosen:
            pairs.append((ep.image, ep.questions[int(qi)]))
    return pairs


# ---------------------------------------------------------------------------
# Serialization.  One episode per JSONL line; `truth` is dropped from the
# unlabeled (training-side) export.
# ---------------------------------------------------------------------------


def episode_to_dict(ep: Episode, include_truth: bool = True) -> dict:
    img = ep.image
    d = {
        "image": {
            "w": img.width,
            "h": img.height,
            "cells": [
                [int(img.cells[r, c]), float(img.intensity[r, c])]
                for r in range(img.height)
                for c in range(img.width)
            ],
        },
        "questions": [
            {"template": q.template_id, "args": list(q.args), "tokens": list(q.text_tokens)}
            for q in ep.questions
        ],
    }
    if include_truth and ep.truth is not None:
        d["truth"] = [list(t) for t in ep.truth]
    return d


def episode_from_dict(d: dict, cell_px: int) -> Episode:
    w = d["image"]["w"]
    h = d["image"]["h"]
    flat = d["image"]["cells"]
    cells = np.array([int(x[0]) for x in flat], dtype=np.int64).reshape(h, w)
    intensity = np.array([float(x[1]) for x in flat], dtype=np.float64).reshape(h, w)
    image = ToyImage.from_cells(cells, intensity, cell_px)
    questions = [
        Question(q["template"], tuple(q["args"]), tuple(q["tokens"]))
        for q in d["questions"]
    ]
    truth = [list(t) for t in d["truth"]] if "truth" in d else None
    return Episode(image=image, questions=questions, truth=truth)


def save_corpus(path: str | Path, corpus: list[Episode], include_truth: bool = True) -> None:
    with open(path, "w") as f:
        for ep in corpus:
            f.write(json.dumps(episode_to_dict(ep, include_truth), sort_keys=True))
            f.write("\n")


def load_corpus(path: str | Path, cell_px: int) -> list[Episode]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(episode_from_dict(json.loads(line), cell_px))
    return out
