"""Procedural image/video/text datasets.

Every caption is a deterministic function of the clean image; the small
pixel noise only makes the reading task non-trivial for the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.5, 0.0, 0.6),
    "orange": (1.0, 0.5, 0.0),
}
COLORS = tuple(PALETTE)

# multi-word names exercise the whitespace-insensitive match
CLASS_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "dark red": (0.45, 0.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "light blue": (0.55, 0.75, 1.0),
    "green": (0.0, 0.8, 0.0),
    "dark green": (0.0, 0.35, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "hot pink": (1.0, 0.3, 0.7),
}
CLASS_LABELS = tuple(CLASS_COLORS)

GLYPH_ALPHABET = "abcdefghij"
_GLYPH_SEED = 20220527

MODES = ("caption", "vqa", "video", "classify", "scene-text")


@dataclass
class SyntheticSample:
    image: np.ndarray | None
    caption: str
    frames: np.ndarray | None = None
    question: str | None = None
    answer: str | None = None
    label: str | None = None

    @property
    def visual(self) -> np.ndarray:
        return self.frames if self.frames is not None else self.image


def _noisy(img: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    if noise:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def grid_image(colors: list[list[str]], cell: int, palette=PALETTE) -> np.ndarray:
    """Paint a grid of named colors; ``None`` cells stay black."""
    k = len(colors)
    img = np.zeros((k * cell, k * cell, 3))
    for r, row in enumerate(colors):
        for c, name in enumerate(row):
            if name is not None:
                img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = palette[name]
    return img


def read_grid(colors: list[list[str]]) -> str:
    return " ".join(name for row in colors for name in row)


def glyph_bank(cell: int, alphabet: str = GLYPH_ALPHABET) -> dict[str, np.ndarray]:
    """Fixed random binary patterns, one per character, shared by every dataset."""
    rng = np.random.default_rng(_GLYPH_SEED)
    bank = {}
    for ch in alphabet:
        while True:
            g = (rng.random((cell, cell)) < 0.5).astype(float)
            if 0 < g.sum() < cell * cell:
                break
        bank[ch] = g
    return bank


def synth_dataset(mode: str, n: int, seed: int = 0, *, grid: int = 3, cell: int = 4,
                  noise: float = 0.05, n_steps: int = 6, frames_per_step: int = 2,
                  video_grid: int = 2, max_words: int = 2) -> list[SyntheticSample]:
    """Generate ``n`` samples for one task.

    caption     k x k palette grid, caption reads cells left-right, top-bottom
    vqa         same images; question "cell r c", answer is that cell's color
    video       ``n_steps * frames_per_step`` frames; each step lights one
                random cell of a small grid, caption lists the step colors
    classify    solid color from :data:`CLASS_LABELS`, caption is the label
    scene-text  glyph string drawn cell by cell (blank cell = space), caption
                is the string; use a character-level vocabulary
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    return [_one(mode, rng, grid, cell, noise, n_steps, frames_per_step, video_grid, max_words) for _ in range(n)]


def _one(mode, rng, grid, cell, noise, n_steps, frames_per_step, video_grid, max_words) -> SyntheticSample:
    if mode in ("caption", "vqa"):
        colors = [[COLORS[i] for i in rng.integers(len(COLORS), size=grid)] for _ in range(grid)]
        image = _noisy(grid_image(colors, cell), rng, noise)
        caption = read_grid(colors)
        if mode == "caption":
            return SyntheticSample(image, caption)
        r, c = (int(v) for v in rng.integers(grid, size=2))
        return SyntheticSample(image, caption, question=f"cell {r} {c}", answer=colors[r][c])
    if mode == "video":
        step_colors = [COLORS[i] for i in rng.integers(len(COLORS), size=n_steps)]
        frames = []
        for name in step_colors:
            layout = [[None] * video_grid for _ in range(video_grid)]
            r, c = rng.integers(video_grid, size=2)
            layout[r][c] = name
            clean = grid_image(layout, cell)
            frames.extend(_noisy(clean, rng, noise) for _ in range(frames_per_step))
        return SyntheticSample(None, " ".join(step_colors), frames=np.stack(frames))
    if mode == "classify":
        label = CLASS_LABELS[rng.integers(len(CLASS_LABELS))]
        image = np.broadcast_to(np.array(CLASS_COLORS[label]), (grid * cell, grid * cell, 3))
        return SyntheticSample(_noisy(image, rng, noise), label, label=label)
    # scene-text
    text = _random_text(rng, grid * grid, max_words)
    bank = glyph_bank(cell)
    image = np.zeros((grid * cell, grid * cell, 3))
    for i, ch in enumerate(text):
        if ch == " ":
            continue
        r, c = divmod(i, grid)
        image[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = bank[ch][..., None]
    return SyntheticSample(_noisy(image, rng, noise), text)


def _random_text(rng, max_len: int, max_words: int) -> str:
    while True:
        n_words = int(rng.integers(1, max_words + 1))
        words = ["".join(rng.choice(list(GLYPH_ALPHABET), size=int(rng.integers(2, 5)))) for _ in range(n_words)]
        text = " ".join(words)
        if len(text) <= max_len:
            return text
