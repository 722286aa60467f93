"""Word- or character-level vocabulary with four reserved ids."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIALS = ("[BOS]", "[EOS]", "[PAD]", "[UNK]")
N_RESERVED = len(SPECIALS)
# stands in for a space in character mode so every token is a visible glyph
SPACE = "▁"


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace to a single space."""
    return " ".join(text.lower().split())


def _split(text: str, char_level: bool) -> list[str]:
    text = normalize(text)
    if not char_level:
        return text.split()
    return [SPACE if c == " " else c for c in text]


class Vocabulary:
    """Immutable token <-> id map.

    Ids 0..3 are BOS, EOS, PAD, UNK; corpus tokens start at 4.
    """

    def __init__(self, tokens: Sequence[str], char_level: bool = False):
        self.itos: list[str] = list(SPECIALS) + list(tokens)
        self.stoi: dict[str, int] = {t: i + N_RESERVED for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.char_level = char_level

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.char_level == other.char_level

    @property
    def tokens(self) -> list[str]:
        return self.itos[N_RESERVED:]

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in _split(text, self.char_level)]

    def unknown(self, text: str) -> list[str]:
        """Tokens of ``text`` that would encode to UNK."""
        return [t for t in _split(text, self.char_level) if t not in self.stoi]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise ValueError(f"token id {i} out of range for vocabulary of size {len(self.itos)}")
            if i in (BOS, EOS, PAD):
                continue
            out.append(self.itos[i])
        if self.char_level:
            return "".join(" " if t == SPACE else t for t in out)
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, char_level: bool = False) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, char_level=char_level)


def build_vocab(corpus: Sequence[str], char_level: bool = False) -> Vocabulary:
    """Every token in ``corpus`` gets an id, most frequent first, ties lexicographic."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for line in corpus:
        counts.update(_split(line, char_level))
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered, char_level=char_level)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.decode(ids)
