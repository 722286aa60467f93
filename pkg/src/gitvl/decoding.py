"""Autoregressive decoding: greedy, beam search, prefix completion, trie-constrained.

The search routines work on a *scorer*: a callable mapping a batch of
equal-length prefixes (each starting with BOS) to an ``(n, V)`` array of
next-token log-probabilities. :meth:`gitvl.model.GIT.scorer` binds one
image to such a callable; tests plug in table-driven random scorers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import sample_frame_indices
from .tensor import Tensor, no_grad
from .vocab import BOS, EOS, Vocabulary, normalize

Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]
AllowedFn = Callable[[tuple[int, ...]], Iterable[int]]

DEFAULT_MAX_STEPS = 40
DEFAULT_BEAM = 4
DEFAULT_ALPHA = 0.6


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]      # generated ids after the prefix, EOS excluded
    logprob: float               # includes the EOS step when finished
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) + (1 if self.finished else 0)

    def score(self, alpha: float) -> float:
        return self.logprob / length_penalty(self.length, alpha)


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; equals 1 at length 1 for every alpha."""
    return ((5.0 + length) / 6.0) ** alpha


def _mask_disallowed(row: np.ndarray, allowed: Iterable[int]) -> np.ndarray:
    keep = np.full(row.shape, -np.inf)
    idx = np.fromiter(allowed, dtype=np.int64)
    keep[idx] = row[idx]
    return keep


def greedy_search(score: Scorer, prefix: Sequence[int], max_steps: int = DEFAULT_MAX_STEPS,
                  eos: int = EOS, allowed: AllowedFn | None = None) -> list[int]:
    """Pick the arg-max token (lowest id on ties) until EOS or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    prefix = list(prefix)
    out: list[int] = []
    for _ in range(max_steps):
        row = np.asarray(score([prefix + out])[0], dtype=np.float64)
        if allowed is not None:
            row = _mask_disallowed(row, allowed(tuple(out)))
        tok = int(np.argmax(row))
        if tok == eos:
            break
        out.append(tok)
    return out


def beam_search_hypotheses(score: Scorer, prefix: Sequence[int], beam: int = DEFAULT_BEAM,
                           alpha: float = DEFAULT_ALPHA, max_steps: int = DEFAULT_MAX_STEPS,
                           eos: int = EOS, allowed: AllowedFn | None = None) -> list[Hypothesis]:
    """Run beam search and return every collected hypothesis, best first.

    Each step expands all live hypotheses, keeps the ``beam`` best
    candidates by log-probability (ties: lexicographic token order), and
    moves the EOS-terminated ones into the finished pool. The search stops
    once no live hypothesis can still beat the ``beam``-th best finished
    score: a live log-probability can only fall, and the largest penalty
    it could reach is ``length_penalty(max_steps)``.
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    prefix = list(prefix)
    alive = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    best_lp = length_penalty(max_steps, alpha)
    for _ in range(max_steps):
        logp = np.asarray(score([prefix + list(h.tokens) for h in alive]), dtype=np.float64)
        cands = []
        for i, h in enumerate(alive):
            row = logp[i]
            if allowed is not None:
                row = _mask_disallowed(row, allowed(h.tokens))
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((h.logprob + row[tok], h.tokens + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for lp_sum, toks in cands[:beam]:
            if toks[-1] == eos:
                finished.append(Hypothesis(toks[:-1], lp_sum, True))
            else:
                alive.append(Hypothesis(toks, lp_sum))
        if not alive:
            break
        if len(finished) >= beam:
            kth = sorted(h.score(alpha) for h in finished)[-beam]
            if max(h.logprob for h in alive) / best_lp < kth:
                break
    ranked = sorted(finished, key=lambda h: (-h.score(alpha), h.tokens))
    ranked += sorted(alive, key=lambda h: (-h.score(alpha), h.tokens))
    return ranked


def beam_search_tokens(score: Scorer, prefix: Sequence[int], beam: int = DEFAULT_BEAM,
                       alpha: float = DEFAULT_ALPHA, max_steps: int = DEFAULT_MAX_STEPS,
                       eos: int = EOS, allowed: AllowedFn | None = None) -> list[int]:
    """Best finished hypothesis, or the best unfinished one if none finished."""
    return list(beam_search_hypotheses(score, prefix, beam, alpha, max_steps, eos, allowed)[0].tokens)


# ---------------------------------------------------------------------------
# trie


class _Node:
    __slots__ = ("children", "label")

    def __init__(self):
        self.children: dict[int, _Node] = {}
        self.label: str | None = None


class TokenTrie:
    """Prefix tree over label token sequences, each terminated by EOS."""

    def __init__(self, eos: int = EOS):
        self.root = _Node()
        self.eos = eos
        self.labels: list[str] = []
        self.depth = 0

    def insert(self, ids: Sequence[int], label: str) -> None:
        node = self.root
        for tok in list(ids) + [self.eos]:
            node = node.children.setdefault(int(tok), _Node())
        if node.label is None:
            node.label = label
            self.labels.append(label)
        self.depth = max(self.depth, len(ids) + 1)

    def _walk(self, ids: Sequence[int]) -> _Node | None:
        node = self.root
        for tok in ids:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node

    def allowed(self, ids: Sequence[int]) -> list[int]:
        """Ids that may follow ``ids``; empty when ``ids`` leaves the trie."""
        node = self._walk(ids)
        return [] if node is None else sorted(node.children)

    def label_of(self, ids: Sequence[int]) -> str | None:
        node = self._walk(list(ids) + [self.eos])
        return None if node is None else node.label

    def paths(self) -> list[tuple[int, ...]]:
        """Every root-to-EOS path (EOS included)."""
        out = []
        stack = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            for tok, child in node.children.items():
                if tok == self.eos:
                    out.append(path + (tok,))
                else:
                    stack.append((child, path + (tok,)))
        return sorted(out)


def build_trie(labels: Sequence[str], vocab: Vocabulary) -> TokenTrie:
    if not labels:
        raise ValueError("need at least one label")
    trie = TokenTrie()
    for label in labels:
        ids = vocab.encode(label)
        if not ids:
            raise ValueError(f"label {label!r} tokenizes to nothing")
        if any(i < 4 for i in ids):
            raise ValueError(f"label {label!r} contains tokens missing from the vocabulary")
        trie.insert(ids, normalize(label))
    return trie


# ---------------------------------------------------------------------------
# model-level entry points


@dataclass
class DecodeParams:
    strategy: str = "beam"            # "beam" or "greedy"
    beam: int = DEFAULT_BEAM
    alpha: float = DEFAULT_ALPHA
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if self.strategy not in ("beam", "greedy"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam < 1 or self.max_steps < 1:
            raise ValueError("beam and max_steps must be positive")


def _step_budget(model, prefix_len: int, max_steps: int) -> int:
    room = model.cfg.max_text_len - prefix_len + 1
    if room < 1:
        raise ValueError(f"prefix of {prefix_len} tokens does not fit max_text_len {model.cfg.max_text_len}")
    return min(max_steps, room)


def _features(model, visual):
    """Features for a single visual input: an (H, W, C) image or an (F, H, W, C) clip.

    A clip longer than the model's frame budget is cut down to evenly
    spaced frames, centred in the clip.
    """
    if isinstance(visual, Tensor):
        return visual
    visual = np.asarray(visual)
    if visual.ndim not in (3, 4):
        raise ValueError(f"expected one image (H, W, C) or one clip (F, H, W, C), got shape {visual.shape}")
    if visual.ndim == 4 and visual.shape[0] > model.cfg.max_frames:
        visual = visual[sample_frame_indices(visual.shape[0], model.cfg.max_frames)]
    with no_grad():
        return model.encode(visual[None] if visual.ndim == 4 else visual)


def greedy_decode(model, visual, prefix_ids: Sequence[int] = (BOS,), max_steps: int = DEFAULT_MAX_STEPS) -> list[int]:
    """Greedy decode for one image (pixels or pre-computed features)."""
    score = model.scorer(_features(model, visual))
    return greedy_search(score, prefix_ids, _step_budget(model, len(prefix_ids), max_steps))


def beam_search(model, visual, prefix_ids: Sequence[int] = (BOS,), beam: int = DEFAULT_BEAM,
                alpha: float = DEFAULT_ALPHA, max_steps: int = DEFAULT_MAX_STEPS) -> list[int]:
    score = model.scorer(_features(model, visual))
    return beam_search_tokens(score, prefix_ids, beam, alpha, _step_budget(model, len(prefix_ids), max_steps))


def generate(model, visual, vocab: Vocabulary, params: DecodeParams | None = None,
             prefix_ids: Sequence[int] = (BOS,)) -> str:
    params = params or DecodeParams()
    if params.strategy == "greedy":
        ids = greedy_decode(model, visual, prefix_ids, params.max_steps)
    else:
        ids = beam_search(model, visual, prefix_ids, params.beam, params.alpha, params.max_steps)
    return vocab.decode(ids)


def prefix_generate(model, visual, question: str, vocab: Vocabulary, params: DecodeParams | None = None) -> str:
    """Treat ``question`` as the start of the caption and return only the completion."""
    prefix = [BOS] + vocab.encode(question)
    if len(prefix) > model.cfg.max_text_len:
        raise ValueError(f"question of {len(prefix) - 1} tokens exceeds max_text_len {model.cfg.max_text_len}")
    return generate(model, visual, vocab, params, prefix)


def constrained_search(score: Scorer, trie: TokenTrie, prefix: Sequence[int] = (BOS,),
                       params: DecodeParams | None = None) -> str:
    params = params or DecodeParams()
    steps = max(params.max_steps, trie.depth)
    if params.strategy == "greedy":
        ids = greedy_search(score, prefix, steps, trie.eos, trie.allowed)
    else:
        ids = beam_search_tokens(score, prefix, params.beam, params.alpha, steps, trie.eos, trie.allowed)
    label = trie.label_of(ids)
    if label is None:
        raise AssertionError(f"constrained search left the trie: {ids}")
    return label


def constrained_decode(model, visual, trie: TokenTrie, params: DecodeParams | None = None) -> str:
    """Decode with every step restricted to the trie; the result is always one of its labels."""
    params = params or DecodeParams()
    if trie.depth > model.cfg.max_text_len:
        raise ValueError("longest label does not fit max_text_len")
    score = model.scorer(_features(model, visual))
    return constrained_search(score, trie, (BOS,), params)
