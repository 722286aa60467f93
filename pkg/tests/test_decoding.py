import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gitvl.decoding import (DecodeParams, TokenTrie, beam_search, beam_search_hypotheses, beam_search_tokens, build_trie,
                            constrained_decode, constrained_search, generate, greedy_decode, greedy_search,
                            length_penalty, prefix_generate)
from gitvl.model import GIT, ModelConfig, sample_frame_indices
from gitvl.vocab import BOS, EOS, PAD, build_vocab


def table_scorer(vocab_size, seed, banned=(BOS, PAD), temperature=2.0):
    """A random but fixed next-token distribution for every prefix."""
    def score(prefixes):
        rows = []
        for p in prefixes:
            logits = np.random.default_rng([seed, *p]).normal(size=vocab_size) * temperature
            logits[list(banned)] = -np.inf
            rows.append(logits - np.logaddexp.reduce(logits[np.isfinite(logits)]))
        return np.array(rows)
    return score


def exhaustive_best(score, vocab_size, max_steps, alpha, banned=(BOS, PAD)):
    """Brute-force optimum over every EOS-terminated continuation of length <= max_steps."""
    tokens = [t for t in range(vocab_size) if t not in banned and t != EOS]
    best = None
    for n in range(max_steps):
        for body in itertools.product(tokens, repeat=n):
            seq = [BOS]
            total = 0.0
            for t in body + (EOS,):
                total += score([seq])[0][t]
                seq.append(t)
            key = (-total / length_penalty(n + 1, alpha), body)
            best = key if best is None or key < best else best
    return list(best[1])


def test_length_penalty_values():
    for a in (0.0, 0.6, 1.0, 2.0):
        assert length_penalty(1, a) == 1.0
    assert abs(length_penalty(7, 0.6) - 2 ** 0.6) <= 1e-9
    assert length_penalty(30, 0.0) == 1.0


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("alpha", [0.0, 0.6])
def test_wide_beam_equals_exhaustive_search(seed, alpha):
    v, steps = 5, 4
    score = table_scorer(v, seed)
    got = beam_search_tokens(score, [BOS], beam=v ** steps, alpha=alpha, max_steps=steps)
    assert got == exhaustive_best(score, v, steps, alpha)


@pytest.mark.parametrize("seed", range(25))
def test_beam_one_without_penalty_is_greedy(seed):
    score = table_scorer(7, seed)
    assert beam_search_tokens(score, [BOS], beam=1, alpha=0.0, max_steps=6) == greedy_search(score, [BOS], 6)


def test_wider_beam_never_scores_worse_than_exhaustive_reference():
    for seed in range(10):
        score = table_scorer(5, seed)
        ref = exhaustive_best(score, 5, 3, 0.6)
        ref_score = _score_of(score, ref, 0.6)
        for beam in (1, 2, 4):
            top = beam_search_hypotheses(score, [BOS], beam, 0.6, 3)[0]
            if top.finished:
                assert top.score(0.6) == pytest.approx(_score_of(score, top.tokens, 0.6), abs=1e-12)
                assert top.score(0.6) <= ref_score + 1e-12


def _score_of(score, body, alpha):
    seq, total = [BOS], 0.0
    for t in list(body) + [EOS]:
        total += score([seq])[0][t]
        seq.append(t)
    return total / length_penalty(len(body) + 1, alpha)


def test_greedy_stops_at_eos_and_max_steps():
    def always(tok):
        return lambda prefixes: np.array([np.where(np.arange(5) == tok, 0.0, -5.0) for _ in prefixes])
    assert greedy_search(always(EOS), [BOS], 5) == []
    assert greedy_search(always(4), [BOS], 3) == [4, 4, 4]
    with pytest.raises(ValueError):
        greedy_search(always(4), [BOS], 0)


def test_beam_returns_unfinished_when_nothing_finishes():
    score = table_scorer(6, 0, banned=(BOS, PAD, EOS))
    out = beam_search_tokens(score, [BOS], beam=3, alpha=0.6, max_steps=3)
    assert len(out) == 3


# --- trie -------------------------------------------------------------------


@pytest.fixture
def color_vocab():
    return build_vocab(["red dark red blue light blue hot pink"])


def test_trie_structure(color_vocab):
    trie = build_trie(["red", "dark red", "light blue", "blue"], color_vocab)
    s = color_vocab.stoi
    assert trie.allowed([]) == sorted([s["red"], s["dark"], s["light"], s["blue"]])
    assert trie.allowed([s["dark"]]) == [s["red"]]
    assert trie.allowed([s["red"]]) == [EOS]
    assert trie.allowed([s["pink"]]) == []
    assert trie.label_of([s["dark"], s["red"]]) == "dark red"
    assert trie.label_of([s["dark"]]) is None
    assert trie.depth == 3
    assert (s["light"], s["blue"], EOS) in trie.paths()


def test_trie_handles_prefix_labels():
    trie = TokenTrie()
    trie.insert([4], "a")
    trie.insert([4, 5], "a b")
    assert trie.allowed([4]) == [EOS, 5]
    assert trie.label_of([4]) == "a" and trie.label_of([4, 5]) == "a b"


def test_build_trie_rejects_bad_labels(color_vocab):
    with pytest.raises(ValueError):
        build_trie([], color_vocab)
    with pytest.raises(ValueError):
        build_trie(["   "], color_vocab)
    with pytest.raises(ValueError):
        build_trie(["mauve"], color_vocab)
    assert build_trie(["Red", "red"], color_vocab).labels == ["red"]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["greedy", "beam"]),
       st.lists(st.sampled_from(["red", "dark red", "blue", "light blue", "hot pink", "dark blue"]),
                min_size=1, max_size=6, unique=True))
def test_constrained_search_always_lands_on_a_label(seed, strategy, labels):
    vocab = build_vocab(["red dark blue light hot pink"])
    trie = build_trie(labels, vocab)
    out = constrained_search(table_scorer(len(vocab), seed), trie, params=DecodeParams(strategy, beam=3, max_steps=1))
    assert out in labels


def test_constrained_beats_unconstrained_for_out_of_set_outputs(color_vocab):
    v = len(color_vocab)
    pink = color_vocab.stoi["pink"]

    def score(prefixes):
        rows = np.full((len(prefixes), v), -10.0)
        rows[:, pink] = -0.01
        rows[:, EOS] = -1.0 if len(prefixes[0]) > 1 else -10.0
        rows[:, color_vocab.stoi["blue"]] = -2.0
        return rows

    assert greedy_search(score, [BOS], 3) == [pink, pink, pink]
    assert constrained_search(score, build_trie(["blue", "red"], color_vocab), params=DecodeParams("greedy")) == "blue"


# --- model-level entry points -----------------------------------------------


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(vocab_size=9, hidden_dim=8, heads=2, encoder_layers=1, decoder_layers=1,
                      patch_size=2, image_size=4, max_text_len=5, init_std=0.5)
    return GIT(cfg, seed=7)


def test_decode_respects_max_text_len(tiny_model):
    img = np.random.default_rng(0).random((4, 4, 3))
    assert len(greedy_decode(tiny_model, img, max_steps=40)) <= 5
    assert len(beam_search(tiny_model, img, beam=3, max_steps=40)) <= 5
    with pytest.raises(ValueError):
        greedy_decode(tiny_model, img, prefix_ids=[BOS, 4, 4, 4, 4, 4])


def test_model_beam_one_is_greedy(tiny_model):
    rng = np.random.default_rng(1)
    for _ in range(5):
        img = rng.random((4, 4, 3))
        assert beam_search(tiny_model, img, beam=1, alpha=0.0) == greedy_decode(tiny_model, img)


def test_prefix_generate_returns_only_the_completion(tiny_model):
    vocab = build_vocab(["a b c d e"])
    img = np.zeros((4, 4, 3))
    p = DecodeParams("greedy", max_steps=3)
    full = greedy_decode(tiny_model, img, [BOS] + vocab.encode("a b"), 3)
    assert prefix_generate(tiny_model, img, "a b", vocab, p) == vocab.decode(full)
    with pytest.raises(ValueError):
        prefix_generate(tiny_model, img, "a b c d e", vocab, p)


def test_generate_accepts_a_single_clip(tiny_model):
    vocab = build_vocab(["a b c d e"])
    clip = np.random.default_rng(0).random((3, 4, 4, 3))
    assert isinstance(generate(tiny_model, clip, vocab, DecodeParams("greedy")), str)
    with pytest.raises(ValueError):
        generate(tiny_model, np.zeros((1, 3, 4, 4, 3)), vocab)


def test_long_clip_is_subsampled_to_the_frame_budget(tiny_model):
    vocab = build_vocab(["a b c d e"])
    n = tiny_model.cfg.max_frames
    clip = np.random.default_rng(1).random((2 * n + 1, 4, 4, 3))
    kept = clip[sample_frame_indices(len(clip), n)]
    params = DecodeParams("greedy")
    assert generate(tiny_model, clip, vocab, params) == generate(tiny_model, kept, vocab, params)


def test_constrained_decode_on_model(tiny_model):
    vocab = build_vocab(["a b c d e"])
    trie = build_trie(["a b", "c", "d e a"], vocab)
    for seed in range(10):
        img = np.random.default_rng(seed).random((4, 4, 3))
        assert constrained_decode(tiny_model, img, trie) in trie.labels
    with pytest.raises(ValueError):
        constrained_decode(tiny_model, img, build_trie(["a b c d e"], vocab))


def test_decode_params_validation():
    with pytest.raises(ValueError):
        DecodeParams("sample")
    with pytest.raises(ValueError):
        DecodeParams(beam=0)
    assert math.isclose(DecodeParams().alpha, 0.6) and DecodeParams().beam == 4
