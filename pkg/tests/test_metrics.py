import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gitvl.metrics import evaluate, match_equal_ws, match_exact, match_in


@pytest.mark.parametrize("pred,gt,expected", [
    ("crane bird", "cranebird", True),
    ("Crane  Bird", "cranebird", True),
    ("ipad", "hand-held computer", False),
    ("hand held computer", "hand-held computer", False),
    ("dark red", "red", False),
    ("", "", True),
])
def test_whitespace_insensitive_equal(pred, gt, expected):
    assert match_equal_ws(pred, gt) is expected


def test_containment():
    assert match_in("a dark red car", "dark red")
    assert match_in("RED", "red")
    assert not match_in("red", "dark red")


def test_exact_keeps_inner_spaces():
    assert match_exact(" Abc de ", "abc de")
    assert not match_exact("abcde", "abc de")


def test_evaluate_counts_and_records():
    r = evaluate(["crane bird", "a red car", "ipad"], ["cranebird", "red", "hand-held computer"])
    assert r.n == 3
    assert r.equal_acc == pytest.approx(1 / 3) and r.in_acc == pytest.approx(2 / 3)
    assert r.accuracy == r.equal_acc
    assert [rec["in"] for rec in r.records] == [True, True, False]
    assert json.loads(r.to_json())["mode"] == "equal"
    assert "equal" in r.summary()


def test_voc_prior_requires_in_set_predictions():
    r = evaluate(["red", "light blue"], ["red", "lightblue"], "voc-prior", labels=["red", "light blue"])
    assert r.vocprior_acc == 1.0
    with pytest.raises(ValueError):
        evaluate(["mauve"], ["red"], "voc-prior", labels=["red"])


def test_scene_text_mode():
    r = evaluate(["ab cd", "abcd"], ["ab cd", "ab cd"], "scene-text")
    assert r.exact_acc == 0.5 and r.equal_acc == 1.0


def test_argument_checks():
    with pytest.raises(ValueError):
        evaluate(["a"], ["a", "b"])
    with pytest.raises(ValueError):
        evaluate(["a"], ["a"], mode="fuzzy")


words = st.text(alphabet="ab -", max_size=8)


@given(st.lists(st.tuples(words, words), max_size=20))
def test_in_accuracy_never_below_equal_accuracy(pairs):
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    r = evaluate(preds, gts)
    assert r.in_acc >= r.equal_acc
    assert all(rec["in"] for rec in r.records if rec["equal"])
