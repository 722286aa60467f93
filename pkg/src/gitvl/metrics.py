"""Generation-based accuracy: whitespace-insensitive match, containment, exact match."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

MODES = ("equal", "in", "voc-prior", "scene-text")


def match_equal_ws(pred: str, gt: str) -> bool:
    """Equal after case folding and deleting every space."""
    return pred.casefold().replace(" ", "") == gt.casefold().replace(" ", "")


def match_in(pred: str, gt: str) -> bool:
    """Ground truth occurs inside the prediction (case-folded)."""
    return gt.casefold() in pred.casefold()


def _squash(s: str) -> str:
    return s.replace(" ", "")


def match_exact(pred: str, gt: str) -> bool:
    """Case-folded exact match that keeps internal whitespace."""
    return pred.casefold().strip() == gt.casefold().strip()


@dataclass
class EvalReport:
    mode: str
    n: int
    equal_acc: float
    in_acc: float
    vocprior_acc: float | None = None
    exact_acc: float | None = None
    records: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        """Headline accuracy of the report's mode."""
        if self.mode == "voc-prior":
            return self.vocprior_acc
        if self.mode == "scene-text":
            return self.exact_acc
        if self.mode == "in":
            return self.in_acc
        return self.equal_acc

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def summary(self) -> str:
        rows = [("mode", self.mode), ("n", str(self.n)),
                ("equal", f"{self.equal_acc:.4f}"), ("in", f"{self.in_acc:.4f}")]
        if self.vocprior_acc is not None:
            rows.append(("voc-prior", f"{self.vocprior_acc:.4f}"))
        if self.exact_acc is not None:
            rows.append(("scene-text exact", f"{self.exact_acc:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(predictions: Sequence[str], ground_truths: Sequence[str], mode: str = "equal",
             labels: Sequence[str] | None = None) -> EvalReport:
    """Score predictions against ground truths.

    Every report carries ``equal`` and ``in`` accuracy. The ``in`` verdict
    compares with spaces removed from both sides, so an ``equal`` hit is
    always an ``in`` hit as well. ``voc-prior`` expects
    trie-constrained predictions and, when ``labels`` is given, refuses any
    prediction outside that set. ``scene-text`` adds case-folded exact match.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} predictions but {len(ground_truths)} ground truths")
    label_set = None if labels is None else {x.casefold() for x in labels}
    records = []
    n_eq = n_in = n_exact = 0
    for pred, gt in zip(predictions, ground_truths):
        eq, inside, exact = match_equal_ws(pred, gt), match_in(_squash(pred), _squash(gt)), match_exact(pred, gt)
        if mode == "voc-prior" and label_set is not None and pred.casefold() not in label_set:
            raise ValueError(f"voc-prior prediction {pred!r} is not in the label set")
        n_eq += eq
        n_in += inside
        n_exact += exact
        records.append({"prediction": pred, "ground_truth": gt, "equal": eq, "in": inside, "exact": exact})
    n = len(records)
    div = max(n, 1)
    return EvalReport(
        mode=mode,
        n=n,
        equal_acc=n_eq / div,
        in_acc=n_in / div,
        vocprior_acc=n_eq / div if mode == "voc-prior" else None,
        exact_acc=n_exact / div if mode == "scene-text" else None,
        records=records,
    )
