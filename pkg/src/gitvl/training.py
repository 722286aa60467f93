"""Language-modeling objective, AdamW, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .model import GIT, sample_frame_indices
from .tensor import Tensor
from .vocab import BOS, EOS, PAD, Vocabulary

log = logging.getLogger(__name__)

ENCODER, DECODER = "encoder", "decoder"


@dataclass
class TrainConfig:
    peak_lr_encoder: float = 1e-4
    lr_decoder_multiplier: float = 5.0
    warmup_iters: int = 500
    total_iters: int = 1000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    seed: int = 0
    grad_clip: float | None = 1.0
    adam_eps: float = 1e-8
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError(f"need 0 <= warmup_iters ({self.warmup_iters}) <= total_iters ({self.total_iters})")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def smoothed_targets(targets: np.ndarray, vocab_size: int, smoothing: float,
                     ignore_id: int | None = None) -> np.ndarray:
    """(1 - eps) one-hot + eps spread uniformly over the vocabulary.

    With ``ignore_id`` that id receives no smoothing mass, and the uniform
    part is spread over the remaining ``vocab_size - 1`` ids.
    """
    targets = np.asarray(targets, dtype=np.int64)
    k = vocab_size
    if ignore_id is not None and 0 <= ignore_id < vocab_size:
        k -= 1
    q = np.full(targets.shape + (vocab_size,), smoothing / k)
    if ignore_id is not None and 0 <= ignore_id < vocab_size:
        q[..., ignore_id] = 0.0
    np.put_along_axis(q, targets[..., None], np.take_along_axis(q, targets[..., None], -1) + (1.0 - smoothing), -1)
    return q


def lm_loss(logits: Tensor, targets, mask=None, smoothing: float = 0.1,
            ignore_id: int | None = None) -> Tensor:
    """Label-smoothed cross-entropy averaged over the positions where ``mask`` is true.

    ``logits`` is (T, V) for one sequence or (B, T, V) for a batch. Each
    sequence is averaged over its own masked positions first, then the batch
    is averaged, so a caption of N tokens contributes 1/(N+1) per position.
    """
    logits = T.as_tensor(logits)
    single = logits.ndim == 2
    targets = np.asarray(targets, dtype=np.int64)
    if single:
        logits = logits.reshape(1, *logits.shape)
        targets = targets[None]
    b, n, v = logits.shape
    if targets.shape != (b, n):
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape[:2]}")
    mask = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, n)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("loss mask selects no position in at least one sequence")
    weights = mask / counts[:, None] / b
    q = smoothed_targets(targets, v, smoothing, ignore_id) * weights[..., None]
    logp = T.log_softmax(logits)
    return T.scale(T.tsum(T.mul(logp, q.astype(logp.dtype))), -1.0)


def vqa_loss_mask(question_len: int, answer_len: int) -> np.ndarray:
    """False while the model predicts question tokens, true for the answer and EOS."""
    if question_len < 0 or answer_len < 0:
        raise ValueError("lengths must be non-negative")
    return np.concatenate([np.zeros(question_len, dtype=bool), np.ones(answer_len + 1, dtype=bool)])


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, cfg: TrainConfig, group: str = ENCODER) -> float:
    """Linear warmup to the peak, then cosine decay to zero at ``total_iters``."""
    if not 0 <= step <= cfg.total_iters:
        raise ValueError(f"step {step} outside [0, {cfg.total_iters}]")
    if group not in (ENCODER, DECODER):
        raise ValueError(f"unknown parameter group {group!r}")
    peak = cfg.peak_lr_encoder * (cfg.lr_decoder_multiplier if group == DECODER else 1.0)
    if step < cfg.warmup_iters:
        return peak * step / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    if span == 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_iters) / span))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float | Sequence[float], cfg: TrainConfig,
               decay: Sequence[bool] | None = None) -> None:
    """One AdamW update in place. ``lr`` and ``decay`` may be given per parameter."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match parameter {p.name} {p.shape}")
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_lr = lrs[i]
        if (decay is None or decay[i]) and cfg.weight_decay:
            p.data -= (step_lr * cfg.weight_decay) * p.data
        p.data -= (step_lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def parameter_group(name: str) -> str:
    return ENCODER if name.startswith("enc.") else DECODER


_NO_DECAY_NAMES = ("enc.pos", "dec.pos", "dec.tok_emb", "temporal")


def uses_weight_decay(name: str, param: Tensor) -> bool:
    """Matrices only: layernorm scales, biases and embedding tables are excluded."""
    return param.ndim >= 2 and name not in _NO_DECAY_NAMES


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= s
    return total


# ---------------------------------------------------------------------------
# examples and batching


class Example(NamedTuple):
    visual: np.ndarray        # (H, W, C) image or (F, H, W, C) frames
    input_ids: np.ndarray     # BOS + tokens
    target_ids: np.ndarray    # tokens + EOS
    loss_mask: np.ndarray     # bool, same length as target_ids


def make_example(sample, vocab: Vocabulary) -> Example:
    """Turn a sample (image/frames, caption[, question, answer]) into model inputs.

    With a question the answer is appended to it as one caption and only
    the answer and EOS positions count towards the loss.
    """
    visual = sample.frames if getattr(sample, "frames", None) is not None else sample.image
    question = getattr(sample, "question", None)
    if question is not None:
        q = vocab.encode(question)
        a = vocab.encode(sample.answer)
        toks = q + a
        mask = vqa_loss_mask(len(q), len(a))
    else:
        toks = vocab.encode(sample.caption)
        mask = np.ones(len(toks) + 1, dtype=bool)
    return Example(
        np.asarray(visual),
        np.array([BOS] + toks, dtype=np.int64),
        np.array(toks + [EOS], dtype=np.int64),
        mask,
    )


def make_examples(samples, vocab: Vocabulary, with_captions: bool = False) -> list[Example]:
    """Examples for a list of samples.

    With ``with_captions`` every sample that carries a question also
    contributes a plain captioning example of the same image. Training on
    both teaches the decoder to read the grid in order, which the
    question-answer pairs alone are slow to discover.
    """
    out = []
    for s in samples:
        if with_captions and getattr(s, "question", None) is not None:
            out.append(make_example(_caption_only(s), vocab))
        out.append(make_example(s, vocab))
    return out


def _caption_only(sample):
    return type(sample)(sample.image, sample.caption, frames=sample.frames)


def collate(examples: Sequence[Example], n_frames: int | None = None,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack a batch, right-padding text with PAD (masked out of the loss).

    Video clips longer than ``n_frames`` are subsampled at equal interval;
    ``rng`` randomises the phase as in training.
    """
    visuals = []
    for ex in examples:
        v = ex.visual
        if v.ndim == 4 and n_frames is not None and v.shape[0] > n_frames:
            v = v[sample_frame_indices(v.shape[0], n_frames, rng)]
        visuals.append(v)
    n = max(len(ex.input_ids) for ex in examples)
    b = len(examples)
    inp = np.full((b, n), PAD, dtype=np.int64)
    tgt = np.full((b, n), PAD, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, ex in enumerate(examples):
        k = len(ex.input_ids)
        inp[i, :k] = ex.input_ids
        tgt[i, :k] = ex.target_ids
        mask[i, :k] = ex.loss_mask
    return np.stack(visuals), inp, tgt, mask


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float, float]]  # (step, loss, lr_encoder, lr_decoder)
    steps: int

    @property
    def losses(self) -> list[float]:
        return [row[1] for row in self.trace]

    def write_csv(self, path) -> None:
        write_loss_csv(self.trace, path)


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr_encoder", "lr_decoder"])
        for step, loss, lr_e, lr_d in trace:
            w.writerow([step, repr(loss), repr(lr_e), repr(lr_d)])


def _batches(data, batch_size: int, rng: np.random.Generator) -> Iterable[list[Example]]:
    epoch = 0
    while True:
        if callable(data):
            stream = data(epoch)
        else:
            stream = (data[i] for i in rng.permutation(len(data)))
        batch: list[Example] = []
        produced = False
        for ex in stream:
            batch.append(ex)
            if len(batch) == batch_size:
                produced = True
                yield batch
                batch = []
        if batch:
            produced = True
            yield batch
        if not produced:
            raise ValueError("training data stream is empty")
        epoch += 1


def train(model: GIT, data, cfg: TrainConfig, checkpoint_path=None,
          on_log: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimise the LM loss for ``cfg.total_iters`` AdamW steps.

    ``data`` is either a sequence of :class:`Example` (reshuffled each epoch
    from ``cfg.seed``) or a callable ``epoch -> iterable of Example`` such
    as a trunk loader stream. Every step's loss goes into the trace; ``on_log``
    fires every ``cfg.log_every`` steps.
    """
    rng = np.random.default_rng(cfg.seed)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    groups = [parameter_group(n) for n in names]
    decay = [uses_weight_decay(n, p) for n, p in zip(names, params)]
    state = AdamState()
    trace = []
    batches = _batches(data, cfg.batch_size, rng)
    for step in range(1, cfg.total_iters + 1):
        visual, inp, tgt, mask = collate(next(batches), model.cfg.max_frames, rng)
        T.zero_grads(params)
        logits = model.forward(visual, inp)
        loss = lm_loss(logits, tgt, mask, cfg.label_smoothing, ignore_id=PAD)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}; last lr={trace[-1][2:] if trace else None}")
        loss.backward()
        grads = [p.grad for p in params]
        if cfg.grad_clip:
            clip_grad_norm(grads, cfg.grad_clip)
        lr_e, lr_d = lr_at(step, cfg, ENCODER), lr_at(step, cfg, DECODER)
        adamw_step(params, grads, state, [lr_e if g == ENCODER else lr_d for g in groups], cfg, decay)
        trace.append((step, value, lr_e, lr_d))
        if on_log is not None and step % cfg.log_every == 0:
            on_log(step, value)
        if step % cfg.log_every == 0:
            log.info("step %d loss %.4f lr_enc %.2e", step, value, lr_e)
    if checkpoint_path is not None:
        model.save(checkpoint_path, {"train_config": cfg.to_dict()})
    return TrainResult(trace, cfg.total_iters)
