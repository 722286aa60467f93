"""Generative image-to-text transformer: one image encoder, one text decoder.

The image encoder is a small ViT (patch embedding, learned positions,
bidirectional pre-norm blocks) followed by a linear projection and a
layernorm. The default text decoder runs a single transformer over the
concatenation ``[image tokens; text tokens]`` under the seq2seq mask from
:func:`build_seq2seq_mask`. The ``cross-attention`` style instead keeps the
image tokens fixed and lets text attend to them from a separate sublayer.

Tensors are batch-first: images ``(B, H, W, C)``, videos
``(B, F, H, W, C)``, text ids ``(B, T)``, features ``(B, n, D)``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor
from .vocab import BOS, PAD

SELF_ATTENTION = "self-attention"
CROSS_ATTENTION = "cross-attention"
NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 6
    heads: int = 4
    patch_size: int = 4
    image_size: int = 12
    channels: int = 3
    max_text_len: int = 40
    decoder_style: str = SELF_ATTENTION
    tie_embeddings: bool = True
    max_frames: int = 6
    mlp_ratio: int = 4
    layer_norm_eps: float = 1e-5
    init_std: float = 0.08

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.hidden_dim <= 0 or self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must be positive and divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.decoder_style not in (SELF_ATTENTION, CROSS_ATTENTION):
            raise ValueError(f"unknown decoder_style {self.decoder_style!r}")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 reserved ids plus at least one token")
        for name in ("encoder_layers", "decoder_layers", "max_text_len", "max_frames", "mlp_ratio"):
            if getattr(self, name) < (0 if name == "encoder_layers" else 1):
                raise ValueError(f"{name} out of range: {getattr(self, name)}")

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def block_parameter_count(d: int, mlp_ratio: int, cross: bool = False) -> int:
    """Parameters in one pre-norm block (two layernorms, fused qkv, output, MLP)."""
    n = (4 + 2 * mlp_ratio) * d * d + (9 + mlp_ratio) * d
    if cross:
        # extra layernorm + q, kv, out projections with biases
        n += 4 * d * d + 6 * d
    return n


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``; tied weights are counted once.

    encoder:  patch (P^2 C + 1) D + n_img D + L_enc * block
    bridge:   D^2 + D (linear) + 2D (layernorm) + max_frames D (temporal)
    decoder:  V D + max_len D + 2D (embedding layernorm) + L_dec * block
              + 2D (final layernorm) + [V D if untied]
    block:    (4 + 2r) D^2 + (9 + r) D, plus 4 D^2 + 6 D for cross-attention
    """
    d, r = cfg.hidden_dim, cfg.mlp_ratio
    enc = (cfg.patch_dim + 1) * d + cfg.tokens_per_image * d + cfg.encoder_layers * block_parameter_count(d, r)
    bridge = d * d + d + 2 * d + cfg.max_frames * d
    cross = cfg.decoder_style == CROSS_ATTENTION
    dec = cfg.vocab_size * d + cfg.max_text_len * d + 2 * d
    dec += cfg.decoder_layers * block_parameter_count(d, r, cross) + 2 * d
    if not cfg.tie_embeddings:
        dec += cfg.vocab_size * d
    return enc + bridge + dec


def build_seq2seq_mask(n_img: int, n_txt: int) -> np.ndarray:
    """Boolean (n_img+n_txt)^2 visibility matrix; ``[i, j]`` means output i sees input j.

    Image tokens see every image token and no text; text token t sees every
    image token and text tokens 0..t.
    """
    if n_img < 0 or n_txt < 0:
        raise ValueError("token counts must be non-negative")
    n = n_img + n_txt
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_img] = True
    mask[n_img:, n_img:] = np.tril(np.ones((n_txt, n_txt), dtype=bool))
    return mask


def mask_to_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, NEG_INF).astype(dtype)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def sample_frame_indices(n_total: int, n_sample: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick ``n_sample`` frame indices at equal interval from a clip of ``n_total``.

    With ``rng`` (training) the whole comb is shifted by a random offset
    within one interval; without it (inference) the comb is centred.
    """
    if n_total < 1 or n_sample < 1:
        raise ValueError("need at least one frame")
    n_sample = min(n_sample, n_total)
    stride = n_total / n_sample
    offset = rng.uniform(0, stride) if rng is not None else stride / 2
    idx = np.floor(offset + stride * np.arange(n_sample)).astype(np.int64)
    return np.clip(idx, 0, n_total - 1)


class GIT:
    """Parameters plus the forward passes of the image-to-text model."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.meta: dict = {}  # checkpoint metadata, filled by load()
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(value.astype(self.dtype), name=name, dtype=self.dtype)

    def _normal(self, rng, *shape) -> np.ndarray:
        return rng.normal(0.0, self.cfg.init_std, size=shape)

    def _init_block(self, rng, prefix: str, cross: bool) -> None:
        d, r = self.cfg.hidden_dim, self.cfg.mlp_ratio
        self._add(f"{prefix}.ln1.g", np.ones(d))
        self._add(f"{prefix}.ln1.b", np.zeros(d))
        self._add(f"{prefix}.attn.wqkv", self._normal(rng, d, 3 * d))
        self._add(f"{prefix}.attn.bqkv", np.zeros(3 * d))
        self._add(f"{prefix}.attn.wo", self._normal(rng, d, d))
        self._add(f"{prefix}.attn.bo", np.zeros(d))
        if cross:
            self._add(f"{prefix}.lnx.g", np.ones(d))
            self._add(f"{prefix}.lnx.b", np.zeros(d))
            self._add(f"{prefix}.xattn.wq", self._normal(rng, d, d))
            self._add(f"{prefix}.xattn.bq", np.zeros(d))
            self._add(f"{prefix}.xattn.wkv", self._normal(rng, d, 2 * d))
            self._add(f"{prefix}.xattn.bkv", np.zeros(2 * d))
            self._add(f"{prefix}.xattn.wo", self._normal(rng, d, d))
            self._add(f"{prefix}.xattn.bo", np.zeros(d))
        self._add(f"{prefix}.ln2.g", np.ones(d))
        self._add(f"{prefix}.ln2.b", np.zeros(d))
        self._add(f"{prefix}.mlp.w1", self._normal(rng, d, r * d))
        self._add(f"{prefix}.mlp.b1", np.zeros(r * d))
        self._add(f"{prefix}.mlp.w2", self._normal(rng, r * d, d))
        self._add(f"{prefix}.mlp.b2", np.zeros(d))

    def _init_params(self, rng) -> None:
        cfg, d = self.cfg, self.cfg.hidden_dim
        self._add("enc.patch.w", self._normal(rng, cfg.patch_dim, d))
        self._add("enc.patch.b", np.zeros(d))
        self._add("enc.pos", self._normal(rng, cfg.tokens_per_image, d))
        for i in range(cfg.encoder_layers):
            self._init_block(rng, f"enc.blocks.{i}", cross=False)
        self._add("proj.w", self._normal(rng, d, d))
        self._add("proj.b", np.zeros(d))
        self._add("proj.ln.g", np.ones(d))
        self._add("proj.ln.b", np.zeros(d))
        self._add("temporal", np.zeros((cfg.max_frames, d)))
        self._add("dec.tok_emb", self._normal(rng, cfg.vocab_size, d))
        self._add("dec.pos", self._normal(rng, cfg.max_text_len, d))
        self._add("dec.emb_ln.g", np.ones(d))
        self._add("dec.emb_ln.b", np.zeros(d))
        cross = cfg.decoder_style == CROSS_ATTENTION
        for i in range(cfg.decoder_layers):
            self._init_block(rng, f"dec.blocks.{i}", cross=cross)
        self._add("dec.ln_f.g", np.ones(d))
        self._add("dec.ln_f.b", np.zeros(d))
        if not cfg.tie_embeddings:
            self._add("dec.out.w", self._normal(rng, d, cfg.vocab_size))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    @property
    def output_weight(self) -> Tensor:
        """Pre-softmax projection, stored (V, D). Same object as the token embedding when tied."""
        if self.cfg.tie_embeddings:
            return self.params["dec.tok_emb"]
        return self.params["dec.out.w"]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model_config": self.cfg.to_dict(), "dtype": self.dtype.name}
        meta.update(extra_meta or {})
        checkpoint.save_arrays(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "GIT":
        arrays, meta = checkpoint.load_arrays(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]), dtype=np.dtype(meta.get("dtype", "float32")))
        model.load_state_dict(arrays)
        model.meta = meta
        return model

    # -- building blocks ---------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return T.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"], self.cfg.layer_norm_eps)

    def _split_heads(self, x: Tensor, b: int, n: int, parts: int) -> Tensor:
        h = self.cfg.heads
        dh = self.cfg.hidden_dim // h
        x = x.reshape(b, n, parts, h, dh)
        return x.transpose(2, 0, 3, 1, 4)  # (parts, B, h, n, dh)

    def _merge_heads(self, x: Tensor, b: int, n: int) -> Tensor:
        return x.transpose(0, 2, 1, 3).reshape(b, n, self.cfg.hidden_dim)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None) -> Tensor:
        dh = q.shape[-1]
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = T.add(scores, bias)
        return T.matmul(T.softmax(scores), v)

    def _self_attention(self, x: Tensor, prefix: str, bias: np.ndarray | None) -> Tensor:
        p = self.params
        b, n, _ = x.shape
        qkv = self._split_heads(T.linear(x, p[prefix + ".wqkv"], p[prefix + ".bqkv"]), b, n, 3)
        out = self._attend(qkv[0], qkv[1], qkv[2], bias)
        return T.linear(self._merge_heads(out, b, n), p[prefix + ".wo"], p[prefix + ".bo"])

    def _cross_attention(self, x: Tensor, mem: Tensor, prefix: str) -> Tensor:
        p = self.params
        b, n, _ = x.shape
        m = mem.shape[1]
        q = self._split_heads(T.linear(x, p[prefix + ".wq"], p[prefix + ".bq"]), b, n, 1)[0]
        kv = self._split_heads(T.linear(mem, p[prefix + ".wkv"], p[prefix + ".bkv"]), b, m, 2)
        out = self._attend(q, kv[0], kv[1], None)
        return T.linear(self._merge_heads(out, b, n), p[prefix + ".wo"], p[prefix + ".bo"])

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = T.gelu(T.linear(x, p[prefix + ".w1"], p[prefix + ".b1"]))
        return T.linear(h, p[prefix + ".w2"], p[prefix + ".b2"])

    def _block(self, x: Tensor, prefix: str, bias: np.ndarray | None) -> Tensor:
        x = T.add(x, self._self_attention(self._ln(x, prefix + ".ln1"), prefix + ".attn", bias))
        return T.add(x, self._mlp(self._ln(x, prefix + ".ln2"), prefix + ".mlp"))

    # -- image side --------------------------------------------------------

    def encode_image(self, images) -> Tensor:
        """Pixels (B, H, W, C) or (H, W, C) -> projected features (B, n_img, D)."""
        cfg, p = self.cfg, self.params
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        expect = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ValueError(f"image shape {images.shape[1:]} does not match config {expect}")
        x = T.linear(Tensor(patchify(images, cfg.patch_size)), p["enc.patch.w"], p["enc.patch.b"])
        x = T.add(x, p["enc.pos"])
        for i in range(cfg.encoder_layers):
            x = self._block(x, f"enc.blocks.{i}", None)
        x = T.linear(x, p["proj.w"], p["proj.b"])
        return self._ln(x, "proj.ln")

    def encode_video(self, frames) -> Tensor:
        """Frames (B, F, H, W, C) or (F, H, W, C) -> (B, F * n_img, D).

        Each frame is encoded on its own; frame f's tokens get the temporal
        embedding row f before the frames are concatenated in order.
        """
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim == 4:
            frames = frames[None]
        b, f = frames.shape[:2]
        if not 1 <= f <= self.cfg.max_frames:
            raise ValueError(f"{f} frames given, model supports 1..{self.cfg.max_frames}")
        n = self.cfg.tokens_per_image
        feats = self.encode_image(frames.reshape(b * f, *frames.shape[2:]))
        feats = feats.reshape(b, f * n, self.cfg.hidden_dim)
        frame_of_token = np.repeat(np.arange(f), n)
        return T.add(feats, T.embedding(self.params["temporal"], frame_of_token))

    # -- text side ---------------------------------------------------------

    def _check_text(self, text_ids) -> np.ndarray:
        ids = np.asarray(text_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] < 1 or ids.shape[1] > self.cfg.max_text_len:
            raise ValueError(f"text length {ids.shape[1]} outside 1..{self.cfg.max_text_len}")
        if np.any(ids[:, 0] != BOS):
            raise ValueError("text ids must start with BOS")
        return ids

    def _embed_text(self, ids: np.ndarray) -> Tensor:
        p = self.params
        x = T.embedding(p["dec.tok_emb"], ids)
        x = T.add(x, p["dec.pos"][: ids.shape[1]])
        return self._ln(x, "dec.emb_ln")

    def _logits(self, h: Tensor) -> Tensor:
        h = self._ln(h, "dec.ln_f")
        w = self.output_weight
        if self.cfg.tie_embeddings:
            return T.matmul(h, T.swap_last(w))
        return T.matmul(h, w)

    def decode(self, img: Tensor, text_ids, trace: list | None = None) -> Tensor:
        """Logits (B, T, V); position t scores the token that follows ``text_ids[:, t]``.

        Right padding needs no extra mask: causal visibility keeps PAD
        positions from influencing earlier tokens, and the loss skips them.
        ``trace``, when given, receives the image-token array that enters
        each decoder layer.
        """
        if self.cfg.decoder_style == CROSS_ATTENTION:
            return self.decoder_forward_cross(img, text_ids, trace)
        return self.decoder_forward(img, text_ids, trace)

    def decoder_forward(self, img: Tensor, text_ids, trace: list | None = None) -> Tensor:
        ids = self._check_text(text_ids)
        img = T.as_tensor(img)
        b, n_img = img.shape[0], img.shape[1]
        if ids.shape[0] != b:
            raise ValueError(f"batch mismatch: {b} images, {ids.shape[0]} texts")
        n_txt = ids.shape[1]
        x = T.concat([img, self._embed_text(ids)], axis=1)
        bias = mask_to_bias(build_seq2seq_mask(n_img, n_txt), self.dtype)
        for i in range(self.cfg.decoder_layers):
            if trace is not None:
                trace.append(x.data[:, :n_img].copy())
            x = self._block(x, f"dec.blocks.{i}", bias)
        return self._logits(x[:, n_img:])

    def decoder_forward_cross(self, img: Tensor, text_ids, trace: list | None = None) -> Tensor:
        ids = self._check_text(text_ids)
        img = T.as_tensor(img)
        if ids.shape[0] != img.shape[0]:
            raise ValueError(f"batch mismatch: {img.shape[0]} images, {ids.shape[0]} texts")
        n_txt = ids.shape[1]
        x = self._embed_text(ids)
        bias = mask_to_bias(build_seq2seq_mask(0, n_txt), self.dtype)
        for i in range(self.cfg.decoder_layers):
            prefix = f"dec.blocks.{i}"
            if trace is not None:
                trace.append(img.data.copy())
            x = T.add(x, self._self_attention(self._ln(x, prefix + ".ln1"), prefix + ".attn", bias))
            x = T.add(x, self._cross_attention(self._ln(x, prefix + ".lnx"), img, prefix + ".xattn"))
            x = T.add(x, self._mlp(self._ln(x, prefix + ".ln2"), prefix + ".mlp"))
        return self._logits(x)

    def encode(self, visual) -> Tensor:
        """Dispatch on rank: 3/4-D arrays are images, 5-D arrays are videos."""
        visual = np.asarray(visual)
        if visual.ndim == 5:
            return self.encode_video(visual)
        return self.encode_image(visual)

    def forward(self, visual, text_ids) -> Tensor:
        return self.decode(self.encode(visual), text_ids)

    # -- inference ---------------------------------------------------------

    def scorer(self, img: Tensor, banned: Sequence[int] = (BOS, PAD)) -> Callable[[Sequence[Sequence[int]]], np.ndarray]:
        """Next-token log-probabilities for a batch of equal-length prefixes.

        ``img`` holds a single example's features ``(1, n, D)``. Prefixes
        include the leading BOS. ``banned`` ids get -inf.
        """
        img_data = T.as_tensor(img).data
        banned = list(banned)

        def score(prefixes: Sequence[Sequence[int]]) -> np.ndarray:
            ids = np.asarray(prefixes, dtype=np.int64)
            with T.no_grad():
                feats = Tensor(np.repeat(img_data, ids.shape[0], axis=0))
                logits = self.decode(feats, ids).data[:, -1, :].astype(np.float64)
            logits[:, banned] = -np.inf
            m = logits.max(axis=1, keepdims=True)
            return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))

        return score
