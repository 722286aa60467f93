"""On-disk trunk dataset.

    out_dir/
      manifest.json                 {"format": 1, "total": N, "trunk_size": S,
                                     "trunks": [{"path": ..., "size": n}, ...]}
      trunk_00000/records.jsonl     one JSON object per sample
      trunk_00001/records.jsonl
      labels.txt                    (classification datasets only)

Each record holds ``caption`` plus optional ``question``/``answer``/``label``
and exactly one pixel payload, ``image`` or ``frames``:
``{"shape": [...], "dtype": "float32", "data": base64(little-endian raw)}``.
"""

from __future__ import annotations

import base64
import json
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .synth import SyntheticSample

FORMAT_VERSION = 1
_OPTIONAL = ("question", "answer", "label")


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "dtype": "float32", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(payload: dict) -> np.ndarray:
    if payload.get("dtype", "float32") != "float32":
        raise ValueError(f"unsupported payload dtype {payload['dtype']!r}")
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(payload["shape"]).astype(np.float32)


def sample_to_record(s: SyntheticSample) -> dict:
    rec = {"caption": s.caption}
    if s.frames is not None:
        rec["frames"] = encode_array(s.frames)
    else:
        rec["image"] = encode_array(s.image)
    for key in _OPTIONAL:
        if getattr(s, key) is not None:
            rec[key] = getattr(s, key)
    return rec


def record_to_sample(rec: dict) -> SyntheticSample:
    frames = decode_array(rec["frames"]) if "frames" in rec else None
    image = decode_array(rec["image"]) if "image" in rec else None
    if (frames is None) == (image is None):
        raise ValueError("record must carry exactly one of 'image' or 'frames'")
    return SyntheticSample(image, rec["caption"], frames=frames,
                           **{k: rec.get(k) for k in _OPTIONAL})


def write_dataset(samples: Sequence[SyntheticSample], out_dir, trunk_size: int = 64,
                  labels: Sequence[str] | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trunks = []
    for t, start in enumerate(range(0, len(samples), trunk_size)):
        chunk = samples[start:start + trunk_size]
        rel = f"trunk_{t:05d}/records.jsonl"
        (out / rel).parent.mkdir(exist_ok=True)
        with open(out / rel, "w", encoding="utf-8") as fh:
            for s in chunk:
                fh.write(json.dumps(sample_to_record(s)) + "\n")
        trunks.append({"path": rel, "size": len(chunk)})
    manifest = {"format": FORMAT_VERSION, "total": len(samples), "trunk_size": trunk_size, "trunks": trunks}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if labels is not None:
        (out / "labels.txt").write_text("".join(x + "\n" for x in labels), encoding="utf-8")
    return manifest


def read_labels(path) -> list[str]:
    return [x for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()]


class DiskDataset:
    """Random access by global index over a trunk directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        if self.manifest.get("format") != FORMAT_VERSION:
            raise ValueError(f"{root}: unsupported dataset format {self.manifest.get('format')}")
        self.trunk_size = self.manifest["trunk_size"]
        self.total = self.manifest["total"]
        self._read = lru_cache(maxsize=16)(self._read_trunk)

    def __len__(self) -> int:
        return self.total

    def _read_trunk(self, t: int) -> list[SyntheticSample]:
        path = self.root / self.manifest["trunks"][t]["path"]
        with open(path, encoding="utf-8") as fh:
            return [record_to_sample(json.loads(line)) for line in fh if line.strip()]

    def __getitem__(self, i: int) -> SyntheticSample:
        if not 0 <= i < self.total:
            raise IndexError(i)
        t, off = divmod(i, self.trunk_size)
        return self._read(t)[off]

    def fetch_range(self, trunk: tuple[int, int]) -> list[SyntheticSample]:
        """Samples for a global ``[start, stop)`` range, usable as a loader ``fetch``."""
        return [self[i] for i in range(*trunk)]

    def all(self) -> list[SyntheticSample]:
        return [s for t in range(len(self.manifest["trunks"])) for s in self._read_trunk(t)]

    @property
    def labels(self) -> list[str] | None:
        p = self.root / "labels.txt"
        return read_labels(p) if p.exists() else None


class ConcatDataset:
    """Several datasets behind one global index space, in the given order."""

    def __init__(self, parts: Sequence):
        if not parts:
            raise ValueError("need at least one dataset")
        self.parts = list(parts)
        self.offsets = np.cumsum([0] + [len(p) for p in self.parts])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def __getitem__(self, i: int) -> SyntheticSample:
        if not 0 <= i < len(self):
            raise IndexError(i)
        k = int(np.searchsorted(self.offsets, i, side="right")) - 1
        return self.parts[k][i - int(self.offsets[k])]

    def fetch_range(self, trunk: tuple[int, int]) -> list[SyntheticSample]:
        return [self[i] for i in range(*trunk)]
