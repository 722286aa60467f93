import json

import numpy as np
import pytest

from gitvl.data.loader import TrunkLoader, TrunkManifest
from gitvl.data.storage import ConcatDataset, DiskDataset, decode_array, encode_array, write_dataset
from gitvl.data.synth import CLASS_LABELS, COLORS, GLYPH_ALPHABET, MODES, synth_dataset


def test_caption_mode_reads_the_grid():
    s = synth_dataset("caption", 1, seed=0, noise=0.0)[0]
    words = s.caption.split()
    assert len(words) == 9 and set(words) <= set(COLORS)
    assert s.image.shape == (12, 12, 3) and s.image.dtype == np.float32


def test_vqa_answers_agree_with_the_caption():
    for s in synth_dataset("vqa", 50, seed=1):
        _, r, c = s.question.split()
        assert s.caption.split()[3 * int(r) + int(c)] == s.answer


def test_video_clip_layout():
    s = synth_dataset("video", 1, seed=2)[0]
    assert s.image is None and s.frames.shape == (12, 8, 8, 3)
    assert len(s.caption.split()) == 6


def test_classify_and_scene_text():
    labels = {s.label for s in synth_dataset("classify", 200, seed=3)}
    assert labels <= set(CLASS_LABELS) and any(" " in x for x in labels)
    for s in synth_dataset("scene-text", 20, seed=4):
        assert set(s.caption) <= set(GLYPH_ALPHABET + " ") and len(s.caption) <= 9


@pytest.mark.parametrize("mode", MODES)
def test_generation_is_seeded(mode):
    a, b = synth_dataset(mode, 3, seed=9), synth_dataset(mode, 3, seed=9)
    assert [x.caption for x in a] == [x.caption for x in b]
    assert all(np.array_equal(x.visual, y.visual) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        synth_dataset(mode, 0)


def test_array_payload_round_trip():
    x = np.random.default_rng(0).random((2, 3, 4)).astype(np.float32)
    assert decode_array(json.loads(json.dumps(encode_array(x)))).tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        decode_array({"shape": [1], "dtype": "float16", "data": ""})


@pytest.mark.parametrize("mode", ["vqa", "video", "classify"])
def test_disk_round_trip(tmp_path, mode):
    samples = synth_dataset(mode, 10, seed=5)
    manifest = write_dataset(samples, tmp_path, trunk_size=4, labels=CLASS_LABELS if mode == "classify" else None)
    assert [t["size"] for t in manifest["trunks"]] == [4, 4, 2]
    ds = DiskDataset(tmp_path)
    assert len(ds) == 10
    back = ds.all()
    for a, b in zip(samples, back):
        assert a.caption == b.caption and a.question == b.question and a.label == b.label
        assert a.visual.tobytes() == b.visual.tobytes()
    assert ds.labels == (list(CLASS_LABELS) if mode == "classify" else None)
    with pytest.raises(IndexError):
        ds[10]


def test_disk_dataset_feeds_the_loader(tmp_path):
    samples = synth_dataset("caption", 20, seed=6)
    write_dataset(samples, tmp_path, trunk_size=8)
    ds = DiskDataset(tmp_path)
    out = TrunkLoader(TrunkManifest.for_range(0, 0, 20, 8), ranks=2, fetch=ds.fetch_range).run()
    assert sorted(s.caption for r in out for s in r) == sorted(s.caption for s in samples)


def test_concat_dataset_indexing(tmp_path):
    a, b = synth_dataset("caption", 3, seed=1), synth_dataset("vqa", 4, seed=2)
    write_dataset(a, tmp_path / "a", trunk_size=2)
    write_dataset(b, tmp_path / "b", trunk_size=2)
    both = ConcatDataset([DiskDataset(tmp_path / "a"), DiskDataset(tmp_path / "b")])
    assert len(both) == 7
    assert [s.caption for s in both.fetch_range((0, 7))] == [s.caption for s in a + b]
    assert both[3].question == b[0].question
    with pytest.raises(IndexError):
        both[7]
