"""Captioning and question answering with one architecture.

Both tasks use the same model class and loss. The only difference is what
gets fed to the decoder. A caption is generated from BOS alone. A question
goes into the text prefix and the model continues it with the answer.

    python3 demos/caption_and_vqa.py            # about 6 minutes on one core
    python3 demos/caption_and_vqa.py --quick    # short schedules, lower accuracy
"""

import argparse
import time

from gitvl import GIT, ModelConfig, TrainConfig, build_vocab, evaluate, generate, make_examples, prefix_generate, train
from gitvl.data.synth import synth_dataset


def fit(model, examples, iters):
    cfg = TrainConfig(peak_lr_encoder=3e-4, warmup_iters=iters // 10, total_iters=iters, batch_size=32)
    t0 = time.perf_counter()
    result = train(model, examples, cfg)
    print(f"  {iters} steps in {time.perf_counter() - t0:.0f}s, loss {result.losses[0]:.2f} -> {result.losses[-1]:.2f}")


def model_for(vocab):
    return GIT(ModelConfig(vocab_size=len(vocab), hidden_dim=128, encoder_layers=2, decoder_layers=2,
                           heads=4, patch_size=4, image_size=12, max_text_len=16))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    scale = 0.25 if args.quick else 1.0

    print("captioning: read a 3x3 grid of colored cells, row by row")
    tr, te = synth_dataset("caption", 2000, seed=1), synth_dataset("caption", 200, seed=2)
    vocab = build_vocab([s.caption for s in tr])
    model = model_for(vocab)
    fit(model, make_examples(tr, vocab), int(1000 * scale))
    preds = [generate(model, s.image, vocab) for s in te]
    for p, s in list(zip(preds, te))[:3]:
        print(f"  predicted {p!r:48} truth {s.caption!r}")
    print(f"  held-out exact match: {evaluate(preds, [s.caption for s in te]).equal_acc:.3f}\n")

    print("VQA: the question 'cell r c' is a prefix, the answer is its continuation")
    tr, te = synth_dataset("vqa", 2000, seed=1), synth_dataset("vqa", 200, seed=2)
    vocab = build_vocab([s.caption for s in tr] + [s.question for s in tr])
    model = model_for(vocab)
    # each image contributes its caption as well as its question, which teaches
    # the decoder to read the grid before it has to locate one cell
    fit(model, make_examples(tr, vocab, with_captions=True), int(3500 * scale))
    preds = [prefix_generate(model, s.image, s.question, vocab) for s in te]
    for p, s in list(zip(preds, te))[:3]:
        print(f"  {s.question!r:12} -> {p!r:10} truth {s.answer!r}")
    print(f"  held-out answer accuracy: {evaluate(preds, [s.answer for s in te]).equal_acc:.3f}")


if __name__ == "__main__":
    main()
