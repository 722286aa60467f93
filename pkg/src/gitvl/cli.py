"""Command-line entry point: ``gitvl {synth,train,generate,eval,loader-sim}``.

Every command writes its artifacts under ``--out-dir``. On failure the
last line on stderr is a JSON object ``{"error": <category>, "message": ...}``
and the exit status identifies the category:

    1 internal    2 config    3 input    4 io    5 diverged    6 check
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, build_run_config
from .data.loader import TrunkLoader, TrunkManifest, delivery_order, simulate_timeline
from .data.storage import ConcatDataset, DiskDataset, read_labels, write_dataset
from .data.synth import CLASS_LABELS, MODES, synth_dataset
from .decoding import DecodeParams, build_trie, constrained_decode, generate, prefix_generate
from .metrics import MODES as METRIC_MODES
from .metrics import evaluate
from .model import GIT
from .training import TrainingDiverged, make_examples, train
from .vocab import Vocabulary, build_vocab

EXIT_CODES = {"internal": 1, "config": 2, "input": 3, "io": 4, "diverged": 5, "check": 6}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2) with free text
        raise CliError("config", f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# checkpoints carry the vocabulary so they are self-contained


def save_run_checkpoint(model: GIT, vocab: Vocabulary, path, meta: dict) -> None:
    model.save(path, {**meta, "vocab": vocab.tokens, "char_level": vocab.char_level})


def load_run_checkpoint(path) -> tuple[GIT, Vocabulary]:
    model = GIT.load(path)
    if "vocab" not in model.meta:
        raise CliError("input", f"checkpoint {path} carries no vocabulary")
    return model, Vocabulary(model.meta["vocab"], char_level=model.meta.get("char_level", False))


def _out_dir(cfg_or_path) -> Path:
    out = Path(cfg_or_path.out_dir if isinstance(cfg_or_path, RunConfig) else cfg_or_path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    samples = synth_dataset(args.mode, args.n, seed=args.seed, grid=args.grid)
    labels = CLASS_LABELS if args.mode == "classify" else None
    manifest = write_dataset(samples, _out_dir(args.out_dir), trunk_size=args.trunk_size, labels=labels)
    _emit({"out_dir": str(args.out_dir), "mode": args.mode, "records": manifest["total"],
           "trunks": len(manifest["trunks"])})
    return 0


# ---------------------------------------------------------------------------
# train


def _corpus(samples) -> list[str]:
    out = []
    for s in samples:
        out.append(s.caption)
        if s.question is not None:
            out.extend([s.question, s.answer])
    return out


def _check_vocab_covers(vocab: Vocabulary, corpus: Sequence[str]) -> None:
    missing = sorted({t for text in corpus for t in vocab.unknown(text)})
    if missing:
        raise CliError("input", f"training text uses tokens unknown to the checkpoint vocabulary: {missing[:10]}")


def cmd_train(args) -> int:
    cfg = _run_config(args, {
        "train.total_iters": args.iters, "train.peak_lr_encoder": args.lr, "train.batch_size": args.batch_size,
        "model.decoder_layers": args.decoder_layers, "model.decoder_style": args.decoder_style,
        "train_data": args.train_data, "init_checkpoint": args.init_checkpoint,
    }).validate("train")
    tcfg = cfg.train_config()
    data = ConcatDataset([DiskDataset(p) for p in cfg.train_data])
    samples = [data[i] for i in range(len(data))]
    corpus = _corpus(samples)
    if cfg.init_checkpoint:
        model, vocab = load_run_checkpoint(cfg.init_checkpoint)
        clash = {k: v for k, v in cfg.model.items() if model.cfg.to_dict().get(k) != v}
        if clash:
            raise ConfigError(f"model settings {sorted(clash)} differ from the checkpoint being fine-tuned")
        _check_vocab_covers(vocab, corpus)
    else:
        vocab = build_vocab(corpus, char_level=cfg.use_char_level)
        first = samples[0].visual
        try:
            mcfg = cfg.model_config(len(vocab), image_size=int(first.shape[-3]), channels=int(first.shape[-1]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        model = GIT(mcfg, seed=cfg.seed)
    longest = max(len(ex.input_ids) for ex in make_examples(samples, vocab, cfg.with_captions))
    if longest > model.cfg.max_text_len:
        raise ConfigError(f"longest training text needs {longest} positions > model.max_text_len {model.cfg.max_text_len}")

    trunk_size = int(cfg.loader.get("trunk_size", 64))
    manifest = TrunkManifest.for_range(0, 0, len(data), trunk_size)
    shuffle_order = bool(cfg.loader.get("shuffle_trunk_order", False))

    def epoch_stream(epoch: int):
        loader = TrunkLoader(manifest, 1, cfg.seed, fetch=data.fetch_range, epoch=epoch,
                             shuffle_trunk_order=shuffle_order)
        for s in loader.stream(0):
            yield from make_examples([s], vocab, cfg.with_captions)

    out = _out_dir(cfg)
    t0 = time.perf_counter()
    result = train(model, epoch_stream, tcfg,
                   on_log=lambda step, loss: print(f"step {step} loss {loss:.4f}", file=sys.stderr, flush=True))
    ckpt = out / "model.ckpt"
    save_run_checkpoint(model, vocab, ckpt, {"train_config": tcfg.to_dict(), "task": cfg.task})
    result.write_csv(out / "loss.csv")
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    _emit({"checkpoint": str(ckpt), "loss_csv": str(out / "loss.csv"), "steps": result.steps,
           "final_loss": result.losses[-1], "seconds": round(time.perf_counter() - t0, 2),
           "vocab_size": len(vocab), "parameters": model.num_parameters()})
    return 0


# ---------------------------------------------------------------------------
# generate / eval


def _load_inputs(path: str, indices: Sequence[int] | None):
    p = Path(path)
    if p.is_dir():
        ds = DiskDataset(p)
        idx = list(range(len(ds))) if not indices else list(indices)
        for i in idx:
            if not 0 <= i < len(ds):
                raise CliError("input", f"index {i} outside dataset of {len(ds)} records")
        return [(i, ds[i]) for i in idx]
    if p.suffix == ".npy" and p.is_file():
        return [(0, np.load(p))]
    raise CliError("input", f"input {path!r} is neither a dataset directory nor an .npy file")


class _Predictor:
    def __init__(self, model: GIT, vocab: Vocabulary, mode: str, params: DecodeParams, labels=None):
        self.model, self.vocab, self.mode, self.params = model, vocab, mode, params
        self.trie = None
        if mode == "trie":
            if not labels:
                raise ConfigError("trie mode needs a labels file (--labels-file)")
            try:
                self.trie = build_trie(labels, vocab)
            except ValueError as exc:
                raise CliError("input", str(exc)) from exc

    def __call__(self, visual: np.ndarray, question: str | None = None) -> str:
        if self.mode == "trie":
            return constrained_decode(self.model, visual, self.trie, self.params)
        if self.mode == "prefix":
            if not question:
                raise CliError("input", "prefix mode needs a question")
            return prefix_generate(self.model, visual, question, self.vocab, self.params)
        return generate(self.model, visual, self.vocab, self.params)


def _decode_flags(args) -> dict:
    return {"decode.beam": args.beam, "decode.alpha": args.length_penalty, "decode.max_steps": args.max_steps,
            "decode.strategy": "greedy" if args.greedy else None,
            "checkpoint": args.checkpoint, "labels_file": args.labels_file}


def _labels_for(cfg: RunConfig, dataset_dir: str | None):
    if cfg.labels_file:
        return read_labels(cfg.labels_file)
    if dataset_dir and Path(dataset_dir).is_dir():
        return DiskDataset(dataset_dir).labels
    return None


def cmd_generate(args) -> int:
    cfg = _run_config(args, _decode_flags(args)).validate("generate")
    model, vocab = load_run_checkpoint(cfg.checkpoint)
    task = model.meta.get("task", cfg.task)
    mode = args.mode or ("prefix" if task == "vqa" else "caption")
    predict = _Predictor(model, vocab, mode, cfg.decode_params(), _labels_for(cfg, args.input) if mode == "trie" else None)
    rows = []
    for i, item in _load_inputs(args.input, args.index):
        if isinstance(item, np.ndarray):
            pred = predict(item, args.question)
        else:
            pred = predict(item.visual, args.question or item.question)
        rows.append({"index": i, "prediction": pred})
        print(pred if len(rows) == 1 and isinstance(item, np.ndarray) else f"{i}\t{pred}")
    if args.out_dir:
        with open(_out_dir(args.out_dir) / "predictions.jsonl", "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in rows)
    return 0


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_eval(args) -> int:
    if args.predictions or args.ground_truths:
        if not (args.predictions and args.ground_truths):
            raise ConfigError("--predictions and --ground-truths go together")
        preds, gts = _read_lines(args.predictions), _read_lines(args.ground_truths)
        labels = read_labels(args.labels_file) if args.labels_file else None
        report = evaluate(preds, gts, args.metric or "equal", labels)
        out = _out_dir(args.out_dir or "runs/eval")
    else:
        cfg = _run_config(args, {**_decode_flags(args), "eval_data": args.data}).validate("eval")
        if not cfg.eval_data:
            raise ConfigError("eval needs --data (or eval_data in the config) when no predictions file is given")
        model, vocab = load_run_checkpoint(cfg.checkpoint)
        task = model.meta.get("task", cfg.task)
        labels = _labels_for(cfg, cfg.eval_data)
        metric = args.metric or {"scene-text": "scene-text", "classify": "voc-prior" if labels else "equal"}.get(task, "equal")
        mode = "trie" if metric == "voc-prior" else ("prefix" if task == "vqa" else "caption")
        predict = _Predictor(model, vocab, mode, cfg.decode_params(), labels)
        ds = DiskDataset(cfg.eval_data)
        preds, gts = [], []
        for i in range(len(ds)):
            s = ds[i]
            preds.append(predict(s.visual, s.question))
            gts.append(s.answer if mode == "prefix" else s.caption)
        report = evaluate(preds, gts, metric, labels if metric == "voc-prior" else None)
        out = _out_dir(args.out_dir or cfg.out_dir)
    (out / "report.json").write_text(report.to_json())
    print(report.summary())
    return 0


# ---------------------------------------------------------------------------
# loader simulation


def cmd_loader_sim(args) -> int:
    if args.nodes < 1 or args.ranks < 1 or args.trunk_size < 1 or args.total < 0:
        raise ConfigError("total >= 0 and nodes, ranks, trunk_size >= 1 required")
    if args.fetch_latency < 0 or args.consume_latency < 0 or not 0 <= args.jitter <= 1:
        raise ConfigError("latencies must be non-negative and jitter within [0, 1]")
    rng = np.random.default_rng(args.seed)
    manifests = TrunkManifest.for_nodes(args.total, args.nodes, args.trunk_size)
    node_reports, delivered = [], []
    for m in manifests:
        fetch = args.fetch_latency * (1 + args.jitter * rng.uniform(-1, 1, len(m)))
        consume = args.consume_latency * (1 + args.jitter * rng.uniform(-1, 1, (args.ranks, len(m))))
        tl = simulate_timeline([b - a for a, b in m.trunks], args.ranks, lambda p: float(fetch[p]),
                               lambda r, p: float(consume[r, p]), args.prefetch_limit)
        scale = args.time_scale
        loader = TrunkLoader(m, args.ranks, args.seed, prefetch_limit=args.prefetch_limit,
                             retain_limit=args.retain_limit,
                             fetch_delay=(lambda t: float(fetch[t]) * scale) if scale else None)
        got = loader.run(consume_delay=(lambda r: (lambda: args.consume_latency * scale)) if scale else None)
        delivered.append(got)
        node_reports.append({
            "node": m.node_id, "items": m.n_items, "trunks": len(m),
            "max_prefetch_lead": loader.stats.max_prefetch_lead, "max_resident": loader.stats.max_resident,
            "evicted": loader.stats.evicted,
            "sim_stall_seconds": sum(tl.stall_seconds), "sim_stall_count": sum(tl.stall_count),
            "sim_backpressure_seconds": sum(tl.backpressure_seconds), "sim_makespan": tl.makespan,
            "sim_max_prefetch_lead": tl.max_prefetch_lead,
        })
    flat = sorted(i for node in delivered for rank in node for i in rank)
    report = {
        "topology": {"total": args.total, "nodes": args.nodes, "ranks": args.ranks, "trunk_size": args.trunk_size},
        "seed": args.seed,
        "exactly_once": flat == list(range(args.total)),
        "order_matches_reference": delivered == delivery_order(args.total, args.nodes, args.ranks,
                                                               args.trunk_size, args.seed),
        "max_prefetch_lead": max((n["max_prefetch_lead"] for n in node_reports), default=0),
        "max_resident": max((n["max_resident"] for n in node_reports), default=0),
        "prefetch_limit": args.prefetch_limit, "retain_limit": args.retain_limit,
        "sim_stall_seconds": sum(n["sim_stall_seconds"] for n in node_reports),
        "nodes": node_reports,
    }
    report["bounds_ok"] = (report["max_prefetch_lead"] <= args.prefetch_limit
                           and report["max_resident"] <= args.retain_limit)
    if args.out_dir:
        (_out_dir(args.out_dir) / "loader_report.json").write_text(json.dumps(report, indent=2))
    print(f"exactly-once delivery   {'ok' if report['exactly_once'] else 'FAILED'}")
    print(f"reference order         {'ok' if report['order_matches_reference'] else 'FAILED'}")
    print(f"prefetch high-water     {report['max_prefetch_lead']} (limit {args.prefetch_limit})")
    print(f"retention high-water    {report['max_resident']} (limit {args.retain_limit})")
    print(f"simulated stall time    {report['sim_stall_seconds']:.6f} s")
    if not (report["exactly_once"] and report["order_matches_reference"] and report["bounds_ok"]):
        raise CliError("check", "loader verification failed")
    return 0


# ---------------------------------------------------------------------------
# parser


def _run_config(args, flags: dict) -> RunConfig:
    base = {"task": getattr(args, "task", None), "seed": getattr(args, "seed", None),
            "out_dir": getattr(args, "out_dir", None)}
    return build_run_config(args.config, args.set or (), {**base, **flags})


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.total_iters=200 (repeatable)")
    p.add_argument("--out-dir")


def _add_decode_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--beam", type=int)
    p.add_argument("--length-penalty", type=float, help="alpha in ((5 + len) / 6) ** alpha")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--labels-file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gitvl", description="Generative image-to-text models on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--trunk-size", type=int, default=64)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train or fine-tune a model")
    _add_run_options(p)
    p.add_argument("--task", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-data", nargs="+")
    p.add_argument("--init-checkpoint", help="start from these weights (intermediate fine-tuning)")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float, help="peak encoder learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--decoder-layers", type=int)
    p.add_argument("--decoder-style", choices=["self-attention", "cross-attention"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode text for images or clips")
    _add_run_options(p)
    _add_decode_options(p)
    p.add_argument("--input", required=True, help="dataset directory or .npy array")
    p.add_argument("--index", type=int, nargs="+")
    p.add_argument("--mode", choices=["caption", "prefix", "trie"])
    p.add_argument("--question")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions or a checkpoint on a dataset")
    _add_run_options(p)
    _add_decode_options(p)
    p.add_argument("--data", help="evaluation dataset directory")
    p.add_argument("--predictions")
    p.add_argument("--ground-truths")
    p.add_argument("--metric", choices=METRIC_MODES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loader-sim", help="exercise the trunk loader and report its bounds")
    p.add_argument("--total", type=int, default=1000)
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--ranks", type=int, default=1)
    p.add_argument("--trunk-size", type=int, default=64)
    p.add_argument("--fetch-latency", type=float, default=0.0, help="seconds per trunk")
    p.add_argument("--consume-latency", type=float, default=0.0, help="seconds per item")
    p.add_argument("--jitter", type=float, default=0.0, help="relative latency noise in [0, 1]")
    p.add_argument("--time-scale", type=float, default=0.0,
                   help="also sleep latency * scale in the threaded run (0 = no sleeping)")
    p.add_argument("--prefetch-limit", type=int, default=7)
    p.add_argument("--retain-limit", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_loader_sim)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except TrainingDiverged as exc:
        category, message = "diverged", str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    except (ValueError, KeyError, IndexError) as exc:
        category, message = "input", str(exc)
    except Exception as exc:  # noqa: BLE001 - last-resort report
        category, message = "internal", f"{type(exc).__name__}: {exc}"
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
