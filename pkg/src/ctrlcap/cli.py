"""Command-line entry point: ``ctrlcap <command> [flags]``.

Every command accepts ``--config <file>`` holding ``key = value`` lines with
the same names as the flags; explicit flags win over the file.
Failures print one JSON line on stderr and exit with a per-kind code.
"""
from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from .captioner import CheckpointError, VocabMismatch, load_checkpoint, sample
from .corpus import CorpusError, SynthConfig, generate_synthetic, load_corpus, save_corpus, split_corpus
from .evaluation import bleu, corpus_bleu, evaluate
from .rewards import CiderD, NgramStats
from .signals import (ControlSignal, InvalidCaption, SchemeError, UnknownToken, get_scheme,
                      gt_quality_score, length_level, parse_level_spec, quality_level, tense_level)
from .training import METRIC_FIELDS, TrainConfig, TrainingError, corpus_digest, train

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_SCHEME = 3
EXIT_VOCAB = 4
EXIT_INPUT = 5
EXIT_TRAINING = 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {v!r}")
    return v == "on"


def _threads_default() -> int:
    raw = os.environ.get("CTRLCAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CTRLCAP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $CTRLCAP_THREADS or 1)")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="ctrlcap", description="Structure-controlled captioning toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=500)
    g.add_argument("--refs", type=int, default=5)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--feature-dim", type=int, default=32)
    g.add_argument("--noise-std", type=float, default=0.1)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", required=True, choices=["xe", "rl", "sat", "finetune"])
    t.add_argument("--task", default="length", choices=["length", "tense", "length+tense", "quality", "none"])
    t.add_argument("--corpus", required=True)
    t.add_argument("--scheme", action="append", default=None,
                   help="level scheme preset (repeatable; e.g. length-fine, quality-transformer-3)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.add_argument("--length-penalty", type=_on_off, default=False)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", default="fresh", help="checkpoint path or 'fresh'")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--metrics", help="metrics CSV (default <out-dir>/metrics.csv)")
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--d", type=int, default=64)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--positional", type=_on_off, default=False)
    t.add_argument("--beam", type=int, default=2)
    t.add_argument("--max-len", type=int, default=20)
    t.add_argument("--clip-advantage", type=_on_off, default=False,
                   help="clip negative advantages in the finetune stage")
    t.add_argument("--eval-split", default="test", choices=["val", "test"])
    t.add_argument("--deterministic", action="store_true", help="omit the timestamp from the log header")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a held-out split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--protocol", default="1to5", choices=["1to1", "1to5"])
    e.add_argument("--signal-source", default="gt", help="gt or fixed:<level-spec>")
    e.add_argument("--beam", type=int, default=2)
    e.add_argument("--max-len", type=int, default=20)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--format", default="table", choices=["table", "csv"])
    e.add_argument("--csv-out", help="also write the CSV report here")

    a = sub.add_parser("annotate", parents=[common], help="print the levels of every reference")
    a.add_argument("--corpus", required=True)
    a.add_argument("--scheme", action="append", default=None)

    s = sub.add_parser("score", parents=[common], help="score candidate captions against references")
    s.add_argument("--candidates", required=True, help="one caption per line")
    s.add_argument("--refs", required=True, help="one tab-separated reference set per line")
    s.add_argument("--metric", default="cider", choices=["cider", "bleu"])
    s.add_argument("--length-penalty", type=_on_off, default=True)

    m = sub.add_parser("sample", parents=[common], help="draw captions for one image")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--image-id", required=True)
    m.add_argument("--signal", required=True, help="level spec, e.g. len=2 or len=1,tense=3")
    m.add_argument("--n", type=int, default=5)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--max-len", type=int, default=20)
    return p


# ------------------------------------------------------------------ config overlay

def read_config_file(path: str) -> List[str]:
    """Turn ``key = value`` lines into flag tokens."""
    out: List[str] = []
    try:
        fh = open(path)
    except OSError as e:
        raise CorpusError(f"cannot read config {path}: {e.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (x.strip() for x in line.split("=", 1))
            k = k.replace("_", "-")
            if k == "deterministic" or k == "verbose":
                if v.lower() in ("1", "true", "on", "yes"):
                    out.append(f"--{k}")
                continue
            out.extend([f"--{k}", v])
    return out


def _overlay(argv: List[str]) -> List[str]:
    cfg = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            cfg = argv[i + 1]
        elif tok.startswith("--config="):
            cfg = tok.split("=", 1)[1]
    if cfg is None or not argv:
        return argv
    # file values go right after the command name so later flags override them
    return argv[:1] + read_config_file(cfg) + argv[1:]


# ------------------------------------------------------------------ commands

def _schemes_for(task: str, schemes: Optional[Sequence[str]]) -> Dict[str, str]:
    out = {"length_scheme": "length-coarse", "quality_scheme": "quality-updown-5"}
    for name in schemes or []:
        sch = get_scheme(name)
        if sch.kind == "length":
            if task not in ("length", "length+tense"):
                raise SchemeError(f"scheme {name} does not fit task {task}")
            out["length_scheme"] = name
        elif sch.kind == "quality":
            if task != "quality":
                raise SchemeError(f"scheme {name} does not fit task {task}")
            out["quality_scheme"] = name
        elif task not in ("tense", "length+tense"):
            raise SchemeError(f"scheme {name} does not fit task {task}")
    return out


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(args.images, args.refs, args.seed, args.feature_dim, args.noise_std)
    corpus = generate_synthetic(cfg)
    save_corpus(corpus, args.out)
    print(json.dumps({"out": args.out, "images": len(corpus), "vocab": len(corpus.vocab),
                      "digest": corpus_digest(corpus)}))
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    config = TrainConfig(stage=args.stage, task=args.task, epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, lam=args.lam, seed=args.seed,
                         length_penalty=args.length_penalty, max_len=args.max_len, d=args.d,
                         dropout=args.dropout, positional=args.positional, beam=args.beam,
                         finetune_clip_advantage=args.clip_advantage, eval_split=args.eval_split,
                         threads=args.threads, **_schemes_for(args.task, args.scheme))
    init = None if args.init == "fresh" else args.init
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = args.metrics or os.path.join(args.out_dir, "metrics.csv")
    header = {
        "command": "train", "stage": config.stage, "task": config.task, "corpus": args.corpus,
        "corpus_digest": corpus_digest(corpus), "vocab_hash": corpus.vocab.hash,
        "scheme": config.space().describe(), "epochs": config.epochs, "lr": repr(config.lr),
        "lambda": repr(config.lam), "length_penalty": "on" if config.length_penalty else "off",
        "seed": config.seed, "init": args.init, "batch_size": config.batch_size, "d": config.d,
        "dropout": repr(config.dropout), "positional": "on" if config.positional else "off",
        "beam": config.beam, "max_len": config.max_len, "clip_advantage":
        "on" if config.finetune_clip_advantage else "off", "eval_split": config.eval_split,
    }
    fresh_file = not os.path.exists(log_path)
    with open(log_path, "a") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        if not args.deterministic:
            fh.write(f"# timestamp = {datetime.datetime.now().isoformat(timespec='seconds')}\n")
        if fresh_file:
            fh.write(",".join(METRIC_FIELDS) + "\n")
    result = train(config, corpus, init=init, out_dir=args.out_dir, log_path=log_path)
    last = result.checkpoints[-1] if result.checkpoints else None
    print(json.dumps({"checkpoint": last, "metrics": log_path, "epochs_run": len(result.metrics)}))
    return EXIT_OK


def _parse_source(text: str):
    if text == "gt":
        return "gt"
    if text.startswith("fixed:"):
        return parse_level_spec(text[len("fixed:"):])
    raise UsageError(f"signal source must be gt or fixed:<level-spec>, got {text!r}")


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    model, _, _ = load_checkpoint(args.ckpt, expect_vocab_hash=corpus.vocab.hash)
    source = _parse_source(args.signal_source)
    if isinstance(source, ControlSignal):
        model.space.validate(source)
    splits = split_corpus(corpus)
    target = splits[args.split]
    if not target.images:
        raise CorpusError(f"split {args.split} is empty")
    stats = NgramStats.build(img.refs for img in splits["train"].images) \
        if splits["train"].images else NgramStats.build(img.refs for img in corpus.images)
    report = evaluate(model, target, args.protocol, source, stats=stats, beam=args.beam,
                      max_len=args.max_len, threads=args.threads)
    print(report.csv() if args.format == "csv" else report.table(), end="" if args.format == "csv" else "\n")
    if args.csv_out:
        with open(args.csv_out, "w") as fh:
            fh.write(report.csv())
    return EXIT_OK


def cmd_annotate(args) -> int:
    corpus = load_corpus(args.corpus)
    schemes = [get_scheme(n) for n in (args.scheme or ["length-coarse"])]
    stats = None
    if any(s.kind == "quality" for s in schemes):
        stats = NgramStats.build(img.refs for img in corpus.images)
    for img in corpus.images:
        for i, ref in enumerate(img.refs):
            rec = {"id": img.id, "ref": i, "caption": " ".join(ref)}
            for sch in schemes:
                if sch.kind == "length":
                    rec[sch.name] = length_level(len(ref), sch)
                elif sch.kind == "tense":
                    rec[sch.name] = tense_level(ref, corpus.tags, sch)
                else:
                    rec[sch.name] = quality_level(gt_quality_score(i, img.refs, stats), sch)
            if img.declared_tense is not None:
                rec["declared_tense"] = img.declared_tense[i]
            print(json.dumps(rec))
    return EXIT_OK


def _read_lines(path: str) -> List[str]:
    try:
        with open(path) as fh:
            return [ln.rstrip("\n") for ln in fh]
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e.strerror}") from None


def cmd_score(args) -> int:
    cands = [ln.split() for ln in _read_lines(args.candidates)]
    refsets = [[r.split() for r in ln.split("\t") if r.strip()] for ln in _read_lines(args.refs)]
    if len(cands) != len(refsets):
        raise CorpusError(f"{len(cands)} candidates but {len(refsets)} reference sets")
    if any(not rs for rs in refsets):
        raise CorpusError("every candidate needs at least one reference")
    if args.metric == "cider":
        scorer = CiderD(NgramStats.build(refsets))
        scores = [scorer.score(c, rs, args.length_penalty) if c else 0.0 for c, rs in zip(cands, refsets)]
        print("index,cider_d")
        for i, v in enumerate(scores):
            print(f"{i},{v:.6f}")
        print(f"mean,{float(np.mean(scores)):.6f}")
    else:
        print("index,bleu1,bleu2,bleu3,bleu4")
        for i, (c, rs) in enumerate(zip(cands, refsets)):
            b = bleu(c, rs) if c else [0.0] * 4
            print(f"{i}," + ",".join(f"{x:.6f}" for x in b))
        print("corpus," + ",".join(f"{x:.6f}" for x in corpus_bleu(cands, refsets)))
    return EXIT_OK


def cmd_sample(args) -> int:
    corpus = load_corpus(args.corpus)
    model, _, _ = load_checkpoint(args.ckpt, expect_vocab_hash=corpus.vocab.hash)
    signal = parse_level_spec(args.signal)
    model.space.validate(signal)
    img = corpus.by_id(args.image_id)
    rng = np.random.default_rng(args.seed)
    batch = sample(model, np.stack([img.feature] * args.n), [signal] * args.n, rng, args.max_len,
                   annotate_fn=lambda words: None)
    scorer = None
    if model.space.quality is not None:
        train_imgs = split_corpus(corpus)["train"].images or corpus.images
        scorer = CiderD(NgramStats.build(i.refs for i in train_imgs))
    for r in batch.rollouts:
        score = scorer.score(r.words, img.refs, False) if scorer is not None and r.words else None
        if scorer is not None and score is None:
            score = 0.0
        realized = model.annotate_words(r.words, score)
        rec = {"caption": " ".join(r.words), "log_prob": round(r.seq_log_prob, 6),
               "requested": signal.spec(), "annotated": realized.spec() if realized else None,
               "match": realized == signal}
        print(json.dumps(rec))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "annotate": cmd_annotate, "score": cmd_score, "sample": cmd_sample}


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": message}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_overlay(argv))
        if args.threads is None:
            args.threads = _threads_default()
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, str(e))
    except VocabMismatch as e:
        return _fail("vocab-mismatch", EXIT_VOCAB, str(e))
    except (SchemeError, InvalidCaption) as e:
        return _fail("scheme", EXIT_SCHEME, str(e))
    except (CorpusError, CheckpointError, UnknownToken, FileNotFoundError) as e:
        return _fail("input", EXIT_INPUT, str(e))
    except TrainingError as e:
        return _fail("training", EXIT_TRAINING, str(e))
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except Exception as e:  # noqa: BLE001 - last-resort one-line report
        return _fail("internal", EXIT_INTERNAL, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
