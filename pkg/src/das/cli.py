"""``das`` command line: train, caption segments, summarize, evaluate, gradcheck, score.

Exit codes: 0 success, 1 usage or configuration error, 2 data schema error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .data import (SchemaError, load_ground_truth, load_predictions, load_proposals, make_batch,
                   sample_indices, save_predictions, save_proposals, vocab_from_records)
from .decode import decode_batch, dm_best_select, score_sentences, segment_batch
from .gradcheck import TINY, model_gradcheck
from .metrics import CiderD, bleu, dense_eval, meteor_lite, rouge_l
from .model import MODES, SummarizerConfig, SummarizerParams
from .train import NumericalError, TrainConfig, train_loop
from .vocab import Vocabulary, normalize_tokens

log = logging.getLogger("das")

EXIT_OK, EXIT_USAGE, EXIT_SCHEMA, EXIT_NUMERIC = 0, 1, 2, 3
SUMMARIZE_MODES = MODES + ("DM-ave", "DM-best")
RECORDS_PER_TASK = 16


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# configuration ------------------------------------------------------------------

def load_config(path) -> dict:
    """``{"model": {...}, "train": {...}, "data": {"min_count": n}}``; every section optional."""
    if path is None:
        return {"model": {}, "train": {}, "data": {}}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    out = {k: raw.get(k, {}) for k in ("model", "train", "data")}
    for k, v in out.items():
        if not isinstance(v, dict):
            raise ConfigError(f"{path}: section '{k}' must be an object")
    unknown = set(out["data"]) - {"min_count"}
    if unknown:
        raise ConfigError(f"{path}: unknown data field(s) {sorted(unknown)}")
    return out


def _overrides(args, mapping: dict) -> dict:
    return {field: getattr(args, flag) for flag, field in mapping.items()
            if getattr(args, flag, None) is not None}


def _model_config(section: dict, **fixed) -> SummarizerConfig:
    try:
        return SummarizerConfig.from_dict({**section, **fixed})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model config: {e}") from None


def _train_config(section: dict, **fixed) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**section, **fixed})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from None


def _workers() -> int:
    raw = os.environ.get("DAS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DAS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DAS_THREADS must be a positive integer, got {raw!r}")
    return n


def _parallel_map(fn, items) -> list:
    """Order-preserving map over at most ``DAS_THREADS`` workers."""
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _chunks(seq, size: int) -> list:
    return [seq[i: i + size] for i in range(0, len(seq), size)]


def _load_model(path) -> tuple[SummarizerParams, Vocabulary, dict]:
    params, meta = checkpoint.load(path)
    if "vocab" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no vocabulary")
    return params, Vocabulary.from_dict(meta["vocab"]), meta


# subcommands --------------------------------------------------------------------

def cmd_train(args) -> int:
    conf = load_config(args.config)
    records = load_proposals(args.dataset)
    if not records:
        raise SchemaError(f"{args.dataset}: no records")
    val = load_proposals(args.val) if args.val else None
    tcfg = _train_config(conf["train"], **_overrides(args, {
        "seed": "seed", "mode": "mode", "lambda_d": "lambda_d", "beam": "beam",
        "max_len": "max_len", "epochs": "epochs"}))
    if tcfg.mode == "scst" and not args.init:
        raise ConfigError("scst training starts from a cross-entropy model: pass --init CHECKPOINT")
    if args.init:
        params, vocab, _ = _load_model(args.init)
        shape = _overrides(args, {"nm": "n_segments", "nk": "n_words"})
        if shape:
            params = SummarizerParams(replace(params.cfg, **shape), params.groups)
    else:
        vocab = vocab_from_records(records, min_count=conf["data"].get("min_count", 3))
        mcfg = _model_config(conf["model"], **_overrides(args, {"nm": "n_segments", "nk": "n_words"}))
        dim = records[0].feat_dim
        if "feat_dim" in conf["model"] and mcfg.feat_dim != dim:
            raise ConfigError(f"model.feat_dim={mcfg.feat_dim} but the dataset features have {dim} entries")
        mcfg = replace(mcfg, feat_dim=dim, vocab_size=len(vocab))
        params = SummarizerParams.init(mcfg, seed=tcfg.seed)
    for r in records + (val or []):
        if r.feat_dim != params.cfg.feat_dim:
            raise SchemaError(f"{r.video_id}/{r.proposal_id}: feature length {r.feat_dim} != {params.cfg.feat_dim}")

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    lines: list[str] = []

    def on_epoch(entry):
        lines.append(entry.line())
        print(entry.line(), flush=True)

    result = train_loop(records, vocab, params, tcfg, val, on_epoch=on_epoch)
    log_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    meta = {"vocab": vocab.to_dict(), "seed": tcfg.seed, "epoch": result.best_epoch,
            "train": tcfg.to_dict(), "log": lines}
    checkpoint.save(args.out, result.best_params, meta)
    return EXIT_OK


def cmd_caption_segments(args) -> int:
    params, vocab, _ = _load_model(args.checkpoint)
    if params.cfg.mode != "TA":
        raise ConfigError(f"caption-segments needs a TA (decoder-only) checkpoint, got {params.cfg.mode}")
    records = load_proposals(args.dataset)

    def caption(rec):
        hyps = decode_batch(params, segment_batch([s.feature for s in rec.segments]), args.beam, args.max_len)
        for seg, h in zip(rec.segments, hyps):
            words = vocab.decode(h.words)
            seg.sentence = " ".join(words)
            seg.token_logprobs = h.token_logprobs[: len(h.words)]
        return rec

    save_proposals(_parallel_map(caption, records), args.out)
    return EXIT_OK


def _row(rec, sentence: str) -> dict:
    return {"video_id": rec.video_id, "proposal_id": rec.proposal_id,
            "t_start": rec.t_start, "t_end": rec.t_end, "sentence": sentence}


def _dm_best(rec, n_m: int, scorer) -> dict:
    segs = [rec.segments[i] for i in sample_indices(len(rec.segments), n_m)]
    cands = [(s, normalize_tokens(s.sentence)) for s in segs]
    cands = [(s, toks) for s, toks in cands if toks]
    if not cands:
        return _row(rec, "")
    probs = []
    missing = [s for s, _ in cands if s.token_logprobs is None]
    if missing and scorer is None:
        raise ConfigError("DM-best needs token_logprobs on every segment (run caption-segments) "
                          "or a TA --checkpoint to score the sentences")
    if missing:
        lps = scorer([s.feature for s, _ in cands], [toks for _, toks in cands])
    else:
        lps = [s.token_logprobs for s, _ in cands]
    for (s, toks), lp in zip(cands, lps):
        if len(lp) != len(toks):
            raise SchemaError(f"{rec.video_id}/{rec.proposal_id}: {len(lp)} token_logprobs for "
                              f"{len(toks)} words in {s.sentence!r}")
        probs.append([math.exp(x) for x in lp])
    best = dm_best_select([toks for _, toks in cands], probs)
    return _row(rec, cands[best][0].sentence)


def cmd_summarize(args) -> int:
    records = load_proposals(args.dataset)
    conf = load_config(args.config)
    mode = args.mode
    rows: list[dict] = []
    if mode in MODES:
        if not args.checkpoint:
            raise ConfigError(f"summarize --mode {mode} needs --checkpoint")
        params, vocab, _ = _load_model(args.checkpoint)
        if params.cfg.mode != mode:
            raise ConfigError(f"checkpoint was trained in {params.cfg.mode} mode, not {mode}")
        shape = _overrides(args, {"nm": "n_segments", "nk": "n_words"})
        if shape:
            params = SummarizerParams(replace(params.cfg, **shape), params.groups)

        def run(chunk):
            batch = make_batch(chunk, vocab, params.cfg, with_targets=False)
            return [_row(r, " ".join(vocab.decode(h.words)))
                    for r, h in zip(chunk, decode_batch(params, batch, args.beam, args.max_len))]

        for part in _parallel_map(run, _chunks(records, RECORDS_PER_TASK)):
            rows.extend(part)
    else:
        n_m = args.nm or conf["model"].get("n_segments") or SummarizerConfig.n_segments
        if mode == "DM-ave":
            # one row per division sentence; the evaluator's pair averaging does the rest
            for r in records:
                rows.extend(_row(r, r.segments[i].sentence) for i in sample_indices(len(r.segments), n_m))
        else:
            scorer = None
            if args.checkpoint:
                params, vocab, _ = _load_model(args.checkpoint)
                if params.cfg.mode != "TA":
                    raise ConfigError("DM-best scores sentences with a TA checkpoint")

                def scorer(features, token_lists):
                    return score_sentences(params, features, [vocab.encode(t) for t in token_lists])

            rows = _parallel_map(lambda r: _dm_best(r, n_m, scorer), records)
    save_predictions(rows, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = load_predictions(args.predictions)
    gts = load_ground_truth(args.ground_truth)
    if not gts:
        raise SchemaError(f"{args.ground_truth}: no ground-truth events")
    report = dense_eval(preds, gts, pairing=args.pairing)
    print(report.table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    conf = load_config(args.config)
    overrides = {**conf["model"], **_overrides(args, {"nm": "n_segments", "nk": "n_words"})}
    overrides.pop("attention", None)
    report = model_gradcheck(args.mode, seed=args.seed or 0, scale=args.scale,
                             inject_bug=args.inject_bug, **overrides)
    print(f"# gradcheck mode={args.mode} tol={report.tol:g} config={ {**TINY, **overrides} }")
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failures)}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_metrics(args) -> int:
    cand = normalize_tokens(args.candidate)
    refs = [normalize_tokens(r) for r in args.ref]
    scores = {f"Bleu_{n}": bleu(cand, refs, n) if cand else 0.0 for n in range(1, 5)}
    scores["ROUGE_L"] = rouge_l(cand, refs)
    scores["METEOR"] = meteor_lite(cand, refs)
    if args.corpus:
        corpus = [g.references for g in load_ground_truth(args.corpus)]
        scores["CIDEr-D"] = CiderD(corpus).score(cand, refs)
    for k, v in scores.items():
        print(f"{k}\t{v:.6f}")
    return EXIT_OK


# entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="das", description="Division-and-summarization dense video captioning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a summarizer (or a TA captioner)")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("xent", "scst"))
    t.add_argument("--lambda-d", type=float, dest="lambda_d")
    t.add_argument("--beam", type=int)
    t.add_argument("--max-len", type=int, dest="max_len")
    t.add_argument("--epochs", type=int)
    t.add_argument("--nm", type=int, help="segments per proposal (N_m)")
    t.add_argument("--nk", type=int, help="words kept per segment sentence (N_k)")
    t.add_argument("--init", help="checkpoint to start from (required for scst)")
    t.add_argument("--val", help="validation dataset (default: the training set)")
    t.add_argument("--log", help="tab-separated epoch log (default: OUT.log)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption-segments", help="division step: one sentence per segment with a TA model")
    c.add_argument("dataset")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--beam", type=int, default=5)
    c.add_argument("--max-len", type=int, default=25, dest="max_len")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_caption_segments)

    s = sub.add_parser("summarize", help="one sentence per proposal")
    s.add_argument("dataset")
    s.add_argument("--mode", choices=SUMMARIZE_MODES, required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--max-len", type=int, default=30, dest="max_len")
    s.add_argument("--nm", type=int)
    s.add_argument("--nk", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_summarize)

    e = sub.add_parser("eval", help="dense captioning scores over tIoU thresholds")
    e.add_argument("predictions")
    e.add_argument("ground_truth")
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--pairing", choices=("all", "best"), default="all")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    g.add_argument("--mode", choices=MODES, default="HA")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--nm", type=int)
    g.add_argument("--nk", type=int)
    g.add_argument("--scale", type=float, default=None,
                   help="redraw parameters uniform in [-scale, scale] (default: training init)")
    g.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("metrics", help="score one candidate sentence against references")
    m.add_argument("candidate")
    m.add_argument("--ref", action="append", required=True)
    m.add_argument("--corpus", help="reference file whose document frequencies CIDEr-D uses")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SchemaError as e:
        print(f"das: schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except (NumericalError, FloatingPointError) as e:
        print(f"das: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"das: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
