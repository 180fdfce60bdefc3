"""Proposal records, the JSON-lines dataset format, sampling and batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch, SummarizerConfig
from .vocab import BOS, EOS, PAD, Vocabulary, build_vocab, normalize_tokens


class SchemaError(ValueError):
    """A dataset or predictions file does not follow the expected format."""


@dataclass
class Segment:
    feature: np.ndarray
    sentence: str
    token_logprobs: list[float] | None = None


@dataclass
class ProposalRecord:
    video_id: str
    proposal_id: str
    t_start: float
    t_end: float
    segments: list[Segment]
    references: list[str]

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)

    @property
    def feat_dim(self) -> int:
        return len(self.segments[0].feature)

    def to_json(self) -> dict:
        segs = []
        for s in self.segments:
            d = {"feature": [float(x) for x in s.feature], "sentence": s.sentence}
            if s.token_logprobs is not None:
                d["token_logprobs"] = [float(x) for x in s.token_logprobs]
            segs.append(d)
        return {
            "video_id": self.video_id,
            "proposal_id": self.proposal_id,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "segments": segs,
            "references": list(self.references),
        }


def _require(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise SchemaError(f"{where}: field '{key}' has wrong type {type(val).__name__}")
    return val


def parse_record(obj, where: str = "record") -> ProposalRecord:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    vid = _require(obj, "video_id", str, where)
    pid = _require(obj, "proposal_id", str, where)
    where = f"{where} ({vid}/{pid})"
    t0 = float(_require(obj, "t_start", (int, float), where))
    t1 = float(_require(obj, "t_end", (int, float), where))
    if not t0 < t1:
        raise SchemaError(f"{where}: t_start {t0} must be < t_end {t1}")
    raw_segs = _require(obj, "segments", list, where)
    if not raw_segs:
        raise SchemaError(f"{where}: 'segments' is empty")
    segments = []
    dim = None
    for i, s in enumerate(raw_segs):
        sw = f"{where} segment {i}"
        if not isinstance(s, dict):
            raise SchemaError(f"{sw}: expected an object")
        feat = _require(s, "feature", list, sw)
        if not feat or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in feat):
            raise SchemaError(f"{sw}: 'feature' must be a nonempty number array")
        if dim is None:
            dim = len(feat)
        elif len(feat) != dim:
            raise SchemaError(f"{sw}: feature length {len(feat)} != {dim} of segment 0")
        sent = _require(s, "sentence", str, sw)
        lp = s.get("token_logprobs")
        if lp is not None and not isinstance(lp, list):
            raise SchemaError(f"{sw}: 'token_logprobs' must be a number array")
        segments.append(Segment(np.asarray(feat, dtype=np.float64), sent, lp))
    refs = _require(obj, "references", list, where)
    if not refs or not all(isinstance(r, str) for r in refs):
        raise SchemaError(f"{where}: 'references' must be a nonempty string array")
    return ProposalRecord(vid, pid, t0, t1, segments, refs)


def load_proposals(path) -> list[ProposalRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            try:
                records.append(parse_record(obj, where=f"line {lineno}"))
            except SchemaError as e:
                raise SchemaError(f"{path}:{e}") from None
    return records


def save_proposals(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def sample_indices(n: int, n_m: int) -> np.ndarray:
    if n < 1:
        raise ValueError("sample_segments: no features to sample from")
    return np.round(np.linspace(0, n - 1, n_m)).astype(int)


def sample_segments(features, n_m: int) -> list:
    """Exactly ``n_m`` items at uniformly spaced positions (repeats if too few)."""
    idx = sample_indices(len(features), n_m)
    return [features[i] for i in idx]


def pad_and_mask(sentences, vocab: Vocabulary, n_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate each token list to ``n_k`` and PAD-fill; mask marks real tokens."""
    grid = np.full((len(sentences), n_k), PAD, dtype=np.int64)
    mask = np.zeros((len(sentences), n_k), dtype=bool)
    for i, toks in enumerate(sentences):
        ids = vocab.encode(toks[:n_k])
        grid[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    return grid, mask


def encode_target(tokens, vocab: Vocabulary, max_len: int = 30) -> list[int]:
    return [BOS] + vocab.encode(tokens[:max_len]) + [EOS]


def make_batch(records, vocab: Vocabulary, cfg: SummarizerConfig, with_targets: bool = True,
               max_target_len: int = 30) -> Batch:
    V, W, M, tgts = [], [], [], []
    for r in records:
        idx = sample_indices(len(r.segments), cfg.n_segments)
        segs = [r.segments[i] for i in idx]
        V.append(np.stack([s.feature for s in segs]))
        grid, mask = pad_and_mask([normalize_tokens(s.sentence) for s in segs], vocab, cfg.n_words)
        W.append(grid.reshape(-1))
        M.append(mask.reshape(-1))
        if with_targets:
            tgts.append(encode_target(normalize_tokens(r.references[0]), vocab, max_target_len))
    targets = None
    if with_targets:
        T = max(len(t) for t in tgts)
        targets = np.full((len(tgts), T), PAD, dtype=np.int64)
        for i, t in enumerate(tgts):
            targets[i, : len(t)] = t
    return Batch(np.stack(V), np.stack(W), np.stack(M), targets)


def vocab_from_records(records, min_count: int = 3) -> Vocabulary:
    sents = []
    for r in records:
        sents.extend(normalize_tokens(x) for x in r.references)
        sents.extend(normalize_tokens(s.sentence) for s in r.segments)
    return build_vocab(sents, min_count=min_count)


# synthetic fixtures ---------------------------------------------------------

_SUBJECTS = ["man", "woman", "boy", "girl", "dog", "player", "chef", "dancer"]
_VERBS = ["plays", "throws", "cuts", "holds", "cleans", "paints", "lifts", "kicks"]
_OBJECTS = ["ball", "guitar", "bread", "rope", "car", "fence", "box", "drum"]


@dataclass
class SyntheticSpec:
    n_records: int = 8
    n_segments: int = 4
    feat_dim: int = 8
    n_subjects: int = 4
    n_verbs: int = 4
    n_objects: int = 4
    noise: float = 0.1
    word_noise: float = 0.2
    seed: int = 0


def synthetic_records(spec: SyntheticSpec | None = None, **kw) -> list[ProposalRecord]:
    """Toy proposals whose reference is recoverable from features and segment sentences.

    Each proposal draws a (subject, verb, object) triple.  Segment features are
    noisy sums of per-word prototype vectors; segment sentences are the
    reference with words randomly dropped or swapped.
    """
    spec = spec or SyntheticSpec(**kw)
    rng = np.random.default_rng(spec.seed)
    subs, verbs, objs = _SUBJECTS[: spec.n_subjects], _VERBS[: spec.n_verbs], _OBJECTS[: spec.n_objects]
    lex = subs + verbs + objs
    protos = {w: rng.normal(size=spec.feat_dim) for w in lex}
    records = []
    for k in range(spec.n_records):
        s, v, o = subs[rng.integers(len(subs))], verbs[rng.integers(len(verbs))], objs[rng.integers(len(objs))]
        ref = ["a", s, v, "the", o]
        segments = []
        for j in range(spec.n_segments):
            feat = protos[s] + protos[v] + protos[o] + spec.noise * rng.normal(size=spec.feat_dim)
            words = []
            for w in ref:
                u = rng.random()
                if u < spec.word_noise / 2:
                    continue
                if u < spec.word_noise and w in lex:
                    w = lex[rng.integers(len(lex))]
                words.append(w)
            segments.append(Segment(feat, " ".join(words)))
        t0 = float(rng.uniform(0, 50))
        records.append(ProposalRecord(f"v{k // 2}", f"p{k}", round(t0, 2), round(t0 + float(rng.uniform(2, 20)), 2),
                                      segments, [" ".join(ref)]))
    return records


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def n_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# predictions and ground truth -------------------------------------------------

def _read_jsonl(path, what: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _interval(obj: dict, where: str) -> tuple[float, float]:
    t0 = float(_require(obj, "t_start", (int, float), where))
    t1 = float(_require(obj, "t_end", (int, float), where))
    if not t0 < t1:
        raise SchemaError(f"{where}: t_start {t0} must be < t_end {t1}")
    return t0, t1


def load_predictions(path):
    """Lines of ``{video_id, t_start, t_end, sentence}`` as metric ``Prediction`` objects."""
    from .metrics import Prediction

    out = []
    for lineno, obj in _read_jsonl(path, "predictions file"):
        where = f"{path}:{lineno}"
        vid = _require(obj, "video_id", str, where)
        sent = _require(obj, "sentence", str, where)
        out.append(Prediction(vid, _interval(obj, where), normalize_tokens(sent)))
    return out


def load_ground_truth(path):
    """Lines carrying ``video_id``, ``t_start``, ``t_end`` and ``references`` (dataset files qualify)."""
    from .metrics import GroundTruth

    out = []
    for lineno, obj in _read_jsonl(path, "ground-truth file"):
        where = f"{path}:{lineno}"
        vid = _require(obj, "video_id", str, where)
        refs = _require(obj, "references", list, where)
        if not refs or not all(isinstance(r, str) for r in refs):
            raise SchemaError(f"{where}: 'references' must be a nonempty string array")
        out.append(GroundTruth(vid, _interval(obj, where), [normalize_tokens(r) for r in refs]))
    return out


def save_predictions(rows, path) -> None:
    """``rows`` are dicts with video_id, proposal_id, t_start, t_end, sentence."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
