"""Sentence generation (beam search, greedy, sampling) and the division-output baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import Batch, SummarizerParams, build_decoder_context, decoder_step, forward_teacher_forced, initial_state
from .tensor import Tensor
from .vocab import BOS, EOS, PAD


@dataclass
class Hypothesis:
    tokens: list[int]  # starts with BOS
    logprob: float
    state: int  # row of the step function's state batch
    finished: bool = False
    token_logprobs: list[float] = field(default_factory=list)

    @property
    def words(self) -> list[int]:
        """Generated ids without BOS and the trailing EOS."""
        out = self.tokens[1:]
        return out[:-1] if out and out[-1] == EOS else out


# step_fn(tokens [K], state_rows [K]) -> (log-probs [K, V], new_state)
StepFn = Callable[[np.ndarray, object], tuple[np.ndarray, object]]


def beam_search(step_fn: StepFn, init_state, beam: int = 5, max_len: int = 30,
                bos: int = BOS, eos: int | None = EOS, banned=(PAD, BOS),
                select_state: Callable = None) -> list[Hypothesis]:
    """Length-capped beam search over one input.

    ``step_fn`` maps the last tokens of the live hypotheses (and their state
    batch) to log-probabilities; ``select_state(state, rows)`` reorders a
    state batch.  Finished hypotheses stay in the beam and compete on total
    log-probability.  Ties go to the earlier candidate (finished hypotheses
    first, then expansions by hypothesis rank and token id), so width 1 is
    greedy argmax with lowest-index tie-break.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    select_state = select_state or (lambda s, rows: s[rows])
    hyps = [Hypothesis([bos], 0.0, 0)]
    state = init_state
    for _ in range(max_len):
        live = [h for h in hyps if not h.finished]
        if not live:
            break
        rows = np.array([h.state for h in live])
        lp, new_state = step_fn(np.array([h.tokens[-1] for h in live]), select_state(state, rows))
        lp = np.array(lp, dtype=np.float64)
        for b in banned:
            if b is not None and b < lp.shape[1]:
                lp[:, b] = -np.inf
        cands = [(h.logprob, 0, i, -1, h) for i, h in enumerate(hyps) if h.finished]
        V = lp.shape[1]
        for k, h in enumerate(live):
            scores = h.logprob + lp[k]
            # only the best `beam` tokens of one hypothesis can survive
            top = np.argsort(-scores, kind="stable")[:beam]
            for tok in top:
                if np.isfinite(scores[tok]):
                    cands.append((float(scores[tok]), 1, k * V + int(tok), k, h))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new = []
        for score, kind, order, k, h in cands[:beam]:
            if kind == 0:
                new.append(h)
                continue
            tok = order - k * V
            toks = h.tokens + [tok]
            new.append(Hypothesis(toks, score, ("new", k), tok == eos or len(toks) - 1 >= max_len,
                                  h.token_logprobs + [float(lp[k, tok])]))
        # re-key state rows: finished hyps keep no live state
        keep = [h.state[1] for h in new if isinstance(h.state, tuple)]
        if keep:
            state = select_state(new_state, np.array(keep))
        for i, h in enumerate([h for h in new if isinstance(h.state, tuple)]):
            h.state = i
        hyps = new
    return sorted(hyps, key=lambda h: -h.logprob)


def greedy_reference(step_fn: StepFn, init_state, max_len: int, bos=BOS, eos=EOS, banned=(PAD, BOS),
                     select_state=None) -> list[int]:
    """Plain argmax loop (no beam bookkeeping); returns tokens including BOS."""
    select_state = select_state or (lambda s, rows: s[rows])
    toks = [bos]
    state = select_state(init_state, np.array([0]))
    for _ in range(max_len):
        lp, state = step_fn(np.array([toks[-1]]), state)
        row = np.array(lp[0], dtype=np.float64)
        for b in banned:
            if b is not None and b < row.size:
                row[b] = -np.inf
        tok = int(np.argmax(row))
        toks.append(tok)
        if tok == eos:
            break
    return toks


# model glue ---------------------------------------------------------------------

class ModelStepper:
    """Adapts the summarizer decoder to the ``step_fn`` interface for one batch of proposals."""

    def __init__(self, params: SummarizerParams, batch: Batch):
        self.params = params
        ctx, _ = build_decoder_context(batch, params)
        self.ctx = ctx

    def init_state(self, row: int):
        h, c = initial_state(1, self.params.cfg.hidden)
        return (self.ctx.select([row]), h.data, c.data)

    @staticmethod
    def select(state, rows):
        ctx, h, c = state
        return (ctx.select(rows), h[rows], c[rows])

    def step(self, tokens, state):
        ctx, h, c = state
        h2, c2, logits = decoder_step(ctx, tokens, Tensor(h), Tensor(c))
        lp = T.log_softmax(logits).data
        return lp, (ctx, h2.data, c2.data)


def decode_batch(params: SummarizerParams, batch: Batch, beam: int = 5, max_len: int = 30) -> list[Hypothesis]:
    """Best hypothesis per proposal."""
    stepper = ModelStepper(params, batch)
    out = []
    for i in range(batch.size):
        hyps = beam_search(stepper.step, stepper.init_state(i), beam, max_len, select_state=stepper.select)
        out.append(hyps[0])
    return out


def greedy_batch(params: SummarizerParams, batch: Batch, max_len: int = 30) -> list[list[int]]:
    """Vectorised greedy decode of a whole batch; returns generated ids (no BOS/EOS)."""
    return sample_batch(params, batch, max_len, rng=None)[0]


def sample_batch(params: SummarizerParams, batch: Batch, max_len: int = 30, rng: np.random.Generator | None = None):
    """Ancestral sampling (or greedy when ``rng`` is None), all proposals at once.

    Returns ``(ids_per_proposal, ended_with_eos)``.
    """
    ctx, _ = build_decoder_context(batch, params)
    B = batch.size
    h, c = initial_state(B, params.cfg.hidden)
    prev = np.full(B, BOS)
    done = np.zeros(B, dtype=bool)
    seqs: list[list[int]] = [[] for _ in range(B)]
    eos = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        h, c, logits = decoder_step(ctx, prev, h, c)
        lp = T.log_softmax(logits).data.copy()
        lp[:, PAD] = -np.inf
        lp[:, BOS] = -np.inf
        if rng is None:
            tok = np.argmax(lp, axis=1)
        else:
            p = np.exp(lp)
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random(B)[:, None]
            tok = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
        for b in range(B):
            if done[b]:
                continue
            if tok[b] == EOS:
                done[b] = eos[b] = True
            else:
                seqs[b].append(int(tok[b]))
        if done.all():
            break
        prev = np.where(done, PAD, tok)
    return seqs, eos


def segment_batch(features) -> Batch:
    """One single-feature proposal per segment, for the decoder-only (TA) model."""
    V = np.stack([np.asarray(f, dtype=np.float64) for f in features])[:, None, :]
    empty = np.zeros((V.shape[0], 0), dtype=np.int64)
    return Batch(V, empty, empty.astype(bool))


def score_sentences(params: SummarizerParams, features, sentences) -> list[list[float]]:
    """Teacher-forced log-probability of each word of ``sentences[i]`` given ``features[i]``.

    ``sentences`` are id lists without BOS/EOS; the end token is not scored.
    """
    if params.cfg.attention != "none":
        raise ValueError("score_sentences needs a decoder-only (TA) model")
    batch = segment_batch(features)
    L = max(len(s) for s in sentences) + 2
    tgt = np.full((batch.size, L), PAD, dtype=np.int64)
    for i, s in enumerate(sentences):
        tgt[i, : len(s) + 2] = [BOS, *s, EOS]
    batch.targets = tgt
    logits, _ = forward_teacher_forced(batch, params)
    lp = T.log_softmax(logits).data
    return [[float(lp[i, t, w]) for t, w in enumerate(s)] for i, s in enumerate(sentences)]


# division-output baselines --------------------------------------------------------

def confidence(probs) -> float:
    """Mean log-probability of a sentence's words."""
    if len(probs) == 0:
        raise ValueError("confidence of an empty sentence")
    return sum(math.log(p) for p in probs) / len(probs)


def dm_best_select(sentences, probs) -> int:
    """Index of the sentence with the highest mean word log-probability (first on ties)."""
    if not sentences:
        raise ValueError("dm_best_select: no sentences")
    if len(sentences) != len(probs):
        raise ValueError("dm_best_select: one probability list per sentence required")
    best, best_score = 0, -math.inf
    for i, (s, p) in enumerate(zip(sentences, probs)):
        if len(s) != len(p) or not s:
            raise ValueError(f"sentence {i}: needs one probability per word")
        score = confidence(p)
        if score > best_score:
            best, best_score = i, score
    return best


def dm_ave_score(sentences, references, metric) -> float:
    """Mean of ``metric(sentence, references)`` over the division sentences."""
    if not sentences:
        raise ValueError("dm_ave_score: no sentences")
    return sum(metric(s, references) for s in sentences) / len(sentences)
