"""Caption metrics and the IoU-thresholded dense-captioning evaluation.

Sentences are token lists.  BLEU follows Papineni (clipped n-gram precision,
geometric mean, brevity penalty against the closest reference length).
ROUGE-L is the LCS F-measure with beta = 1.2.  METEOR here is a reduced
variant ("METEOR-lite"): exact then Porter-stem unigram matching with the
standard fragmentation penalty, no synonym or paraphrase stages, so values
are not comparable with the official jar.  CIDEr-D follows the coco-caption
reference code (TF-IDF n-gram vectors, clipped similarity, Gaussian length
penalty with sigma 6, scaled by 10).
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

log = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
METRIC_NAMES = ("Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "ROUGE_L", "METEOR", "CIDEr-D")


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# BLEU -----------------------------------------------------------------------

def _closest_ref_len(c: int, refs) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _clipped(cand, refs, k: int) -> tuple[int, int]:
    cc = ngrams(cand, k)
    max_ref: dict = defaultdict(int)
    for r in refs:
        for g, n in ngrams(r, k).items():
            max_ref[g] = max(max_ref[g], n)
    return sum(min(n, max_ref[g]) for g, n in cc.items()), max(len(cand) - k + 1, 0)


def bleu(candidate, references, n: int = 4, smooth: bool = False) -> float:
    """Sentence-level BLEU-n.

    Unsmoothed, any zero precision gives 0.  ``smooth`` adds one to the
    matched and total counts of orders 2..n (Lin & Och), which is what the
    self-critical reward uses.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    if not references:
        raise ValueError("bleu needs at least one reference")
    if not candidate:
        log.warning("bleu: empty candidate scores 0")
        return 0.0
    logp = 0.0
    for k in range(1, n + 1):
        hit, tot = _clipped(candidate, references, k)
        if smooth and k > 1:
            hit, tot = hit + 1, tot + 1
        if hit == 0 or tot == 0:
            return 0.0
        logp += math.log(hit / tot)
    c, r = len(candidate), _closest_ref_len(len(candidate), references)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(logp / n)


def corpus_bleu(candidates, references_list, n: int = 4) -> float:
    """Corpus BLEU-n: counts and lengths pooled before taking the ratio."""
    hits = [0] * n
    tots = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        for k in range(1, n + 1):
            h, t = _clipped(cand, refs, k)
            hits[k - 1] += h
            tots[k - 1] += t
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    if c_len == 0 or any(h == 0 for h in hits):
        return 0.0
    logp = sum(math.log(h / t) for h, t in zip(hits, tots)) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(logp)


# ROUGE-L --------------------------------------------------------------------

def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    best = 0.0
    for ref in references:
        if not candidate or not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


# METEOR-lite ------------------------------------------------------------------

_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word)


def align(candidate, reference) -> list[tuple[int, int]]:
    """Unigram alignment: exact matches first, then stem matches on what is left.

    Within a stage each candidate word (left to right) takes the reference
    position right after the previous match when it can, else the earliest
    free one; that keeps the match count maximal and chunks low.
    """
    pairs: list[tuple[int, int]] = []
    used_c: set[int] = set()
    used_r: set[int] = set()
    for key in (lambda w: w, stem):
        rkeys = [key(w) for w in reference]
        last_r = None
        for i, w in enumerate(candidate):
            if i in used_c:
                last_r = dict(pairs).get(i, last_r)
                continue
            k = key(w)
            free = [j for j, rk in enumerate(rkeys) if rk == k and j not in used_r]
            if not free:
                continue
            j = last_r + 1 if last_r is not None and last_r + 1 in free else free[0]
            pairs.append((i, j))
            used_c.add(i)
            used_r.add(j)
            last_r = j
    return sorted(pairs)


def count_chunks(pairs) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_lite(candidate, references, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    best = 0.0
    for ref in references:
        pairs = align(candidate, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        penalty = gamma * (count_chunks(pairs) / m) ** beta
        best = max(best, fmean * (1 - penalty))
    return best


# CIDEr-D --------------------------------------------------------------------

def _cook(tokens, n: int) -> Counter:
    out: Counter = Counter()
    for k in range(1, n + 1):
        out.update(ngrams(tokens, k))
    return out


class CiderD:
    """CIDEr-D with document frequencies from a fixed reference corpus."""

    def __init__(self, corpus_refs, n: int = 4, sigma: float = 6.0):
        corpus_refs = list(corpus_refs)
        if not corpus_refs:
            raise ValueError("CIDEr-D needs a nonempty reference corpus")
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in corpus_refs:
            self.df.update(set(g for r in refs for g in _cook(r, n)))
        self.log_n_docs = math.log(float(len(corpus_refs)))

    def _vec(self, tokens):
        vec = [dict() for _ in range(self.n)]
        norm = [0.0] * self.n
        for g, tf in _cook(tokens, self.n).items():
            k = len(g) - 1
            df = math.log(max(1.0, self.df[g]))
            vec[k][g] = float(tf) * (self.log_n_docs - df)
            norm[k] += vec[k][g] ** 2
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    def _sim(self, hyp, ref) -> list[float]:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        delta = float(lh - lr)
        val = [0.0] * self.n
        for k in range(self.n):
            for g, x in vh[k].items():
                y = vr[k].get(g, 0.0)
                val[k] += min(x, y) * y
            if nh[k] != 0 and nr[k] != 0:
                val[k] /= nh[k] * nr[k]
            val[k] *= math.e ** (-(delta ** 2) / (2 * self.sigma ** 2))
        return val

    def score(self, candidate, references) -> float:
        hyp = self._vec(candidate)
        total = [0.0] * self.n
        for r in references:
            for k, v in enumerate(self._sim(hyp, self._vec(r))):
                total[k] += v
        return 10.0 * (sum(total) / self.n) / len(references)


def cider_d(candidates, references_list, n: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-candidate CIDEr-D with the given references as the df corpus."""
    scorer = CiderD(references_list, n=n, sigma=sigma)
    return [scorer.score(c, refs) for c, refs in zip(candidates, references_list)]


# dense captioning evaluation -----------------------------------------------------

def temporal_iou(a, b) -> float:
    (a0, a1), (b0, b1) = a, b
    if not (a0 < a1 and b0 < b1):
        raise ValueError(f"degenerate interval in temporal_iou: {a}, {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union


def sentence_scores(candidate, references, cider: CiderD | None = None) -> dict[str, float]:
    out = {f"Bleu_{k}": bleu(candidate, references, k) if candidate else 0.0 for k in range(1, 5)}
    out["ROUGE_L"] = rouge_l(candidate, references)
    out["METEOR"] = meteor_lite(candidate, references)
    out["CIDEr-D"] = cider.score(candidate, references) if cider is not None else 0.0
    return out


@dataclass
class Prediction:
    video_id: str
    interval: tuple[float, float]
    tokens: list[str]


@dataclass
class GroundTruth:
    video_id: str
    interval: tuple[float, float]
    references: list[list[str]]


@dataclass
class EvalReport:
    thresholds: tuple = IOU_THRESHOLDS
    per_threshold: dict = field(default_factory=dict)  # thr -> metric -> score
    pair_counts: dict = field(default_factory=dict)  # thr -> matched pairs
    mean: dict = field(default_factory=dict)  # metric -> mean over thresholds
    pairing: str = "all"

    def to_dict(self) -> dict:
        return {
            "pairing": self.pairing,
            "thresholds": list(self.thresholds),
            "mean": self.mean,
            "per_threshold": {str(t): v for t, v in self.per_threshold.items()},
            "pair_counts": {str(t): v for t, v in self.pair_counts.items()},
        }

    def table(self) -> str:
        head = f"{'tIoU':>6} " + " ".join(f"{m:>8}" for m in METRIC_NAMES) + f" {'pairs':>6}"
        lines = [f"# pairing={self.pairing}: every (prediction, GT with tIoU >= thr) pair scored; "
                 "unmatched predictions score 0", head]
        for t in self.thresholds:
            row = self.per_threshold[t]
            lines.append(f"{t:>6.1f} " + " ".join(f"{row[m]:8.4f}" for m in METRIC_NAMES)
                         + f" {self.pair_counts[t]:>6d}")
        lines.append(f"{'mean':>6} " + " ".join(f"{self.mean[m]:8.4f}" for m in METRIC_NAMES))
        return "\n".join(lines)


def dense_eval(predictions, ground_truth, thresholds=IOU_THRESHOLDS, pairing: str = "all") -> EvalReport:
    """Score predictions against temporally overlapping ground-truth events.

    ``pairing="all"`` averages over every (prediction, GT) pair whose tIoU
    reaches the threshold; ``"best"`` keeps, per prediction and metric, the
    best score over its matched GT events.  Predictions that match nothing
    contribute zeros.
    """
    ground_truth = list(ground_truth)
    predictions = list(predictions)
    if not ground_truth:
        raise ValueError("dense_eval needs at least one ground-truth event")
    if pairing not in ("all", "best"):
        raise ValueError(f"pairing must be 'all' or 'best', got {pairing!r}")
    report = EvalReport(thresholds=tuple(thresholds), pairing=pairing)
    if not predictions:
        log.warning("dense_eval: no predictions, every score is 0")
    cider = CiderD([g.references for g in ground_truth])
    by_video: dict = defaultdict(list)
    for g in ground_truth:
        by_video[g.video_id].append(g)
    cache: dict = {}
    zero = {m: 0.0 for m in METRIC_NAMES}
    for thr in report.thresholds:
        rows = []
        pairs = 0
        for pi, p in enumerate(predictions):
            matched = []
            for gi, g in enumerate(by_video.get(p.video_id, [])):
                if temporal_iou(p.interval, g.interval) >= thr:
                    key = (pi, p.video_id, gi)
                    if key not in cache:
                        cache[key] = sentence_scores(p.tokens, g.references, cider)
                    matched.append(cache[key])
            pairs += len(matched)
            if not matched:
                rows.append(zero)
            elif pairing == "all":
                rows.extend(matched)
            else:
                rows.append({m: max(s[m] for s in matched) for m in METRIC_NAMES})
        report.per_threshold[thr] = {m: (sum(r[m] for r in rows) / len(rows) if rows else 0.0)
                                     for m in METRIC_NAMES}
        report.pair_counts[thr] = pairs
    report.mean = {m: sum(report.per_threshold[t][m] for t in report.thresholds) / len(report.thresholds)
                   for m in METRIC_NAMES}
    return report
