"""Losses, Adam with a step-decay schedule, self-critical fine-tuning and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .data import make_batch, minibatches
from .decode import decode_batch, sample_batch
from .metrics import CiderD, bleu, meteor_lite
from .model import Batch, SummarizerParams, forward_teacher_forced
from .tensor import Tape, Tensor
from .vocab import BOS, EOS, PAD, Vocabulary, normalize_tokens

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    lr_decay: float = 1.25
    decay_every: int = 3
    batch_size: int = 32
    lambda_d: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    epochs: int = 10
    seed: int = 0
    mode: str = "xent"
    beam: int = 5
    max_len: int = 30
    val_beam: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be non-negative")
        if self.mode not in ("xent", "scst"):
            raise ValueError(f"mode must be xent or scst, got {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)


# losses -----------------------------------------------------------------------

def sequence_ce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked steps."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits steps {logits.shape[:-1]} != targets {targets.shape}")
    mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("sequence_ce_loss: every step is masked")
    pick = np.zeros(logits.shape)
    np.put_along_axis(pick, targets[..., None], 1.0, axis=-1)
    pick *= mask[..., None] / n
    return -T.tsum(T.log_softmax(logits) * pick)


def occurrence_targets(target_ids, vocab_size: int) -> np.ndarray:
    """Bag-of-words indicators of a target sentence (PAD/BOS/EOS excluded)."""
    target_ids = np.atleast_2d(np.asarray(target_ids))
    y = np.zeros((target_ids.shape[0], vocab_size))
    for b, row in enumerate(target_ids):
        for w in row:
            if w not in (PAD, BOS, EOS):
                y[b, w] = 1.0
    return y


def discriminative_loss(bow_logits: Tensor, indicators) -> Tensor:
    """Mean binary cross-entropy of sigmoid(bow_logits) against word occurrences."""
    y = np.asarray(indicators, dtype=np.float64).reshape(bow_logits.shape)
    return T.mean(T.softplus(bow_logits) - bow_logits * y)


def combined_loss(ce, ld, lambda_d: float):
    return ce + lambda_d * ld


def batch_losses(batch: Batch, params: SummarizerParams, lambda_d: float, rng=None, encoded=None):
    """Teacher-forced ``(total, ce, ld)``; ``ld`` is None in TA mode."""
    logits, bow = forward_teacher_forced(batch, params, rng, encoded=encoded)
    tgt = batch.targets[:, 1:]
    ce = sequence_ce_loss(logits, tgt, tgt != PAD)
    if bow is None:
        return ce, ce, None
    ld = discriminative_loss(bow, occurrence_targets(batch.targets, params.cfg.vocab_size))
    return combined_loss(ce, ld, lambda_d), ce, ld


# optimisation -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(params: dict, grads: dict, state: OptimizerState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam step with bias-corrected moments.  ``params`` maps name -> Tensor."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        # lr * m_hat / (sqrt(v_hat) + eps), bias corrections folded into scalars
        denom = np.sqrt(v)
        denom /= math.sqrt(1 - beta2 ** t)
        denom += eps
        p.data -= (lr / (1 - beta1 ** t)) * m / denom


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr / cfg.lr_decay ** (epoch // cfg.decay_every)


def clip_grads(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def collect_grads(params: SummarizerParams) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.named().items()}


class Trainer:
    """Owns parameters and optimiser state; one ``step`` is one Adam update."""

    def __init__(self, params: SummarizerParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.opt = OptimizerState()
        self.rng = np.random.default_rng(cfg.seed)

    def _apply(self, lr: float) -> None:
        grads = collect_grads(self.params)
        norm = clip_grads(grads, self.cfg.clip_norm)
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient norm")
        adam_update(self.params.named(), grads, self.opt, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)

    def xent_step(self, batch: Batch, lr: float, dropout: bool = True) -> tuple[float, float | None]:
        self.params.zero_grad()
        with Tape() as tape:
            loss, ce, ld = batch_losses(batch, self.params, self.cfg.lambda_d, self.rng if dropout else None)
        if not math.isfinite(loss.item()):
            raise NumericalError(f"loss became {loss.item()}")
        tape.backward(loss)
        self._apply(lr)
        return ce.item(), None if ld is None else ld.item()

    def scst_step(self, batch: Batch, references, reward_fn, vocab: Vocabulary, lr: float) -> dict:
        self.params.zero_grad()
        info = scst_gradient(self.params, batch, references, reward_fn, vocab, self.rng, self.cfg.max_len)
        self._apply(lr)
        return info


# self-critical fine-tuning -----------------------------------------------------------

def bleu4_reward(candidate, references) -> float:
    """Smoothed sentence BLEU-4; the default self-critical reward."""
    return bleu(candidate, references, 4, smooth=True) if candidate else 0.0


def meteor_reward(candidate, references) -> float:
    return meteor_lite(candidate, references)


def scst_gradient(params: SummarizerParams, batch: Batch, references, reward_fn: Callable,
                  vocab: Vocabulary, rng: np.random.Generator, max_len: int = 30) -> dict:
    """Accumulate the self-critical policy gradient into ``params``' grads.

    One sampled sentence per proposal, greedy decode as baseline, loss
    ``-(r_sample - r_greedy) * sum log p(sampled tokens)`` averaged over the
    batch.  Returns rewards for logging.
    """
    B = batch.size
    samples, ended = sample_batch(params, batch, max_len, rng)
    empty = [b for b in range(B) if not samples[b]]
    if empty:
        again, again_eos = sample_batch(params, batch.select(empty), max_len, rng)
        for j, b in enumerate(empty):
            samples[b], ended[b] = again[j], again_eos[j]
    greedy, _ = sample_batch(params, batch, max_len, None)
    r_s = np.array([reward_fn(vocab.decode(s), references[b]) for b, s in enumerate(samples)])
    r_g = np.array([reward_fn(vocab.decode(g), references[b]) for b, g in enumerate(greedy)])
    adv = r_s - r_g
    for b in range(B):
        if not samples[b]:
            log.warning("scst: proposal %d produced two empty samples, skipped", b)
            adv[b] = 0.0
    seqs = [[BOS] + s + ([EOS] if ended[b] else []) for b, s in enumerate(samples)]
    L = max(len(s) for s in seqs)
    tgt = np.full((B, L), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        tgt[b, : len(s)] = s
    # score under the distribution actually sampled from: PAD and BOS are never drawn
    allowed = np.ones(params.cfg.vocab_size, dtype=bool)
    allowed[[PAD, BOS]] = False
    bi, ti = np.nonzero(tgt[:, 1:] != PAD)
    with Tape() as tape:
        logits, _ = forward_teacher_forced(Batch(batch.V, batch.words, batch.word_mask, tgt), params)
        lp = T.log_softmax(logits, mask=allowed)
        picked = T.index(lp, (bi, ti, tgt[bi, ti + 1]))
        loss = T.tsum(picked * (-adv / B)[bi])
    tape.backward(loss)
    return {"reward_sample": r_s, "reward_greedy": r_g, "advantage": adv, "loss": loss.item()}


# loop --------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_ce: float
    train_ld: float
    val_meteor: float
    val_cider: float

    def line(self) -> str:
        return "\t".join([str(self.epoch), f"{self.lr:.6g}", f"{self.train_ce:.6f}", f"{self.train_ld:.6f}",
                          f"{self.val_meteor:.6f}", f"{self.val_cider:.6f}"])


@dataclass
class TrainResult:
    params: SummarizerParams
    best_params: SummarizerParams
    log: list[EpochLog]
    steps: int
    best_epoch: int


def validate(params: SummarizerParams, records, vocab: Vocabulary, beam: int, max_len: int) -> tuple[float, float]:
    """Mean METEOR-lite and CIDEr-D of decoded sentences against record references."""
    if not records:
        return 0.0, 0.0
    batch = make_batch(records, vocab, params.cfg, with_targets=False)
    hyps = decode_batch(params, batch, beam=beam, max_len=max_len)
    refs = [[normalize_tokens(r) for r in rec.references] for rec in records]
    cands = [vocab.decode(h.words) for h in hyps]
    met = sum(meteor_lite(c, r) for c, r in zip(cands, refs)) / len(records)
    cider = CiderD(refs)
    cid = sum(cider.score(c, r) for c, r in zip(cands, refs)) / len(records)
    return met, cid


def train_loop(records, vocab: Vocabulary, params: SummarizerParams, cfg: TrainConfig,
               val_records=None, reward_fn: Callable = bleu4_reward, on_epoch: Callable | None = None) -> TrainResult:
    """Seeded mini-batch training; keeps the parameters with the best validation METEOR-lite."""
    records = list(records)
    if not records:
        raise ValueError("train_loop: empty dataset")
    val_records = records if val_records is None else list(val_records)
    trainer = Trainer(params, cfg)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    refs_all = [[normalize_tokens(r) for r in rec.references] for rec in records]
    history: list[EpochLog] = []
    best, best_score, best_epoch = params.copy(), -math.inf, -1
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        ce_sum = ld_sum = 0.0
        nb = 0
        for idx in minibatches(len(records), cfg.batch_size, shuffle_rng):
            batch = make_batch([records[i] for i in idx], vocab, params.cfg, max_target_len=cfg.max_len)
            if cfg.mode == "xent":
                ce, ld = trainer.xent_step(batch, lr)
            else:
                trainer.scst_step(batch, [refs_all[i] for i in idx], reward_fn, vocab, lr)
                # the log keeps its CE column: teacher-forced CE after the update
                ce, ld = batch_losses(batch, params, 0.0)[1].item(), None
            ce_sum += ce
            ld_sum += ld or 0.0
            nb += 1
        met, cid = validate(params, val_records, vocab, cfg.val_beam, cfg.max_len)
        entry = EpochLog(epoch, lr, ce_sum / nb, ld_sum / nb, met, cid)
        history.append(entry)
        log.info("epoch %s", entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        if met > best_score:
            best, best_score, best_epoch = params.copy(), met, epoch
    return TrainResult(params, best, history, trainer.opt.step, best_epoch)


def sweep(records, vocab: Vocabulary, model_cfg, train_cfg: TrainConfig, axis: str, values,
          val_records=None) -> list[dict]:
    """Train one fresh model per value of a single hyperparameter.

    ``axis`` names a ``TrainConfig`` field (e.g. ``lambda_d``) or a
    ``SummarizerConfig`` field (e.g. ``n_segments``).  Returns one row per
    value with the last epoch's losses and validation scores.
    """
    from dataclasses import replace

    rows = []
    train_fields = {f.name for f in fields(TrainConfig)}
    for value in values:
        mcfg, tcfg = model_cfg, train_cfg
        if axis in train_fields:
            tcfg = replace(train_cfg, **{axis: value})
        else:
            mcfg = replace(model_cfg, **{axis: value})
        params = SummarizerParams.init(mcfg, seed=tcfg.seed)
        result = train_loop(records, vocab, params, tcfg, val_records)
        last = result.log[-1]
        rows.append({"axis": axis, "value": value, "train_ce": last.train_ce, "train_ld": last.train_ld,
                     "val_meteor": last.val_meteor, "val_cider": last.val_cider, "steps": result.steps})
    return rows
