import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params, tiny_config
from das import tensor as T
from das.data import make_batch, synthetic_records, vocab_from_records
from das.decode import greedy_batch, segment_batch
from das.gradcheck import random_batch
from das.model import Batch, SummarizerParams, forward_teacher_forced
from das.tensor import Tape, Tensor
from das.train import (
    EpochLog, NumericalError, OptimizerState, TrainConfig, Trainer, adam_update, batch_losses, bleu4_reward,
    clip_grads, combined_loss, discriminative_loss, lr_at_epoch, occurrence_targets, scst_gradient,
    sequence_ce_loss, sweep, train_loop,
)
from das.vocab import BOS, EOS, PAD, Vocabulary


# cross-entropy ------------------------------------------------------------------

def test_ce_certain_targets_give_zero():
    tgt = np.array([[4, 7, 2]])
    logits = np.zeros((1, 3, 20))
    np.put_along_axis(logits, tgt[..., None], 1000.0, axis=-1)
    assert sequence_ce_loss(Tensor(logits), tgt).item() == 0.0


def test_ce_uniform_is_log_vocab():
    assert sequence_ce_loss(Tensor(np.zeros((2, 4, 20))), np.full((2, 4), 5)).item() == pytest.approx(
        math.log(20), abs=1e-15)
    assert math.log(20) == pytest.approx(2.9957, abs=1e-4)


def test_ce_ignores_masked_steps():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 6))
    tgt = rng.integers(0, 6, size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    base = sequence_ce_loss(Tensor(logits), tgt, mask).item()
    logits[~mask] = rng.normal(scale=50, size=((~mask).sum(), 6))
    assert sequence_ce_loss(Tensor(logits), tgt, mask).item() == base
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    oracle = -np.mean([lp[b, t, tgt[b, t]] for b in range(2) for t in range(3) if mask[b, t]])
    assert base == pytest.approx(oracle, abs=1e-12)


def test_ce_errors():
    with pytest.raises(ValueError):
        sequence_ce_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))
    with pytest.raises(ValueError):
        sequence_ce_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 3), int))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ce_non_negative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=10, size=(2, 3, 5))
    assert sequence_ce_loss(Tensor(logits), rng.integers(0, 5, size=(2, 3))).item() >= 0.0


# discriminative loss ------------------------------------------------------------

def test_bce_zero_logits_is_ln2():
    y = occurrence_targets([[BOS, 4, 5, 4, EOS, PAD]], 8)
    assert y.tolist() == [[0, 0, 0, 0, 1, 1, 0, 0]]
    assert discriminative_loss(Tensor(np.zeros((1, 8))), y).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_confident_match_is_near_zero():
    y = occurrence_targets([[BOS, 4, 6, EOS]], 8)
    assert discriminative_loss(Tensor(np.where(y > 0, 60.0, -60.0)), y).item() < 1e-25


def test_bce_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=3, size=(2, 7))
    y = (rng.random((2, 7)) < 0.4).astype(float)
    total = 0.0
    for b in range(2):
        for w in range(7):
            p = 1 / (1 + math.exp(-x[b, w]))
            total += -(y[b, w] * math.log(p) + (1 - y[b, w]) * math.log(1 - p))
    assert discriminative_loss(Tensor(x), y).item() == pytest.approx(total / 14, abs=1e-12)


def test_combined_loss_examples():
    assert combined_loss(1.7, 5.0, 0.0) == 1.7
    assert combined_loss(1.0, 2.0, 0.1) == pytest.approx(1.2, abs=1e-15)


def test_batch_losses_compose():
    cfg = tiny_config()
    p = random_params(cfg)
    b = random_batch(cfg, np.random.default_rng(0), 2)
    total, ce, ld = batch_losses(b, p, 0.3)
    assert total.item() == pytest.approx(ce.item() + 0.3 * ld.item(), abs=1e-14)
    ta = tiny_config("TA")
    total, ce, ld = batch_losses(random_batch(ta, np.random.default_rng(0), 2), random_params(ta), 0.3)
    assert ld is None and total is ce


# optimiser -----------------------------------------------------------------------

def test_adam_zero_gradient_is_a_no_op():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    st_ = OptimizerState()
    adam_update(p, {"w": np.zeros(2)}, st_, 0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert not st_.m["w"].any() and not st_.v["w"].any() and st_.step == 1


def test_adam_first_step():
    p = {"w": Tensor(np.array([0.0]))}
    adam_update(p, {"w": np.array([1.0])}, OptimizerState(), 3e-4)
    assert p["w"].data[0] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-14)


def test_adam_scalar_oracle_ten_steps():
    grads = [0.5, -1.0, 2.0, 0.1, -0.3, 0.0, 1.5, -2.5, 0.7, 0.2]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    x, m, v = 0.3, 0.0, 0.0
    p = {"w": Tensor(np.array([0.3]))}
    state = OptimizerState()
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        adam_update(p, {"w": np.array([g])}, state, lr)
        assert abs(p["w"].data[0] - x) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_update({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, OptimizerState(), 0.1)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 0.0003
    assert lr_at_epoch(2, cfg) == 0.0003
    assert lr_at_epoch(3, cfg) == pytest.approx(0.00024, rel=1e-12)
    assert lr_at_epoch(6, cfg) == pytest.approx(0.000192, rel=1e-12)
    rates = [lr_at_epoch(e, cfg) for e in range(30)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        lr_at_epoch(-1, cfg)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(g, 5.0) == 5.0 and g["a"][0] == 3.0
    assert clip_grads(g, 1.0) == 5.0
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(lambda_d=-0.1), dict(mode="rl")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.lr_decay, cfg.decay_every, cfg.batch_size, cfg.lambda_d) == (3e-4, 1.25, 3, 32, 0.1)
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm) == (0.9, 0.999, 1e-8, 5.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_non_finite_loss_raises():
    cfg = tiny_config()
    p = random_params(cfg)
    p.out.data[0, 0] = np.nan
    with pytest.raises(NumericalError):
        Trainer(p, TrainConfig()).xent_step(random_batch(cfg, np.random.default_rng(0), 1), 1e-3)


# self-critical ------------------------------------------------------------------

def _toy_policy():
    """Decoder-only model over PAD, BOS, EOS, UNK, w1, w2 with a 2-token horizon."""
    cfg = tiny_config("TA", n_segments=1, n_words=1, feat_dim=3, hidden=4, embed_dim=4, vocab_size=6,
                      att_width=3, mlp_width=4, fusion_dim=4)
    p = random_params(cfg, seed=5, scale=1.0)
    batch = segment_batch(np.random.default_rng(5).normal(size=(1, 3)))
    vocab = Vocabulary(["w", "x"])
    return p, batch, vocab


def _reward(sentence, refs):
    return sentence.count("w") - 0.5 * sentence.count("x") + 0.25 * len(sentence)


def _all_outcomes():
    """(generated ids, ended with EOS) for every sample of at most 2 tokens."""
    out = [([], True)]
    for a in (3, 4, 5):
        out.append(([a], True))
        for b in (3, 4, 5):
            out.append(([a, b], False))
    return out


def _logprob_and_grad(p, batch, ids, ended):
    seq = [BOS] + ids + ([EOS] if ended else [])
    b = Batch(batch.V, batch.words, batch.word_mask, np.array([seq]))
    p.zero_grad()
    with Tape() as tape:
        logits, _ = forward_teacher_forced(b, p)
        # sampling never draws PAD or BOS, so the policy renormalises over the rest
        allowed = np.ones(6, dtype=bool)
        allowed[[PAD, BOS]] = False
        lp = T.log_softmax(logits, mask=allowed)
        total = T.tsum(T.index(lp, (np.zeros(len(seq) - 1, int), np.arange(len(seq) - 1), np.array(seq[1:]))))
    tape.backward(total)
    return total.item(), {k: t.gradient.copy() for k, t in p.named().items()}


def test_scst_constant_reward_gives_zero_gradient():
    p, batch, vocab = _toy_policy()
    p.zero_grad()
    scst_gradient(p, batch.select(np.zeros(8, int)), [[["w"]]] * 8, lambda s, r: 0.7, vocab,
                  np.random.default_rng(0), max_len=2)
    assert all(not t.gradient.any() for t in p)


def test_scst_zero_advantage_gives_zero_gradient():
    p, batch, vocab = _toy_policy()
    p.zero_grad()
    info = scst_gradient(p, batch.select(np.zeros(8, int)), [[["w"]]] * 8, lambda s, r: float(len(s) > 0), vocab,
                         np.random.default_rng(1), max_len=2)
    assert not info["advantage"].any()
    assert all(not t.gradient.any() for t in p)


def test_scst_matches_exhaustive_expectation():
    p, batch, vocab = _toy_policy()
    outcomes = _all_outcomes()
    scored = [(ids, ended, *_logprob_and_grad(p, batch, ids, ended)) for ids, ended in outcomes]
    probs = np.array([math.exp(lp) for _, _, lp, _ in scored])
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    baseline = _reward(vocab.decode(greedy_batch(p, batch, max_len=2)[0]), None)
    p_empty = probs[0]
    # the estimator redraws an empty sample once, so non-empty outcomes carry weight p(s)(1 + p(empty))
    expected = {k: np.zeros_like(t.data) for k, t in p.named().items()}
    for (ids, ended, _, grad), prob in zip(scored[1:], probs[1:]):
        adv = _reward(vocab.decode(ids), None) - baseline
        for k in expected:
            expected[k] -= prob * (1 + p_empty) * adv * grad[k]

    n = 20000
    p.zero_grad()
    scst_gradient(p, batch.select(np.zeros(n, int)), [None] * n, _reward, vocab, np.random.default_rng(0),
                  max_len=2)
    est = {k: t.gradient for k, t in p.named().items()}
    flat_e = np.concatenate([expected[k].ravel() for k in expected])
    flat_m = np.concatenate([est[k].ravel() for k in expected])
    big = np.abs(flat_e) > 0.25 * np.abs(flat_e).max()
    assert big.sum() >= 5
    assert np.all(np.sign(flat_m[big]) == np.sign(flat_e[big]))
    assert np.corrcoef(flat_e, flat_m)[0, 1] > 0.95


def test_bleu4_reward():
    assert bleu4_reward([], [["a"]]) == 0.0
    assert bleu4_reward(["a", "man", "runs", "fast"], [["a", "man", "runs", "fast"]]) == pytest.approx(1.0)


# loop ----------------------------------------------------------------------------

def _toy_setup(n=1, epochs=1, **train):
    recs = synthetic_records(n_records=n, n_segments=2, feat_dim=4)
    vocab = vocab_from_records(recs, min_count=1)
    cfg = tiny_config("SA", n_segments=2, n_words=3, feat_dim=4, hidden=6, embed_dim=5, vocab_size=len(vocab),
                      att_width=4, mlp_width=6, fusion_dim=5)
    tcfg = TrainConfig(epochs=epochs, max_len=8, **train)
    return recs, vocab, cfg, tcfg


def test_one_proposal_one_epoch_is_one_step():
    recs, vocab, cfg, tcfg = _toy_setup()
    res = train_loop(recs, vocab, SummarizerParams.init(cfg), tcfg)
    assert res.steps == 1 and len(res.log) == 1


def test_seeded_loss_curve_is_reproducible():
    recs, vocab, cfg, tcfg = _toy_setup(n=5, epochs=3, batch_size=2)
    a = train_loop(recs, vocab, SummarizerParams.init(cfg, seed=1), tcfg)
    b = train_loop(recs, vocab, SummarizerParams.init(cfg, seed=1), tcfg)
    assert [e.line() for e in a.log] == [e.line() for e in b.log]
    assert a.steps == 9
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.params, b.params))


def test_empty_dataset_rejected():
    recs, vocab, cfg, tcfg = _toy_setup()
    with pytest.raises(ValueError):
        train_loop([], vocab, SummarizerParams.init(cfg), tcfg)


def test_epoch_log_line_has_six_tab_fields():
    line = EpochLog(3, 2.4e-4, 1.5, 0.2, 0.1, 0.05).line()
    fields = line.split("\t")
    assert len(fields) == 6 and fields[0] == "3" and float(fields[1]) == 2.4e-4


def test_scst_mode_runs_and_logs_ce():
    recs, vocab, cfg, tcfg = _toy_setup(n=2, mode="scst")
    res = train_loop(recs, vocab, SummarizerParams.init(cfg), tcfg)
    assert res.steps == 1 and res.log[0].train_ld == 0.0 and res.log[0].train_ce > 0


def test_sweep_rows():
    recs, vocab, cfg, tcfg = _toy_setup(n=2)
    rows = sweep(recs, vocab, cfg, tcfg, "lambda_d", [0.0, 1.0])
    assert [r["value"] for r in rows] == [0.0, 1.0] and all(r["steps"] == 1 for r in rows)
    rows = sweep(recs, vocab, cfg, tcfg, "n_segments", [1, 2])
    assert len(rows) == 2 and all(math.isfinite(r["train_ce"]) for r in rows)


def test_xent_step_reduces_loss_on_fixed_batch():
    recs, vocab, cfg, tcfg = _toy_setup(n=2)
    p = SummarizerParams.init(cfg)
    batch = make_batch(recs, vocab, cfg)
    trainer = Trainer(p, tcfg)
    first = trainer.xent_step(batch, 1e-2, dropout=False)[0]
    for _ in range(20):
        last = trainer.xent_step(batch, 1e-2, dropout=False)[0]
    assert last < first
