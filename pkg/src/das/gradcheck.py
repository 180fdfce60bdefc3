"""Central finite-difference checks of backprop gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import Batch, SummarizerConfig, SummarizerParams
from . import tensor as T
from .tensor import Tape, Tensor
from .vocab import BOS, EOS, PAD

TINY = dict(n_segments=3, n_words=4, feat_dim=8, hidden=16, embed_dim=16, vocab_size=20)


@dataclass
class GradcheckReport:
    tol: float
    errors: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        w = max((len(k) for k in self.errors), default=4)
        return [f"{k:<{w}}  {e:.3e}  {'ok' if e <= self.tol else 'FAIL'}" for k, e in self.errors.items()]


def relative_error(bp: np.ndarray, fd: np.ndarray) -> np.ndarray:
    return np.abs(bp - fd) / np.maximum(np.maximum(np.abs(bp), np.abs(fd)), 1e-8)


def _central_differences(f, t: Tensor, entries, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + h
        up = f().data[()]
        flat[i] = orig - h
        down = f().data[()]
        flat[i] = orig
        out[j] = (up - down) / (2 * h)
    return out


def gradcheck(f: Callable[[], Tensor], inputs: dict, h: float = 1e-5, tol: float = 1e-6,
              grad_hook: Callable[[dict], dict] | None = None, refine: bool = True) -> GradcheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``inputs`` maps names to leaf tensors that ``f`` reads; they are
    perturbed in place one entry at a time and restored.  ``grad_hook`` may
    rewrite the backprop gradients first (negative controls).

    With ``refine``, entries within a factor 10 of ``tol`` (or over it) in
    float64 have their difference quotient recomputed in long double.
    Forward-pass rounding (about 1e-16 of the loss, divided by ``2h``)
    otherwise swamps gradients near the 1e-8 floor.
    """
    for t in inputs.values():
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    bp = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}
    if grad_hook is not None:
        bp = grad_hook(bp)
    report = GradcheckReport(tol=tol)
    for name, t in inputs.items():
        if not t.data.size:
            report.errors[name] = 0.0
            continue
        fd = _central_differences(f, t, range(t.data.size), h)
        err = relative_error(bp[name].reshape(-1), fd)
        bad = np.flatnonzero(~(err <= 0.1 * tol))
        if refine and bad.size:
            saved = {k: u.data for k, u in inputs.items()}
            try:
                for u in inputs.values():
                    u.data = u.data.astype(np.longdouble)
                fd[bad] = _central_differences(f, t, bad, h)
            finally:
                for k, u in inputs.items():
                    u.data = saved[k]
            err = relative_error(bp[name].reshape(-1), fd)
        report.errors[name] = float(err.max())
    return report


def random_batch(cfg: SummarizerConfig, rng: np.random.Generator, batch_size: int = 2,
                 target_len: int = 5, pad_fraction: float = 0.25) -> Batch:
    """Random proposals with some padded word cells and ragged targets."""
    V = rng.normal(size=(batch_size, cfg.n_segments, cfg.feat_dim))
    words = rng.integers(4, cfg.vocab_size, size=(batch_size, cfg.encoder_length))
    mask = np.ones_like(words, dtype=bool)
    per = mask.reshape(batch_size, cfg.n_segments, cfg.n_words)
    lens = rng.integers(1, cfg.n_words + 1, size=(batch_size, cfg.n_segments))
    lens[rng.random(lens.shape) > pad_fraction] = cfg.n_words
    for b in range(batch_size):
        for s in range(cfg.n_segments):
            per[b, s, lens[b, s]:] = False
    words = np.where(mask, words, PAD)
    tgt = np.full((batch_size, target_len + 2), PAD, dtype=np.int64)
    for b in range(batch_size):
        n = target_len if b == 0 else int(rng.integers(1, target_len + 1))
        tgt[b, 0] = BOS
        tgt[b, 1:n + 1] = rng.integers(4, cfg.vocab_size, size=n)
        tgt[b, n + 1] = EOS
    return Batch(V, words, mask, tgt)


def model_gradcheck(mode: str = "HA", seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                    lambda_d: float = 0.1, inject_bug: bool = False, scale: float | None = 0.5,
                    batch_size: int = 2, **overrides) -> GradcheckReport:
    """Full-model check of the combined loss on the tiny configuration.

    Parameters are redrawn uniform in ``[-scale, scale]`` (biases included)
    so the point is generic; at the small training init (``scale=None``)
    many gradients sit near the rounding floor and the check is slower.
    Finite-difference passes that only move decoder parameters reuse the
    cached encoder output.
    """
    from .model import ENCODER_GROUPS, FUSION_GROUPS, encode, encode_fusion
    from .train import batch_losses

    cfg = SummarizerConfig(**{**TINY, **overrides, "attention": mode})
    params = SummarizerParams.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    named = params.named()
    if scale is not None:
        for t in named.values():
            t.data[...] = rng.uniform(-scale, scale, t.shape)
    batch = random_batch(cfg, rng, batch_size=batch_size)

    def stage(groups):
        return [t for k, t in named.items() if k.split(".")[0] in groups]

    fusion_tensors, enc_tensors = stage(FUSION_GROUPS), stage(ENCODER_GROUPS)
    cache: dict = {}

    def cached(name, tensors, compute):
        key = b"".join(t.data.tobytes() for t in tensors)
        if cache.get(name, (None,))[0] != key:
            cache[name] = (key, compute())
        return cache[name][1]

    def loss():
        if T.active_tape() is not None:
            return batch_losses(batch, params, lambda_d)[0]
        fused = None
        if cfg.attention != "none":
            fused = cached("fusion", fusion_tensors, lambda: encode_fusion(batch, params))
        encoded = cached("encoder", enc_tensors, lambda: encode(batch, params, fused=fused))
        return batch_losses(batch, params, lambda_d, encoded=encoded)[0]

    hook = None
    if inject_bug:
        def hook(g):
            return {k: (v * 2.0 if k == "out" else v) for k, v in g.items()}
    return gradcheck(loss, named, h=h, tol=tol, grad_hook=hook)
