"""The summarization network: encoder-fusion, encoder-attention, decoder.

Everything runs on a batch axis.  A batch holds ``B`` proposals, each with
``N_m`` segment features, an ``N_m x N_k`` grid of word ids, and (for
training) a target sentence padded to a common length.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import AttentionParams, LstmParams, Mlp2Params, attend, embed, lstm_cell_step, mlp2, project_keys
from .tensor import ShapeError, Tensor
from .vocab import BOS, PAD

MODES = ("SA", "HA", "TA")
_ATTENTION_OF_MODE = {"SA": "simple", "HA": "hierarchical", "TA": "none"}
_MODE_OF_ATTENTION = {v: k for k, v in _ATTENTION_OF_MODE.items()}


@dataclass
class SummarizerConfig:
    n_segments: int = 20  # N_m
    n_words: int = 25  # N_k
    feat_dim: int = 500
    hidden: int = 512
    embed_dim: int = 512
    vocab_size: int = 7000
    attention: str = "hierarchical"
    keep_prob: float = 0.8
    att_width: int | None = None
    mlp_width: int | None = None
    fusion_dim: int | None = None
    visual_encoder: bool = True
    visual_decoder: bool = True

    def __post_init__(self):
        if self.attention in _ATTENTION_OF_MODE:
            self.attention = _ATTENTION_OF_MODE[self.attention]
        if self.attention not in _MODE_OF_ATTENTION:
            raise ValueError(f"attention must be one of simple/hierarchical/none, got {self.attention!r}")
        for name in ("n_segments", "n_words", "feat_dim", "hidden", "embed_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def mode(self) -> str:
        return _MODE_OF_ATTENTION[self.attention]

    @property
    def encoder_length(self) -> int:
        return self.n_segments * self.n_words

    @property
    def A(self) -> int:
        return self.att_width or self.hidden

    @property
    def M(self) -> int:
        return self.mlp_width or self.hidden

    @property
    def Z(self) -> int:
        return self.fusion_dim or self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SummarizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)


class SummarizerParams:
    """Named parameter set.  Groups a configuration does not use are absent."""

    def __init__(self, cfg: SummarizerConfig, groups: dict):
        self.cfg = cfg
        self.groups = groups

    def __getattr__(self, name):
        groups = self.__dict__.get("groups", {})
        if name in groups:
            return groups[name]
        raise AttributeError(name)

    @classmethod
    def init(cls, cfg: SummarizerConfig, seed: int = 0) -> "SummarizerParams":
        rng = np.random.default_rng(seed)
        D, H, E, Z, A, M, V = cfg.feat_dim, cfg.hidden, cfg.embed_dim, cfg.Z, cfg.A, cfg.M, cfg.vocab_size
        g: dict = {}
        g["embed"] = Tensor(rng.uniform(-0.08, 0.08, (V, E)), requires_grad=True, name="embed")
        if cfg.attention != "none":
            if cfg.visual_encoder:
                g["enc_vis_att"] = AttentionParams.init(rng, D, H, A, "enc_vis_att")
            g["mlp_e"] = Mlp2Params.init(rng, (D if cfg.visual_encoder else 0) + E, M, Z, "mlp_e")
            g["enc_lstm"] = LstmParams.init(rng, Z, H, "enc_lstm")
            if cfg.attention == "hierarchical":
                g["group_att"] = AttentionParams.init(rng, H, H, A, "group_att")
                g["hier_lstm"] = LstmParams.init(rng, H, H, "hier_lstm")
            g["ctx_att"] = AttentionParams.init(rng, H, H, A, "ctx_att")
            g["disc"] = Tensor(rng.uniform(-0.08, 0.08, (V, H)), requires_grad=True, name="disc")
        if cfg.visual_decoder:
            g["dec_vis_att"] = AttentionParams.init(rng, D, H, A, "dec_vis_att")
        dec_in = (D if cfg.visual_decoder else 0) + E + (H if cfg.attention != "none" else 0)
        g["mlp_d"] = Mlp2Params.init(rng, dec_in, M, Z, "mlp_d")
        g["dec_lstm"] = LstmParams.init(rng, Z, H, "dec_lstm")
        g["out"] = Tensor(rng.uniform(-0.08, 0.08, (V, H)), requires_grad=True, name="out")
        return cls(cfg, g)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for gname, grp in self.groups.items():
            if isinstance(grp, Tensor):
                out[gname] = grp
            else:
                for k, t in grp.tensors().items():
                    out[f"{gname}.{k}"] = t
        return out

    def __iter__(self):
        return iter(self.named().values())

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    def copy(self) -> "SummarizerParams":
        clone = SummarizerParams.init(self.cfg, seed=0)
        for (_, dst), (_, src) in zip(clone.named().items(), self.named().items()):
            dst.data[...] = src.data
        return clone


@dataclass
class EncoderOutput:
    Hf: Tensor  # [B, N_m*N_k, H]
    mask: np.ndarray  # [B, N_m*N_k] bool
    bow_logits: Tensor  # [B, N_v]


@dataclass
class Batch:
    V: np.ndarray  # [B, N_m, D]
    words: np.ndarray  # [B, N_m*N_k] int
    word_mask: np.ndarray  # [B, N_m*N_k] bool
    targets: np.ndarray | None = None  # [B, T] int, BOS ... EOS PAD*

    @property
    def size(self) -> int:
        return self.V.shape[0]

    def select(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            self.V[idx], self.words[idx], self.word_mask[idx],
            None if self.targets is None else self.targets[idx],
        )


@dataclass
class AttentionTrace:
    """Collects every attention weight vector of a forward pass (testing aid)."""

    records: list = field(default_factory=list)

    def add(self, where: str, weights: Tensor, mask) -> None:
        m = None if mask is None else np.broadcast_to(np.asarray(mask, bool), weights.shape)
        self.records.append((where, weights.data.copy(), None if m is None else m.copy()))


def _check_batch(batch: Batch, cfg: SummarizerConfig) -> None:
    B = batch.V.shape[0]
    if batch.V.shape[1:] != (cfg.n_segments, cfg.feat_dim):
        raise ShapeError(f"visual features {batch.V.shape[1:]} != (N_m={cfg.n_segments}, D={cfg.feat_dim})")
    if batch.words.shape != (B, cfg.encoder_length) or batch.word_mask.shape != batch.words.shape:
        raise ShapeError(
            f"word grid {batch.words.shape} does not match N_m*N_k={cfg.encoder_length} for batch {B}"
        )


def _drop(h: Tensor, cfg: SummarizerConfig, rng) -> Tensor:
    return T.dropout(h, cfg.keep_prob, rng)


def vtf_e_step(V: Tensor, w_t, h_prev: Tensor, params: SummarizerParams, vis_keys=None, trace=None) -> Tensor:
    """Fuse the attended visual feature with the embedding of the current word."""
    e = embed(w_t, params.embed)
    if not params.cfg.visual_encoder:
        return mlp2([e], params.mlp_e)
    vis, a = attend(V, h_prev, params.enc_vis_att, keys=vis_keys)
    if trace is not None:
        trace.add("vtf_e", a, None)
    return mlp2([vis, e], params.mlp_e)


def encode_fusion(batch: Batch, params: SummarizerParams, rng=None, trace=None) -> EncoderOutput:
    cfg = params.cfg
    _check_batch(batch, cfg)
    B, H = batch.size, cfg.hidden
    V = Tensor(batch.V)
    vis_keys = project_keys(V, params.enc_vis_att) if cfg.visual_encoder else None
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    hs = []
    # masked cells always read the PAD row, whatever id they carry
    words = np.where(batch.word_mask, batch.words, PAD)
    for t in range(cfg.encoder_length):
        z = vtf_e_step(V, words[:, t], h, params, vis_keys, trace)
        h, c = lstm_cell_step(z, h, c, params.enc_lstm)
        hs.append(_drop(h, cfg, rng))
    Hf = T.stack(hs, axis=1)
    mask = batch.word_mask
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    pooled = T.tsum(Hf * (mask / counts)[..., None], axis=1)
    bow = T.linear(pooled, params.disc)
    return EncoderOutput(Hf=Hf, mask=mask, bow_logits=bow)


def encode_attention_simple(Hf: Tensor, h_dec: Tensor, params: SummarizerParams, mask=None, keys=None, trace=None):
    F, a = attend(Hf, h_dec, params.ctx_att, mask=mask, keys=keys)
    if trace is not None:
        trace.add("simple", a, mask)
    return F


def group_masks(mask: np.ndarray, n_words: int) -> np.ndarray:
    """Per-group masks ``[B, N_m, N_k]``; a fully padded group keeps its first slot."""
    B, L = mask.shape
    if L % n_words:
        raise ShapeError(f"encoder length {L} is not divisible by N_k={n_words}")
    g = mask.reshape(B, L // n_words, n_words).copy()
    empty = ~g.any(axis=2)
    g[empty, 0] = True
    return g


def encode_attention_hierarchical(Hf: Tensor, mask: np.ndarray, params: SummarizerParams, rng=None, trace=None) -> Tensor:
    """Group ``H^f`` by sentence and run the second-level LSTM; returns ``[B, N_m, H]``."""
    cfg = params.cfg
    B, L, H = Hf.shape
    Nk = cfg.n_words
    gm = group_masks(mask, Nk)
    Nm = L // Nk
    grouped = T.reshape(Hf, (B, Nm, Nk, H))
    keys = project_keys(grouped, params.group_att)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    out = []
    for t in range(Nm):
        ctx, a = attend(grouped[:, t], h, params.group_att, mask=gm[:, t], keys=keys[:, t])
        if trace is not None:
            trace.add("group", a, gm[:, t])
        h, c = lstm_cell_step(ctx, h, c, params.hier_lstm)
        out.append(_drop(h, cfg, rng))
    return T.stack(out, axis=1)


class DecoderContext:
    """Per-proposal tensors the decoder attends over, fixed across decode steps."""

    def __init__(self, params: SummarizerParams, V: Tensor, source: Tensor | None, source_mask):
        self.params = params
        self.V = V
        self.vis_keys = project_keys(V, params.dec_vis_att) if params.cfg.visual_decoder else None
        self.source = source
        self.source_mask = source_mask
        self.source_keys = None if source is None else project_keys(source, params.ctx_att)

    def select(self, idx) -> "DecoderContext":
        """Reindex along the batch axis (constant tensors only; used by decoding)."""
        new = object.__new__(DecoderContext)
        new.params = self.params
        pick = lambda t: None if t is None else Tensor(t.data[idx])
        new.V = pick(self.V)
        new.vis_keys = pick(self.vis_keys)
        new.source = pick(self.source)
        new.source_keys = pick(self.source_keys)
        new.source_mask = None if self.source_mask is None else self.source_mask[idx]
        return new

    @property
    def size(self) -> int:
        return self.V.shape[0]


FUSION_GROUPS = ("embed", "enc_vis_att", "mlp_e", "enc_lstm", "disc")
ENCODER_GROUPS = FUSION_GROUPS + ("group_att", "hier_lstm")


def encode(batch: Batch, params: SummarizerParams, rng=None, trace=None, fused: EncoderOutput | None = None):
    """Encoder half of the model: ``(source, source_mask, encoder_output)``, all None in TA mode.

    ``fused`` lets a caller reuse an earlier fusion-stage output.
    """
    cfg = params.cfg
    if cfg.attention == "none":
        if batch.V.shape[2] != cfg.feat_dim:
            raise ShapeError(f"visual features {batch.V.shape[1:]} do not match D={cfg.feat_dim}")
        return None, None, None
    enc = fused if fused is not None else encode_fusion(batch, params, rng, trace)
    if cfg.attention == "simple":
        return enc.Hf, enc.mask, enc
    return encode_attention_hierarchical(enc.Hf, enc.mask, params, rng, trace), None, enc


def build_decoder_context(batch: Batch, params: SummarizerParams, rng=None, trace=None, encoded=None):
    """Run whatever encoder the mode needs.  Returns ``(context, encoder_output_or_None)``.

    ``encoded`` lets a caller reuse an earlier :func:`encode` result.
    """
    source, source_mask, enc = encoded if encoded is not None else encode(batch, params, rng, trace)
    return DecoderContext(params, Tensor(batch.V), source, source_mask), enc


def decoder_step(ctx: DecoderContext, w_prev, h: Tensor, c: Tensor, rng=None, trace=None):
    """One decoder step: returns ``(h_t, c_t, logits)``."""
    p = ctx.params
    cfg = p.cfg
    parts = []
    if cfg.visual_decoder:
        vis, a = attend(ctx.V, h, p.dec_vis_att, keys=ctx.vis_keys)
        if trace is not None:
            trace.add("vtf_d", a, None)
        parts.append(vis)
    parts.append(embed(w_prev, p.embed))
    if ctx.source is not None:
        F, a = attend(ctx.source, h, p.ctx_att, mask=ctx.source_mask, keys=ctx.source_keys)
        if trace is not None:
            trace.add("ctx", a, ctx.source_mask)
        parts.append(F)
    z = mlp2(parts, p.mlp_d)
    h, c = lstm_cell_step(z, h, c, p.dec_lstm)
    logits = T.linear(_drop(h, cfg, rng), p.out)
    return h, c, logits


def initial_state(batch_size: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch_size, hidden))), Tensor(np.zeros((batch_size, hidden)))


def forward_teacher_forced(batch: Batch, params: SummarizerParams, rng=None, trace=None, encoded=None):
    """Teacher-forced pass.  ``rng`` set means training (dropout on).

    Returns ``(logits [B, T-1, N_v], bow_logits [B, N_v] or None)``.
    """
    if batch.targets is None:
        raise ValueError("forward_teacher_forced needs batch.targets")
    tgt = batch.targets
    if tgt.shape[1] < 2 or not (tgt[:, 0] == BOS).all():
        raise ValueError("targets must start with BOS and have at least one predicted token")
    ctx, enc = build_decoder_context(batch, params, rng, trace, encoded)
    h, c = initial_state(batch.size, params.cfg.hidden)
    steps = []
    last = int((tgt != PAD).sum(axis=1).max())
    for t in range(last - 1):
        h, c, logits = decoder_step(ctx, tgt[:, t], h, c, rng, trace)
        steps.append(logits)
    for _ in range(last - 1, tgt.shape[1] - 1):
        # trailing all-PAD columns: constant logits, masked out of the loss anyway
        steps.append(Tensor(np.zeros((batch.size, params.cfg.vocab_size))))
    return T.stack(steps, axis=1), None if enc is None else enc.bow_logits
