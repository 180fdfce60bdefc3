import numpy as np

from das.model import SummarizerConfig, SummarizerParams


def tiny_config(mode: str = "HA", **kw) -> SummarizerConfig:
    base = dict(n_segments=3, n_words=4, feat_dim=8, hidden=16, embed_dim=16, vocab_size=20, attention=mode)
    base.update(kw)
    return SummarizerConfig(**base)


def random_params(cfg: SummarizerConfig, seed: int = 0, scale: float | None = 0.5) -> SummarizerParams:
    """Training init, optionally redrawn uniform(-scale, scale) so no term is negligible."""
    p = SummarizerParams.init(cfg, seed=seed)
    if scale is not None:
        rng = np.random.default_rng(seed + 1000)
        for t in p:
            t.data[...] = rng.uniform(-scale, scale, t.shape)
    return p
