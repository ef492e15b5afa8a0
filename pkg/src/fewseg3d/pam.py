"""Push-pull prototype alignment via cross-guidance channel attention.

Each iteration applies two corrective updates: a pull step recomputes the
intrinsic prototypes through a channel-attention map derived from the
diffusion query/support features, and a mirror push step recomputes the
diffusion prototypes through an intrinsic-feature attention map. Updates are
residual with zero-initialized MLP output layers, so a freshly initialized
stack is exactly the identity. The aligned prototype sets are fused by
elementwise addition into the final big-capacity set.

Projections are D x D channel maps applied before transposition, keeping the
parameter count independent of the point count; both feature streams must be
resampled to a common point count before the attention product is defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .prototypes import fps


@dataclass
class PAMConfig:
    width: int = 64
    iterations: int = 2            # stacked push-pull blocks (M)
    variant: str = "pushpull"      # pushpull | push_only | pull_only
    share_weights: bool = False
    mlp_hidden: int | None = None  # defaults to width

    def __post_init__(self):
        if self.variant not in ("pushpull", "push_only", "pull_only"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class PAMParams:
    config: PAMConfig
    params: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def block(self, iteration: int, side: str) -> dict:
        """Parameter bundle for one (iteration, pull|push) block."""
        m = 0 if self.config.share_weights else iteration
        pre = f"it{m}.{side}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}


def pam_init(config: PAMConfig, seed: int = 0) -> PAMParams:
    rng = np.random.default_rng(seed)
    D = config.width
    hidden = config.mlp_hidden or D
    n_blocks = 1 if config.share_weights else config.iterations
    p = {}
    for m in range(n_blocks):
        for side in ("pull", "push"):
            pre = f"it{m}.{side}."
            for nm in ("wq", "wk", "wv"):
                p[pre + nm] = ad.normal_param(rng, (D, D), np.sqrt(1.0 / D))
            p[pre + "mlp.w1"] = ad.normal_param(rng, (D, hidden), np.sqrt(2.0 / D))
            p[pre + "mlp.b1"] = ad.zeros_param((hidden,))
            p[pre + "mlp.w2"] = ad.zeros_param((hidden, D))  # residual identity at init
            p[pre + "mlp.b2"] = ad.zeros_param((D,))
    for k, t in p.items():
        t.name = k
    return PAMParams(config=config, params=p)


def channel_attention(f_query, f_support, w_q, w_k, scale: float | None = None):
    """Row-stochastic D x D channel attention from two (n, D) feature maps.

    Query = (F_q W_q)^T and Key = (F_s W_k)^T are D x n; the attention map is
    rowsoftmax(Query Key^T / scale) with scale defaulting to sqrt(D).
    """
    fq, fs = ad.astensor(f_query), ad.astensor(f_support)
    if fq.shape[1] != fs.shape[1]:
        raise ValueError(f"feature widths differ: {fq.shape[1]} vs {fs.shape[1]}")
    if fq.shape[0] != fs.shape[0]:
        raise ValueError(
            f"point counts differ ({fq.shape[0]} vs {fs.shape[0]}); resample the "
            "support features to the query point count first (see resample_rows)")
    D = fq.shape[1]
    scale = float(np.sqrt(D)) if scale is None else scale
    query = ad.transpose(ad.matmul(fq, w_q))     # (D, n)
    key = ad.transpose(ad.matmul(fs, w_k))       # (D, n)
    logits = ad.matmul(query, ad.transpose(key)) * (1.0 / scale)
    return ad.softmax(logits, axis=-1)


def _mlp(x, blk):
    h = ad.relu(ad.add(ad.matmul(x, blk["mlp.w1"]), blk["mlp.b1"]))
    return ad.add(ad.matmul(h, blk["mlp.w2"]), blk["mlp.b2"])


def _residual_update(protos, attn, blk):
    """protos + MLP( (attn (protos W_v)^T)^T ): channel remix of the prototype rows."""
    p = ad.astensor(protos)
    value = ad.matmul(p, blk["wv"])                       # (C+1, D)
    update = ad.transpose(ad.matmul(attn, ad.transpose(value)))
    return ad.add(p, _mlp(update, blk))


def pull_block(p_i, f_qd, f_sd, blk):
    """Align intrinsic prototypes with attention from the diffusion stream."""
    attn = channel_attention(f_qd, f_sd, blk["wq"], blk["wk"])
    return _residual_update(p_i, attn, blk)


def push_block(p_d, f_qi, f_si, blk):
    """Align diffusion prototypes with attention from the intrinsic stream."""
    attn = channel_attention(f_qi, f_si, blk["wq"], blk["wk"])
    return _residual_update(p_d, attn, blk)


def assimilate(p_i, p_d, f_qi, f_si, f_qd, f_sd, pam: PAMParams):
    """Run M stacked (pull, push) updates; features stay fixed throughout.

    Variant 'pull_only' leaves the diffusion prototypes untouched and
    'push_only' the intrinsic ones. When the diffusion stream is absent
    (p_d, f_qd, f_sd all None) the stack degrades to a single-stream mode:
    the intrinsic prototypes are updated by intrinsic-feature attention.
    Returns (aligned_p_i, aligned_p_d) with p_d None in single-stream mode.
    """
    cfg = pam.config
    single = p_d is None
    if single and (f_qd is not None or f_sd is not None):
        raise ValueError("single-stream mode requires all diffusion inputs absent")
    pi, pd = ad.astensor(p_i), None if single else ad.astensor(p_d)
    for m in range(cfg.iterations):
        if single:
            pi = pull_block(pi, f_qi, f_si, pam.block(m, "pull"))
            continue
        if cfg.variant in ("pushpull", "pull_only"):
            pi = pull_block(pi, f_qd, f_sd, pam.block(m, "pull"))
        if cfg.variant in ("pushpull", "push_only"):
            pd = push_block(pd, f_qi, f_si, pam.block(m, "push"))
    return pi, pd


def fuse(p_i, p_d):
    """Elementwise sum of the aligned prototype sets (identity when p_d is None)."""
    pi = ad.astensor(p_i)
    if p_d is None:
        return pi
    pd = ad.astensor(p_d)
    if pi.shape != pd.shape:
        raise ValueError(f"shape mismatch: {pi.shape} vs {pd.shape}")
    return ad.add(pi, pd)


def resample_rows(features: np.ndarray, coords: np.ndarray, n_target: int):
    """Subsample feature rows to n_target via farthest point sampling on coords.

    Used to bring concatenated support features to the query point count
    before channel attention. Falls back to modular tiling when fewer rows
    than n_target are available.
    """
    n = len(features)
    if n == n_target:
        return features, coords
    if n > n_target:
        idx = fps(coords, n_target)
    else:
        idx = np.arange(n_target) % n
    return features[idx], coords[idx]


# checkpoint adapters -------------------------------------------------------

def save_pam(path, pam: PAMParams, extra_meta: dict | None = None):
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    meta = {"kind": "pam", "config": asdict(pam.config)}
    meta.update(extra_meta or {})
    return save_checkpoint(path, pam.arrays(), meta)


def load_pam(path) -> PAMParams:
    from .checkpoint import load_checkpoint
    from .errors import FormatError

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "pam":
        raise FormatError(f"checkpoint: kind {meta.get('kind')!r}, expected 'pam'")
    cfg = PAMConfig(**meta["config"])
    params = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
    return PAMParams(config=cfg, params=params)
