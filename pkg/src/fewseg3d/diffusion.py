"""Self-supervised diffusion feature learner.

A point cloud is split into patches (farthest-point-sampled centers with
k-nearest groups), a high ratio of patches is masked, and a small transformer
encodes the visible ones with MLP positional embeddings of the raw centers.
The encoder output, pooled together with the masked-center embeddings, forms
the condition vector for a per-point denoiser trained to predict the Gaussian
noise of the forward diffusion process. After pre-training the encoder is
frozen and serves mask-free per-point features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import TrainingError
from .data import PointCloud, sample_block
from .intrinsic import FeatureMap
from .prototypes import fps


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    """Per-timestep beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_i."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self):
        if len(self.beta) != self.T:
            raise ValueError(f"beta length {len(self.beta)} != T={self.T}")
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValueError("beta outside (0, 1)")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar not strictly decreasing")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with cumulative-product alpha_bar."""
    if T < 1:
        raise ValueError(f"need T >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, "
                         f"got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    sched = DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))
    sched.validate()
    return sched


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchSet:
    """G patch centers with k-nearest groups and a visible/masked partition."""

    centers: np.ndarray      # (G, 3)
    groups: np.ndarray       # (G, k) point indices
    rel_coords: np.ndarray   # (G, k, 3) group points relative to their centers
    visible_idx: np.ndarray  # sorted patch indices
    masked_idx: np.ndarray   # sorted patch indices
    patch_feats: np.ndarray | None = None  # (G, d) raw descriptors, filled lazily

    @property
    def n_patches(self) -> int:
        return len(self.centers)


def patchify(points, G: int, k: int) -> PatchSet:
    """Farthest-point-sampled centers with k-nearest groups, all visible."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    pts = pts.astype(np.float64)
    n = len(pts)
    if G > n:
        raise ValueError(f"need G <= n, got G={G}, n={n}")
    if k > n:
        raise ValueError(f"need k <= n, got k={k}, n={n}")
    centers_idx = fps(pts, G)
    centers = pts[centers_idx]
    sq = (pts * pts).sum(axis=1)
    csq = (centers * centers).sum(axis=1)
    d = csq[:, None] + sq[None, :] - 2.0 * (centers @ pts.T)  # (G, n)
    groups = np.argsort(d, axis=1, kind="stable")[:, :k]
    rel = pts[groups] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups, rel_coords=rel,
                    visible_idx=np.arange(G), masked_idx=np.empty(0, dtype=int))


def mask_patches(ps: PatchSet, rho: float, seed: int) -> PatchSet:
    """Mask a uniformly random round(rho * G) subset of patches (half-up rounding)."""
    if not 0 <= rho < 1:
        raise ValueError(f"need 0 <= rho < 1, got {rho}")
    G = ps.n_patches
    n_mask = int(np.floor(rho * G + 0.5))
    perm = np.random.default_rng(seed).permutation(G)
    masked = np.sort(perm[:n_mask])
    visible = np.sort(perm[n_mask:])
    return PatchSet(centers=ps.centers, groups=ps.groups, rel_coords=ps.rel_coords,
                    visible_idx=visible, masked_idx=masked, patch_feats=ps.patch_feats)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class DLConfig:
    width: int = 64          # shared embedding width
    point_embed: int = 32    # per-point embedding inside the patch descriptor
    n_patches: int = 64
    patch_k: int = 32
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 128
    t_embed: int = 64
    denoise_widths: tuple = (128, 128, 128)
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mask_ratio: float = 0.8


@dataclass
class DLParams:
    config: DLConfig
    params: dict = field(default_factory=dict)
    schedule: DiffusionSchedule = None

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}


def dl_init(config: DLConfig, seed: int = 0) -> DLParams:
    rng = np.random.default_rng(seed)
    D, E = config.width, config.point_embed
    p = {}
    p["embed.w"] = ad.normal_param(rng, (3, E), np.sqrt(2.0 / 3))
    p["embed.b"] = ad.zeros_param((E,))
    p["pos.w1"] = ad.normal_param(rng, (3, D), np.sqrt(2.0 / 3))
    p["pos.b1"] = ad.zeros_param((D,))
    p["pos.w2"] = ad.normal_param(rng, (D, D), np.sqrt(1.0 / D))
    p["pos.b2"] = ad.zeros_param((D,))
    p["token.w"] = ad.normal_param(rng, (2 * E + D, D), np.sqrt(1.0 / (2 * E + D)))
    p["token.b"] = ad.zeros_param((D,))
    for i in range(config.layers):
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"enc{i}.{nm}"] = ad.normal_param(rng, (D, D), np.sqrt(1.0 / D))
        p[f"enc{i}.ln1.g"] = ad.parameter(np.ones(D))
        p[f"enc{i}.ln1.b"] = ad.zeros_param((D,))
        p[f"enc{i}.ln2.g"] = ad.parameter(np.ones(D))
        p[f"enc{i}.ln2.b"] = ad.zeros_param((D,))
        p[f"enc{i}.mlp.w1"] = ad.normal_param(rng, (D, config.mlp_hidden),
                                              np.sqrt(2.0 / D))
        p[f"enc{i}.mlp.b1"] = ad.zeros_param((config.mlp_hidden,))
        p[f"enc{i}.mlp.w2"] = ad.normal_param(rng, (config.mlp_hidden, D),
                                              np.sqrt(1.0 / config.mlp_hidden))
        p[f"enc{i}.mlp.b2"] = ad.zeros_param((D,))
    p["encln.g"] = ad.parameter(np.ones(D))
    p["encln.b"] = ad.zeros_param((D,))
    p["cond.w1"] = ad.normal_param(rng, (2 * D, 2 * D), np.sqrt(2.0 / (2 * D)))
    p["cond.b1"] = ad.zeros_param((2 * D,))
    p["cond.w2"] = ad.normal_param(rng, (2 * D, D), np.sqrt(1.0 / (2 * D)))
    p["cond.b2"] = ad.zeros_param((D,))
    din = 3 + config.t_embed + D
    for i, dout in enumerate((*config.denoise_widths, 3)):
        p[f"den.w{i}"] = ad.normal_param(rng, (din, dout), np.sqrt(2.0 / din))
        p[f"den.b{i}"] = ad.zeros_param((dout,))
        din = dout
    for k, t in p.items():
        t.name = k
    sched = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    return DLParams(config=config, params=p, schedule=sched)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def pos_embed(centers, dl: DLParams):
    """Two-layer MLP positional embedding of raw patch centers: (m, 3) -> (m, D)."""
    p = dl.params
    h = ad.relu(ad.linear(ad.astensor(centers), p["pos.w1"], p["pos.b1"]))
    return ad.linear(h, p["pos.w2"], p["pos.b2"])


def _patch_descriptor(rel_coords, dl: DLParams):
    """meanpool | maxpool of a per-point linear embedding of center-relative coords."""
    emb = ad.linear(ad.astensor(rel_coords), dl.params["embed.w"], dl.params["embed.b"])
    return ad.concat([ad.tmean(emb, axis=1), ad.tmax(emb, axis=1)], axis=1)  # (g, 2E)


def _attention(x, p, prefix, heads):
    m, D = x.shape
    dh = D // heads

    def split(t):
        return ad.swapaxes(ad.reshape(t, (m, heads, dh)), 0, 1)  # (h, m, dh)

    q = split(ad.matmul(x, p[f"{prefix}.wq"]))
    k = split(ad.matmul(x, p[f"{prefix}.wk"]))
    v = split(ad.matmul(x, p[f"{prefix}.wv"]))
    scores = ad.softmax(ad.matmul(q, ad.swapaxes(k, 1, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = ad.reshape(ad.swapaxes(ad.matmul(scores, v), 0, 1), (m, D))
    return ad.matmul(out, p[f"{prefix}.wo"])


def dl_encode(ps: PatchSet, dl: DLParams):
    """Encode visible patches: descriptor | positional embedding -> transformer.

    Returns an (m_v, D) Tensor whose row order follows ps.visible_idx.
    """
    if len(ps.visible_idx) == 0:
        raise ValueError("no visible patches to encode")
    p = dl.params
    cfg = dl.config
    wdtype = p["token.w"].data.dtype
    rel = ps.rel_coords[ps.visible_idx].astype(wdtype)
    desc = _patch_descriptor(rel, dl)
    pos = pos_embed(ps.centers[ps.visible_idx].astype(wdtype), dl)
    x = ad.linear(ad.concat([desc, pos], axis=1), p["token.w"], p["token.b"])
    for i in range(cfg.layers):
        h = ad.layer_norm(x, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
        x = ad.add(x, _attention(h, p, f"enc{i}", cfg.heads))
        h = ad.layer_norm(x, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
        h = ad.relu(ad.linear(h, p[f"enc{i}.mlp.w1"], p[f"enc{i}.mlp.b1"]))
        x = ad.add(x, ad.linear(h, p[f"enc{i}.mlp.w2"], p[f"enc{i}.mlp.b2"]))
    return ad.layer_norm(x, p["encln.g"], p["encln.b"])


def aggregate_condition(feats, masked_centers, dl: DLParams):
    """Condition vector: MLP( meanpool(encoder out) | meanpool(pos(masked centers)) )."""
    p = dl.params
    D = dl.config.width
    pooled = ad.tmean(ad.astensor(feats), axis=0, keepdims=True)      # (1, D)
    if masked_centers is not None and len(masked_centers) > 0:
        mpos = ad.tmean(pos_embed(masked_centers, dl), axis=0, keepdims=True)
    else:
        mpos = ad.Tensor(np.zeros((1, D)))
    h = ad.relu(ad.linear(ad.concat([pooled, mpos], axis=1), p["cond.w1"], p["cond.b1"]))
    return ad.linear(h, p["cond.w2"], p["cond.b2"])                   # (1, D)


def timestep_embedding(t: int, width: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep."""
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def denoise(z_t, t: int, c, dl: DLParams):
    """Per-point noise prediction: MLP over (coordinate | t-embedding | condition)."""
    z = ad.astensor(z_t)
    n = z.shape[0]
    temb = np.broadcast_to(timestep_embedding(t, dl.config.t_embed), (n, dl.config.t_embed))
    cond = c if isinstance(c, ad.Tensor) else ad.astensor(c)
    if cond.ndim == 1:
        cond = ad.reshape(cond, (1, -1))
    if cond.shape[0] == 1 and n > 1:
        cond_rows = ad.matmul(ad.Tensor(np.ones((n, 1))), cond)
    else:
        cond_rows = cond
    h = ad.concat([z, ad.Tensor(np.array(temb)), cond_rows], axis=1)
    L = len(dl.config.denoise_widths)
    for i in range(L + 1):
        h = ad.linear(h, dl.params[f"den.w{i}"], dl.params[f"den.b{i}"])
        if i < L:
            h = ad.relu(h)
    return h


def diffusion_loss(x0: np.ndarray, schedule: DiffusionSchedule, dl: DLParams,
                   seed: int, rho: float | None = None):
    """One-sample denoising objective: || eps - eps_theta(z_t, t, c) ||^2 (mean).

    Draws t uniformly and eps standard normal from `seed`, noises x0 in closed
    form, encodes the masked clean cloud into the condition, and returns the
    mean squared error Tensor averaged over points and coordinates.
    """
    cfg = dl.config
    rho = cfg.mask_ratio if rho is None else rho
    rng = np.random.default_rng(seed)
    t = int(rng.integers(schedule.T))
    eps = rng.standard_normal(np.asarray(x0).shape)
    z_t = q_sample(x0, t, eps, schedule)
    ps = patchify(x0, min(cfg.n_patches, len(x0)), min(cfg.patch_k, len(x0)))
    ps = mask_patches(ps, rho, seed=int(rng.integers(2 ** 31)))
    feats = dl_encode(ps, dl)
    c = aggregate_condition(feats, ps.centers[ps.masked_idx], dl)
    eps_hat = denoise(z_t, t, c, dl)
    diff = ad.sub(eps_hat, ad.Tensor(eps))
    return ad.tmean(ad.mul(diff, diff))


# ---------------------------------------------------------------------------
# training and frozen inference
# ---------------------------------------------------------------------------

def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center and scale coordinates to fit the unit ball (diffusion input frame)."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    scale = np.linalg.norm(pts, axis=1).max()
    return pts / scale if scale > 0 else pts


@dataclass
class DLTrainConfig:
    epochs: int = 4
    steps_per_epoch: int = 40
    lr: float = 1e-3
    n_points: int = 512
    seed: int = 0
    model: DLConfig = field(default_factory=DLConfig)


def pretrain_dl(manifest, test_split: str, train_cfg: DLTrainConfig):
    """Self-supervised pre-training of encoder + denoiser on corpus blocks.

    Blocks are drawn from scenes of the corpus; supervision never touches
    labels, so split discipline only gates which blocks are eligible (must
    contain at least one meta-training class point). Returns (DLParams,
    per-step loss curve).
    """
    split = manifest.class_split(test_split)
    train_classes = sorted(split.train_classes)
    dl = dl_init(train_cfg.model, seed=train_cfg.seed)
    opt = ad.Adam(dl.params, lr=train_cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 29]))

    curve = []
    for step in range(train_cfg.epochs * train_cfg.steps_per_epoch):
        block = _draw_block(manifest, train_classes, train_cfg, rng)
        x0 = normalize_cloud(block.points)
        loss = diffusion_loss(x0, dl.schedule, dl, seed=int(rng.integers(2 ** 31)))
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    return dl, curve


def _draw_block(manifest, train_classes, train_cfg, rng):
    for _ in range(64):
        si = int(rng.integers(manifest.n_scenes))
        block = sample_block(manifest.scene(si), manifest.block_size,
                             train_cfg.n_points, seed=int(rng.integers(2 ** 31)))
        if np.isin(block.labels, train_classes).any():
            return block
    raise TrainingError("could not draw a block containing train-class points")


def dl_features(pc: PointCloud, dl: DLParams) -> FeatureMap:
    """Frozen mask-free inference: encode all patches, spread to member points.

    Each point takes the feature of its nearest center among the groups that
    contain it; points outside every group fall back to the nearest center.
    """
    pts = normalize_cloud(pc.points)
    n = len(pts)
    cfg = dl.config
    ps = patchify(pts, min(cfg.n_patches, n), min(cfg.patch_k, n))
    with ad.no_grad():
        feats = dl_encode(ps, dl).data      # (G, D), all patches visible
    G = ps.n_patches
    d = ((pts[:, None, :] - ps.centers[None, :, :]) ** 2).sum(axis=-1)  # (n, G)
    member = np.zeros((n, G), dtype=bool)
    member[ps.groups.ravel(), np.repeat(np.arange(G), ps.groups.shape[1])] = True
    d_member = np.where(member, d, np.inf)
    choice = np.argmin(d_member, axis=1)
    orphan = ~member.any(axis=1)
    if orphan.any():
        choice[orphan] = np.argmin(d[orphan], axis=1)
    fm = FeatureMap(features=feats[choice], source="diffusion", coords=pc.points)
    fm.validate()
    return fm


# checkpoint adapters -------------------------------------------------------

def save_dl(path, dl: DLParams, extra_meta: dict | None = None):
    from .checkpoint import save_checkpoint

    meta = {"kind": "dl", "config": asdict(dl.config)}
    meta.update(extra_meta or {})
    arrays = dict(dl.arrays())
    arrays["schedule.beta"] = dl.schedule.beta
    return save_checkpoint(path, arrays, meta)


def load_dl(path) -> DLParams:
    from .checkpoint import load_checkpoint
    from .errors import FormatError

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "dl":
        raise FormatError(f"checkpoint: kind {meta.get('kind')!r}, expected 'dl'")
    cfg = DLConfig(**{**meta["config"],
                      "denoise_widths": tuple(meta["config"]["denoise_widths"])})
    beta = arrays.pop("schedule.beta")
    alpha = 1.0 - beta
    sched = DiffusionSchedule(T=len(beta), beta=beta, alpha=alpha,
                              alpha_bar=np.cumprod(alpha))
    sched.validate()
    params = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
    return DLParams(config=cfg, params=params, schedule=sched)
