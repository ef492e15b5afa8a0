"""Supervised per-point feature learner built from edge convolutions.

A compact stack of edge-conv layers over a static kNN graph, followed by a
linear projection to the shared embedding width. Pre-trained with a per-point
classification head on the meta-training classes; the head is dropped and the
learner is frozen for episodic use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import TrainingError
from .data import PointCloud, augment, sample_block


@dataclass
class FeatureMap:
    """Per-point features from one learner stream, with the source coordinates."""

    features: np.ndarray  # (n, D)
    source: str           # intrinsic | diffusion
    coords: np.ndarray    # (n, 3)

    def validate(self):
        if self.features.shape[0] != self.coords.shape[0]:
            raise ValueError("feature rows do not match point count")
        if not np.isfinite(self.features).all():
            raise ValueError("feature map has non-finite entries")


@dataclass
class ILConfig:
    in_dim: int = 9
    widths: tuple = (32, 64, 64)
    out_dim: int = 64
    k: int = 16
    slope: float = 0.2
    head_classes: int = 0  # classification head width used only in pre-training


@dataclass
class ILParams:
    config: ILConfig
    params: dict = field(default_factory=dict)  # name -> autodiff.Tensor

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}


def il_init(config: ILConfig, seed: int = 0) -> ILParams:
    rng = np.random.default_rng(seed)
    p = {}
    din = config.in_dim
    for i, dout in enumerate(config.widths):
        std = np.sqrt(2.0 / (2 * din))
        p[f"ec{i}.w_self"] = ad.normal_param(rng, (din, dout), std)
        p[f"ec{i}.w_diff"] = ad.normal_param(rng, (din, dout), std)
        p[f"ec{i}.b"] = ad.zeros_param((dout,))
        din = dout
    cat = sum(config.widths)
    p["proj.w"] = ad.normal_param(rng, (cat, config.out_dim), np.sqrt(1.0 / cat))
    p["proj.b"] = ad.zeros_param((config.out_dim,))
    if config.head_classes:
        p["head.w"] = ad.normal_param(rng, (config.out_dim, config.head_classes),
                                      np.sqrt(1.0 / config.out_dim))
        p["head.b"] = ad.zeros_param((config.head_classes,))
    for k, t in p.items():
        t.name = k
    return ILParams(config=config, params=p)


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors of each point (self excluded).

    Euclidean distance; ties break toward the smaller point index. Uses an
    argpartition candidate pool with an exact fallback for rows whose k-th
    distance ties the pool boundary (a stable sort is the tie rule).
    Distances are computed at the dtype of `points`.
    """
    pts = np.asarray(points)
    if pts.dtype.kind != "f":
        pts = pts.astype(np.float64)
    n = len(pts)
    if k >= n:
        raise ValueError(f"need k < n, got k={k}, n={n}")
    sq = (pts * pts).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d, np.inf)
    m = min(n - 1, k + 8)
    if m <= k:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    cand = np.argpartition(d, m - 1, axis=1)[:, :m]
    cand.sort(axis=1)  # restore index order so stable value sort = (dist, index)
    cd = np.take_along_axis(d, cand, axis=1)
    order = np.argsort(cd, axis=1, kind="stable")[:, :k]
    nbr = np.take_along_axis(cand, order, axis=1)
    # a tie at the pool boundary may have kept a higher index; redo those rows
    kth = np.take_along_axis(cd, order[:, [k - 1]], axis=1)
    risky = (kth >= cd.max(axis=1, keepdims=True)).ravel()
    if risky.any():
        rows = np.nonzero(risky)[0]
        nbr[rows] = np.argsort(d[rows], axis=1, kind="stable")[:, :k]
    return nbr


def edgeconv_layer(feats, neighbors: np.ndarray, w_self, w_diff, bias, slope=0.2):
    """max_j lrelu( x_i W_self + (x_j - x_i) W_diff + b ) over the k neighbors."""
    f = ad.astensor(feats)
    n, d = f.shape
    if neighbors.ndim != 2 or neighbors.shape[0] != n:
        raise ValueError(f"neighbors must be ({n}, k), got {neighbors.shape}")
    k = neighbors.shape[1]
    center = ad.matmul(f, w_self)
    gathered = ad.gather(f, neighbors)                    # (n, k, d)
    diff = ad.sub(gathered, ad.reshape(f, (n, 1, d)))
    # flatten so the neighbor map runs as one gemm instead of n stacked ones
    mapped = ad.reshape(ad.matmul(ad.reshape(diff, (n * k, d)), w_diff), (n, k, -1))
    edge = ad.add(mapped, ad.reshape(ad.add(center, bias), (n, 1, -1)))
    return ad.tmax(ad.leaky_relu(edge, slope), axis=1)    # (n, d_out)


def _embed(x9, neighbors, il: ILParams):
    """Edge-conv tower + projection; returns the (n, D) feature Tensor."""
    cfg = il.config
    h = ad.astensor(x9)
    taps = []
    for i in range(len(cfg.widths)):
        h = edgeconv_layer(h, neighbors, il.params[f"ec{i}.w_self"],
                           il.params[f"ec{i}.w_diff"], il.params[f"ec{i}.b"],
                           slope=cfg.slope)
        taps.append(h)
    cat = ad.concat(taps, axis=1)
    return ad.linear(cat, il.params["proj.w"], il.params["proj.b"])


def il_forward(pc: PointCloud, il: ILParams) -> FeatureMap:
    """Frozen-parameter inference: n x D intrinsic features, deterministic.

    Runs at the parameter dtype (float32 copies give ~2x faster inference).
    """
    nbr = knn_graph(pc.points, il.config.k)
    wdtype = il.params["proj.w"].data.dtype
    with ad.no_grad():
        out = _embed(pc.features().astype(wdtype), nbr, il)
    fm = FeatureMap(features=out.data, source="intrinsic", coords=pc.points)
    fm.validate()
    return fm


@dataclass
class ILTrainConfig:
    epochs: int = 8
    steps_per_epoch: int = 25
    lr: float = 1e-3
    n_points: int = 512
    seed: int = 0
    augment: bool = True
    model: ILConfig = field(default_factory=ILConfig)


def pretrain_il(manifest, test_split: str, train_cfg: ILTrainConfig):
    """Supervised pre-training on the meta-training classes of the corpus.

    Per step: sample a block, optionally augment it, and take a cross-entropy
    step on the per-point head restricted to train-class points. Returns
    (ILParams, per-epoch mean loss curve).
    """
    split = manifest.class_split(test_split)
    train_classes = sorted(split.train_classes)
    class_to_head = {c: i for i, c in enumerate(train_classes)}

    cfg = ILConfig(**{**asdict(train_cfg.model), "head_classes": len(train_classes)})
    il = il_init(cfg, seed=train_cfg.seed)
    opt = ad.Adam(il.params, lr=train_cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 17]))

    curve = []
    step = 0
    for _ in range(train_cfg.epochs):
        epoch_losses = []
        for _ in range(train_cfg.steps_per_epoch):
            block = _draw_train_block(manifest, train_classes, train_cfg, rng)
            labels = block.labels
            mask = np.isin(labels, train_classes)
            y = np.array([class_to_head[c] for c in labels[mask]])
            onehot = np.zeros((len(y), len(train_classes)))
            onehot[np.arange(len(y)), y] = 1.0

            nbr = knn_graph(block.points, cfg.k)
            emb = _embed(block.features().astype(np.float64), nbr, il)
            logits = ad.linear(emb, il.params["head.w"], il.params["head.b"])
            probs = ad.softmax(ad.gather(logits, np.nonzero(mask)[0]), axis=-1)
            loss = -ad.tmean(ad.tsum(ad.mul(ad.log(probs), onehot), axis=1))

            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    return il, curve


def _draw_train_block(manifest, train_classes, train_cfg: ILTrainConfig, rng):
    """A block containing at least one train-class point (bounded retries)."""
    for _ in range(64):
        si = int(rng.integers(manifest.n_scenes))
        block = sample_block(manifest.scene(si), manifest.block_size,
                             train_cfg.n_points, seed=int(rng.integers(2 ** 31)))
        if train_cfg.augment:
            block = augment(block, seed=int(rng.integers(2 ** 31)))
        if np.isin(block.labels, train_classes).any():
            return block
    raise TrainingError("could not draw a block containing train-class points")


# checkpoint adapters -------------------------------------------------------

def save_il(path, il: ILParams, extra_meta: dict | None = None):
    from .checkpoint import save_checkpoint

    meta = {"kind": "il", "config": asdict(il.config)}
    meta.update(extra_meta or {})
    return save_checkpoint(path, il.arrays(), meta)


def load_il(path) -> ILParams:
    from .checkpoint import load_checkpoint
    from .errors import FormatError

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "il":
        raise FormatError(f"checkpoint: kind {meta.get('kind')!r}, expected 'il'")
    cfg = ILConfig(**{**meta["config"], "widths": tuple(meta["config"]["widths"])})
    params = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
    return ILParams(config=cfg, params=params)
