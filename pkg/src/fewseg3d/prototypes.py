"""Class prototypes from annotated support features.

A prototype summarizes one class as a single D-dim vector: farthest point
sampling picks spatial seeds inside the class mask, every masked point joins
its nearest seed, and the prototype is the unweighted mean of the per-cluster
feature means. Foreground prototypes and the background prototype are stacked
into an ordered (C+1) x D matrix consumed by the alignment and loss stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PrototypeSet:
    """(C+1) x D prototype matrix; rows are episode classes 0..C-1 then background."""

    matrix: np.ndarray
    source: str  # intrinsic | diffusion | fused

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def validate(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ValueError(f"prototype matrix must be (C+1) x D, got {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError("prototype matrix has non-finite entries")


def fps(coords: np.ndarray, s: int) -> np.ndarray:
    """Greedy max-min farthest point sampling; returns s point indices.

    Starts at the point farthest from the centroid, then repeatedly picks the
    point maximizing the distance to the selected set. All ties break toward
    the lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    centroid = coords.mean(axis=0)
    first = int(np.argmax(((coords - centroid) ** 2).sum(axis=1)))
    sel = np.empty(s, dtype=np.int64)
    sel[0] = first
    csq = (coords * coords).sum(axis=1)
    mind = csq + csq[first] - 2.0 * (coords @ coords[first])
    mind[first] = -1.0  # mark selected so duplicates are never re-picked
    for i in range(1, s):
        nxt = int(np.argmax(mind))
        sel[i] = nxt
        d = csq + csq[nxt] - 2.0 * (coords @ coords[nxt])
        np.minimum(mind, d, out=mind)
        mind[nxt] = -1.0
    return sel


def inverted_cluster(features: np.ndarray, coords: np.ndarray, mask: np.ndarray,
                     s: int) -> np.ndarray:
    """Single prototype for the masked points: mean of seeded cluster means.

    Seeds come from fps over the masked coordinates (s' = min(s, m)); each
    masked point joins its nearest seed in coordinate space (ties toward the
    lower seed rank); the prototype is the unweighted mean of the nonempty
    clusters' feature means.
    """
    mask = np.asarray(mask, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty mask: no points to build a prototype from")
    f = np.asarray(features, dtype=np.float64)[mask]
    c = np.asarray(coords, dtype=np.float64)[mask]
    s_eff = min(s, m)
    seeds = fps(c, s_eff)
    d2 = ((c[:, None, :] - c[seeds][None, :, :]) ** 2).sum(axis=-1)  # (m, s_eff)
    assign = np.argmin(d2, axis=1)
    means = [f[assign == j].mean(axis=0) for j in range(s_eff) if (assign == j).any()]
    return np.mean(means, axis=0)


def proto_gen(features, masks, coords, s: int = 5):
    """Per-class foreground prototypes plus one background prototype.

    features[c][k], coords[c][k] describe the k-th support block of episode
    class c; masks[c][k] is its binary annotation. Multi-shot classes average
    their per-shot prototypes uniformly. The background prototype pools the
    complement points of every shot. Raises ValueError naming the class (or
    the background) when it has no points.
    """
    fg = []
    bg_feats, bg_coords = [], []
    for cls_idx, (fs, ms, cs) in enumerate(zip(features, masks, coords)):
        shots = []
        for f, mask, xyz in zip(fs, ms, cs):
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                raise ValueError(f"class {cls_idx}: support mask selects zero points")
            shots.append(inverted_cluster(f, xyz, mask, s))
            if (~mask).any():
                bg_feats.append(np.asarray(f, dtype=np.float64)[~mask])
                bg_coords.append(np.asarray(xyz, dtype=np.float64)[~mask])
        fg.append(np.mean(shots, axis=0))
    if not bg_feats:
        raise ValueError("background: support blocks contain zero background points")
    bg_f = np.vstack(bg_feats)
    bg_c = np.vstack(bg_coords)
    bg = inverted_cluster(bg_f, bg_c, np.ones(len(bg_f), dtype=bool), s)
    return np.stack(fg), bg


def assemble(fg: np.ndarray, bg: np.ndarray, source: str) -> PrototypeSet:
    """Stack foreground rows (episode-class order) and the background row last."""
    fg = np.atleast_2d(np.asarray(fg, dtype=np.float64))
    bg = np.asarray(bg, dtype=np.float64).reshape(1, -1)
    if fg.shape[1] != bg.shape[1]:
        raise ValueError(f"width mismatch: foreground D={fg.shape[1]}, "
                         f"background D={bg.shape[1]}")
    ps = PrototypeSet(matrix=np.vstack([fg, bg]), source=source)
    ps.validate()
    return ps
