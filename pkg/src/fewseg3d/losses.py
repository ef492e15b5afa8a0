"""Cosine-similarity segmentation and the prototype calibration objective.

Per-point class probabilities are the softmax over classes of the cosine
between the point feature and each prototype row. The calibration term
reconstructs the support masks from the fused prototype against the intrinsic
support features, anchoring the expanded prototype to its source semantics.
The combined objective is seg + lambda * calibration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossRecord:
    seg_loss: float
    cal_loss: float
    total: float
    lam: float

    def __post_init__(self):
        if self.total != self.seg_loss + self.lam * self.cal_loss:
            raise ValueError("total must equal seg_loss + lam * cal_loss exactly")


def _maybe_array(out, *inputs):
    """Return plain ndarray/float when no input carried a gradient graph."""
    if any(isinstance(x, ad.Tensor) for x in inputs):
        return out
    return out.data if out.ndim else out.item()


def _check_nonzero_rows(arr: np.ndarray, what: str):
    norms = np.linalg.norm(arr, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if len(bad):
        raise ValueError(f"{what} row {int(bad[0])} has zero norm; "
                         "clean the inputs, no epsilon is applied")


def cosine_probs(feats, protos, temperature: float = 1.0):
    """softmax over classes of cos(feature row, prototype row): (n, C+1) rows sum to 1."""
    f, p = ad.astensor(feats), ad.astensor(protos)
    _check_nonzero_rows(f.data, "feature")
    _check_nonzero_rows(p.data, "prototype")
    fhat = ad.div(f, ad.row_norms(f))
    phat = ad.div(p, ad.row_norms(p))
    logits = ad.matmul(fhat, ad.transpose(phat)) * (1.0 / temperature)
    return _maybe_array(ad.softmax(logits, axis=-1), feats, protos)


def cross_entropy(probs, labels, n_classes: int):
    """Mean negative log-probability of the integer labels under `probs`."""
    labels = np.asarray(labels)
    bad = np.nonzero((labels < 0) | (labels >= n_classes))[0]
    if len(bad):
        raise ValueError(f"invalid label {int(labels[bad[0]])}: "
                         f"outside {{0..{n_classes - 1}}}")
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    nll = -ad.tmean(ad.tsum(ad.mul(ad.log(ad.astensor(probs)), onehot), axis=1))
    return _maybe_array(nll, probs)


def calib_loss(support_feats, protos, support_labels, temperature: float = 1.0):
    """Cross-entropy of the support mask reconstructed from the fused prototype.

    support_labels are integers in {0..C} (background = C) aligned with the
    intrinsic support feature rows.
    """
    n_classes = protos.shape[0]
    probs = cosine_probs(support_feats, protos, temperature)
    return cross_entropy(probs, support_labels, n_classes)


def seg_predict(query_feats, protos, temperature: float = 1.0):
    """Per-point class probabilities and argmax labels for a query block.

    Ties in the argmax resolve to the lower class index.
    """
    p = protos.data if isinstance(protos, ad.Tensor) else np.asarray(protos)
    probs = cosine_probs(np.asarray(query_feats), p, temperature)
    return probs, probs.argmax(axis=1)


def seg_loss(probs, labels):
    """Mean per-point cross-entropy of query probabilities against labels."""
    n_classes = probs.shape[1]
    return cross_entropy(probs, labels, n_classes)


def total_loss(seg: float, cal: float, lam: float = 1.0) -> LossRecord:
    """Combine the two objectives: total = seg + lam * cal (exact arithmetic)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return LossRecord(seg_loss=seg, cal_loss=cal, total=seg + lam * cal, lam=lam)


def episode_loss(query_feats, query_labels, support_feats, support_labels,
                 protos, lam: float = 1.0, temperature: float = 1.0):
    """Differentiable episode objective; returns (total Tensor, LossRecord).

    `protos` is the fused prototype Tensor the gradient flows through; feature
    inputs are constants.
    """
    p = protos if isinstance(protos, ad.Tensor) else ad.astensor(protos)
    q_probs = cosine_probs(query_feats, p, temperature)
    seg = cross_entropy(q_probs, query_labels, p.shape[0])
    cal = calib_loss(support_feats, p, support_labels, temperature)
    total = ad.add(seg, ad.mul(cal, lam))
    record = total_loss(seg.item(), cal.item(), lam)
    return total, record
