"""Training objectives for multi-scale occupancy and depth supervision.

All occupancy losses take flattened voxels: logits/probs of shape (V, Cls+1)
and integer labels of shape (V,), class 0 meaning empty.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import DepthTargets

GAMMA = 2
LAMBDA = 3.0
SCALE_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


class EmptyDepthMaskWarning(UserWarning):
    pass


def _check_labels(labels: np.ndarray, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n_rows:
        raise ValueError(f"expected {n_rows} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}], got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: int = GAMMA) -> Tensor:
    """Mean over voxels of -(1 - p_t)^gamma * log(p_t)."""
    v, k = logits.shape
    labels = _check_labels(labels, k, v)
    probs = ad.softmax(logits, axis=1)
    p_t = ad.sum_reduce(probs * Tensor(_onehot(labels, k)), axis=1)
    nll = -ad.log(p_t)
    if gamma == 0:
        return ad.mean_reduce(nll)
    if int(gamma) == gamma and gamma > 0:
        q = 1.0 - p_t
        mod = q
        for _ in range(int(gamma) - 1):
            mod = mod * q
    else:
        mod = ad.exp(ad.log(1.0 - p_t) * float(gamma))
    return ad.mean_reduce(mod * nll)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a sorted ground-truth mask."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - intersection / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present in ``labels``."""
    v, k = probs.shape
    labels = _check_labels(labels, k, v)
    terms = []
    for c in range(k):
        fg = (labels == c).astype(np.float64)
        if not fg.any():
            continue
        errors = probs[:, c] * Tensor(1.0 - 2.0 * fg) + Tensor(fg)
        perm = np.argsort(-errors.data, kind="stable")
        sorted_err = ad.gather(errors, perm)
        terms.append(ad.sum_reduce(sorted_err * Tensor(lovasz_grad(fg[perm]))))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _affinity_term(p: Tensor, fg: np.ndarray) -> Tensor | None:
    """-(log precision + log recall + log specificity) / 3 for one binary class."""
    n_fg = fg.sum()
    if n_fg == 0:
        return None
    n_bg = fg.size - n_fg
    num = ad.log(ad.sum_reduce(p * Tensor(fg)))
    log_p = num - ad.log(ad.sum_reduce(p))
    log_r = num - float(np.log(n_fg))
    acc = log_p + log_r
    if n_bg > 0:
        spec = ad.sum_reduce((1.0 - p) * Tensor(1.0 - fg))
        acc = acc + (ad.log(spec) - float(np.log(n_bg)))
    return acc * (-1.0 / 3.0)


def scal_loss(probs: Tensor, labels: np.ndarray, mode: str = "sem") -> Tensor:
    """Scene-class affinity loss.

    ``sem`` averages the precision/recall/specificity term over every class
    present in ``labels``; ``geo`` applies it once to occupancy, using
    1 - P(empty) as the occupied probability.
    """
    v, k = probs.shape
    labels = _check_labels(labels, k, v)
    if mode == "geo":
        term = _affinity_term(1.0 - probs[:, 0], (labels > 0).astype(np.float64))
        return term if term is not None else Tensor(0.0)
    if mode != "sem":
        raise ValueError(f"scal_loss: mode must be 'geo' or 'sem', got {mode!r}")
    terms = [t for c in range(k) if (t := _affinity_term(probs[:, c], (labels == c).astype(np.float64))) is not None]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def depth_bce(depth: Tensor, targets: DepthTargets) -> Tensor:
    """Binary cross-entropy over bins, averaged over LiDAR-supervised pixels."""
    n, k, h, w = depth.shape
    if targets.onehot.shape != (n, k, h, w):
        raise ValueError(f"depth_bce: targets {targets.onehot.shape} vs depth {depth.shape}")
    count = targets.mask.sum() * k
    if count == 0:
        warnings.warn("depth_bce: no supervised pixels", EmptyDepthMaskWarning, stacklevel=2)
        return Tensor(0.0)
    weight = np.broadcast_to(targets.mask[:, None], (n, k, h, w)) / count
    t = targets.onehot
    ll = ad.log(depth) * Tensor(t) + ad.log(1.0 - depth) * Tensor(1.0 - t)
    return -ad.sum_reduce(ll * Tensor(weight))


def downsample_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """2x block downsampling: most frequent non-empty label per 2x2x2 block.

    Ties go to the lower class id; a block is empty only if all 8 voxels are.
    """
    x, y, z = labels.shape
    if x % 2 or y % 2 or z % 2:
        raise ValueError(f"downsample_labels: shape {labels.shape} not divisible by 2")
    blocks = labels.reshape(x // 2, 2, y // 2, 2, z // 2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, 8)
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(1, num_classes + 1)], axis=1)
    out = np.where(counts.max(axis=1) > 0, counts.argmax(axis=1) + 1, 0)
    return out.reshape(x // 2, y // 2, z // 2).astype(labels.dtype)


def label_pyramid(labels: np.ndarray, num_classes: int, levels: int = 4) -> list[np.ndarray]:
    out = [np.asarray(labels)]
    for _ in range(levels - 1):
        out.append(downsample_labels(out[-1], num_classes))
    return out


@dataclass
class LossReport:
    focal: list[float]
    lovasz: list[float]
    scal_geo: list[float]
    scal_sem: list[float]
    depth_bce: float
    total: float
    lam: float = LAMBDA
    scale_weights: tuple = SCALE_WEIGHTS
    depth_mask_empty: bool = False
    extra: dict = field(default_factory=dict)

    def record(self, step: int) -> dict:
        rec: dict = {"step": step}
        for key in ("focal", "lovasz", "scal_geo", "scal_sem"):
            for l, v in enumerate(getattr(self, key)):
                rec[f"{key}_{l}"] = v
        rec["depth_bce"] = self.depth_bce
        rec["total"] = self.total
        return rec

    def to_json_line(self, step: int) -> str:
        return json.dumps(self.record(step))

    def is_finite(self) -> bool:
        vals = self.focal + self.lovasz + self.scal_geo + self.scal_sem + [self.depth_bce, self.total]
        return all(np.isfinite(vals))


def assemble_total(components: Sequence[Sequence[Tensor]], depth: Tensor, lam: float = LAMBDA) -> Tensor:
    """sum_l 2^-l (focal_l + lovasz_l + scal_geo_l + scal_sem_l) + lam * depth."""
    if len(components) != len(SCALE_WEIGHTS):
        raise ValueError(f"expected {len(SCALE_WEIGHTS)} scales, got {len(components)}")
    total = None
    for w, (f, lv, sg, ss) in zip(SCALE_WEIGHTS, components):
        term = (f + lv + sg + ss) * w
        total = term if total is None else total + term
    return total + depth * lam


def total_loss(
    scale_logits: Sequence[Tensor],
    gt_pyramid: Sequence[np.ndarray],
    depth: Tensor,
    targets: DepthTargets | None,
    lam: float = LAMBDA,
    gamma: int = GAMMA,
) -> tuple[Tensor, LossReport]:
    """Full objective over four scales of (V_l, Cls+1) logits plus depth BCE."""
    if len(scale_logits) != len(SCALE_WEIGHTS) or len(gt_pyramid) != len(SCALE_WEIGHTS):
        raise ValueError(
            f"total_loss: need {len(SCALE_WEIGHTS)} scales, got {len(scale_logits)} logits "
            f"and {len(gt_pyramid)} label grids"
        )
    comps = []
    for logits, labels in zip(scale_logits, gt_pyramid):
        k = logits.shape[-1]
        flat = ad.reshape(logits, (int(np.prod(logits.shape[:-1])), k))
        lab = np.asarray(labels).reshape(-1)
        probs = ad.softmax(flat, axis=1)
        comps.append(
            (
                focal_loss(flat, lab, gamma),
                lovasz_softmax(probs, lab),
                scal_loss(probs, lab, "geo"),
                scal_loss(probs, lab, "sem"),
            )
        )
    empty = targets is None or targets.empty
    if empty:
        bce = Tensor(0.0)
    else:
        bce = depth_bce(depth, targets)
    total = assemble_total(comps, bce, lam)
    report = LossReport(
        focal=[float(c[0].data) for c in comps],
        lovasz=[float(c[1].data) for c in comps],
        scal_geo=[float(c[2].data) for c in comps],
        scal_sem=[float(c[3].data) for c in comps],
        depth_bce=float(bce.data),
        total=float(total.data),
        lam=lam,
        depth_mask_empty=empty,
    )
    return total, report
