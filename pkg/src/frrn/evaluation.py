"""Confusion-matrix IoU metrics and trimap boundary-adherence evaluation.

A trimap evaluation restricts scoring to pixels within Euclidean distance r
of a ground-truth label boundary. Boundaries use 4-connectivity: a non-void
pixel is a boundary pixel iff at least one of its four neighbours carries a
different non-void label. Void pixels are excluded from all counts and are
never boundary sources.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .loss import VOID_LABEL


@dataclass
class ConfusionMatrix:
    """Pixel counts, rows = ground truth, cols = prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def total(self):
        return int(self.counts.sum())


def accumulate(cm, gt_labels, pred_labels, region_mask=None,
               void_label=VOID_LABEL):
    """Add one image's pixels to cm; void and out-of-mask pixels are skipped."""
    gt = np.asarray(gt_labels)
    pred = np.asarray(pred_labels)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    c = cm.num_classes
    sel = gt != void_label
    if region_mask is not None:
        if region_mask.shape != gt.shape:
            raise ValueError("region_mask shape does not match labels")
        sel &= region_mask
    g = gt[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    if g.size and (g.max() >= c or p.max() >= c or g.min() < 0 or p.min() < 0):
        raise ValueError(f"labels outside [0, {c}) encountered")
    idx = g * c + p
    cm.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
    return cm


def mean_iou(cm):
    """Per-class IoU (nan where a class is absent from gt and prediction)
    and the mean over present classes."""
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("no classes present: confusion matrix is empty")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = inter[present] / union[present]
    return per_class, float(per_class[present].mean())


@dataclass
class TrimapBand:
    radius: int
    mask: np.ndarray  # bool, True within `radius` of a boundary


def boundary_mask(gt_labels, void_label=VOID_LABEL):
    """Non-void pixels with a 4-neighbour of a different non-void label."""
    a = np.asarray(gt_labels)
    nv = a != void_label
    b = np.zeros(a.shape, dtype=bool)
    dh = (a[:, 1:] != a[:, :-1]) & nv[:, 1:] & nv[:, :-1]
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    dv = (a[1:, :] != a[:-1, :]) & nv[1:, :] & nv[:-1, :]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    return b


def boundary_distance(gt_labels, void_label=VOID_LABEL):
    """Exact Euclidean distance of every pixel to the nearest boundary pixel
    (inf when the map has no boundary)."""
    b = boundary_mask(gt_labels, void_label)
    if not b.any():
        return np.full(b.shape, np.inf)
    return ndimage.distance_transform_edt(~b)


def trimap_band(gt_labels, radius, void_label=VOID_LABEL, distance=None):
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if distance is None:
        distance = boundary_distance(gt_labels, void_label)
    return TrimapBand(radius, distance <= radius)


def trimap_curve(gt, pred, radii, num_classes, void_label=VOID_LABEL):
    """Mean IoU restricted to boundary bands of increasing radius.

    gt/pred are label maps or lists of label maps; one distance transform is
    computed per image and reused for all radii. Returns [(r, mean_iou)].
    """
    gts = [gt] if isinstance(gt, np.ndarray) and gt.ndim == 2 else list(gt)
    preds = [pred] if isinstance(pred, np.ndarray) and pred.ndim == 2 else list(pred)
    if len(gts) != len(preds):
        raise ValueError("gt and pred counts differ")
    radii = list(radii)
    if sorted(radii) != radii:
        raise ValueError("radii must be sorted ascending")
    cms = [ConfusionMatrix.zeros(num_classes) for _ in radii]
    for g, p in zip(gts, preds):
        dist = boundary_distance(g, void_label)
        for cm, r in zip(cms, radii):
            accumulate(cm, g, p, region_mask=dist <= r, void_label=void_label)
    return [(r, mean_iou(cm)[1]) for cm, r in zip(cms, radii)]


def remap_labels(labels, mapping, void_label=VOID_LABEL):
    """Apply a class->category mapping (dict) to a label map; void passes
    through unchanged."""
    a = np.asarray(labels)
    lut = np.arange(256, dtype=np.int64)
    for k, v in mapping.items():
        lut[int(k)] = int(v)
    lut[void_label] = void_label
    return lut[a]
