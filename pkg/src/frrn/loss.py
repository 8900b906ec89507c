"""Bootstrapped cross-entropy over the K hardest pixels.

Given per-pixel class probabilities and integer labels (255 = void), the loss
averages -log p over the K non-void pixels whose true-class probability is
smallest. Selection is "K smallest with ties broken by ascending flat pixel
index", which makes the threshold well defined under ties; the reported
threshold is the (K+1)-th smallest true-class probability. Gradients flow
only through the selected pixels, and log is clamped at p >= 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, register_op

VOID_LABEL = 255
LOG_CLAMP = 1e-12


@dataclass
class LossReport:
    loss: float
    k_used: int
    threshold: float
    selected_mask: np.ndarray  # (N, H, W) bool


def k_schedule(image_height, image_width, fraction):
    """Number of supervised pixels for a given image size and loss fraction."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return int(round(fraction * image_height * image_width))


def _select(p_true, valid_flat, k):
    """Indices (into the flat pixel axis) of the k smallest true-class
    probabilities among valid pixels, stable in pixel order."""
    cand = np.flatnonzero(valid_flat)
    order = np.argsort(p_true[cand], kind="stable")
    sel = cand[order[:k]]
    threshold = float(p_true[cand[order[k]]]) if k < cand.size else np.inf
    return sel, threshold


def _bce_fwd(attrs, pvals, xs, training, replay):
    (probs,) = xs
    labels = attrs["labels"]
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match probs {probs.shape}")
    lflat = labels.reshape(-1)
    valid = lflat != VOID_LABEL
    if not np.all((lflat[valid] >= 0) & (lflat[valid] < c)):
        raise ValueError("labels contain class ids outside [0, num_classes)")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no supervised pixels: all labels are void")
    k = min(attrs["k"], n_valid)
    if k < 1:
        raise ValueError(f"K must be positive, got {attrs['k']}")

    pix = np.arange(n * h * w)
    bi, rem = np.divmod(pix, h * w)
    yi, xi = np.divmod(rem, w)
    p_true = probs[bi, np.where(valid, lflat, 0), yi, xi]
    sel, threshold = _select(p_true, valid, k)
    p_sel = p_true[sel]
    loss = -np.log(np.maximum(p_sel, LOG_CLAMP)).sum() / k
    out = np.asarray(loss, dtype=probs.dtype).reshape(1, 1, 1, 1)
    saved = (sel.astype(np.int64), p_sel.copy())
    attrs["_k_used"] = k
    attrs["_threshold"] = threshold
    return out, saved


def _bce_bwd(attrs, pvals, xs, out, saved, gy):
    (probs,) = xs
    labels = attrs["labels"]
    sel, p_sel = saved
    n, c, h, w = probs.shape
    k = attrs["_k_used"]
    g = np.zeros_like(probs)
    sn, srem = np.divmod(sel, h * w)
    sh, sw = np.divmod(srem, w)
    sc = labels[sn, sh, sw]
    # the clamp bounds the slope at 1/clamp instead of zeroing it, so pixels
    # saturated at init still receive a (softmax-attenuated) training signal
    coeff = -1.0 / (k * np.maximum(p_sel, LOG_CLAMP))
    g[sn, sc, sh, sw] = (gy.flat[0] * coeff).astype(probs.dtype)
    return [g], []


register_op("bootstrapped_ce", _bce_fwd, _bce_bwd)


def bootstrapped_ce(tape, probs, labels, k):
    """Record the loss on the tape; returns (loss_node, LossReport)."""
    labels = np.asarray(labels)
    node = tape.apply("bootstrapped_ce", (probs,), labels=labels, k=int(k))
    attrs = tape.nodes[node].attrs
    sel = tape.nodes[node].saved[0]
    nb, _, h, w = tape.value(probs).shape
    mask = np.zeros(nb * h * w, dtype=bool)
    mask[sel] = True
    report = LossReport(float(tape.value(node).flat[0]), attrs["_k_used"],
                        attrs["_threshold"], mask.reshape(nb, h, w))
    return node, report
