"""Data augmentation: bias-corrected gamma sampling and translation.

Gamma augmentation maps intensities x in [0,1] to x**gamma. Sampling gamma
naively (e.g. uniform on [0.25, 1.75]) biases the expected response curve; the
corrected scheme draws a zero-mean offset Z uniform on [-a, a] (a <= 0.5) and
sets

    gamma = log(0.5 + Z/sqrt(2)) / log(0.5 - Z/sqrt(2))

so that the solution u of the fixed-point equation 1 - u**gamma = u is
0.5 - Z/sqrt(2), whose expectation over Z is exactly 0.5. Z -> -Z maps
gamma -> 1/gamma.

Translation shifts an image with edge-mirror reflection padding (the border
pixel is not repeated: abc -> b|abc) and shifts the label map with constant
void padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import VOID_LABEL


@dataclass
class GammaSampler:
    """Draws gamma via the bias-corrected scheme; `a` is the half-width of
    the uniform support of Z and controls augmentation strength."""

    a: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.a <= 0.5:
            raise ValueError(f"a must be in [0, 0.5], got {self.a}")
        self._rng = np.random.default_rng((int(self.seed), 3))

    def sample_z(self, size=None):
        return self._rng.uniform(-self.a, self.a, size=size)

    def sample(self, size=None):
        return gamma_for_z(self.sample_z(size))


def gamma_for_z(z):
    """Deterministic part of the corrected sampler; gamma_for_z(0) == 1."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(z) > 0.5):
        raise ValueError("Z must lie in [-0.5, 0.5]")
    s = z / np.sqrt(2.0)
    out = np.log(0.5 + s) / np.log(0.5 - s)
    return float(out) if out.ndim == 0 else out


def sample_gamma(sampler):
    return float(sampler.sample())


def naive_gamma(lo, hi, rng):
    """Uniform gamma baseline used to demonstrate the bias."""
    if not 0.0 < lo <= hi:
        raise ValueError(f"need 0 < lo <= hi, got [{lo}, {hi}]")
    return rng.uniform(lo, hi)


def fixed_point_u(gamma, tol=1e-12, max_iter=200):
    """Solve 1 - u**gamma = u on (0, 1) by bisection (vectorized)."""
    g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if np.any(g <= 0):
        raise ValueError("gamma must be positive")
    lo = np.zeros_like(g)
    hi = np.ones_like(g)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = 1.0 - mid ** g - mid  # decreasing in u
        lo = np.where(f > 0, mid, lo)
        hi = np.where(f > 0, hi, mid)
        if np.max(hi - lo) < tol:
            break
    out = 0.5 * (lo + hi)
    return float(out[0]) if np.isscalar(gamma) or np.ndim(gamma) == 0 else out


def apply_gamma(image, gamma):
    """Elementwise x**gamma; intensities must already be in [0, 1]."""
    image = np.asarray(image)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return (image ** image.dtype.type(gamma)).astype(image.dtype, copy=False)


def translate(image, labels, dx, dy, void_label=VOID_LABEL):
    """Shift image (reflect padding) and labels (void padding) by (dx, dy).

    Positive dx moves content right, positive dy moves it down. Output
    dimensions are unchanged; |dx| < W and |dy| < H.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    h, w = labels.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift ({dx},{dy}) exceeds dims ({h},{w})")
    if dx == 0 and dy == 0:
        return image.copy(), labels.copy()
    py, px = abs(dy), abs(dx)
    pad_img = [(0, 0)] * (image.ndim - 2) + [(py, py), (px, px)]
    img_p = np.pad(image, pad_img, mode="reflect")
    lbl_p = np.pad(labels, ((py, py), (px, px)), mode="constant",
                   constant_values=void_label)
    y0 = py - dy
    x0 = px - dx
    img_out = img_p[..., y0:y0 + h, x0:x0 + w].copy()
    lbl_out = lbl_p[y0:y0 + h, x0:x0 + w].copy()
    return img_out, lbl_out


def random_translation(rng, max_dx, max_dy):
    return int(rng.integers(-max_dx, max_dx + 1)), int(rng.integers(-max_dy, max_dy + 1))
