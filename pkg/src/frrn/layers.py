"""Composite building blocks: residual units and the two-stream units that
couple a full-resolution residual stream with a pooled stream.

A unit is described by a small spec dataclass, contributes named parameters
via `*_param_specs`, and is applied to a tape via `*_forward`. Parameter
names follow "<stage>.<unit>.<layer>", e.g. "enc0.1.conv2.w", which is also
the naming used by the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNormStats, Parameter, ShapeError

VALID_SCALES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class RUSpec:
    """Residual unit: x + F(x), F = [conv3x3-BN-ReLU]-[conv3x3-BN]."""

    channels: int

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


@dataclass(frozen=True)
class FRRUSpec:
    """Two-stream unit operating on a pooled stream at `scale` and a
    full-resolution residual stream of `residual_channels`."""

    pool_channels: int
    residual_channels: int = 32
    scale: int = 2

    def __post_init__(self):
        if self.pool_channels < 1:
            raise ValueError(f"pool_channels must be >= 1, got {self.pool_channels}")
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {self.scale}")


class ParamStore:
    """Named parameters plus batch-norm running stats, in creation order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = {}
        self.bn_stats = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter '{name}'")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def add_bn(self, name, channels):
        self.add(name + ".gamma", np.ones(channels))
        self.add(name + ".beta", np.zeros(channels))
        self.bn_stats[name] = BatchNormStats.create(channels, self.dtype)

    def param(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def stats(self, name):
        return self.bn_stats[name]

    def parameters(self):
        return list(self._params.values())

    def names(self):
        return list(self._params.keys())

    def total_size(self):
        return sum(p.size for p in self._params.values())


# ---------------------------------------------------------------------------
# parameter specs: ("conv"|"bias"|"bn", name, shape-or-channels)
# ---------------------------------------------------------------------------


def ru_param_specs(prefix, channels):
    yield ("conv", f"{prefix}.conv1.w", (channels, channels, 3, 3))
    yield ("bn", f"{prefix}.bn1", channels)
    yield ("conv", f"{prefix}.conv2.w", (channels, channels, 3, 3))
    yield ("bn", f"{prefix}.bn2", channels)


def frru_param_specs(prefix, spec, in_pool_channels):
    cin = in_pool_channels + spec.residual_channels
    m = spec.pool_channels
    yield ("conv", f"{prefix}.conv1.w", (m, cin, 3, 3))
    yield ("bn", f"{prefix}.bn1", m)
    yield ("conv", f"{prefix}.conv2.w", (m, m, 3, 3))
    yield ("bn", f"{prefix}.bn2", m)
    yield ("conv", f"{prefix}.res1x1.w", (spec.residual_channels, m, 1, 1))
    yield ("bias", f"{prefix}.res1x1.b", (spec.residual_channels,))


def spec_param_count(entries):
    total = 0
    for kind, _, shape in entries:
        if kind == "bn":
            total += 2 * shape
        else:
            total += int(np.prod(shape))
    return total


def materialize(entries, store, rng):
    """Create parameters for spec entries: Kaiming-normal conv weights
    (fan-in, ReLU gain), zero biases, BN gamma=1 / beta=0. "conv_small" uses
    std 0.01: residual additions grow activation variance with depth, and a
    Kaiming-scaled classifier then saturates the softmax past the loss clamp
    at init, killing the training signal."""
    for kind, name, shape in entries:
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(2.0 / fan_in)
            store.add(name, rng.standard_normal(shape) * std)
        elif kind == "conv_small":
            store.add(name, rng.standard_normal(shape) * 0.01)
        elif kind == "bias":
            store.add(name, np.zeros(shape))
        elif kind == "bn":
            store.add_bn(name, shape)
        else:
            raise ValueError(f"unknown param kind '{kind}'")


# ---------------------------------------------------------------------------
# forwards
# ---------------------------------------------------------------------------


def conv_bn_relu(tape, x, store, conv_name, bn_name):
    h = tape.conv2d(x, store.param(conv_name + ".w"))
    h = tape.batch_norm(h, store.param(bn_name + ".gamma"),
                        store.param(bn_name + ".beta"), store.stats(bn_name))
    return tape.relu(h)


def ru_forward(tape, x, spec, store, prefix):
    """x + F(x); the skip path is a strict identity, so the input must
    already have `spec.channels` channels (no projection shortcut)."""
    cin = tape.value(x).shape[1]
    if cin != spec.channels:
        raise ShapeError(
            f"{prefix}: residual unit expects {spec.channels} channels, got "
            f"{cin} (no projection shortcut)")
    h = conv_bn_relu(tape, x, store, f"{prefix}.conv1", f"{prefix}.bn1")
    h = tape.conv2d(h, store.param(f"{prefix}.conv2.w"))
    h = tape.batch_norm(h, store.param(f"{prefix}.bn2.gamma"),
                        store.param(f"{prefix}.bn2.beta"),
                        store.stats(f"{prefix}.bn2"))
    return tape.add(x, h)


def frru_forward(tape, z, y, spec, store, prefix):
    """One two-stream unit.

    The residual stream z is max-pooled down to the pooled stream's scale,
    concatenated with y, passed through two conv3x3-BN-ReLU units (the new
    pooled stream), and a 1x1 conv + bias (no BN, no activation) computes the
    residual that is unpooled back and added onto z.
    """
    zc = tape.value(z).shape[1]
    if zc != spec.residual_channels:
        raise ShapeError(
            f"{prefix}: residual stream has {zc} channels, expected "
            f"{spec.residual_channels}")
    zp = tape.max_pool(z, spec.scale)
    m = tape.concat_channels(zp, y)
    m = conv_bn_relu(tape, m, store, f"{prefix}.conv1", f"{prefix}.bn1")
    m = conv_bn_relu(tape, m, store, f"{prefix}.conv2", f"{prefix}.bn2")
    r = tape.conv2d(m, store.param(f"{prefix}.res1x1.w"),
                    store.param(f"{prefix}.res1x1.b"), pad=0)
    r = tape.unpool_repeat(r, spec.scale)
    z_out = tape.add(z, r)
    return z_out, m
