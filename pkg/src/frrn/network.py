"""Declarative network descriptions and their forward passes.

Two families are supported:

* "frrn": a head of 5x5 conv + residual units, a two-stream body whose
  pooled stream is halved by max pooling between encoder stages and doubled
  again in the decoder while a 32-channel residual stream stays at full
  resolution, and a tail that concatenates both streams, adapts to the base
  width with a 1x1 conv, and classifies per pixel.
* "baseline": the same stage layout with single-stream residual units and
  long-range skip connections from the input of each pooling layer to the
  output of the matching unpooling layer, merged by channel concatenation
  followed by a 1x1 conv back to the stage width.

Stage tuples are (scale, channels, n_units). Channel widths double per
pooling step up to 8x the base width; the standard configuration uses a base
width of 48 and the "mini" desk variants divide all widths by 4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .autodiff import ShapeError, Tape
from .layers import FRRUSpec, ParamStore, RUSpec


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    num_classes: int
    base_channels: int = 48
    residual_channels: int = 32
    encoder: tuple = ()
    decoder: tuple = ()
    kind: str = "frrn"
    upsample: str = "repeat"  # pooled-stream decoder upscaling: repeat|bilinear
    head_units: int = 3
    tail_units: int = 3

    @property
    def max_scale(self):
        return self.encoder[-1][0]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")
        if self.kind not in ("frrn", "baseline"):
            raise ValueError(f"unknown network kind '{self.kind}'")
        if self.upsample not in ("repeat", "bilinear"):
            raise ValueError(f"unknown upsample mode '{self.upsample}'")
        scales = [s for s, _, _ in self.encoder]
        if scales != [2 ** (i + 1) for i in range(len(scales))]:
            raise ValueError(f"encoder scales must double from 2, got {scales}")
        dscales = [s for s, _, _ in self.decoder]
        if dscales != [2 ** i for i in range(len(scales) - 1, 0, -1)]:
            raise ValueError(f"decoder scales must halve to 2, got {dscales}")


def _scaled(base, mults_enc, units_enc, mults_dec, units_dec):
    enc = tuple((2 ** (i + 1), m * base, n)
                for i, (m, n) in enumerate(zip(mults_enc, units_enc)))
    dec = tuple((2 ** (len(mults_enc) - 1 - i), m * base, n)
                for i, (m, n) in enumerate(zip(mults_dec, units_dec)))
    return enc, dec


def build_frrn_a(num_classes, base_channels=48, residual_channels=32,
                 name="frrn-a", kind="frrn", upsample="repeat"):
    enc, dec = _scaled(base_channels, (2, 4, 8, 8), (3, 4, 2, 2),
                       (4, 4, 2), (2, 2, 2))
    return NetworkSpec(name, num_classes, base_channels, residual_channels,
                       enc, dec, kind=kind, upsample=upsample)


def build_frrn_b(num_classes, base_channels=48, residual_channels=32,
                 name="frrn-b", upsample="repeat"):
    enc, dec = _scaled(base_channels, (2, 4, 8, 8, 8), (3, 4, 2, 2, 2),
                       (4, 4, 4, 2), (2, 2, 2, 2))
    return NetworkSpec(name, num_classes, base_channels, residual_channels,
                       enc, dec, upsample=upsample)


def build_frrn_a_mini(num_classes):
    return build_frrn_a(num_classes, base_channels=12, residual_channels=8,
                        name="frrn-a-mini")


def build_frrn_b_mini(num_classes):
    return build_frrn_b(num_classes, base_channels=12, residual_channels=8,
                        name="frrn-b-mini")


def build_resnet_baseline(num_classes, base_channels=48,
                          name="resnet-baseline"):
    return build_frrn_a(num_classes, base_channels=base_channels,
                        residual_channels=0, name=name, kind="baseline")


def build_resnet_baseline_mini(num_classes):
    return build_resnet_baseline(num_classes, base_channels=12,
                                 name="resnet-baseline-mini")


ARCHS = {
    "frrn-a": build_frrn_a,
    "frrn-b": build_frrn_b,
    "frrn-a-mini": build_frrn_a_mini,
    "frrn-b-mini": build_frrn_b_mini,
    "resnet-baseline": build_resnet_baseline,
    "resnet-baseline-mini": build_resnet_baseline_mini,
}


# ---------------------------------------------------------------------------
# parameter enumeration (single walker used by count / init / table)
# ---------------------------------------------------------------------------


def param_specs(spec):
    bc, rc, c = spec.base_channels, spec.residual_channels, spec.num_classes
    yield ("conv", "head.conv.w", (bc, 3, 5, 5))
    yield ("bn", "head.bn", bc)
    for i in range(spec.head_units):
        yield from layers.ru_param_specs(f"head.{i}", bc)

    if spec.kind == "frrn":
        yield ("conv", "split.w", (rc, bc, 1, 1))
        yield ("bias", "split.b", (rc,))
        y_ch = bc
        for si, (scale, ch, n) in enumerate(spec.encoder):
            for ui in range(n):
                u = FRRUSpec(ch, rc, scale)
                yield from layers.frru_param_specs(f"enc{si}.{ui}", u, y_ch)
                y_ch = ch
        for si, (scale, ch, n) in enumerate(spec.decoder):
            for ui in range(n):
                u = FRRUSpec(ch, rc, scale)
                yield from layers.frru_param_specs(f"dec{si}.{ui}", u, y_ch)
                y_ch = ch
        yield ("conv", "merge.w", (bc, y_ch + rc, 1, 1))
        yield ("bias", "merge.b", (bc,))
    else:
        x_ch = bc
        skip_chs = []
        for si, (scale, ch, n) in enumerate(spec.encoder):
            skip_chs.append(x_ch)
            if x_ch != ch:
                yield ("conv", f"enc{si}.in.w", (ch, x_ch, 1, 1))
                yield ("bias", f"enc{si}.in.b", (ch,))
            for ui in range(n):
                yield from layers.ru_param_specs(f"enc{si}.{ui}", ch)
            x_ch = ch
        for si, (scale, ch, n) in enumerate(spec.decoder):
            skip_ch = skip_chs.pop()
            yield ("conv", f"dec{si}.in.w", (ch, x_ch + skip_ch, 1, 1))
            yield ("bias", f"dec{si}.in.b", (ch,))
            for ui in range(n):
                yield from layers.ru_param_specs(f"dec{si}.{ui}", ch)
            x_ch = ch
        yield ("conv", "merge.w", (bc, x_ch + skip_chs.pop(), 1, 1))
        yield ("bias", "merge.b", (bc,))

    for i in range(spec.tail_units):
        yield from layers.ru_param_specs(f"tail.{i}", bc)
    yield ("conv_small", "classifier.w", (c, bc, 1, 1))
    yield ("bias", "classifier.b", (c,))


def count_parameters(spec):
    """Learnable parameters only; BN running stats are excluded."""
    return layers.spec_param_count(param_specs(spec))


def param_table(spec):
    """Per-stage parameter counts: list of (stage, count)."""
    groups = {}
    for entry in param_specs(spec):
        stage = entry[1].split(".")[0]
        groups[stage] = groups.get(stage, 0) + layers.spec_param_count([entry])
    return list(groups.items())


def init_params(spec, seed=0, dtype=np.float32):
    store = ParamStore(dtype)
    rng = np.random.default_rng((int(seed), 0))
    layers.materialize(param_specs(spec), store, rng)
    return store


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardInfo:
    logits: int = -1
    probs: int = -1
    z_nodes: list = field(default_factory=list)
    y_nodes: list = field(default_factory=list)


def forward(spec, store, x, training=True, cut_policy="none",
            check_finite=False):
    """Run the network on x (N,3,H,W); returns (tape, ForwardInfo).

    cut_policy "stages" places a tape cut after every pooling and unpooling
    step of the pooled stream (9 blocks for the standard two-stream design
    with 4 pooling stages); "none" leaves the tape unpartitioned.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N,3,H,W) input, got {x.shape}")
    div = spec.max_scale
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(
            f"input spatial dims {x.shape[2]}x{x.shape[3]} must be divisible "
            f"by {div} for {spec.name}")
    if cut_policy not in ("none", "stages"):
        raise ValueError(f"unknown cut policy '{cut_policy}'")

    tape = Tape(training=training, check_finite=check_finite)
    cuts = cut_policy == "stages"
    info = ForwardInfo()

    def up(nid):
        if spec.upsample == "bilinear":
            return tape.upsample_bilinear(nid, 2)
        return tape.unpool_repeat(nid, 2)

    xin = tape.input(x)
    h = layers.conv_bn_relu(tape, xin, store, "head.conv", "head.bn")
    for i in range(spec.head_units):
        h = layers.ru_forward(tape, h, RUSpec(spec.base_channels), store,
                              f"head.{i}")

    if spec.kind == "frrn":
        z = tape.conv2d(h, store.param("split.w"), store.param("split.b"),
                        pad=0)
        y = tape.max_pool(h, 2)
        if cuts:
            tape.cut()
        info.z_nodes.append(z)
        for si, (scale, ch, n) in enumerate(spec.encoder):
            if si > 0:
                y = tape.max_pool(y, 2)
                if cuts:
                    tape.cut()
            for ui in range(n):
                u = FRRUSpec(ch, spec.residual_channels, scale)
                z, y = layers.frru_forward(tape, z, y, u, store,
                                           f"enc{si}.{ui}")
                info.z_nodes.append(z)
                info.y_nodes.append(y)
        for si, (scale, ch, n) in enumerate(spec.decoder):
            y = up(y)
            if cuts:
                tape.cut()
            for ui in range(n):
                u = FRRUSpec(ch, spec.residual_channels, scale)
                z, y = layers.frru_forward(tape, z, y, u, store,
                                           f"dec{si}.{ui}")
                info.z_nodes.append(z)
                info.y_nodes.append(y)
        y = up(y)
        if cuts:
            tape.cut()
        m = tape.concat_channels(y, z)
        m = tape.conv2d(m, store.param("merge.w"), store.param("merge.b"),
                        pad=0)
    else:
        skips = []
        m = h
        for si, (scale, ch, n) in enumerate(spec.encoder):
            skips.append(m)
            m = tape.max_pool(m, 2)
            if cuts:
                tape.cut()
            if tape.value(m).shape[1] != ch:
                m = tape.conv2d(m, store.param(f"enc{si}.in.w"),
                                store.param(f"enc{si}.in.b"), pad=0)
            for ui in range(n):
                m = layers.ru_forward(tape, m, RUSpec(ch), store,
                                      f"enc{si}.{ui}")
        for si, (scale, ch, n) in enumerate(spec.decoder):
            m = up(m)
            if cuts:
                tape.cut()
            m = tape.concat_channels(m, skips.pop())
            m = tape.conv2d(m, store.param(f"dec{si}.in.w"),
                            store.param(f"dec{si}.in.b"), pad=0)
            for ui in range(n):
                m = layers.ru_forward(tape, m, RUSpec(ch), store,
                                      f"dec{si}.{ui}")
        m = up(m)
        if cuts:
            tape.cut()
        m = tape.concat_channels(m, skips.pop())
        m = tape.conv2d(m, store.param("merge.w"), store.param("merge.b"),
                        pad=0)

    for i in range(spec.tail_units):
        m = layers.ru_forward(tape, m, RUSpec(spec.base_channels), store,
                              f"tail.{i}")
    info.logits = tape.conv2d(m, store.param("classifier.w"),
                              store.param("classifier.b"), pad=0)
    info.probs = tape.softmax_channels(info.logits)
    return tape, info


def predict(spec, store, x):
    """Inference forward (running BN stats); returns the (N,c,H,W) class
    probabilities."""
    tape, info = forward(spec, store, x, training=False)
    return tape.value(info.probs)
