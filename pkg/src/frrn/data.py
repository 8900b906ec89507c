"""Synthetic desk-scale segmentation data and image/label file IO.

Scenes are street-like layers: a sky band (class 0) over a road band
(class 1), with rectangles, circles and triangles of the remaining classes
scattered on top in z-order. Labels are pixel-exact; Gaussian noise is added
to the image only. Generation is deterministic per seed, with per-image
streams derived as default_rng((seed, 2, index)).

Mandatory formats are binary PPM (P6) for images and PGM (P5) for label maps
(255 = void); .png works when Pillow is installed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loss import VOID_LABEL

PALETTE = np.array([
    (135, 206, 235),   # sky
    (90, 90, 90),      # road
    (220, 60, 60),     # rectangles
    (60, 190, 60),     # circles
    (240, 200, 40),    # triangles
    (70, 110, 230),    # rectangles
    (200, 80, 200),    # circles
    (250, 140, 40),    # triangles
], dtype=np.uint8)

SHAPE_KINDS = ("rect", "circle", "triangle")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    width: int = 128
    height: int = 64
    num_classes: int = 6
    shapes_min: int = 3
    shapes_max: int = 6
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= 8:
            raise ValueError(f"num_classes must be in [2, 8], got {self.num_classes}")


@dataclass
class SegmentationSample:
    image: np.ndarray   # (1, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8, 255 = void


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    cy: int
    cx: int
    h: int
    w: int


def shape_mask(shape, height, width):
    yy, xx = np.mgrid[0:height, 0:width]
    if shape.kind == "rect":
        return ((np.abs(yy - shape.cy) <= shape.h // 2)
                & (np.abs(xx - shape.cx) <= shape.w // 2))
    if shape.kind == "circle":
        r = min(shape.h, shape.w) // 2
        return (yy - shape.cy) ** 2 + (xx - shape.cx) ** 2 <= r * r
    if shape.kind == "triangle":
        # upward-pointing isosceles: apex at cy - h//2
        top = shape.cy - shape.h // 2
        rel = (yy - top) / max(shape.h, 1)
        inside_rows = (rel >= 0) & (rel <= 1)
        return inside_rows & (np.abs(xx - shape.cx) <= rel * (shape.w / 2))
    raise ValueError(f"unknown shape kind '{shape.kind}'")


def render_shapes(cfg, horizon, shapes):
    """Rasterize a scene: returns (image float64 pre-noise, labels uint8)."""
    h, w = cfg.height, cfg.width
    labels = np.where(np.arange(h)[:, None] < horizon, 0, 1).astype(np.uint8)
    labels = np.broadcast_to(labels, (h, w)).copy()
    for s in shapes:
        labels[shape_mask(s, h, w)] = s.cls
    image = PALETTE[labels].astype(np.float64) / 255.0
    return image, labels


def make_scene(cfg, index):
    """Deterministically generate scene number `index`: (image u8 HxWx3,
    labels u8 HxW)."""
    rng = np.random.default_rng((int(cfg.seed), 2, int(index)))
    h, w = cfg.height, cfg.width
    horizon = int(rng.integers(h // 4, 3 * h // 4))
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    shape_classes = list(range(2, cfg.num_classes))
    shapes = []
    for k in range(n_shapes):
        if shape_classes and k == 0:
            # rotate the forced class so every class occurs in any split of
            # reasonable size
            cls = shape_classes[index % len(shape_classes)]
        elif shape_classes:
            cls = int(rng.choice(shape_classes))
        else:
            break
        kind = SHAPE_KINDS[(cls - 2) % len(SHAPE_KINDS)]
        sh = int(rng.integers(h // 8, h // 2))
        sw = int(rng.integers(w // 16, w // 4))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        shapes.append(Shape(kind, cls, cy, cx, sh, sw))
    image, labels = render_shapes(cfg, horizon, shapes)
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return np.round(image * 255.0).astype(np.uint8), labels


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_pnm_header(f, magic):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":
            f.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if tok:
            vals.append(int(tok))
    if vals[2] != 255:
        raise ValueError("only 8-bit maxval 255 supported")
    return vals[0], vals[1]


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def _png_module():
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError(
            "PNG support requires Pillow (pip install Pillow)") from None
    return Image


def read_image(path):
    """8-bit RGB image as (H, W, 3) uint8 (PPM or PNG)."""
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    if path.suffix == ".png":
        return np.asarray(_png_module().open(path).convert("RGB"))
    raise ValueError(f"unknown image format '{path.suffix}'")


def read_label_map(path):
    """8-bit single-channel label map (PGM or PNG); 255 = void."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path)
    if path.suffix == ".png":
        return np.asarray(_png_module().open(path).convert("L"))
    raise ValueError(f"unknown label format '{path.suffix}'")


def save_label(labels, path):
    path = Path(path)
    if path.suffix == ".pgm":
        write_pgm(path, labels)
    elif path.suffix == ".png":
        _png_module().fromarray(np.asarray(labels, dtype=np.uint8), "L").save(path)
    else:
        raise ValueError(f"unknown label format '{path.suffix}'")


def load_sample(image_path, label_path):
    """Image scaled to [0,1] as (1,3,H,W) float32 + uint8 label map."""
    rgb = read_image(image_path)
    labels = read_label_map(label_path)
    if rgb.shape[:2] != labels.shape:
        raise ValueError(
            f"image {rgb.shape[:2]} and label {labels.shape} dims differ "
            f"({image_path} / {label_path})")
    image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    return SegmentationSample(image, labels)


# ---------------------------------------------------------------------------
# dataset generation / manifest
# ---------------------------------------------------------------------------


def generate_dataset(cfg, n_train, n_val, out_dir):
    """Write images, label maps and manifest.json; returns the manifest."""
    out = Path(out_dir)
    manifest = {
        "width": cfg.width, "height": cfg.height,
        "num_classes": cfg.num_classes, "void_label": VOID_LABEL,
        "seed": cfg.seed, "noise": cfg.noise,
        "palette": PALETTE[:cfg.num_classes].tolist(),
        "train": [], "val": [],
    }
    index = 0
    for split, count in (("train", n_train), ("val", n_val)):
        sdir = out / split
        sdir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, lbl = make_scene(cfg, index)
            ipath = sdir / f"img_{i:05d}.ppm"
            lpath = sdir / f"lbl_{i:05d}.pgm"
            try:
                write_ppm(ipath, img)
                write_pgm(lpath, lbl)
            except OSError as e:
                raise OSError(f"failed writing {ipath}: {e}") from e
            manifest[split].append({
                "image": str(ipath.relative_to(out)),
                "label": str(lpath.relative_to(out)),
            })
            index += 1
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as f:
        manifest = json.load(f)
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(manifest, split):
    root = Path(manifest["_root"])
    return [load_sample(root / e["image"], root / e["label"])
            for e in manifest[split]]
