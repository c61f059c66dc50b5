"""Dataset I/O, mask color coding, deterministic splits, and batching.

On-disk layout: ``root/images/<id>.png`` and ``root/masks/<id>.png``, both
8-bit RGB.  Masks use the annotation palette black=background (class 0),
green=healthy (class 1), red=diseased (class 2); decoding is tolerant of
compression artifacts (dominant channel >= 128) while exact palette colors
always decode exactly.

The synthetic generator paints textured scenes of bright elongated "spikes"
carrying reddish "lesions", with ground-truth masks exact by construction.
There is deliberately no augmentation hook anywhere in this pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_BACKGROUND = 0
CLASS_HEALTHY = 1
CLASS_DISEASED = 2

# row per class index
PALETTE = np.array([[0, 0, 0], [0, 255, 0], [255, 0, 0]], dtype=np.uint8)


class DataError(RuntimeError):
    """A dataset directory or file is missing, unreadable, or inconsistent."""


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] floats in [0, 1]
    mask: np.ndarray  # [H, W] ints in {0, 1, 2}
    id: str


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def to_json(self):
        return json.dumps({"train": self.train, "val": self.val, "test": self.test}, indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(train=list(raw["train"]), val=list(raw["val"]), test=list(raw["test"]))


def decode_color_mask(rgb):
    """Map an 8-bit [3, H, W] color mask to class indices.

    A pixel is healthy (1) when green is the strict channel maximum and at
    least 128; diseased (2) when red is; otherwise background (0).
    """
    rgb = np.asarray(rgb)
    r = rgb[0].astype(np.int16)
    g = rgb[1].astype(np.int16)
    b = rgb[2].astype(np.int16)
    mask = np.zeros(r.shape, dtype=np.uint8)
    mask[(g > r) & (g > b) & (g >= 128)] = CLASS_HEALTHY
    mask[(r > g) & (r > b) & (r >= 128)] = CLASS_DISEASED
    return mask


def encode_color_mask(mask):
    """Inverse of decode for the exact palette: [H, W] indices -> [H, W, 3] u8."""
    return PALETTE[np.asarray(mask, dtype=np.intp)]


def _read_rgb(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def load_dataset(root_dir):
    """Load all image/mask pairs under ``root_dir``, sorted by id."""
    root = Path(root_dir)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir():
        return []
    samples = []
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    mask_ids = {p.stem for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else set()
    for orphan in sorted(mask_ids - set(ids)):
        raise DataError(f"mask {orphan!r} has no matching image")
    for sid in ids:
        if sid not in mask_ids:
            raise DataError(f"image {sid!r} has no matching mask")
        img = _read_rgb(img_dir / f"{sid}.png")
        mask_rgb = _read_rgb(mask_dir / f"{sid}.png")
        if img.shape[:2] != mask_rgb.shape[:2]:
            raise DataError(
                f"{sid!r}: image is {img.shape[:2]} but mask is {mask_rgb.shape[:2]}"
            )
        samples.append(
            Sample(
                image=img.transpose(2, 0, 1).astype(np.float64) / 255.0,
                mask=decode_color_mask(mask_rgb.transpose(2, 0, 1)),
                id=sid,
            )
        )
    return samples


def split_dataset(samples, seed):
    """Deterministic 70/15/15 partition by id.

    Train takes floor(0.7 n), validation floor(0.15 n), test the remainder.
    """
    ids = [s.id for s in samples]
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def batches(samples, batch_size=8, seed=0, epoch=0):
    """Yield (images [B, 3, H, W], masks [B, H, W]) with a per-epoch shuffle.

    The order is a pure function of (seed, epoch); the final partial batch is
    kept.  No augmentation of any kind is applied.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    samples = list(samples)
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield (
            np.stack([s.image for s in chunk]),
            np.stack([s.mask for s in chunk]),
        )


# -- synthetic scenes ------------------------------------------------------------


def _ellipse(size, cy, cx, a, b, theta):
    """Boolean mask of a rotated ellipse with semi-axes (a, b)."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _smooth_noise(rng, size, cells=8):
    """Low-frequency texture: bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, size)
    xs = np.linspace(0, cells, size)
    y0 = np.clip(ys.astype(int), 0, cells - 1)
    x0 = np.clip(xs.astype(int), 0, cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = coarse
    return (
        g[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + g[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + g[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + g[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )


def make_scene(rng, size):
    """One synthetic image and its exact index mask.

    Returns (image [H, W, 3] uint8, mask [H, W] uint8).
    """
    # textured dark-green field
    tex = _smooth_noise(rng, size)
    grain = rng.random((size, size)) * 0.1
    img = np.zeros((size, size, 3))
    img[..., 0] = 0.10 + 0.08 * tex + grain * 0.3
    img[..., 1] = 0.24 + 0.12 * tex + grain * 0.5
    img[..., 2] = 0.08 + 0.06 * tex + grain * 0.3

    mask = np.zeros((size, size), dtype=np.uint8)
    spike_area = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        a = rng.uniform(0.22, 0.36) * size
        b = rng.uniform(0.32, 0.5) * a
        cy, cx = rng.uniform(0.18, 0.82, size=2) * size
        theta = rng.uniform(0.0, np.pi)
        spike = _ellipse(size, cy, cx, a, b, theta)
        spike_area |= spike
        shade = 0.9 + 0.1 * tex[spike]
        img[spike, 0] = 0.88 * shade
        img[spike, 1] = 0.82 * shade
        img[spike, 2] = 0.52 * shade
    mask[spike_area] = CLASS_HEALTHY

    for _ in range(int(rng.integers(1, 3))):
        if not spike_area.any():
            break
        idx = rng.integers(0, int(spike_area.sum()))
        cy, cx = np.argwhere(spike_area)[idx]
        a = rng.uniform(0.12, 0.2) * size
        b = rng.uniform(0.75, 0.95) * a
        theta = rng.uniform(0.0, np.pi)
        lesion = _ellipse(size, cy, cx, a, b, theta) & spike_area
        shade = 0.95 + 0.05 * tex[lesion]
        img[lesion, 0] = 0.85 * shade
        img[lesion, 1] = 0.13 * shade
        img[lesion, 2] = 0.10 * shade
        mask[lesion] = CLASS_DISEASED

    img += rng.standard_normal((size, size, 3)) * 0.008
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8), mask


def synth_generate(n, size, seed, out_dir):
    """Write ``n`` image/mask pairs, fully determined by the seed.

    Returns the list of generated ids.
    """
    if size % 32:
        raise ValueError(f"size must be a multiple of 32, got {size}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out}: {e}") from e
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        sid = f"{i:05d}"
        img, mask = make_scene(rng, size)
        Image.fromarray(img).save(out / "images" / f"{sid}.png")
        Image.fromarray(encode_color_mask(mask)).save(out / "masks" / f"{sid}.png")
        ids.append(sid)
    return ids
