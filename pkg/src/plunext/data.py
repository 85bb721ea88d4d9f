"""Datasets: folder loaders, mask resampling, augmentation and synthetic thin lines."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ContractError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
VITL_CONDITIONS = ("original", "day", "fog", "night", "snow")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    condition: str | None = None

    def __post_init__(self):
        if __debug__:
            self.validate()

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ContractError(f"{self.id}: mask {self.mask.shape} vs image {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ContractError(f"{self.id}: image values outside [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError(f"{self.id}: mask values outside {{0, 1}}")


# ---------------------------------------------------------------- resampling

def downsample_mask(mask, factor: int):
    """Block-max downsampling by an integer factor; a 1-px line always survives.

    Works on numpy arrays or torch tensors whose last two dims are (H, W).
    """
    h, w = mask.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ContractError(f"mask dims {(h, w)} not divisible by factor {factor}")
    if factor == 1:
        return mask
    if isinstance(mask, torch.Tensor):
        lead = mask.shape[:-2]
        x = mask.reshape(-1, 1, h, w).float()
        out = F.max_pool2d(x, factor).to(mask.dtype)
        return out.reshape(*lead, h // factor, w // factor)
    m = np.asarray(mask)
    return m.reshape(*m.shape[:-2], h // factor, factor, w // factor, factor).max(axis=(-3, -1))


def _max_resample_axis(m: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = m.shape[axis]
    m = np.moveaxis(m, axis, 0)
    out = np.empty((size,) + m.shape[1:], dtype=m.dtype)
    for i in range(size):
        lo = (i * n) // size
        hi = max(lo + 1, -((-(i + 1) * n) // size))
        out[i] = m[lo:hi].max(axis=0)
    return np.moveaxis(out, 0, axis)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize with the max rule: a target pixel is set if any source pixel it overlaps is set."""
    out = _max_resample_axis(np.asarray(mask), size[0], 0)
    return _max_resample_axis(out, size[1], 1)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(image.shape[1:]) == tuple(size):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)
    antialias = size[0] < image.shape[1] or size[1] < image.shape[2]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=antialias)
    return out[0].clamp_(0.0, 1.0).numpy()


# ---------------------------------------------------------------- folder datasets

def _index_folder(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"missing folder: {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_pair(img_path: Path, mask_path: Path, target_size: int, sid: str, condition=None) -> Sample:
    try:
        with Image.open(img_path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(mask_path) as im:
            m = np.asarray(im.convert("L")) > 0
    except OSError as e:
        raise OSError(f"unreadable file in pair {sid!r}: {e}") from e
    if m.shape != img.shape[:2]:
        raise ContractError(f"{sid}: mask size {m.shape} != image size {img.shape[:2]}")
    size = (target_size, target_size)
    image = resize_image(img.transpose(2, 0, 1), size)
    mask = resize_mask(m.astype(np.uint8), size)
    return Sample(image, mask, sid, condition)


def _load_flat(root: Path, target_size: int, condition=None, prefix="") -> list[Sample]:
    images = _index_folder(root / "images")
    masks = _index_folder(root / "masks")
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        paths = [str(images.get(o) or masks.get(o)) for o in orphans]
        raise FileNotFoundError(f"unmatched image/mask files: {', '.join(paths)}")
    return [_read_pair(images[k], masks[k], target_size, prefix + k, condition) for k in sorted(images)]


def load_dataset(root, layout: str = "ttpla_like", target_size: int = 512) -> list[Sample]:
    """Load root/{images,masks}/<id>.* pairs, sorted by id.

    ``vitl_like`` roots hold one such folder per condition subdirectory; the
    samples carry their condition name and ids are prefixed ``<condition>/``.
    """
    root = Path(root)
    if layout == "ttpla_like":
        return _load_flat(root, target_size)
    if layout == "vitl_like":
        conds = sorted(p.name for p in root.iterdir() if p.is_dir())
        if not conds:
            raise FileNotFoundError(f"no condition subfolders under {root}")
        out = []
        for c in conds:
            out.extend(_load_flat(root / c, target_size, condition=c, prefix=f"{c}/"))
        return out
    raise ValueError(f"unknown layout {layout!r}")


def write_dataset(samples, out_dir) -> list[Path]:
    """Materialize samples as 8-bit PNGs under out_dir/{images,masks}/<id>.png."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        img = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        p_img = out_dir / "images" / f"{s.id}.png"
        p_mask = out_dir / "masks" / f"{s.id}.png"
        Image.fromarray(img, "RGB").save(p_img)
        Image.fromarray((s.mask * 255).astype(np.uint8), "L").save(p_mask)
        written += [p_img, p_mask]
    return written


# ---------------------------------------------------------------- synthetic lines

@dataclass
class SynthConfig:
    canvas: tuple[int, int] = (128, 128)
    lines_per_image: tuple[int, int] = (1, 3)
    width_px: tuple[float, float] = (1.0, 3.0)
    background: str = "clutter"  # flat | gradient | clutter
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.lines_per_image = tuple(self.lines_per_image)
        self.width_px = tuple(self.width_px)
        if self.width_px[0] < 1 or self.width_px[1] < self.width_px[0]:
            raise ValueError(f"invalid width range {self.width_px}")
        if self.lines_per_image[0] < 0 or self.lines_per_image[1] < self.lines_per_image[0]:
            raise ValueError(f"invalid line count range {self.lines_per_image}")
        if self.background not in ("flat", "gradient", "clutter"):
            raise ValueError(f"unknown background {self.background!r}")


def segment_distance(shape: tuple[int, int], p0, p1) -> np.ndarray:
    """Distance from every pixel center (x=col, y=row) to the segment p0-p1, given as (x, y)."""
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    t = np.zeros_like(xs) if L2 == 0 else np.clip(((xs - x0) * dx + (ys - y0) * dy) / L2, 0.0, 1.0)
    return np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))


def segment_coverage(shape, p0, p1, width: float) -> np.ndarray:
    """Approximate box-filtered coverage in [0, 1]; coverage >= 0.5 iff distance <= width / 2."""
    d = segment_distance(shape, p0, p1)
    return np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)


def rasterize_segment(shape, p0, p1, width: float) -> np.ndarray:
    return (segment_coverage(shape, p0, p1, width) >= 0.5).astype(np.uint8)


def _value_noise(rng, shape, octaves=3) -> np.ndarray:
    h, w = shape
    acc = np.zeros(shape, dtype=np.float64)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = torch.from_numpy(rng.random((1, 1, cells + 1, cells + 1)))
        up = F.interpolate(grid, size=shape, mode="bicubic", align_corners=True)[0, 0].numpy()
        acc += amp * up
        total += amp
        amp *= 0.5
    acc /= total
    return (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.canvas
    base = rng.uniform(0.25, 0.75, size=3)
    if cfg.background == "flat":
        field_ = np.zeros((h, w))
    elif cfg.background == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * xs / max(w - 1, 1) + np.sin(theta) * ys / max(h - 1, 1))
        field_ = ramp - ramp.mean()
    else:
        field_ = _value_noise(rng, (h, w)) - 0.5
    tint = rng.uniform(0.5, 1.0, size=3)
    strength = rng.uniform(0.2, 0.5)
    return np.clip(base[:, None, None] + strength * tint[:, None, None] * field_[None], 0.0, 1.0)


def _perimeter_point(rng, h, w):
    side = int(rng.integers(4))
    u = rng.random()
    if side == 0:
        return side, (u * (w - 1), 0.0)
    if side == 1:
        return side, (w - 1.0, u * (h - 1))
    if side == 2:
        return side, (u * (w - 1), h - 1.0)
    return side, (0.0, u * (h - 1))


def random_segment(rng, shape):
    """Endpoints on two different image borders, so the segment crosses the frame."""
    h, w = shape
    s0, p0 = _perimeter_point(rng, h, w)
    s1, p1 = _perimeter_point(rng, h, w)
    while s1 == s0:
        s1, p1 = _perimeter_point(rng, h, w)
    return p0, p1


def synth_lines(cfg: SynthConfig, index: int) -> Sample:
    """Deterministic sample #index: straight anti-aliased lines over clutter plus noise."""
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, index])
    h, w = cfg.canvas
    img = _background(rng, cfg)
    mask = np.zeros((h, w), dtype=np.uint8)
    k = int(rng.integers(cfg.lines_per_image[0], cfg.lines_per_image[1] + 1))
    for _ in range(k):
        p0, p1 = random_segment(rng, (h, w))
        width = rng.uniform(*cfg.width_px)
        cov = segment_coverage((h, w), p0, p1, width)
        # lines contrast with the local background, dark or bright
        color = rng.uniform(0.0, 0.2, size=3) if rng.random() < 0.5 else rng.uniform(0.8, 1.0, size=3)
        opacity = rng.uniform(0.6, 1.0)
        a = opacity * cov
        img = img * (1 - a) + color[:, None, None] * a
        mask |= (cov >= 0.5).astype(np.uint8)
    img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return Sample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, f"synth_{cfg.seed}_{index:05d}")


def synth_dataset(cfg: SynthConfig, count: int, start: int = 0) -> list[Sample]:
    return [synth_lines(cfg, i) for i in range(start, start + count)]


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    flip_h: bool
    flip_v: bool
    crop: tuple[int, int, int, int]  # top, left, height, width in the flipped frame
    size: tuple[int, int] = field(default=(0, 0))


def augment_params(sample_id: str, seed: int, shape, scale=(0.75, 1.0)) -> AugmentParams:
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(sample_id.encode())])
    h, w = shape
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    s = rng.uniform(*scale)
    ch, cw = max(1, round(s * h)), max(1, round(s * w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return AugmentParams(flip_h, flip_v, (top, left, ch, cw), (h, w))


def flip(arr: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        arr = arr[..., :, ::-1]
    if vertical:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def apply_augment(sample: Sample, p: AugmentParams) -> Sample:
    img = flip(sample.image, p.flip_h, p.flip_v)
    mask = flip(sample.mask, p.flip_h, p.flip_v)
    top, left, ch, cw = p.crop
    img = img[:, top:top + ch, left:left + cw]
    mask = mask[top:top + ch, left:left + cw]
    return Sample(resize_image(img, p.size), resize_mask(mask, p.size), sample.id, sample.condition)


def augment(sample: Sample, seed: int, return_params: bool = False):
    """Random flips (p=0.5 each) and crop-and-resize (side scale 0.75-1.0), same for image and mask."""
    p = augment_params(sample.id, seed, sample.mask.shape)
    out = apply_augment(sample, p)
    return (out, p) if return_params else out
