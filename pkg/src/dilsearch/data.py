"""Synthetic segmentation datasets and an on-disk PNG layout.

Two generators:

* ``blobs`` - value-noise "tissue" background with one rotated capsule
  standing in for an instrument. With 4 classes the capsule is split
  lengthwise into shaft / wrist / jaws.
* ``planted_dilation`` - a binary code laid out in 8x8 blocks; the label of a
  block is the XOR of the codes ``offset`` blocks to its left and right. Pixels
  whose partners fall outside the image carry :data:`IGNORE_LABEL`.

Every sample is a pure function of ``(config, seed, index)``.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

IGNORE_LABEL = 255
PLANTED_OFFSETS = (1, 2, 4, 8, 16)
PLANTED_CELL = 8  # block size == feature stride of a converted network

# shaft, wrist, jaws
PART_COLORS = ((0.55, 0.57, 0.62), (0.80, 0.72, 0.42), (0.92, 0.92, 0.96))
TISSUE_COLOR = (0.62, 0.26, 0.22)


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) integer class ids
    id: str


@dataclass
class GenConfig:
    task: str = "blobs"
    height: int = 96
    width: int = 96
    num_classes: int = 2
    count: int = 256
    seed: int = 0
    planted_offset: int = 8
    # blobs appearance
    noise_cells: int = 6
    noise_amplitude: float = 0.18
    radius_range: tuple = (6.0, 10.0)
    length_range: tuple = (0.55, 0.85)  # fraction of the shorter side
    # planted task appearance
    planted_noise: float = 0.1

    def validate(self):
        if self.task not in ("blobs", "planted_dilation"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.height < 1 or self.width < 1 or self.count < 0:
            raise ValueError("height/width must be >= 1 and count >= 0")
        if self.task == "blobs" and self.num_classes not in (2, 4):
            raise ValueError(f"blobs supports 2 or 4 classes, got {self.num_classes}")
        if self.task == "planted_dilation":
            if self.planted_offset not in PLANTED_OFFSETS:
                raise ValueError(f"planted_offset must be one of {PLANTED_OFFSETS}, got {self.planted_offset}")
            if self.num_classes != 2:
                raise ValueError("planted_dilation is a 2-class task")
        return self


@dataclass
class Dataset:
    samples: list
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def stack(self, indices=None):
        """Images (B, 3, H, W) and masks (B, H, W) for ``indices`` (all by default)."""
        idx = range(len(self.samples)) if indices is None else indices
        imgs = np.stack([self.samples[i].image for i in idx])
        masks = np.stack([self.samples[i].mask for i in idx])
        return imgs, masks


def _sample_rng(seed, index):
    return np.random.default_rng([seed, index])


def _value_noise(rng, cells, h, w):
    """Smooth noise in [-1, 1]: a random coarse grid, bilinearly resized."""
    grid = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy


def _capsule(rng, cfg):
    """Endpoints and radius of a capsule that fits inside the image."""
    h, w = cfg.height, cfg.width
    r = rng.uniform(*cfg.radius_range)
    length = rng.uniform(*cfg.length_range) * min(h, w)
    theta = rng.uniform(0, np.pi)
    dy, dx = np.sin(theta) * length / 2, np.cos(theta) * length / 2
    margin_y = abs(dy) + r + 1
    margin_x = abs(dx) + r + 1
    cy = rng.uniform(margin_y, max(margin_y, h - margin_y))
    cx = rng.uniform(margin_x, max(margin_x, w - margin_x))
    if rng.random() < 0.5:
        dy, dx = -dy, -dx
    return np.array([cy - dy, cx - dx]), np.array([cy + dy, cx + dx]), r


def blob_sample(cfg, index):
    rng = _sample_rng(cfg.seed, index)
    h, w = cfg.height, cfg.width
    img = np.empty((3, h, w))
    for c in range(3):
        img[c] = TISSUE_COLOR[c] + cfg.noise_amplitude * _value_noise(rng, cfg.noise_cells, h, w)

    a, b, r = _capsule(rng, cfg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ab = b - a
    t = ((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (a[0] + t * ab[0]), xx - (a[1] + t * ab[1]))
    inside = dist <= r
    part = np.where(t < 0.5, 0, np.where(t < 0.75, 1, 2))
    shade = 1.0 - 0.25 * (dist / r) ** 2
    sheen = 0.05 * _value_noise(rng, cfg.noise_cells * 2, h, w)
    for c in range(3):
        col = np.choose(part, [p[c] for p in PART_COLORS])
        img[c] = np.where(inside, col * shade + sheen, img[c])

    if cfg.num_classes == 2:
        mask = inside.astype(np.int64)
    else:
        mask = np.where(inside, part + 1, 0).astype(np.int64)
    return SegSample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, f"{index:04d}")


def planted_labels(code, offset, ignore_label=IGNORE_LABEL):
    """Reference labeler on the block grid.

    ``code`` is a (rows, cols) 0/1 array; block (i, j) is labelled
    ``code[i, j - offset] XOR code[i, j + offset]``, or ``ignore_label`` when
    either partner is off the grid.
    """
    rows, cols = code.shape
    lab = np.full((rows, cols), ignore_label, dtype=np.int64)
    if cols > 2 * offset:
        lab[:, offset : cols - offset] = code[:, : cols - 2 * offset] ^ code[:, 2 * offset :]
    return lab


def planted_sample(cfg, index):
    rng = _sample_rng(cfg.seed, index)
    rows, cols = cfg.height // PLANTED_CELL, cfg.width // PLANTED_CELL
    code = rng.integers(0, 2, (rows, cols))
    lab = planted_labels(code, cfg.planted_offset)
    up = np.ones((PLANTED_CELL, PLANTED_CELL), dtype=np.int64)
    mask = np.kron(lab, up)
    base = 0.5 + 0.35 * (2 * np.kron(code, up) - 1)
    img = base[None] + cfg.planted_noise * rng.standard_normal((3, cfg.height, cfg.width))
    return SegSample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, f"{index:04d}")


def gen_blobs(cfg):
    cfg.validate()
    if cfg.task != "blobs":
        raise ValueError("gen_blobs needs task='blobs'")
    samples = [blob_sample(cfg, i) for i in range(cfg.count)]
    return _finish(samples, cfg)


def gen_planted_dilation(cfg):
    cfg.validate()
    if cfg.task != "planted_dilation":
        raise ValueError("gen_planted_dilation needs task='planted_dilation'")
    if cfg.height % PLANTED_CELL or cfg.width % PLANTED_CELL:
        raise ValueError(f"planted task needs height/width divisible by {PLANTED_CELL}")
    if cfg.width // PLANTED_CELL <= 2 * cfg.planted_offset:
        raise ValueError(
            f"planted_offset {cfg.planted_offset} needs more than {2 * cfg.planted_offset} blocks "
            f"across, image has {cfg.width // PLANTED_CELL}"
        )
    samples = [planted_sample(cfg, i) for i in range(cfg.count)]
    return _finish(samples, cfg)


def generate(cfg):
    return gen_blobs(cfg) if cfg.task == "blobs" else gen_planted_dilation(cfg)


def _finish(samples, cfg):
    for s in samples:
        check_sample(s, cfg.num_classes)
    meta = {"task": cfg.task, "seed": cfg.seed, "count": cfg.count, "config": asdict(cfg)}
    return Dataset(samples, cfg.num_classes, meta)


def check_sample(s, num_classes, ignore_label=IGNORE_LABEL):
    if s.image.ndim != 3 or s.image.shape[0] != 3:
        raise DataError(f"sample {s.id}: image must be (3,H,W), got {s.image.shape}")
    if s.image.shape[1:] != s.mask.shape:
        raise DataError(f"sample {s.id}: image {s.image.shape[1:]} and mask {s.mask.shape} differ")
    bad = (s.mask != ignore_label) & ((s.mask < 0) | (s.mask >= num_classes))
    if bad.any():
        raise DataError(f"sample {s.id}: mask value {int(s.mask[bad].flat[0])} >= {num_classes} classes")


# ------------------------------------------------------------------ disk I/O

def save_dataset(ds, root):
    """Write ``root/images/NNNN.png``, ``root/masks/NNNN.png`` and ``dataset.json``."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8), "L").save(root / "masks" / f"{s.id}.png")
    manifest = {"num_classes": ds.num_classes, "count": len(ds), "task": ds.meta.get("task"), "seed": ds.meta.get("seed")}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root, num_classes=None, ignore_label=IGNORE_LABEL):
    """Load PNG image/mask pairs from ``root/images`` and ``root/masks``.

    ``num_classes`` defaults to the value in ``dataset.json``.
    """
    from PIL import Image

    root = Path(root)
    manifest = {}
    if (root / "dataset.json").exists():
        manifest = json.loads((root / "dataset.json").read_text())
    if num_classes is None:
        num_classes = manifest.get("num_classes")
        if num_classes is None:
            raise DataError(f"{root}: num_classes not given and no dataset.json")
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    if not images:
        raise DataError(f"{img_dir}: no PNG images")
    samples = []
    for p in images:
        mp = masks.pop(p.stem, None)
        if mp is None:
            raise DataError(f"missing mask for image {p.name} (expected {mask_dir / p.name})")
        rgb = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        mimg = Image.open(mp)
        if mimg.mode not in ("L", "P", "I", "I;16"):
            raise DataError(f"{mp.name}: mask must be a single-channel index image, got mode {mimg.mode}")
        mask = np.asarray(mimg).astype(np.int64)
        if mask.shape != rgb.shape[:2]:
            raise DataError(f"{mp.name}: mask size {mask.shape} != image size {rgb.shape[:2]}")
        s = SegSample(np.ascontiguousarray(rgb.transpose(2, 0, 1)), mask, p.stem)
        try:
            check_sample(s, num_classes, ignore_label)
        except DataError as exc:
            raise DataError(f"{mp.name}: {exc}") from None
        samples.append(s)
    if masks:
        raise DataError(f"masks without images: {sorted(masks)[:3]}")
    meta = {"task": manifest.get("task", "disk"), "seed": manifest.get("seed"), "count": len(samples), "root": str(root)}
    return Dataset(samples, num_classes, meta)
