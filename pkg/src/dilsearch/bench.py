"""Latency benchmarking, result tables and mask overlays."""

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError
from .network import INFER, flop_count, forward_segmentation
from .tensor import Tensor

MIN_REPORT_ITERS = 30
MIN_WARMUP = 5
DESK_INPUT = (1, 3, 256, 320)
FULL_INPUT = (1, 3, 1024, 1280)

# Reference-only GPU latencies (ms at 1024x1280) reported for the original
# networks; shown in table footers, never compared against.
REFERENCE_GPU_MS = {"standard": 126.0, "light_v1": 17.4, "light_v2": 11.8}

PALETTE = np.array(
    [
        (0, 0, 0),
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
        (255, 0, 255),
        (0, 255, 255),
        (255, 128, 0),
    ],
    dtype=np.float64,
)


@dataclass
class LatencyReport:
    variant: str
    input_shape: tuple
    warmup: int
    iters: int
    times_ms: list
    flops: int
    threads: dict = field(default_factory=dict)
    scope: str = "full forward pass incl. 1x1 head and bilinear upsampling; host CPU only"

    @property
    def mean(self):
        return float(np.mean(self.times_ms))

    @property
    def median(self):
        return float(np.median(self.times_ms))

    @property
    def p95(self):
        return float(np.percentile(self.times_ms, 95))

    @property
    def min(self):
        return float(np.min(self.times_ms))

    @property
    def fps(self):
        return 1000.0 / self.median

    def validate(self):
        """Refuse to publish reports with too few timed iterations."""
        if self.iters < MIN_REPORT_ITERS or len(self.times_ms) != self.iters:
            raise ValueError(f"a published report needs >= {MIN_REPORT_ITERS} timed iterations, got {self.iters}")
        if not self.p95 >= self.median >= self.min:
            raise ValueError("inconsistent timing statistics")
        return self

    def to_dict(self):
        self.validate()
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d.update(mean_ms=self.mean, median_ms=self.median, p95_ms=self.p95, min_ms=self.min, fps=self.fps)
        return d


def thread_info():
    keys = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")
    info = {k: os.environ[k] for k in keys if k in os.environ}
    info["kernel_backend"] = kernels.BACKEND
    info["cpu_count"] = os.cpu_count()
    info["machine"] = platform.machine()
    return info


def _forward(spec, params, x):
    out = forward_segmentation(spec, params, x, INFER)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("benchmark forward produced non-finite output")
    return out


def benchmark_many(entries, input_shape=DESK_INPUT, warmup=10, iters=100, seed=0):
    """Time several ``(label, spec, params)`` entries round-robin.

    Interleaving spreads slow machine drift evenly across the entries. The
    input is drawn once from ``seed`` and shared.
    """
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    dtype = entries[0][2]["stem.conv.weight"].dtype
    x = Tensor(np.random.default_rng(seed).uniform(0, 1, input_shape).astype(dtype))
    for _ in range(warmup):
        for _, spec, params in entries:
            _forward(spec, params, x)
    times = [[] for _ in entries]
    for _ in range(iters):
        for i, (_, spec, params) in enumerate(entries):
            t0 = time.perf_counter()
            _forward(spec, params, x)
            times[i].append((time.perf_counter() - t0) * 1e3)
    info = thread_info()
    return [
        LatencyReport(label, tuple(input_shape), warmup, iters, t, flop_count(spec, input_shape), dict(info))
        for (label, spec, _), t in zip(entries, times)
    ]


def benchmark(spec, params, input_shape=DESK_INPUT, warmup=10, iters=100, seed=0):
    return benchmark_many([(spec.variant, spec, params)], input_shape, warmup, iters, seed)[0]


def format_table(rows, footer=True):
    """Aligned ``Model | IOU | Time`` table.

    ``rows`` holds dicts with ``model`` and optional ``iou`` and ``time_ms``.
    """
    cells = [("Model", "IOU", "Time")]
    for r in rows:
        iou = "-" if r.get("iou") is None else f"{r['iou']:.3f}"
        ms = "-" if r.get("time_ms") is None else f"{r['time_ms']:.1f} ms"
        cells.append((str(r["model"]), iou, ms))
    widths = [max(len(c[i]) for c in cells) for i in range(3)]
    lines = [" | ".join(c[i].ljust(widths[i]) for i in range(3)).rstrip() for c in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    if footer:
        ref = ", ".join(f"{k} {v} ms" for k, v in REFERENCE_GPU_MS.items())
        lines.append("")
        lines.append(f"reference only (GPU, 1024x1280, not reproduced here): {ref}")
    return "\n".join(lines)


def write_reports(reports, out_dir, ious=None):
    """Write ``latency.json`` and ``latency.txt``; ``ious`` maps label -> IoU."""
    ious = ious or {}
    payload = [r.to_dict() for r in reports]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "latency.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    table = format_table([{"model": r.variant, "iou": ious.get(r.variant), "time_ms": r.median} for r in reports])
    with open(os.path.join(out_dir, "latency.txt"), "w") as fh:
        fh.write(table + "\n")
    return table


def overlay(image, pred_mask, alpha=0.5):
    """Blend class colors over a (3, H, W) image in [0, 1]; class 0 stays clear."""
    image = np.asarray(image, dtype=np.float64)
    pred_mask = np.asarray(pred_mask)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != pred_mask.shape:
        raise ValueError(f"image {image.shape} and mask {pred_mask.shape} do not match")
    if pred_mask.min() < 0 or pred_mask.max() >= len(PALETTE):
        raise ValueError(f"mask values must lie in [0, {len(PALETTE)})")
    rgb = image.transpose(1, 2, 0) * 255.0
    color = PALETTE[pred_mask]
    fg = (pred_mask > 0)[..., None]
    out = np.where(fg, (1 - alpha) * rgb + alpha * color, rgb)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def render_overlay(image, pred_mask, path, alpha=0.5):
    from PIL import Image

    arr = overlay(image, pred_mask, alpha)
    Image.fromarray(arr, "RGB").save(path)
    return arr
