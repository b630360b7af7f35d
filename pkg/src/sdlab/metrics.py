"""Reconstruction and editing metrics.

PSNR/SSIM for reconstruction quality; attention-derived binary masks for
layout; masked MSE over the non-selected region standing in for a learned
perceptual distance; classifier probability products standing in for a
text-image alignment score. Structure metrics lean on the toy world's exact
ground-truth masks instead of deep-feature self-similarity; every report
header states that substitution.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .attention import COND, CROSS
from .errors import DimensionError

PROXY_NOTE = ("structure/perceptual/alignment scores are ground-truth-mask and "
              "oracle-classifier proxies, not learned-feature metrics")


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float((d * d).mean())


def psnr(a, b):
    """10 log10(1 / MSE) on [0, 1] images, capped at 99 dB for near-zero error."""
    err = mse(a, b)
    if err < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / err))


def _gaussian1d(size=7, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, kernel):
    """Separable 2-d 'valid' correlation of a (h, w) image with a 1-d kernel."""
    k = kernel.size
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=1)
    tmp = win @ kernel
    win = np.lib.stride_tricks.sliding_window_view(tmp, k, axis=0)
    return win @ kernel


def ssim(a, b, win_size=7, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with a Gaussian window, channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    kern = _gaussian1d(win_size, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _filter_valid(x, kern)
        mu_y = _filter_valid(y, kern)
        xx = _filter_valid(x * x, kern) - mu_x * mu_x
        yy = _filter_valid(y * y, kern) - mu_y * mu_y
        xy = _filter_valid(x * y, kern) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def attention_mask(tapes, token, threshold=0.5, size=32, branch=COND):
    """Binary object mask from a token's cross-attention.

    Head-averaged maps from every layer and timestep are upsampled to the
    image size and averaged; the mask keeps pixels at or above threshold
    times the aggregate maximum. The complement is the non-selected region.
    """
    if isinstance(tapes, (list, tuple)):
        tape_list = list(tapes)
    else:
        tape_list = [tapes]
    acc = np.zeros((size, size), dtype=np.float64)
    count = 0
    for tape in tape_list:
        for (layer, t, br, kind), m in tape.maps.items():
            if br != branch or kind != CROSS:
                continue
            data = np.asarray(m.data, dtype=np.float64).mean(axis=0)  # (N, L)
            n = data.shape[0]
            side = int(round(np.sqrt(n)))
            if side * side != n or size % side:
                raise DimensionError(f"attention map of {n} queries will not tile {size}")
            col = data[:, token].reshape(side, side)
            factor = size // side
            acc += np.repeat(np.repeat(col, factor, axis=0), factor, axis=1)
            count += 1
    if count == 0:
        raise DimensionError("attention_mask: no cross-attention maps in tape")
    acc /= count
    return (acc >= threshold * acc.max()).astype(np.float32)


def ns_region_error(src, edited, ns_mask):
    """Mean squared difference restricted to the non-selected region."""
    src = np.asarray(src, dtype=np.float64)
    edited = np.asarray(edited, dtype=np.float64)
    if src.shape != edited.shape:
        raise DimensionError(f"ns_region_error: shape mismatch {src.shape} vs {edited.shape}")
    mask = np.asarray(ns_mask, dtype=np.float64)
    if mask.shape != src.shape[:2]:
        raise DimensionError(f"ns_region_error: mask {mask.shape} vs image {src.shape}")
    total = mask.sum()
    if total == 0:
        raise DimensionError("ns_region_error: empty mask is undefined")
    d = src - edited
    d2 = d * d
    return float((d2 * mask[:, :, None]).sum() / (total * src.shape[2]))


def layout_iou(mask_a, mask_b):
    a = np.asarray(mask_a) > 0.5
    b = np.asarray(mask_b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def target_alignment(image, target_tokens, classifier):
    """Product of the oracle classifier's target shape and color probabilities."""
    from .toyworld import COLOR_NAMES, SHAPES, VOCAB

    out = classifier.classify(np.asarray(image, dtype=np.float32))
    color_id = int(target_tokens[1]) - VOCAB[COLOR_NAMES[0]]
    shape_id = int(target_tokens[2]) - VOCAB[SHAPES[0]]
    return float(out.shape_probs[shape_id] * out.color_probs[color_id])


@dataclass
class EvalReport:
    name: str
    psnr: float
    ssim: float
    ns_region_error: float
    layout_iou: float
    target_alignment: float

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise DimensionError(f"ssim {self.ssim} outside [-1, 1]")
        if self.ns_region_error < 0:
            raise DimensionError("ns_region_error must be >= 0")
        for nm in ("layout_iou", "target_alignment"):
            v = getattr(self, nm)
            if not 0.0 <= v <= 1.0:
                raise DimensionError(f"{nm} {v} outside [0, 1]")

    def to_json_line(self):
        return json.dumps({"proxy_note": PROXY_NOTE, **asdict(self)}, sort_keys=True)


def append_reports(path, reports):
    with open(path, "a", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json_line() + "\n")


def format_table(reports):
    cols = ("name", "psnr", "ssim", "ns_region_error", "layout_iou", "target_alignment")
    rows = [cols] + [
        (r.name, f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.ns_region_error:.5f}",
         f"{r.layout_iou:.3f}", f"{r.target_alignment:.3f}") for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = [f"# {PROXY_NOTE}"]
    for row in rows:
        lines.append("  ".join(val.ljust(widths[i]) for i, val in enumerate(row)))
    return "\n".join(lines)
