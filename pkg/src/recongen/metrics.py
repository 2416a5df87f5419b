"""Distortion and perceptual quality measures.

Images are ``(H, W, C)`` arrays of intensities nominally in ``[0, 1]``.
All metrics are evaluated in double precision.  ``psnr`` and ``ssim`` do
not clamp their inputs; the reporting helpers clamp outputs to ``[0, 1]``
before measuring.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation of a 2-D array with the 1-D kernel g1
    k = g1.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g1
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g1


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window.

    Local statistics use 'valid' filtering (no padding); the SSIM map is
    averaged spatially and then over channels.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    g1 /= g1.sum()
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g1), _filter_valid(y, g1)
        sxx = _filter_valid(x * x, g1) - mx * mx
        syy = _filter_valid(y * y, g1) - my * my
        sxy = _filter_valid(x * y, g1) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


class PerceptualMetric(Protocol):
    """A distance between images: lower is better, ``d(a, a) == 0``."""

    descriptor: str
    seed: int

    def __call__(self, a, b) -> float: ...

    def batch(self, a, b) -> np.ndarray: ...


def _downsample(t: torch.Tensor) -> torch.Tensor:
    # flip-symmetric 2x reduction: [1,1]/2 for even sides, [1,2,1]/4 for odd
    for dim in (2, 3):
        n = t.shape[dim]
        if n < 3:
            continue
        if n % 2 == 0:
            lo, hi = t.narrow(dim, 0, n - 1), t.narrow(dim, 1, n - 1)
            t = 0.5 * (lo + hi)
        else:
            t = 0.25 * (t.narrow(dim, 0, n - 2) + 2 * t.narrow(dim, 1, n - 2) + t.narrow(dim, 2, n - 2))
        t = t.index_select(dim, torch.arange(0, t.shape[dim], 2))
    return t


@dataclass
class RandomFilterProxy:
    """Seeded random-filter texture distance.

    At each of ``scales`` dyadic scales the image is filtered with a fixed
    bank of zero-mean random 3x3 filters (each paired with its horizontal
    mirror).  Squared responses are box-averaged over ``window``-sized
    neighbourhoods and log-normalised against ``floor``; the distance is
    the mean absolute difference of these maps, averaged over scales.

    ``filters`` may be supplied explicitly (e.g. loaded from a checkpoint)
    to plug in learned feature weights.
    """

    seed: int = 0
    num_filters: int = 16
    scales: int = 3
    window: int = 8
    floor: float = 1e-4
    filters: dict = field(default_factory=dict, repr=False)

    @property
    def descriptor(self) -> str:
        return (f"random-filter-proxy(seed={self.seed},filters={self.num_filters},"
                f"scales={self.scales},window={self.window},floor={self.floor:g})")

    def bank(self, channels: int) -> torch.Tensor:
        if channels not in self.filters:
            g = torch.Generator().manual_seed(self.seed * 1000 + channels)
            half = torch.randn(self.num_filters // 2, channels, 3, 3, generator=g, dtype=torch.float64)
            w = torch.cat([half, half.flip(-1)])
            w = w - w.mean(dim=(1, 2, 3), keepdim=True)
            w = w / w.flatten(1).norm(dim=1)[:, None, None, None]
            self.filters[channels] = w
        return self.filters[channels]

    def features(self, imgs: torch.Tensor) -> list[torch.Tensor]:
        """Log-energy maps for an ``(N, C, H, W)`` double tensor."""
        w = self.bank(imgs.shape[1])
        out = []
        t = imgs
        for _ in range(self.scales):
            if min(t.shape[-2:]) < 3:
                break
            e = F.conv2d(t, w) ** 2
            k = min(self.window, *e.shape[-2:])
            e = F.avg_pool2d(e, k, stride=1)
            out.append(torch.log(e + self.floor))
            t = _downsample(t)
        return out

    def batch(self, a, b) -> np.ndarray:
        """Distances for stacks of images shaped ``(N, H, W, C)``."""
        a, b = _pair(a, b)
        if a.ndim == 3:
            a, b = a[None], b[None]
        ta = torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
        tb = torch.from_numpy(np.ascontiguousarray(b.transpose(0, 3, 1, 2)))
        fa, fb = self.features(ta), self.features(tb)
        d = sum((p - q).abs().mean(dim=(1, 2, 3)) for p, q in zip(fa, fb)) / len(fa)
        return d.numpy()

    def __call__(self, a, b) -> float:
        return float(self.batch(a, b)[0])

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "RandomFilterProxy":
        from .networks import read_arrays

        arrays, _ = read_arrays(path)
        filters = {v.shape[1]: torch.from_numpy(v.astype(np.float64)) for v in arrays.values()}
        num = next(iter(filters.values())).shape[0]
        return cls(num_filters=num, filters=filters, **kwargs)


def perceptual_distance(metric: PerceptualMetric, a, b) -> float:
    a, b = _pair(a, b)
    return float(metric(a, b))


@dataclass
class MetricReport:
    ids: list
    psnr: np.ndarray
    ssim: np.ndarray
    perceptual: np.ndarray

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_perceptual(self) -> float:
        return float(np.mean(self.perceptual))

    def rows(self):
        for i, p, s, d in zip(self.ids, self.psnr, self.ssim, self.perceptual):
            yield i, float(p), float(s), float(d)

    def write(self, path, delimiter: str = "\t") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(["id", "psnr", "ssim", "perceptual"])
            for row in self.rows():
                w.writerow([row[0], *(repr(v) for v in row[1:])])
            w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim), repr(self.mean_perceptual)])

    def write_scatter(self, path) -> None:
        """Two-column (perceptual, psnr) text, one image per line."""
        np.savetxt(path, np.column_stack([self.perceptual, self.psnr]), header="perceptual psnr")


def pd_report(outputs: Sequence, metric: PerceptualMetric, ids=None,
              with_ssim: bool = True) -> MetricReport:
    """Perception-distortion report over ``(y_hat, y)`` pairs.

    Outputs are clamped to ``[0, 1]`` before measurement.
    """
    if len(outputs) == 0:
        raise ValueError("pd_report needs at least one pair")
    ids = list(range(len(outputs))) if ids is None else list(ids)
    preds = [np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0) for p, _ in outputs]
    refs = [np.asarray(y, dtype=np.float64) for _, y in outputs]
    ps = np.array([psnr(p, y) for p, y in zip(preds, refs)])
    ss = np.array([ssim(p, y) if with_ssim and min(y.shape[:2]) >= 11 else np.nan
                   for p, y in zip(preds, refs)])
    if all(p.shape == preds[0].shape for p in preds):
        pc = metric.batch(np.stack(preds), np.stack(refs))
    else:
        pc = np.array([metric(p, y) for p, y in zip(preds, refs)])
    return MetricReport(ids, ps, ss, np.asarray(pc, dtype=np.float64))


def read_report(path, delimiter: str = "\t") -> MetricReport:
    ids, ps, ss, pc = [], [], [], []
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh, delimiter=delimiter)
        next(r)
        for row in r:
            if row[0] == "mean":
                continue
            ids.append(row[0])
            ps.append(float(row[1]))
            ss.append(float(row[2]))
            pc.append(float(row[3]))
    return MetricReport(ids, np.array(ps), np.array(ss), np.array(pc))
