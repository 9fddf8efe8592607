"""Image quality metrics: PSNR = 10*log10(MAX^2/MSE), SSIM (global-statistics
form by default, conventional gaussian-windowed form as a cross-check), and
RMSE = sqrt(MSE). All statistics are computed in float64 internally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class MetricConfig:
    """data_range is MAX in the PSNR/SSIM formulas. For normalized images use
    1.0; for HU-valued images the display-window span (default 400)."""

    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    mode: str = "global"  # or "windowed"
    window: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.data_range <= 0:
            raise UsageError("data_range must be positive")
        if self.mode not in ("global", "windowed"):
            raise UsageError(f"unknown ssim mode {self.mode!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    d = x - y
    return float(np.mean(d * d))


def rmse(x, y) -> float:
    return math.sqrt(mse(x, y))


def psnr(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    m = mse(x, y)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(cfg.data_range**2 / m)


def ssim(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    if cfg.mode == "windowed":
        return _ssim_windowed(x, y, cfg)
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    num = (2 * mx * my + cfg.c1) * (2 * cov + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return float(num / den)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    g = np.exp(-((np.arange(window) - half) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i : i + h - kh + 1, j : j + w - kw + 1]
    return out


def _ssim_windowed(x, y, cfg: MetricConfig) -> float:
    """Mean of the local-window SSIM map (gaussian weights, valid region)."""
    x, y = _pair(x, y)
    x = x.reshape(x.shape[-2], x.shape[-1])
    y = y.reshape(y.shape[-2], y.shape[-1])
    if min(x.shape) < cfg.window:
        raise ShapeError(f"image {x.shape} smaller than ssim window {cfg.window}")
    k = _gaussian_kernel(cfg.window, cfg.sigma)
    mx = _filter_valid(x, k)
    my = _filter_valid(y, k)
    vx = _filter_valid(x * x, k) - mx * mx
    vy = _filter_valid(y * y, k) - my * my
    cov = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + cfg.c1) * (2 * cov + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return float(np.mean(num / den))


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    """Linear-interpolation quartiles: position p*(n-1) between order stats."""
    q = np.percentile(values, [25.0, 50.0, 75.0], method="linear")
    return float(q[0]), float(q[1]), float(q[2])


@dataclass
class MetricReport:
    """Per-image metric arrays plus distribution summaries."""

    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)

    def aggregates(self) -> dict:
        out = {}
        for name, vals in (("psnr", self.psnr), ("ssim", self.ssim), ("rmse", self.rmse)):
            arr = np.asarray(vals, dtype=np.float64)
            q1, q2, q3 = _quartiles(arr)
            out[name] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "min": float(arr.min()),
                "max": float(arr.max()),
                "q1": q1,
                "median": q2,
                "q3": q3,
            }
        return out

    def to_csv(self) -> str:
        lines = ["index,psnr,ssim,rmse"]
        for i, (p, s, r) in enumerate(zip(self.psnr, self.ssim, self.rmse)):
            lines.append(f"{i},{p!r},{s!r},{r!r}")
        return "\n".join(lines) + "\n"

    def aggregates_json(self) -> str:
        return json.dumps(self.aggregates(), indent=2, sort_keys=True)


def report(pairs, cfg: MetricConfig = MetricConfig()) -> MetricReport:
    """Metrics for a list of (candidate, target) image pairs."""
    pairs = list(pairs)
    if not pairs:
        raise UsageError("report needs at least one image pair")
    rep = MetricReport()
    for cand, target in pairs:
        rep.psnr.append(psnr(cand, target, cfg))
        rep.ssim.append(ssim(cand, target, cfg))
        rep.rmse.append(rmse(cand, target))
    return rep
