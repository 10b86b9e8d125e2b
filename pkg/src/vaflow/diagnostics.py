"""Latent-distribution uniformity metrics and reconstruction quality scores.

A latent sample set is reduced to 2D (PCA with a deterministic sign
convention), kernel densities are estimated at every sample point, and
three statistics summarize how evenly the mass spreads: the density
coefficient of variation, the Gini coefficient of the densities, and the
normalized entropy of a density histogram.  Lower CV/Gini and higher
entropy mean a more uniform occupation of the latent space.
"""

from __future__ import annotations

import xml.sax.saxutils
from dataclasses import dataclass

import numpy as np


@dataclass
class UniformityReport:
    density_cv: float
    gini: float
    normalized_entropy: float
    n_points: int
    bandwidth: tuple

    def as_rows(self):
        return [
            ("density_cv", self.density_cv),
            ("gini", self.gini),
            ("normalized_entropy", self.normalized_entropy),
        ]


def project_2d(latents):
    """Top-2 principal components of (n, d) vectors, centered.

    Sign convention: within each component the largest-magnitude loading is
    made positive, so the projection is deterministic.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"need at least 3 points of dimension >= 2, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise ValueError("degenerate inputs: zero covariance in every direction")
    comps = evecs[:, ::-1][:, :2]
    for k in range(2):
        lead = np.argmax(np.abs(comps[:, k]))
        if comps[lead, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps


def kde_density(points, bandwidth="auto", chunk=512):
    """Gaussian-kernel density at each sample point (leave-self-in).

    ``bandwidth`` is either a scalar used for both axes or "auto" for
    Scott's rule, n^(-1/6) * sigma per axis.  Returns (densities, (hx, hy)).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError(f"need (n >= 2, 2) points, got {pts.shape}")
    n = pts.shape[0]
    if bandwidth == "auto":
        sigma = pts.std(axis=0, ddof=1)
        if np.any(sigma <= 0):
            raise ValueError("zero variance along an axis; cannot pick a bandwidth")
        h = n ** (-1.0 / 6.0) * sigma
    else:
        h = np.array([float(bandwidth)] * 2)
        if np.any(h <= 0):
            raise ValueError("bandwidth must be positive")
    norm = 1.0 / (n * 2.0 * np.pi * h[0] * h[1])
    scaled = pts / h
    out = np.empty(n)
    for start in range(0, n, chunk):
        block = scaled[start : start + chunk]
        d2 = ((block[:, None, :] - scaled[None, :, :]) ** 2).sum(axis=-1)
        out[start : start + chunk] = np.exp(-0.5 * d2).sum(axis=1)
    return out * norm, (float(h[0]), float(h[1]))


def uniformity_metrics(densities, bandwidth=(float("nan"), float("nan"))):
    """Density CV, Gini coefficient, and normalized histogram entropy."""
    d = np.asarray(densities, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no densities given")
    if np.any(d < 0):
        raise ValueError("densities must be nonnegative")
    total = d.sum()
    if total == 0:
        raise ValueError("all densities are zero")
    n = d.size
    mean = total / n
    cv = float(d.std() / mean)

    asc = np.sort(d)
    index = np.arange(1, n + 1)
    # max() clears the ~1e-17 summation residue on constant inputs
    gini = max(0.0, float(np.sum((2 * index - n - 1) * asc) / (n * total)))

    bins = int(np.ceil(np.sqrt(n)))
    counts, _ = np.histogram(d, bins=bins)
    p = counts[counts > 0] / n
    entropy = float(-(p * np.log(p)).sum())
    normalized = entropy / np.log(bins) if bins > 1 else 0.0
    return UniformityReport(
        density_cv=cv, gini=gini, normalized_entropy=float(normalized),
        n_points=n, bandwidth=tuple(bandwidth),
    )


def uniformity_of_latents(latents, max_points=2048, seed=0, bandwidth="auto"):
    """Full pipeline: subsample latent vectors, project to 2D, KDE, metrics."""
    x = np.asarray(latents, dtype=np.float64).reshape(-1, np.shape(latents)[-1])
    if x.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(x.shape[0], size=max_points, replace=False)
        x = x[keep]
    pts = project_2d(x)
    densities, h = kde_density(pts, bandwidth=bandwidth)
    return uniformity_metrics(densities, bandwidth=h)


# -- reconstruction quality ----------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(x, x_hat, data_range=2.0):
    """Peak signal-to-noise ratio in dB, capped at the 99 dB sentinel."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range**2 / mse)))


def ssim(x, x_hat, data_range=2.0, window=8):
    """Mean structural similarity over sliding uniform windows.

    Works per channel on (c, h, w) or (b, c, h, w) images with the usual
    stabilizers C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 4:
        raise ValueError(f"ssim expects (b, c, h, w) or (c, h, w), got {x.shape}")
    if x.shape[2] < window or x.shape[3] < window:
        raise ValueError(f"images smaller than the {window}x{window} ssim window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def windows(a):
        v = np.lib.stride_tricks.sliding_window_view(a, (window, window), axis=(2, 3))
        return v.reshape(*v.shape[:4], -1)

    wx = windows(x)
    wy = windows(x_hat)
    mx = wx.mean(axis=-1)
    my = wy.mean(axis=-1)
    vx = wx.var(axis=-1)
    vy = wy.var(axis=-1)
    cov = (wx * wy).mean(axis=-1) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(score.mean())


# -- report emission ------------------------------------------------------------


def write_csv(path, rows):
    """Rows of (epoch, metric, value) under the fixed ``epoch,metric,value`` header."""
    with open(path, "w") as fh:
        fh.write("epoch,metric,value\n")
        for epoch, metric, value in rows:
            fh.write(f"{int(epoch)},{metric},{float(value)!r}\n")


def read_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,metric,value":
            raise ValueError(f"unexpected report header {header!r}")
        for line in fh:
            epoch, metric, value = line.strip().split(",")
            rows.append((int(epoch), metric, float(value)))
    return rows


def write_svg_chart(path, series, title="training curves", width=720, height=400):
    """A single-file SVG line chart: one polyline per named series."""
    pad = 50
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    drawable = {name: vals for name, vals in series.items() if len(vals) >= 1}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">'
        f"{xml.sax.saxutils.escape(title)}</text>",
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    if drawable:
        lo = min(min(v) for v in drawable.values())
        hi = max(max(v) for v in drawable.values())
        span = (hi - lo) or 1.0
        steps = max(len(v) for v in drawable.values())
        for k, (name, vals) in enumerate(sorted(drawable.items())):
            color = palette[k % len(palette)]
            pts = []
            for i, v in enumerate(vals):
                px = pad + (width - 2 * pad) * (i / max(steps - 1, 1))
                py = height - pad - (height - 2 * pad) * ((v - lo) / span)
                pts.append(f"{px:.1f},{py:.1f}")
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>'
            )
            parts.append(
                f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="11" fill="{color}">'
                f"{xml.sax.saxutils.escape(name)}</text>"
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def emit_report(path_prefix, history=None, report=None):
    """Write ``<prefix>.csv`` (and ``<prefix>.svg`` when a history is given).

    ``history`` is a list of per-epoch loss breakdowns; ``report`` an
    optional UniformityReport appended at the final epoch index.
    """
    rows = []
    series = {}
    if history:
        for epoch, breakdown in enumerate(history):
            for metric, value in breakdown.as_dict().items():
                rows.append((epoch, metric, value))
                series.setdefault(metric, []).append(value)
    final_epoch = len(history) - 1 if history else 0
    if report is not None:
        for metric, value in report.as_rows():
            rows.append((final_epoch, metric, value))
        rows.append((final_epoch, "kde_n_points", float(report.n_points)))
    csv_path = f"{path_prefix}.csv"
    write_csv(csv_path, rows)
    written = [csv_path]
    if series:
        svg_path = f"{path_prefix}.svg"
        write_svg_chart(svg_path, series)
        written.append(svg_path)
    return written
