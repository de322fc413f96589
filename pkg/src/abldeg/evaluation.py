"""Image metrics and the factor-sweep transfer grid."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .degnet import DegradationModel, load_model
from .gausskernel import ratio_preserving_factors
from .imageio import GrayImage, ImagePair, save_image
from .trainpipe import bicubic_l1, evaluate_l1

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class BankTopologyError(ValueError):
    """Models in one sweep disagree in kernel count, angles, aspect or grid."""


def _arr(img) -> np.ndarray:
    return img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak 1.0; identical images give ``math.inf``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    half = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = _gauss_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, range 1), mean over valid positions."""
    return float(ssim_map(a, b).mean())


# --- factor sweep -------------------------------------------------------------------

@dataclass
class SweepReport:
    model_factors: list[tuple[float, ...]]
    adjusted_factors: list[float]
    losses: np.ndarray  # (models, adjusted)
    baseline_bicubic: float

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.shape != (len(self.model_factors), len(self.adjusted_factors)):
            raise ValueError("loss grid does not match the factor lists")

    def argmin(self) -> tuple[int, int]:
        i, j = np.unravel_index(int(np.argmin(self.losses)), self.losses.shape)
        return int(i), int(j)


def factor_sweep(models: Sequence, factors: Sequence[float],
                 pairs: Sequence[ImagePair]) -> SweepReport:
    """Evaluate each model under banks rescaled to each adjusted factor.

    ``models`` holds checkpoint paths or loaded models. For multi-factor banks
    the adjusted value replaces the first factor and the rest keep their ratio.
    """
    loaded = [m if isinstance(m, DegradationModel) else load_model(m) for m in models]
    if not loaded:
        raise ValueError("factor_sweep needs at least one model")
    ref = loaded[0].config.bank
    for m in loaded[1:]:
        if not m.config.bank.same_topology(ref):
            raise BankTopologyError("models do not share a kernel-bank topology")
    losses = np.empty((len(loaded), len(factors)))
    for i, model in enumerate(loaded):
        native = model.config.bank.factors
        for j, f in enumerate(factors):
            losses[i, j] = evaluate_l1(model.with_factors(ratio_preserving_factors(native, f)), pairs)
    return SweepReport([m.config.bank.factors for m in loaded], [float(f) for f in factors],
                       losses, bicubic_l1(pairs))


def _factor_label(factors: Sequence[float]) -> str:
    return ";".join(repr(float(f)) for f in factors)


def write_sweep_csv(sweep: SweepReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_factor", "adjusted_factor", "l1"])
        for i, mf in enumerate(sweep.model_factors):
            for j, af in enumerate(sweep.adjusted_factors):
                w.writerow([_factor_label(mf), repr(af), repr(float(sweep.losses[i, j]))])
        fh.write(f"# bicubic,{sweep.baseline_bicubic!r}\n")


def read_sweep_csv(path) -> SweepReport:
    rows, bicubic = [], math.nan
    with open(path, newline="") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# bicubic,"):
                bicubic = float(line.split(",", 1)[1])
            elif line and not line.startswith("#") and not line.startswith("model_factor"):
                mf, af, l1 = next(csv.reader([line]))
                rows.append((tuple(float(x) for x in mf.split(";")), float(af), float(l1)))
    mfs = list(dict.fromkeys(r[0] for r in rows))
    afs = list(dict.fromkeys(r[1] for r in rows))
    grid = np.full((len(mfs), len(afs)), np.nan)
    for mf, af, l1 in rows:
        grid[mfs.index(mf), afs.index(af)] = l1
    return SweepReport(mfs, afs, grid, bicubic)


HEATMAP_CELL = 16


def sweep_heatmap(sweep: SweepReport) -> np.ndarray:
    """Cells shaded 0.1..0.9 by loss; the minimising cell is framed at 1.0."""
    g = sweep.losses
    lo, hi = float(np.nanmin(g)), float(np.nanmax(g))
    shade = 0.1 + 0.8 * ((g - lo) / (hi - lo) if hi > lo else np.zeros_like(g))
    img = np.kron(shade, np.ones((HEATMAP_CELL, HEATMAP_CELL)))
    i, j = sweep.argmin()
    r0, c0, c = i * HEATMAP_CELL, j * HEATMAP_CELL, HEATMAP_CELL
    img[r0, c0:c0 + c] = img[r0 + c - 1, c0:c0 + c] = 1.0
    img[r0:r0 + c, c0] = img[r0:r0 + c, c0 + c - 1] = 1.0
    return img


def heatmap_marked_cell(img: np.ndarray) -> tuple[int, int]:
    """Locate the framed cell in an image produced by :func:`sweep_heatmap`."""
    rows, cols = np.nonzero(img >= 1.0 - 1e-6)
    return int(rows.min()) // HEATMAP_CELL, int(cols.min()) // HEATMAP_CELL


def report(sweep: SweepReport, path):
    """Write ``path`` (CSV) and ``path`` with a ``.pgm`` suffix (heatmap)."""
    path = Path(path)
    write_sweep_csv(sweep, path)
    save_image(GrayImage(sweep_heatmap(sweep)), path.with_suffix(".pgm"), maxval=65535)
    return path.with_suffix(".pgm")
