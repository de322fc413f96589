"""Anisotropic Gaussian kernels discretized by cell integration.

Kernels live on a square region of interest ``[-h, h)^2`` split into
``size x size`` equal half-open cells. Entry ``(m, n)`` holds the Gaussian
probability mass of cell ``m`` along the first axis (x) and cell ``n`` along
the second (y); the grid is then renormalized to sum to one.

When a grid is used as an image filter the first axis runs along image rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

DEFAULT_ANGLES = (0.0, math.pi / 4, -math.pi / 4, math.pi / 2)

# Gauss-Legendre points per axis for correlated cells.
QUAD_ORDER = 16
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(QUAD_ORDER)


@dataclass(frozen=True)
class Covariance2:
    xx: float
    xy: float
    yy: float

    def __post_init__(self):
        if not (self.xx > 0 and self.yy > 0 and self.xx * self.yy - self.xy**2 > 0):
            raise ValueError(f"covariance is not positive definite: {self}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.xx, self.xy], [self.xy, self.yy]])

    @property
    def det(self) -> float:
        return self.xx * self.yy - self.xy**2


def covariance(factor: float, angle: float, aspect: float = 0.3) -> Covariance2:
    """Return ``factor * R(angle) diag(1, aspect) R(angle)^T``."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    if aspect <= 0:
        raise ValueError(f"aspect must be positive, got {aspect}")
    c, s = math.cos(angle), math.sin(angle)
    xx = factor * (c * c + aspect * s * s)
    yy = factor * (s * s + aspect * c * c)
    xy = factor * c * s * (1.0 - aspect)
    return Covariance2(xx, xy, yy)


def _density(cov: Covariance2, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    det = cov.det
    q = (cov.yy * x * x - 2.0 * cov.xy * x * y + cov.xx * y * y) / det
    return np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))


def cell_mass(cov: Covariance2, x0: float, y0: float, x1: float, y1: float) -> float:
    """Probability mass of the zero-mean normal over ``[x0, x1] x [y0, y1]``.

    Exact CDF products when ``cov.xy == 0``; otherwise a tensor-product
    Gauss-Legendre rule of order ``QUAD_ORDER`` per axis.
    """
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate cell ({x0}, {y0}) -> ({x1}, {y1})")
    if cov.xy == 0.0:
        sx, sy = math.sqrt(cov.xx), math.sqrt(cov.yy)
        return float((ndtr(x1 / sx) - ndtr(x0 / sx)) * (ndtr(y1 / sy) - ndtr(y0 / sy)))
    return float(_gl_masses(cov, np.array([x0]), np.array([x1]), np.array([y0]), np.array([y1]))[0, 0])


def _gl_masses(cov, x0, x1, y0, y1):
    """Masses of all cells in the outer product of x-intervals and y-intervals."""
    hx = 0.5 * (x1 - x0)
    hy = 0.5 * (y1 - y0)
    xs = (0.5 * (x0 + x1))[:, None] + hx[:, None] * _GL_NODES[None, :]  # (M, Q)
    ys = (0.5 * (y0 + y1))[:, None] + hy[:, None] * _GL_NODES[None, :]  # (N, Q)
    f = _density(cov, xs[:, None, :, None], ys[None, :, None, :])  # (M, N, Q, Q)
    w = _GL_WEIGHTS[:, None] * _GL_WEIGHTS[None, :]
    return np.einsum("mnpq,pq->mn", f, w) * hx[:, None] * hy[None, :]


def cell_edges(roi_half_width: float, size: int) -> np.ndarray:
    return np.linspace(-roi_half_width, roi_half_width, size + 1)


def discretize(cov: Covariance2, roi_half_width: float = 4.0, size: int = 16,
               normalize: bool = True) -> np.ndarray:
    """Integrate the Gaussian over each cell of the ROI grid."""
    if size < 1 or roi_half_width <= 0:
        raise ValueError("need size >= 1 and roi_half_width > 0")
    e = cell_edges(roi_half_width, size)
    if cov.xy == 0.0:
        px = np.diff(ndtr(e / math.sqrt(cov.xx)))
        py = np.diff(ndtr(e / math.sqrt(cov.yy)))
        grid = np.outer(px, py)
    else:
        grid = _gl_masses(cov, e[:-1], e[1:], e[:-1], e[1:])
    if normalize:
        grid = grid / grid.sum()
    return grid


@dataclass(frozen=True)
class BankSpec:
    angles: tuple[float, ...] = DEFAULT_ANGLES
    factors: tuple[float, ...] = (1.0,)
    aspect: float = 0.3
    roi_half_width: float = 4.0
    kernel_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if not self.angles or not self.factors:
            raise ValueError("bank needs at least one angle and one factor")
        if any(f <= 0 for f in self.factors):
            raise ValueError(f"factors must be positive: {self.factors}")
        if not 0 < self.aspect <= 1:
            raise ValueError(f"aspect must lie in (0, 1]: {self.aspect}")
        if self.kernel_size < 3:
            raise ValueError(f"kernel_size must be >= 3: {self.kernel_size}")
        if self.roi_half_width <= 0:
            raise ValueError("roi_half_width must be positive")

    @property
    def num_kernels(self) -> int:
        return len(self.angles) * len(self.factors)

    def to_dict(self) -> dict:
        return {
            "angles": list(self.angles),
            "factors": list(self.factors),
            "aspect": self.aspect,
            "roi_half_width": self.roi_half_width,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BankSpec":
        return cls(**d)

    def same_topology(self, other: "BankSpec") -> bool:
        """True when two banks differ at most in their factor values."""
        return (
            self.angles == other.angles
            and len(self.factors) == len(other.factors)
            and self.aspect == other.aspect
            and self.roi_half_width == other.roi_half_width
            and self.kernel_size == other.kernel_size
        )


@dataclass(frozen=True)
class KernelBank:
    kernels: np.ndarray  # (K, size, size)
    spec: BankSpec
    labels: tuple[tuple[float, float], ...] = field(default=())  # (factor, angle) per kernel

    def __len__(self):
        return self.kernels.shape[0]


def build_bank(spec: BankSpec) -> KernelBank:
    """One kernel per (factor, angle), factors-major."""
    grids, labels = [], []
    for f in spec.factors:
        for a in spec.angles:
            cov = covariance(f, a, spec.aspect)
            grids.append(discretize(cov, spec.roi_half_width, spec.kernel_size))
            labels.append((f, a))
    kernels = np.stack(grids)
    kernels.setflags(write=False)
    return KernelBank(kernels, spec, tuple(labels))


def rescale_bank(bank: KernelBank, new_factors: Sequence[float]) -> KernelBank:
    """Rebuild ``bank`` with new factors, keeping count and ordering."""
    new_factors = tuple(float(f) for f in new_factors)
    if len(new_factors) != len(bank.spec.factors):
        raise ValueError(
            f"expected {len(bank.spec.factors)} factors, got {len(new_factors)}")
    spec = BankSpec(bank.spec.angles, new_factors, bank.spec.aspect,
                    bank.spec.roi_half_width, bank.spec.kernel_size)
    return build_bank(spec)


def ratio_preserving_factors(factors: Sequence[float], base: float) -> tuple[float, ...]:
    """Scale ``factors`` so the first equals ``base``; e.g. (1, 1.2) -> (2, 2.4)."""
    r = base / factors[0]
    return tuple(f * r for f in factors)


def second_moment(grid: np.ndarray) -> float:
    """Discrete second moment about the grid's centre, in cell units."""
    n, m = grid.shape
    cx, cy = (n - 1) / 2, (m - 1) / 2
    x = np.arange(n)[:, None] - cx
    y = np.arange(m)[None, :] - cy
    return float((grid * (x * x + y * y)).sum() / grid.sum())
