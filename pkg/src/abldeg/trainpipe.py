"""Synthetic ground truth, dataset assembly and the supervised training loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .autodiff import AdamState, Tensor, adam_step, backward, l1_loss, zero_grad
from .degnet import DegradationModel, save_model
from .gausskernel import Covariance2, discretize
from .imageio import (GrayImage, ImagePair, PatchSpec, extract_pairs, load_luma)


# "independent": horizontal and vertical flips drawn separately per sample.
# "joint": both axes flipped together (a half turn), which maps any centrally
# symmetric blur onto itself; independent flips turn an oriented kernel into
# its mirror image and so mix two different degradations in one data set.
FLIP_MODES = ("independent", "joint", "none")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 50
    patches_per_image: int = 50
    hr_patch: int = 64
    seed: int = 0
    checkpoint_every: int = 500
    max_steps: int | None = None
    flips: str = "independent"

    def __post_init__(self):
        if self.flips not in FLIP_MODES:
            raise ValueError(f"flips must be one of {FLIP_MODES}")
        for name in ("batch_size", "epochs", "patches_per_image", "hr_patch", "checkpoint_every"):
            if getattr(self, name) <= 0 and not (name == "epochs" and self.epochs == 0):
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read ``key: value`` lines (YAML). Unknown keys are rejected."""
        raw = yaml.safe_load(Path(path).read_text()) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_file(self, path):
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=False))


# --- synthetic ground truth ------------------------------------------------------

@dataclass
class SyntheticSpec:
    truth_cov: Covariance2
    scale: int = 4
    image_source: str | Path = "procedural"
    noise_sigma: float = 0.0
    hr_size: int = 64
    roi_half_width: float = 4.0
    kernel_size: int = 16

    def truth_kernel(self) -> np.ndarray:
        return discretize(self.truth_cov, self.roi_half_width, self.kernel_size)


def blur_subsample(hr: np.ndarray, kernel: np.ndarray, scale: int) -> np.ndarray:
    """``lr[m] = sum_p hr[p] k[scale*m - p]`` with reflect borders.

    The kernel origin is placed so that its centre of mass lands on the centre
    of each ``scale x scale`` HR block. That keeps the pair relation invariant
    under flips, which the training augmentation relies on. Needs
    ``kernel_size + scale`` even and ``kernel_size >= scale``.
    """
    s = kernel.shape[0]
    if kernel.shape != (s, s):
        raise ValueError("kernel must be square")
    if (s + scale) % 2 or s < scale:
        raise ValueError(f"kernel size {s} incompatible with scale {scale}")
    h, w = hr.shape
    if h % scale or w % scale:
        raise ValueError(f"image {hr.shape} not divisible by scale {scale}")
    pad = (s - scale) // 2
    padded = np.pad(hr, pad, mode="reflect") if pad else hr
    win = sliding_window_view(padded, (s, s))[::scale, ::scale][: h // scale, : w // scale]
    return np.einsum("ijuv,uv->ij", win, kernel[::-1, ::-1])


def procedural_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Oriented sinusoids + convex polygons + filtered noise, mapped into [0.05, 0.95]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.03, 0.25)
        img += rng.uniform(0.2, 0.6) * np.sin(
            2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + rng.uniform(0, 2 * math.pi))
    for _ in range(rng.integers(1, 5)):
        cx, cy = rng.uniform(0, size, 2)
        inside = np.ones((size, size), dtype=bool)
        for a in np.sort(rng.uniform(0, 2 * math.pi, rng.integers(3, 7))):
            r = rng.uniform(4, size / 3)
            inside &= (xx - cx) * math.cos(a) + (yy - cy) * math.sin(a) <= r
        img += rng.uniform(-1, 1) * inside
    img += gaussian_filter(rng.normal(size=(size, size)), rng.uniform(0.7, 3.0)) * rng.uniform(0.5, 3.0)
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo if hi > lo else 1.0)


def _hr_sources(spec: SyntheticSpec, count: int, rng) -> list[np.ndarray]:
    if spec.image_source == "procedural":
        return [procedural_image(rng, spec.hr_size) for _ in range(count)]
    directory = Path(spec.image_source)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not files:
        raise FileNotFoundError(f"no PGM/PNG images in {directory}")
    out = []
    for i in range(count):
        img = load_luma(files[i % len(files)]).data
        hs = spec.hr_size
        if img.shape[0] < hs or img.shape[1] < hs:
            raise ValueError(f"{files[i % len(files)]} smaller than {hs}x{hs}")
        r = int(rng.integers(0, img.shape[0] - hs + 1))
        c = int(rng.integers(0, img.shape[1] - hs + 1))
        out.append(img[r:r + hs, c:c + hs])
    return out


def synth_pairs(spec: SyntheticSpec, count: int, seed: int) -> list[ImagePair]:
    """HR images and their ground-truth LR under the truth kernel."""
    rng = np.random.default_rng(seed)
    kernel = spec.truth_kernel()
    pairs = []
    for hr in _hr_sources(spec, count, rng):
        lr = blur_subsample(hr, kernel, spec.scale)
        if spec.noise_sigma > 0:
            lr = lr + rng.normal(0.0, spec.noise_sigma, size=lr.shape)
        pairs.append(ImagePair(GrayImage(hr), GrayImage.clipped(lr), spec.scale))
    return pairs


# --- dataset assembly -------------------------------------------------------------

def split_by_source(names: Sequence[str], test_count: int, seed: int) -> tuple[list[str], list[str]]:
    """Split source-image names; patches of one source never straddle the split."""
    order = list(np.random.default_rng(seed).permutation(len(names)))
    test = sorted(names[i] for i in order[:test_count])
    train = sorted(names[i] for i in order[test_count:])
    return train, test


def assemble_patches(pairs: Sequence[ImagePair], cfg: TrainConfig) -> list[ImagePair]:
    """Use pairs already at patch size as-is; cut larger ones into random patches."""
    out = []
    for i, pair in enumerate(pairs):
        if pair.hr.height == cfg.hr_patch and pair.hr.width == cfg.hr_patch:
            out.append(pair)
        else:
            spec = PatchSpec(cfg.hr_patch, pair.scale)
            out.extend(extract_pairs(pair.hr, pair.lr, spec, cfg.patches_per_image, cfg.seed * 100003 + i))
    return out


def stack_pairs(pairs: Sequence[ImagePair]) -> tuple[np.ndarray, np.ndarray]:
    hr = np.stack([p.hr.data for p in pairs])[:, None]
    lr = np.stack([p.lr.data for p in pairs])[:, None]
    return hr, lr


# --- training -----------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, epoch, loss, wall
    epoch_losses: list[float] = field(default_factory=list)

    def to_csv(self, path, include_time: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "wall_time"] if include_time else ["step", "epoch", "loss"])
            for step, epoch, loss, wall in self.rows:
                row = [step, epoch, repr(loss)]
                if include_time:
                    row.append(f"{wall:.3f}")
                w.writerow(row)


def random_flips(hr: np.ndarray, lr: np.ndarray, rng, mode: str = "independent") -> tuple[np.ndarray, np.ndarray]:
    """Flip each sample with p = 0.5 per draw, identically in HR and LR."""
    hr, lr = hr.copy(), lr.copy()
    if mode == "none":
        return hr, lr
    for i in range(hr.shape[0]):
        if mode == "joint":
            if rng.random() < 0.5:
                hr[i] = hr[i, :, ::-1, ::-1]
                lr[i] = lr[i, :, ::-1, ::-1]
            continue
        if rng.random() < 0.5:
            hr[i] = hr[i, :, :, ::-1]
            lr[i] = lr[i, :, :, ::-1]
        if rng.random() < 0.5:
            hr[i] = hr[i, :, ::-1, :]
            lr[i] = lr[i, :, ::-1, :]
    return hr, lr


def train(model: DegradationModel, pairs: Sequence[ImagePair], cfg: TrainConfig,
          checkpoint_dir=None, log_fn=None) -> TrainLog:
    """L1 + Adam over flip-augmented mini-batches.

    With ``checkpoint_dir`` set, ``last.ckpt`` is written every
    ``cfg.checkpoint_every`` steps and at each epoch end, and ``best.ckpt``
    whenever the epoch mean loss improves.
    """
    log = TrainLog()
    if cfg.epochs == 0 or not pairs:
        return log
    bad = [p.scale for p in pairs if p.scale != model.config.scale]
    if bad:
        raise ValueError(f"pair scale {bad[0]} does not match model scale {model.config.scale}")
    hr_all, lr_all = stack_pairs(pairs)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    best = math.inf
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            hr, lr = random_flips(hr_all[idx], lr_all[idx], rng, cfg.flips)
            loss = l1_loss(model.forward(Tensor(hr)), lr)
            zero_grad(params)
            backward(loss)
            adam_step(params, state)
            step += 1
            val = float(loss.data)
            losses.append(val)
            log.rows.append((step, epoch, val, time.perf_counter() - t0))
            if ckdir is not None and step % cfg.checkpoint_every == 0:
                save_model(model, ckdir / "last.ckpt")
        if not losses:
            break
        mean = float(np.mean(losses))
        log.epoch_losses.append(mean)
        if log_fn is not None:
            log_fn(epoch, step, mean)
        if ckdir is not None:
            save_model(model, ckdir / "last.ckpt")
            if mean < best:
                best = mean
                save_model(model, ckdir / "best.ckpt")
    return log


def evaluate_l1(model: DegradationModel, pairs: Sequence[ImagePair], batch_size: int = 8) -> float:
    """Mean L1 between the clamped model output and the ground-truth LR."""
    if not pairs:
        raise ValueError("evaluate_l1 needs at least one pair")
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        shapes = {p.hr.data.shape for p in chunk}
        groups = [chunk] if len(shapes) == 1 else [[p] for p in chunk]
        for group in groups:
            hr, lr = stack_pairs(group)
            out = np.clip(model.forward(Tensor(hr)).data, 0.0, 1.0)
            total += np.abs(out - lr).sum()
            count += lr.size
    return total / count


def bicubic_l1(pairs: Sequence[ImagePair]) -> float:
    from .imageio import bicubic_downsample

    total, count = 0.0, 0
    for p in pairs:
        lr = bicubic_downsample(p.hr, p.scale).data
        total += np.abs(lr - p.lr.data).sum()
        count += lr.size
    return total / count
