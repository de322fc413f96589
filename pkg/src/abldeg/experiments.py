"""Pinned recipes for the synthetic experiments.

Each runner builds its data from seeds, trains, evaluates and returns a small
result record, so the scripts and the acceptance suite exercise the same code.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .degnet import DegradationModel, NetConfig, save_model
from .evaluation import SweepReport, factor_sweep
from .gausskernel import BankSpec, covariance
from .trainpipe import (SyntheticSpec, TrainConfig, TrainLog, assemble_patches,
                        bicubic_l1, evaluate_l1, synth_pairs, train)


@dataclass(frozen=True)
class RecoveryConfig:
    """Learn a known degradation and compare against bicubic on held-out images."""

    truth_factor: float = 1.0
    truth_angle_deg: float = 30.0
    scale: int = 4
    n_train: int = 32
    n_test: int = 8
    data_seed: int = 1
    net: NetConfig = field(default_factory=NetConfig)
    # an oriented truth kernel is not mirror symmetric, so only half-turn flips
    # keep the augmented pairs consistent with one degradation
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-4, epochs=10**6, max_steps=2000, hr_patch=32, patches_per_image=16,
        flips="joint", checkpoint_every=500))
    model_seed: int = 0


@dataclass
class RecoveryResult:
    model: DegradationModel
    log: TrainLog
    test_l1: float
    bicubic_l1: float
    seconds: float

    @property
    def ratio(self) -> float:
        return self.test_l1 / self.bicubic_l1


def recovery_data(cfg: RecoveryConfig):
    spec = SyntheticSpec(covariance(cfg.truth_factor, math.radians(cfg.truth_angle_deg)), cfg.scale)
    pairs = synth_pairs(spec, cfg.n_train + cfg.n_test, cfg.data_seed)
    return pairs[:cfg.n_train], pairs[cfg.n_train:]


def run_recovery(cfg: RecoveryConfig = RecoveryConfig(), checkpoint_dir=None) -> RecoveryResult:
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        train_pairs, test_pairs = recovery_data(cfg)
        model = DegradationModel.init(cfg.net, cfg.model_seed)
        log = train(model, assemble_patches(train_pairs, cfg.train), cfg.train, checkpoint_dir=checkpoint_dir)
        if checkpoint_dir is not None:
            save_model(model, Path(checkpoint_dir) / "final.ckpt")
        test_l1 = evaluate_l1(model, test_pairs)
        base = bicubic_l1(test_pairs)
    return RecoveryResult(model, log, test_l1, base, time.perf_counter() - t0)


@dataclass(frozen=True)
class TransferConfig:
    """Train on a narrow truth kernel, then sweep the bank factor on wide-kernel data."""

    train_factor: float = 0.5
    test_factor: float = 2.0
    truth_angle_deg: float = 30.0
    sweep_factors: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 3.0)
    n_train: int = 32
    n_test: int = 8
    train_seed: int = 11
    test_seed: int = 12
    channels: int = 16
    train: TrainConfig = field(default_factory=lambda: replace(RecoveryConfig().train))
    model_seed: int = 0


@dataclass
class TransferResult:
    sweep: SweepReport
    native_index: int
    seconds: float

    @property
    def best_factor(self) -> float:
        return self.sweep.adjusted_factors[self.sweep.argmin()[1]]

    @property
    def best_l1(self) -> float:
        return float(self.sweep.losses.min())

    @property
    def unadjusted_l1(self) -> float:
        return float(self.sweep.losses[0, self.native_index])


def run_transfer(cfg: TransferConfig = TransferConfig()) -> TransferResult:
    t0 = time.perf_counter()
    angle = math.radians(cfg.truth_angle_deg)
    with threadpool_limits(limits=1):
        tr = synth_pairs(SyntheticSpec(covariance(cfg.train_factor, angle)), cfg.n_train, cfg.train_seed)
        te = synth_pairs(SyntheticSpec(covariance(cfg.test_factor, angle)), cfg.n_test, cfg.test_seed)
        net = NetConfig(channels=cfg.channels, bank=BankSpec(factors=(cfg.train_factor,)))
        model = DegradationModel.init(net, cfg.model_seed)
        train(model, assemble_patches(tr, cfg.train), cfg.train)
        sweep = factor_sweep([model], cfg.sweep_factors, te)
    native = list(cfg.sweep_factors).index(cfg.train_factor)
    return TransferResult(sweep, native, time.perf_counter() - t0)


@dataclass(frozen=True)
class OverfitConfig:
    """Memorise one pair. Augmentation is off: there is nothing to generalise to."""

    steps: int = 500
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-4, epochs=500, flips="none"))
    data_seed: int = 1
    model_seed: int = 0


@dataclass
class OverfitResult:
    step_losses: list[float]
    final_l1: float
    seconds: float


def run_overfit(cfg: OverfitConfig = OverfitConfig()) -> OverfitResult:
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        pair = synth_pairs(SyntheticSpec(covariance(1.0, math.radians(30.0))), 1, cfg.data_seed)
        model = DegradationModel.init(NetConfig(), cfg.model_seed)
        log = train(model, pair, replace(cfg.train, max_steps=cfg.steps))
        final = evaluate_l1(model, pair)
    return OverfitResult([r[2] for r in log.rows], final, time.perf_counter() - t0)


def checkpoint_bytes(directory) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(Path(directory).glob("*.ckpt"))}


def loss_values(log: TrainLog) -> np.ndarray:
    return np.array([(r[0], r[1], r[2]) for r in log.rows])
