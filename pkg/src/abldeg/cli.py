"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 format or version, 5 shape or topology.
Every command ends with one ``RESULT key=value ...`` line on stdout.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .degnet import CheckpointError, DegradationModel, NetConfig, load_model, save_model
from .evaluation import BankTopologyError, factor_sweep, psnr, report, ssim
from .gausskernel import BankSpec, covariance, ratio_preserving_factors
from .imageio import (GrayImage, ImageFormatError, ImagePair, load_image,
                      load_pair_dir, save_image, save_pair)
from .trainpipe import (SyntheticSpec, TrainConfig, assemble_patches, bicubic_l1,
                        evaluate_l1, synth_pairs, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_SHAPE = 0, 2, 3, 4, 5


class ShapeError(Exception):
    pass


def result(**kv) -> str:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = "inf" if math.isinf(v) else repr(v)
        parts.append(f"{k}={v}")
    line = "RESULT " + " ".join(parts)
    print(line)
    return line


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text}")
        return v
    return parse


def _require_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no such directory: {path}")
    return path


def _load_pairs(directory, scale=None) -> list[ImagePair]:
    directory = _require_dir(directory)
    try:
        named = load_pair_dir(directory, scale)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    if not named:
        raise FileNotFoundError(f"no <name>_HR.pgm/<name>_LR.pgm pairs in {directory}")
    return [p for _, p in named]


def _with_factor(model: DegradationModel, factors) -> DegradationModel:
    if not factors:
        return model
    native = model.config.bank.factors
    if len(factors) == 1:
        return model.with_factors(ratio_preserving_factors(native, factors[0]))
    if len(factors) != len(native):
        raise ShapeError(f"model bank has {len(native)} factors, got {len(factors)}")
    return model.with_factors(factors)


# --- commands ---------------------------------------------------------------------

def cmd_synth(a) -> int:
    cov = covariance(a.truth_factor, math.radians(a.truth_angle), a.aspect)
    spec = SyntheticSpec(cov, a.scale, a.source or "procedural", a.noise, a.hr_size,
                         a.roi, a.kernel_size)
    pairs = synth_pairs(spec, a.count, a.seed)
    for i, pair in enumerate(pairs):
        save_pair(pair, a.out, f"img{i:03d}")
    print(f"truth covariance [[{cov.xx!r}, {cov.xy!r}], [{cov.xy!r}, {cov.yy!r}]]")
    result(pairs=len(pairs), scale=a.scale, xx=cov.xx, xy=cov.xy, yy=cov.yy, out=a.out)
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = TrainConfig.from_file(a.config) if a.config else TrainConfig()
    pairs = _load_pairs(a.data)
    scale = a.scale or pairs[0].scale
    if any(p.scale != scale for p in pairs):
        raise ShapeError(f"data scale does not match model scale {scale}")
    angles = tuple(math.radians(d) for d in a.angles)
    net = NetConfig(a.channels, a.blocks, scale, BankSpec(angles, tuple(a.bank_factors)))
    model = DegradationModel.init(net, cfg.seed)
    patches = assemble_patches(pairs, cfg)
    log = train(model, patches, cfg, checkpoint_dir=a.checkpoint_dir)
    out = Path(a.out)
    save_model(model, out)
    if a.log:
        log.to_csv(a.log)
    final = log.epoch_losses[-1] if log.epoch_losses else math.nan
    result(steps=len(log.rows), epochs=len(log.epoch_losses), final_loss=final, out=out)
    return EXIT_OK


def cmd_degrade(a) -> int:
    model = _with_factor(load_model(a.model), a.factor)
    img = load_image(a.input)
    s = model.config.scale
    if img.height % s or img.width % s:
        raise ShapeError(f"image {img.height}x{img.width} not divisible by scale {s}")
    out = model.degrade(img.data)
    save_image(GrayImage(out), a.out, a.maxval)
    result(height=out.shape[0], width=out.shape[1], factors=";".join(repr(f) for f in model.config.bank.factors),
           out=a.out)
    return EXIT_OK


def cmd_eval(a) -> int:
    model = _with_factor(load_model(a.model), a.factor)
    pairs = _load_pairs(a.data)
    if any(p.scale != model.config.scale for p in pairs):
        raise ShapeError(f"data scale does not match model scale {model.config.scale}")
    l1 = evaluate_l1(model, pairs)
    ps, ss = [], []
    for p in pairs:
        pred = model.degrade(p.hr.data)
        ps.append(psnr(pred, p.lr.data))
        ss.append(ssim(pred, p.lr.data) if min(pred.shape) >= 11 else math.nan)
    result(pairs=len(pairs), l1=float(l1), bicubic_l1=float(bicubic_l1(pairs)),
           psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))
    return EXIT_OK


def cmd_sweep(a) -> int:
    pairs = _load_pairs(a.data)
    models = [load_model(m) for m in a.models]
    if any(p.scale != m.config.scale for p in pairs for m in models):
        raise ShapeError("data scale does not match model scale")
    sweep = factor_sweep(models, a.factors, pairs)
    heat = report(sweep, a.out)
    i, j = sweep.argmin()
    result(best_model=";".join(repr(f) for f in sweep.model_factors[i]),
           best_factor=sweep.adjusted_factors[j], best_l1=float(sweep.losses[i, j]),
           bicubic=float(sweep.baseline_bicubic), out=a.out, heatmap=heat)
    return EXIT_OK


def cmd_kernel_dump(a) -> int:
    model = _with_factor(load_model(a.model), a.factor)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = model.config.bank
    for k, (grid, (factor, angle)) in enumerate(zip(model.bank.kernels, model.bank.labels)):
        header = (f"# factor={factor!r} angle_deg={math.degrees(angle)!r} aspect={spec.aspect!r} "
                  f"roi={spec.roi_half_width!r} size={spec.kernel_size}")
        np.savetxt(out / f"kernel_{k:02d}.txt", grid, fmt="%.17g", header=header[2:])
        save_image(GrayImage(grid / grid.max()), out / f"kernel_{k:02d}.pgm", maxval=65535)
    w = model.mixture_weights()
    with open(out / "weights.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["channel"] + [f"k{k:02d}_f{f!r}_a{math.degrees(ang):g}"
                                   for k, (f, ang) in enumerate(model.bank.labels)])
        for c, row in enumerate(w):
            wr.writerow([c] + [repr(float(v)) for v in row])
    result(kernels=len(model.bank), channels=w.shape[0], out=out)
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abldeg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    pos_int, pos_float = _positive(int), _positive(float)

    s = sub.add_parser("synth", help="write synthetic HR/LR pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=pos_int, default=40)
    s.add_argument("--truth-factor", type=pos_float, default=1.0)
    s.add_argument("--truth-angle", type=float, default=30.0, help="degrees")
    s.add_argument("--aspect", type=pos_float, default=0.3)
    s.add_argument("--scale", type=int, choices=(2, 4, 8), default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--hr-size", type=pos_int, default=64)
    s.add_argument("--kernel-size", type=pos_int, default=16)
    s.add_argument("--roi", type=pos_float, default=4.0, help="ROI half-width")
    s.add_argument("--source", help="directory of HR images (default: procedural)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a degradation model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key: value training config")
    t.add_argument("--out", required=True)
    t.add_argument("--channels", type=pos_int, default=16)
    t.add_argument("--blocks", type=_positive(int), default=4)
    t.add_argument("--scale", type=int, choices=(2, 4, 8))
    t.add_argument("--bank-factors", type=pos_float, nargs="+", default=[1.0])
    t.add_argument("--angles", type=float, nargs="+", default=[0.0, 45.0, -45.0, 90.0], help="degrees")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--log", help="write the loss log as CSV")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("degrade", help="run a model on one image")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--factor", type=pos_float, nargs="+")
    d.add_argument("--maxval", type=int, choices=(255, 65535), default=65535)
    d.set_defaults(func=cmd_degrade)

    e = sub.add_parser("eval", help="L1/PSNR/SSIM of a model on a pair directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--factor", type=pos_float, nargs="+")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="factor-sweep grid over models")
    w.add_argument("--models", nargs="+", required=True)
    w.add_argument("--factors", type=pos_float, nargs="+", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    k = sub.add_parser("kernel-dump", help="write bank kernels and mixture weights")
    k.add_argument("--model", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--factor", type=pos_float, nargs="+")
    k.set_defaults(func=cmd_kernel_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ImageFormatError, CheckpointError) as exc:
        code, msg = EXIT_FORMAT, exc
    except (BankTopologyError, ShapeError) as exc:
        code, msg = EXIT_SHAPE, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    except (ValueError, yaml.YAMLError) as exc:
        # config files with unknown keys or out-of-range values
        code, msg = EXIT_FORMAT, exc
    print(f"abldeg {args.command}: error: {msg}", file=sys.stderr)
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
