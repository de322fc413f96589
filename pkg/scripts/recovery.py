"""Learn a known 30 degree blur from 32 synthetic pairs and compare with bicubic.

    python3 scripts/recovery.py --out runs/recovery [--flips independent]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from abldeg.experiments import RecoveryConfig, run_recovery


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--flips", choices=("independent", "joint", "none"), default="joint")
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    base = RecoveryConfig()
    cfg = replace(base, train=replace(base.train, flips=args.flips, max_steps=args.steps))
    args.out.mkdir(parents=True, exist_ok=True)
    res = run_recovery(cfg, checkpoint_dir=args.out)
    res.log.to_csv(args.out / "log.csv")
    print(f"RESULT test_l1={res.test_l1:.6f} bicubic_l1={res.bicubic_l1:.6f} "
          f"ratio={res.ratio:.4f} steps={len(res.log.rows)} seconds={res.seconds:.0f}")


if __name__ == "__main__":
    main()
