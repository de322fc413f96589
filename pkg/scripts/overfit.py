"""Memorise a single synthetic pair as a capacity check.

    python3 scripts/overfit.py [--steps 500]
"""
import argparse
from dataclasses import replace

from abldeg.experiments import OverfitConfig, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()
    res = run_overfit(replace(OverfitConfig(), steps=args.steps))
    print(f"RESULT best_step_l1={min(res.step_losses):.6f} final_l1={res.final_l1:.6f} "
          f"steps={len(res.step_losses)} seconds={res.seconds:.0f}")


if __name__ == "__main__":
    main()
