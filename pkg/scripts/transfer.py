"""Train on a narrow truth kernel, then sweep the bank factor on wide-kernel data.

    python3 scripts/transfer.py --out runs/transfer.csv
"""
import argparse
from pathlib import Path

from abldeg.evaluation import report
from abldeg.experiments import TransferConfig, run_transfer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True, help="sweep CSV; a heatmap PGM is written beside it")
    ap.add_argument("--train-factor", type=float, default=0.5)
    ap.add_argument("--test-factor", type=float, default=2.0)
    args = ap.parse_args()
    res = run_transfer(TransferConfig(train_factor=args.train_factor, test_factor=args.test_factor))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report(res.sweep, args.out)
    print(f"RESULT best_factor={res.best_factor:g} best_l1={res.best_l1:.6f} "
          f"unadjusted_l1={res.unadjusted_l1:.6f} bicubic_l1={res.sweep.baseline_bicubic:.6f} "
          f"seconds={res.seconds:.0f}")


if __name__ == "__main__":
    main()
