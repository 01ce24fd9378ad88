"""Run the five-mode phantom ablation and print per-mode held-out Dice plus the trend checks.

    python scripts/run_ablation.py                 # 2000 iterations, seeds 0-4, all cores
    python scripts/run_ablation.py --iters 300 --seeds 0 1 --workers 1
"""

import argparse
import json
import sys

from layermix.ablation import ORDER, AblationConfig, replace, run_ablation, trend_checks


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--iters", type=int, default=AblationConfig.iters)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(AblationConfig.seeds))
    parser.add_argument("--modes", nargs="+", default=list(ORDER), choices=ORDER)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--json", help="also write the per-seed scores here")
    args = parser.parse_args(argv)

    config = replace(AblationConfig(), iters=args.iters, seeds=tuple(args.seeds),
                     modes=tuple(args.modes), workers=args.workers)
    result = run_ablation(config)
    print(result.table())
    ok = True
    if set(ORDER) <= set(config.modes):
        for name, passed in trend_checks(result).items():
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
            ok &= passed
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"dice": result.dice, "seconds": result.seconds}, fh, indent=2)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
