"""Run the desk-scale trend experiment and print the comparison tables.

    python scripts/desk_trend.py --workdir runs/desk_trend [--variants full supervised] [--seeds 0 1 2]

Re-running with the same workdir skips finished (variant, seed) runs.
"""
import argparse
import json
import sys

from dssn.experiments import SEEDS, mean_miou, pseudo_label_quality, run_trend, variants, desk_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/desk_trend")
    ap.add_argument("--variants", nargs="+", default=None)
    ap.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    args = ap.parse_args(argv)

    names = args.variants or list(variants(desk_config().train))
    results = run_trend(args.workdir, names, args.seeds)
    print("\nvariant             teacher mIoU  student mIoU")
    for name in names:
        t = mean_miou(results, name, args.seeds)
        s = mean_miou(results, name, args.seeds, "student")
        print(f"{name:18s}  {100 * t:11.2f}  {100 * s:12.2f}")
    if "full" in names:
        quality = pseudo_label_quality(args.workdir, seeds=args.seeds)
        print("\npseudo-label quality of the full model's teachers on the validation set")
        print(json.dumps(quality, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
