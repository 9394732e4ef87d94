"""Per-module learned parameter counts for the full-size configuration and variants.

    python scripts/param_count.py [--set d_g=2048 ...]
"""

import argparse

from hitpr.cli import load_run_config
from hitpr.descriptor import init_model, param_breakdown, param_count


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    cfg = load_run_config(None, args.set).model
    params = init_model(cfg, seed=0)
    total = param_count(params)
    for part, n in param_breakdown(params).items():
        print(f"{part:6s} {n:>10,d}  {100 * n / total:5.1f}%")
    print(f"total  {total:>10,d}  (reference 2.72M)")
    print("per tensor:")
    for path, prm in params.store.params.items():
        print(f"  {path:28s} {str(prm.data.shape):14s} {prm.data.size:>9,d}")


if __name__ == "__main__":
    main()
