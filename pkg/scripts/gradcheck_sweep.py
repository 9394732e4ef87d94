"""End-to-end finite-difference check over many seeds, reporting kink crossings.

    python scripts/gradcheck_sweep.py --seeds 20
"""

import argparse

from hitpr.selftest import e2e_gradcheck


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-5)
    args = p.parse_args()
    for seed in range(args.seeds):
        res = e2e_gradcheck(seed, h=args.h)
        worst = max(res.errors, key=res.errors.get)
        status = "smooth" if res.smooth else f"{res.kink_crossings} kink crossings"
        print(f"seed {seed:3d}  max rel err {res.max_error:.2e} ({worst})  {status}")


if __name__ == "__main__":
    main()
