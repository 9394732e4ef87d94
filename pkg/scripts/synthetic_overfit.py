"""Synthetic overfit experiment: generate places, train, evaluate held-out queries.

    python scripts/synthetic_overfit.py --out runs/overfit

Writes the data set, checkpoints, loss_log.csv, recall_curve.csv and a
summary under ``--out``.
"""

import argparse
import time
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from hitpr.descriptor import HiTPRConfig
from hitpr.harness import epoch_means, evaluate, gen_synthetic, load_catalog, train


@dataclass
class Experiment:
    places: int = 20
    clouds_per_place: int = 4
    points: int = 512
    spacing: float = 100.0
    jitter: float = 2.0
    data_seed: int = 0
    train_seed: int = 0
    epochs: int = 20
    threads: int = 1


def reduced_config(epochs):
    return HiTPRConfig(tau=4, k=16, d_i=16, d_a=32, d_s=16, d_k=16, d_v=32, d_b=32, m_blocks=2,
                       d_g=64, pos_hidden=16, lr_init=3e-4, lr_final=5e-5, epochs=epochs)


def run(exp: Experiment, out: Path):
    data = out / "data"
    gen_synthetic(data, exp.places, exp.clouds_per_place, exp.points, exp.spacing, exp.jitter,
                  exp.data_seed)
    db = load_catalog(data / "database.csv")
    queries = load_catalog(data / "queries.csv")
    t = time.perf_counter()
    with threadpool_limits(limits=exp.threads):
        params, rows = train(db, reduced_config(exp.epochs), seed=exp.train_seed, out_dir=out,
                             progress=lambda e, m: print(f"epoch {e:2d}  mean loss {m:.5f}"))
        report = evaluate(queries, db, params)
    report.write_curve(out / "recall_curve.csv")
    means = epoch_means(rows)
    summary = (report.summary()
               + f"epoch-1 mean loss: {means[0]:.6g}\nfinal mean loss: {means[-1]:.6g}\n"
               + f"wall time: {time.perf_counter() - t:.0f}s on {exp.threads} thread(s)\n")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/overfit"))
    for name, default in vars(Experiment()).items():
        p.add_argument(f"--{name.replace('_', '-')}", type=type(default), default=default)
    args = p.parse_args()
    exp = Experiment(**{k: getattr(args, k) for k in vars(Experiment())})
    run(exp, args.out)


if __name__ == "__main__":
    main()
