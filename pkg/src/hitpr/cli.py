"""Command-line entry point: ``hitpr <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import numcore as nc
from .descriptor import (HiTPRConfig, extract_descriptor, init_model, param_breakdown, param_count,
                         write_descriptors)
from .harness import (DEFAULT_RADIUS, CatalogError, TrainingDiverged, build_index, evaluate,
                      gen_synthetic, load_catalog, load_submap, query_topn, train)

DATA_DIR_ENV = "HITPR_DATA_DIR"
REFERENCE_PARAMS = 2.72e6

log = logging.getLogger("hitpr")


@dataclass
class RunConfig:
    model: HiTPRConfig = field(default_factory=HiTPRConfig)
    data_dir: str = ""
    catalog: str = ""
    query_catalog: str = ""
    db_catalog: str = ""
    checkpoint: str = ""
    out_dir: str = "out"
    seed: int = 0
    success_radius: float = DEFAULT_RADIUS
    bn_mode: str = "eval"


_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "model"}
_MODEL_KEYS = {f.name: f for f in fields(HiTPRConfig)}


def _convert(kind, raw: str):
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return {"int": int, "float": float, "str": str}[kind](raw.strip())


def apply_settings(cfg: RunConfig, pairs) -> RunConfig:
    """Apply (key, value-string) pairs; unknown keys raise ConfigError."""
    run, model = {}, {}
    for key, raw in pairs:
        key = key.strip()
        if key in _MODEL_KEYS:
            model[key] = _convert(_MODEL_KEYS[key].type, raw)
        elif key in _RUN_KEYS:
            run[key] = _convert(_RUN_KEYS[key].type, raw)
        else:
            raise nc.ConfigError(f"unknown config key {key!r}")
    if run.get("bn_mode", cfg.bn_mode) not in ("train", "eval"):
        raise nc.ConfigError("bn_mode must be 'train' or 'eval'")
    return replace(cfg, model=replace(cfg.model, **model), **run)


def parse_config_text(text: str, source="<config>"):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise nc.ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return pairs


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig(data_dir=os.environ.get(DATA_DIR_ENV, ""))
    try:
        if path:
            text = Path(path).read_text(encoding="utf-8")
            cfg = apply_settings(cfg, parse_config_text(text, str(path)))
        return apply_settings(cfg, [o.split("=", 1) if "=" in o else (o, "") for o in overrides])
    except (TypeError, ValueError) as exc:
        raise nc.ConfigError(str(exc)) from None


def _catalog(path, data_dir, split):
    if not path:
        raise nc.ConfigError(f"no {split} catalog given")
    if not Path(path).is_file():
        raise FileNotFoundError(f"catalog file not found: {path}")
    return load_catalog(path, data_dir or None, split=split)


def _model_from(cfg: RunConfig, checkpoint):
    params = init_model(cfg.model, seed=cfg.seed)
    if not checkpoint:
        raise nc.ConfigError("no checkpoint given")
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    nc.load_checkpoint(params.store, checkpoint)
    return params.set_mode(cfg.bn_mode)


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> int:
    catalog = _catalog(cfg.catalog, cfg.data_dir, "train")
    out = Path(cfg.out_dir)
    params, rows = train(catalog, cfg.model, seed=cfg.seed, out_dir=out,
                         progress=lambda e, m: print(f"epoch {e}: mean loss {m:.6g}"))
    print(f"trained {cfg.model.epochs} epochs, {len(rows)} steps; checkpoints in {out}")
    return 0


def cmd_embed(cfg: RunConfig) -> int:
    catalog = _catalog(cfg.catalog, cfg.data_dir, "test")
    params = _model_from(cfg, cfg.checkpoint)
    index = build_index(catalog, params)
    bin_path, manifest = write_descriptors(cfg.out_dir, index.ids, index.descriptors)
    print(f"wrote {len(index)} descriptors to {bin_path} (manifest {manifest})")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    queries = _catalog(cfg.query_catalog or cfg.catalog, cfg.data_dir, "test")
    db = _catalog(cfg.db_catalog or cfg.catalog, cfg.data_dir, "test")
    params = _model_from(cfg, cfg.checkpoint)
    report = evaluate(queries, db, params, cfg.success_radius)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_curve(out / "recall_curve.csv")
    (out / "eval_report.txt").write_text(report.summary())
    print(report.summary(), end="")
    return 0


def cmd_retrieve(cfg: RunConfig, query_path, n) -> int:
    db = _catalog(cfg.db_catalog or cfg.catalog, cfg.data_dir, "test")
    params = _model_from(cfg, cfg.checkpoint)
    q = extract_descriptor(load_submap(query_path), params)
    for rank_, cid in enumerate(query_topn(build_index(db, params), q.vec, n), start=1):
        print(f"{rank_}\t{cid}")
    return 0


def cmd_param_count(cfg: RunConfig) -> int:
    params = init_model(cfg.model, seed=cfg.seed)
    total = param_count(params)
    for part, n in param_breakdown(params).items():
        print(f"{part:8s} {n:>10d}")
    print(f"total    {total:>10d}  (reference {REFERENCE_PARAMS / 1e6:.2f}M)")
    return 0


def cmd_selftest(cfg: RunConfig) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(seed=cfg.seed) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="hitpr", description="Hierarchical transformer place recognition")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output directory")
        return sp

    t = common(sub.add_parser("train", help="train on a catalog"))
    t.add_argument("--catalog")
    t.add_argument("--data-dir")
    t.add_argument("--epochs", type=int)

    e = common(sub.add_parser("embed", help="write descriptors for a catalog"))
    e.add_argument("--checkpoint")
    e.add_argument("--catalog")
    e.add_argument("--data-dir")

    ev = common(sub.add_parser("eval", help="recall@1, @1%% and the top-25 curve"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--queries")
    ev.add_argument("--db")
    ev.add_argument("--data-dir")
    ev.add_argument("--radius", type=float)

    r = common(sub.add_parser("retrieve", help="top-N database ids for one submap"), out=False)
    r.add_argument("query", help="query submap .bin")
    r.add_argument("--checkpoint")
    r.add_argument("--db")
    r.add_argument("--data-dir")
    r.add_argument("-n", type=int, default=5)

    g = sub.add_parser("gen-synthetic", help="write a synthetic submap set")
    g.add_argument("--out", required=True)
    g.add_argument("--places", type=int, default=20)
    g.add_argument("--clouds-per-place", type=int, default=4)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--spacing", type=float, default=100.0)
    g.add_argument("--jitter", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)

    common(sub.add_parser("selftest", help="gradient, oracle and invariance checks"), out=False)
    common(sub.add_parser("param-count", help="learned parameter count"), out=False)
    return p


def _resolve(args) -> RunConfig:
    overrides = list(args.set)
    flag_keys = {"seed": "seed", "out": "out_dir", "catalog": "catalog", "data_dir": "data_dir",
                 "epochs": "epochs", "checkpoint": "checkpoint", "queries": "query_catalog",
                 "db": "db_catalog", "radius": "success_radius"}
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_run_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        if args.command == "gen-synthetic":
            cat = gen_synthetic(args.out, args.places, args.clouds_per_place, args.points,
                                args.spacing, args.jitter, args.seed)
            print(f"wrote {len(cat)} submaps and catalog.csv/database.csv/queries.csv to {args.out}")
            return 0
        cfg = _resolve(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "embed":
            return cmd_embed(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args.query, args.n)
        if args.command == "param-count":
            return cmd_param_count(cfg)
        if args.command == "selftest":
            return cmd_selftest(cfg)
    except (nc.ConfigError, nc.DimensionError, nc.CheckpointFormatError, CatalogError,
            TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()
    return 1


if __name__ == "__main__":
    sys.exit(main())
