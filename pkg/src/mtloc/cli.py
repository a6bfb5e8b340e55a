"""Command-line entry points.

Subcommands::

    mtloc simulate        per-realization detections at one (delta, mu)
    mtloc roc             the same over the sweep grid, plus aggregated P_D / P_F
    mtloc blocking-stats  grid mean/covariance file and direct-path count table
    mtloc oracle-compare  staged algorithm vs exhaustive search on tiny instances
    mtloc replay          rerun the algorithm on a saved scene + measurements

Every command takes ``--config FILE`` (JSON) and any number of
``--set section.key=value`` overrides.  Output goes to ``--output-dir``,
else ``$MTLOC_OUTPUT_DIR``, else the config's ``output_dir``, else ``.``.

CSV layout (schema ``mtloc.csv/1``): a block of ``#`` lines holding the
schema, the seed and the resolved config as one JSON line, then a header row
and data rows.  Wall-clock timings go to a separate ``*_timings.csv`` so the
result files are byte-identical across runs with the same seed.

Replay files (schema ``mtloc.replay/1``) are JSON objects::

    {"schema": "mtloc.replay/1", "seed": int, "realization": int,
     "scene": <mtloc.scene/1>, "mpcs": <mtloc.mpcs/1>, "model_seed": int}

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .blocking import grid_precompute
from .config import ConfigError, RunConfig
from .eval import (
    algo_params,
    build_model,
    dp_count_distribution,
    icb_model,
    oracle_compare,
    realization_seed,
    realize,
    reports,
    run_ensemble,
    scene_config,
    score,
)
from .mtl import run_bayesian_mtl
from .scene import Scene, sample_scene
from .signal import MpcSet

CSV_SCHEMA = "mtloc.csv/1"
REPLAY_SCHEMA = "mtloc.replay/1"
OUTPUT_ENV = "MTLOC_OUTPUT_DIR"

RESULT_COLUMNS = ["realization", "method", "delta", "mu", "phi", "T", "TD", "TF", "n_est", "failed"]
ROC_COLUMNS = ["method", "delta", "mu", "phi", "n", "P_D", "P_F", "se_D", "se_F", "n_empty"]
ORACLE_COLUMNS = ["instance", "T", "N_max", "n_algo", "n_oracle", "objective_algo", "objective_oracle", "agree"]


# ----------------------------------------------------------------------------
# config and output plumbing


def resolve_config(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"{args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        require_seed = True
    else:
        data = {}
        require_seed = False
    for assignment in args.set or []:
        cfgmod.apply_override(data, assignment)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    return cfgmod.from_dict(data, require_seed=require_seed)


def output_dir(args, cfg: RunConfig) -> Path:
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12))
    return v


def write_csv(path: Path, kind: str, cfg: RunConfig, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# schema: {CSV_SCHEMA} {kind}\n")
        f.write(f"# seed: {cfg.seed}\n")
        f.write(f"# config: {cfg.dumps()}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_csv(path) -> tuple[dict, list]:
    """Header metadata and data rows (as strings) of a file written by :func:`write_csv`."""
    meta, lines = {}, []
    with open(path) as f:
        for line in f:
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                meta[key] = val.rstrip("\n")
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _timings(path: Path, rows, key_cols) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(key_cols + ["seconds"])
        for r in rows:
            w.writerow([r.get(c, "") for c in key_cols] + [r.get("seconds", "")])


# ----------------------------------------------------------------------------
# commands


def _summary(cfg, rows) -> dict:
    return {"schema": "mtloc.summary/1", "seed": cfg.seed, "config": cfg.to_dict(),
            "n_failed": sum(1 for r in rows if r.get("failed") and r.get("method") == rows[0]["method"]),
            "points": [rep.summary() for rep in reports(rows)]}


def cmd_simulate(args, cfg: RunConfig) -> int:
    cfg = replace(cfg, sweep=replace(cfg.sweep, deltas=None, mus=None, phis=None))
    if "size-threshold" in cfg.methods:
        raise ConfigError("methods: size-threshold needs a phi grid; use the roc command")
    out = output_dir(args, cfg)
    rows = run_ensemble(cfg)
    write_csv(out / f"{cfg.prefix}_results.csv", "results", cfg, RESULT_COLUMNS, rows)
    _timings(out / f"{cfg.prefix}_timings.csv", rows, ["realization", "method", "delta", "mu"])
    _write_json(out / f"{cfg.prefix}_summary.json", _summary(cfg, rows))
    if args.save_replay:
        for i in range(cfg.n_realizations):
            rz = realize(cfg, i)
            _write_json(out / f"{cfg.prefix}_replay_{i:04d}.json", {
                "schema": REPLAY_SCHEMA, "seed": cfg.seed, "realization": i,
                "scene": rz.scene.to_dict(), "mpcs": rz.mpcs.to_dict(), "model_seed": rz.model_seed,
            })
    for p in _summary(cfg, rows)["points"]:
        print(f"{p['method']}: P_D={p['P_D']:.4f} P_F={p['P_F']:.4f} (n={p['n']})")
    return 0


def cmd_roc(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    rows = run_ensemble(cfg)
    rows.sort(key=lambda r: (r.get("delta", 0.0), r.get("mu", 0.0), r["method"], r["realization"]))
    write_csv(out / f"{cfg.prefix}_results.csv", "results", cfg, RESULT_COLUMNS, rows)
    _timings(out / f"{cfg.prefix}_timings.csv", rows, ["realization", "method", "delta", "mu"])
    points = sorted((rep.summary() for rep in reports(rows)), key=lambda p: (p["delta"], p["mu"], p["method"]))
    write_csv(out / f"{cfg.prefix}_roc.csv", "roc", cfg, ROC_COLUMNS, points)
    _write_json(out / f"{cfg.prefix}_summary.json", _summary(cfg, rows))
    print(f"{len(points)} ROC points written to {out / (cfg.prefix + '_roc.csv')}")
    return 0


def _node_layout(cfg: RunConfig):
    """Fixed node positions from the config, else those of realization 0's scene."""
    s = cfg.scene
    if s.txs is not None and s.rxs is not None:
        return np.asarray(s.txs, float), np.asarray(s.rxs, float)
    ss = realization_seed(cfg.seed, 0).spawn(1)[0]
    scene = sample_scene(scene_config(cfg), np.random.default_rng(ss))
    return scene.txs, scene.rxs


def cmd_blocking_stats(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    sc = scene_config(cfg)
    ss_grid, ss_table = realization_seed(cfg.seed, 0).spawn(3)[1:]
    txs, rxs = _node_layout(cfg)
    stats = grid_precompute(sc.region, cfg.model.resolution, txs, rxs, sc.lam, sc.L, cfg.model.n_samples,
                            np.random.default_rng(ss_grid), cfg.model.exclude)
    doc = stats.to_dict()
    doc["seed"], doc["config"] = cfg.seed, cfg.to_dict()
    doc["txs"], doc["rxs"] = np.asarray(txs).tolist(), np.asarray(rxs).tolist()
    _write_json(out / f"{cfg.prefix}_gridstats.json", doc)

    p_dp = icb_model(cfg, cfg.algo.delta).p_dp
    true_pmf = dp_count_distribution(sc, "true", cfg.n_realizations, np.random.default_rng(ss_table))
    icb_pmf = dp_count_distribution(sc, "icb", 0, p_dp=p_dp)
    rows = [{"model": name, **{str(k): float(v) for k, v in enumerate(pmf)}}
            for name, pmf in (("true", true_pmf), ("icb", icb_pmf))]
    cols = ["model"] + [str(k) for k in range(len(true_pmf))]
    write_csv(out / f"{cfg.prefix}_dpcount.csv", "dpcount", cfg, cols, rows)
    for r in rows:
        print(r["model"], " ".join(f"{r[c]:.4f}" for c in cols[1:]))
    return 0


def cmd_oracle_compare(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    rows = [oracle_compare(cfg, i) for i in range(cfg.oracle.n_instances)]
    write_csv(out / f"{cfg.prefix}_oracle.csv", "oracle", cfg, ORACLE_COLUMNS, rows)
    with open(out / f"{cfg.prefix}_oracle_timings.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["instance", "seconds_algo", "seconds_oracle"])
        for r in rows:
            w.writerow([r["instance"], r["seconds_algo"], r["seconds_oracle"]])
    agree = sum(r["agree"] for r in rows) / len(rows)
    worse = sum(r["objective_algo"] < r["objective_oracle"] - 1e-9 for r in rows)
    print(f"agreement {agree:.3f} over {len(rows)} instances; objective below oracle in {worse}")
    return 0


def load_replay(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != REPLAY_SCHEMA:
        raise ConfigError(f"{path}: expected schema {REPLAY_SCHEMA}")
    return {"scene": Scene.from_dict(doc["scene"]), "mpcs": MpcSet.from_dict(doc["mpcs"]),
            "model_seed": int(doc.get("model_seed", 0)), "realization": doc.get("realization")}


def cmd_replay(args, cfg: RunConfig) -> int:
    rep = load_replay(args.replay)
    scene, mpcs = rep["scene"], rep["mpcs"]
    params = algo_params(cfg)
    model = build_model(cfg, scene, params.delta, rep["model_seed"])
    res = run_bayesian_mtl(mpcs, scene.trps(), model, params)
    td, tf = score(res.points, scene.targets, params.radius)
    record = {
        "schema": "mtloc.result/1", "seed": cfg.seed, "config": cfg.to_dict(),
        "realization": rep["realization"], "TD": td, "TF": tf, "T": len(scene.targets),
        "estimates": [{"x": p.x, "y": p.y, "entries": [list(e) for e in m.entries],
                       "p3": m.p3, "blocking_nll": m.blocking_nll} for p, m in res.estimates],
        "diagnostics": {k: v for k, v in res.diagnostics.items() if k != "order"}
                       | {"order": [int(i) for i in res.diagnostics.get("order", [])]},
    }
    text = json.dumps(record, indent=1, sort_keys=True, default=str)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "roc": cmd_roc,
    "blocking-stats": cmd_blocking_stats,
    "oracle-compare": cmd_oracle_compare,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set algo.delta=2 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")

    parser = argparse.ArgumentParser(prog="mtloc", description="Multistatic multi-target localization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="run the ensemble at one (delta, mu)")
    sim.add_argument("--save-replay", action="store_true", help="also write one replay file per realization")
    sub.add_parser("roc", parents=[common], help="sweep (delta, mu) or (delta, phi) and report P_D / P_F")
    sub.add_parser("blocking-stats", parents=[common], help="grid statistics and direct-path count table")
    sub.add_parser("oracle-compare", parents=[common], help="compare with exhaustive search on tiny instances")
    rp = sub.add_parser("replay", parents=[common], help="rerun the algorithm on a replay file")
    rp.add_argument("replay", help="replay JSON written by simulate --save-replay")
    rp.add_argument("--out", help="write the result record here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"mtloc: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"mtloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
