"""Command-line harness: ``localrb offline | online | compare | inspect``.

Exit codes: 0 success, 2 configuration error, 3 non-convergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .greedy import NonConvergence, offline_drive
from .metric import ParameterDomain
from .online import OnlineModel, SnapshotsUnavailable
from .store import BundleError, load_bundle, save_bundle

log = logging.getLogger("localrb")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_IO = 0, 2, 3, 4


class HarnessIOError(OSError):
    pass


# -- output helpers -----------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return "" if x is None else str(x)


def write_csv(path, header, rows, seed) -> None:
    """CSV with a ``# seed=`` line and shortest round-trip floats."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _prepare_dir(path, names, force) -> None:
    os.makedirs(path, exist_ok=True)
    clash = [n for n in names if os.path.exists(os.path.join(path, n))]
    if clash and not force:
        raise HarnessIOError(f"{os.path.join(path, clash[0])} exists; use --force to overwrite")


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- offline ------------------------------------------------------------------

OFFLINE_FILES = ("convergence.csv", "samples.csv", "radii.csv", "metric.csv", "run.json", "config.txt")


def run_offline(cfg: RunConfig, out_dir: str, force: bool = False) -> dict:
    """Run the offline stage for ``cfg`` and write every output file.

    Returns the run summary. Raises ``ConfigError``, ``NonConvergence`` or
    ``OSError``.
    """
    backend = cfg.backend()
    ocfg = cfg.offline()
    seed = cfg["greedy.seed"]
    bundle_name = cfg["out.bundle"]
    _prepare_dir(out_dir, OFFLINE_FILES + (bundle_name,), force)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())

    t0 = time.perf_counter()
    history = []

    def progress(rec):
        history.append(rec)
        log.info("iter %(iteration)d  K=%(K)d  max_err=%(max_err).3e  evals=%(eta_evals)d  train=%(train_size)d", rec)

    conv_path = os.path.join(out_dir, "convergence.csv")
    cols = ("iteration", "K", "max_err", "eta_evals", "train_size")
    try:
        bundle = offline_drive(backend, ocfg, progress=progress)
    except NonConvergence:
        write_csv(conv_path, cols, [[r[c] for c in cols] for r in history], seed)
        raise
    elapsed = time.perf_counter() - t0

    write_csv(conv_path, cols, [[r[c] for c in cols] for r in history], seed)
    p = bundle.sample_mus.shape[1]
    write_csv(os.path.join(out_dir, "samples.csv"), ["index"] + [f"mu{i + 1}" for i in range(p)],
              [[k, *mu] for k, mu in enumerate(bundle.sample_mus)], seed)
    fld = bundle.field
    write_csv(os.path.join(out_dir, "radii.csv"), [f"mu{i + 1}" for i in range(p)] + ["r"],
              [[*mu, r] for mu, r in zip(fld.nodes, fld.radii)], seed)
    write_csv(os.path.join(out_dir, "metric.csv"),
              [f"mu{i + 1}" for i in range(p)] + [f"M{i + 1}{j + 1}" for i in range(p) for j in range(p)],
              [[*mu, *M.ravel()] for mu, M in zip(fld.nodes, fld.tensors)], seed)
    if not cfg["out.snapshots"]:
        bundle = bundle.without_snapshots()
    save_bundle(bundle, os.path.join(out_dir, bundle_name), force=force)
    summary = {
        "problem": cfg["problem.name"],
        "descriptor": bundle.descriptor,
        "seed": seed,
        "N": bundle.N,
        "tol": bundle.tol,
        "K": bundle.K,
        "iterations": bundle.meta["iterations"],
        "eta_evals": bundle.meta["eta_evals"],
        "final_err": bundle.meta["final_err"],
        "train_mode": ocfg.train_mode,
        "metric_mode": ocfg.metric_mode,
        "bundle": bundle_name,
        "elapsed_s": elapsed,
    }
    _write_json(os.path.join(out_dir, "run.json"), summary)
    return summary


def cmd_offline(args) -> int:
    cfg = _config_from_args(args)
    out = args.out or cfg["out.dir"]
    s = run_offline(cfg, out, force=args.force)
    print(f"converged: K={s['K']} max_err={s['final_err']:.3e} evals={s['eta_evals']} -> {out}")
    return EXIT_OK


# -- online -------------------------------------------------------------------


def _parse_points(text: str) -> np.ndarray:
    pts = [[float(t) for t in chunk.split(",")] for chunk in text.split(";") if chunk.strip()]
    return np.array(pts, dtype=float)


def build_queries(domain: ParameterDomain, points=None, lattice=None, box=None, random=None, seed=0):
    """Query points from an explicit list, a lattice or a random draw."""
    out = []
    if points:
        out.append(_parse_points(points))
    if lattice:
        if box:
            vals = [float(t) for t in box.split(",")]
            p = domain.dim
            if len(vals) != 2 * p:
                raise ConfigError(f"--box needs {2 * p} numbers")
            sub = ParameterDomain(np.array(vals[:p]), np.array(vals[p:]))
        else:
            sub = domain
        out.append(sub.lattice(lattice))
    if random:
        out.append(domain.sample(np.random.default_rng(seed), random))
    if not out:
        raise ConfigError("no queries: give --points, --lattice or --random")
    return np.vstack(out)


def run_online(bundle_path, queries, out_dir, validate=False, N=None, seed=0, force=False, timings=True):
    """Answer ``queries`` against a saved bundle; writes queries.csv and summary.json."""
    bundle = load_bundle(bundle_path)
    model = OnlineModel(bundle)
    _prepare_dir(out_dir, ("queries.csv", "summary.json"), force)
    p = bundle.sample_mus.shape[1]
    rows, errs = [], []
    failures = 0
    unavailable = False
    stage = {"search_ms": 0.0, "ortho_ms": 0.0, "solve_ms": 0.0}
    for mu in queries:
        try:
            sol = model.solve(mu, N=N, validate=False)
        except (ValueError, ArithmeticError) as exc:
            failures += 1
            rows.append([*mu, None, "", None] + ([None] * 3 if timings else []) + [f"error: {exc}"])
            continue
        status = "ok"
        err = None
        if validate:
            try:
                err = model.error(sol)
                errs.append(err)
            except SnapshotsUnavailable:
                unavailable = True
                status = "snapshots unavailable"
        for k in stage:
            stage[k] += sol.timings[k]
        tcols = [sol.timings["search_ms"], sol.timings["ortho_ms"], sol.timings["solve_ms"]] if timings else []
        rows.append([*mu, sol.radius, " ".join(str(int(i)) for i in sol.used), err] + tcols + [status])
    header = [f"mu{i + 1}" for i in range(p)] + ["r", "local", "error"]
    if timings:
        header += ["search_ms", "ortho_ms", "solve_ms"]
    header += ["status"]
    write_csv(os.path.join(out_dir, "queries.csv"), header, rows, seed)
    ok = len(queries) - failures
    e = np.array(errs)
    summary = {
        "bundle": os.fspath(bundle_path),
        "queries": int(len(queries)),
        "failed": int(failures),
        "tol": bundle.tol,
        "validate": bool(validate),
        "max_err": float(e.max()) if e.size else None,
        "mean_err": float(e.mean()) if e.size else None,
        "frac_above_tol": float(np.mean(e > bundle.tol)) if e.size else None,
        "mean_timings_ms": {k: v / ok for k, v in stage.items()} if ok else None,
        "seed": seed,
    }
    if unavailable:
        summary["validation"] = "snapshots unavailable"
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def cmd_online(args) -> int:
    bundle = load_bundle(args.bundle)
    dom = ParameterDomain(np.array(bundle.descriptor["domain_lower"]), np.array(bundle.descriptor["domain_upper"]))
    queries = build_queries(dom, args.points, args.lattice, args.box, args.random, args.seed)
    out = args.out or "online"
    s = run_online(args.bundle, queries, out, validate=args.validate, N=args.N, seed=args.seed,
                   force=args.force, timings=not args.no_timings)
    msg = f"{s['queries'] - s['failed']}/{s['queries']} queries answered"
    if s["max_err"] is not None:
        msg += f"; max_err={s['max_err']:.3e}, above tol: {100 * s['frac_above_tol']:.2f}%"
    print(msg)
    if s.get("validation"):
        print(s["validation"])
    return EXIT_CONFIG if s["failed"] == s["queries"] else EXIT_OK


# -- compare ------------------------------------------------------------------


def _load_run(path, out_dir, label, force):
    if os.path.isdir(path) and os.path.exists(os.path.join(path, "run.json")):
        with open(os.path.join(path, "run.json")) as fh:
            summary = json.load(fh)
        run_dir = path
    else:
        cfg = load_config(path)
        run_dir = os.path.join(out_dir, label)
        summary = run_offline(cfg, run_dir, force=force)
    _, rows = read_csv(os.path.join(run_dir, "convergence.csv"))
    return summary, rows


def run_compare(a, b, out_dir, force=False) -> dict:
    _prepare_dir(out_dir, ("comparison.csv", "verdict.json"), force)
    sa, ra = _load_run(a, out_dir, "A", force)
    sb, rb = _load_run(b, out_dir, "B", force)
    da, db = dict(sa["descriptor"]), dict(sb["descriptor"])
    if sa["problem"] != sb["problem"] or da != db:
        raise ConfigError(f"runs solve different problems ({sa['problem']} vs {sb['problem']})")
    rows = [["A", *r] for r in ra] + [["B", *r] for r in rb]
    write_csv(os.path.join(out_dir, "comparison.csv"),
              ["run", "iteration", "K", "max_err", "eta_evals", "train_size"], rows, sa.get("seed"))
    verdict = {
        "problem": sa["problem"],
        "A": {k: sa[k] for k in ("K", "eta_evals", "final_err", "metric_mode", "train_mode")},
        "B": {k: sb[k] for k in ("K", "eta_evals", "final_err", "metric_mode", "train_mode")},
        "snapshot_ratio": sa["K"] / sb["K"],
        "eval_ratio": sa["eta_evals"] / sb["eta_evals"],
    }
    _write_json(os.path.join(out_dir, "verdict.json"), verdict)
    return verdict


def cmd_compare(args) -> int:
    out = args.out or "compare"
    v = run_compare(args.a, args.b, out, force=args.force)
    print(f"snapshot ratio A/B = {v['snapshot_ratio']:.4f}, evaluation ratio A/B = {v['eval_ratio']:.4f}")
    return EXIT_OK


# -- inspect ------------------------------------------------------------------


def cmd_inspect(args) -> int:
    b = load_bundle(args.bundle)
    info = {
        "version": b.version,
        "descriptor": b.descriptor,
        "N": b.N,
        "tol": b.tol,
        "K": b.K,
        "Q_a": int(b.affine_a.shape[0]),
        "Q_f": int(b.affine_f.shape[0]),
        "field_nodes": len(b.field),
        "snapshots": b.snapshots is not None,
        "meta": b.meta,
        "last_iteration": b.history_records()[-1] if len(b.history) else None,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"greedy.seed={args.seed}")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localrb", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("offline", help="run the offline greedy stage")
    common(p)
    p.add_argument("--seed", type=int, help="64-bit seed (overrides greedy.seed)")
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("online", help="answer queries with a saved bundle")
    common(p, config=False)
    p.add_argument("bundle", help="bundle file")
    p.add_argument("--points", help="explicit queries 'a,b;c,d'")
    p.add_argument("--lattice", type=int, help="n per direction")
    p.add_argument("--box", help="lattice box lo1,...,lop,hi1,...,hip (default: whole domain)")
    p.add_argument("--random", type=int, help="number of uniform random queries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--N", type=int, help="local space size (default: the bundle's N)")
    p.add_argument("--validate", action="store_true", help="compute exact errors")
    p.add_argument("--no-timings", action="store_true", help="omit stage timings from queries.csv")
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("compare", help="compare two runs (directories or config files)")
    common(p, config=False)
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="print bundle metadata")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (OSError, BundleError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
