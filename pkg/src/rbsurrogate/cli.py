"""Command-line entry point: ``rbsurrogate <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Diagnostics go to stderr; results are written only under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, storage
from .bench import read_records, write_records, write_report
from .config import ConfigError, load_config, surrogate_params
from .datagen import (draw_coefficients, generate_dataset, load_dataset, output_basis, save_dataset,
                      solve_batch)
from .ensemble import problem_from_config, run_ensemble, test_set_for
from .pipelines import FittedSurrogate, evaluate, fit_from_params
from .reduced_basis import SmoothnessSpec

log = logging.getLogger("rbsurrogate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config; unset keys take documented defaults")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--full", action="store_true", help="large-scale settings (slow)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rbsurrogate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("basis", parents=[common], help="build the input eigenbasis and an output PCA basis")
    sub.add_parser("gen", parents=[common], help="generate an encoded training dataset")
    p = sub.add_parser("fit", parents=[common], help="fit one surrogate described by [fit]")
    p.add_argument("--kind", choices=["sg", "tt", "nn"], help="override fit.kind")
    p.add_argument("--dataset", type=Path, help="train the network on a dataset written by gen")
    p = sub.add_parser("eval", parents=[common], help="score the surrogate in OUT/surrogate")
    p.add_argument("--surrogate", type=Path, help="surrogate directory (default OUT/surrogate)")
    sub.add_parser("ensemble", parents=[common], help="run the [ensemble] sweep and write reports")
    p = sub.add_parser("report", parents=[common], help="pareto and figure CSVs from a records file")
    p.add_argument("--records", type=Path, help="records.csv (default OUT/records.csv)")
    return parser


def _write_manifest(out: Path, args, cfg, inputs=()):
    entry = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "threads": args.threads,
        "full": args.full,
        "version": __version__,
        "config": cfg,
        "inputs": {str(p): storage.hash_path(p) for p in inputs if Path(p).exists()},
    }
    entry["hash"] = storage.content_hash({k: v for k, v in entry.items() if k != "argv"})
    out.mkdir(parents=True, exist_ok=True)
    (out / f"run_{args.command}.json").write_text(json.dumps(storage._jsonable(entry), indent=2, sort_keys=True))


def _spec(cfg):
    return SmoothnessSpec(float(cfg["fit"]["s"]), int(cfg["problem"]["d_true"]))


def cmd_basis(args, cfg):
    problem = problem_from_config(cfg)
    out = args.out / "basis"
    storage.write_container(out / "matern", {"kind": "matern", "gamma": problem.gamma, "delta": problem.delta,
                                             "grid_n": problem.grid.n,
                                             "layout": "psi.bin row-major (dofs, count), columns are functions"},
                            {"mu": problem.mu, "psi": problem.psi})
    n = int(cfg["nn"]["n"])
    spec = _spec(cfg)
    batch = solve_batch(problem, spec, draw_coefficients(args.seed, n, spec.d_true))
    ob = output_basis(problem, batch.y, int(cfg["encoder"]["out_rank"]), cfg["encoder"]["out_gram"])
    ob.save(out / "out_basis", {"n": n, "seed": args.seed, "s": spec.s})
    return []


def cmd_gen(args, cfg):
    problem = problem_from_config(cfg)
    nn = cfg["nn"]
    ds = generate_dataset(problem, _spec(cfg), int(nn["n"]), args.seed, int(nn["d_in"]),
                          int(cfg["encoder"]["out_rank"]), with_jacobians=(nn["objective"] == "H1"),
                          in_kind=nn["in_kind"], out_gram=cfg["encoder"]["out_gram"])
    save_dataset(ds, args.out / "dataset")
    return []


def cmd_fit(args, cfg):
    problem = problem_from_config(cfg)
    kind = args.kind or cfg["fit"]["kind"]
    kw = surrogate_params(cfg, kind)
    inputs = []
    if args.dataset is not None:
        if kind != "nn":
            raise ConfigError("--dataset only applies to nn surrogates")
        kw["dataset"] = load_dataset(args.dataset, problem)
        inputs.append(args.dataset)
    fs = fit_from_params(kind, problem, _spec(cfg), kw, seed=args.seed)
    fs.save(args.out / "surrogate")
    if fs.info.get("trace"):
        with open(args.out / "surrogate" / "trace.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_loss", "val_loss"])
            wr.writerows([e, repr(a), repr(b)] for e, a, b in fs.info["trace"])
    if kind == "tt" and not fs.info.get("converged", True):
        log.warning("TT cross did not reach its tolerance (sweep checks %s)", fs.info.get("sweep_errors"))
    return inputs


def cmd_eval(args, cfg):
    problem = problem_from_config(cfg)
    path = args.surrogate or args.out / "surrogate"
    if not (path / "surrogate.json").is_file():
        raise ConfigError(f"no fitted surrogate at {path}")
    fs = FittedSurrogate.load(path, problem)
    test = test_set_for(cfg, problem, fs.s, args.out / "test_sets")
    rec = evaluate(fs, problem, test, seed=args.seed)
    write_records([rec], args.out)
    print(f"eps_l2={rec.eps_l2:.4e} eps_h1={rec.eps_h1 if rec.eps_h1 is None else format(rec.eps_h1, '.4e')} "
          f"n={rec.n} N={rec.N}", file=sys.stderr)
    return [path]


def cmd_ensemble(args, cfg):
    def progress(rec):
        print(f"{rec.kind} s={rec.s:g} {rec.status} eps_l2={rec.eps_l2:.3e} n={rec.n} {rec.reason}",
              file=sys.stderr)
    run_ensemble(cfg, args.out, progress=progress)
    return []


def cmd_report(args, cfg):
    path = args.records or args.out / "records.csv"
    if not path.is_file():
        raise ConfigError(f"records file not found: {path}")
    write_report(read_records(path), args.out)
    return [path]


COMMANDS = {"basis": cmd_basis, "gen": cmd_gen, "fit": cmd_fit, "eval": cmd_eval,
            "ensemble": cmd_ensemble, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"rbsurrogate: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("rbsurrogate: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, full=args.full)
        if args.full:
            log.warning("--full selects large-scale grids; expect hours of runtime")
        with threadpool_limits(limits=args.threads):
            inputs = COMMANDS[args.command](args, cfg)
        _write_manifest(args.out, args, cfg, inputs)
    except ConfigError as exc:
        print(f"rbsurrogate: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("traceback", exc_info=True)
        print(f"rbsurrogate: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
