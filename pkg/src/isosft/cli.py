"""Command-line front end.

Subcommands: synth, fit-template, reconstruct, eval, sweep. Errors are
reported as one JSON object on standard error and mapped to exit codes:
0 ok, 2 parse, 3 shape, 4 solver failure, 5 divergence, 6 missing file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ParseError, SftError
from .evaluate import evaluate
from .geom import write_json
from .pipeline import (METHODS, lambda_grid, load_template_fit, read_results,
                       read_timing, reconstruct, save_template_fit,
                       sweep_lambdas, write_results)
from .solver import LAMBDA_GRID, SolverConfig, fit_template
from .synth import KINDS, load_bundle, make_sequence, save_bundle

FIT_NAME = "template_fit.json"


def _config(path):
    return SolverConfig.load(path) if path else SolverConfig()


def _fit_for(bundle, seq, config, fit_path):
    if fit_path:
        return load_template_fit(fit_path)
    cached = Path(bundle) / FIT_NAME
    if cached.exists():
        return load_template_fit(cached)
    return fit_template(seq.template, config)


def cmd_synth(args):
    seq = make_sequence(frames=args.frames, model=args.model,
                        noise_px=args.noise_px, dropout=args.dropout,
                        per_facet=args.per_facet, match_mode=args.match_mode,
                        seed=args.seed)
    out = save_bundle(seq, args.out)
    print(f"wrote {seq.n_frames} frames to {out}")
    return 0


def cmd_fit_template(args):
    seq = load_bundle(args.bundle)
    fit = fit_template(seq.template, _config(args.config))
    out = save_template_fit(args.out or Path(args.bundle) / FIT_NAME, fit)
    print(f"fit error {fit.fit_error:.4g} after {fit.iterations} "
          f"iterations; wrote {out}")
    return 0


def cmd_reconstruct(args):
    seq = load_bundle(args.bundle)
    config = _config(args.config)
    fit = None
    if args.method == "neural":
        fit = _fit_for(args.bundle, seq, config, args.fit)
    sols = reconstruct(seq, args.method, config, fit)
    write_results(args.out, sols)
    failed = [s for s in sols if s.failed]
    print(f"{args.method}: {len(sols)} frames, {len(failed)} failed; "
          f"wrote {args.out}")
    if failed:
        _report({"error": "FrameFailure", "exit_code": 4,
                 "message": f"{len(failed)} frame(s) failed",
                 "frames": [s.frame for s in failed]})
        return 4
    return 0


def cmd_eval(args):
    seq = load_bundle(args.bundle)
    est, recs = read_results(args.results)
    rep = evaluate(est, seq.frames, seq.template, read_timing(args.results))
    out = rep.to_dict()
    out["methods"] = sorted({r.get("method", "neural") for r in recs})
    write_json(args.out, out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "error", "relative_error",
                        "edge_deviation", "projection_loss", "iterations"])
            for t, r in enumerate(recs):
                w.writerow([t, rep.per_frame_error[t],
                            rep.relative_error[t], rep.edge_deviation[t],
                            r.get("losses", {}).get("projection"),
                            r.get("iterations")])
    print(f"mean error {rep.sequence_mean:.4g} "
          f"({100 * rep.sequence_mean / rep.diagonal:.3f}% of diagonal); "
          f"wrote {args.out}")
    return 0


def _parse_grid(args):
    if args.grid is not None:
        cells = []
        for item in args.grid:
            try:
                lm, lt = (float(v) for v in item.split(","))
            except ValueError as exc:
                raise ParseError(f"bad grid cell {item!r}; expected "
                                 "LAMBDA_METRIC,LAMBDA_TIME") from exc
            cells.append((lm, lt))
        return cells
    values = args.values if args.values is not None else LAMBDA_GRID
    return lambda_grid(values)


def cmd_sweep(args):
    seq = load_bundle(args.bundle)
    config = _config(args.config)
    grid = _parse_grid(args)
    fit = _fit_for(args.bundle, seq, config, args.fit) if grid else None
    rows = sweep_lambdas(seq, grid, config, fit)
    fields = ["lambda_metric", "lambda_time", "error", "relative_error",
              "failed_frames"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="isosft", description=__doc__.split(
        "\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic sequence bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--model", choices=KINDS, default="cylinder_roll")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--noise-px", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--per-facet", type=int, default=1)
    s.add_argument("--match-mode", choices=("facets", "vertices"),
                   default="facets")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-template", help="over-fit the network to the "
                       "bundle's template")
    s.add_argument("--bundle", required=True)
    s.add_argument("--config")
    s.add_argument("--out", help=f"default: BUNDLE/{FIT_NAME}")
    s.set_defaults(func=cmd_fit_template)

    s = sub.add_parser("reconstruct", help="reconstruct every frame")
    s.add_argument("--bundle", required=True)
    s.add_argument("--method", choices=METHODS, default="neural")
    s.add_argument("--config")
    s.add_argument("--fit", help="template-fit checkpoint; default: "
                   f"BUNDLE/{FIT_NAME} if present, else fit now")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="score results against ground truth")
    s.add_argument("--bundle", required=True)
    s.add_argument("--results", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", help="per-frame plot data")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid search over the loss weights")
    s.add_argument("--bundle", required=True)
    s.add_argument("--config")
    s.add_argument("--fit")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--grid", nargs="*", metavar="LM,LT",
                   help="explicit (lambda_metric, lambda_time) cells")
    g.add_argument("--values", nargs="*", type=float,
                   help="all pairs over these values; default "
                   + " ".join(str(v) for v in LAMBDA_GRID))
    s.add_argument("--out", help="CSV table; default stdout")
    s.set_defaults(func=cmd_sweep)
    return p


def _report(record):
    sys.stderr.write(json.dumps(record) + "\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose
                        else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SftError as exc:
        _report({"error": type(exc).__name__, "message": str(exc),
                 "exit_code": exc.exit_code})
        return exc.exit_code
    except OSError as exc:
        _report({"error": type(exc).__name__, "message": str(exc),
                 "exit_code": 6})
        return 6


if __name__ == "__main__":
    sys.exit(main())
