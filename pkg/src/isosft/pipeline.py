"""End-to-end plumbing shared by the command line and the demos.

Template-fit checkpoints, running either reconstruction method on a
bundle, results files and the loss-weight sweep.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .classical import reconstruct_sequence_classical
from .errors import EmptyGrid, ParseError, ShapeMismatch
from .evaluate import evaluate
from .solver import (LAMBDA_GRID, LossWeights, SolverConfig, TemplateFit,
                     fit_template, reconstruct_sequence)
from .surfnet import load_checkpoint, save_checkpoint
from .synth import SyntheticSequence, read_jsonl

METHODS = ("neural", "classical")


# -- template fit on disk ---------------------------------------------------

def save_template_fit(path, fit: TemplateFit):
    save_checkpoint(path, fit.net, fit.template_metrics,
                    {"param_points": fit.param_points.tolist(),
                     "fit_error": fit.fit_error,
                     "iterations": fit.iterations})
    return Path(path)


def load_template_fit(path) -> TemplateFit:
    net, metrics, data = load_checkpoint(path)
    try:
        P = np.asarray(data["param_points"], dtype=float)
    except KeyError as exc:
        raise ParseError(f"{path}: not a template-fit checkpoint") from exc
    if metrics is None or len(metrics) != len(P):
        raise ParseError(f"{path}: template metrics missing or misaligned")
    return TemplateFit(net, P, metrics, float(data.get("fit_error", 0.0)),
                       int(data.get("iterations", 0)))


# -- running ----------------------------------------------------------------

def reconstruct(seq: SyntheticSequence, method="neural", config=None,
                fit=None, weights=None):
    """FrameSolutions for every frame of ``seq``. ``fit`` is computed when
    the neural method needs it and none is given."""
    config = config or SolverConfig()
    if method == "neural":
        fit = fit or fit_template(seq.template, config)
        return reconstruct_sequence(fit, seq.camera, seq.matches, weights,
                                    config)
    if method == "classical":
        return reconstruct_sequence_classical(seq.template, seq.camera,
                                              seq.matches, config)
    raise ParseError(f"unknown method {method!r}; expected one of {METHODS}")


def write_results(path, solutions):
    """One JSON record per frame. Wall times go to a ``.timing.json``
    sidecar so the results file itself is reproducible byte for byte."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in solutions:
            fh.write(json.dumps(s.record()) + "\n")
    timing = {"wall_time": [s.wall_time for s in solutions]}
    with open(timing_path(path), "w") as fh:
        json.dump(timing, fh)
    return path


def timing_path(results_path):
    p = Path(results_path)
    return p.with_name(p.name + ".timing.json")


def read_results(path):
    """``(estimates (T, n, 3), records)`` from a results file."""
    recs = read_jsonl(path)
    try:
        recs.sort(key=lambda r: r["frame"])
        est = np.array([r["vertex_estimates"] for r in recs], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad results record: {exc}") from exc
    return est, recs


def read_timing(results_path):
    p = timing_path(results_path)
    if not p.exists():
        return None
    with open(p) as fh:
        return json.load(fh).get("wall_time")


def evaluate_solutions(seq: SyntheticSequence, solutions):
    est = np.array([s.vertex_estimates for s in solutions])
    return evaluate(est, seq.frames, seq.template,
                    [s.wall_time for s in solutions])


# -- sweep ------------------------------------------------------------------

def lambda_grid(values=LAMBDA_GRID):
    """All (lambda_metric, lambda_time) pairs over ``values``."""
    return [(float(a), float(b)) for a in values for b in values]


def sweep_lambdas(seq: SyntheticSequence, grid, config=None, fit=None):
    """Reconstruct and score once per grid cell.

    Returns rows ``{"lambda_metric", "lambda_time", "error",
    "relative_error", "failed_frames"}`` sorted by error. The template fit
    is shared by all cells.
    """
    grid = [tuple(float(v) for v in cell) for cell in grid]
    if not grid:
        raise EmptyGrid("empty loss-weight grid")
    if len(seq.frames) != len(seq.matches):
        raise ShapeMismatch("sweep needs ground truth for every frame")
    config = config or SolverConfig()
    fit = fit or fit_template(seq.template, config)
    rows = []
    for lm, lt in grid:
        sols = reconstruct(seq, "neural", config, fit, LossWeights(lm, lt))
        rep = evaluate_solutions(seq, sols)
        rows.append({"lambda_metric": lm, "lambda_time": lt,
                     "error": rep.sequence_mean,
                     "relative_error": rep.sequence_mean / rep.diagonal,
                     "failed_frames": sum(s.failed for s in sols)})
    rows.sort(key=lambda r: (r["error"], r["lambda_metric"],
                             r["lambda_time"]))
    return rows
