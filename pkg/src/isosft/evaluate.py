"""Scoring reconstructions against ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .geom import TriMesh


@dataclass
class EvalReport:
    per_frame_error: np.ndarray      # mean vertex distance per frame
    sequence_mean: float
    sequence_std: float
    diagonal: float
    edge_deviation: np.ndarray       # max relative edge-length error
    timing: dict = field(default_factory=dict)

    @property
    def relative_error(self):
        return self.per_frame_error / self.diagonal

    def to_dict(self):
        return {"per_frame_error": self.per_frame_error.tolist(),
                "relative_error": self.relative_error.tolist(),
                "edge_deviation": self.edge_deviation.tolist(),
                "sequence_mean": self.sequence_mean,
                "sequence_std": self.sequence_std,
                "diagonal": self.diagonal, "timing": self.timing}


def frame_error(estimate, truth):
    """Mean Euclidean distance between corresponding vertices."""
    estimate, truth = np.asarray(estimate, float), np.asarray(truth, float)
    if estimate.shape != truth.shape:
        raise ShapeMismatch(f"estimate {estimate.shape} vs truth "
                            f"{truth.shape}")
    return float(np.linalg.norm(estimate - truth, axis=-1).mean())


def edge_deviation(template: TriMesh, vertices):
    L0 = template.edge_lengths()
    return float(np.abs(template.edge_lengths(vertices) / L0 - 1).max())


def evaluate(estimates, truth, template: TriMesh, wall_times=None):
    estimates = np.asarray(estimates, float)
    truth = np.asarray(truth, float)
    if estimates.shape != truth.shape:
        raise ShapeMismatch(f"{estimates.shape[0] if estimates.ndim else 0} "
                            f"estimated frames of shape {estimates.shape} "
                            f"vs truth {truth.shape}")
    if truth.ndim != 3 or truth.shape[1] != template.n_vertices:
        raise ShapeMismatch(f"truth shape {truth.shape} does not fit a "
                            f"{template.n_vertices}-vertex template")
    err = np.array([frame_error(e, g) for e, g in zip(estimates, truth)])
    edges = np.array([edge_deviation(template, e) for e in estimates])
    timing = {}
    if wall_times is not None and len(wall_times):
        w = np.asarray(wall_times, float)
        timing = {"total": float(w.sum()), "mean": float(w.mean()),
                  "max": float(w.max())}
    return EvalReport(err, float(err.mean()), float(err.std()),
                      template.diagonal(), edges, timing)
