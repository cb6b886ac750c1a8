"""Online reconstruction with a neural parametric surface.

Per sequence: over-fit the network to the template, cache the template's
metric tensors at the vertex parameters, then for every frame minimise

    projection + lambda_metric * metric + lambda_time * time

with ADAM, warm-started from the previous frame's weights.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import (ArchitectureMismatch, DidNotConverge, EmptyMatches,
                     FrameFailure, InvalidMesh, NonFiniteGradient,
                     NonPositiveDepth, ParseError, SftError)
from .geom import (CameraIntrinsics, MatchSet, TriMesh, metric_tensor,
                   project_points, read_json)
from .surfnet import DEFAULT_LAYER_DIMS, SurfNet

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_metric: float = 0.01
    lambda_time: float = 0.001

    def __post_init__(self):
        if not (self.lambda_metric >= 0 and self.lambda_time >= 0):
            raise ValueError("loss weights must be non-negative")


@dataclass
class SolverConfig:
    """Every knob of both reconstruction methods.

    ``template_tol=None`` means 1e-3 times the template's bounding-box
    diagonal; ``c_tol=None`` means 1e-6 times the mean squared template
    edge length.
    """

    lambda_metric: float = 0.01
    lambda_time: float = 0.001
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_frame_iters: int = 500
    early_stop_window: int = 50
    early_stop_tol: float = 1e-6
    max_template_iters: int = 20000
    template_tol: Optional[float] = None
    template_jacobian_weight: float = 0.1
    template_refine: float = 0.05
    metric_samples: int = 0
    carry_adam_state: bool = True
    seed: int = 0
    layer_dims: tuple = DEFAULT_LAYER_DIMS
    # classical baseline
    c_tol: Optional[float] = None
    max_outer: int = 20
    inner_iters: int = 100
    restore_iters: int = 100
    damping: float = 1e-10

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.betas = tuple(float(b) for b in self.betas)
        LossWeights(self.lambda_metric, self.lambda_time)

    @property
    def weights(self):
        return LossWeights(self.lambda_metric, self.lambda_time)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return SolverConfig(**data)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["layer_dims"] = list(self.layer_dims)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParseError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


# -- ADAM -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grad, state: AdamState, lr=1e-3, betas=(0.9, 0.999),
              eps=1e-8):
    """One bias-corrected ADAM update. Returns ``(new_params, new_state)``
    and leaves the inputs untouched."""
    if state.m.shape != params.shape or grad.shape != params.shape:
        raise ValueError("ADAM state does not match parameter shape")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# -- loss terms -----------------------------------------------------------
#
# Each *_term helper returns the loss value and its derivative with respect
# to the network outputs (and/or input Jacobians) of a forward cache, which
# SurfNet.backward turns into a parameter gradient.

def _safe_unit(r):
    n = np.linalg.norm(r, axis=1)
    unit = np.zeros_like(r)
    nz = n > 0
    unit[nz] = r[nz] / n[nz, None]
    return n, unit


def projection_term(net: SurfNet, K: CameraIntrinsics, matches: MatchSet,
                    cache=None):
    if len(matches) == 0:
        raise EmptyMatches("no matches for the projection loss")
    if cache is None:
        cache = net.forward(matches.param_points)
    y = net.values(cache)
    try:
        uv, dpi = project_points(K, y, return_jacobian=True)
    except NonPositiveDepth as exc:
        raise NonPositiveDepth(f"match {exc.index}: surface point behind "
                               "the camera", index=exc.index) from None
    n, unit = _safe_unit(uv - matches.pixels)
    m = len(matches)
    g_value = np.einsum("mi,mij->mj", unit, dpi) / m
    return n.mean(), cache, g_value


def metric_term(jac, G_temp):
    """Mean squared Frobenius distance between J^T J and the cached
    template tensors; returns ``(value, d value / d jac)``."""
    D = metric_tensor(jac) - G_temp
    n = jac.shape[0]
    value = np.sum(D * D) / n
    # D is symmetric, so d||J^T J - G||_F^2 / dJ = 4 J D
    g_jac = 4.0 * jac @ D / n
    return value, g_jac


def time_term(values, prev_values):
    dist, unit = _safe_unit(values - prev_values)
    return dist.mean(), unit / len(dist)


def loss_projection(net, K, matches):
    """Mean pixel distance between projected surface points and matches."""
    return float(projection_term(net, K, matches)[0])


def loss_metric(net, template_fit, points=None):
    P = template_fit.param_points if points is None else points
    b = net.eval_with_jacobian(np.asarray(P).reshape(-1, 2))
    return float(metric_term(b.jacobian.reshape(-1, 3, 2),
                             template_fit.template_metrics)[0])


def loss_time(net, prev_net, points):
    """Mean distance between the two surfaces sampled at ``points``."""
    if not net.same_architecture(prev_net):
        raise ArchitectureMismatch(f"{net.layer_dims} vs "
                                   f"{prev_net.layer_dims}")
    P = np.asarray(points).reshape(-1, 2)
    return float(time_term(net.eval(P), prev_net.eval(P))[0])


@dataclass
class LossBreakdown:
    projection: float
    metric: float
    time: float
    total: float

    def as_dict(self):
        return {"projection": self.projection, "metric": self.metric,
                "time": self.time, "total": self.total}


@dataclass
class FrameProblem:
    K: CameraIntrinsics
    matches: MatchSet
    param_points: np.ndarray       # P_V
    template_metrics: np.ndarray   # (|P_V|, 2, 2)
    prev_values: np.ndarray        # phi_{t-1}(P_V)
    weights: LossWeights
    extra_points: Optional[np.ndarray] = None
    extra_metrics: Optional[np.ndarray] = None


def total_loss(net: SurfNet, prob: FrameProblem, need_grad=True):
    """Loss breakdown and (optionally) its gradient w.r.t. ``net.theta``."""
    w = prob.weights
    proj, pcache, g_proj = projection_term(net, prob.K, prob.matches)
    use_jac = w.lambda_metric > 0
    vcache = net.forward(prob.param_points, jacobian=use_jac)
    values = net.values(vcache)
    tval, g_time = time_term(values, prob.prev_values)
    if use_jac:
        mval, g_jac = metric_term(net.jacobians(vcache), prob.template_metrics)
    else:
        jac = net.eval_with_jacobian(prob.param_points).jacobian
        mval, g_jac = metric_term(jac, prob.template_metrics)
    extra = None
    if use_jac and prob.extra_points is not None and len(prob.extra_points):
        ecache = net.forward(prob.extra_points, jacobian=True)
        ev, eg = metric_term(net.jacobians(ecache), prob.extra_metrics)
        # extra samples are folded into the same mean as P_V
        n0, n1 = len(prob.param_points), len(prob.extra_points)
        mval = (n0 * mval + n1 * ev) / (n0 + n1)
        g_jac = g_jac * n0 / (n0 + n1)
        extra = (ecache, eg * n1 / (n0 + n1))
    total = proj + w.lambda_metric * mval + w.lambda_time * tval
    losses = LossBreakdown(float(proj), float(mval), float(tval), float(total))
    if not need_grad:
        return losses, None
    grad = net.backward(pcache, g_proj)
    g_vals = w.lambda_time * g_time
    if use_jac:
        grad += net.backward(vcache, g_vals, w.lambda_metric * g_jac)
    else:
        grad += net.backward(vcache, g_vals)
    if extra is not None:
        grad += net.backward(extra[0], np.zeros((len(prob.extra_points), 3)),
                             w.lambda_metric * extra[1])
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite total-loss gradient")
    return losses, grad


# -- template -------------------------------------------------------------

@dataclass
class TemplateFit:
    net: SurfNet
    param_points: np.ndarray       # P_V, aligned with the mesh vertices
    template_metrics: np.ndarray   # (|P_V|, 2, 2)
    fit_error: float
    iterations: int = 0

    @property
    def theta_temp(self):
        return self.net.theta

    def metric_at(self, i):
        return self.template_metrics[i]


def vertex_jacobians(mesh: TriMesh):
    """Per-vertex 3x2 derivative of the piecewise-linear template with
    respect to the param coords: the param-area weighted mean of the
    linear maps of the incident facets."""
    P, X, F = mesh.param_coords, mesh.vertices, mesh.faces
    dP = np.stack([P[F[:, 1]] - P[F[:, 0]], P[F[:, 2]] - P[F[:, 0]]], axis=2)
    dX = np.stack([X[F[:, 1]] - X[F[:, 0]], X[F[:, 2]] - X[F[:, 0]]], axis=2)
    det = dP[:, 0, 0] * dP[:, 1, 1] - dP[:, 0, 1] * dP[:, 1, 0]
    ok = np.abs(det) > 1e-15
    Jf = np.zeros((len(F), 3, 2))
    Jf[ok] = dX[ok] @ np.linalg.inv(dP[ok])
    w = np.where(ok, 0.5 * np.abs(det), 0.0)
    acc = np.zeros((mesh.n_vertices, 3, 2))
    wsum = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, F[:, k], w[:, None, None] * Jf)
        np.add.at(wsum, F[:, k], w)
    return acc / np.maximum(wsum, 1e-300)[:, None, None]


def fit_template(mesh: TriMesh, config: SolverConfig = None) -> TemplateFit:
    """Over-fit a fresh network to the template mesh.

    Minimises, with L-BFGS, the mean squared vertex distance plus
    ``template_jacobian_weight`` times the mean squared distance between
    the network's input Jacobian and the template's own per-vertex
    derivative. The tangent term keeps the cached metric tensors faithful
    where a position-only fit would wiggle between vertices.

    Runs until the mean vertex distance drops below
    ``template_refine * template_tol`` or ``max_template_iters`` is spent;
    succeeds when it is below ``template_tol``.
    """
    from scipy.optimize import minimize

    config = config or SolverConfig()
    if mesh.n_vertices == 0 or len(mesh.faces) == 0:
        raise InvalidMesh("cannot fit an empty template")
    P, X = mesh.param_coords, mesh.vertices
    tol = config.template_tol
    if tol is None:
        tol = 1e-3 * mesh.diagonal()
    mu = config.template_jacobian_weight
    J_target = vertex_jacobians(mesh) if mu > 0 else None
    n = len(P)
    net = SurfNet(config.layer_dims, seed=config.seed)
    theta0 = net.theta.copy()
    # start the readout at the template centroid
    theta0[-3:] = X.mean(axis=0)

    def objective(theta):
        cur = net.with_theta(theta)
        cache = cur.forward(P, jacobian=mu > 0)
        R = cur.values(cache) - X
        f = np.sum(R * R) / n
        if mu > 0:
            D = cur.jacobians(cache) - J_target
            f += mu * np.sum(D * D) / n
            g = cur.backward(cache, 2 * R / n, 2 * mu * D / n)
        else:
            g = cur.backward(cache, 2 * R / n)
        return f, g

    goal = config.template_refine * tol
    count = [0]

    def stop_when_close(intermediate_result):
        count[0] += 1
        err = np.linalg.norm(net.with_theta(intermediate_result.x).eval(P)
                             - X, axis=1).mean()
        if err < goal:
            raise StopIteration

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   callback=stop_when_close,
                   options={"maxiter": config.max_template_iters,
                            "maxfun": 2 * config.max_template_iters,
                            "ftol": 0.0, "gtol": 0.0})
    net = net.with_theta(res.x)
    fit_error = float(np.linalg.norm(net.eval(P) - X, axis=1).mean())
    log.info("template fit: %d iterations, mean vertex error %.3g (tol %.3g)",
             count[0], fit_error, tol)
    if not fit_error < tol:
        raise DidNotConverge(f"template fit error {fit_error:.4g} above "
                             f"tolerance {tol:.4g} after {count[0]} "
                             "iterations")
    metrics = metric_tensor(net.eval_with_jacobian(P).jacobian)
    return TemplateFit(net, P.copy(), metrics, fit_error, count[0])


# -- per-frame optimisation -----------------------------------------------

@dataclass
class FrameSolution:
    frame: int
    theta: np.ndarray
    vertex_estimates: np.ndarray
    losses: LossBreakdown
    iterations: int
    wall_time: float
    method: str = "neural"
    failed: bool = False
    error: Optional[str] = None
    history: list = field(default_factory=list, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def record(self, with_timing=False):
        losses = (self.losses.as_dict() if hasattr(self.losses, "as_dict")
                  else dict(self.losses))
        rec = {"frame": self.frame, "method": self.method,
               "vertex_estimates": self.vertex_estimates.tolist(),
               "losses": losses,
               "iterations": self.iterations,
               "failed": self.failed, "error": self.error}
        if with_timing:
            rec["wall_time"] = self.wall_time
        return rec


def solve_frame(net: SurfNet, prob: FrameProblem, config: SolverConfig,
                state: AdamState = None):
    """ADAM on the total loss from ``net``'s weights.

    ``state`` continues the moment estimates of an earlier run; by default
    they start at zero. Returns ``(best_net, losses_at_best, iterations,
    history, state)`` where ``history`` lists the total loss of every
    iterate and ``state`` is the optimizer state after the last update.
    """
    theta = net.theta.copy()
    if state is None:
        state = AdamState.zeros_like(theta)
    best_loss, best_theta, best_losses = np.inf, theta, None
    history, best_hist = [], []
    it = 0
    for it in range(config.max_frame_iters):
        cur = net.with_theta(theta)
        losses, grad = total_loss(cur, prob)
        history.append(losses.total)
        if losses.total < best_loss:
            best_loss, best_theta, best_losses = losses.total, theta, losses
        best_hist.append(best_loss)
        w = config.early_stop_window
        if w and len(best_hist) > w and \
                best_hist[-w - 1] - best_loss < config.early_stop_tol:
            break
        theta, state = adam_step(theta, grad, state, config.lr,
                                 config.betas, config.eps)
    else:
        # score the last update too
        cur = net.with_theta(theta)
        losses, _ = total_loss(cur, prob, need_grad=False)
        history.append(losses.total)
        if losses.total < best_loss:
            best_loss, best_theta, best_losses = losses.total, theta, losses
        it = config.max_frame_iters
    return net.with_theta(best_theta), best_losses, it, history, state


def _extra_metric_samples(template_fit, config, rng):
    n = config.metric_samples
    if not n:
        return None, None
    pts = rng.uniform(0.0, 1.0, size=(n, 2))
    G = metric_tensor(template_fit.net.eval_with_jacobian(pts).jacobian)
    return pts, G


def reconstruct_sequence(template_fit: TemplateFit, K: CameraIntrinsics,
                         frames, weights: LossWeights = None,
                         config: SolverConfig = None, callback=None):
    """Run the online reconstruction over ``frames`` (a list of MatchSet).

    A frame whose optimisation raises is marked failed and the previous
    weights are carried forward. ``callback(solution)`` is invoked after
    each frame.
    """
    config = config or SolverConfig()
    weights = weights or config.weights
    if len(frames) == 0:
        raise EmptyMatches("no frames to reconstruct")
    rng = np.random.default_rng(config.seed)
    extra_pts, extra_G = _extra_metric_samples(template_fit, config, rng)
    P = template_fit.param_points
    net = template_fit.net
    state = None
    out = []
    for t, matches in enumerate(frames):
        start = time.perf_counter()
        prev_values = net.eval(P)
        prob = FrameProblem(K, matches, P, template_fit.template_metrics,
                            prev_values, weights, extra_pts, extra_G)
        try:
            new_net, losses, iters, hist, end_state = solve_frame(
                net, prob, config, state if config.carry_adam_state else None)
            failed, err = False, None
            state = end_state
        except SftError as exc:
            wrapped = FrameFailure(t, exc)
            log.warning("%s; carrying previous weights forward", wrapped)
            new_net, iters, hist = net, 0, []
            failed, err = True, str(wrapped)
            try:
                losses = total_loss(net, prob, need_grad=False)[0]
            except SftError:
                nan = float("nan")
                losses = LossBreakdown(nan, nan, nan, nan)
        net = new_net
        sol = FrameSolution(t, net.theta.copy(), net.eval(P), losses, iters,
                            time.perf_counter() - start, "neural", failed,
                            err, hist)
        log.info("frame %d: total %.4g (proj %.4g, metric %.4g, time %.4g)"
                 " in %d iterations", t, losses.total, losses.projection,
                 losses.metric, losses.time, iters)
        out.append(sol)
        if callback is not None:
            callback(sol)
    return out


def reprojection_error(vertices, template: TriMesh, K, matches: MatchSet):
    """Mean pixel distance of matches re-projected through a vertex array
    (barycentric form)."""
    x = np.asarray(vertices)
    tri = x[template.faces[matches.facets]]
    pts = np.einsum("mi,mij->mj", matches.bary, tri)
    return float(np.linalg.norm(project_points(K, pts) - matches.pixels,
                                axis=1).mean())
