"""Mesh-based baseline: re-projection least squares under an edge-length
isometry constraint, solved by repeated linearisation.

For each linearisation point ``x`` the step ``dx`` and multipliers ``lam``
solve::

    [ M^T M   dC^T ] [ dx  ]   [ -M^T M x ]
    [ dC      0    ] [ lam ] = [ -C(x)    ]

in the least-squares sense. The linearised constraint leaves every edge
longer by the square of its step, so after each step the iterate is pulled
back onto ``C = 0`` with minimum-norm Newton projections
``x <- x - dC^T (dC dC^T)^-1 C(x)``. Without that restoration the iteration
tends to cycle near flat configurations, where the constraint gradient
cannot see out-of-plane motion.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Diverged, LengthMismatch, SingularSystem, SftError
from .geom import (CameraIntrinsics, MatchSet, TriMesh, _check_bary,
                   _check_facets)

log = logging.getLogger(__name__)


@dataclass
class ProjectionSystem:
    M: sp.csr_matrix
    match_index: np.ndarray    # row r belongs to match match_index[r]
    n_vertices: int

    @property
    def n_matches(self):
        return self.M.shape[0] // 2


@dataclass
class ConstraintState:
    residual: np.ndarray
    jacobian: sp.csr_matrix
    lagrange: np.ndarray = None
    degenerate: np.ndarray = None


def build_projection_matrix(K: CameraIntrinsics, mesh: TriMesh,
                            matches: MatchSet) -> ProjectionSystem:
    """Rows ``(k1 - u k3) . s = 0`` and ``(k2 - v k3) . s = 0`` per match,
    spread over the three facet vertices by the barycentric weights."""
    n = mesh.n_vertices
    m = len(matches)
    if m == 0:
        return ProjectionSystem(sp.csr_matrix((0, 3 * n)),
                                np.zeros(0, dtype=np.int64), n)
    _check_facets(mesh, matches.facets)
    bary = _check_bary(matches.bary)
    Km = K.K
    u, v = matches.pixels[:, 0], matches.pixels[:, 1]
    # (m, 2, 3): coefficient rows acting on the embedded point s
    coef = np.empty((m, 2, 3))
    coef[:, 0] = Km[0] - u[:, None] * Km[2]
    coef[:, 1] = Km[1] - v[:, None] * Km[2]
    verts = mesh.faces[matches.facets]                      # (m, 3)
    # data[m, r, i, c] = b_i * coef[m, r, c] at column 3*verts[m, i] + c
    data = bary[:, None, :, None] * coef[:, :, None, :]
    rows = (2 * np.arange(m)[:, None] + np.arange(2))[:, :, None, None]
    cols = (3 * verts[:, None, :, None] + np.arange(3))
    rows, cols = np.broadcast_arrays(rows, cols)
    M = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(2 * m, 3 * n)).tocsr()
    return ProjectionSystem(M, np.repeat(np.arange(m), 2), n)


def _as_points(x, template):
    x = np.asarray(x, dtype=float)
    n = template.n_vertices
    if x.size != 3 * n:
        raise LengthMismatch(f"vertex vector has {x.size} entries, "
                             f"expected {3 * n}")
    return x.reshape(n, 3)


def constraint_C(x, template: TriMesh):
    """Per-edge ``|x_i - x_j|^2 - l_e^2`` against template lengths."""
    pts = _as_points(x, template)
    e = template.edges
    d = pts[e[:, 0]] - pts[e[:, 1]]
    ref = template.vertices[e[:, 0]] - template.vertices[e[:, 1]]
    return np.einsum("ij,ij->i", d, d) - np.einsum("ij,ij->i", ref, ref)


def constraint_jacobian(x, template: TriMesh):
    """Sparse ``dC/dx`` with six stored entries per edge row."""
    pts = _as_points(x, template)
    e = template.edges
    n_e = len(e)
    d = 2.0 * (pts[e[:, 0]] - pts[e[:, 1]])
    data = np.concatenate([d, -d], axis=1).ravel()
    cols = np.concatenate([3 * e[:, :1] + np.arange(3),
                           3 * e[:, 1:] + np.arange(3)], axis=1).ravel()
    indptr = np.arange(0, 6 * n_e + 1, 6)
    return sp.csr_matrix((data, cols, indptr),
                         shape=(n_e, 3 * template.n_vertices))


def degenerate_edges(x, template, tol=0.0):
    pts = _as_points(x, template)
    e = template.edges
    return np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1) <= tol


def constraint_state(x, template, lagrange=None):
    return ConstraintState(constraint_C(x, template),
                           constraint_jacobian(x, template), lagrange,
                           degenerate_edges(x, template))


# -- inner linear solve -----------------------------------------------------

@dataclass
class LinearSolveInfo:
    normal_residual: float
    refinements: int
    damped: bool
    singular: bool


def _normal_residual(A, r, y, mu):
    g = A.T @ r
    res = A.T @ (r - A @ y) - mu * y
    scale = max(np.linalg.norm(g), np.finfo(float).tiny)
    return np.linalg.norm(res) / scale


def solve_least_squares(A, r, damping=1e-10, max_iter=100, rtol=1e-8):
    """Least-squares solution of ``A y = r`` for a sparse square ``A``.

    A plain sparse LU solve is tried first. If ``A`` is singular, or the
    result does not meet ``rtol``, the Tikhonov-damped problem
    ``min |A y - r|^2 + damping |y|^2`` is solved through its augmented
    system ``[[I, A], [A^T, -damping I]]`` with at most ``max_iter`` rounds
    of iterative refinement.
    """
    A = sp.csc_matrix(A)
    n = A.shape[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        try:
            lu = spla.splu(A)
            y = lu.solve(r)
            if np.all(np.isfinite(y)):
                res = _normal_residual(A, r, y, 0.0)
                if res < rtol:
                    return y, LinearSolveInfo(res, 0, False, False)
        except RuntimeError:
            pass
    m = A.shape[0]
    aug = sp.bmat([[sp.identity(m), A], [A.T, -damping * sp.identity(n)]],
                  format="csc")
    try:
        lu = spla.splu(aug)
    except RuntimeError as exc:
        raise SingularSystem(f"damped system still singular: {exc}") from exc
    rhs = np.concatenate([r, np.zeros(n)])
    z = lu.solve(rhs)
    it = 0
    res = _normal_residual(A, r, z[m:], damping)
    while res >= rtol and it < max_iter:
        z = z + lu.solve(rhs - aug @ z)
        it += 1
        res = _normal_residual(A, r, z[m:], damping)
    if not np.all(np.isfinite(z)):
        raise SingularSystem("non-finite solution of the damped system")
    return z[m:], LinearSolveInfo(res, it, True, True)


def restore_feasibility(x, template, tol, max_iter=100, damping=1e-12):
    """Minimum-norm Newton projection onto ``C(x) = 0``.

    Stops when ``|C|_inf < tol``, after ``max_iter`` steps, or as soon as a
    step fails to reduce ``|C|_inf``. Returns ``(x, steps)``.
    """
    c_inf = np.abs(constraint_C(x, template)).max(initial=0.0)
    steps = 0
    while c_inf >= tol and steps < max_iter:
        C = constraint_C(x, template)
        G = constraint_jacobian(x, template)
        GG = (G @ G.T).tocsc()
        reg = damping * (abs(GG).max() if GG.nnz else 1.0)
        GG = GG + reg * sp.identity(GG.shape[0], format="csc")
        try:
            mu = spla.splu(GG).solve(C)
        except RuntimeError as exc:
            raise SingularSystem(f"projection system singular: {exc}") \
                from exc
        trial = x - G.T @ mu
        c_new = np.abs(constraint_C(trial, template)).max(initial=0.0)
        if not c_new < c_inf:
            break
        x, c_inf = trial, c_new
        steps += 1
    return x, steps


# -- outer loop ---------------------------------------------------------------

@dataclass
class ClassicalResult:
    x: np.ndarray
    outer: int
    proj_residual: float          # |M x|
    c_inf: float                  # |C(x)|_inf
    converged: bool
    lagrange: np.ndarray = None
    normal_residuals: list = field(default_factory=list)
    singular_steps: int = 0
    c_history: list = field(default_factory=list)

    def diagnostics(self):
        return {"proj_residual": self.proj_residual, "c_inf": self.c_inf,
                "outer": self.outer, "converged": self.converged,
                "singular_steps": self.singular_steps,
                "max_normal_residual": (max(self.normal_residuals)
                                        if self.normal_residuals else 0.0)}


def default_c_tol(template):
    L = template.edge_lengths()
    return 1e-6 * float(np.mean(L ** 2)) if len(L) else 1e-12


def kkt_system(x, system: ProjectionSystem, template):
    """Scaled KKT matrix and right-hand side at linearisation point ``x``.

    Returns ``(A, rhs, s_m, s_c)``: the objective block is divided by
    ``s_m`` and the constraint rows by ``s_c`` so both blocks are O(1).
    """
    H = (system.M.T @ system.M).tocsr()
    G = constraint_jacobian(x, template)
    C = constraint_C(x, template)
    s_m = float(H.diagonal().max()) if H.nnz else 1.0
    s_m = s_m if s_m > 0 else 1.0
    s_c = float(abs(G).max()) if G.nnz else 1.0
    s_c = s_c if s_c > 0 else 1.0
    Hs, Gs = H / s_m, G / s_c
    A = sp.bmat([[Hs, Gs.T], [Gs, None]], format="csc")
    rhs = np.concatenate([-(Hs @ x), -C / s_c])
    return A, rhs, s_m, s_c


def solve_frame_classical(prev_x, system: ProjectionSystem,
                          template: TriMesh, config=None) -> ClassicalResult:
    """Iterate linearised KKT solves from ``prev_x`` until the edge
    constraint is met (``|C|_inf < c_tol``) or ``max_outer`` is reached.

    At least one step is always taken. Each step is followed by up to
    ``config.restore_iters`` feasibility projections (0 gives the bare
    linearised iteration, which tends to cycle near flat shapes).
    Divergence is declared when ``|C|_inf`` exceeds ten times its value
    after the first step.
    """
    from .solver import SolverConfig
    config = config or SolverConfig()
    c_tol = config.c_tol if config.c_tol is not None else \
        default_c_tol(template)
    x = _as_points(prev_x, template).ravel().copy()
    nx = x.size
    c_hist = [float(np.abs(constraint_C(x, template)).max(initial=0.0))]
    normal_res, singular, lam = [], 0, None
    ref = None
    outer = 0
    converged = False
    for outer in range(1, config.max_outer + 1):
        A, rhs, s_m, s_c = kkt_system(x, system, template)
        y, info = solve_least_squares(A, rhs, config.damping,
                                      config.inner_iters)
        normal_res.append(info.normal_residual)
        if info.singular:
            singular += 1
        dx = y[:nx]
        lam = y[nx:] * s_m / s_c
        x = x + dx
        if config.restore_iters:
            x, _ = restore_feasibility(x, template, 1e-3 * c_tol,
                                       config.restore_iters)
        c_inf = float(np.abs(constraint_C(x, template)).max(initial=0.0))
        c_hist.append(c_inf)
        if not np.all(np.isfinite(x)):
            raise Diverged("non-finite vertex estimate")
        if ref is None:
            ref = max(c_inf, c_tol)
        elif c_inf > 10.0 * ref:
            raise Diverged(f"|C|_inf grew from {ref:.3g} to {c_inf:.3g}")
        if c_inf < c_tol:
            converged = True
            break
    proj = float(np.linalg.norm(system.M @ x))
    return ClassicalResult(x, outer, proj, c_hist[-1], converged, lam,
                           normal_res, singular, c_hist)


def reconstruct_sequence_classical(template: TriMesh, K: CameraIntrinsics,
                                   frames, config=None, callback=None):
    """Frame-by-frame classical reconstruction; returns FrameSolutions."""
    from .solver import FrameSolution, SolverConfig, reprojection_error
    config = config or SolverConfig()
    x = template.vertices.ravel().copy()
    out = []
    for t, matches in enumerate(frames):
        start = time.perf_counter()
        failed, err, diag = False, None, {}
        try:
            system = build_projection_matrix(K, template, matches)
            res = solve_frame_classical(x, system, template, config)
            x = res.x
            diag = res.diagnostics()
            iters = res.outer
        except SftError as exc:
            log.warning("classical frame %d failed: %s", t, exc)
            failed, err, iters = True, f"frame {t}: {exc}", 0
        verts = x.reshape(-1, 3).copy()
        reproj = (reprojection_error(verts, template, K, matches)
                  if len(matches) else 0.0)
        losses = {"projection": reproj,
                  "c_inf": diag.get("c_inf", float("nan")),
                  "proj_residual": diag.get("proj_residual", float("nan"))}
        sol = FrameSolution(t, None, verts, losses, iters,
                            time.perf_counter() - start, "classical", failed,
                            err, diagnostics=diag)
        out.append(sol)
        if callback is not None:
            callback(sol)
    return out


def singular_values(system: ProjectionSystem):
    """Spectrum of M (dense SVD; diagnostic only)."""
    if system.M.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.svd(system.M.toarray(), compute_uv=False)
