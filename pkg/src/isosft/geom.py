"""Pinhole projection, triangle meshes, matches and metric-tensor algebra.

Conventions: camera frame is right-handed with z pointing forward, pixel
origin at the top-left corner. Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadFacet, BadWeights, InvalidMesh, MissingFile,
                     NonPositiveDepth, OutOfDomain, ParseError)

DEPTH_FLOOR = 1e-6
BARY_SUM_TOL = 1e-9
DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "skew"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "skew": self.skew}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["fx"], data["fy"], data["cx"], data["cy"],
                       data.get("skew", 0.0))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad camera record: {exc}") from exc


def project(K: CameraIntrinsics, s) -> np.ndarray:
    """Project one camera-frame point to pixel coordinates (u, v)."""
    s = np.asarray(s, dtype=float)
    if s.shape != (3,):
        raise ValueError("expected a single 3D point")
    return project_points(K, s[None])[0]


def project_points(K: CameraIntrinsics, S, return_jacobian=False):
    """Vectorised projection of an (N, 3) array.

    With ``return_jacobian`` also returns the (N, 2, 3) derivative of each
    pixel with respect to its 3D point.
    """
    S = np.asarray(S, dtype=float)
    x, y, z = S[:, 0], S[:, 1], S[:, 2]
    bad = np.flatnonzero(~(z > DEPTH_FLOOR))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveDepth(f"point {i} has depth {z[i]!r}", index=i)
    iz = 1.0 / z
    u = (K.fx * x + K.skew * y) * iz + K.cx
    v = K.fy * y * iz + K.cy
    uv = np.stack([u, v], axis=1)
    if not return_jacobian:
        return uv
    jac = np.zeros((S.shape[0], 2, 3))
    jac[:, 0, 0] = K.fx * iz
    jac[:, 0, 1] = K.skew * iz
    jac[:, 0, 2] = -(u - K.cx) * iz
    jac[:, 1, 1] = K.fy * iz
    jac[:, 1, 2] = -(v - K.cy) * iz
    return uv, jac


def metric_tensor(J) -> np.ndarray:
    """First fundamental form J^T J of a (..., 3, 2) Jacobian."""
    J = np.asarray(J, dtype=float)
    return np.swapaxes(J, -1, -2) @ J


def _frozen(a):
    a.setflags(write=False)
    return a


class TriMesh:
    """Triangle mesh with a per-vertex parametrisation in the unit square.

    ``edges`` are derived from the faces: unique, sorted ``(i, j)`` pairs
    with ``i < j``.
    """

    def __init__(self, vertices, faces, param_coords):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        p = np.array(param_coords, dtype=float).reshape(-1, 2)
        n = v.shape[0]
        if p.shape[0] != n:
            raise InvalidMesh(f"{p.shape[0]} param coords for {n} vertices")
        if f.size and (f.min() < 0 or f.max() >= n):
            raise InvalidMesh("face index out of range")
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("non-finite vertex coordinates")
        if p.size and (p.min() < -DOMAIN_TOL or p.max() > 1 + DOMAIN_TOL):
            raise InvalidMesh("param coords must lie in [0, 1]^2")
        if np.unique(p, axis=0).shape[0] != n:
            raise InvalidMesh("param coords must be pairwise distinct")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                             | (f[:, 0] == f[:, 2])):
            raise InvalidMesh("face with repeated vertex")
        self.vertices = _frozen(v)
        self.faces = _frozen(f)
        self.param_coords = _frozen(p)
        self.edges = _frozen(edges_from_faces(f))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def diagonal(self):
        """Length of the bounding-box diagonal."""
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(np.ptp(self.vertices, axis=0)))

    def edge_lengths(self, vertices=None):
        x = self.vertices if vertices is None else np.asarray(vertices)
        e = self.edges
        return np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1)

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.faces, self.param_coords)

    def to_dict(self):
        return {"vertices": self.vertices.tolist(),
                "faces": self.faces.tolist(),
                "param_coords": self.param_coords.tolist()}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["vertices"], data["faces"], data["param_coords"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad mesh record: {exc}") from exc


def edges_from_faces(faces):
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _check_facets(mesh, facets):
    facets = np.asarray(facets)
    if facets.size and (facets.min() < 0 or facets.max() >= len(mesh.faces)):
        raise BadFacet("facet index out of range")


def _check_bary(bary, tol=1e-6):
    bary = np.asarray(bary, dtype=float)
    if bary.shape[-1] != 3:
        raise BadWeights("barycentric weights need 3 entries")
    dev = np.abs(bary.sum(axis=-1) - 1.0)
    if np.any(dev > tol) or not np.all(np.isfinite(bary)):
        raise BadWeights("barycentric weights must sum to 1")
    return bary


def barycentric_embed(mesh: TriMesh, facet, bary, vertices=None):
    """Point ``sum_i b_i v_{f,i}``.

    ``facet``/``bary`` may be scalar/length-3 or arrays of shape (m,)/(m, 3).
    ``vertices`` overrides the mesh's own vertex positions.
    """
    x = mesh.vertices if vertices is None else np.asarray(vertices, float)
    facet_arr = np.asarray(facet)
    b = _check_bary(bary)
    _check_facets(mesh, facet_arr)
    tri = x[mesh.faces[facet_arr]]
    return np.einsum("...i,...ij->...j", b, tri)


@dataclass(frozen=True)
class Match:
    facet: int
    bary: tuple
    param_point: tuple
    pixel: tuple


class MatchSet:
    """Correspondences for one frame, kept both in barycentric and in
    parametrisation form. Stored column-wise as numpy arrays."""

    def __init__(self, facets, bary, param_points, pixels):
        self.facets = _frozen(np.array(facets, dtype=np.int64).reshape(-1))
        self.bary = _frozen(np.array(bary, dtype=float).reshape(-1, 3))
        self.param_points = _frozen(
            np.array(param_points, dtype=float).reshape(-1, 2))
        self.pixels = _frozen(np.array(pixels, dtype=float).reshape(-1, 2))
        m = self.facets.shape[0]
        if not (self.bary.shape[0] == self.param_points.shape[0]
                == self.pixels.shape[0] == m):
            raise ParseError("match columns have different lengths")
        if m:
            s = self.bary.sum(axis=1)
            if np.any(np.abs(s - 1) > BARY_SUM_TOL) or np.any(
                    self.bary < -BARY_SUM_TOL):
                raise BadWeights("match barycentric weights invalid")
            p = self.param_points
            if p.min() < -DOMAIN_TOL or p.max() > 1 + DOMAIN_TOL:
                raise OutOfDomain("match param point outside unit square")

    def __len__(self):
        return self.facets.shape[0]

    def __getitem__(self, i):
        return Match(int(self.facets[i]), tuple(self.bary[i]),
                     tuple(self.param_points[i]), tuple(self.pixels[i]))

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return MatchSet(self.facets[idx], self.bary[idx],
                        self.param_points[idx], self.pixels[idx])

    def to_dict(self):
        return {"facets": self.facets.tolist(), "bary": self.bary.tolist(),
                "param_points": self.param_points.tolist(),
                "pixels": self.pixels.tolist()}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["facets"], data["bary"], data["param_points"],
                       data["pixels"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad match record: {exc}") from exc


# -- JSON files ------------------------------------------------------------

def read_json(path):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise MissingFile(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_mesh(path) -> TriMesh:
    return TriMesh.from_dict(read_json(path))


def save_mesh(path, mesh: TriMesh):
    write_json(path, mesh.to_dict())


def load_camera(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(read_json(path))


def save_camera(path, K: CameraIntrinsics):
    write_json(path, K.to_dict())
