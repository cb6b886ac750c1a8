"""Synthetic ground truth: flat templates, isometric deformation sequences,
simulated cameras and correspondences.

Bending is applied to grid columns: the columns of the sheet are placed on a
profile curve in the x-z plane so that consecutive columns stay exactly as
far apart as in the template, and the strip between two columns moves
rigidly. The result is a polyhedral developable surface whose edges all keep
their template length (up to round-off) and whose first fundamental form is
unchanged away from the fold lines.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import (BadResolution, NonPositiveDepth, ParseError,
                     ScheduleOutOfRange)
from .geom import (CameraIntrinsics, MatchSet, TriMesh, load_camera,
                   load_mesh, project_points, read_json, save_camera,
                   save_mesh, write_json)

KINDS = ("cylinder_roll", "sine_flex", "rigid_motion")


def make_template(W, H, nx, ny) -> TriMesh:
    """Flat ``W x H`` sheet at z = 0 sampled on an ``nx x ny`` grid.

    Vertex ``j * nx + i`` sits at ``(W i/(nx-1), H j/(ny-1), 0)`` and carries
    param coords ``(i/(nx-1), j/(ny-1))``. Two triangles per cell.
    """
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise BadResolution(f"grid resolution must be >= 2x2, got {nx}x{ny}")
    if not (W > 0 and H > 0):
        raise BadResolution("sheet size must be positive")
    nx, ny = int(nx), int(ny)
    u, v = np.meshgrid(np.arange(nx) / (nx - 1), np.arange(ny) / (ny - 1))
    param = np.column_stack([u.ravel(), v.ravel()])
    verts = np.column_stack([W * param[:, 0], H * param[:, 1],
                             np.zeros(nx * ny)])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, faces, param)


def rotation(axis, angle):
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    Kx = np.array([[0, -axis[2], axis[1]],
                   [axis[2], 0, -axis[0]],
                   [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx


def place(points, pose):
    R, T = pose
    return np.asarray(points) @ np.asarray(R).T + np.asarray(T)


# -- profile curves ---------------------------------------------------------

def _roll_profile(knots, r):
    """Columns on a circle of radius r tangent to the sheet at knots[0]."""
    if np.isinf(r):
        return np.column_stack([knots, np.zeros_like(knots)])
    gaps = np.diff(knots)
    if np.any(gaps > 2 * r):
        raise ScheduleOutOfRange(f"radius {r} too small for column spacing")
    theta = np.concatenate([[0.0], np.cumsum(2 * np.arcsin(gaps / (2 * r)))])
    return np.column_stack([knots[0] + r * np.sin(theta),
                            r * (1 - np.cos(theta))])


def _sine_profile(knots, amplitude, wavelength):
    """Columns on z = a sin(2 pi (x - x0) / wavelength), spaced by chords."""
    x0 = knots[0]
    if amplitude == 0:
        return np.column_stack([knots, np.zeros_like(knots)])

    def curve(xi):
        return np.array([xi, amplitude * np.sin(2 * np.pi * (xi - x0)
                                                / wavelength)])

    out = [curve(x0)]
    xi = x0
    for gap in np.diff(knots):
        start = out[-1]
        xi = brentq(lambda s: np.linalg.norm(curve(s) - start) - gap,
                    xi, xi + gap, xtol=1e-14, rtol=1e-15)
        out.append(curve(xi))
    return np.array(out)


def _bend(points, knots, profile):
    """Map object-frame points through the column profile."""
    x = points[:, 0]
    px = np.interp(x, knots, profile[:, 0])
    pz = np.interp(x, knots, profile[:, 1])
    return np.column_stack([px, points[:, 1], pz + points[:, 2]])


@dataclass
class DeformationModel:
    """How a flat object-frame sheet deforms and where it sits per frame.

    ``schedule[t]`` is the roll radius (cylinder_roll, ``inf`` = flat) or
    the sine amplitude (sine_flex); unused for rigid_motion.
    ``extrinsics[t]`` is the object-to-camera pose ``(R, T)`` of frame t;
    ``base_pose`` places the undeformed template.
    """

    kind: str
    schedule: np.ndarray
    extrinsics: list
    base_pose: tuple = field(default_factory=lambda: (np.eye(3),
                                                      np.zeros(3)))
    wavelength: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        self.schedule = np.asarray(self.schedule, dtype=float)

    @property
    def n_frames(self):
        return len(self.extrinsics)

    def to_dict(self):
        return {"kind": self.kind,
                "schedule": [None if np.isinf(s) else float(s)
                             for s in self.schedule],
                "extrinsics": [[np.asarray(R).tolist(), np.asarray(T).tolist()]
                               for R, T in self.extrinsics],
                "base_pose": [np.asarray(self.base_pose[0]).tolist(),
                              np.asarray(self.base_pose[1]).tolist()],
                "wavelength": self.wavelength}

    @classmethod
    def from_dict(cls, data):
        sched = [np.inf if s is None else s for s in data["schedule"]]
        ext = [(np.array(R), np.array(T)) for R, T in data["extrinsics"]]
        base = tuple(np.array(a) for a in data["base_pose"])
        return cls(data["kind"], sched, ext, base, data["wavelength"])


def deform(model: DeformationModel, template: TriMesh, t) -> np.ndarray:
    """Camera-frame vertices of frame ``t`` for an object-frame
    ``template``."""
    if not 0 <= t < model.n_frames:
        raise ScheduleOutOfRange(f"frame {t} outside schedule of "
                                 f"{model.n_frames}")
    pts = template.vertices
    knots = np.unique(pts[:, 0])
    if model.kind == "cylinder_roll":
        if t >= len(model.schedule):
            raise ScheduleOutOfRange(f"no radius for frame {t}")
        bent = _bend(pts, knots, _roll_profile(knots, model.schedule[t]))
    elif model.kind == "sine_flex":
        if t >= len(model.schedule):
            raise ScheduleOutOfRange(f"no amplitude for frame {t}")
        prof = _sine_profile(knots, model.schedule[t], model.wavelength)
        bent = _bend(pts, knots, prof)
    else:
        bent = pts.copy()
    return place(bent, model.extrinsics[t])


def default_model(kind, W, H, n_frames, max_angle=np.pi / 2,
                  amplitude=None, depth=None):
    """Model used by :func:`make_sequence`: sheet centred on the optical
    axis at ``depth`` (default 2 max(W, H)), bending progressively."""
    depth = 2.0 * max(W, H) if depth is None else depth
    base = (np.eye(3), np.array([-W / 2, -H / 2, depth]))
    frac = np.arange(1, n_frames + 1) / n_frames
    if kind == "cylinder_roll":
        sched = W / (max_angle * frac)
        ext = [base] * n_frames
    elif kind == "sine_flex":
        amp = 0.08 * W if amplitude is None else amplitude
        sched = amp * frac
        ext = [base] * n_frames
    elif kind == "rigid_motion":
        sched = np.zeros(n_frames)
        centre = np.array([W / 2, H / 2, 0.0])
        ext = []
        for f in frac:
            R = rotation([0.3, 1.0, 0.1], 0.35 * f)
            # rotate about the sheet centre, then drift sideways
            T = base[1] + centre - R @ centre + np.array([0.05 * W * f, 0, 0])
            ext.append((R, T))
    else:
        raise ValueError(f"unknown deformation kind {kind!r}")
    return DeformationModel(kind, sched, ext, base, wavelength=W)


# -- correspondences --------------------------------------------------------

def synthesize_matches(frame_vertices, template: TriMesh, K: CameraIntrinsics,
                       per_facet=1, noise_px=0.0, dropout=0.0, seed=0,
                       mode="facets") -> MatchSet:
    """Simulated image correspondences for one frame.

    ``mode="facets"`` draws ``per_facet`` uniform points in every facet;
    ``mode="vertices"`` uses every vertex once (one-hot weights on the
    first facet containing it). Pixels get N(0, noise_px^2) noise per
    coordinate; then ``round(dropout * m)`` matches are removed.
    """
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    rng = np.random.default_rng(seed)
    x = np.asarray(frame_vertices, dtype=float)
    faces = template.faces
    if mode == "facets":
        facets = np.repeat(np.arange(len(faces)), per_facet)
        bary = rng.dirichlet(np.ones(3), size=len(facets))
    elif mode == "vertices":
        first = np.full(template.n_vertices, -1)
        corner = np.zeros(template.n_vertices, dtype=int)
        for fi in range(len(faces) - 1, -1, -1):
            first[faces[fi]] = fi
            corner[faces[fi]] = np.arange(3)
        keep = first >= 0
        facets = first[keep]
        bary = np.zeros((len(facets), 3))
        bary[np.arange(len(facets)), corner[keep]] = 1.0
    else:
        raise ValueError(f"unknown match mode {mode!r}")
    tri = faces[facets]
    pts3 = np.einsum("mi,mij->mj", bary, x[tri])
    param = np.einsum("mi,mij->mj", bary, template.param_coords[tri])
    param = np.clip(param, 0.0, 1.0)
    try:
        pix = project_points(K, pts3)
    except NonPositiveDepth as exc:
        raise NonPositiveDepth(f"facet {int(facets[exc.index])} is behind "
                               "the camera", index=int(facets[exc.index]))
    if noise_px > 0:
        pix = pix + rng.normal(0.0, noise_px, size=pix.shape)
    m = len(facets)
    n_drop = int(round(dropout * m))
    if n_drop:
        kept = np.sort(rng.permutation(m)[n_drop:])
    else:
        kept = np.arange(m)
    return MatchSet(facets[kept], bary[kept], param[kept], pix[kept])


def default_camera():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0)


@dataclass
class SyntheticSequence:
    template: TriMesh              # camera frame, undeformed
    frames: np.ndarray             # (T, n, 3) ground-truth vertices
    matches: list                  # one MatchSet per frame
    camera: CameraIntrinsics
    noise_px: float = 0.0
    dropout: float = 0.0
    model: DeformationModel | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames)

    def diagonal(self):
        return self.template.diagonal()


def frame_seed(seed, t):
    return np.random.SeedSequence([int(seed), int(t)])


def make_sequence(W=130.0, H=100.0, nx=13, ny=10, frames=30,
                  model="cylinder_roll", noise_px=0.0, dropout=0.0,
                  per_facet=1, match_mode="facets", seed=0,
                  camera=None, max_angle=np.pi / 2) -> SyntheticSequence:
    sheet = make_template(W, H, nx, ny)
    K = default_camera() if camera is None else camera
    dm = default_model(model, W, H, frames, max_angle=max_angle)
    template = sheet.with_vertices(place(sheet.vertices, dm.base_pose))
    gt = np.stack([deform(dm, sheet, t) for t in range(frames)])
    ms = [synthesize_matches(gt[t], template, K, per_facet, noise_px,
                             dropout, frame_seed(seed, t), match_mode)
          for t in range(frames)]
    meta = {"W": W, "H": H, "nx": nx, "ny": ny, "per_facet": per_facet,
            "match_mode": match_mode, "max_angle": max_angle}
    return SyntheticSequence(template, gt, ms, K, noise_px, dropout, dm,
                             seed, meta)


# -- bundle on disk ---------------------------------------------------------

def save_bundle(seq: SyntheticSequence, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(out / "template.json", seq.template)
    save_camera(out / "camera.json", seq.camera)
    with open(out / "frames.jsonl", "w") as fh:
        for t, v in enumerate(seq.frames):
            fh.write(json.dumps({"frame": t, "vertices": v.tolist()}) + "\n")
    with open(out / "matches.jsonl", "w") as fh:
        for t, m in enumerate(seq.matches):
            rec = {"frame": t}
            rec.update(m.to_dict())
            fh.write(json.dumps(rec) + "\n")
    manifest = {"model": seq.model.kind if seq.model else None,
                "schedule": (seq.model.to_dict()["schedule"]
                             if seq.model else None),
                "deformation": seq.model.to_dict() if seq.model else None,
                "seed": seq.seed, "noise_px": seq.noise_px,
                "dropout": seq.dropout, "n_frames": seq.n_frames}
    manifest.update(seq.meta)
    write_json(out / "manifest.json", manifest)
    return out


def read_jsonl(path):
    path = Path(path)
    if not path.exists():
        from .errors import MissingFile
        raise MissingFile(f"no such file: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return records


def load_bundle(path) -> SyntheticSequence:
    """Read a bundle directory. ``frames.jsonl`` is optional (sequences
    without ground truth)."""
    d = Path(path)
    template = load_mesh(d / "template.json")
    K = load_camera(d / "camera.json")
    manifest = read_json(d / "manifest.json")
    matches = [MatchSet.from_dict(r) for r in read_jsonl(d / "matches.jsonl")]
    if (d / "frames.jsonl").exists():
        try:
            frames = np.array([r["vertices"]
                               for r in read_jsonl(d / "frames.jsonl")],
                              dtype=float)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad frames file: {exc}") from exc
    else:
        frames = np.zeros((0, template.n_vertices, 3))
    model = None
    if manifest.get("deformation"):
        model = DeformationModel.from_dict(manifest["deformation"])
    meta = {k: v for k, v in manifest.items()
            if k not in ("model", "schedule", "deformation", "seed",
                         "noise_px", "dropout", "n_frames")}
    return SyntheticSequence(template, frames, matches, K,
                             manifest.get("noise_px", 0.0),
                             manifest.get("dropout", 0.0), model,
                             manifest.get("seed", 0), meta)
