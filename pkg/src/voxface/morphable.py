"""Linear morphable face model: reconstruction, rigid pose, normals and file I/O.

A face is the mean shape plus a linear combination of basis deformations::

    shape = mean_shape + basis @ coeffs

``mean_shape`` is a flat vector laid out vertex by vertex ``(x0, y0, z0, x1, ...)``
and ``basis`` has one deformation per column. Vertex arrays are stored as
``(N, 3)`` rows throughout the package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from voxface.errors import DataError, NumericalError

ROTATION_TOL = 1e-6
NUM_LANDMARKS = 68
COEFF_ROLES = ("predicted", "groundtruth", "positive", "negative", "expert")


@dataclass(frozen=True)
class MorphableBasis:
    mean_shape: np.ndarray
    basis: np.ndarray
    face_indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    landmark_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim == 1:
            basis = basis[:, None]
        if mean.size % 3:
            raise DataError(f"mean shape length {mean.size} is not a multiple of 3")
        if basis.ndim != 2 or basis.shape[0] != mean.size:
            raise DataError(
                f"basis has {basis.shape[0]} rows but mean shape has length {mean.size}"
            )
        n = mean.size // 3
        faces = np.asarray(self.face_indices, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise DataError(f"face index out of range for {n} vertices")
        lms = self.landmark_indices
        if lms is not None:
            lms = np.asarray(lms, dtype=np.int64).reshape(-1)
            if lms.size != NUM_LANDMARKS:
                raise DataError(f"expected {NUM_LANDMARKS} landmark indices, got {lms.size}")
            if lms.min() < 0 or lms.max() >= n:
                raise DataError(f"landmark index out of range for {n} vertices")
            lms.setflags(write=False)
        for arr in (mean, basis, faces):
            arr.setflags(write=False)
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "face_indices", faces)
        object.__setattr__(self, "landmark_indices", lms)

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.size // 3

    @property
    def coeff_count(self) -> int:
        return self.basis.shape[1]

    def mean_vertices(self) -> np.ndarray:
        return self.mean_shape.reshape(-1, 3)

    def truncated(self, coeff_count: int) -> "MorphableBasis":
        """Basis restricted to its first ``coeff_count`` columns (a nested sub-model)."""
        if not 1 <= coeff_count <= self.coeff_count:
            raise DataError(f"cannot truncate {self.coeff_count} columns to {coeff_count}")
        return replace(self, basis=self.basis[:, :coeff_count])


@dataclass(frozen=True)
class ShapeCoefficients:
    values: np.ndarray
    role: str = "predicted"

    def __post_init__(self):
        if self.role not in COEFF_ROLES:
            raise DataError(f"unknown coefficient role {self.role!r}")
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class PoseParams:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise DataError("pose needs a 3x3 rotation and a 3-vector translation")
        rot.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, first: "PoseParams") -> "PoseParams":
        """Pose equal to applying ``first`` and then ``self``."""
        return PoseParams(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "PoseParams":
        return PoseParams(self.rotation.T, -self.rotation.T @ self.translation)

    def is_valid(self, tol: float = ROTATION_TOL) -> bool:
        r = self.rotation
        return bool(
            np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol
        )


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise DataError(f"face index out of range for {len(verts)} vertices")
        verts.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != verts.shape:
                raise DataError("normals must have one row per vertex")
            if nrm.size and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-6:
                raise DataError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def submesh(self, indices) -> "Mesh":
        """Mesh on a vertex subset; keeps faces whose corners all survive and
        inherits the parent's normals when present."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vertex_count):
            raise DataError("submesh index out of range")
        remap = np.full(self.vertex_count, -1, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        faces = remap[self.faces] if self.faces.size else self.faces
        faces = faces[(faces >= 0).all(axis=1)] if faces.size else faces
        normals = None if self.normals is None else self.normals[idx]
        return Mesh(self.vertices[idx], faces, normals)


def reconstruct(basis: MorphableBasis, coeffs) -> Mesh:
    """Mesh for ``coeffs`` under ``basis``; faces are copied from the basis."""
    values = coeffs.values if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs, float)
    values = values.reshape(-1)
    if values.size != basis.coeff_count:
        raise DataError(
            f"coefficient length {values.size} does not match basis coefficient count "
            f"{basis.coeff_count}"
        )
    flat = basis.mean_shape + basis.basis @ values
    return Mesh(flat.reshape(-1, 3), basis.face_indices)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        return np.eye(3)
    k = axis / norm
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rotation_from_vector(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return rotation_about_axis(rotvec, float(np.linalg.norm(rotvec)))


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    # arccos loses precision near 0; the skew part keeps small angles accurate
    s = np.linalg.norm(rotation - rotation.T) / (2.0 * np.sqrt(2.0))
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def apply_pose(mesh: Mesh, pose: PoseParams) -> Mesh:
    """Rigidly transform every vertex ``v -> R v + t``; normals are rotated."""
    if not pose.is_valid():
        raise DataError("pose rotation is not orthonormal with determinant +1")
    r, t = pose.rotation, pose.translation
    normals = None if mesh.normals is None else mesh.normals @ r.T
    return Mesh(mesh.vertices @ r.T + t, mesh.faces, normals)


def vertex_normals(mesh: Mesh) -> Mesh:
    """Populate area-weighted per-vertex normals.

    Each face contributes its unnormalized cross product (twice its area times
    the unit normal) to its three corners. Vertices touched by no
    non-degenerate face get ``(0, 0, 1)``.
    """
    if mesh.faces.size == 0:
        raise DataError("vertex normals need at least one face")
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if not np.any(np.linalg.norm(cross, axis=1) > 0):
        raise NumericalError("every face of the mesh is degenerate")
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, f[:, corner], cross)
    norms = np.linalg.norm(acc, axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (len(v), 1))
    ok = norms > 0
    normals[ok] = acc[ok] / norms[ok, None]
    return Mesh(v, f, normals)


# -- synthetic model ---------------------------------------------------------

# 68-point landmark template in the synthetic face's (x, y) frame, following the
# usual ordering: jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.
def _landmark_template() -> np.ndarray:
    pts = []
    for th in np.linspace(np.pi, 2 * np.pi, 17):
        pts.append((0.92 * np.cos(th), 0.15 + 1.05 * np.sin(th)))
    for x in np.linspace(-0.72, -0.16, 5):
        pts.append((x, 0.58 - 0.25 * (x + 0.44) ** 2))
    for x in np.linspace(0.16, 0.72, 5):
        pts.append((x, 0.58 - 0.25 * (x - 0.44) ** 2))
    for y in np.linspace(0.42, -0.02, 4):
        pts.append((0.0, y))
    for x in np.linspace(-0.16, 0.16, 5):
        pts.append((x, -0.16 + 0.04 * abs(x) / 0.16))
    for cx, order in ((-0.38, (np.pi, 0)), (0.38, (np.pi, 0))):
        ths = np.concatenate([np.linspace(order[0], order[1], 4), [-np.pi / 3, -2 * np.pi / 3]])
        for th in ths:
            pts.append((cx + 0.16 * np.cos(th), 0.3 + 0.07 * np.sin(th)))
    for th in np.linspace(np.pi, -np.pi, 13)[:-1]:
        pts.append((0.3 * np.cos(th), -0.5 + 0.12 * np.sin(th)))
    for th in np.linspace(np.pi, -np.pi, 9)[:-1]:
        pts.append((0.18 * np.cos(th), -0.5 + 0.05 * np.sin(th)))
    return np.array(pts)


def synthetic_face_surface(xy: np.ndarray) -> np.ndarray:
    """Height of the synthetic face: an ellipsoidal cap with nose, brow and eye sockets."""
    x, y = xy[:, 0], xy[:, 1]
    z = 0.7 * np.sqrt(np.maximum(1.25 - 0.55 * x**2 - 0.35 * y**2, 0.0))
    z += 0.28 * np.exp(-((x / 0.14) ** 2 + ((y - 0.1) / 0.32) ** 2))
    z += 0.06 * np.exp(-(x**2) / 0.4 - ((y - 0.6) / 0.12) ** 2)
    for cx in (-0.38, 0.38):
        z -= 0.09 * np.exp(-(((x - cx) / 0.17) ** 2 + ((y - 0.3) / 0.1) ** 2))
    z += 0.04 * np.exp(-((x / 0.3) ** 2 + ((y + 0.5) / 0.08) ** 2))
    return z


def grid_faces(nx: int, ny: int) -> np.ndarray:
    """Counter-clockwise (seen from +z) triangulation of an ``nx`` by ``ny`` vertex grid."""
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    return np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])


def synthetic_basis(
    coeff_count: int = 20,
    nx: int = 33,
    ny: int = 41,
    seed: int = 0,
    scale: float = 0.05,
    decay: float = 0.5,
) -> MorphableBasis:
    """Seeded face-like morphable model for self-contained experiments.

    The mean shape is a smooth face-like height field sampled on a grid of
    ``nx * ny`` vertices over ``[-1, 1] x [-1.25, 1.25]``. Basis columns are
    smooth random displacement fields, orthonormalized and then scaled so that
    column ``k`` moves a vertex by roughly ``scale * (1 + k) ** -decay`` per
    unit coefficient.
    """
    rng = np.random.default_rng(seed)
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.25, 1.25, ny)
    gx, gy = np.meshgrid(xs, ys)
    xy = np.stack([gx.ravel(), gy.ravel()], 1)
    verts = np.column_stack([xy, synthetic_face_surface(xy)])
    n = len(verts)

    # low-frequency cosine dictionary; 3 * 36 = 108 independent fields
    freqs = [(a, b) for a in range(6) for b in range(6)]
    dictionary = np.stack(
        [
            np.cos(np.pi * a * (xy[:, 0] + 1) / 2) * np.cos(np.pi * b * (xy[:, 1] + 1.25) / 2.5)
            for a, b in freqs
        ],
        1,
    )
    weights = np.array([1.0 / (1 + a + b) for a, b in freqs])
    if coeff_count > 3 * len(freqs):
        raise DataError(f"synthetic basis supports at most {3 * len(freqs)} coefficients")
    cols = np.empty((3 * n, coeff_count))
    for k in range(coeff_count):
        field_ = dictionary @ (rng.standard_normal((len(freqs), 3)) * weights[:, None])
        cols[:, k] = field_.reshape(-1)
    q, _ = np.linalg.qr(cols)
    sigma = scale * np.sqrt(n) * (1.0 + np.arange(coeff_count)) ** -decay
    basis = q * sigma

    template = _landmark_template()
    used: set[int] = set()
    lms = []
    for p in template:
        order = np.argsort(np.linalg.norm(xy - p, axis=1), kind="stable")
        pick = next(int(i) for i in order if int(i) not in used)
        used.add(pick)
        lms.append(pick)
    return MorphableBasis(verts.reshape(-1), basis, grid_faces(nx, ny), np.array(lms))


# -- file formats -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_obj(path: str | os.PathLike, mesh: Mesh) -> None:
    """Write ``v x y z`` and 1-based ``f i j k`` lines."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
        for i, j, k in mesh.faces + 1:
            fh.write(f"f {i} {j} {k}\n")


def load_obj(path: str | os.PathLike) -> Mesh:
    """Read the OBJ subset written by :func:`save_obj`.

    Only ``v`` and triangular ``f`` records are accepted (``f`` entries may carry
    ``/vt/vn`` suffixes, which are ignored); blank lines and ``#`` comments are
    skipped. Anything else raises :class:`DataError` with the line number.
    """
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(p) for p in parts[1:]])
                elif parts[0] == "f" and len(parts) == 4:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                else:
                    raise ValueError
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed OBJ line {raw.strip()!r}") from None
    n = len(verts)
    for lineno, face in enumerate(faces):
        if min(face) < 0 or max(face) >= n:
            raise DataError(f"{path}: face {lineno + 1} references a vertex outside 1..{n}")
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3))


BASIS_MAGIC = "morphable-basis"


def save_basis(path: str | os.PathLike, basis: MorphableBasis) -> None:
    """Write a basis as text.

    Layout::

        morphable-basis N P F L
        N lines      mean shape, "x y z" per vertex
        P * N lines  basis columns in order, "x y z" per vertex
        F lines      faces, 0-based "i j k"
        1 line       L landmark indices (only when L > 0)
    """
    lms = basis.landmark_indices
    n_lm = 0 if lms is None else lms.size
    with open(path, "w") as fh:
        fh.write(
            f"{BASIS_MAGIC} {basis.vertex_count} {basis.coeff_count} "
            f"{len(basis.face_indices)} {n_lm}\n"
        )
        for row in basis.mean_vertices():
            fh.write(" ".join(map(_fmt, row)) + "\n")
        for k in range(basis.coeff_count):
            for row in basis.basis[:, k].reshape(-1, 3):
                fh.write(" ".join(map(_fmt, row)) + "\n")
        for tri in basis.face_indices:
            fh.write(" ".join(map(str, tri)) + "\n")
        if n_lm:
            fh.write(" ".join(map(str, lms)) + "\n")


def load_basis(path: str | os.PathLike) -> MorphableBasis:
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"{path}: empty basis file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != BASIS_MAGIC:
        raise DataError(f"{path}: expected header '{BASIS_MAGIC} N P F L'")
    try:
        n, p, nf, nl = (int(h) for h in head[1:])
        pos = 1
        mean = np.array([[float(t) for t in ln.split()] for ln in lines[pos : pos + n]])
        pos += n
        cols = np.array([[float(t) for t in ln.split()] for ln in lines[pos : pos + n * p]])
        pos += n * p
        faces = np.array([[int(t) for t in ln.split()] for ln in lines[pos : pos + nf]])
        pos += nf
        lms = np.array([int(t) for t in lines[pos].split()]) if nl else None
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed basis file ({exc})") from None
    if mean.shape != (n, 3) or cols.shape != (n * p, 3):
        raise DataError(f"{path}: truncated basis file")
    basis = cols.reshape(p, 3 * n).T if p else np.zeros((3 * n, 0))
    return MorphableBasis(mean.reshape(-1), basis, faces.reshape(-1, 3), lms)


def save_coefficients(path: str | os.PathLike, coeffs) -> None:
    values = coeffs.values if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs)
    with open(path, "w") as fh:
        for v in values.reshape(-1):
            fh.write(_fmt(v) + "\n")


def load_coefficients(path: str | os.PathLike, role: str = "predicted") -> ShapeCoefficients:
    """Read one coefficient per line."""
    values = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a number: {line!r}") from None
    return ShapeCoefficients(np.array(values), role)


def load_pose(path: str | os.PathLike) -> PoseParams:
    """Read a pose file: three rotation rows then one translation row."""
    try:
        rows = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed pose file ({exc})") from None
    if rows.shape != (4, 3):
        raise DataError(f"{path}: pose file needs 4 rows of 3 numbers")
    return PoseParams(rows[:3], rows[3])
