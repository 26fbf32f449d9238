"""Line-, point- and region-based mesh comparison metrics.

* absolute ratio error (ARE) of facial distance ratios normalized by the
  outer-interocular distance,
* normalized mean landmark error (NME),
* point-to-plane RMSE after rigid ICP, for the whole face and for six parts.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from voxface.errors import DataError, NumericalError
from voxface.fitting import LandmarkSet
from voxface.morphable import (
    NUM_LANDMARKS,
    Mesh,
    MorphableBasis,
    PoseParams,
    rotation_from_vector,
    vertex_normals,
)

RATIO_NAMES = ("ER", "FR", "MR", "CR")
PAIR_NAMES = ("ear", "forehead", "outer_interocular", "midline", "cheek")
REGION_NAMES = ("left_eye", "right_eye", "nose", "mouth", "left_cheek", "right_cheek")
REGION_LABELS = {
    "left_eye": "Left Eye",
    "right_eye": "Right Eye",
    "nose": "Nose",
    "mouth": "Mouth",
    "left_cheek": "Left Cheek",
    "right_cheek": "Right Cheek",
}
_RATIO_PAIR = {"ER": "ear", "FR": "forehead", "MR": "midline", "CR": "cheek"}


@dataclass(frozen=True)
class RatioSpec:
    """Landmark-index pairs (0-based, 68-point scheme) for the ratio metric.

    The defaults are a convention: jaw extremes for the ear pair, brow
    extremes for the forehead, outer eye corners for the normalizer, nose
    bridge to chin for the midline, and a mid-jaw pair for the cheeks.
    """

    ear: tuple[int, int] = (0, 16)
    forehead: tuple[int, int] = (17, 26)
    outer_interocular: tuple[int, int] = (36, 45)
    midline: tuple[int, int] = (27, 8)
    cheek: tuple[int, int] = (4, 12)

    def __post_init__(self):
        for name in PAIR_NAMES:
            pair = tuple(int(i) for i in getattr(self, name))
            if len(pair) != 2 or not all(0 <= i < NUM_LANDMARKS for i in pair):
                raise DataError(f"ratio pair {name} must hold two landmark indices in 0..67")
            object.__setattr__(self, name, pair)
        if self.outer_interocular[0] == self.outer_interocular[1]:
            raise DataError("outer-interocular pair must use two distinct landmarks")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RatioSpec":
        """Read ``name i j`` lines (names from :data:`PAIR_NAMES`); unspecified pairs keep defaults."""
        pairs = {}
        for lineno, parts in _records(path):
            if len(parts) != 3 or parts[0] not in PAIR_NAMES:
                raise DataError(f"{path}:{lineno}: expected '<pair-name> i j'")
            try:
                pairs[parts[0]] = (int(parts[1]), int(parts[2]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: indices must be integers") from None
        return cls(**pairs)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for name in PAIR_NAMES:
                i, j = getattr(self, name)
                fh.write(f"{name} {i} {j}\n")


@dataclass(frozen=True)
class RegionMap:
    regions: Mapping[str, np.ndarray]

    def __post_init__(self):
        missing = set(REGION_NAMES) - set(self.regions)
        extra = set(self.regions) - set(REGION_NAMES)
        if missing or extra:
            raise DataError(f"region map needs exactly {REGION_NAMES}")
        clean = {}
        for name in REGION_NAMES:
            idx = np.unique(np.asarray(self.regions[name], dtype=np.int64).reshape(-1))
            if idx.size == 0:
                raise DataError(f"region {name} is empty")
            if idx.min() < 0:
                raise DataError(f"region {name} has a negative index")
            idx.setflags(write=False)
            clean[name] = idx
        object.__setattr__(self, "regions", clean)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.regions[name]

    def check(self, vertex_count: int) -> None:
        for name, idx in self.regions.items():
            if idx.max() >= vertex_count:
                raise DataError(f"region {name} indexes past {vertex_count} vertices")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RegionMap":
        """Read one ``name i j k ...`` line per region; a name may repeat to continue a list."""
        acc: dict[str, list[int]] = {}
        for lineno, parts in _records(path):
            if parts[0] not in REGION_NAMES:
                raise DataError(f"{path}:{lineno}: unknown region {parts[0]!r}")
            try:
                acc.setdefault(parts[0], []).extend(int(p) for p in parts[1:])
            except ValueError:
                raise DataError(f"{path}:{lineno}: indices must be integers") from None
        return cls(acc)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for name in REGION_NAMES:
                fh.write(name + " " + " ".join(map(str, self.regions[name])) + "\n")


def _records(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if parts:
                yield lineno, parts


def synthetic_regions(basis: MorphableBasis) -> RegionMap:
    """Part regions for :func:`voxface.morphable.synthetic_basis` meshes,
    selected from the mean shape's (x, y) layout."""
    xy = basis.mean_vertices()[:, :2]
    x, y = xy[:, 0], xy[:, 1]

    def ellipse(cx, cy, rx, ry):
        return np.flatnonzero(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0)

    return RegionMap(
        {
            "left_eye": ellipse(-0.38, 0.3, 0.24, 0.15),
            "right_eye": ellipse(0.38, 0.3, 0.24, 0.15),
            "nose": ellipse(0.0, 0.1, 0.17, 0.36),
            "mouth": ellipse(0.0, -0.5, 0.36, 0.17),
            "left_cheek": ellipse(-0.55, -0.2, 0.22, 0.22),
            "right_cheek": ellipse(0.55, -0.2, 0.22, 0.22),
        }
    )


# -- line-based ---------------------------------------------------------------


def face_ratios(landmarks: np.ndarray, spec: RatioSpec) -> dict[str, float]:
    """Distance ratios ER, FR, MR, CR of one landmark array (68 x 3)."""
    pts = np.asarray(landmarks, dtype=np.float64)

    def dist(pair):
        return float(np.linalg.norm(pts[pair[0]] - pts[pair[1]]))

    oicd = dist(spec.outer_interocular)
    if oicd == 0.0:
        raise NumericalError("outer-interocular distance is zero")
    return {name: dist(getattr(spec, _RATIO_PAIR[name])) / oicd for name in RATIO_NAMES}


def _landmark_array(obj, basis: Optional[MorphableBasis]) -> np.ndarray:
    if isinstance(obj, LandmarkSet):
        return obj.points
    if isinstance(obj, Mesh):
        if basis is not None and basis.landmark_indices is not None:
            return obj.vertices[basis.landmark_indices]
        if obj.vertex_count == NUM_LANDMARKS:
            return obj.vertices
        raise DataError("mesh ratios need a basis with landmark indices")
    arr = np.asarray(obj, dtype=np.float64)
    if arr.shape != (NUM_LANDMARKS, 3):
        raise DataError(f"expected 68x3 landmarks, got {arr.shape}")
    return arr


def absolute_ratio_error(
    pred, ref, spec: RatioSpec = RatioSpec(), basis: Optional[MorphableBasis] = None
) -> dict[str, float]:
    """Per-ratio ARE plus their ``mean``.

    ``pred`` and ``ref`` are meshes (landmarks taken through ``basis``),
    :class:`LandmarkSet` objects or 68 x 3 arrays.
    """
    rp = face_ratios(_landmark_array(pred, basis), spec)
    rr = face_ratios(_landmark_array(ref, basis), spec)
    out = {name: abs(rp[name] - rr[name]) for name in RATIO_NAMES}
    out["mean"] = mean_are(out)
    return out


def mean_are(per_ratio: Mapping[str, float]) -> float:
    return float(np.mean([per_ratio[name] for name in RATIO_NAMES]))


def relative_gain(candidate_mean: float, baseline_mean: float) -> float:
    """Percent change of ``candidate_mean`` relative to ``baseline_mean``."""
    if baseline_mean <= 0:
        raise DataError("baseline mean must be positive")
    return 100.0 * (candidate_mean - baseline_mean) / baseline_mean


# -- point-based --------------------------------------------------------------


def face_size(ref_mesh: Mesh) -> float:
    """``sqrt(width * length)`` from the x and y extents of the mesh bounding box."""
    ext = np.ptp(ref_mesh.vertices[:, :2], axis=0)
    return float(np.sqrt(ext[0] * ext[1]))


def nme(pred_lms, ref_lms, ref_mesh: Mesh) -> float:
    """Mean landmark distance divided by the reference face size."""
    p = _landmark_array(pred_lms, None)
    r = _landmark_array(ref_lms, None)
    size = face_size(ref_mesh)
    if size == 0.0:
        raise NumericalError("reference face size is zero")
    return float(np.mean(np.linalg.norm(p - r, axis=1)) / size)


# -- region-based -------------------------------------------------------------


@dataclass(frozen=True)
class IcpConfig:
    """Point-to-plane ICP settings.

    ``init="centroid"`` starts from the translation aligning the two centroids;
    ``"identity"`` starts from the identity pose.
    """

    max_iterations: int = 50
    convergence_tol: float = 1e-7
    rejection_multiplier: float = 3.0
    seed: int = 0
    init: str = "centroid"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DataError("max_iterations must be at least 1")
        if self.convergence_tol <= 0:
            raise DataError("convergence_tol must be positive")
        if self.init not in ("centroid", "identity"):
            raise DataError(f"unknown ICP init {self.init!r}")


@dataclass(frozen=True)
class IcpResult:
    pose: PoseParams
    rmse: float
    history: tuple[float, ...]
    iterations: int
    kept: int


MIN_CORRESPONDENCES = 6


def _p2p_residuals(src, q, n, rot, t):
    return np.einsum("ij,ij->i", src @ rot.T + t - q, n)


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def icp_point_to_plane_detail(source: Mesh, target: Mesh, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Rigidly align ``source`` onto ``target`` and report the full trace.

    Each iteration matches every transformed source vertex to its nearest
    target vertex, drops matches farther than ``rejection_multiplier`` times
    the median match distance, and solves the linearized point-to-plane
    problem for an incremental rotation vector and translation. The step is
    halved until the point-to-plane RMSE on the current matches stops growing.
    ``history[k]`` is that RMSE after the update of iteration ``k``.
    """
    if source.vertex_count == 0 or target.vertex_count == 0:
        raise DataError("ICP needs non-empty meshes")
    if target.normals is None:
        target = vertex_normals(target)
    src = source.vertices
    tgt = target.vertices
    tnorm = target.normals
    tree = cKDTree(tgt)

    rot = np.eye(3)
    t = np.zeros(3)
    if cfg.init == "centroid":
        t = tgt.mean(axis=0) - src.mean(axis=0)

    history: list[float] = []
    kept = 0
    prev = np.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = src @ rot.T + t
        dist, idx = tree.query(moved)
        keep = dist <= cfg.rejection_multiplier * np.median(dist)
        kept = int(keep.sum())
        if kept < MIN_CORRESPONDENCES:
            raise NumericalError(
                f"only {kept} correspondences survive rejection; need {MIN_CORRESPONDENCES}"
            )
        s, q, n = src[keep], tgt[idx[keep]], tnorm[idx[keep]]
        p = moved[keep]
        r0 = np.einsum("ij,ij->i", p - q, n)
        before = float(np.sqrt(np.mean(r0**2)))
        jac = np.hstack([np.cross(p, n), n])
        step, *_ = np.linalg.lstsq(jac, -r0, rcond=None)

        new_rot, new_t, after = rot, t, before
        scale = 1.0
        for _ in range(30):
            d_rot = rotation_from_vector(scale * step[:3])
            cand_rot = _orthonormalize(d_rot @ rot)
            cand_t = d_rot @ t + scale * step[3:]
            cand = float(np.sqrt(np.mean(_p2p_residuals(s, q, n, cand_rot, cand_t) ** 2)))
            if cand <= before:
                new_rot, new_t, after = cand_rot, cand_t, cand
                break
            scale *= 0.5
        rot, t = new_rot, new_t
        history.append(after)
        if abs(prev - after) < cfg.convergence_tol or after == 0.0:
            break
        prev = after

    # final score on fresh matches for the returned pose
    moved = src @ rot.T + t
    dist, idx = tree.query(moved)
    keep = dist <= cfg.rejection_multiplier * np.median(dist)
    if keep.sum() < MIN_CORRESPONDENCES:
        raise NumericalError("too few correspondences for the final pose")
    res = _p2p_residuals(src[keep], tgt[idx[keep]], tnorm[idx[keep]], rot, t)
    rmse = float(np.sqrt(np.mean(res**2)))
    return IcpResult(PoseParams(rot, t), rmse, tuple(history), it, int(keep.sum()))


def icp_point_to_plane(
    source: Mesh, target: Mesh, cfg: IcpConfig = IcpConfig()
) -> tuple[PoseParams, float]:
    """Pose mapping ``source`` onto ``target`` and the final point-to-plane RMSE."""
    res = icp_point_to_plane_detail(source, target, cfg)
    return res.pose, res.rmse


def part_rmse(
    pred: Mesh, ref: Mesh, regions: RegionMap, cfg: IcpConfig = IcpConfig()
) -> dict[str, float]:
    """Point-to-plane RMSE after registering each facial part on its own.

    Reference normals are computed on the whole reference mesh and inherited by
    the part submeshes.
    """
    regions.check(min(pred.vertex_count, ref.vertex_count))
    for name in REGION_NAMES:
        if regions[name].size < MIN_CORRESPONDENCES:
            raise DataError(
                f"region {name} has {regions[name].size} vertices; "
                f"registration needs at least {MIN_CORRESPONDENCES}"
            )
    if ref.normals is None:
        ref = vertex_normals(ref)
    out = {}
    for name in REGION_NAMES:
        idx = regions[name]
        out[name] = icp_point_to_plane(pred.submesh(idx), ref.submesh(idx), cfg)[1]
    return out


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    """Metric values for one compared pair (or an aggregate of pairs).

    Units: ratio errors and NME are unitless; RMSE values are in model units.
    """

    are_per_ratio: dict[str, float]
    nme: float
    rmse_holistic: float
    rmse_per_part: dict[str, float]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        values = [*self.are_per_ratio.values(), self.nme, self.rmse_holistic]
        values += list(self.rmse_per_part.values())
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise DataError("report values must be finite and non-negative")
        if set(self.are_per_ratio) != set(RATIO_NAMES):
            raise DataError(f"ARE entries must be {RATIO_NAMES}")
        if set(self.rmse_per_part) != set(REGION_NAMES):
            raise DataError(f"part RMSE entries must be {REGION_NAMES}")

    @property
    def are_mean(self) -> float:
        return mean_are(self.are_per_ratio)

    def to_dict(self) -> dict:
        return {
            "are_per_ratio": dict(self.are_per_ratio),
            "are_mean": self.are_mean,
            "nme": self.nme,
            "rmse_holistic": self.rmse_holistic,
            "rmse_per_part": dict(self.rmse_per_part),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            {k: float(d["are_per_ratio"][k]) for k in RATIO_NAMES},
            float(d["nme"]),
            float(d["rmse_holistic"]),
            {k: float(d["rmse_per_part"][k]) for k in REGION_NAMES},
            dict(d.get("metadata", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def mean_report(reports: Sequence[EvalReport], metadata: Optional[dict] = None) -> EvalReport:
    """Elementwise arithmetic mean of several reports."""
    if not reports:
        raise DataError("cannot average zero reports")
    return EvalReport(
        {k: float(np.mean([r.are_per_ratio[k] for r in reports])) for k in RATIO_NAMES},
        float(np.mean([r.nme for r in reports])),
        float(np.mean([r.rmse_holistic for r in reports])),
        {k: float(np.mean([r.rmse_per_part[k] for r in reports])) for k in REGION_NAMES},
        dict(metadata or {}),
    )


TABLES = ("are", "nme", "rmse", "parts")


def _table_rows(report: EvalReport, table: str) -> list[tuple[str, float]]:
    if table == "are":
        rows = [(k, report.are_per_ratio[k]) for k in RATIO_NAMES]
        return rows + [("Mean", report.are_mean)]
    if table == "nme":
        return [("NME", report.nme)]
    if table == "rmse":
        return [("RMSE", report.rmse_holistic)]
    if table == "parts":
        return [(REGION_LABELS[k], report.rmse_per_part[k]) for k in REGION_NAMES]
    raise DataError(f"unknown table {table!r}; choose from {TABLES}")


def format_table(columns: Mapping[str, EvalReport], table: str) -> str:
    """CSV text laid out like the results tables: one metric per row, one
    method per column."""
    names = list(columns)
    per_col = [_table_rows(columns[n], table) for n in names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *names])
    for i, (label, _) in enumerate(per_col[0] if per_col else []):
        w.writerow([label, *(repr(rows[i][1]) for rows in per_col)])
    return buf.getvalue()


def parse_table(text: str) -> dict[str, dict[str, float]]:
    """Inverse of :func:`format_table`: ``{column: {row label: value}}``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "metric":
        raise DataError("table must start with a 'metric' header")
    names = rows[0][1:]
    out: dict[str, dict[str, float]] = {n: {} for n in names}
    for row in rows[1:]:
        if len(row) != len(names) + 1:
            raise DataError(f"table row {row[0]!r} has the wrong number of cells")
        for n, cell in zip(names, row[1:]):
            out[n][row[0]] = float(cell)
    return out
