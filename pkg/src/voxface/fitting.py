"""Recover shape coefficients from 68 3D landmarks by ridge least squares."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from voxface.errors import DataError, NumericalError
from voxface.morphable import NUM_LANDMARKS, Mesh, MorphableBasis, ShapeCoefficients

LANDMARK_SOURCES = ("detected", "synthetic", "mesh-extracted")


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 3):
            raise DataError(f"landmark set must be {NUM_LANDMARKS}x3, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("landmark coordinates must be finite")
        if self.source not in LANDMARK_SOURCES:
            raise DataError(f"unknown landmark source {self.source!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class FitConfig:
    """``ridge_lambda=None`` selects ``1e-6 * trace(V_L^T V_L) / P``."""

    ridge_lambda: Optional[float] = None
    max_landmark_residual: float = np.inf

    def __post_init__(self):
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise DataError("ridge_lambda must be non-negative")


def landmark_rows(basis: MorphableBasis) -> tuple[np.ndarray, np.ndarray]:
    """Mean landmarks (flat, length 204) and the basis rows they select (204 x P)."""
    if basis.landmark_indices is None:
        raise DataError("basis has no landmark indices")
    rows = (3 * basis.landmark_indices[:, None] + np.arange(3)).reshape(-1)
    return basis.mean_shape[rows], basis.basis[rows]


def extract_landmarks(mesh: Mesh, basis: MorphableBasis) -> LandmarkSet:
    if basis.landmark_indices is None:
        raise DataError("basis has no landmark indices")
    if basis.landmark_indices.max() >= mesh.vertex_count:
        raise DataError("mesh has fewer vertices than the basis landmark indices require")
    return LandmarkSet(mesh.vertices[basis.landmark_indices], "mesh-extracted")


def default_ridge_lambda(design: np.ndarray) -> float:
    return 1e-6 * float(np.trace(design.T @ design)) / design.shape[1]


def solve_ridge(design: np.ndarray, target: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """Solve ``(A^T A + lam I) x = A^T b`` through a Cholesky factorization.

    ``target`` may be a vector or a matrix of right-hand sides.
    """
    gram = design.T @ design
    if ridge_lambda:
        gram = gram + ridge_lambda * np.eye(gram.shape[0])
    rhs = design.T @ target
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "normal matrix is singular; use ridge_lambda > 0"
        ) from None
    # Cholesky succeeds on numerically rank-deficient matrices with tiny pivots
    diag = np.diag(chol)
    if diag.min() <= 1e-7 * diag.max():
        raise NumericalError("normal matrix is singular; use ridge_lambda > 0")
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def fit_report(
    landmarks: LandmarkSet, basis: MorphableBasis, cfg: FitConfig = FitConfig()
) -> tuple[ShapeCoefficients, float]:
    """Fit coefficients and return them with the RMS landmark residual.

    The residual is the root mean square over the 68 points of the Euclidean
    distance between fitted and given landmarks.
    """
    mean_l, design = landmark_rows(basis)
    if design.shape[1] > design.shape[0]:
        raise DataError(f"cannot fit {design.shape[1]} coefficients from {design.shape[0]} values")
    lam = default_ridge_lambda(design) if cfg.ridge_lambda is None else cfg.ridge_lambda
    target = landmarks.points.reshape(-1) - mean_l
    alpha = solve_ridge(design, target, lam)
    resid = (design @ alpha - target).reshape(-1, 3)
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return ShapeCoefficients(alpha), rms


def fit_coefficients(
    landmarks: LandmarkSet, basis: MorphableBasis, cfg: FitConfig = FitConfig()
) -> ShapeCoefficients:
    return fit_report(landmarks, basis, cfg)[0]


def load_landmarks(path: str | os.PathLike, source: str = "detected") -> LandmarkSet:
    try:
        pts = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed landmark file ({exc})") from None
    return LandmarkSet(pts, source)


def save_landmarks(path: str | os.PathLike, landmarks: LandmarkSet) -> None:
    np.savetxt(path, landmarks.points, fmt="%.17g")
