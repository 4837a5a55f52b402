"""Calibrated two-view geometry: projection, fundamental matrices, triangulation.

Conventions used throughout the package:

* World points are in meters. Camera extrinsics map world to camera frame,
  ``X_cam = R @ X + t``, with the camera looking down +z.
* Image points are in pixels with x along columns and y along rows. An
  integer pixel (x, y) IS the continuous image point (x, y); the renderer
  casts rays through integer coordinates, so no half-pixel offsets appear
  anywhere.
* The fundamental matrix of a pair maps A-image points to B-image epipolar
  lines: ``x_b^T @ F @ x_a = 0`` for homogeneous correspondences.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DegenerateBaselineError,
    DegenerateEpipolarLineError,
    DegenerateProjectionError,
    TriangulationError,
    ValidationError,
)
from .validation import check_camera

logger = logging.getLogger(__name__)

# Guards for degeneracy checks. Baselines and line normals below these are
# treated as exactly degenerate rather than amplified into garbage.
MIN_BASELINE = 1e-12
MIN_LINE_NORM = 1e-12
MIN_RAY_ANGLE = 1e-9  # radians; rays closer to parallel cannot be intersected


@dataclass(eq=False)
class Camera:
    """Pinhole camera with intrinsics K, extrinsics (R, t) and a pixel grid.

    Attributes
    ----------
    K : (3, 3) ndarray
        Upper-triangular intrinsics with positive focal entries.
    R : (3, 3) ndarray
        World-to-camera rotation.
    t : (3,) ndarray
        World-to-camera translation.
    width, height : int
        Image size in pixels.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        check_camera(self)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_dict(self):
        return {
            "K": [float(v) for v in self.K.reshape(-1)],
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                K=np.array(d["K"], dtype=float).reshape(3, 3),
                R=np.array(d["R"], dtype=float).reshape(3, 3),
                t=np.array(d["t"], dtype=float).reshape(3),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed camera record: {exc}") from exc


def project(camera, point):
    """Project a 3D world point into the camera.

    Parameters
    ----------
    camera : Camera
    point : (3,) array_like
        World point in meters.

    Returns
    -------
    (2,) ndarray
        Image point in pixels.

    Raises
    ------
    DegenerateProjectionError
        If the point has non-positive depth in the camera frame.
    """
    X = np.asarray(point, dtype=float).reshape(3)
    xc = camera.R @ X + camera.t
    if xc[2] <= 0.0:
        raise DegenerateProjectionError(
            f"point has non-positive depth {xc[2]:.6g} in camera frame"
        )
    h = camera.K @ xc
    return h[:2] / h[2]


def project_points(camera, points):
    """Vectorized projection. Returns (pixels (N, 2), depths (N,)).

    Unlike `project`, non-positive depths do not raise; callers filter on the
    returned depths. Pixel values for non-positive depths are NaN.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    xc = X @ camera.R.T + camera.t
    depths = xc[:, 2].copy()
    h = xc @ camera.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        px = h[:, :2] / h[:, 2:3]
    px[depths <= 0.0] = np.nan
    return px, depths


def cross_matrix(v):
    """Skew-symmetric matrix such that cross_matrix(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def fundamental_from_cameras(cam_a, cam_b):
    """Fundamental matrix of the ordered pair (A, B) from calibration.

    Computed as ``K_b^-T [t_rel]x R_rel K_a^-1`` with the relative transform
    taking A-frame points to the B frame. Normalized to unit Frobenius norm
    with a deterministic sign (the entry of largest magnitude is positive).

    Raises
    ------
    DegenerateBaselineError
        If the camera centers coincide.
    """
    base = cam_b.center - cam_a.center
    if float(np.linalg.norm(base)) < MIN_BASELINE:
        raise DegenerateBaselineError("camera centers coincide; F undefined")
    R_rel = cam_b.R @ cam_a.R.T
    t_rel = cam_b.t - R_rel @ cam_a.t
    E = cross_matrix(t_rel) @ R_rel
    F = np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)
    F = F / np.linalg.norm(F)
    # deterministic sign: make the largest-magnitude entry positive
    flat = F.reshape(-1)
    lead = flat[np.argmax(np.abs(flat))]
    if lead < 0:
        F = -F
    return F


@dataclass(eq=False)
class CalibratedPair:
    """Ordered camera pair with its fundamental matrix (A to B lines)."""

    cam_a: Camera
    cam_b: Camera
    F: np.ndarray

    @classmethod
    def from_cameras(cls, cam_a, cam_b):
        return cls(cam_a=cam_a, cam_b=cam_b, F=fundamental_from_cameras(cam_a, cam_b))

    def swapped(self):
        """The same pair in the opposite direction (B, A)."""
        return CalibratedPair.from_cameras(self.cam_b, self.cam_a)


def epipolar_line(x, F):
    """Epipolar line in image B for image-A point x, as (a, b, c) with
    a*x' + b*y' + c = 0. Unnormalized; proport; scale carries F's scale."""
    x = np.asarray(x, dtype=float).reshape(2)
    return F @ np.array([x[0], x[1], 1.0])


def epipolar_distance(x, x_prime, F):
    """Point-to-epipolar-line distance in pixels.

    Parameters
    ----------
    x : (2,) array_like
        Point in image A.
    x_prime : (2,) array_like
        Point in image B, measured against the line of ``x``.
    F : (3, 3) ndarray

    Returns
    -------
    float
        ``|x'^T F x| / sqrt(l1^2 + l2^2)`` where ``l = F x``. Invariant to
        rescaling of F.

    Raises
    ------
    DegenerateEpipolarLineError
        If the line's image-plane normal vanishes (x maps to the epipole).
    """
    line = epipolar_line(x, F)
    norm = float(np.hypot(line[0], line[1]))
    if norm < MIN_LINE_NORM * max(1.0, float(np.abs(line[2]))):
        raise DegenerateEpipolarLineError("epipolar line normal vanishes")
    xp = np.asarray(x_prime, dtype=float).reshape(2)
    return float(abs(line[0] * xp[0] + line[1] * xp[1] + line[2]) / norm)


def epipolar_distance_matrices(F, pts_a, pts_b):
    """Pairwise epipolar distances for point sets in both images.

    Parameters
    ----------
    F : (3, 3) ndarray
    pts_a : (Na, 2) ndarray
        Points in image A.
    pts_b : (Nb, 2) ndarray
        Points in image B.

    Returns
    -------
    E : (Na, Nb) ndarray
        ``E[i, j]`` is the distance of ``pts_b[j]`` from the epipolar line of
        ``pts_a[i]`` in image B.
    E_rev : (Na, Nb) ndarray
        ``E_rev[i, j]`` is the distance of ``pts_a[i]`` from the epipolar
        line of ``pts_b[j]`` in image A (the F^T direction).

    Denominators are floored at MIN_LINE_NORM; points at an epipole would
    otherwise poison entire rows. Synthetic scenes never place the epipole
    on the surface.
    """
    A = np.asarray(pts_a, dtype=float).reshape(-1, 2)
    B = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    ha = np.column_stack([A, np.ones(len(A))])
    hb = np.column_stack([B, np.ones(len(B))])
    G = ha @ F.T @ hb.T  # G[i, j] = x_b[j]^T F x_a[i]
    lines_a = ha @ F.T  # rows: F @ x_a[i]
    lines_b = hb @ F  # rows: F^T @ x_b[j]
    wa = np.maximum(np.hypot(lines_a[:, 0], lines_a[:, 1]), MIN_LINE_NORM)
    wb = np.maximum(np.hypot(lines_b[:, 0], lines_b[:, 1]), MIN_LINE_NORM)
    G = np.abs(G)
    return G / wa[:, None], G / wb[None, :]


def _pixel_ray(camera, x):
    """World-frame unit direction of the ray through pixel x."""
    xh = np.array([x[0], x[1], 1.0])
    d = camera.R.T @ np.linalg.solve(camera.K, xh)
    return d / np.linalg.norm(d)


def triangulate(x, x_prime, pair):
    """Triangulate a 3D point from a pixel correspondence.

    Standard DLT: stack the four linear constraints from both projections
    and take the SVD null vector.

    Parameters
    ----------
    x : (2,) array_like
        Pixel in image A.
    x_prime : (2,) array_like
        Pixel in image B.
    pair : CalibratedPair

    Returns
    -------
    (3,) ndarray
        World point in meters.

    Raises
    ------
    TriangulationError
        If the viewing rays are near-parallel or the solution is at infinity.
    """
    x = np.asarray(x, dtype=float).reshape(2)
    xp = np.asarray(x_prime, dtype=float).reshape(2)
    ray_a = _pixel_ray(pair.cam_a, x)
    ray_b = _pixel_ray(pair.cam_b, xp)
    cosang = float(np.clip(np.abs(ray_a @ ray_b), 0.0, 1.0))
    if np.arccos(cosang) < MIN_RAY_ANGLE:
        raise TriangulationError("viewing rays are near-parallel")

    Pa = pair.cam_a.K @ np.column_stack([pair.cam_a.R, pair.cam_a.t])
    Pb = pair.cam_b.K @ np.column_stack([pair.cam_b.R, pair.cam_b.t])
    A = np.vstack(
        [
            x[0] * Pa[2] - Pa[0],
            x[1] * Pa[2] - Pa[1],
            xp[0] * Pb[2] - Pb[0],
            xp[1] * Pb[2] - Pb[1],
        ]
    )
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-14 * float(np.linalg.norm(X[:3])):
        raise TriangulationError("triangulated point at infinity")
    return X[:3] / X[3]


def save_cameras(path, cameras):
    """Write a list of cameras to JSON (row-major 9-element K and R)."""
    payload = [c.to_dict() for c in cameras]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cameras(path):
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise ValidationError("camera file must contain a JSON list")
    return [Camera.from_dict(d) for d in payload]
