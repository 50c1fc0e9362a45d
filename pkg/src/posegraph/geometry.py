"""Pinhole camera model, back-projected rays and ray triangulation.

Conventions: world units are millimetres and extrinsics map world to camera,
``x_cam = R @ X + t``. No lens distortion is modelled.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIN_DEPTH_MM = 1e-6
PARALLEL_SIN = 1e-6


class GeometryError(ValueError):
    pass


class DegenerateDepth(GeometryError):
    """Point lies at or behind the camera's optical centre."""


class NearParallel(GeometryError):
    """Two rays are too close to parallel to triangulate."""


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Ray3D:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(direction)
        if not np.all(np.isfinite(origin)) or not np.isfinite(norm) or norm == 0.0:
            raise GeometryError("ray needs a finite origin and non-zero direction")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction / norm)

    def distance_to(self, point) -> float:
        """Perpendicular distance from ``point`` to the infinite line."""
        d = np.asarray(point, dtype=np.float64) - self.origin
        return float(np.linalg.norm(d - np.dot(d, self.direction) * self.direction))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """One calibrated pinhole camera.

    ``projection`` is recomputed whenever a new instance is built, so use
    :meth:`replace` rather than mutating arrays in place.
    """

    id: str
    width: int
    height: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            if not np.all(np.isfinite(arr)):
                raise CalibrationError(f"camera {self.id}: non-finite {name}")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or np.linalg.det(R) <= 0:
            raise CalibrationError(f"camera {self.id}: rotation is not a proper rotation")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0):
            raise CalibrationError(f"camera {self.id}: focal lengths must be positive")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise CalibrationError(f"camera {self.id}: principal point outside image")
        if K[0, 1] != 0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise CalibrationError(f"camera {self.id}: intrinsics must be zero-skew upper triangular")
        for arr in (K, R, t):
            arr.setflags(write=False)
        P = K @ np.hstack([R, t[:, None]])
        P.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "projection", P)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def replace(self, **changes) -> "CameraModel":
        fields = dict(
            id=self.id,
            width=self.width,
            height=self.height,
            intrinsics=self.intrinsics,
            rotation=self.rotation,
            translation=self.translation,
        )
        fields.update(changes)
        return CameraModel(**fields)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "K": self.intrinsics.tolist(),
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            self.id == other.id
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def look_at(
    camera_id: str,
    center,
    target,
    focal: float,
    width: int = 1920,
    height: int = 1080,
    up=(0.0, 0.0, 1.0),
) -> CameraModel:
    """Build a camera at ``center`` whose optical axis points at ``target``.

    Image ``v`` grows downwards, so the camera y-axis is the negated world up
    direction projected onto the image plane.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(camera_id, width, height, K, R, -R @ center)


def camera_depth(camera: CameraModel, point) -> float:
    X = np.asarray(point, dtype=np.float64)
    return float(camera.rotation[2] @ X + camera.translation[2])


def project(camera: CameraModel, point) -> np.ndarray:
    """Project a world point to pixel coordinates ``(u, v)``.

    Points outside the image are returned unclipped.
    """
    X = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(X)):
        raise GeometryError("point must be finite")
    uv, depth = project_many(camera, X[None])
    if not depth[0] > MIN_DEPTH_MM:
        raise DegenerateDepth(f"depth {depth[0]:.3g} mm in camera {camera.id}")
    return uv[0]


def project_many(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(pixels, depths)``; no depth check."""
    X = np.asarray(points, dtype=np.float64)
    P = camera.projection
    # explicit sums keep the arithmetic identical for any batch shape
    h = X[..., 0:1] * P[:, 0] + X[..., 1:2] * P[:, 1] + X[..., 2:3] * P[:, 2] + P[:, 3]
    depth = h[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / h[..., 2:3]
    return uv, depth


def backproject_ray(camera: CameraModel, pixel) -> Ray3D:
    u, v = (float(c) for c in np.asarray(pixel, dtype=np.float64).reshape(2))
    if not (math.isfinite(u) and math.isfinite(v)):
        raise GeometryError("pixel must be finite")
    K = camera.intrinsics
    # K is upper triangular with zero skew; invert by hand for exactness.
    ray_cam = np.array([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], 1.0])
    return Ray3D(camera.center, camera.rotation.T @ ray_cam)


def backproject_many(camera: CameraModel, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`backproject_ray`: ``(origin (3,), directions (..., 3))``."""
    uv = np.asarray(pixels, dtype=np.float64)
    K = camera.intrinsics
    cam = np.stack(
        [(uv[..., 0] - K[0, 2]) / K[0, 0], (uv[..., 1] - K[1, 2]) / K[1, 1], np.ones(uv.shape[:-1])],
        axis=-1,
    )
    d = cam @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return camera.center, d


def line_anchor(origin, directions) -> np.ndarray:
    """Point of each line closest to the world origin.

    A camera-independent point on the line: two rays through the same scene
    point get nearby anchors, unlike the shared camera centre.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    return o - (d @ o)[..., None] * d


def triangulate_pair(a: Ray3D, b: Ray3D) -> np.ndarray:
    """Midpoint of the common perpendicular between two rays."""
    d1, d2 = a.direction, b.direction
    cross = np.cross(d1, d2)
    sin = np.linalg.norm(cross)
    if sin < PARALLEL_SIN:
        raise NearParallel(f"|sin(angle)| = {sin:.3g}")
    w = a.origin - b.origin
    c = float(d1 @ d2)
    p, q = float(d1 @ w), float(d2 @ w)
    denom = 1.0 - c * c
    s = (c * q - p) / denom
    r = (q - c * p) / denom
    return 0.5 * ((a.origin + s * d1) + (b.origin + r * d2))


def triangulate_multiview(observations: Iterable[tuple[CameraModel, Sequence[float]]]) -> np.ndarray | None:
    """Centroid of the pairwise midpoint triangulations of all view pairs.

    Returns ``None`` with fewer than two observations or when every pair is
    near parallel.
    """
    rays = [backproject_ray(cam, px) for cam, px in observations]
    if len(rays) < 2:
        return None
    points = []
    for a, b in itertools.combinations(rays, 2):
        try:
            points.append(triangulate_pair(a, b))
        except NearParallel:
            continue
    if not points:
        return None
    return np.mean(points, axis=0)


class Rig:
    """An ordered, immutable collection of cameras keyed by id."""

    def __init__(self, cameras: Sequence[CameraModel]):
        self.cameras = tuple(cameras)
        self._index = {}
        for i, cam in enumerate(self.cameras):
            if cam.id in self._index:
                raise CalibrationError(f"duplicate camera id {cam.id!r}")
            self._index[cam.id] = i
        self.projections = np.stack([c.projection for c in self.cameras]) if self.cameras else np.zeros((0, 3, 4))
        self.projections.setflags(write=False)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, camera_id: str) -> CameraModel:
        return self.cameras[self._index[camera_id]]

    def __contains__(self, camera_id) -> bool:
        return camera_id in self._index

    def __eq__(self, other):
        return isinstance(other, Rig) and self.cameras == other.cameras

    __hash__ = None

    def index(self, camera_id: str) -> int:
        return self._index[camera_id]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]

    def to_dict(self) -> dict:
        return {"convention": "world_to_camera", "unit": "mm", "cameras": [c.to_dict() for c in self.cameras]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "Rig":
        if not isinstance(data, dict):
            raise CalibrationError("calibration must be a JSON object")
        if data.get("convention") != "world_to_camera":
            raise CalibrationError("calibration field 'convention' must be 'world_to_camera'")
        if data.get("unit") != "mm":
            raise CalibrationError("calibration field 'unit' must be 'mm'")
        cams = data.get("cameras")
        if not isinstance(cams, list) or not cams:
            raise CalibrationError("calibration field 'cameras' must be a non-empty list")
        out = []
        for i, c in enumerate(cams):
            try:
                out.append(CameraModel(str(c["id"]), c["width"], c["height"], c["K"], c["R"], c["t"]))
            except KeyError as exc:
                raise CalibrationError(f"cameras[{i}] missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                if isinstance(exc, CalibrationError):
                    raise
                raise CalibrationError(f"cameras[{i}]: {exc}") from None
        return cls(out)

    @classmethod
    def load(cls, path) -> "Rig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)
