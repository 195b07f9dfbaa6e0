"""Pinhole projection, depth-map rasterization, frustums, and ego alignment.

Pixel convention, used everywhere in this package: (u, v) = (column, row),
origin at the top-left image corner, integer pixel (floor(u), floor(v)).
Projection produces depth-scaled homogeneous triples (u*d, v*d, d); rows
with d <= 0 are behind the camera and never rasterized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_SENTINEL = -1.0

_ORTHO_TOL = 1e-9


def _check_rotation(rot: np.ndarray, what: str) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"{what} rotation must be 3x3, got {rot.shape}")
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
        raise ValueError(f"{what} rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
        raise ValueError(f"{what} rotation must have determinant 1")
    return rot


@dataclass(frozen=True)
class CameraRig:
    """One camera: intrinsics K, sensor-to-camera rotation R, translation t.

    intrinsics are in pixels, translation in meters, image_size is
    (height, width) in pixels.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {k.shape}")
        lower = np.abs(np.tril(k, -1))
        if lower.max() > 1e-12:
            raise ValueError("intrinsics must be upper-triangular")
        if np.any(np.diag(k) <= 0):
            raise ValueError("intrinsic diagonal must be strictly positive")
        rot = _check_rotation(self.rotation, "camera")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(h), int(w)))

    def scaled(self, factor_y: float, factor_x: float) -> "CameraRig":
        """Rig for a resampled image, e.g. a stride-16 feature map."""
        scale = np.diag([factor_x, factor_y, 1.0])
        h, w = self.image_size
        return CameraRig(
            intrinsics=scale @ self.intrinsics,
            rotation=self.rotation,
            translation=self.translation,
            image_size=(max(1, round(h * factor_y)), max(1, round(w * factor_x))),
        )


@dataclass(frozen=True)
class EgoPose:
    """Rigid ego-to-global transform at one timestamp."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        rot = _check_rotation(self.rotation, "ego")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(timestamp: float = 0.0) -> "EgoPose":
        return EgoPose(np.eye(3), np.zeros(3), timestamp)


@dataclass
class DepthMap:
    """Per-pixel depth in meters; pixels with no observation hold -1."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")
        covered = self.values != DEPTH_SENTINEL
        if np.any(self.values[covered] <= 0):
            raise ValueError("non-sentinel depth values must be positive")

    def coverage_mask(self) -> np.ndarray:
        return self.values != DEPTH_SENTINEL


@dataclass
class FrustumGrid:
    """(u, v, d) samples on a regular pixel x depth-bin lattice.

    Sample order is depth-major: all pixels of bin 0 first, row-major
    within a bin, matching the flattening of lifted (C_D, H, W) features.
    """

    samples: np.ndarray
    lattice: tuple[int, int, int] = field(default=(0, 0, 0))  # (n_depth, rows, cols)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 3)

    @staticmethod
    def regular(feature_size: tuple[int, int], depths: np.ndarray,
                pixel_scale: tuple[float, float] = (1.0, 1.0)) -> "FrustumGrid":
        """Lattice over feature-map pixel centers and the given depth bins.

        pixel_scale maps feature pixels to image pixels (e.g. the backbone
        stride) so the samples live in the rig's pixel coordinates.
        """
        depths = np.asarray(depths, dtype=np.float64)
        if depths.ndim != 1 or depths.size < 1:
            raise ValueError("depths must be a non-empty 1-D array")
        if np.any(np.diff(depths) <= 0):
            raise ValueError("depth bins must be strictly increasing")
        rows, cols = feature_size
        sy, sx = pixel_scale
        u = (np.arange(cols) + 0.5) * sx
        v = (np.arange(rows) + 0.5) * sy
        dd, vv, uu = np.meshgrid(depths, v, u, indexing="ij")
        samples = np.stack([uu.ravel(), vv.ravel(), dd.ravel()], axis=1)
        return FrustumGrid(samples, lattice=(depths.size, rows, cols))


def project_points(points: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Project ego-frame points to depth-scaled pixel triples (u*d, v*d, d).

    Rows with d <= 0 are behind the camera; callers exclude them before
    rasterization. Non-finite input points are rejected with their indices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bad = ~np.all(np.isfinite(points), axis=1)
    if np.any(bad):
        raise ValueError(f"non-finite points at indices {np.flatnonzero(bad).tolist()}")
    cam = points @ rig.rotation.T + rig.translation
    return cam @ rig.intrinsics.T


def in_front_mask(projected: np.ndarray) -> np.ndarray:
    return projected[:, 2] > 0


def rasterize_depth_map(projected: np.ndarray, image_size: tuple[int, int]
                        ) -> tuple[DepthMap, int]:
    """Rasterize projected points into a nearest-depth (min) map.

    Each pixel keeps the minimum depth of all points landing on it, so the
    occluding surface wins. Points outside the image are dropped; the
    dropped count is returned alongside the map.
    """
    projected = np.asarray(projected, dtype=np.float64).reshape(-1, 3)
    d = projected[:, 2]
    if np.any(d <= 0):
        raise ValueError("rasterize_depth_map requires positive depths; filter first")
    h, w = image_size
    grid = np.full(h * w, np.inf)
    if projected.shape[0]:
        u = projected[:, 0] / d
        v = projected[:, 1] / d
        px = np.floor(u).astype(np.int64)
        py = np.floor(v).astype(np.int64)
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        np.minimum.at(grid, py[inside] * w + px[inside], d[inside])
        dropped = int(projected.shape[0] - np.count_nonzero(inside))
    else:
        dropped = 0
    grid[~np.isfinite(grid)] = DEPTH_SENTINEL
    return DepthMap(grid.reshape(h, w)), dropped


def depth_map_from_points(points: np.ndarray, rig: CameraRig,
                          image_size: tuple[int, int] | None = None
                          ) -> tuple[DepthMap, int]:
    """Project, drop behind-camera rows, and rasterize in one step."""
    proj = project_points(points, rig)
    proj = proj[in_front_mask(proj)]
    return rasterize_depth_map(proj, image_size or rig.image_size)


def unproject_frustum(rig: CameraRig, frustum: FrustumGrid) -> np.ndarray:
    """Lift (u, v, d) frustum samples back to ego-frame 3-D points.

    Inverse of project_points up to the depth scaling: the camera ray for
    pixel (u, v) is K^-1 (u, v, 1), stretched to depth d, then moved from
    the camera frame to ego.
    """
    det = np.linalg.det(rig.intrinsics)
    if abs(det) < 1e-12:
        raise ValueError("singular intrinsics cannot be unprojected")
    k_inv = np.linalg.inv(rig.intrinsics)
    s = frustum.samples
    homog = np.column_stack([s[:, 0], s[:, 1], np.ones(len(s))])
    cam = (homog @ k_inv.T) * s[:, 2:3]
    return (cam - rig.translation) @ rig.rotation


def transform_ego(points: np.ndarray, src: EgoPose, dst: EgoPose) -> np.ndarray:
    """Re-express points given in the src ego frame in the dst ego frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = dst.rotation.T @ src.rotation
    shift = dst.rotation.T @ (src.translation - dst.translation)
    return points @ rot.T + shift
