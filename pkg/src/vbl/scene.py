"""World model: camera-equipped vehicles, feature points, and scenario presets.

Conventions
-----------
- World frame is right-handed, metres, z up.
- A vehicle pose is (position x_j, rotation R_j); the camera optical axis in
  world coordinates is the third column of R_j, and a point p is in front of
  the camera when that axis dotted with (p - x_j) exceeds ``MIN_DEPTH``.
- Pixel coordinates follow the usual image convention: origin at a corner,
  u along resolution_x, v along resolution_y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError

# Smallest camera-to-point depth (m) accepted as "in front of the camera".
MIN_DEPTH = 1e-6

# Orthonormality / determinant tolerance for rotation matrices.
ROTATION_TOL = 1e-9


def _frozen_array(values, shape, name):
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Physical camera parameters; lengths in mm, image sizes in pixels.

    ``principal_point`` defaults to the image centre and ``skew`` to zero.
    """

    focal_length: float
    sensor_width: float
    sensor_height: float
    resolution_x: float
    resolution_y: float
    skew: float = 0.0
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("focal_length", "sensor_width", "sensor_height",
                     "resolution_x", "resolution_y"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not np.isfinite(self.skew):
            raise ValueError("skew must be finite")
        if self.principal_point is None:
            centre = (self.resolution_x / 2.0, self.resolution_y / 2.0)
            object.__setattr__(self, "principal_point", centre)
        else:
            cx, cy = self.principal_point
            if not (np.isfinite(cx) and np.isfinite(cy)):
                raise ValueError("principal_point must be finite")
            object.__setattr__(self, "principal_point", (float(cx), float(cy)))


def build_calibration_matrix(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Upper-triangular 3x3 pixel calibration matrix.

    Focal lengths in pixels are focal_length * resolution / sensor size per
    axis; the third row is [0, 0, 1] so the matrix maps camera coordinates to
    homogeneous pixel coordinates.
    """
    fx = intrinsics.focal_length * intrinsics.resolution_x / intrinsics.sensor_width
    fy = intrinsics.focal_length * intrinsics.resolution_y / intrinsics.sensor_height
    cx, cy = intrinsics.principal_point
    return np.array([
        [fx, intrinsics.skew, cx],
        [0.0, fy, cy],
        [0.0, 0.0, 1.0],
    ])


@dataclass(frozen=True, eq=False)
class VehiclePose:
    """Vehicle position (m) and world-from-camera rotation.

    The rotation must be orthonormal with determinant +1 to ``ROTATION_TOL``.
    """

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           _frozen_array(self.position, (3,), "position"))
        rot = _frozen_array(self.rotation, (3, 3), "rotation")
        defect = np.linalg.norm(rot.T @ rot - np.eye(3))
        if defect > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (defect {defect:.2e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant must be +1, got {det}")
        object.__setattr__(self, "rotation", rot)

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.rotation[:, 2]


def look_at_rotation(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation whose optical axis points from ``eye`` to ``target``.

    The camera vertical is resolved against ``up`` (world +z by default).
    Raises DegenerateGeometryError when the viewing direction is parallel to
    ``up`` or the two points coincide.
    """
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < MIN_DEPTH:
        raise DegenerateGeometryError("eye and target coincide")
    z_axis = forward / norm
    x_axis = np.cross(up, z_axis)
    x_norm = np.linalg.norm(x_axis)
    if x_norm < 1e-12:
        raise DegenerateGeometryError("viewing direction parallel to the up vector")
    x_axis /= x_norm
    y_axis = np.cross(z_axis, x_axis)
    return np.column_stack([x_axis, y_axis, z_axis])


@dataclass(frozen=True, eq=False)
class Scenario:
    """Ground-truth world shared by the bound, the optimizers and the harness.

    ``sigma_pixel`` holds one noise std (px) per camera measurement in the
    canonical bit order (see ``camera_bit_index``); ``sigma_range`` one std (m)
    per vehicle pair in lexicographic pair order.  ``pixel_half_range`` and
    ``distance_half_range`` are the quantizer half-ranges: a signal is assumed
    bounded to [0, 2W] before quantization.
    """

    vehicles: tuple[VehiclePose, ...]
    features: np.ndarray
    intrinsics: CameraIntrinsics
    sigma_pixel: np.ndarray
    sigma_range: np.ndarray
    pixel_half_range: tuple[float, float]
    distance_half_range: float
    seed: int | None = None

    def __post_init__(self):
        vehicles = tuple(self.vehicles)
        if len(vehicles) < 2:
            raise ValueError("need at least two vehicles")
        object.__setattr__(self, "vehicles", vehicles)

        feats = np.array(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[1] != 3 or feats.shape[0] < 1:
            raise ValueError("features must be an (n_features, 3) array")
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature coordinates must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

        n_cam = 2 * self.n_features * self.n_vehicles
        sp = np.array(self.sigma_pixel, dtype=float)
        if sp.shape != (n_cam,):
            raise ValueError(f"sigma_pixel must have shape ({n_cam},)")
        sr = np.array(self.sigma_range, dtype=float)
        if sr.shape != (self.n_pairs,):
            raise ValueError(f"sigma_range must have shape ({self.n_pairs},)")
        if np.any(sp <= 0) or np.any(sr <= 0):
            raise ValueError("noise stds must be strictly positive")
        sp.setflags(write=False)
        sr.setflags(write=False)
        object.__setattr__(self, "sigma_pixel", sp)
        object.__setattr__(self, "sigma_range", sr)

        w1, w2 = self.pixel_half_range
        if w1 <= 0 or w2 <= 0 or self.distance_half_range <= 0:
            raise ValueError("quantizer half-ranges must be strictly positive")
        object.__setattr__(self, "pixel_half_range", (float(w1), float(w2)))
        object.__setattr__(self, "distance_half_range", float(self.distance_half_range))

    # --- sizes -----------------------------------------------------------
    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.n_features + self.n_vehicles

    @property
    def n_pairs(self) -> int:
        return self.n_vehicles * (self.n_vehicles - 1) // 2

    @property
    def allocation_dimension(self) -> int:
        """Length of the bit allocation vector (camera block + range block)."""
        return 2 * self.n_features * self.n_vehicles + self.n_pairs

    # --- canonical measurement ordering ---------------------------------
    # Camera block first: coordinate k=1 then k=2, each ordered with the
    # feature index outermost and the vehicle index innermost.  Range block
    # last, vehicle pairs (i < j) in lexicographic order.
    def camera_bit_index(self, feature: int, vehicle: int, coord: int) -> int:
        if not (0 <= feature < self.n_features and 0 <= vehicle < self.n_vehicles):
            raise ValueError("feature/vehicle index out of range")
        if coord not in (1, 2):
            raise ValueError("coord must be 1 or 2")
        return ((coord - 1) * self.n_features * self.n_vehicles
                + feature * self.n_vehicles + vehicle)

    def range_bit_index(self, vehicle_a: int, vehicle_b: int) -> int:
        i, j = sorted((vehicle_a, vehicle_b))
        if i == j or not (0 <= i < j < self.n_vehicles):
            raise ValueError("invalid vehicle pair")
        # offset of pair (i, j) among lexicographic i < j pairs
        before = i * self.n_vehicles - i * (i + 1) // 2
        return 2 * self.n_features * self.n_vehicles + before + (j - i - 1)

    def vehicle_pairs(self) -> list[tuple[int, int]]:
        n = self.n_vehicles
        return [(i, j) for i in range(n) for j in range(i + 1, n)]

    # --- flattened per-measurement parameters ----------------------------
    def noise_std_vector(self) -> np.ndarray:
        """Measurement noise std per allocation entry, canonical order."""
        return np.concatenate([self.sigma_pixel, self.sigma_range])

    def half_range_vector(self) -> np.ndarray:
        """Quantizer half-range per allocation entry, canonical order."""
        n_half = self.n_features * self.n_vehicles
        w1, w2 = self.pixel_half_range
        return np.concatenate([
            np.full(n_half, w1),
            np.full(n_half, w2),
            np.full(self.n_pairs, self.distance_half_range),
        ])

    def vehicle_positions(self) -> np.ndarray:
        return np.array([v.position for v in self.vehicles])

    def rotations(self) -> np.ndarray:
        return np.array([v.rotation for v in self.vehicles])

    def stacked_positions(self) -> np.ndarray:
        """All node positions, features first, as one 3*(n_f+n_v) vector."""
        return np.concatenate([self.features.ravel(),
                               self.vehicle_positions().ravel()])


def make_scenario(vehicles, features, intrinsics, *, sigma_pixel=40.0,
                  sigma_range=4.0, pixel_half_range=None,
                  distance_half_range=250.0, seed=None) -> Scenario:
    """Build a Scenario, broadcasting scalar noise levels to full vectors.

    ``pixel_half_range`` defaults to half the image resolution per axis, so the
    image exactly spans [0, 2W] in each pixel coordinate.
    """
    vehicles = tuple(vehicles)
    features = np.asarray(features, dtype=float)
    n_v, n_f = len(vehicles), features.shape[0]
    n_cam = 2 * n_f * n_v
    n_pairs = n_v * (n_v - 1) // 2

    sp = np.asarray(sigma_pixel, dtype=float)
    if sp.ndim == 0:
        sp = np.full(n_cam, float(sp))
    sr = np.asarray(sigma_range, dtype=float)
    if sr.ndim == 0:
        sr = np.full(n_pairs, float(sr))
    if pixel_half_range is None:
        pixel_half_range = (intrinsics.resolution_x / 2.0,
                            intrinsics.resolution_y / 2.0)
    return Scenario(vehicles=vehicles, features=features, intrinsics=intrinsics,
                    sigma_pixel=sp, sigma_range=sr,
                    pixel_half_range=pixel_half_range,
                    distance_half_range=distance_half_range, seed=seed)


def cheirality_check(scenario: Scenario) -> bool:
    """True iff every feature is strictly in front of every camera.

    Uses the optical-axis depth with the ``MIN_DEPTH`` margin, i.e. exactly the
    denominator that the projection model divides by.
    """
    for pose in scenario.vehicles:
        depths = (scenario.features - pose.position) @ pose.optical_axis
        if np.any(depths <= MIN_DEPTH):
            return False
    return True


def _ring_of_vehicles(n_vehicles: int, radius: float) -> tuple[VehiclePose, ...]:
    angles = 2.0 * np.pi * np.arange(n_vehicles) / n_vehicles
    poses = []
    for a in angles:
        pos = np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        poses.append(VehiclePose(pos, look_at_rotation(pos, np.zeros(3))))
    return tuple(poses)


def reference_scenario(seed: int) -> Scenario:
    """Five vehicles on a 5 m circle, cameras aimed at the origin, and 70
    feature points drawn uniformly in the 5m x 5m x 2m cuboid centred there.

    Deterministic in ``seed``.  Long-lens intrinsics (600 mm on a 36 x 23.9 mm
    sensor at 3264 x 2488) and default noise levels: 40 px per pixel
    coordinate, 4 m per range, 250 m distance half-range.
    """
    rng = np.random.default_rng(seed)
    vehicles = _ring_of_vehicles(5, 5.0)
    features = rng.uniform([-2.5, -2.5, -1.0], [2.5, 2.5, 1.0], size=(70, 3))
    intrinsics = CameraIntrinsics(focal_length=600.0, sensor_width=36.0,
                                  sensor_height=23.9, resolution_x=3264,
                                  resolution_y=2488)
    return make_scenario(vehicles, features, intrinsics, seed=seed)


def toy_scenario(seed: int) -> Scenario:
    """Two vehicles facing each other across the origin plus three features.

    Small enough for brute-force and finite-difference oracles.  Wide-angle
    intrinsics (24 mm, 1024 x 768) keep simulated pixels inside the frame.
    """
    rng = np.random.default_rng(seed)
    vehicles = _ring_of_vehicles(2, 5.0)
    features = rng.uniform([-1.25, -1.25, -0.5], [1.25, 1.25, 0.5], size=(3, 3))
    intrinsics = CameraIntrinsics(focal_length=24.0, sensor_width=36.0,
                                  sensor_height=23.9, resolution_x=1024,
                                  resolution_y=768)
    return make_scenario(vehicles, features, intrinsics, seed=seed)
