"""Projection and range models, the randomized uniform quantizer, and the
combined observation + quantization noise variance.

Every operation is pure given an explicit random generator; callers own their
generators, so independent streams can run in parallel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import CheiralityError
from .scene import MIN_DEPTH, Scenario, VehiclePose, build_calibration_matrix

_log = logging.getLogger(__name__)

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class PixelObservation:
    """Quantized pixel coordinates of one feature seen from one vehicle.

    A coordinate whose bit count is zero is not transmitted; its entry in
    ``coords`` is NaN and the matching ``bits`` entry is 0.
    """

    feature_index: int
    vehicle_index: int
    coords: tuple[float, float]
    bits: tuple[int, int]


@dataclass(frozen=True)
class RangeObservation:
    """Quantized distance measurement between a vehicle pair (i < j)."""

    pair: tuple[int, int]
    value: float
    bits: int


def project(point, pose: VehiclePose, calibration: np.ndarray) -> np.ndarray:
    """Noiseless pixel coordinates of ``point`` seen from ``pose``.

    Computes u = K R^T (p - x) and returns (u1/u3, u2/u3); u3 is the depth
    along the optical axis and must exceed ``MIN_DEPTH``.
    """
    point = np.asarray(point, dtype=float)
    u = calibration @ (pose.rotation.T @ (point - pose.position))
    depth = u[2]
    if depth <= MIN_DEPTH:
        raise CheiralityError(f"point at depth {depth:.3e} m is not in front of the camera")
    return u[:2] / depth


def true_distance(a, b) -> float:
    """Euclidean distance between two positions."""
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def projection_position_gradients(calibration: np.ndarray, rotation: np.ndarray,
                                  vehicle_position: np.ndarray,
                                  points: np.ndarray) -> np.ndarray:
    """Gradients of both pixel coordinates with respect to the observed point.

    For each point p the pixel coordinate is y_k = v_k.(p - x) / v_3.(p - x)
    with v_1, v_2, v_3 the rows of ``calibration @ rotation.T``, so

        d y_k / d p = (depth * v_k - (v_k.(p - x)) * v_3) / depth^2 .

    Returns an (n, 2, 3) array; the gradient with respect to the vehicle
    position is the negative of each row.  Raises CheiralityError if any point
    has depth <= MIN_DEPTH.
    """
    rows = calibration @ rotation.T
    diff = np.atleast_2d(np.asarray(points, dtype=float)) - vehicle_position
    depth = diff @ rows[2]
    if np.any(depth <= MIN_DEPTH):
        raise CheiralityError("point(s) not in front of the camera")
    depth_col = depth[:, None]
    out = np.empty((diff.shape[0], 2, 3))
    for k in (0, 1):
        out[:, k, :] = (depth_col * rows[k] - (diff @ rows[k])[:, None] * rows[2]) / depth_col ** 2
    return out


def quantization_step(half_range: float, bits: int) -> float:
    """Grid spacing of a ``bits``-bit uniform quantizer over [0, 2*half_range]."""
    return 2.0 * half_range / (2 ** bits - 1)


def quantize(x: float, half_range: float, bits: int, rng: np.random.Generator) -> float:
    """Randomized rounding of ``x`` onto the uniform grid over [0, 2*half_range].

    With grid spacing D and n = floor(x / D), returns n*D with probability
    1 - (x - n*D)/D and (n+1)*D otherwise, which makes the output an unbiased
    estimate of the input.  Inputs outside [0, 2*half_range] are clamped to the
    boundary first (logged at debug level).
    """
    if bits != int(bits) or bits < 1:
        raise ValueError(f"bits must be a positive integer, got {bits}")
    bits = int(bits)
    if half_range <= 0:
        raise ValueError("half_range must be strictly positive")
    hi = 2.0 * half_range
    if x < 0.0 or x > hi:
        _log.debug("quantizer input %.6g clamped to [0, %.6g]", x, hi)
        x = min(max(x, 0.0), hi)
    step = quantization_step(half_range, bits)
    pos = x / step
    n = math.floor(pos)
    p_up = min(max(pos - n, 0.0), 1.0)
    if rng.random() < p_up:
        n += 1
    return n * step


def effective_variance(sigma, half_range, bits):
    """Total variance of one measurement: observation noise plus quantization.

    sigma^2 + (half_range / (2^bits - 1))^2 for bits > 0; +inf for bits == 0,
    meaning the measurement is not transmitted and carries no information.
    ``bits`` may be any nonnegative real (the continuous relaxation used by
    the gradient-based allocators).  Accepts scalars or arrays.
    """
    sigma = np.asarray(sigma, dtype=float)
    half_range = np.asarray(half_range, dtype=float)
    bits = np.asarray(bits, dtype=float)
    if np.any(bits < 0):
        raise ValueError("bit counts must be nonnegative")
    with np.errstate(divide="ignore", over="ignore"):
        levels = np.expm1(bits * _LN2)
        quant_std = np.where(levels > 0, half_range / np.where(levels > 0, levels, 1.0), np.inf)
        out = sigma ** 2 + quant_std ** 2
    if out.ndim == 0:
        return float(out)
    return out


def information_weight(sigma, half_range, bits):
    """Fisher weight 1 / effective_variance, with the b = 0 limit mapped to 0.

    Computed as t^2 / (sigma^2 t^2 + W^2) with t = 2^b - 1, which is stable for
    both tiny and huge bit counts.
    """
    sigma = np.asarray(sigma, dtype=float)
    half_range = np.asarray(half_range, dtype=float)
    bits = np.asarray(bits, dtype=float)
    if np.any(bits < 0):
        raise ValueError("bit counts must be nonnegative")
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.expm1(bits * _LN2)
        denom = (sigma * t) ** 2 + half_range ** 2
        w = np.where(np.isfinite(denom), t ** 2 / denom, 1.0 / sigma ** 2)
    if w.ndim == 0:
        return float(w)
    return w


def information_weight_slope(sigma, half_range, bits):
    """d(information_weight)/d(bits); zero at b = 0 (absent measurement).

    Closed form 2 ln2 (t+1) t W^2 / (sigma^2 t^2 + W^2)^2 with t = 2^b - 1,
    which vanishes in both the b -> 0 and b -> inf limits.
    """
    sigma = np.asarray(sigma, dtype=float)
    half_range = np.asarray(half_range, dtype=float)
    bits = np.asarray(bits, dtype=float)
    if np.any(bits < 0):
        raise ValueError("bit counts must be nonnegative")
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.expm1(bits * _LN2)
        denom = ((sigma * t) ** 2 + half_range ** 2) ** 2
        slope = np.where(np.isfinite(denom),
                         2.0 * _LN2 * (t + 1.0) * t * half_range ** 2 / denom,
                         0.0)
    if slope.ndim == 0:
        return float(slope)
    return slope


def _validate_integer_bits(scenario: Scenario, bits) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.shape != (scenario.allocation_dimension,):
        raise ValueError(f"allocation must have length {scenario.allocation_dimension}, "
                         f"got shape {bits.shape}")
    as_int = np.asarray(np.rint(bits), dtype=np.int64)
    if np.any(np.abs(bits - as_int) > 0) or np.any(as_int < 0):
        raise ValueError("simulation requires integer, nonnegative bit counts")
    return as_int


def simulate_observation_set(scenario: Scenario, bits, rng: np.random.Generator):
    """Draw one full set of noisy, quantized observations.

    Per camera coordinate: projection + Gaussian(0, sigma'^2), clamped into
    [0, 2 W_k] (image coordinates already live there), then quantized with the
    allocated bits.  Per vehicle pair: distance + Gaussian(0, sigma'^2),
    clamped into [0, 2 W_3], quantized.  Entries with zero bits are omitted.

    Returns (pixel observations, range observations).
    """
    alloc = _validate_integer_bits(scenario, bits)
    calibration = build_calibration_matrix(scenario.intrinsics)
    w1, w2 = scenario.pixel_half_range
    half = (w1, w2)
    clamped = 0

    pixel_obs = []
    for i in range(scenario.n_features):
        for j, pose in enumerate(scenario.vehicles):
            pix = None
            coords = [math.nan, math.nan]
            pair_bits = [0, 0]
            for k in (1, 2):
                idx = scenario.camera_bit_index(i, j, k)
                b = int(alloc[idx])
                if b == 0:
                    continue
                if pix is None:
                    pix = project(scenario.features[i], pose, calibration)
                noisy = pix[k - 1] + rng.normal(0.0, scenario.sigma_pixel[idx])
                if noisy < 0.0 or noisy > 2.0 * half[k - 1]:
                    clamped += 1
                    noisy = min(max(noisy, 0.0), 2.0 * half[k - 1])
                coords[k - 1] = quantize(noisy, half[k - 1], b, rng)
                pair_bits[k - 1] = b
            if pix is not None:
                pixel_obs.append(PixelObservation(i, j, (coords[0], coords[1]),
                                                  (pair_bits[0], pair_bits[1])))

    range_obs = []
    w3 = scenario.distance_half_range
    positions = scenario.vehicle_positions()
    for (i, j), sigma in zip(scenario.vehicle_pairs(), scenario.sigma_range):
        b = int(alloc[scenario.range_bit_index(i, j)])
        if b == 0:
            continue
        noisy = true_distance(positions[i], positions[j]) + rng.normal(0.0, sigma)
        if noisy < 0.0 or noisy > 2.0 * w3:
            clamped += 1
            noisy = min(max(noisy, 0.0), 2.0 * w3)
        range_obs.append(RangeObservation((i, j), quantize(noisy, w3, b, rng), b))

    if clamped:
        _log.debug("%d observation(s) clamped to the quantizer range", clamped)
    return pixel_obs, range_obs
