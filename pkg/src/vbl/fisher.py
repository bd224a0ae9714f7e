"""Fisher information assembly and the translation-invariant position error
bound (relative SPEB) with its gradient in the bit allocation.

The information matrix over all stacked positions (features first, vehicles
last) is a weighted Gram matrix

    J(b) = sum_m w_m(b_m) r_m r_m^T,

where r_m is the fixed Jacobian row of scalar measurement m and w_m the
information weight 1 / (sigma'^2 + W^2 / (2^b - 1)^2).  Global translations
are unobservable, so J always annihilates the three translation vectors; the
bound projects them out with a fixed orthonormal complement U and evaluates

    P_r(b) = trace( (U^T J(b) U)^{-1} ).

Because U is a fixed function of the node counts, P_r is smooth in b and

    dP_r/db_m = -w_m'(b_m) * || M^{-1} U^T r_m ||^2,   M = U^T J U,

which every allocator here relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.linalg.lapack import dpocon

from .errors import (CheiralityError, DegenerateGeometryError,
                     UnobservableConfigurationError)
from .measurement import (information_weight, information_weight_slope,
                          projection_position_gradients, true_distance)
from .scene import MIN_DEPTH, Scenario, build_calibration_matrix

# Reject bounds whose projected information matrix is worse conditioned than this.
CONDITION_LIMIT = 1e12


def validate_allocation(scenario: Scenario, bits) -> np.ndarray:
    """Return the allocation as a float vector after shape and sign checks."""
    arr = np.asarray(bits, dtype=float)
    if arr.shape != (scenario.allocation_dimension,):
        raise ValueError(f"allocation must have length {scenario.allocation_dimension}, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("allocation entries must be finite")
    if np.any(arr < 0):
        raise ValueError("allocation entries must be nonnegative")
    return arr


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """Orthonormal split of position space into translations and the rest.

    ``u_tilde`` holds the three normalized translation directions;
    ``u`` spans their orthogonal complement.  Both depend only on the node
    count, never on the allocation, so the bound stays smooth in the bits.
    """

    u_tilde: np.ndarray
    u: np.ndarray


def projection_basis(n_features: int, n_vehicles: int) -> ProjectionBasis:
    """Deterministic basis for ``n_features + n_vehicles`` stacked 3D nodes.

    The translation directions are (1_n kron I_3) / sqrt(n).  The complement
    is built from a Householder reflector H that maps e_1 to 1_n / sqrt(n):
    its remaining columns are an orthonormal basis of the complement of the
    all-ones direction, and their Kronecker product with I_3 spans the
    complement of the translations.
    """
    n = n_features + n_vehicles
    if n < 2:
        raise ValueError("need at least two nodes")
    ones = np.full(n, 1.0 / math.sqrt(n))
    reflect = ones.copy()
    reflect[0] -= 1.0
    house = np.eye(n) - 2.0 * np.outer(reflect, reflect) / (reflect @ reflect)
    u_tilde = np.kron(ones[:, None], np.eye(3))
    u = np.kron(house[:, 1:], np.eye(3))
    u_tilde.setflags(write=False)
    u.setflags(write=False)
    return ProjectionBasis(u_tilde=u_tilde, u=u)


class MeasurementGeometry:
    """Per-scenario cache of every scalar measurement's Jacobian row.

    Rows are ordered exactly like the bit allocation vector.  A camera row
    carries the pixel gradient g in the feature block and -g in the vehicle
    block; a range row carries the unit pair direction with opposite signs in
    the two vehicle blocks.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        n_f, n_v = scenario.n_features, scenario.n_vehicles
        dim = scenario.allocation_dimension
        n_cols = 3 * scenario.n_nodes
        calibration = build_calibration_matrix(scenario.intrinsics)
        positions = scenario.vehicle_positions()

        rows = np.zeros((dim, n_cols))
        for j, pose in enumerate(scenario.vehicles):
            grads = projection_position_gradients(calibration, pose.rotation,
                                                  pose.position, scenario.features)
            for k in (1, 2):
                for i in range(n_f):
                    r = rows[scenario.camera_bit_index(i, j, k)]
                    g = grads[i, k - 1]
                    r[3 * i:3 * i + 3] = g
                    r[3 * (n_f + j):3 * (n_f + j) + 3] = -g

        for i, j in scenario.vehicle_pairs():
            diff = positions[i] - positions[j]
            dist = np.linalg.norm(diff)
            if dist < MIN_DEPTH:
                raise DegenerateGeometryError(f"vehicles {i} and {j} coincide")
            direction = diff / dist
            r = rows[scenario.range_bit_index(i, j)]
            r[3 * (n_f + i):3 * (n_f + i) + 3] = direction
            r[3 * (n_f + j):3 * (n_f + j) + 3] = -direction

        rows.setflags(write=False)
        self.rows = rows
        self.sigma = scenario.noise_std_vector()
        self.half_range = scenario.half_range_vector()


def g_matrix(feature_index: int, vehicle_index: int, scenario: Scenario,
             bits) -> np.ndarray:
    """3x3 information contribution of one feature seen from one vehicle.

    Sum over the two pixel coordinates of the weighted outer products of the
    projection gradients; symmetric PSD with rank at most 2.
    """
    alloc = validate_allocation(scenario, bits)
    pose = scenario.vehicles[vehicle_index]
    calibration = build_calibration_matrix(scenario.intrinsics)
    grads = projection_position_gradients(calibration, pose.rotation, pose.position,
                                          scenario.features[feature_index])[0]
    out = np.zeros((3, 3))
    for k in (1, 2):
        idx = scenario.camera_bit_index(feature_index, vehicle_index, k)
        w = information_weight(scenario.sigma_pixel[idx],
                               scenario.pixel_half_range[k - 1], alloc[idx])
        if w > 0:
            g = grads[k - 1]
            out += w * np.outer(g, g)
    return out


def s_matrix(vehicle_a: int, vehicle_b: int, scenario: Scenario, bits) -> np.ndarray:
    """Rank-1 information contribution of one inter-vehicle range measurement."""
    alloc = validate_allocation(scenario, bits)
    pa = scenario.vehicles[vehicle_a].position
    pb = scenario.vehicles[vehicle_b].position
    dist = true_distance(pa, pb)
    if dist < MIN_DEPTH:
        raise DegenerateGeometryError(f"vehicles {vehicle_a} and {vehicle_b} coincide")
    direction = (pa - pb) / dist
    idx = scenario.range_bit_index(vehicle_a, vehicle_b)
    pair_pos = idx - 2 * scenario.n_features * scenario.n_vehicles
    w = information_weight(scenario.sigma_range[pair_pos],
                           scenario.distance_half_range, alloc[idx])
    return w * np.outer(direction, direction)


def assemble_fim(scenario: Scenario, bits) -> np.ndarray:
    """Full information matrix over all positions (features first).

    Zero allocation entries contribute nothing; the result is symmetric PSD
    and annihilates the three translation directions by construction.
    """
    alloc = validate_allocation(scenario, bits)
    geometry = MeasurementGeometry(scenario)
    weights = information_weight(geometry.sigma, geometry.half_range, alloc)
    fim = (geometry.rows * weights[:, None]).T @ geometry.rows
    return 0.5 * (fim + fim.T)


class SpebEvaluator:
    """Caches scenario geometry for repeated bound / gradient evaluations.

    Building the cache costs one pass over the measurement rows plus one
    projection onto the translation complement; evaluations afterwards are a
    single symmetric factorization each.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.geometry = MeasurementGeometry(scenario)
        self.basis = projection_basis(scenario.n_features, scenario.n_vehicles)
        # Measurement rows expressed in the translation-free coordinates.
        self.reduced_rows = np.ascontiguousarray(self.geometry.rows @ self.basis.u)
        self.sigma = self.geometry.sigma
        self.half_range = self.geometry.half_range
        self.dimension = scenario.allocation_dimension
        # Per-entry boundary of the provably convex region, log2(W / sigma').
        self.convex_thresholds = np.log2(np.maximum(self.half_range / self.sigma, 1e-300))

    # --- weights ----------------------------------------------------------
    def information_weights(self, bits) -> np.ndarray:
        return information_weight(self.sigma, self.half_range, bits)

    def weight_slopes(self, bits) -> np.ndarray:
        return information_weight_slope(self.sigma, self.half_range, bits)

    def weights_at(self, indices, values) -> np.ndarray:
        return information_weight(self.sigma[indices], self.half_range[indices], values)

    def slopes_at(self, indices, values) -> np.ndarray:
        return information_weight_slope(self.sigma[indices], self.half_range[indices],
                                        values)

    # --- projected information matrix --------------------------------------
    def reduced_information(self, weights: np.ndarray) -> np.ndarray:
        scaled = self.reduced_rows * np.sqrt(weights)[:, None]
        return scaled.T @ scaled

    def _factor_or_raise(self, reduced: np.ndarray):
        anorm = np.abs(reduced).sum(axis=0).max()
        try:
            cho = cho_factor(reduced, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise UnobservableConfigurationError(
                "projected information matrix is not positive definite; "
                "too few transmitted measurements or degenerate geometry") from exc
        rcond, info = dpocon(cho[0], anorm, uplo="L")
        if info != 0 or not np.isfinite(rcond) or rcond < 1.0 / CONDITION_LIMIT:
            raise UnobservableConfigurationError(
                f"projected information matrix condition exceeds {CONDITION_LIMIT:.0e}")
        return cho

    @staticmethod
    def _trace_inverse(cho) -> float:
        inv = cho_solve(cho, np.eye(cho[0].shape[0]), check_finite=False)
        return float(np.trace(inv))

    # --- public evaluations -------------------------------------------------
    def speb(self, bits, on_singular: str = "raise") -> float:
        """Trace of the inverse projected information matrix, in m^2.

        ``on_singular`` selects between raising UnobservableConfigurationError
        and returning +inf (the latter is what iterative allocators want).
        """
        alloc = validate_allocation(self.scenario, bits)
        reduced = self.reduced_information(self.information_weights(alloc))
        try:
            cho = self._factor_or_raise(reduced)
        except UnobservableConfigurationError:
            if on_singular == "inf":
                return math.inf
            raise
        return self._trace_inverse(cho)

    def speb_infinite_bits(self) -> float:
        """Bound with quantization removed (every weight at 1 / sigma'^2)."""
        reduced = self.reduced_information(1.0 / self.sigma ** 2)
        return self._trace_inverse(self._factor_or_raise(reduced))

    def speb_gradient(self, bits, on_singular: str = "raise"):
        """Bound and its gradient with respect to every bit count.

        Entries at zero bits have gradient zero: an absent measurement cannot
        be revived by a gradient step.
        """
        alloc = validate_allocation(self.scenario, bits)
        reduced = self.reduced_information(self.information_weights(alloc))
        try:
            cho = self._factor_or_raise(reduced)
        except UnobservableConfigurationError:
            if on_singular == "inf":
                return math.inf, np.zeros(self.dimension)
            raise
        value = self._trace_inverse(cho)
        solved = cho_solve(cho, self.reduced_rows.T, check_finite=False)
        column_sq = np.einsum("rm,rm->m", solved, solved)
        grad = -self.weight_slopes(alloc) * column_sq
        return value, grad


def relative_speb(scenario: Scenario, bits) -> float:
    """Translation-invariant squared-position error bound for ``bits``."""
    return SpebEvaluator(scenario).speb(bits)


def speb_gradient(scenario: Scenario, bits) -> np.ndarray:
    """Gradient of the bound with respect to the allocation (all entries <= 0)."""
    return SpebEvaluator(scenario).speb_gradient(bits)[1]


class SpebWorkspace:
    """Stateful companion to SpebEvaluator for allocators that edit a few
    entries at a time (annealing moves, row/column passes).

    ``trial`` prices a candidate edit through a low-rank Woodbury update of
    the current factorization; ``commit`` applies an edit to the cached
    projected matrix.  Singular states are reported as +inf, never raised.
    """

    def __init__(self, evaluator: SpebEvaluator, bits):
        self._ev = evaluator
        self.bits = validate_allocation(evaluator.scenario, bits).copy()
        self._weights = evaluator.information_weights(self.bits)
        self._reduced = evaluator.reduced_information(self._weights)
        self._cho = None
        self._trace = None
        self._singular = False

    def _ensure_factor(self):
        if self._cho is not None or self._singular:
            return
        try:
            self._cho = cho_factor(self._reduced, lower=True, check_finite=False)
        except LinAlgError:
            self._singular = True

    def speb(self) -> float:
        self._ensure_factor()
        if self._singular:
            return math.inf
        if self._trace is None:
            self._trace = SpebEvaluator._trace_inverse(self._cho)
            if not np.isfinite(self._trace) or self._trace <= 0:
                self._singular = True
                return math.inf
        return self._trace

    def _full_trial(self, indices, values) -> float:
        weights = self._weights.copy()
        weights[indices] = self._ev.weights_at(indices, values)
        reduced = self._ev.reduced_information(weights)
        try:
            cho = cho_factor(reduced, lower=True, check_finite=False)
        except LinAlgError:
            return math.inf
        trace = SpebEvaluator._trace_inverse(cho)
        if not np.isfinite(trace) or trace <= 0:
            return math.inf
        return trace

    def trial(self, indices, values) -> float:
        """Bound after setting ``bits[indices] = values``, without committing."""
        indices = np.asarray(indices, dtype=np.intp)
        values = np.asarray(values, dtype=float)
        current = self.speb()
        if not np.isfinite(current):
            return self._full_trial(indices, values)
        delta = self._ev.weights_at(indices, values) - self._weights[indices]
        active = np.abs(delta) > 0
        if not np.any(active):
            return current
        idx = indices[active]
        dw = delta[active]
        q = self._ev.reduced_rows[idx]
        solved = cho_solve(self._cho, q.T, check_finite=False)
        capacitance = np.diag(1.0 / dw) + q @ solved
        gram = solved.T @ solved
        try:
            correction = np.trace(np.linalg.solve(capacitance, gram))
        except np.linalg.LinAlgError:
            return self._full_trial(indices, values)
        candidate = current - correction
        # A PSD update can only push the bound through zero when the new
        # matrix lost rank; fall back to an exact rebuild in that case.
        if not np.isfinite(candidate) or candidate <= 0:
            return self._full_trial(indices, values)
        return candidate

    def commit(self, indices, values) -> None:
        """Apply ``bits[indices] = values`` to the cached state."""
        indices = np.asarray(indices, dtype=np.intp)
        values = np.asarray(values, dtype=float)
        new_w = self._ev.weights_at(indices, values)
        delta = new_w - self._weights[indices]
        self.bits[indices] = values
        self._weights[indices] = new_w
        active = np.abs(delta) > 0
        if np.any(active):
            q = self._ev.reduced_rows[indices[active]]
            self._reduced += (q * delta[active][:, None]).T @ q
            self._cho = None
            self._trace = None
            self._singular = False

    def gradient_components(self, indices) -> np.ndarray:
        """Bound gradient restricted to ``indices`` at the current bits."""
        indices = np.asarray(indices, dtype=np.intp)
        self._ensure_factor()
        if self._singular:
            raise UnobservableConfigurationError("gradient undefined: singular state")
        q = self._ev.reduced_rows[indices]
        solved = cho_solve(self._cho, q.T, check_finite=False)
        column_sq = np.einsum("rk,rk->k", solved, solved)
        slopes = self._ev.slopes_at(indices, self.bits[indices])
        return -slopes * column_sq
