"""Bistatic range geometry: range ellipses, their intersections, and
least-squares location estimates from sets of bistatic ranges.

All coordinates are metres in a 2D plane.  TRP indices are zero-based
internally; :func:`mtloc.scene.trp_of` converts the one-based convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

_EPS = 1e-12


class DegenerateGeometry(ValueError):
    """A range does not exceed its focal distance, so the ellipse is empty or a segment."""


class IdenticalTrp(ValueError):
    """Two ellipses share both foci and the same range (a continuum of solutions)."""


class SingularGeometry(ValueError):
    """The normal matrix of a range fit is rank deficient."""


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Trp:
    """A transmitter-receiver pair."""

    index: int
    tx: Point2
    rx: Point2

    def __post_init__(self):
        object.__setattr__(self, "tx", Point2(float(self.tx[0]), float(self.tx[1])))
        object.__setattr__(self, "rx", Point2(float(self.rx[0]), float(self.rx[1])))

    @property
    def focal_distance(self) -> float:
        return math.dist(self.tx, self.rx)

    def swapped(self) -> "Trp":
        return Trp(self.index, self.rx, self.tx)


@dataclass(frozen=True)
class RangeEllipse:
    trp: Trp
    r: float

    def check(self) -> None:
        if not np.isfinite(self.r) or self.r <= self.trp.focal_distance:
            raise DegenerateGeometry(
                f"range {self.r} does not exceed focal distance {self.trp.focal_distance}"
            )


@dataclass(frozen=True)
class LocationEstimate:
    point: Point2
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    residual_norm: float = 0.0


def bistatic_range(trp: Trp, p) -> float:
    """Path length TX -> p -> RX."""
    return math.dist(p, trp.rx) + math.dist(p, trp.tx)


def ip1_length(trp: Trp, target, scatterer) -> float:
    """Path length TX -> target -> scatterer -> RX."""
    return math.dist(trp.tx, target) + math.dist(target, scatterer) + math.dist(scatterer, trp.rx)


def ip2_length(trp: Trp, target, scatterer) -> float:
    """Path length TX -> scatterer -> target -> RX."""
    return math.dist(trp.tx, scatterer) + math.dist(scatterer, target) + math.dist(target, trp.rx)


def bistatic_ranges(tx, rx, pts) -> np.ndarray:
    """Vectorised bistatic range; ``tx``, ``rx`` and ``pts`` broadcast over leading axes."""
    pts = np.asarray(pts, dtype=float)
    return np.linalg.norm(pts - np.asarray(tx, float), axis=-1) + np.linalg.norm(
        pts - np.asarray(rx, float), axis=-1
    )


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, _EPS)


def range_gradients(tx, rx, pts) -> np.ndarray:
    """Gradient of the bistatic range with respect to the target point."""
    pts = np.asarray(pts, dtype=float)
    return _unit(pts - np.asarray(tx, float)) + _unit(pts - np.asarray(rx, float))


def range_gradient(trp: Trp, p) -> np.ndarray:
    return range_gradients(trp.tx, trp.rx, np.asarray(p, float))


# ---------------------------------------------------------------------------
# Ellipse intersection
# ---------------------------------------------------------------------------


def _ellipse_params(f1, f2, r):
    """Centre, semi-axes and major-axis direction of the ellipses d(p,f1)+d(p,f2)=r."""
    f1 = np.asarray(f1, float)
    f2 = np.asarray(f2, float)
    r = np.asarray(r, float)
    centre = 0.5 * (f1 + f2)
    d = f2 - f1
    half_focal = 0.5 * np.linalg.norm(d, axis=-1)
    a = 0.5 * r
    b = np.sqrt(np.maximum(a * a - half_focal * half_focal, 0.0))
    # circles get an arbitrary major axis
    u = np.where(half_focal[..., None] > _EPS, _unit(d), np.array([1.0, 0.0]))
    return centre, a, b, u


def _quartic_coeffs(cA, aA, bA, uA, cB, aB, bB, uB):
    """Quartic in t = tan(theta/2) whose real roots parametrise A's points on B.

    A is parametrised as cA + aA cos(theta) uA + bA sin(theta) uA_perp and
    substituted into B's implicit equation.
    """
    vA = np.stack([-uA[..., 1], uA[..., 0]], axis=-1)
    vB = np.stack([-uB[..., 1], uB[..., 0]], axis=-1)
    d = cA - cB

    def proj(w, s):
        # coordinates along B axis w, scaled by semi-axis s
        k0 = np.sum(d * w, -1) / s
        k1 = aA * np.sum(uA * w, -1) / s
        k2 = bA * np.sum(vA * w, -1) / s
        # k0 (1+t^2) + k1 (1-t^2) + 2 k2 t, highest power first
        return np.stack([k0 - k1, 2 * k2, k0 + k1], axis=-1)

    def square(q):
        c2, c1, c0 = q[..., 0], q[..., 1], q[..., 2]
        return np.stack([c2 * c2, 2 * c2 * c1, c1 * c1 + 2 * c2 * c0, 2 * c1 * c0, c0 * c0], -1)

    coeffs = square(proj(uB, aB)) + square(proj(vB, bB))
    coeffs = coeffs - np.array([1.0, 0.0, 2.0, 0.0, 1.0])
    return coeffs


def _quartic_roots(coeffs: np.ndarray) -> np.ndarray:
    """Complex roots of each row of ``coeffs`` (n, 5); missing roots are nan."""
    n = coeffs.shape[0]
    out = np.full((n, 4), np.nan + 0j)
    scale = np.max(np.abs(coeffs), axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    full = np.abs(coeffs[:, 0]) > 1e-10 * scale
    if np.any(full):
        c = coeffs[full] / coeffs[full, :1]
        comp = np.zeros((c.shape[0], 4, 4))
        comp[:, 0, :] = -c[:, 1:]
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        out[full] = np.linalg.eigvals(comp)
    for row in np.flatnonzero(~full):
        rts = np.roots(coeffs[row] / scale[row])
        out[row, : len(rts)] = rts
    return out


def _polish(pts, fA1, fA2, rA, fB1, fB2, rB, steps=5):
    """Newton iterations on the two-range residual, vectorised over points."""
    p = pts.copy()
    for _ in range(steps):
        resA = bistatic_ranges(fA1, fA2, p) - rA
        resB = bistatic_ranges(fB1, fB2, p) - rB
        gA = range_gradients(fA1, fA2, p)
        gB = range_gradients(fB1, fB2, p)
        det = gA[:, 0] * gB[:, 1] - gA[:, 1] * gB[:, 0]
        ok = np.abs(det) > 1e-14
        det = np.where(ok, det, 1.0)
        dx = (gB[:, 1] * resA - gA[:, 1] * resB) / det
        dy = (-gB[:, 0] * resA + gA[:, 0] * resB) / det
        step = np.stack([dx, dy], -1)
        step[~ok] = 0.0
        # guard against wild steps from near-singular Jacobians
        big = np.linalg.norm(step, axis=1) > 0.5 * np.maximum(rA, rB)
        step[big] = 0.0
        p = p - step
    resA = bistatic_ranges(fA1, fA2, p) - rA
    resB = bistatic_ranges(fB1, fB2, p) - rB
    return p, np.maximum(np.abs(resA), np.abs(resB))


def intersect_many(fA1, fA2, rA, fB1, fB2, rB, tol: float = 1e-9):
    """Intersect ellipse pairs in bulk.

    Arrays of foci have shape (n, 2); ranges have shape (n,).  Pairs whose
    ranges do not exceed the focal distance yield nothing.

    Returns ``(points, pair_index)`` with points of shape (k, 2).
    """
    fA1, fA2, fB1, fB2 = (np.atleast_2d(np.asarray(v, float)) for v in (fA1, fA2, fB1, fB2))
    rA = np.atleast_1d(np.asarray(rA, float))
    rB = np.atleast_1d(np.asarray(rB, float))
    n = rA.shape[0]
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    valid = (rA > np.linalg.norm(fA2 - fA1, axis=1) + _EPS) & (
        rB > np.linalg.norm(fB2 - fB1, axis=1) + _EPS
    )
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    fA1, fA2, rA, fB1, fB2, rB = fA1[idx], fA2[idx], rA[idx], fB1[idx], fB2[idx], rB[idx]

    cA, aA, bA, uA = _ellipse_params(fA1, fA2, rA)
    cB, aB, bB, uB = _ellipse_params(fB1, fB2, rB)
    roots = _quartic_roots(_quartic_coeffs(cA, aA, bA, uA, cB, aB, bB, uB))
    t = roots.real
    near_real = np.isfinite(t) & (np.abs(roots.imag) <= 1e-3 * (1 + np.abs(t)))
    theta = 2 * np.arctan(np.where(near_real, t, 0.0))
    # theta = pi maps to t = inf and is never a root of the quartic; test it directly
    theta = np.concatenate([theta, np.full((len(idx), 1), np.pi)], axis=1)
    keep = np.concatenate([near_real, np.ones((len(idx), 1), bool)], axis=1)

    vA = np.stack([-uA[:, 1], uA[:, 0]], -1)
    cos, sin = np.cos(theta)[..., None], np.sin(theta)[..., None]
    cand = cA[:, None, :] + aA[:, None, None] * cos * uA[:, None, :] + bA[:, None, None] * sin * vA[:, None, :]
    rows, cols = np.nonzero(keep)
    cand = cand[rows, cols]

    pts, err = _polish(cand, fA1[rows], fA2[rows], rA[rows], fB1[rows], fB2[rows], rB[rows])
    good = err <= tol
    pts, rows = pts[good], rows[good]

    merge = max(1e3 * tol, 1e-9)
    out_pts, out_idx = [], []
    last_row, accepted = -1, []
    for p, row in zip(pts, rows):
        if row != last_row:
            last_row, accepted = row, []
        if any(abs(p[0] - q[0]) <= merge and abs(p[1] - q[1]) <= merge for q in accepted):
            continue
        accepted.append(p)
        out_pts.append(p)
        out_idx.append(idx[row])
    if not out_pts:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    return np.array(out_pts), np.array(out_idx, dtype=int)


def _same_foci(a: Trp, b: Trp, tol: float) -> bool:
    def close(p, q):
        return math.dist(p, q) <= tol

    return (close(a.tx, b.tx) and close(a.rx, b.rx)) or (close(a.tx, b.rx) and close(a.rx, b.tx))


def _circle_circle(c1, r1, c2, r2, tol):
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    d = math.dist(c1, c2)
    if d > r1 + r2 + tol or d < abs(r1 - r2) - tol or d < _EPS:
        return []
    a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
    h2 = r1 * r1 - a * a
    h = math.sqrt(max(h2, 0.0))
    e = (c2 - c1) / d
    base = c1 + a * e
    perp = np.array([-e[1], e[0]])
    if h <= tol:
        return [base]
    return [base + h * perp, base - h * perp]


def ellipse_intersections(eA: RangeEllipse, eB: RangeEllipse, tol: float = 1e-9) -> list[Point2]:
    """All points lying on both range ellipses (at most four).

    Every returned point reproduces both ranges to within ``tol`` metres.
    """
    eA.check()
    eB.check()
    if _same_foci(eA.trp, eB.trp, 1e-12):
        if abs(eA.r - eB.r) <= tol:
            raise IdenticalTrp("ellipses coincide")
        return []
    if eA.trp.focal_distance < _EPS and eB.trp.focal_distance < _EPS:
        # monostatic pair: circles of radius r/2 about the co-located nodes
        pts = _circle_circle(eA.trp.tx, eA.r / 2, eB.trp.tx, eB.r / 2, tol)
        if len(pts) == 0:
            return []
        polished, err = _polish(
            np.array(pts),
            np.array([eA.trp.tx] * len(pts)), np.array([eA.trp.rx] * len(pts)), np.full(len(pts), eA.r),
            np.array([eB.trp.tx] * len(pts)), np.array([eB.trp.rx] * len(pts)), np.full(len(pts), eB.r),
        )
        return [Point2(float(p[0]), float(p[1])) for p, e in zip(polished, err) if e <= tol]
    pts, _ = intersect_many(
        [eA.trp.tx], [eA.trp.rx], [eA.r], [eB.trp.tx], [eB.trp.rx], [eB.r], tol=tol
    )
    return [Point2(float(p[0]), float(p[1])) for p in pts]


# ---------------------------------------------------------------------------
# Least-squares location estimate
# ---------------------------------------------------------------------------


def _range_and_jacobian(tx, rx, p):
    dT = p - tx
    dR = p - rx
    nT = np.sqrt(np.einsum("ij,ij->i", dT, dT))
    nR = np.sqrt(np.einsum("ij,ij->i", dR, dR))
    J = dT / np.maximum(nT, _EPS)[:, None] + dR / np.maximum(nR, _EPS)[:, None]
    return nT + nR, J


def _solve2(a, b, c, g0, g1):
    """Solve [[a, b], [b, c]] x = g for a symmetric 2x2 system."""
    det = a * c - b * b
    if not det > 0:
        return None
    return np.array([(c * g0 - b * g1) / det, (a * g1 - b * g0) / det])


def _cond2(a, b, c):
    """Condition number of the symmetric PSD matrix [[a, b], [b, c]]."""
    tr = a + c
    disc = math.sqrt(max((a - c) ** 2 + 4 * b * b, 0.0))
    lo = 0.5 * (tr - disc)
    return math.inf if lo <= 0 else 0.5 * (tr + disc) / lo


def _fit(tx, rx, r, init, sigma, max_iter=50, step_tol=1e-10, damping=1e-3, cond_max=1e10):
    """Levenberg-Marquardt on bistatic range residuals.  Arrays, no wrappers."""
    p = np.asarray(init, float).copy()
    pred, J = _range_and_jacobian(tx, rx, p)
    res = r - pred
    cost = float(res @ res)
    lam = damping
    for _ in range(max_iter):
        a, b, c = float(J[:, 0] @ J[:, 0]), float(J[:, 0] @ J[:, 1]), float(J[:, 1] @ J[:, 1])
        g = J.T @ res
        step = _solve2(a * (1 + lam) + 1e-12, b, c * (1 + lam) + 1e-12, g[0], g[1])
        if step is None:
            break
        trial = p + step
        pred_t, J_t = _range_and_jacobian(tx, rx, trial)
        res_t = r - pred_t
        cost_t = float(res_t @ res_t)
        small = math.hypot(step[0], step[1]) < step_tol
        if cost_t <= cost:
            p, res, cost, J = trial, res_t, cost_t, J_t
            lam = max(lam / 10, 1e-12)
            if small:
                break
        else:
            lam *= 10
            if lam > 1e12 or small:
                break
    a, b, c = float(J[:, 0] @ J[:, 0]), float(J[:, 0] @ J[:, 1]), float(J[:, 1] @ J[:, 1])
    if _cond2(a, b, c) > cond_max:
        raise SingularGeometry("normal matrix is rank deficient at the solution")
    det = a * c - b * b
    cov = (sigma * sigma / det) * np.array([[c, -b], [-b, a]])
    return p, cov, math.sqrt(cost)


def nls_estimate(ranges: Sequence[tuple[Trp, float]], init, sigma: float) -> LocationEstimate:
    """Least-squares target location from ``(trp, range)`` pairs.

    Covariance is ``sigma**2 (J^T J)^-1`` at the solution.
    """
    if len(ranges) < 2:
        raise ValueError("need at least two ranges")
    init = np.asarray(init, float)
    if not np.all(np.isfinite(init)):
        raise ValueError("initial point must be finite")
    tx = np.array([t.tx for t, _ in ranges])
    rx = np.array([t.rx for t, _ in ranges])
    r = np.array([float(v) for _, v in ranges])
    p, cov, rn = _fit(tx, rx, r, init, sigma)
    return LocationEstimate(Point2(float(p[0]), float(p[1])), cov, rn)


def range_residual(point, trp: Trp, r: float) -> float:
    """Candidate range minus the range predicted at the current estimate."""
    return float(r) - bistatic_range(trp, point)


def range_residual_std(estimate: LocationEstimate, trp: Trp, sigma: float) -> float:
    """First-order standard deviation of :func:`range_residual`.

    Measurement noise plus the estimate covariance projected on the range gradient.
    """
    g = range_gradient(trp, estimate.point)
    return math.sqrt(sigma * sigma + float(g @ estimate.covariance @ g))
