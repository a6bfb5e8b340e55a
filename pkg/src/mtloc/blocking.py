"""Blocking vectors and blocking-probability models.

A blocking vector ``k`` has one bit per TRP (TX index fastest) and is
physically realizable only when it factors as ``w (x) v`` for per-TX and
per-RX line-of-sight indicators.  Every model here answers one question:
how likely is an observed, possibly partial, vector at a query point.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .scene import Region


class InconsistentVector(ValueError):
    pass


class SingularCovariance(ValueError):
    pass


def q_function(x: float) -> float:
    """Upper tail of the standard normal."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


@dataclass(frozen=True)
class ErrorRates:
    rho01: float = 0.0  # DP present but not detected
    rho10: float = 0.0  # non-DP declared a DP

    def __post_init__(self):
        for r in (self.rho01, self.rho10):
            if not 0.0 <= r < 1.0:
                raise ValueError("error rates must lie in [0, 1)")

    @classmethod
    def from_delta(cls, delta: float) -> "ErrorRates":
        r = 2.0 * q_function(delta)
        return cls(r, r)


# ----------------------------------------------------------------------------
# vector algebra


def as_bits(k) -> np.ndarray:
    return np.asarray(k, dtype=np.uint8).reshape(-1)


def is_consistent(k, m_tx: int, m_rx: int):
    """Return ``(v, w)`` with ``k == kron(w, v)``, or ``None``."""
    k = as_bits(k)
    if len(k) != m_tx * m_rx:
        raise ValueError(f"expected {m_tx * m_rx} bits, got {len(k)}")
    K = k.reshape(m_rx, m_tx)
    if not K.any():
        return np.zeros(m_tx, np.uint8), np.zeros(m_rx, np.uint8)
    v = K.max(axis=0)
    w = K.max(axis=1)
    if np.array_equal(np.outer(w, v), K):
        return v, w
    return None


@lru_cache(maxsize=None)
def _consistent_table(m_tx: int, m_rx: int) -> np.ndarray:
    rows = [np.zeros(m_tx * m_rx, np.uint8)]
    for w in itertools.product((0, 1), repeat=m_rx):
        if not any(w):
            continue
        for v in itertools.product((0, 1), repeat=m_tx):
            if any(v):
                rows.append(np.kron(np.array(w, np.uint8), np.array(v, np.uint8)))
    out = np.array(rows, np.uint8)
    out.setflags(write=False)
    return out


def consistent_set(m_tx: int, m_rx: int) -> np.ndarray:
    """All realizable vectors, all-zero first; shape (n, I)."""
    if m_tx < 1 or m_rx < 1:
        raise ValueError("need at least one TX and one RX")
    return _consistent_table(m_tx, m_rx)


def consistent_set_size(m_tx: int, m_rx: int) -> int:
    return (2**m_tx - 1) * (2**m_rx - 1) + 1


@lru_cache(maxsize=4096)
def _partial_table(m_tx: int, m_rx: int, cols: tuple) -> np.ndarray:
    full = _consistent_table(m_tx, m_rx)
    out = np.unique(full[:, list(cols)], axis=0) if cols else np.zeros((1, 0), np.uint8)
    out.setflags(write=False)
    return out


def partial_consistent_set(m_tx: int, m_rx: int, cols: Sequence[int]) -> np.ndarray:
    """Restrictions of the realizable vectors to the TRPs ``cols`` (zero-based)."""
    return _partial_table(m_tx, m_rx, tuple(int(c) for c in cols))


def is_partially_consistent(khat, m_tx, m_rx, cols) -> bool:
    table = partial_consistent_set(m_tx, m_rx, cols)
    return bool(np.any(np.all(table == as_bits(khat), axis=1)))


def hamming_neighbors_consistent(khat, m_tx: int, m_rx: int, cols: Optional[Sequence[int]] = None) -> np.ndarray:
    """Realizable (partial) vectors within Hamming distance 1 of ``khat``.

    ``cols`` lists the TRPs the bits of ``khat`` refer to; by default the
    first ``len(khat)`` TRPs.
    """
    khat = as_bits(khat)
    if cols is None:
        cols = range(len(khat))
    table = partial_consistent_set(m_tx, m_rx, cols)
    d = np.count_nonzero(table != khat, axis=1)
    return table[d <= 1]


def pattern_to_k_index(m_tx: int, m_rx: int) -> np.ndarray:
    """Lookup from a LoS pattern code to the row of ``consistent_set``.

    Pattern code: bit ``a`` is TX ``a`` in LoS, bit ``m_tx + b`` is RX ``b``.
    """
    return _pattern_lookup(m_tx, m_rx)


@lru_cache(maxsize=None)
def _pattern_lookup(m_tx, m_rx):
    table = _consistent_table(m_tx, m_rx)
    index = {row.tobytes(): n for n, row in enumerate(table)}
    n_codes = 2 ** (m_tx + m_rx)
    out = np.empty(n_codes, np.int64)
    for code in range(n_codes):
        v = np.array([(code >> a) & 1 for a in range(m_tx)], np.uint8)
        w = np.array([(code >> (m_tx + b)) & 1 for b in range(m_rx)], np.uint8)
        out[code] = index[np.kron(w, v).tobytes()]
    out.setflags(write=False)
    return out


# ----------------------------------------------------------------------------
# pmf container and the error model


@dataclass
class BlockingPmf:
    """Probabilities over a list of vectors (rows of ``vectors``).

    ``exact`` is False for Monte Carlo histograms and for the lower bound,
    which is not normalized.
    """

    vectors: np.ndarray
    probs: np.ndarray
    kind: str = "empirical"
    point: Optional[tuple] = None
    n_samples: int = 0
    exact: bool = False
    _marginals: dict = field(default_factory=dict, repr=False)

    def total(self) -> float:
        return float(self.probs.sum())

    def prob(self, k) -> float:
        hit = np.all(self.vectors == as_bits(k), axis=1)
        return float(self.probs[hit].sum())

    def marginal(self, cols: Sequence[int]):
        """Vectors restricted to ``cols`` with probabilities summed over the rest."""
        key = tuple(int(c) for c in cols)
        hit = self._marginals.get(key)
        if hit is None:
            sub = self.vectors[:, list(key)] if key else np.zeros((len(self.vectors), 0), np.uint8)
            uniq, inv = np.unique(sub, axis=0, return_inverse=True)
            p = np.bincount(inv.reshape(-1), weights=self.probs, minlength=len(uniq))
            hit = (uniq, p)
            self._marginals[key] = hit
        return hit


def prob_khat(khat, vectors, probs, err: ErrorRates) -> float:
    """Probability of observing ``khat`` given a pmf over true vectors.

    Only true vectors within Hamming distance 1 contribute; with none in
    range the result is 0.
    """
    khat = as_bits(khat)
    vectors = np.asarray(vectors)
    probs = np.asarray(probs, float)
    if vectors.shape[1] != len(khat):
        raise ValueError("khat and pmf vectors differ in length")
    if len(vectors) == 0:
        return 0.0
    diff = vectors != khat
    near = np.count_nonzero(diff, axis=1) <= 1
    if not near.any():
        return 0.0
    V = vectors[near].astype(bool)
    kh = khat.astype(bool)
    e01 = np.count_nonzero(~kh & V, axis=1)
    e11 = np.count_nonzero(kh & V, axis=1)
    e10 = np.count_nonzero(kh & ~V, axis=1)
    e00 = np.count_nonzero(~kh & ~V, axis=1)
    w = (
        err.rho01**e01 * (1 - err.rho01) ** e11
        * err.rho10**e10 * (1 - err.rho10) ** e00
    )
    return float(np.sum(w * probs[near]))


def neg_log(p: float) -> float:
    return math.inf if p <= 0.0 else -math.log(p)


# ----------------------------------------------------------------------------
# corridor geometry


def _corridors(target, txs, rxs, L):
    """(p, q, L) rectangles from the target to every TX, then every RX."""
    t = np.asarray(target, float)
    return [(np.asarray(n, float), t, float(L)) for n in list(txs) + list(rxs)]


def _in_corridor(pts, p, q, L) -> np.ndarray:
    d = q - p
    n = math.hypot(d[0], d[1])
    if n == 0:
        return np.zeros(len(pts), bool)
    u = d / n
    w = pts - p
    s = w @ u
    perp = np.abs(w[:, 0] * u[1] - w[:, 1] * u[0])
    return (s >= 0) & (s <= n) & (perp < L / 2)


def _in_corridors(pts, corridors) -> np.ndarray:
    """Membership of every point in every corridor at once; shape (n_pts, n_corridors)."""
    P = np.array([c[0] for c in corridors], float)
    Q = np.array([c[1] for c in corridors], float)
    Ls = np.array([c[2] for c in corridors], float)
    D = Q - P
    n = np.hypot(D[:, 0], D[:, 1])
    safe = np.where(n > 0, n, 1.0)
    U = D / safe[:, None]
    Nrm = np.column_stack([-U[:, 1], U[:, 0]])
    s = pts @ U.T - np.sum(P * U, axis=1)
    perp = np.abs(pts @ Nrm.T - np.sum(P * Nrm, axis=1))
    return (s >= 0) & (s <= n) & (perp < Ls / 2) & (n > 0)


def _corridor_bbox(corridors):
    xs, ys = [], []
    for p, q, L in corridors:
        d = q - p
        n = math.hypot(d[0], d[1])
        nrm = np.array([-d[1], d[0]]) / n * (L / 2) if n > 0 else np.zeros(2)
        for c in (p + nrm, p - nrm, q + nrm, q - nrm):
            xs.append(c[0])
            ys.append(c[1])
    return min(xs), max(xs), min(ys), max(ys)


def _clip_box(box, region: Optional[Region]):
    if region is None:
        return box
    x0, x1, y0, y1 = box
    return (max(x0, region.xmin), min(x1, region.xmax), max(y0, region.ymin), min(y1, region.ymax))


def corridor_union_area(corridors, n_area: int = 100_000, rng=None) -> float:
    """Monte Carlo area of the union of L x d rectangles."""
    corridors = [(np.asarray(p, float), np.asarray(q, float), float(L)) for p, q, L in corridors]
    if not corridors:
        return 0.0
    rng = np.random.default_rng(rng)
    x0, x1, y0, y1 = _corridor_bbox(corridors)
    box = (x1 - x0) * (y1 - y0)
    if box <= 0:
        return 0.0
    pts = np.column_stack([rng.uniform(x0, x1, n_area), rng.uniform(y0, y1, n_area)])
    inside = np.zeros(n_area, bool)
    for p, q, L in corridors:
        inside |= _in_corridor(pts, p, q, L)
    return box * inside.mean()


def _exclusion_mask(pts, centers, radius):
    C = np.asarray(centers, float).reshape(-1, 2)
    d2 = (pts[:, None, 0] - C[None, :, 0]) ** 2 + (pts[:, None, 1] - C[None, :, 1]) ** 2
    return np.all(d2 >= radius * radius, axis=1)


def prob_lower_bound(
    k, target, txs, rxs, lam: float, L: float,
    n_area: int = 100_000, rng=None,
    region: Optional[Region] = None, exclude: bool = False,
) -> float:
    """Product-form lower bound on P(k) under a PPP of corridor-blocking centres.

    LoS corridors must be empty; each blocked node's corridor, outside the
    LoS union, must hold at least one centre.  Overlaps between those
    NLoS pieces are ignored, which is what makes it a bound.  For the
    all-zero vector the bounds of every LoS pattern mapping to zero are
    summed.
    """
    txs = np.asarray(txs, float).reshape(-1, 2)
    rxs = np.asarray(rxs, float).reshape(-1, 2)
    m_tx, m_rx = len(txs), len(rxs)
    fac = is_consistent(k, m_tx, m_rx)
    if fac is None:
        raise InconsistentVector("lower bound requires a realizable vector")
    if lam == 0:
        return 1.0 if as_bits(k).all() else 0.0
    table = _LbTable(target, txs, rxs, lam, L, n_area, rng, region, exclude)
    v, w = fac
    if as_bits(k).any():
        return table.pattern_bound(np.concatenate([v, w]).astype(bool))
    total = 0.0
    for code in range(2 ** (m_tx + m_rx)):
        bits = np.array([(code >> j) & 1 for j in range(m_tx + m_rx)], bool)
        if not bits[:m_tx].any() or not bits[m_tx:].any():
            total += table.pattern_bound(bits)
    return total


class _LbTable:
    """Shared sample points so every area difference uses common random numbers."""

    def __init__(self, target, txs, rxs, lam, L, n_area, rng, region, exclude):
        self.lam = lam
        cors = _corridors(target, txs, rxs, L)
        x0, x1, y0, y1 = _clip_box(_corridor_bbox(cors), region)
        self.box = max(x1 - x0, 0.0) * max(y1 - y0, 0.0)
        rng = np.random.default_rng(rng)
        pts = np.column_stack([rng.uniform(x0, x1, n_area), rng.uniform(y0, y1, n_area)])
        self.valid = np.ones(n_area, bool)
        if exclude:
            self.valid = _exclusion_mask(pts, list(txs) + list(rxs) + [target], L / 2)
        self.member = np.column_stack([_in_corridor(pts, p, q, Lc) for p, q, Lc in cors]) & self.valid[:, None]
        self.n = n_area

    def area(self, mask) -> float:
        return self.box * np.count_nonzero(mask) / self.n

    def pattern_bound(self, los_bits) -> float:
        los_union = self.member[:, los_bits].any(axis=1)
        a_los = self.area(los_union)
        out = math.exp(-self.lam * a_los)
        for j in np.flatnonzero(~los_bits):
            a_n = self.area(self.member[:, j] & ~los_union)
            out *= 1.0 - math.exp(-self.lam * a_n)
        return out


class FieldBank:
    """``n_samples`` independent PPP scatterer fields drawn once over a box.

    Any query point whose corridors lie inside the box can be evaluated
    against the same fields, so a grid of cells costs one draw.
    """

    def __init__(self, box, lam: float, n_samples: int, rng):
        x0, x1, y0, y1 = box
        self.n = n_samples
        area = max(x1 - x0, 0.0) * max(y1 - y0, 0.0)
        counts = rng.poisson(lam * area, n_samples) if lam > 0 else np.zeros(n_samples, int)
        total = int(counts.sum())
        self.pts = np.column_stack([rng.uniform(x0, x1, total), rng.uniform(y0, y1, total)])
        self.sid = np.repeat(np.arange(n_samples), counts)

    def patterns(self, target, txs, rxs, L: float, exclude: bool = True) -> np.ndarray:
        target = np.asarray(target, float)
        cors = _corridors(target, txs, rxs, L)
        full = (1 << len(cors)) - 1
        if len(self.pts) == 0:
            return np.full(self.n, full, np.int64)
        member = _in_corridors(self.pts, cors)
        hit = member.any(axis=1)
        member, pts, sid = member[hit], self.pts[hit], self.sid[hit]
        if exclude and len(pts):
            keep = _exclusion_mask(pts, list(txs) + list(rxs) + [target], L / 2)
            member, sid = member[keep], sid[keep]
        blocked = np.zeros((self.n, len(cors)), bool)
        rows, cols = np.nonzero(member)
        blocked[sid[rows], cols] = True
        return full - blocked.astype(np.int64) @ (1 << np.arange(len(cors), dtype=np.int64))


def sample_los_patterns(
    target, txs, rxs, lam: float, L: float, n_samples: int, rng,
    region: Optional[Region] = None, exclude: bool = True,
) -> np.ndarray:
    """LoS pattern codes of ``n_samples`` independent scatterer fields.

    Only centres inside the corridors matter, so the field is drawn on the
    corridor bounding box (clipped to ``region``).  With ``exclude`` the
    centres within L/2 of a node or the target are thinned away, matching
    scenes where nothing stands inside a scatterer.
    """
    txs = np.asarray(txs, float).reshape(-1, 2)
    rxs = np.asarray(rxs, float).reshape(-1, 2)
    cors = _corridors(np.asarray(target, float), txs, rxs, L)
    box = _clip_box(_corridor_bbox(cors), region)
    return FieldBank(box, lam, n_samples, rng).patterns(target, txs, rxs, L, exclude)


def empirical_pmf(
    target, txs, rxs, lam: float, L: float, n_samples: int, rng,
    region: Optional[Region] = None, exclude: bool = True,
) -> BlockingPmf:
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    txs = np.asarray(txs, float).reshape(-1, 2)
    rxs = np.asarray(rxs, float).reshape(-1, 2)
    m_tx, m_rx = len(txs), len(rxs)
    codes = sample_los_patterns(target, txs, rxs, lam, L, n_samples, rng, region, exclude)
    idx = pattern_to_k_index(m_tx, m_rx)[codes]
    table = consistent_set(m_tx, m_rx)
    probs = np.bincount(idx, minlength=len(table)) / n_samples
    return BlockingPmf(table, probs, "empirical", tuple(map(float, target)), n_samples, False)


# ----------------------------------------------------------------------------
# models used by the matching engine


class BlockingModel:
    """``neg_log_prob(khat, cols, point, err)`` is the blocking likelihood of
    partial vector ``khat`` over TRPs ``cols`` at ``point``.

    Models that enforce consistency make the algorithm branch on
    inconsistent partial vectors.
    """

    kind = "abstract"
    enforces_consistency = True
    m_tx = 0
    m_rx = 0

    def pmf_at(self, point) -> BlockingPmf:
        raise NotImplementedError

    def neg_log_prob(self, khat, cols, point, err: ErrorRates) -> float:
        vecs, probs = self.pmf_at(point).marginal(cols)
        return neg_log(prob_khat(khat, vecs, probs, err))


class _CellCache:
    """Evaluate a point function once per grid cell, at the cell centre."""

    def __init__(self, region: Optional[Region], resolution: float):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.region = region
        self.res = resolution
        self.store: dict = {}

    def key(self, point):
        x, y = float(point[0]), float(point[1])
        if self.region is not None:
            r = self.region
            x = min(max(x, r.xmin), r.xmax)
            y = min(max(y, r.ymin), r.ymax)
            ix = min(int((x - r.xmin) // self.res), max(int(math.ceil((r.xmax - r.xmin) / self.res)) - 1, 0))
            iy = min(int((y - r.ymin) // self.res), max(int(math.ceil((r.ymax - r.ymin) / self.res)) - 1, 0))
            return ix, iy
        return int(math.floor(x / self.res)), int(math.floor(y / self.res))

    def center(self, key):
        ix, iy = key
        if self.region is not None:
            return (self.region.xmin + (ix + 0.5) * self.res, self.region.ymin + (iy + 0.5) * self.res)
        return ((ix + 0.5) * self.res, (iy + 0.5) * self.res)


class EmpiricalModel(BlockingModel):
    """Monte Carlo pmf per grid cell under the PPP scatterer model.

    With a region, every cell is evaluated against one shared bank of
    scatterer fields drawn over the region; without one, each cell draws
    its own fields from a stream keyed by the cell.
    """

    kind = "empirical"

    def __init__(self, txs, rxs, lam, L, region: Optional[Region] = None, n_samples: int = 10_000,
                 resolution: float = 1.0, seed: int = 0, exclude: bool = True):
        self.txs = np.asarray(txs, float).reshape(-1, 2)
        self.rxs = np.asarray(rxs, float).reshape(-1, 2)
        self.m_tx, self.m_rx = len(self.txs), len(self.rxs)
        self.lam, self.L = lam, L
        self.n_samples = n_samples
        self.seed = seed
        self.exclude = exclude
        self.cells = _CellCache(region, resolution)
        self._bank = None
        self._table = consistent_set(self.m_tx, self.m_rx)
        self._lookup = pattern_to_k_index(self.m_tx, self.m_rx)

    def _cell_pmf(self, key) -> BlockingPmf:
        center = self.cells.center(key)
        region = self.cells.region
        if region is None:
            ss = np.random.SeedSequence([self.seed, key[0] & 0xFFFFFFFF, key[1] & 0xFFFFFFFF])
            return empirical_pmf(center, self.txs, self.rxs, self.lam, self.L, self.n_samples,
                                 np.random.default_rng(ss), None, self.exclude)
        if self._bank is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed]))
            box = (region.xmin, region.xmax, region.ymin, region.ymax)
            self._bank = FieldBank(box, self.lam, self.n_samples, rng)
        codes = self._bank.patterns(center, self.txs, self.rxs, self.L, self.exclude)
        probs = np.bincount(self._lookup[codes], minlength=len(self._table)) / self.n_samples
        return BlockingPmf(self._table, probs, "empirical", center, self.n_samples, False)

    def pmf_at(self, point) -> BlockingPmf:
        key = self.cells.key(point)
        pmf = self.cells.store.get(key)
        if pmf is None:
            pmf = self._cell_pmf(key)
            self.cells.store[key] = pmf
        return pmf


class LowerBoundModel(BlockingModel):
    """Analytic product-form bound per grid cell (not a normalized pmf)."""

    kind = "lower-bound"

    def __init__(self, txs, rxs, lam, L, region: Optional[Region] = None, n_area: int = 100_000,
                 resolution: float = 1.0, seed: int = 0, exclude: bool = True):
        self.txs = np.asarray(txs, float).reshape(-1, 2)
        self.rxs = np.asarray(rxs, float).reshape(-1, 2)
        self.m_tx, self.m_rx = len(self.txs), len(self.rxs)
        self.lam, self.L = lam, L
        self.n_area = n_area
        self.seed = seed
        self.exclude = exclude
        self.cells = _CellCache(region, resolution)

    def pmf_at(self, point) -> BlockingPmf:
        key = self.cells.key(point)
        pmf = self.cells.store.get(key)
        if pmf is None:
            ss = np.random.SeedSequence([self.seed, key[0] & 0xFFFFFFFF, key[1] & 0xFFFFFFFF])
            pmf = lower_bound_pmf(self.cells.center(key), self.txs, self.rxs, self.lam, self.L,
                                  self.n_area, np.random.default_rng(ss), self.cells.region, self.exclude)
            self.cells.store[key] = pmf
        return pmf


def lower_bound_pmf(target, txs, rxs, lam, L, n_area=100_000, rng=None, region=None, exclude=False) -> BlockingPmf:
    """Lower bound evaluated on every realizable vector, sharing one point set."""
    txs = np.asarray(txs, float).reshape(-1, 2)
    rxs = np.asarray(rxs, float).reshape(-1, 2)
    m_tx, m_rx = len(txs), len(rxs)
    table = consistent_set(m_tx, m_rx)
    probs = np.zeros(len(table))
    if lam == 0:
        probs[np.all(table == 1, axis=1)] = 1.0
    else:
        lb = _LbTable(target, txs, rxs, lam, L, n_area, rng, region, exclude)
        lookup = pattern_to_k_index(m_tx, m_rx)
        for code in range(2 ** (m_tx + m_rx)):
            bits = np.array([(code >> j) & 1 for j in range(m_tx + m_rx)], bool)
            probs[lookup[code]] += lb.pattern_bound(bits)
    return BlockingPmf(table, probs, "lower-bound", tuple(map(float, target)), n_area, False)


def p_los_ppp(lam: float, L: float, d: float) -> float:
    """LoS probability across distance ``d`` under the corridor model."""
    return math.exp(-lam * L * d)


def p_dp_icb(p_los: float, delta: float) -> float:
    """Probability a DP goes undetected: blocked, or lost to noise at the delta gate."""
    p_b = 1.0 - p_los**2
    return (1.0 - p_b) * 2.0 * q_function(delta) + p_b


class IcbModel(BlockingModel):
    """Independent, constant blocking: every DP is missing with probability ``p_dp``.

    The noise miss rate is already inside ``p_dp``, so no error model is
    applied on top, and any bit pattern is admissible.
    """

    kind = "icb"
    enforces_consistency = False

    def __init__(self, p_dp: float, m_tx: int, m_rx: int):
        if not 0.0 <= p_dp <= 1.0:
            raise ValueError("p_dp must be a probability")
        self.p_dp = p_dp
        self.m_tx, self.m_rx = m_tx, m_rx

    @classmethod
    def from_p_los(cls, p_los, delta, m_tx, m_rx) -> "IcbModel":
        if not 0.0 <= p_los <= 1.0:
            raise ValueError("p_los must be a probability")
        return cls(p_dp_icb(p_los, delta), m_tx, m_rx)

    def pmf_at(self, point=None) -> BlockingPmf:
        I = self.m_tx * self.m_rx
        vecs = np.array(list(itertools.product((0, 1), repeat=I)), np.uint8)
        ones = vecs.sum(axis=1)
        probs = (1 - self.p_dp) ** ones * self.p_dp ** (I - ones)
        return BlockingPmf(vecs, probs, "icb", None, 0, True)

    def neg_log_prob(self, khat, cols=None, point=None, err=None) -> float:
        khat = as_bits(khat)
        ones = int(khat.sum())
        zeros = len(khat) - ones
        return ones * neg_log(1 - self.p_dp) + zeros * neg_log(self.p_dp) if len(khat) else 0.0

    def dp_count_pmf(self) -> np.ndarray:
        I = self.m_tx * self.m_rx
        q = 1 - self.p_dp
        return np.array([math.comb(I, n) * q**n * self.p_dp ** (I - n) for n in range(I + 1)])


# ----------------------------------------------------------------------------
# second-order statistics


@dataclass
class GridStats:
    region: Region
    resolution: float
    means: np.ndarray  # (nx, ny, I)
    covs: np.ndarray  # (nx, ny, I, I)

    @property
    def shape(self):
        return self.means.shape[:2]

    def cell(self, point):
        r = self.region
        nx, ny = self.shape
        x = min(max(float(point[0]), r.xmin), r.xmax)
        y = min(max(float(point[1]), r.ymin), r.ymax)
        ix = min(int((x - r.xmin) // self.resolution), nx - 1)
        iy = min(int((y - r.ymin) // self.resolution), ny - 1)
        return self.means[ix, iy], self.covs[ix, iy]

    def to_dict(self) -> dict:
        return {
            "schema": "mtloc.gridstats/1",
            "region": self.region.as_list(),
            "resolution": self.resolution,
            "shape": list(self.means.shape),
            "means": self.means.round(12).tolist(),
            "covs": self.covs.round(12).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridStats":
        if d.get("schema") != "mtloc.gridstats/1":
            raise ValueError("not a grid statistics document")
        return cls(Region(*d["region"]), float(d["resolution"]),
                   np.array(d["means"], float), np.array(d["covs"], float))

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "GridStats":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def grid_cells(region: Region, resolution: float):
    nx = max(int(math.ceil((region.xmax - region.xmin) / resolution - 1e-9)), 1)
    ny = max(int(math.ceil((region.ymax - region.ymin) / resolution - 1e-9)), 1)
    xs = region.xmin + (np.arange(nx) + 0.5) * resolution
    ys = region.ymin + (np.arange(ny) + 0.5) * resolution
    return xs, ys


def grid_precompute(region: Region, resolution: float, txs, rxs, lam, L, n_samples, rng,
                    exclude: bool = True) -> GridStats:
    """Sample mean and (population) covariance of ``k`` at every cell centre."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    txs = np.asarray(txs, float).reshape(-1, 2)
    rxs = np.asarray(rxs, float).reshape(-1, 2)
    m_tx, m_rx = len(txs), len(rxs)
    I = m_tx * m_rx
    xs, ys = grid_cells(region, resolution)
    table = consistent_set(m_tx, m_rx).astype(float)
    lookup = pattern_to_k_index(m_tx, m_rx)
    means = np.zeros((len(xs), len(ys), I))
    covs = np.zeros((len(xs), len(ys), I, I))
    for a, x in enumerate(xs):
        for b, y in enumerate(ys):
            codes = sample_los_patterns((x, y), txs, rxs, lam, L, n_samples, rng, region, exclude)
            p = np.bincount(lookup[codes], minlength=len(table)) / n_samples
            m = p @ table
            means[a, b] = m
            covs[a, b] = (table * p[:, None]).T @ table - np.outer(m, m)
    return GridStats(region, resolution, means, covs)


def mahalanobis_score(khat, mean, cov, eps: float = 1e-6) -> float:
    khat = np.asarray(khat, float).reshape(-1)
    d = khat - np.asarray(mean, float)
    C = np.asarray(cov, float) + eps * np.eye(len(d))
    try:
        sol = np.linalg.solve(C, d)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance not invertible") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularCovariance("covariance not invertible")
    return float(math.sqrt(max(d @ sol, 0.0)))


class MahalanobisModel(BlockingModel):
    """Second-order variant: the score replaces the blocking likelihood."""

    kind = "grid"
    enforces_consistency = False

    def __init__(self, stats: GridStats, m_tx: int, m_rx: int, eps: float = 1e-6):
        self.stats = stats
        self.m_tx, self.m_rx = m_tx, m_rx
        self.eps = eps

    def neg_log_prob(self, khat, cols, point, err=None) -> float:
        m, C = self.stats.cell(point)
        cols = list(cols)
        if not cols:
            return 0.0
        return mahalanobis_score(khat, m[cols], C[np.ix_(cols, cols)], self.eps)
