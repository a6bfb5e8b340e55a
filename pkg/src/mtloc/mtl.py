"""Staged multi-target matching with a blocking-aware likelihood.

TRPs are processed one at a time.  Every pairwise ellipse intersection
seeds a candidate target; each later TRP either contributes the MPC that
best fits the current estimate or records a missing direct path.  The
resulting partial blocking vector is scored by a blocking model and
candidates whose blocking likelihood grows past ``mu`` are dropped.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .blocking import (
    BlockingModel,
    ErrorRates,
    IcbModel,
    as_bits,
    hamming_neighbors_consistent,
    is_partially_consistent,
    neg_log,
    prob_khat,
)
from .geometry import (
    LocationEstimate,
    Point2,
    SingularGeometry,
    Trp,
    _fit,
    bistatic_ranges,
    intersect_many,
    range_gradients,
)
from .signal import MpcSet

NLL_TOL = 1e-9
COND_MAX = 1e10


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AlgoParams:
    delta: float = 3.0
    mu: float = 12.0
    sigma: float = 0.01
    err: Optional[ErrorRates] = None  # default: both rates 2Q(delta)
    order: str = "descending"
    dedupe_radius: Optional[float] = None  # default 3 sigma
    seed: int = 0  # only used by the random order
    min_size: int = 3
    p3_as_printed: bool = False

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def rates(self) -> ErrorRates:
        return self.err if self.err is not None else ErrorRates.from_delta(self.delta)

    @property
    def radius(self) -> float:
        return 3.0 * self.sigma if self.dedupe_radius is None else self.dedupe_radius


@dataclass
class Matching:
    target_id: int
    entries: tuple  # sorted ((trp, mpc), ...)
    estimate: LocationEstimate
    khat: np.ndarray  # bits over processed TRPs, in processing order
    blocking_nll: float
    nll_trace: list = field(default_factory=list)
    gate_trace: list = field(default_factory=list)  # (trp, |L_E / sigma_LE|) per extension
    alive: bool = True
    p3: float = math.nan

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def point(self) -> np.ndarray:
        return np.asarray(self.estimate.point, float)

    def trps(self) -> list:
        return [i for i, _ in self.entries]

    def sort_key(self):
        return (self.p3, -self.size, self.entries)


@dataclass
class MtlResult:
    estimates: list  # list of (Point2, Matching)
    diagnostics: dict = field(default_factory=dict)
    pool: list = field(default_factory=list)  # every matching alive after the last stage

    @property
    def T_hat(self) -> int:
        return len(self.estimates)

    @property
    def points(self) -> np.ndarray:
        return np.array([p for p, _ in self.estimates], float).reshape(-1, 2)


# ----------------------------------------------------------------------------
# small public pieces


def processing_order(mpcs: MpcSet | Sequence[int], strategy: str = "descending", rng=None) -> tuple:
    """Zero-based TRP order.  Ties keep the natural TRP order."""
    counts = mpcs.counts if isinstance(mpcs, MpcSet) else tuple(mpcs)
    idx = list(range(len(counts)))
    if strategy == "identity":
        return tuple(idx)
    if strategy == "descending":
        return tuple(sorted(idx, key=lambda i: -counts[i]))
    if strategy in ("ascending", "fewest-mpcs-first"):
        return tuple(sorted(idx, key=lambda i: counts[i]))
    if strategy == "random":
        return tuple(int(i) for i in np.random.default_rng(rng).permutation(len(counts)))
    raise ValueError(f"unknown order strategy {strategy!r}")


def mu_of_phi(phi: int, p_dp: float, I: int) -> float:
    """Blocking threshold admitting matchings with at most ``phi`` missing DPs."""
    if p_dp >= 0.5:
        warnings.warn("p_dp >= 1/2: the threshold no longer grows with phi", RuntimeWarning)
    return -((I - phi) * math.log(1 - p_dp) + phi * math.log(p_dp))


def log_norm_const(sigma: float) -> float:
    return math.log(math.sqrt(2 * math.pi) * sigma)


def p3_terms(rss: float, n_entries: int, nll: float, sigma: float, as_printed: bool = False) -> float:
    """One target's contribution to the P3 objective.

    ``as_printed`` flips the sign of the Gaussian normalization term.
    """
    sign = -1.0 if as_printed else 1.0
    return rss / sigma**2 + sign * n_entries * log_norm_const(sigma) + nll


def full_khat(entries, I: int) -> np.ndarray:
    k = np.zeros(I, np.uint8)
    for i, _ in entries:
        k[i] = 1
    return k


def matching_rss(entries, point, trps: Sequence[Trp], mpcs: MpcSet) -> float:
    tx = np.array([trps[i].tx for i, _ in entries]).reshape(-1, 2)
    rx = np.array([trps[i].rx for i, _ in entries]).reshape(-1, 2)
    r = np.array([mpcs.ranges[i][j] for i, j in entries])
    if len(r) == 0:
        return 0.0
    res = r - bistatic_ranges(tx, rx, point)
    return float(res @ res)


def p3_objective(matchings: Sequence[Matching], trps, mpcs: MpcSet, model: BlockingModel,
                 sigma: float, err: Optional[ErrorRates] = None, as_printed: bool = False) -> float:
    """Sum of per-target P3 contributions, each at the matching's own estimate."""
    err = err or ErrorRates()
    I = len(trps)
    total = 0.0
    for m in matchings:
        rss = matching_rss(m.entries, m.point, trps, mpcs)
        nll = model.neg_log_prob(full_khat(m.entries, I), range(I), m.point, err)
        total += p3_terms(rss, m.size, nll, sigma, as_printed)
    return total


def vector_likelihood(matching: Matching, candidate, trps, mpcs: MpcSet, model: BlockingModel,
                      params: AlgoParams, cols: Sequence[int]) -> tuple:
    """``(|L_E / sigma_LE|, blocking nll)`` of extending ``matching`` by ``candidate``.

    ``candidate`` is ``(trp, mpc)`` or ``(trp, None)`` for a missing DP;
    ``cols`` are the TRPs already processed.
    """
    trp, j = candidate
    est = matching.estimate
    khat = np.append(matching.khat, 1 if j is not None else 0).astype(np.uint8)
    nll = model.neg_log_prob(khat, list(cols) + [trp], est.point, params.rates)
    if j is None:
        return math.inf, nll
    t = trps[trp]
    g = range_gradients(np.array([t.tx]), np.array([t.rx]), np.asarray(est.point))[0]
    s = math.sqrt(params.sigma**2 + g @ est.covariance @ g)
    r_pred = bistatic_ranges(np.array([t.tx]), np.array([t.rx]), np.asarray(est.point))[0]
    return abs((mpcs.ranges[trp][j] - r_pred) / s), nll


# ----------------------------------------------------------------------------
# survival rules


class _LikelihoodRule:
    """Drop a matching once its running blocking likelihood exceeds ``mu``."""

    def __init__(self, mu: float):
        self.mu = mu

    def alive(self, m: Matching, n_processed: int, I: int) -> bool:
        return m.blocking_nll <= self.mu + NLL_TOL

    final = alive


class _SizeRule:
    """Drop a matching once it can no longer reach ``I - phi`` entries."""

    def __init__(self, phi: int):
        self.phi = phi

    def alive(self, m: Matching, n_processed: int, I: int) -> bool:
        return m.size + (I - n_processed) >= I - self.phi

    def final(self, m: Matching, n_processed: int, I: int) -> bool:
        return m.size >= I - self.phi


# ----------------------------------------------------------------------------
# the engine


class _Engine:
    def __init__(self, mpcs: MpcSet, trps: Sequence[Trp], model: BlockingModel, params: AlgoParams, rule):
        self.mpcs = mpcs
        self.trps = list(trps)
        self.I = len(self.trps)
        self.model = model
        self.params = params
        self.rule = rule
        self.err = params.rates
        self.tx = np.array([t.tx for t in self.trps], float)
        self.rx = np.array([t.rx for t in self.trps], float)
        self.order = processing_order(mpcs, params.order, params.seed)
        self.next_id = 0
        self.diag = {
            "order": list(self.order),
            "T_hat": {},
            "pool_size": {},
            "n_gate_evals": 0,
            "n_nll_evals": 0,
            "n_seeds": 0,
            "N_max": max(mpcs.counts) if mpcs.counts else 0,
        }

    # -- helpers -------------------------------------------------------------
    def nll(self, khat, cols, point) -> float:
        self.diag["n_nll_evals"] += 1
        return self.model.neg_log_prob(khat, cols, point, self.err)

    def fit(self, entries, init):
        tx = self.tx[[i for i, _ in entries]]
        rx = self.rx[[i for i, _ in entries]]
        r = np.array([self.mpcs.ranges[i][j] for i, j in entries])
        p, cov, rn = _fit(tx, rx, r, init, self.params.sigma)
        return LocationEstimate(Point2(float(p[0]), float(p[1])), cov, rn)

    def new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    # -- seeds ----------------------------------------------------------------
    def seeds(self, u: int, s: int, cols: list) -> list:
        """Two-entry matchings from intersecting TRP ``u`` with TRP ``s``."""
        ru, rs = self.mpcs.ranges[u], self.mpcs.ranges[s]
        if len(ru) == 0 or len(rs) == 0:
            return []
        ju, js = np.meshgrid(np.arange(len(ru)), np.arange(len(rs)), indexing="ij")
        ju, js = ju.ravel(), js.ravel()
        n = len(ju)
        pts, pair = intersect_many(
            np.repeat(self.tx[u][None], n, 0), np.repeat(self.rx[u][None], n, 0), ru[ju],
            np.repeat(self.tx[s][None], n, 0), np.repeat(self.rx[s][None], n, 0), rs[js],
        )
        if len(pts) == 0:
            return []
        J = np.stack([
            range_gradients(self.tx[u], self.rx[u], pts),
            range_gradients(self.tx[s], self.rx[s], pts),
        ], axis=1)  # (k, 2, 2)
        A = np.einsum("kji,kjl->kil", J, J)
        svals = np.linalg.svd(A, compute_uv=False)
        ok = svals[:, -1] > svals[:, 0] / COND_MAX
        khat = np.array([1 if c in (u, s) else 0 for c in cols], np.uint8)
        sigma2 = self.params.sigma**2
        out = []
        for p, a, pi, good in zip(pts, A, pair, ok):
            if not good:
                continue  # tangent ellipses: no usable covariance
            self.diag["n_seeds"] += 1
            nll = self.nll(khat, cols, p)
            est = LocationEstimate(Point2(float(p[0]), float(p[1])), sigma2 * np.linalg.inv(a), 0.0)
            entries = tuple(sorted(((u, int(ju[pi])), (s, int(js[pi])))))
            m = Matching(self.new_id(), entries, est, khat.copy(), nll, [nll], [])
            if self.rule.alive(m, len(cols), self.I):
                out.append(m)
        return out

    # -- one stage ----------------------------------------------------------
    def gate_values(self, pool: list, s: int) -> np.ndarray:
        """|L_E / sigma_LE| of every MPC at TRP ``s`` for every matching."""
        r = self.mpcs.ranges[s]
        if not pool or len(r) == 0:
            return np.full((len(pool), len(r)), np.inf)
        P = np.array([m.point for m in pool])
        C = np.array([m.estimate.covariance for m in pool])
        g = range_gradients(self.tx[s], self.rx[s], P)
        var = self.params.sigma**2 + np.einsum("ki,kij,kj->k", g, C, g)
        pred = bistatic_ranges(self.tx[s], self.rx[s], P)
        self.diag["n_gate_evals"] += len(pool) * len(r)
        return np.abs(r[None, :] - pred[:, None]) / np.sqrt(var)[:, None]

    def extend(self, m: Matching, s: int, gates: np.ndarray, cols: list) -> list:
        """Children of ``m`` once TRP ``s`` is processed; ``cols`` includes ``s``."""
        prev_point = m.point
        best = int(np.argmin(gates)) if len(gates) else -1
        if best >= 0 and gates[best] <= self.params.delta:
            entries = tuple(sorted(m.entries + ((s, best),)))
            try:
                est = self.fit(entries, prev_point)
            except SingularGeometry:
                est = m.estimate
            khat = np.append(m.khat, 1).astype(np.uint8)
            gate_trace = m.gate_trace + [(s, float(gates[best]))]
        else:
            entries, est = m.entries, m.estimate
            khat = np.append(m.khat, 0).astype(np.uint8)
            gate_trace = list(m.gate_trace)

        children = []
        consistent = (not self.model.enforces_consistency
                      or is_partially_consistent(khat, self.model.m_tx, self.model.m_rx, cols))
        if consistent:
            nll = max(m.blocking_nll, self.nll(khat, cols, prev_point))
            children.append(Matching(m.target_id, entries, est, khat, nll, m.nll_trace + [nll], gate_trace))
            return children

        near = hamming_neighbors_consistent(khat, self.model.m_tx, self.model.m_rx, cols)
        weight = int(khat.sum())
        if len(near) == 0:
            return children  # no realizable ground truth nearby: not a target
        if np.any(near.sum(axis=1) > weight):
            # a DP is missing to noise; the matching itself stays as it is
            nll = max(m.blocking_nll, self.nll(khat, cols, prev_point))
            children.append(Matching(m.target_id, entries, est, khat, nll, m.nll_trace + [nll], gate_trace))
        for e in near[near.sum(axis=1) < weight]:
            pos = int(np.flatnonzero(e != khat)[0])
            drop = cols[pos]
            sub = tuple(x for x in entries if x[0] != drop)
            if len(sub) < 2:
                continue
            try:
                sub_est = self.fit(sub, est.point)
            except SingularGeometry:
                continue
            nll = max(m.blocking_nll, self.nll(e, cols, prev_point))
            trace = [g for g in gate_trace if g[0] != drop]
            children.append(Matching(m.target_id, sub, sub_est, e.astype(np.uint8).copy(), nll,
                                     m.nll_trace + [nll], trace))
        return children

    def merge(self, pool: list) -> list:
        """Collapse matchings with equal entries whose estimates coincide."""
        groups: dict = {}
        for m in pool:
            groups.setdefault(m.entries, []).append(m)
        out = []
        r2 = self.params.radius**2
        for entries in sorted(groups):
            group = sorted(groups[entries], key=lambda m: (m.blocking_nll, m.target_id))
            kept = []
            for m in group:
                if any(np.sum((m.point - k.point) ** 2) <= r2 for k in kept):
                    continue
                kept.append(m)
            out.extend(kept)
        return out

    def count_targets(self, pool: list) -> int:
        return len({m.target_id for m in pool if m.size >= 3})

    # -- driver -------------------------------------------------------------
    def run(self) -> list:
        if self.I < 3:
            raise ValueError("need at least three TRPs")
        z = self.order
        cols = [z[0], z[1]]
        pool = self.merge(self.seeds(z[0], z[1], cols))
        self.diag["T_hat"][2] = self.count_targets(pool)
        self.diag["pool_size"][2] = len(pool)
        for stage in range(2, self.I):
            s = z[stage]
            cols = cols + [s]
            gates = self.gate_values(pool, s)
            nxt = []
            for m, g in zip(pool, gates):
                for c in self.extend(m, s, g, cols):
                    if self.rule.alive(c, len(cols), self.I):
                        nxt.append(c)
            if stage < self.I - 1:
                # seeds at the last stage could never reach three entries
                for u in z[:stage]:
                    nxt.extend(self.seeds(u, s, cols))
            pool = self.merge(nxt)
            self.diag["T_hat"][stage + 1] = self.count_targets(pool)
            self.diag["pool_size"][stage + 1] = len(pool)
        return pool

    # -- final selection -----------------------------------------------------
    def score(self, pool: list) -> None:
        for m in pool:
            if math.isnan(m.p3):
                rss = matching_rss(m.entries, m.point, self.trps, self.mpcs)
                nll = self.model.neg_log_prob(full_khat(m.entries, self.I), range(self.I), m.point, self.err)
                m.p3 = p3_terms(rss, m.size, nll, self.params.sigma, self.params.p3_as_printed)

    def select(self, pool: list, final_rule=None) -> list:
        rule = final_rule or self.rule
        cand = [m for m in pool if m.size >= self.params.min_size and rule.final(m, self.I, self.I)]
        self.score(cand)
        best: dict = {}
        for m in cand:
            cur = best.get(m.target_id)
            if cur is None or m.sort_key() < cur.sort_key():
                best[m.target_id] = m
        accepted: list = []
        used = set()
        r2 = self.params.radius**2
        for m in sorted(best.values(), key=Matching.sort_key):
            if any(np.sum((m.point - a.point) ** 2) <= r2 for a in accepted):
                continue
            if used.intersection(m.entries):
                continue
            accepted.append(m)
            used.update(m.entries)
        return accepted


def _result(engine: _Engine, pool: list, chosen: list) -> MtlResult:
    diag = dict(engine.diag)
    diag["T_hat"] = dict(diag["T_hat"])
    return MtlResult([(Point2(*m.point), m) for m in chosen], diag, pool)


def run_bayesian_mtl(mpcs: MpcSet, trps: Sequence[Trp], model: BlockingModel, params: AlgoParams) -> MtlResult:
    eng = _Engine(mpcs, trps, model, params, _LikelihoodRule(params.mu))
    pool = eng.run()
    return _result(eng, pool, eng.select(pool))


def run_mu_sweep(mpcs: MpcSet, trps, model: BlockingModel, params: AlgoParams, mus: Sequence[float]) -> dict:
    """Results for every ``mu`` from one pass at the largest value.

    A matching that a run at ``mu`` would have pruned carries a running
    likelihood above ``mu``, so filtering the widest pool reproduces each
    individual run.
    """
    mus = sorted(set(float(m) for m in mus))
    top = replace(params, mu=mus[-1])
    eng = _Engine(mpcs, trps, model, top, _LikelihoodRule(top.mu))
    pool = eng.run()
    out = {}
    for mu in mus:
        sub = [m for m in pool if m.blocking_nll <= mu + NLL_TOL]
        out[mu] = _result(eng, sub, eng.select(sub, _LikelihoodRule(mu)))
    return out


def run_size_threshold(mpcs: MpcSet, trps, model: IcbModel, params: AlgoParams, phi: int) -> MtlResult:
    """Baseline: declare a target for every matching with at least ``I - phi`` entries."""
    eng = _Engine(mpcs, trps, model, params, _SizeRule(phi))
    pool = eng.run()
    return _result(eng, pool, eng.select(pool))


def t_hat_bound_ok(diag: dict) -> bool:
    """Check the per-stage target counts against the polynomial growth bound."""
    N = max(diag["N_max"], 1)
    t = diag["T_hat"]
    stages = sorted(k for k in t if k >= 3)
    for i in stages:
        cap = N**3 if i == 3 else t.get(i - 1, 0) + math.comb(i - 1, 2) * N**3
        if t[i] > cap:
            return False
    return True


# ----------------------------------------------------------------------------
# exhaustive reference


def _best_estimate(entries, trps, mpcs: MpcSet, sigma: float):
    """Best NLS fit over every pairwise-intersection start."""
    tx = np.array([trps[i].tx for i, _ in entries])
    rx = np.array([trps[i].rx for i, _ in entries])
    r = np.array([mpcs.ranges[i][j] for i, j in entries])
    starts = []
    for a, b in itertools.combinations(range(len(entries)), 2):
        pts, _ = intersect_many(tx[a], rx[a], r[a], tx[b], rx[b], r[b])
        starts.extend(pts)
    best = None
    for p0 in starts:
        try:
            p, cov, rn = _fit(tx, rx, r, p0, sigma)
        except SingularGeometry:
            continue
        if best is None or rn < best[2]:
            best = (p, cov, rn)
    return best


def candidate_cost(entries, trps, mpcs: MpcSet, model: BlockingModel, sigma: float,
                   err: ErrorRates, as_printed: bool = False):
    """P3 contribution of one matching at its best NLS estimate, or None."""
    fit = _best_estimate(entries, trps, mpcs, sigma)
    if fit is None:
        return None
    p, cov, rn = fit
    I = len(trps)
    nll = model.neg_log_prob(full_khat(entries, I), range(I), p, err)
    return p3_terms(rn**2, len(entries), nll, sigma, as_printed), p, cov, rn


def brute_force_p3(mpcs: MpcSet, trps, model: BlockingModel, params: AlgoParams, max_T: int = 3,
                   max_evals: int = 10**7) -> MtlResult:
    """Global P3 minimizer over sets of disjoint matchings with three or more entries."""
    I = len(trps)
    err = params.rates
    per_trp = [[(i, j) for j in range(len(mpcs.ranges[i]))] for i in range(I)]
    n_cands = sum(math.prod(len(per_trp[i]) for i in subset)
                  for size in range(3, I + 1) for subset in itertools.combinations(range(I), size))
    if n_cands > max_evals:
        raise InstanceTooLarge(f"{n_cands} candidate matchings exceed the limit of {max_evals}")
    cands = []
    for size in range(3, I + 1):
        for subset in itertools.combinations(range(I), size):
            for entries in itertools.product(*[per_trp[i] for i in subset]):
                cands.append(tuple(entries))
    scored = []
    for entries in cands:
        c = candidate_cost(entries, trps, mpcs, model, params.sigma, err, params.p3_as_printed)
        if c is not None and math.isfinite(c[0]) and c[0] < 0:
            scored.append((entries, c))
    # only negative terms can lower the objective; search disjoint subsets of them
    scored.sort(key=lambda x: x[1][0])
    best = (0.0, ())
    visits = len(cands)
    def search(start, used, total, chosen):
        nonlocal best, visits
        visits += 1
        if visits > max_evals:
            raise InstanceTooLarge(f"search over disjoint sets exceeds the limit of {max_evals}")
        if total < best[0]:
            best = (total, tuple(chosen))
        if len(chosen) == max_T:
            return
        for k in range(start, len(scored)):
            entries, c = scored[k]
            if used.intersection(entries):
                continue
            search(k + 1, used | set(entries), total + c[0], chosen + [k])
    search(0, set(), 0.0, [])
    out = []
    for k in best[1]:
        entries, (cost, p, cov, rn) = scored[k]
        est = LocationEstimate(Point2(float(p[0]), float(p[1])), cov, rn)
        m = Matching(-1, entries, est, full_khat(entries, I), math.nan, [], [], True, cost)
        out.append((Point2(float(p[0]), float(p[1])), m))
    return MtlResult(out, {"objective": best[0], "n_candidates": len(cands)})


def algorithm_objective(result: MtlResult, trps, mpcs: MpcSet, model: BlockingModel, params: AlgoParams) -> float:
    """P3 of an algorithm output, scored the same way as the exhaustive search."""
    total = 0.0
    for _, m in result.estimates:
        c = candidate_cost(m.entries, trps, mpcs, model, params.sigma, params.rates, params.p3_as_printed)
        if c is not None:
            total += c[0]
    return total
