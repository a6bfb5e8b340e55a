"""Scoring and Monte Carlo experiments over seeded network realizations."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .blocking import (
    EmpiricalModel,
    ErrorRates,
    GridStats,
    IcbModel,
    LowerBoundModel,
    MahalanobisModel,
    neg_log,
    p_dp_icb,
    p_los_ppp,
)
from .config import RunConfig
from .geometry import LocationEstimate, Point2, SingularGeometry, intersect_many, _fit
from .mtl import (
    AlgoParams,
    Matching,
    MtlResult,
    NLL_TOL,
    full_khat,
    matching_rss,
    mu_of_phi,
    p3_terms,
    processing_order,
    run_mu_sweep,
    run_size_threshold,
)
from .scene import GroundTruth, PlacementFailure, Region, Scene, SceneConfig, ground_truth, sample_scene
from .signal import MpcSet, SignalParams, generate_mpcs


def score(estimates, targets, radius: float) -> tuple:
    """``(T_D, T_F)``: targets with an estimate nearby, estimates with no target nearby."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    E = np.asarray(estimates, float).reshape(-1, 2)
    X = np.asarray(targets, float).reshape(-1, 2)
    if len(E) == 0 or len(X) == 0:
        return 0, len(E)
    d = np.hypot(E[:, None, 0] - X[None, :, 0], E[:, None, 1] - X[None, :, 1])
    close = d <= radius
    return int(close.any(axis=0).sum()), int((~close.any(axis=1)).sum())


@dataclass
class ScoreReport:
    td: np.ndarray
    tf: np.ndarray
    T: np.ndarray
    coords: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.td)

    @property
    def _pd_terms(self):
        return np.where(self.T > 0, self.td / np.maximum(self.T, 1), 0.0)

    @property
    def _pf_terms(self):
        den = self.td + self.tf
        return np.where(den > 0, self.tf / np.maximum(den, 1), 0.0)

    @property
    def P_D(self) -> float:
        return float(self._pd_terms.mean()) if self.n else math.nan

    @property
    def P_F(self) -> float:
        return float(self._pf_terms.mean()) if self.n else math.nan

    @property
    def P_M(self) -> float:
        return 1.0 - self.P_D

    @property
    def se_D(self) -> float:
        return float(self._pd_terms.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else math.nan

    @property
    def se_F(self) -> float:
        return float(self._pf_terms.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else math.nan

    @property
    def n_empty(self) -> int:
        """Realizations with no estimates, counted as zero false-alarm ratio."""
        return int(np.sum(self.td + self.tf == 0))

    def summary(self) -> dict:
        return {**self.coords, "n": self.n, "P_D": self.P_D, "P_F": self.P_F,
                "se_D": self.se_D, "se_F": self.se_F, "n_empty": self.n_empty}


# ----------------------------------------------------------------------------
# building blocks from a run config


def scene_config(cfg: RunConfig) -> SceneConfig:
    s = cfg.scene
    tup = lambda v: None if v is None else tuple(tuple(map(float, p)) for p in v)
    return SceneConfig(Region(*map(float, s.region)), s.lam, s.L, s.m_tx, s.m_rx, s.n_targets,
                       s.placement, s.p_los, tup(s.txs), tup(s.rxs), tup(s.targets), s.r_obs)


def signal_params(cfg: RunConfig) -> SignalParams:
    s = cfg.signal
    return SignalParams(s.sigma, s.nu, s.resolution, s.n_noise)


def algo_params(cfg: RunConfig, delta: Optional[float] = None, mu: Optional[float] = None) -> AlgoParams:
    a = cfg.algo
    delta = a.delta if delta is None else delta
    err = None
    if a.rho01 is not None or a.rho10 is not None:
        base = ErrorRates.from_delta(delta)
        err = ErrorRates(base.rho01 if a.rho01 is None else a.rho01, base.rho10 if a.rho10 is None else a.rho10)
    return AlgoParams(delta=delta, mu=a.mu if mu is None else mu, sigma=cfg.signal.sigma, err=err,
                      order=a.order, dedupe_radius=a.dedupe_radius, min_size=a.min_size)


def icb_p_los(cfg: RunConfig) -> float:
    m, s = cfg.model, cfg.scene
    if m.p_los is not None:
        return m.p_los
    if s.placement == "segment":
        return s.p_los
    return p_los_ppp(s.lam, s.L, m.d_avg)


def icb_model(cfg: RunConfig, delta: float) -> IcbModel:
    return IcbModel.from_p_los(icb_p_los(cfg), delta, cfg.scene.m_tx, cfg.scene.m_rx)


def build_model(cfg: RunConfig, scene: Scene, delta: float, seed: int, kind: Optional[str] = None):
    kind = kind or cfg.model.kind
    m, s = cfg.model, cfg.scene
    if kind == "empirical":
        return EmpiricalModel(scene.txs, scene.rxs, s.lam, s.L, scene.region, m.n_samples,
                              m.resolution, seed, m.exclude)
    if kind == "lower-bound":
        return LowerBoundModel(scene.txs, scene.rxs, s.lam, s.L, scene.region, m.n_area,
                               m.resolution, seed, m.exclude)
    if kind == "icb":
        return icb_model(cfg, delta)
    if kind == "grid":
        return MahalanobisModel(GridStats.load(m.grid_file), scene.m_tx, scene.m_rx, m.eps)
    raise ValueError(f"unknown model {kind!r}")


def realization_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(index,))


@dataclass
class Realization:
    index: int
    scene: Scene
    truth: GroundTruth
    mpcs: MpcSet
    model_seed: int


def realize(cfg: RunConfig, index: int) -> Realization:
    """Scene, ground truth and measurements of realization ``index``; fully seeded."""
    ss_scene, ss_truth, ss_sig, ss_model = realization_seed(cfg.seed, index).spawn(4)
    scene = sample_scene(scene_config(cfg), np.random.default_rng(ss_scene))
    truth = ground_truth(scene, np.random.default_rng(ss_truth), cfg.signal.ip_policy, cfg.signal.p_ip)
    mpcs = generate_mpcs(scene, truth, signal_params(cfg), np.random.default_rng(ss_sig))
    return Realization(index, scene, truth, mpcs, int(ss_model.generate_state(1)[0]))


# ----------------------------------------------------------------------------
# genie benchmark


def genie_run(mpcs: MpcSet, trps, model, params: AlgoParams, n_targets: Optional[int] = None) -> MtlResult:
    """Apply the stage gates to the true DP matchings only.

    Each target starts from its first two labelled DPs in processing
    order, taken at the intersection nearest the all-DP fit; later DPs
    join through the same delta gate and the running blocking likelihood
    must stay within ``mu``.
    """
    I = len(trps)
    order = processing_order(mpcs, params.order, params.seed)
    err = params.rates
    tx = np.array([t.tx for t in trps])
    rx = np.array([t.rx for t in trps])
    if n_targets is None:
        n_targets = 1 + max((lab.target for row in mpcs.labels for lab in row if lab.kind == "DP"), default=-1)
    out = []
    for t in range(n_targets):
        dps = {i: mpcs.dp_index(i, t) for i in range(I)}
        seq = [i for i in order if dps[i] is not None]
        if len(seq) < 2:
            continue
        u, v = seq[0], seq[1]
        ru, rv = mpcs.ranges[u][dps[u]], mpcs.ranges[v][dps[v]]
        pts, _ = intersect_many(tx[u], rx[u], ru, tx[v], rx[v], rv)
        if len(pts) == 0:
            continue
        r_all = np.array([mpcs.ranges[i][dps[i]] for i in seq])
        # the all-DP fit can stall in a local minimum, so start it from every intersection
        fits = []
        for p0 in pts:
            try:
                ref, _, rn = _fit(tx[seq], rx[seq], r_all, p0, params.sigma)
                fits.append((rn, ref))
            except SingularGeometry:
                pass
        if fits:
            ref = min(fits, key=lambda f: f[0])[1]
            start = pts[np.argmin(np.hypot(*(pts - ref).T))]
        else:
            start = pts[0]
        try:
            _, cov, _ = _fit(tx[[u, v]], rx[[u, v]], np.array([ru, rv]), start, params.sigma)
        except SingularGeometry:
            continue
        est = LocationEstimate(Point2(float(start[0]), float(start[1])), cov, 0.0)
        entries = [(u, dps[u]), (v, dps[v])]
        cols, khat, trace = [], [], []
        nll, started, alive = 0.0, False, True
        for i in order:
            cols.append(i)
            prev = est.point
            bit = 1 if i in (u, v) else 0
            if started and dps[i] is not None:
                p = np.asarray(prev)
                dT, dR = p - tx[i], p - rx[i]
                nT, nR = math.hypot(*dT), math.hypot(*dR)
                g = dT / nT + dR / nR
                s = math.sqrt(params.sigma**2 + g @ est.covariance @ g)
                if abs(mpcs.ranges[i][dps[i]] - (nT + nR)) / s <= params.delta:
                    bit = 1
                    entries.append((i, dps[i]))
                    sel = [e[0] for e in entries]
                    r = np.array([mpcs.ranges[a][b] for a, b in entries])
                    try:
                        q, cov, rn = _fit(tx[sel], rx[sel], r, p, params.sigma)
                        est = LocationEstimate(Point2(float(q[0]), float(q[1])), cov, rn)
                    except SingularGeometry:
                        pass
            khat.append(bit)
            started = started or i == v
            if started:
                nll = max(nll, model.neg_log_prob(np.array(khat, np.uint8), cols, prev, err))
                trace.append(nll)
                if nll > params.mu + NLL_TOL:
                    alive = False
                    break
        if not alive or len(entries) < params.min_size:
            continue
        entries = tuple(sorted(entries))
        rss = matching_rss(entries, np.asarray(est.point), trps, mpcs)
        final_nll = model.neg_log_prob(full_khat(entries, I), range(I), est.point, err)
        m = Matching(t, entries, est, np.array(khat, np.uint8), nll, trace, [],
                     True, p3_terms(rss, len(entries), final_nll, params.sigma, params.p3_as_printed))
        out.append((est.point, m))
    return MtlResult(out, {"order": list(order)})


# ----------------------------------------------------------------------------
# ensembles


def sweep_points(cfg: RunConfig, method: str) -> list:
    """``(delta, mu, phi)`` triples, sorted by (delta, mu)."""
    deltas = cfg.sweep.deltas or [cfg.algo.delta]
    pts = []
    for d in deltas:
        d = float(d)
        if cfg.sweep.phis:
            p_dp = icb_model(cfg, d).p_dp
            I = cfg.scene.m_tx * cfg.scene.m_rx
            for phi in cfg.sweep.phis:
                pts.append((d, mu_of_phi(int(phi), p_dp, I), int(phi)))
        else:
            for mu in (cfg.sweep.mus or [cfg.algo.mu]):
                pts.append((d, float(mu), None))
    return sorted(pts, key=lambda x: (x[0], x[1]))


def run_realization(cfg: RunConfig, index: int, methods: Optional[Sequence[str]] = None) -> list:
    """One realization under every requested method and sweep point; one row each."""
    methods = list(methods or cfg.methods)
    try:
        rz = realize(cfg, index)
    except PlacementFailure:
        return [{"realization": index, "method": m, "failed": 1} for m in methods]
    trps = rz.scene.trps()
    T = len(rz.scene.targets)
    radius = 3 * cfg.signal.sigma
    rows = []
    for method in methods:
        pts = sweep_points(cfg, method)
        by_delta: dict = {}
        for d, mu, phi in pts:
            by_delta.setdefault(d, []).append((mu, phi))
        for d, items in by_delta.items():
            params = algo_params(cfg, d)
            model = build_model(cfg, rz.scene, d, rz.model_seed,
                                "icb" if method == "size-threshold" else None)
            t0 = time.perf_counter()
            if method == "bayesian":
                res = run_mu_sweep(rz.mpcs, trps, model, params, [mu for mu, _ in items])
                results = [(mu, phi, res[float(mu)]) for mu, phi in items]
            elif method == "size-threshold":
                if any(phi is None for _, phi in items):
                    raise ValueError("the size-threshold method needs sweep.phis")
                results = [(mu, phi, run_size_threshold(rz.mpcs, trps, model, params, phi)) for mu, phi in items]
            else:
                results = [(mu, phi, genie_run(rz.mpcs, trps, model, replace(params, mu=mu), T))
                           for mu, phi in items]
            elapsed = time.perf_counter() - t0
            for mu, phi, r in results:
                td, tf = score(r.points, rz.scene.targets, radius)
                rows.append({
                    "realization": index, "method": method, "delta": d, "mu": float(mu),
                    "phi": "" if phi is None else phi, "T": T, "TD": td, "TF": tf,
                    "n_est": r.T_hat, "failed": 0, "seconds": elapsed / len(results),
                })
    return rows


def run_ensemble(cfg: RunConfig, methods: Optional[Sequence[str]] = None, workers: Optional[int] = None) -> list:
    """All rows for realizations 0..n-1, in realization order whatever the worker count."""
    workers = workers or cfg.workers
    idx = range(cfg.n_realizations)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(run_realization, [cfg] * len(idx), idx, [methods] * len(idx)))
    else:
        chunks = [run_realization(cfg, i, methods) for i in idx]
    return [row for chunk in chunks for row in chunk]


def reports(rows: list) -> list:
    """One :class:`ScoreReport` per (method, delta, mu), sorted."""
    groups: dict = {}
    for r in rows:
        if r.get("failed"):
            continue
        key = (r["method"], r["delta"], r["mu"], r["phi"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        g = groups[key]
        out.append(ScoreReport(
            np.array([r["TD"] for r in g]), np.array([r["TF"] for r in g]), np.array([r["T"] for r in g]),
            {"method": key[0], "delta": key[1], "mu": key[2], "phi": key[3]},
        ))
    return out


# ----------------------------------------------------------------------------
# direct-path count tables


def dp_count_distribution(scene_cfg: SceneConfig, model: str, n: int, rng=None,
                          p_dp: Optional[float] = None) -> np.ndarray:
    """pmf of the number of direct paths per target, over 0..I.

    ``model="true"`` samples scenes; ``model="icb"`` is the binomial with
    miss probability ``p_dp``.
    """
    I = scene_cfg.m_tx * scene_cfg.m_rx
    if model == "icb":
        if p_dp is None:
            raise ValueError("icb table needs p_dp")
        return np.array([math.comb(I, k) * (1 - p_dp) ** k * p_dp ** (I - k) for k in range(I + 1)])
    if model != "true":
        raise ValueError(f"unknown model {model!r}")
    from .scene import ground_truth_blocking

    rng = np.random.default_rng(rng)
    hist = np.zeros(I + 1)
    for _ in range(n):
        sc = sample_scene(scene_cfg, rng)
        k, _, _ = ground_truth_blocking(sc)
        for c in k.sum(axis=0):
            hist[int(c)] += 1
    return hist / hist.sum()


# ----------------------------------------------------------------------------
# exhaustive-search comparison on tiny instances


def sets_match(a, b, radius: float) -> bool:
    """Equal cardinality and every point of each set near some point of the other."""
    A = np.asarray(a, float).reshape(-1, 2)
    B = np.asarray(b, float).reshape(-1, 2)
    if len(A) != len(B):
        return False
    if len(A) == 0:
        return True
    d = np.hypot(A[:, None, 0] - B[None, :, 0], A[:, None, 1] - B[None, :, 1]) <= radius
    return bool(d.any(axis=1).all() and d.any(axis=0).all())


def tiny_instance(cfg: RunConfig, index: int, max_tries: int = 100) -> Realization:
    """A small network (oracle section sizes) with at most ``max_mpcs`` peaks per TRP."""
    o = cfg.oracle
    ss = realization_seed(cfg.seed, index)
    pick = np.random.default_rng(ss.spawn(1)[0])
    T = int(pick.integers(1, o.max_targets + 1))
    sub = replace(cfg, scene=replace(cfg.scene, m_tx=o.m_tx, m_rx=o.m_rx, n_targets=T, txs=None, rxs=None,
                                     targets=None))
    for attempt in range(max_tries):
        ss_scene, ss_truth, ss_sig, ss_model = np.random.SeedSequence(
            cfg.seed, spawn_key=(index, attempt + 1)).spawn(4)
        scene = sample_scene(scene_config(sub), np.random.default_rng(ss_scene))
        truth = ground_truth(scene, np.random.default_rng(ss_truth), sub.signal.ip_policy, sub.signal.p_ip)
        mpcs = generate_mpcs(scene, truth, signal_params(sub), np.random.default_rng(ss_sig))
        if max(mpcs.counts) <= o.max_mpcs:
            return Realization(index, scene, truth, mpcs, int(ss_model.generate_state(1)[0]))
    raise PlacementFailure("could not draw a small enough instance")


def oracle_compare(cfg: RunConfig, index: int) -> dict:
    """Run the staged algorithm and the exhaustive P3 search on one tiny instance."""
    from .mtl import algorithm_objective, brute_force_p3, run_bayesian_mtl

    rz = tiny_instance(cfg, index)
    trps = rz.scene.trps()
    params = algo_params(cfg)
    model = build_model(cfg, rz.scene, params.delta, rz.model_seed)
    t0 = time.perf_counter()
    algo = run_bayesian_mtl(rz.mpcs, trps, model, params)
    t1 = time.perf_counter()
    oracle = brute_force_p3(rz.mpcs, trps, model, params, cfg.oracle.max_T, cfg.oracle.max_evals)
    t2 = time.perf_counter()
    obj_a = algorithm_objective(algo, trps, rz.mpcs, model, params)
    obj_o = oracle.diagnostics["objective"]
    return {
        "instance": index, "T": len(rz.scene.targets), "N_max": max(rz.mpcs.counts),
        "n_algo": algo.T_hat, "n_oracle": oracle.T_hat,
        "objective_algo": obj_a, "objective_oracle": obj_o,
        "agree": int(sets_match(algo.points, oracle.points, 3 * cfg.signal.sigma)),
        "seconds_algo": t1 - t0, "seconds_oracle": t2 - t1,
    }
