"""Ground-truth worlds: nodes, targets and disk scatterers in a rectangular region."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Trp

MAX_PLACEMENT_ATTEMPTS = 10_000


class PlacementFailure(RuntimeError):
    """Rejection sampling could not find a free location."""


@dataclass(frozen=True)
class Region:
    xmin: float = -10.0
    xmax: float = 10.0
    ymin: float = -10.0
    ymax: float = 10.0

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.xmax - self.xmin, self.ymax - self.ymin)

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        return (
            (pts[..., 0] >= self.xmin) & (pts[..., 0] <= self.xmax)
            & (pts[..., 1] >= self.ymin) & (pts[..., 1] <= self.ymax)
        )

    def uniform(self, rng, n) -> np.ndarray:
        x = rng.uniform(self.xmin, self.xmax, n)
        y = rng.uniform(self.ymin, self.ymax, n)
        return np.stack([x, y], axis=-1)

    def as_list(self):
        return [self.xmin, self.xmax, self.ymin, self.ymax]


@dataclass(frozen=True)
class SceneConfig:
    """How to draw a scene.

    ``placement`` is ``"ppp"`` (Poisson scatterer field over the region) or
    ``"segment"`` (with probability ``1 - p_los`` one small blocker per
    node-target segment).  Fixed node/target arrays override sampling.
    """

    region: Region = Region()
    lam: float = 0.0075
    L: float = 5.0
    m_tx: int = 3
    m_rx: int = 3
    n_targets: int = 2
    placement: str = "ppp"
    p_los: float = 0.9
    txs: Optional[tuple] = None
    rxs: Optional[tuple] = None
    targets: Optional[tuple] = None
    r_obs: Optional[float] = None


# Three TXs, three RXs and two targets of the fixed validation network.
FIG2_TXS = ((-8.0, 7.0), (-7.0, 8.0), (7.0, 7.0))
FIG2_RXS = ((-7.0, 7.0), (8.0, 7.0), (7.0, 8.0))
FIG2_TARGETS = ((0.0, 0.0), (0.0, 5.0))


@dataclass(frozen=True)
class Scene:
    region: Region
    txs: np.ndarray
    rxs: np.ndarray
    targets: np.ndarray
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    diameters: np.ndarray = field(default_factory=lambda: np.zeros(0))
    r_obs: float = 0.0

    def __post_init__(self):
        for name in ("txs", "rxs", "targets", "centers"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(-1, 2))
        object.__setattr__(self, "diameters", np.asarray(self.diameters, float).reshape(-1))
        if self.r_obs <= 0:
            object.__setattr__(self, "r_obs", 2.0 * self.region.diagonal)

    @property
    def m_tx(self) -> int:
        return len(self.txs)

    @property
    def m_rx(self) -> int:
        return len(self.rxs)

    @property
    def n_trps(self) -> int:
        return self.m_tx * self.m_rx

    @property
    def n_scatterers(self) -> int:
        return len(self.centers)

    def trps(self) -> list[Trp]:
        out = []
        for i in range(self.n_trps):
            t, r = trp_nodes(i, self.m_tx)
            out.append(Trp(i, tuple(self.txs[t]), tuple(self.rxs[r])))
        return out

    def to_dict(self) -> dict:
        return {
            "schema": "mtloc.scene/1",
            "region": self.region.as_list(),
            "txs": self.txs.tolist(),
            "rxs": self.rxs.tolist(),
            "targets": self.targets.tolist(),
            "scatterers": [
                {"center": c.tolist(), "diameter": float(d)}
                for c, d in zip(self.centers, self.diameters)
            ],
            "r_obs": self.r_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        sc = d.get("scatterers", [])
        return cls(
            region=Region(*d["region"]),
            txs=np.array(d["txs"], float),
            rxs=np.array(d["rxs"], float),
            targets=np.array(d.get("targets", []), float),
            centers=np.array([s["center"] for s in sc], float).reshape(-1, 2),
            diameters=np.array([s["diameter"] for s in sc], float),
            r_obs=float(d.get("r_obs", 0.0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GroundTruth:
    k: np.ndarray  # (I, T) direct path present
    v: np.ndarray  # (M_TX, T) TX has LoS to target
    w: np.ndarray  # (M_RX, T) RX has LoS to target
    g: np.ndarray  # (I, M, T) indirect path TX->target->scatterer->RX
    h: np.ndarray  # (I, M, T) indirect path TX->scatterer->target->RX


def trp_of(i: int, m_tx: int) -> tuple[int, int]:
    """One-based (TX, RX) numbers of one-based TRP ``i``; TX index runs fastest."""
    if i < 1:
        raise IndexError(f"TRP index {i} out of range")
    return 1 + (i - 1) % m_tx, (i - 1) // m_tx + 1


def trp_nodes(i: int, m_tx: int) -> tuple[int, int]:
    """Zero-based (TX, RX) indices of zero-based TRP ``i``."""
    return i % m_tx, i // m_tx


def los(p, q, centers, diameters=None, L: float | None = None) -> bool:
    """True when no scatterer centre lies inside the L x d corridor of segment pq.

    The corridor is the rectangle of width L (each scatterer's diameter)
    around the segment, without rounded ends; points on its long edges do
    not block.
    """
    centers = np.asarray(centers, float).reshape(-1, 2)
    if len(centers) == 0:
        return True
    if diameters is None:
        diameters = np.full(len(centers), float(L))
    diameters = np.asarray(diameters, float).reshape(-1)
    return not bool(np.any(_blocking(np.asarray(p, float), np.asarray(q, float), centers, diameters)))


def _blocking(p, q, centers, diameters):
    if tuple(q) < tuple(p):
        p, q = q, p  # fixed orientation keeps the test exactly symmetric under rounding
    d = q - p
    n = math.hypot(d[0], d[1])
    if n == 0:
        return np.zeros(len(centers), bool)
    u = d / n
    w = centers - p
    s = w @ u
    perp = np.abs(w[:, 0] * u[1] - w[:, 1] * u[0])
    return (s >= 0) & (s <= n) & (perp < diameters / 2)


def _place(region: Region, centers, radii, rng, n) -> np.ndarray:
    out = np.zeros((n, 2))
    for k in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = region.uniform(rng, 1)[0]
            if len(centers) == 0 or np.all(np.hypot(*(centers - p).T) >= radii):
                out[k] = p
                break
        else:
            raise PlacementFailure("region too crowded to place a node or target")
    return out


def _segment_blockers(nodes, targets, p_los, L, rng):
    """One blocker per node-target segment with probability 1 - p_los."""
    cs = []
    for t in targets:
        for n in nodes:
            if rng.random() >= p_los:
                d = math.dist(n, t)
                lo = min(L / 2 / d, 0.5) if d > 0 else 0.5
                s = rng.uniform(lo, 1 - lo)
                cs.append(np.asarray(n) + s * (np.asarray(t) - np.asarray(n)))
    return np.array(cs, float).reshape(-1, 2)


def sample_scene(cfg: SceneConfig, rng) -> Scene:
    region = cfg.region
    if cfg.placement == "ppp":
        m = rng.poisson(cfg.lam * region.area)
        centers = region.uniform(rng, m).reshape(-1, 2)
    elif cfg.placement == "segment":
        centers = np.zeros((0, 2))
    else:
        raise ValueError(f"unknown placement {cfg.placement!r}")
    radii = np.full(len(centers), cfg.L / 2)

    def nodes(fixed, n):
        if fixed is not None:
            return np.asarray(fixed, float).reshape(-1, 2)
        return _place(region, centers, radii, rng, n)

    txs = nodes(cfg.txs, cfg.m_tx)
    rxs = nodes(cfg.rxs, cfg.m_rx)
    targets = nodes(cfg.targets, cfg.n_targets)
    if cfg.placement == "segment":
        centers = _segment_blockers(np.vstack([txs, rxs]), targets, cfg.p_los, cfg.L, rng)
    r_obs = cfg.r_obs if cfg.r_obs else 2.0 * region.diagonal
    return Scene(region, txs, rxs, targets, centers, np.full(len(centers), cfg.L), r_obs)


def ground_truth_blocking(scene: Scene):
    """Per-target LoS indicators and the DP presence matrix ``k`` (I, T)."""
    T = len(scene.targets)
    v = np.zeros((scene.m_tx, T), np.uint8)
    w = np.zeros((scene.m_rx, T), np.uint8)
    for t, tgt in enumerate(scene.targets):
        for a, tx in enumerate(scene.txs):
            v[a, t] = los(tx, tgt, scene.centers, scene.diameters)
        for b, rx in enumerate(scene.rxs):
            w[b, t] = los(rx, tgt, scene.centers, scene.diameters)
    k = np.zeros((scene.n_trps, T), np.uint8)
    for i in range(scene.n_trps):
        a, b = trp_nodes(i, scene.m_tx)
        k[i] = v[a] * w[b]
    return k, v, w


def ground_truth_ips(scene: Scene, ip_policy: str = "geometric", rng=None, p_ip: float = 0.3):
    """Indirect-path indicators ``(g, h)`` of shape (I, M, T).

    Legs to and from scatterer ``m`` ignore ``m`` itself as a blocker; the
    reflection point is taken at its centre.
    """
    I, M, T = scene.n_trps, scene.n_scatterers, len(scene.targets)
    g = np.zeros((I, M, T), np.uint8)
    h = np.zeros((I, M, T), np.uint8)
    if ip_policy == "none" or M == 0 or T == 0:
        return g, h
    if ip_policy != "geometric":
        raise ValueError(f"unknown ip policy {ip_policy!r}")
    C, D = scene.centers, scene.diameters
    others = [np.arange(M) != m for m in range(M)]

    def clear(p, q, m=None):
        if m is None:
            return los(p, q, C, D)
        return los(p, q, C[others[m]], D[others[m]])

    tx_t = [[clear(tx, tgt) for tgt in scene.targets] for tx in scene.txs]
    rx_t = [[clear(rx, tgt) for tgt in scene.targets] for rx in scene.rxs]
    t_s = [[clear(tgt, C[m], m) for m in range(M)] for tgt in scene.targets]
    tx_s = [[clear(tx, C[m], m) for m in range(M)] for tx in scene.txs]
    rx_s = [[clear(rx, C[m], m) for m in range(M)] for rx in scene.rxs]
    for i in range(I):
        a, b = trp_nodes(i, scene.m_tx)
        for m in range(M):
            for t in range(T):
                # draw both coins unconditionally so the stream does not depend on geometry
                cg, ch = rng.random() < p_ip, rng.random() < p_ip
                g[i, m, t] = cg and tx_t[a][t] and t_s[t][m] and rx_s[b][m]
                h[i, m, t] = ch and tx_s[a][m] and t_s[t][m] and rx_t[b][t]
    return g, h


def ground_truth(scene: Scene, rng, ip_policy: str = "geometric", p_ip: float = 0.3) -> GroundTruth:
    k, v, w = ground_truth_blocking(scene)
    g, h = ground_truth_ips(scene, ip_policy, rng, p_ip)
    return GroundTruth(k, v, w, g, h)
