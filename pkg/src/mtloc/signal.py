"""Per-TRP range measurements: noisy direct paths, single-bounce paths and noise peaks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import bistatic_ranges
from .scene import GroundTruth, Scene, trp_nodes

MAX_TRUNCATION_TRIES = 100


@dataclass(frozen=True)
class Label:
    """Provenance of a simulated peak: ``DP``, ``IP1``, ``IP2`` or ``Noise``."""

    kind: str
    target: int = -1
    scatterer: int = -1

    def to_list(self):
        return [self.kind, self.target, self.scatterer]

    @classmethod
    def from_list(cls, x):
        return cls(str(x[0]), int(x[1]), int(x[2]))


NOISE = Label("Noise")


@dataclass(frozen=True)
class SignalParams:
    sigma: float = 0.01
    nu: float = 1.0  # mean noise peaks per TRP
    resolution: Optional[float] = None  # defaults to 2 sigma
    n_noise: Optional[int] = None  # fixed noise-peak count instead of Poisson(nu)

    @property
    def threshold(self) -> float:
        return 2.0 * self.sigma if self.resolution is None else self.resolution


@dataclass
class MpcSet:
    """Sorted ranges per TRP, with labels and the labels absorbed by each kept peak."""

    ranges: list  # list of 1-D arrays, one per TRP
    labels: list = field(default_factory=list)
    merged: list = field(default_factory=list)

    def __post_init__(self):
        self.ranges = [np.asarray(r, float).reshape(-1) for r in self.ranges]
        if not self.labels:
            self.labels = [[NOISE] * len(r) for r in self.ranges]
        if not self.merged:
            self.merged = [[[] for _ in r] for r in self.ranges]

    @property
    def n_trps(self) -> int:
        return len(self.ranges)

    @property
    def counts(self) -> tuple:
        return tuple(len(r) for r in self.ranges)

    def dp_index(self, trp: int, target: int) -> Optional[int]:
        """Index of the peak labelled as the DP of ``target`` at ``trp``."""
        for j, lab in enumerate(self.labels[trp]):
            if lab.kind == "DP" and lab.target == target:
                return j
        return None

    def to_dict(self, with_labels: bool = True) -> dict:
        d = {"schema": "mtloc.mpcs/1", "ranges": [r.tolist() for r in self.ranges]}
        if with_labels:
            d["labels"] = [[lab.to_list() for lab in row] for row in self.labels]
            d["merged"] = [[[lab.to_list() for lab in m] for m in row] for row in self.merged]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MpcSet":
        labels = [[Label.from_list(x) for x in row] for row in d.get("labels", [])]
        merged = [[[Label.from_list(x) for x in m] for m in row] for row in d.get("merged", [])]
        return cls(d["ranges"], labels, merged)

    def dumps(self, with_labels: bool = True) -> str:
        return json.dumps(self.to_dict(with_labels))


def merge_unresolvable(ranges, threshold: float) -> list:
    """Greedy left-to-right: drop any peak within ``threshold`` of the last kept one."""
    kept = []
    for r in sorted(ranges):
        if kept and r - kept[-1] <= threshold:
            continue
        kept.append(r)
    return kept


def _merge_labelled(ranges, labels, threshold):
    order = np.argsort(ranges, kind="stable")
    out_r, out_l, out_m = [], [], []
    for j in order:
        if out_r and ranges[j] - out_r[-1] <= threshold:
            out_m[-1].append(labels[j])
            continue
        out_r.append(float(ranges[j]))
        out_l.append(labels[j])
        out_m.append([])
    return out_r, out_l, out_m


def _truncated_normal(mean, sigma, hi, rng):
    for _ in range(MAX_TRUNCATION_TRIES):
        x = rng.normal(mean, sigma)
        if 0.0 <= x <= hi:
            return x
    return min(max(x, 0.0), hi)


def generate_mpcs(scene: Scene, truth: GroundTruth, params: SignalParams, rng) -> MpcSet:
    sigma, r_obs = params.sigma, scene.r_obs
    T = len(scene.targets)
    ranges, labels, merged = [], [], []
    for i in range(scene.n_trps):
        a, b = trp_nodes(i, scene.m_tx)
        tx, rx = scene.txs[a], scene.rxs[b]
        raw, lab = [], []
        if T:
            r_dp = bistatic_ranges(tx, rx, scene.targets)
            for t in range(T):
                if truth.k[i, t]:
                    raw.append(_truncated_normal(r_dp[t], sigma, r_obs, rng))
                    lab.append(Label("DP", t))
        for t in range(T):
            tgt = scene.targets[t]
            for m in range(scene.n_scatterers):
                c = scene.centers[m]
                mid = np.hypot(*(tgt - c))
                if truth.g[i, m, t]:
                    length = np.hypot(*(tx - tgt)) + mid + np.hypot(*(c - rx))
                    raw.append(_truncated_normal(length, sigma, r_obs, rng))
                    lab.append(Label("IP1", t, m))
                if truth.h[i, m, t]:
                    length = np.hypot(*(tx - c)) + mid + np.hypot(*(tgt - rx))
                    raw.append(_truncated_normal(length, sigma, r_obs, rng))
                    lab.append(Label("IP2", t, m))
        n_noise = params.n_noise if params.n_noise is not None else rng.poisson(params.nu)
        for x in rng.uniform(0.0, r_obs, n_noise):
            raw.append(float(x))
            lab.append(NOISE)
        r, l, mg = _merge_labelled(np.array(raw, float), lab, params.threshold)
        ranges.append(r)
        labels.append(l)
        merged.append(mg)
    return MpcSet(ranges, labels, merged)
