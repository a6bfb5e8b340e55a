"""Run configuration: a nested tree of dataclasses loaded from JSON.

Unknown keys are rejected so typos fail loudly.  Defaults reproduce the
correlated-blocking ensemble (PPP scatterers, L = 5 m, 3 x 3 nodes, two
targets).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    region: list = field(default_factory=lambda: [-10.0, 10.0, -10.0, 10.0])
    lam: float = 0.0075
    L: float = 5.0
    m_tx: int = 3
    m_rx: int = 3
    n_targets: int = 2
    placement: str = "ppp"  # ppp | segment
    p_los: float = 0.9  # segment placement only
    txs: Optional[list] = None
    rxs: Optional[list] = None
    targets: Optional[list] = None
    r_obs: Optional[float] = None


@dataclass
class SignalSection:
    sigma: float = 0.01
    nu: float = 1.0
    resolution: Optional[float] = None
    n_noise: Optional[int] = None
    ip_policy: str = "geometric"  # geometric | none
    p_ip: float = 0.3


@dataclass
class AlgoSection:
    delta: float = 3.0
    mu: float = 12.0
    rho01: Optional[float] = None
    rho10: Optional[float] = None
    order: str = "descending"
    dedupe_radius: Optional[float] = None
    min_size: int = 3


@dataclass
class ModelSection:
    kind: str = "empirical"  # empirical | lower-bound | icb | grid
    n_samples: int = 10_000
    resolution: float = 1.0
    n_area: int = 100_000
    exclude: bool = True
    p_los: Optional[float] = None  # icb: constant LoS probability
    d_avg: float = 10.1133  # icb: mean node-target distance when p_los is derived
    eps: float = 1e-6
    grid_file: Optional[str] = None


@dataclass
class SweepSection:
    deltas: Optional[list] = None
    mus: Optional[list] = None
    phis: Optional[list] = None


@dataclass
class OracleSection:
    m_tx: int = 2
    m_rx: int = 2
    max_targets: int = 2
    max_mpcs: int = 3
    max_T: int = 4
    max_evals: int = 10_000_000
    n_instances: int = 200


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    signal: SignalSection = field(default_factory=SignalSection)
    algo: AlgoSection = field(default_factory=AlgoSection)
    model: ModelSection = field(default_factory=ModelSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    methods: list = field(default_factory=lambda: ["bayesian"])
    n_realizations: int = 100
    seed: int = 42
    workers: int = 1
    output_dir: Optional[str] = None
    prefix: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def validate(self) -> "RunConfig":
        s, a, m = self.scene, self.algo, self.model
        if s.placement not in ("ppp", "segment"):
            raise ConfigError("scene.placement: must be 'ppp' or 'segment'")
        if len(s.region) != 4 or not (s.region[0] < s.region[1] and s.region[2] < s.region[3]):
            raise ConfigError("scene.region: expected [xmin, xmax, ymin, ymax]")
        if s.lam < 0 or s.L <= 0:
            raise ConfigError("scene.lam / scene.L: must be non-negative / positive")
        if self.signal.sigma <= 0:
            raise ConfigError("signal.sigma: must be positive")
        if self.signal.ip_policy not in ("geometric", "none"):
            raise ConfigError("signal.ip_policy: must be 'geometric' or 'none'")
        if a.delta <= 0 or a.mu <= 0:
            raise ConfigError("algo.delta / algo.mu: must be positive")
        if a.order not in ("descending", "ascending", "fewest-mpcs-first", "identity", "random"):
            raise ConfigError(f"algo.order: unknown strategy {a.order!r}")
        if m.kind not in ("empirical", "lower-bound", "icb", "grid"):
            raise ConfigError(f"model.kind: unknown model {m.kind!r}")
        if m.kind == "grid" and not m.grid_file:
            raise ConfigError("model.grid_file: required for the grid model")
        for meth in self.methods:
            if meth not in ("bayesian", "size-threshold", "genie"):
                raise ConfigError(f"methods: unknown method {meth!r}")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations: must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers: must be at least 1")
        return self


def _coerce(name: str, tp, value):
    origin = getattr(tp, "__origin__", None)
    if value is None:
        return None
    if tp in (float,) or (origin is not None and float in getattr(tp, "__args__", ())):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if tp is int or (origin is not None and int in getattr(tp, "__args__", ())):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if tp is str or (origin is not None and str in getattr(tp, "__args__", ())):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if tp is list or (origin is not None and list in getattr(tp, "__args__", ())):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"{path + '.' if path else ''}{extra[0]}: unknown key")
    obj = cls()
    for f in fields(cls):
        if f.name not in data:
            continue
        name = f"{path}.{f.name}" if path else f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            setattr(obj, f.name, _build(tp, data[f.name], name))
        else:
            setattr(obj, f.name, _coerce(name, tp, data[f.name]))
    return obj


def from_dict(data: dict, require_seed: bool = True) -> RunConfig:
    if require_seed and "seed" not in data:
        raise ConfigError("seed: missing required field")
    return _build(RunConfig, data, "").validate()


def load(path: str) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` with ``value`` parsed as JSON (bare words stay strings)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected key=value")
    key, raw = assignment.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value
    return data
