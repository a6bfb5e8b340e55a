"""Multi-target localization from bistatic ranges with correlated blocking priors."""

from .geometry import (
    LocationEstimate,
    Point2,
    RangeEllipse,
    Trp,
    bistatic_range,
    ellipse_intersections,
    nls_estimate,
)
from .mtl import AlgoParams, MtlResult, run_bayesian_mtl
from .scene import Scene, SceneConfig, sample_scene

__version__ = "0.1.0"
