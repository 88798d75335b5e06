"""Taylor-model reachability for neural and analytical dynamical systems."""

__version__ = "0.1.0"

from .interval import IntervalBox, box_from_center, outward_rounding  # noqa: E402
from .taylor_model import TaylorModel, build_linear_tm  # noqa: E402
from .neural import MLPNet, affine_net, crown_backward, certify_tm_input, ctl_crown  # noqa: E402
from .flowpipe import FlowpipeParams, StepFailure, VectorField, ct_reach  # noqa: E402
from .closed_loop import ClosedLoopSpec, cl_reach  # noqa: E402
from .dt_reach import DTSystem, dt_reach, dt_reach_batch  # noqa: E402
from .baseline import interval_baseline_ct, interval_baseline_dt  # noqa: E402
from .refine import (  # noqa: E402
    SplitPlan,
    grad_tube_volume,
    gradient_refine,
    reach_with_splitting,
    split_box,
    tube_volume,
)
from .tube import ReachTube  # noqa: E402

__all__ = [
    "IntervalBox", "box_from_center", "outward_rounding", "TaylorModel", "build_linear_tm",
    "MLPNet", "affine_net", "crown_backward", "certify_tm_input", "ctl_crown",
    "FlowpipeParams", "StepFailure", "VectorField", "ct_reach", "ClosedLoopSpec", "cl_reach",
    "DTSystem", "dt_reach", "dt_reach_batch", "interval_baseline_ct", "interval_baseline_dt",
    "SplitPlan", "grad_tube_volume", "gradient_refine", "reach_with_splitting", "split_box",
    "tube_volume", "ReachTube",
]
