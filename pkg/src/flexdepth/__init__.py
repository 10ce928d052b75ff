"""flexdepth: one toy encoder-decoder transformer, many inference depths.

The package trains a single seq2seq transformer that can decode at every
(encoder depth, decoder depth) pair in a divisor-based depth grid, using
deterministic sub-network assignment and multi-task gradient accumulation.
It also ships the stochastic layer-gating baseline the method is compared
against, plan quality metrics, and a grid evaluator.
"""

from flexdepth.depth_space import DepthGrid, DepthSet, divisor_depths, task_grid
from flexdepth.assignment import (
    AssignmentPlan,
    SubNetwork,
    assign_head,
    assign_left,
    assign_middle_left,
    assign_optimal,
    assign_seq,
    build_plan,
    layerdrop_inference_mask,
)
from flexdepth.metrics import PlanMetrics, average_layer_distance, plan_metrics, task_balance

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "DepthGrid",
    "DepthSet",
    "PlanMetrics",
    "SubNetwork",
    "assign_head",
    "assign_left",
    "assign_middle_left",
    "assign_optimal",
    "assign_seq",
    "average_layer_distance",
    "build_plan",
    "divisor_depths",
    "layerdrop_inference_mask",
    "plan_metrics",
    "task_balance",
    "task_grid",
]
