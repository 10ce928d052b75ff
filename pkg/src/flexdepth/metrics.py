"""Plan quality metrics: task balance and average layer distance.

Task balance (TB) is the dispersion of per-layer task-participation counts;
lower means the depths share layers more evenly. Average layer distance
(ALD) is the mean gap between adjacent kept layers across all sub-networks;
higher means each sub-network samples the stack more uniformly.

The TB divisor is (D - 1) by default, the convention that reproduces the
reference values this package pins its tests to; ``sample=False`` selects
the population divisor D instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from flexdepth.assignment import AssignmentPlan


@dataclass(frozen=True)
class PlanMetrics:
    """Both metrics plus the per-layer counts they are computed from."""

    tb: float
    ald: float
    per_layer_counts: tuple[int, ...]
    mean_count: float


def layer_counts(plan: AssignmentPlan) -> tuple[int, ...]:
    """Number of depths whose sub-network uses each layer, 1-based order."""
    counts = [0] * plan.total_depth
    for d in plan.depths:
        for a in plan[d].layers:
            counts[a - 1] += 1
    return tuple(counts)


def task_balance(plan: AssignmentPlan, sample: bool = True) -> float:
    """Standard deviation of per-layer task counts.

    ``sample=True`` divides by (D - 1); ``sample=False`` divides by D.
    A single-layer plan has no dispersion under the sample convention, so
    it falls back to the population divisor with a warning.
    """
    D = plan.total_depth
    counts = layer_counts(plan)
    mean = sum(counts) / D
    ss = sum((c - mean) ** 2 for c in counts)
    if sample and D == 1:
        warnings.warn(
            "task balance of a single-layer plan uses the population divisor",
            stacklevel=2,
        )
        sample = False
    return math.sqrt(ss / (D - 1 if sample else D))


def average_layer_distance(plan: AssignmentPlan) -> float:
    """Mean gap between adjacent kept layers over all sub-networks.

    Each sub-network of depth d contributes its d-1 adjacent index gaps to
    the numerator; the normalizer is the total number of gaps. Depth-1
    sub-networks contribute to neither.
    """
    z = sum(d - 1 for d in plan.depths)
    if z == 0:
        raise ValueError("average layer distance is undefined for depth set {1}")
    num = 0
    for d in plan.depths:
        layers = plan[d].layers
        num += sum(b - a for a, b in zip(layers, layers[1:]))
    return num / z


def plan_metrics(plan: AssignmentPlan, sample: bool = True) -> PlanMetrics:
    """Bundle TB, ALD, and the underlying counts for one plan."""
    counts = layer_counts(plan)
    return PlanMetrics(
        tb=task_balance(plan, sample=sample),
        ald=average_layer_distance(plan),
        per_layer_counts=counts,
        mean_count=sum(counts) / plan.total_depth,
    )
