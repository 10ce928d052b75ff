"""Deterministic sub-network assignment for every supported depth.

Each strategy maps every depth d in a :class:`DepthSet` to the d layer
indices kept when running at that depth. All strategies are pure functions:
the same depth set always yields the same plan, so the sub-network used in
training is exactly the one used at inference.

Strategies
----------
head        the first d layers
seq         contiguous blocks, each depth continuing where the previous left off
left        leftmost layer of each of the d equal chunks (the stochastic
            layer-drop pruning rule, extended to all divisor depths)
middleleft  left-of-middle layer of each chunk
optimal     chunk-based selection with alive/dead usage bookkeeping that
            spreads task load while keeping layers far apart
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from flexdepth.depth_space import DepthSet

STRATEGIES = ("head", "seq", "left", "middleleft", "optimal")


class AssignmentError(RuntimeError):
    """Raised when a strategy cannot produce a valid plan."""


@dataclass(frozen=True)
class SubNetwork:
    """The ordered 1-based layer indices kept when running at one depth."""

    total_depth: int
    layers: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(not 1 <= a <= self.total_depth for a in self.layers):
            raise ValueError(f"layer indices out of range 1..{self.total_depth}: {self.layers}")
        if list(self.layers) != sorted(set(self.layers)):
            raise ValueError(f"layer indices must be strictly increasing: {self.layers}")

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class AssignmentPlan:
    """Map from every supported depth to its deterministic sub-network."""

    total_depth: int
    strategy: str
    subnetworks: dict[int, SubNetwork]

    def __post_init__(self) -> None:
        full = self.subnetworks.get(self.total_depth)
        if full is None or full.layers != tuple(range(1, self.total_depth + 1)):
            raise ValueError("full depth must map to all layers")
        for d, sn in self.subnetworks.items():
            if sn.depth != d:
                raise ValueError(f"sub-network for depth {d} has {sn.depth} layers")
            if sn.total_depth != self.total_depth:
                raise ValueError("sub-network total depth mismatch")

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(sorted(self.subnetworks))

    def __getitem__(self, depth: int) -> SubNetwork:
        return self.subnetworks[depth]


class LayerUsage:
    """Per-layer task-participation counts and alive/dead selection state.

    The optimal strategy marks a layer dead once a depth uses it, so later
    depths prefer untouched layers; a reset revives every layer while the
    accumulated counts persist.
    """

    def __init__(self, total_depth: int):
        self.total_depth = total_depth
        self.counts = [0] * total_depth
        self.alive = [True] * total_depth

    def use(self, layer: int) -> None:
        self.counts[layer - 1] += 1
        self.alive[layer - 1] = False

    def reset(self) -> None:
        self.alive = [True] * self.total_depth

    def all_dead(self) -> bool:
        return not any(self.alive)


def _chunk_starts(total_depth: int, depth: int) -> list[int]:
    if total_depth % depth != 0:
        raise AssignmentError(f"depth {depth} does not divide {total_depth}")
    c = total_depth // depth
    return [1 + i * c for i in range(depth)]


def _middle_left_offset(chunk_size: int) -> int:
    # 0-based position inside the chunk, one left of the middle for even sizes
    return math.ceil(chunk_size / 2) - 1


def assign_head(depth_set: DepthSet) -> AssignmentPlan:
    """Every depth keeps its first d layers."""
    subs = {
        d: SubNetwork(depth_set.total_depth, tuple(range(1, d + 1))) for d in depth_set
    }
    return AssignmentPlan(depth_set.total_depth, "head", subs)


def assign_seq(depth_set: DepthSet) -> AssignmentPlan:
    """Contiguous blocks that continue where the previous depth stopped.

    Depths are processed ascending with a cursor. A block that would run
    past the last layer is shifted back to end exactly at layer D (keeping
    it contiguous), and the cursor wraps to layer 1 afterwards.
    """
    D = depth_set.total_depth
    subs: dict[int, SubNetwork] = {}
    cursor = 1
    for d in depth_set:
        if cursor + d - 1 <= D:
            block = range(cursor, cursor + d)
            cursor += d
        else:
            block = range(D - d + 1, D + 1)
            cursor = 1
        subs[d] = SubNetwork(D, tuple(block))
    return AssignmentPlan(D, "seq", subs)


def assign_left(depth_set: DepthSet) -> AssignmentPlan:
    """Leftmost layer of each of the d chunks of size D/d."""
    D = depth_set.total_depth
    subs = {d: SubNetwork(D, tuple(_chunk_starts(D, d))) for d in depth_set}
    return AssignmentPlan(D, "left", subs)


def assign_middle_left(depth_set: DepthSet) -> AssignmentPlan:
    """Left-of-middle layer of each chunk."""
    D = depth_set.total_depth
    subs = {}
    for d in depth_set:
        off = _middle_left_offset(D // d)
        subs[d] = SubNetwork(D, tuple(s + off for s in _chunk_starts(D, d)))
    return AssignmentPlan(D, "middleleft", subs)


def assign_optimal(depth_set: DepthSet) -> AssignmentPlan:
    """Chunked selection balancing task load against layer spread.

    Depths are processed descending. For each depth, every chunk contributes
    its alive layer with the lowest usage count; ties prefer the layer
    closest to the chunk's middle-left position, then the larger index.
    Chosen layers become dead. A depth whose chunks cannot all supply an
    alive layer is deferred; when nothing can be placed or every layer is
    dead, all layers revive and deferred depths are retried first.
    """
    D = depth_set.total_depth
    usage = LayerUsage(D)
    subs: dict[int, SubNetwork] = {}
    pending = deque(sorted(depth_set, reverse=True))
    deferred: list[int] = []
    resets = 0
    max_resets = len(depth_set) + 1

    def revive() -> None:
        nonlocal pending, deferred, resets
        usage.reset()
        pending = deque(sorted(deferred + list(pending), reverse=True))
        deferred = []
        resets += 1
        if resets > max_resets:
            raise AssignmentError(
                f"could not place every depth of {tuple(depth_set)} within {max_resets} resets"
            )

    while pending or deferred:
        if not pending:
            revive()
        d = pending.popleft()
        c = D // d
        starts = _chunk_starts(D, d)
        if not all(any(usage.alive[j - 1] for j in range(s, s + c)) for s in starts):
            deferred.append(d)
            continue
        chosen = []
        target_off = _middle_left_offset(c)
        for s in starts:
            candidates = [j for j in range(s, s + c) if usage.alive[j - 1]]
            chosen.append(
                min(
                    candidates,
                    key=lambda j: (usage.counts[j - 1], abs(j - (s + target_off)), -j),
                )
            )
        for j in chosen:
            usage.use(j)
        subs[d] = SubNetwork(D, tuple(sorted(chosen)))
        if usage.all_dead() and (pending or deferred):
            revive()

    plan = AssignmentPlan(D, "optimal", subs)
    _check_usage_conservation(plan, usage)
    return plan


def _check_usage_conservation(plan: AssignmentPlan, usage: LayerUsage) -> None:
    if sum(usage.counts) != sum(plan.depths):
        raise AssignmentError("usage counts do not cover every task exactly once")


_BUILDERS = {
    "head": assign_head,
    "seq": assign_seq,
    "left": assign_left,
    "middleleft": assign_middle_left,
    "optimal": assign_optimal,
}


def build_plan(depth_set: DepthSet, strategy: str) -> AssignmentPlan:
    """Dispatch to one of the named strategies."""
    try:
        builder = _BUILDERS[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}") from None
    return builder(depth_set)


def layerdrop_inference_mask(total_depth: int, inference_depth: int) -> SubNetwork:
    """Kept layers under the stochastic layer-drop pruning rule.

    With pruning ratio p' = 1 - inference_depth / total_depth, every layer
    whose 1-based index is a multiple of floor(1/p') is removed. Flooring
    means the achieved depth can differ from the requested one; the result
    reports what was actually kept. A ratio past 1/2 floors to 1 and would
    remove every layer, which is rejected.
    """
    if not 1 <= inference_depth <= total_depth:
        raise ValueError(
            f"inference depth must be in 1..{total_depth}, got {inference_depth}"
        )
    if inference_depth == total_depth:
        return SubNetwork(total_depth, tuple(range(1, total_depth + 1)))
    # floor(1/p') computed in exact integer arithmetic: 1/p' = D/(D - D_inf)
    period = total_depth // (total_depth - inference_depth)
    kept = tuple(i for i in range(1, total_depth + 1) if i % period != 0)
    if not kept:
        raise AssignmentError(
            f"pruning ratio {(total_depth - inference_depth) / total_depth:.3f} "
            f"removes every layer (period {period})"
        )
    return SubNetwork(total_depth, kept)


def serialize_plan(plan: AssignmentPlan) -> str:
    """Render a plan as a stable, diffable text document."""
    lines = [f"strategy {plan.strategy}", f"depth {plan.total_depth}"]
    for d in plan.depths:
        lines.append(f"{d}: " + " ".join(str(a) for a in plan[d].layers))
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> AssignmentPlan:
    """Inverse of :func:`serialize_plan`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3 or not lines[0].startswith("strategy ") or not lines[1].startswith("depth "):
        raise ValueError("malformed plan document")
    strategy = lines[0].split(None, 1)[1]
    total_depth = int(lines[1].split(None, 1)[1])
    subs = {}
    for ln in lines[2:]:
        head, _, rest = ln.partition(":")
        subs[int(head)] = SubNetwork(total_depth, tuple(int(t) for t in rest.split()))
    return AssignmentPlan(total_depth, strategy, subs)
