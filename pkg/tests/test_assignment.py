import itertools

import pytest

from flexdepth.assignment import (
    STRATEGIES,
    AssignmentError,
    AssignmentPlan,
    SubNetwork,
    assign_optimal,
    build_plan,
    layerdrop_inference_mask,
    parse_plan,
    serialize_plan,
)
from flexdepth.depth_space import divisor_depths, is_composite

D12 = divisor_depths(12)

# frozen layer maps at D=12, checked by hand against each strategy's rule
EXPECTED_12 = {
    "head": {
        1: (1,), 2: (1, 2), 3: (1, 2, 3), 4: (1, 2, 3, 4),
        6: (1, 2, 3, 4, 5, 6), 12: tuple(range(1, 13)),
    },
    "seq": {
        1: (1,), 2: (2, 3), 3: (4, 5, 6), 4: (7, 8, 9, 10),
        6: (7, 8, 9, 10, 11, 12), 12: tuple(range(1, 13)),
    },
    "left": {
        1: (1,), 2: (1, 7), 3: (1, 5, 9), 4: (1, 4, 7, 10),
        6: (1, 3, 5, 7, 9, 11), 12: tuple(range(1, 13)),
    },
    "middleleft": {
        1: (6,), 2: (3, 9), 3: (2, 6, 10), 4: (2, 5, 8, 11),
        6: (1, 3, 5, 7, 9, 11), 12: tuple(range(1, 13)),
    },
    "optimal": {
        1: (7,), 2: (4, 10), 3: (2, 6, 10), 4: (2, 6, 8, 12),
        6: (1, 3, 5, 7, 9, 11), 12: tuple(range(1, 13)),
    },
}


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_frozen_plans_at_twelve(strategy):
    plan = build_plan(D12, strategy)
    got = {d: plan[d].layers for d in plan.depths}
    assert got == EXPECTED_12[strategy]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_full_depth_maps_to_all_layers(strategy):
    for D in (4, 6, 9, 12):
        plan = build_plan(divisor_depths(D), strategy)
        assert plan[D].layers == tuple(range(1, D + 1))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_determinism(strategy):
    a = build_plan(D12, strategy)
    b = build_plan(D12, strategy)
    assert all(a[d].layers == b[d].layers for d in a.depths)


@pytest.mark.parametrize("strategy", ("left", "middleleft", "optimal"))
def test_chunk_property(strategy):
    # each of the d chunks of size D/d contributes exactly one layer
    for D in (4, 6, 8, 12, 16, 18):
        plan = build_plan(divisor_depths(D), strategy)
        for d in plan.depths:
            c = D // d
            layers = plan[d].layers
            for i in range(d):
                lo, hi = 1 + i * c, (i + 1) * c
                assert sum(1 for a in layers if lo <= a <= hi) == 1


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_usage_conservation(strategy):
    for D in (4, 6, 12):
        ds = divisor_depths(D)
        plan = build_plan(ds, strategy)
        total = sum(len(plan[d].layers) for d in plan.depths)
        assert total == sum(ds.depths)


def test_seq_cursor_on_six():
    plan = build_plan(divisor_depths(6), "seq")
    assert plan[1].layers == (1,)
    assert plan[2].layers == (2, 3)
    assert plan[3].layers == (4, 5, 6)
    assert plan[6].layers == (1, 2, 3, 4, 5, 6)


def test_seq_blocks_are_contiguous():
    for D in (4, 6, 8, 12, 16, 24):
        plan = build_plan(divisor_depths(D), "seq")
        for d in plan.depths:
            layers = plan[d].layers
            assert layers == tuple(range(layers[0], layers[0] + d))


def test_optimal_min_max_load_at_four():
    # exhaustive over all chunk-respecting assignments for depth_set {1,2,4}
    plan = assign_optimal(divisor_depths(4))
    counts = [0] * 4
    for d in plan.depths:
        for a in plan[d].layers:
            counts[a - 1] += 1
    loads = []
    for two in itertools.product((1, 2), (3, 4)):
        for one in (1, 2, 3, 4):
            c = [0] * 4
            for a in (1, 2, 3, 4) + two + (one,):
                c[a - 1] += 1
            loads.append(max(c))
    assert max(counts) == min(loads) == 2
    assert max(counts) <= 3


def test_optimal_dominance_at_twelve():
    from flexdepth.metrics import average_layer_distance, task_balance

    plans = {s: build_plan(D12, s) for s in STRATEGIES}
    tb = {s: task_balance(p) for s, p in plans.items()}
    ald = {s: average_layer_distance(p) for s, p in plans.items()}
    for s in ("head", "left", "middleleft"):
        assert tb["optimal"] <= tb[s]
    for s in ("head", "seq"):
        assert ald["optimal"] >= ald[s]


def test_mask_matches_left_at_half_depth():
    mask = layerdrop_inference_mask(12, 6)
    assert mask.layers == (1, 3, 5, 7, 9, 11)
    assert mask.layers == build_plan(D12, "left")[6].layers


def test_mask_left_consistency_brute_force():
    # wherever the pruning period equals the chunk size, the kept set must
    # equal the left assignment; elsewhere the rule either under-prunes or
    # empties out, and both cases are pinned down explicitly
    for D in range(2, 25):
        if not is_composite(D):
            continue
        left = build_plan(divisor_depths(D), "left")
        for d in divisor_depths(D).depths:
            if d == D:
                continue
            period_matches = D // (D - d) == D // d
            if period_matches:
                assert layerdrop_inference_mask(D, d).layers == left[d].layers
            elif 2 * d < D:
                with pytest.raises(AssignmentError):
                    layerdrop_inference_mask(D, d)
            else:
                assert layerdrop_inference_mask(D, d).depth != d


def test_mask_examples():
    assert layerdrop_inference_mask(12, 12).layers == tuple(range(1, 13))
    assert layerdrop_inference_mask(6, 4).layers == (1, 2, 4, 5)


def test_mask_reports_achieved_depth():
    # flooring under-prunes: requesting 7 of 12 keeps only 6
    assert layerdrop_inference_mask(12, 7).depth == 6


def test_mask_rejects_out_of_range():
    with pytest.raises(ValueError):
        layerdrop_inference_mask(12, 0)
    with pytest.raises(ValueError):
        layerdrop_inference_mask(12, 13)


def test_subnetwork_validation():
    with pytest.raises(ValueError):
        SubNetwork(4, (0, 1))
    with pytest.raises(ValueError):
        SubNetwork(4, (1, 5))
    with pytest.raises(ValueError):
        SubNetwork(4, (2, 2))
    with pytest.raises(ValueError):
        SubNetwork(4, (3, 1))


def test_plan_requires_full_depth_coverage():
    with pytest.raises(ValueError):
        AssignmentPlan(4, "head", {4: SubNetwork(4, (1, 2, 3))})


def test_build_plan_rejects_unknown_strategy():
    with pytest.raises(ValueError):
        build_plan(D12, "bogus")


def test_serialization_round_trip():
    for strategy in STRATEGIES:
        plan = build_plan(D12, strategy)
        again = parse_plan(serialize_plan(plan))
        assert again.strategy == plan.strategy
        assert again.total_depth == plan.total_depth
        assert all(again[d].layers == plan[d].layers for d in plan.depths)


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_plan("not a plan\n")
