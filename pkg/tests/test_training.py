"""Optimizer, schedules, corpus handling, and the four training loops."""

import math

import numpy as np
import pytest

from flexdepth.assignment import build_plan
from flexdepth.data import DataConfig, sample_pairs
from flexdepth.depth_space import divisor_depths, task_grid
from flexdepth.model import GateVector, ModelConfig, init_params
from flexdepth.training import (
    AccumPolicy,
    AdamState,
    DistillCorpus,
    TrainConfig,
    TrainingError,
    _draw_batch,
    _streams,
    adam_update,
    finetune_layerdrop,
    finetune_multitask,
    generate_distillation,
    load_corpus,
    lr_for_step,
    pretrain,
    sample_tasks,
    save_corpus,
    train_full_depth,
    write_log_csv,
)

MODEL = ModelConfig(enc_layers=2, dec_layers=2, width=16, heads=2,
                    ffn_width=20, vocab_size=10, max_len=14)
DATA = DataConfig(task="copy", vocab_size=10, min_len=3, max_len=5)


def tiny_train(**kw):
    base = dict(steps=3, batch_tokens=48, peak_lr=1e-3, warmup=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_policy_validation():
    with pytest.raises(ValueError):
        AccumPolicy(kind="greedy")
    with pytest.raises(ValueError):
        AccumPolicy.sampled(0, 2)
    with pytest.raises(ValueError):
        AccumPolicy.batch_fraction(0.0)
    with pytest.raises(ValueError):
        AccumPolicy.batch_fraction(1.5)
    assert AccumPolicy.full_grid().kind == "full"
    assert AccumPolicy.sampled(2, 3).n_dec == 3
    assert AccumPolicy.batch_fraction(0.5).fraction == 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(steps=5, warmup=6)
    with pytest.raises(ValueError):
        TrainConfig(batch_tokens=0)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    # A zero-step config still admits warmup 1 (the lone virtual step).
    TrainConfig(steps=0, warmup=1)
    with pytest.raises(ValueError):
        TrainConfig(steps=0, warmup=2)


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=100, warmup=10, peak_lr=2e-3)
    with pytest.raises(ValueError):
        lr_for_step(cfg, 0)
    assert lr_for_step(cfg, 5) == pytest.approx(2e-3 * 0.5)
    assert lr_for_step(cfg, 10) == pytest.approx(2e-3)
    assert lr_for_step(cfg, 40) == pytest.approx(2e-3 * 0.5)
    flat = TrainConfig(steps=10, warmup=0, schedule="constant", peak_lr=7e-4)
    assert lr_for_step(flat, 1) == lr_for_step(flat, 10) == 7e-4
    ramp = TrainConfig(steps=10, warmup=0)
    assert lr_for_step(ramp, 1) == pytest.approx(ramp.peak_lr)


def test_adam_first_step_closed_form():
    params = init_params(MODEL, seed=0)
    before = params.copy()
    state = AdamState(params)
    grads = {name: np.full_like(v, 0.5) for name, v in params.items()}
    adam_update(params, grads, state, lr=1e-2)
    assert state.t == 1
    # With constant gradient g the bias corrections cancel on step one:
    # update = lr * g / (|g| + eps).
    expected = 1e-2 * 0.5 / (0.5 + 1e-9)
    for name, v in params.items():
        np.testing.assert_allclose(before[name] - v, expected, rtol=1e-9)


def test_corpus_round_trip(tmp_path):
    corpus = DistillCorpus((((4, 5), (5, 4)), ((6, 7, 8), (8, 7, 6))), excluded=2)
    path = tmp_path / "corpus.txt"
    save_corpus(corpus, path)
    loaded = load_corpus(path)
    assert loaded == corpus
    assert len(loaded) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("4 5\t5 4\n")
    with pytest.raises(ValueError):
        load_corpus(bad)


def test_log_csv_format(tmp_path):
    path = tmp_path / "log.csv"
    write_log_csv([(1, "full", 0.5), (2, "2-1", 0.25)], path)
    assert path.read_text() == "step,task,loss\n1,full,0.5\n2,2-1,0.25\n"


def test_draw_batch_respects_token_budget():
    rng = np.random.default_rng(0)
    pairs = sample_pairs(DATA, 50, rng)
    for budget in (8, 16, 48):
        batch = _draw_batch(pairs, budget, rng, batch_id=1)
        assert batch.n_tokens <= budget
        assert batch.src.shape[0] >= 1
    # A budget below any single pair still yields one pair.
    one = _draw_batch(pairs, 1, rng, batch_id=2)
    assert one.src.shape[0] == 1


def test_zero_steps_returns_initial_params():
    params = init_params(MODEL, seed=5)
    result = train_full_depth(params, MODEL, DATA, tiny_train(steps=0, warmup=0))
    assert result.params.equal(params)
    assert result.params is not params
    assert result.losses == [] and result.forward_passes == 0


def test_training_is_deterministic_and_seed_sensitive():
    params = init_params(MODEL, seed=1)
    cfg = tiny_train(steps=4)
    a = train_full_depth(params, MODEL, DATA, cfg)
    b = train_full_depth(params, MODEL, DATA, cfg)
    c = train_full_depth(params, MODEL, DATA, tiny_train(steps=4, seed=9))
    assert a.params.equal(b.params)
    assert a.losses == b.losses
    assert a.task_log == b.task_log
    assert not a.params.equal(c.params)


def test_pretrain_is_seeded_init_plus_full_depth_training():
    cfg = tiny_train(steps=3, seed=7)
    direct = pretrain(MODEL, cfg, DATA)
    init_ss, _, _ = _streams(cfg)
    manual = train_full_depth(init_params(MODEL, init_ss), MODEL, DATA, cfg)
    assert direct.params.equal(manual.params)
    assert direct.losses == manual.losses


def test_losses_decrease_over_training():
    cfg = TrainConfig(steps=60, batch_tokens=128, peak_lr=2e-3, warmup=10, seed=0)
    result = pretrain(MODEL, cfg, DATA)
    head = sum(result.losses[:5]) / 5
    tail = sum(result.losses[-5:]) / 5
    assert tail < head * 0.7


def test_distillation_excludes_empty_decodes():
    params = init_params(MODEL, seed=2)
    sources = [s for s, _ in sample_pairs(DATA, 40, np.random.default_rng(3))]
    corpus = generate_distillation(params, MODEL, sources, chunk_rows=7)
    assert len(corpus) + corpus.excluded == 40
    for s, t in corpus.pairs:
        assert t, "empty decode slipped into the corpus"
        assert s in [tuple(x) for x in sources]


def test_sample_tasks_always_keeps_full_depth():
    grid = task_grid(4, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        subset = sample_tasks(grid, 2, 2, rng)
        assert len(subset) == 4
        enc = {m for m, _ in subset}
        dec = {n for _, n in subset}
        assert 4 in enc and 4 in dec
        assert subset == sorted(subset)
    with pytest.raises(ValueError):
        sample_tasks(grid, 0, 1, rng)
    with pytest.raises(ValueError):
        sample_tasks(grid, 5, 1, rng)


def finetune_args(model=MODEL, grid=None):
    grid = grid or task_grid(model.enc_layers, model.dec_layers)
    enc_plan = build_plan(grid.encoder, "seq")
    dec_plan = build_plan(grid.decoder, "seq")
    corpus = DistillCorpus(tuple(sample_pairs(DATA, 60, np.random.default_rng(8))))
    return grid, enc_plan, dec_plan, corpus


def test_full_policy_cost_accounting():
    grid, enc_plan, dec_plan, corpus = finetune_args()
    init = init_params(MODEL, seed=3)
    cfg = tiny_train(steps=3)
    result = finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan, cfg)
    assert result.forward_passes == 3 * len(grid.tasks)
    assert result.passes_per_step == [len(grid.tasks)] * 3
    labels = {label for _, label, _ in result.task_log}
    assert labels == {f"{m}-{n}" for m, n in grid.tasks}


def test_sampled_policy_cost_accounting():
    grid, enc_plan, dec_plan, corpus = finetune_args()
    init = init_params(MODEL, seed=3)
    cfg = tiny_train(steps=4, policy=AccumPolicy.sampled(2, 1))
    result = finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan, cfg)
    assert result.forward_passes == 4 * 2 * 1
    assert result.passes_per_step == [2] * 4
    for _, label, _ in result.task_log:
        m, n = label.split("-")
        assert int(m) in grid.encoder.depths and int(n) in grid.decoder.depths


def test_fraction_policy_keeps_grid_but_shrinks_batches():
    grid, enc_plan, dec_plan, corpus = finetune_args()
    init = init_params(MODEL, seed=3)
    full = finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan,
                              tiny_train(steps=2))
    frac = finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan,
                              tiny_train(steps=2, policy=AccumPolicy.batch_fraction(0.25)))
    assert frac.passes_per_step == full.passes_per_step
    assert frac.losses != full.losses


def test_plan_grid_model_mismatches_are_rejected():
    grid, enc_plan, dec_plan, corpus = finetune_args()
    init = init_params(MODEL, seed=0)
    wrong_plan = build_plan(divisor_depths(4), "seq")
    with pytest.raises(ValueError):
        finetune_multitask(init, MODEL, corpus, grid, wrong_plan, dec_plan, tiny_train())
    with pytest.raises(ValueError):
        finetune_multitask(init, MODEL, corpus, task_grid(4, 2), enc_plan, dec_plan,
                           tiny_train())
    with pytest.raises(ValueError):
        finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan,
                           tiny_train(policy=AccumPolicy.sampled(3, 1)))


def test_singleton_grid_equals_plain_training():
    # With one layer per stack the grid collapses to the full-depth task,
    # so multitask finetuning must reproduce plain training bit for bit.
    model = ModelConfig(enc_layers=1, dec_layers=1, width=16, heads=2,
                        ffn_width=20, vocab_size=10, max_len=14)
    grid = task_grid(1, 1)
    enc_plan = build_plan(grid.encoder, "seq")
    dec_plan = build_plan(grid.decoder, "seq")
    corpus = DistillCorpus(tuple(sample_pairs(DATA, 40, np.random.default_rng(2))))
    init = init_params(model, seed=4)
    cfg = tiny_train(steps=5)
    multi = finetune_multitask(init, model, corpus, grid, enc_plan, dec_plan, cfg)
    plain = train_full_depth(init, model, corpus, cfg)
    assert multi.params.equal(plain.params)
    assert multi.losses == plain.losses


def test_layerdrop_validation_and_accounting():
    _, _, _, corpus = finetune_args()
    init = init_params(MODEL, seed=6)
    with pytest.raises(ValueError):
        finetune_layerdrop(init, MODEL, corpus, p=0.0, accum=2, train=tiny_train())
    with pytest.raises(ValueError):
        finetune_layerdrop(init, MODEL, corpus, p=1.0, accum=2, train=tiny_train())
    with pytest.raises(ValueError):
        finetune_layerdrop(init, MODEL, corpus, p=0.2, accum=0, train=tiny_train())
    result = finetune_layerdrop(init, MODEL, corpus, p=0.2, accum=3, train=tiny_train(steps=4))
    assert result.forward_passes == 12
    assert result.passes_per_step == [3] * 4
    assert {label for _, label, _ in result.task_log} == {"drop"}
    again = finetune_layerdrop(init, MODEL, corpus, p=0.2, accum=3, train=tiny_train(steps=4))
    assert result.params.equal(again.params)


def test_multitask_gradient_sum_matches_manual_accumulation():
    from flexdepth.model import loss_and_grads
    from flexdepth.training import AdamState as _State

    grid, enc_plan, dec_plan, corpus = finetune_args()
    init = init_params(MODEL, seed=9)
    cfg = tiny_train(steps=1)
    result = finetune_multitask(init, MODEL, corpus, grid, enc_plan, dec_plan, cfg)

    # Replay the single step by hand in the grid's task order.
    _, data_rng, _ = _streams(cfg)
    batch = _draw_batch(list(corpus.pairs), cfg.batch_tokens, data_rng, batch_id=1)
    params = init.copy()
    total = params.zeros_like()
    for m, n in grid.tasks:
        gv = GateVector.from_subnetworks(enc_plan[m], dec_plan[n])
        _, grads = loss_and_grads(params, MODEL, batch, gv)
        for name in total:
            total[name] += grads[name]
    state = _State(params)
    adam_update(params, total, state, lr_for_step(cfg, 1))
    assert result.params.equal(params)


def test_empty_corpus_is_rejected_up_front():
    init = init_params(MODEL, seed=0)
    with pytest.raises(ValueError, match="no pairs"):
        train_full_depth(init, MODEL, DistillCorpus(()), tiny_train(steps=1))
    with pytest.raises(ValueError, match="no pairs"):
        finetune_layerdrop(init, MODEL, [], p=0.2, accum=1, train=tiny_train(steps=1))


def test_divergence_raises_training_error():
    params = init_params(MODEL, seed=0)
    # Large enough that the logit reduction overflows to inf.
    params["out.w"][:] = 1e308
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="diverged at step 1"):
        train_full_depth(params, MODEL, DATA, tiny_train(steps=1))


def test_schedule_peak_reached_exactly_at_warmup_end():
    cfg = TrainConfig(steps=50, warmup=25, peak_lr=1e-3)
    values = [lr_for_step(cfg, t) for t in range(1, 51)]
    assert max(values) == values[24]
    assert values[24] == pytest.approx(1e-3)
    assert all(a < b for a, b in zip(values[:24], values[1:25]))
    assert all(a > b for a, b in zip(values[24:-1], values[25:]))
    assert math.isclose(values[-1], 1e-3 * math.sqrt(25 / 50))
