"""Training loops over the depth grid.

Four entry points share one skeleton: draw a batch, run one forward and
backward pass per task, sum the gradients, apply a single optimizer
update.

* ``pretrain`` trains the full-depth model only.
* ``generate_distillation`` greedy-decodes a source list with the trained
  teacher, yielding the corpus the students fine-tune on.
* ``finetune_multitask`` iterates the depth tasks per step on one shared
  batch, with deterministic gates per task.
* ``finetune_layerdrop`` is the stochastic baseline: the same number of
  accumulated passes, but with freshly drawn Bernoulli gates each pass.

Randomness flows from the config seed through named child streams
(initialization, data, gates), so equal configs reproduce results bit
for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from flexdepth.assignment import AssignmentPlan
from flexdepth.data import DataConfig, make_batch, pad_sources, sample_pairs
from flexdepth.depth_space import DepthGrid
from flexdepth.model import (
    GateVector,
    ModelConfig,
    ModelError,
    Parameters,
    greedy_decode,
    init_params,
    loss_and_grads,
    sample_gates,
)

SCHEDULES = ("inverse_sqrt", "constant")
POLICY_KINDS = ("full", "sample", "fraction")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AccumPolicy:
    """How many task passes to accumulate per optimizer step.

    ``full`` runs every task in the grid; ``sample`` draws n_enc encoder
    depths and n_dec decoder depths per step (full depth always kept on
    both sides); ``fraction`` keeps the full grid but shrinks the shared
    batch to the given token fraction.
    """

    kind: str = "full"
    n_enc: int = 0
    n_dec: int = 0
    fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}, expected one of {POLICY_KINDS}")
        if self.kind == "sample" and (self.n_enc < 1 or self.n_dec < 1):
            raise ValueError("sampled policy needs positive task counts")
        if self.kind == "fraction" and not 0.0 < self.fraction <= 1.0:
            raise ValueError("batch fraction must be in (0, 1]")

    @classmethod
    def full_grid(cls) -> "AccumPolicy":
        return cls("full")

    @classmethod
    def sampled(cls, n_enc: int, n_dec: int) -> "AccumPolicy":
        return cls("sample", n_enc=n_enc, n_dec=n_dec)

    @classmethod
    def batch_fraction(cls, fraction: float) -> "AccumPolicy":
        return cls("fraction", fraction=fraction)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_tokens: int = 512
    peak_lr: float = 1.5e-3
    warmup: int = 40
    schedule: str = "inverse_sqrt"
    seed: int = 0
    policy: AccumPolicy = field(default_factory=AccumPolicy)

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 0 <= self.warmup <= max(self.steps, 1):
            raise ValueError("warmup must lie within the step budget")
        if self.batch_tokens < 1:
            raise ValueError("batch_tokens must be positive")
        if self.peak_lr <= 0.0:
            raise ValueError("peak_lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")


def lr_for_step(train: TrainConfig, step: int) -> float:
    """Learning rate at a 1-based step index."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if train.schedule == "constant":
        return train.peak_lr
    w = max(train.warmup, 1)
    return train.peak_lr * min(step / w, math.sqrt(w / step))


class AdamState:
    """First and second moment estimates, one slot per parameter."""

    def __init__(self, params: Parameters):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-9) -> None:
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass(frozen=True)
class DistillCorpus:
    """Sources paired with teacher-decoded targets."""

    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    excluded: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def save_corpus(corpus: DistillCorpus, path) -> None:
    """One line per pair: source tokens, a tab, target tokens."""
    with open(path, "w") as f:
        f.write(f"# excluded {corpus.excluded}\n")
        for s, t in corpus.pairs:
            f.write(" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) + "\n")


def load_corpus(path) -> DistillCorpus:
    pairs = []
    excluded = 0
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# excluded "):
            raise ValueError(f"{path} is not a corpus file")
        excluded = int(first.split()[-1])
        for line in f:
            left, _, right = line.rstrip("\n").partition("\t")
            pairs.append(
                (tuple(int(t) for t in left.split()), tuple(int(t) for t in right.split()))
            )
    return DistillCorpus(tuple(pairs), excluded)


@dataclass
class TrainResult:
    params: Parameters
    losses: list[float]                      # mean loss per step
    task_log: list[tuple[int, str, float]]   # (step, task label, loss)
    forward_passes: int
    passes_per_step: list[int]


def write_log_csv(task_log, path) -> None:
    with open(path, "w") as f:
        f.write("step,task,loss\n")
        for step, label, loss in task_log:
            f.write(f"{step},{label},{loss!r}\n")


def _pair_list(source):
    if isinstance(source, DataConfig):
        return source
    pairs = list(source.pairs) if isinstance(source, DistillCorpus) else list(source)
    if not pairs:
        raise ValueError("training corpus holds no pairs")
    return pairs


def _draw_batch(source, budget, rng, batch_id):
    """Fill one batch up to ``budget`` target tokens (at least one pair)."""
    pairs = []
    total = 0
    while True:
        if isinstance(source, DataConfig):
            pair = sample_pairs(source, 1, rng)[0]
        else:
            pair = source[int(rng.integers(0, len(source)))]
        cost = len(pair[1]) + 1
        if pairs and total + cost > budget:
            break
        pairs.append(pair)
        total += cost
        if total >= budget:
            break
    return make_batch(pairs, batch_id=batch_id)


def _streams(train: TrainConfig):
    init_ss, data_ss, gate_ss = np.random.SeedSequence(train.seed).spawn(3)
    return init_ss, np.random.default_rng(data_ss), np.random.default_rng(gate_ss)


def _train(params, model_config, source, train, tasks_for_step, data_rng) -> TrainResult:
    """Shared loop. ``tasks_for_step(step) -> (tasks, batch_budget)`` where
    tasks is a list of (label, gates); gradient summation follows that order.
    """
    params = params.copy()
    state = AdamState(params)
    losses: list[float] = []
    task_log: list[tuple[int, str, float]] = []
    passes_per_step: list[int] = []
    forward_passes = 0
    for step in range(1, train.steps + 1):
        tasks, budget = tasks_for_step(step)
        batch = _draw_batch(source, budget, data_rng, batch_id=step)
        total = params.zeros_like()
        step_losses = []
        for label, gates in tasks:
            try:
                loss, grads = loss_and_grads(params, model_config, batch, gates)
            except ModelError as e:
                raise TrainingError(f"training diverged at step {step}: {e}") from None
            for name in total:
                total[name] += grads[name]
            step_losses.append(loss)
            task_log.append((step, label, loss))
            forward_passes += 1
        adam_update(params, total, state, lr_for_step(train, step))
        losses.append(sum(step_losses) / len(step_losses))
        passes_per_step.append(len(tasks))
    return TrainResult(params, losses, task_log, forward_passes, passes_per_step)


def train_full_depth(params, model_config, data, train) -> TrainResult:
    """Continue training an existing model at full depth only."""
    _, data_rng, _ = _streams(train)
    tasks = [("full", GateVector.full(model_config))]
    return _train(
        params, model_config, _pair_list(data), train,
        lambda step: (tasks, train.batch_tokens), data_rng,
    )


def pretrain(model_config: ModelConfig, train: TrainConfig, data) -> TrainResult:
    """Train the full-depth teacher from a fresh initialization."""
    init_ss, _, _ = _streams(train)
    params = init_params(model_config, init_ss)
    return train_full_depth(params, model_config, data, train)


def generate_distillation(teacher: Parameters, model_config: ModelConfig, sources,
                          max_len: int | None = None, chunk_rows: int = 64) -> DistillCorpus:
    """Greedy-decode every source with the full-depth teacher.

    Empty decodes are excluded from the corpus and counted.
    """
    gates = GateVector.full(model_config)
    limit = model_config.max_len if max_len is None else max_len
    pairs = []
    excluded = 0
    for start in range(0, len(sources), chunk_rows):
        chunk = sources[start : start + chunk_rows]
        src, mask = pad_sources(chunk)
        outs = greedy_decode(teacher, model_config, src, mask, gates, limit)
        for s, out in zip(chunk, outs):
            if out:
                pairs.append((tuple(s), out))
            else:
                excluded += 1
    return DistillCorpus(tuple(pairs), excluded)


def sample_tasks(grid: DepthGrid, n_enc: int, n_dec: int, rng) -> list[tuple[int, int]]:
    """Uniform task subset, always keeping full depth on each side."""
    if n_enc < 1 or n_dec < 1:
        raise ValueError("task sample counts must be positive")
    if n_enc > len(grid.encoder.depths) or n_dec > len(grid.decoder.depths):
        raise ValueError("task sample counts exceed the grid's depth counts")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    def pick(depths, n, full):
        rest = [d for d in depths if d != full]
        take = n - 1
        chosen = rng.choice(len(rest), size=take, replace=False) if take else []
        return sorted([full] + [rest[int(i)] for i in chosen])

    enc = pick(grid.encoder.depths, n_enc, grid.encoder.total_depth)
    dec = pick(grid.decoder.depths, n_dec, grid.decoder.total_depth)
    return [(m, n) for m in enc for n in dec]


def _check_plan(plan: AssignmentPlan, depth_set, side: str, model_layers: int) -> None:
    if plan.total_depth != model_layers:
        raise ValueError(f"{side} plan depth {plan.total_depth} does not match model ({model_layers})")
    if depth_set.total_depth != model_layers:
        raise ValueError(f"{side} grid depth {depth_set.total_depth} does not match model ({model_layers})")
    missing = [d for d in depth_set.depths if d not in plan.depths]
    if missing:
        raise ValueError(f"{side} plan is missing sub-networks for depths {missing}")


def finetune_multitask(init: Parameters, model_config: ModelConfig, corpus,
                       grid: DepthGrid, enc_plan: AssignmentPlan,
                       dec_plan: AssignmentPlan, train: TrainConfig) -> TrainResult:
    """One optimizer step per shared batch, summing gradients over tasks."""
    _check_plan(enc_plan, grid.encoder, "encoder", model_config.enc_layers)
    _check_plan(dec_plan, grid.decoder, "decoder", model_config.dec_layers)
    policy = train.policy
    if policy.kind == "sample":
        if policy.n_enc > len(grid.encoder.depths) or policy.n_dec > len(grid.decoder.depths):
            raise ValueError("sampled task counts exceed the grid's depth counts")

    gates = {
        (m, n): GateVector.from_subnetworks(enc_plan[m], dec_plan[n])
        for m, n in grid.tasks
    }
    all_tasks = [(f"{m}-{n}", gates[(m, n)]) for m, n in grid.tasks]
    _, data_rng, gate_rng = _streams(train)

    def tasks_for_step(step):
        if policy.kind == "full":
            return all_tasks, train.batch_tokens
        if policy.kind == "fraction":
            return all_tasks, max(1, round(train.batch_tokens * policy.fraction))
        subset = sample_tasks(grid, policy.n_enc, policy.n_dec, gate_rng)
        return [(f"{m}-{n}", gates[(m, n)]) for m, n in subset], train.batch_tokens

    return _train(init, model_config, _pair_list(corpus), train, tasks_for_step, data_rng)


def finetune_layerdrop(init: Parameters, model_config: ModelConfig, corpus,
                       p: float, accum: int, train: TrainConfig) -> TrainResult:
    """Cost-matched baseline: ``accum`` fresh batches per step, each with
    independently drawn Bernoulli gates, then one optimizer update."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"drop probability must be in (0, 1), got {p}")
    if accum < 1:
        raise ValueError("accum must be positive")
    source = _pair_list(corpus)
    _, data_rng, gate_rng = _streams(train)
    params = init.copy()
    state = AdamState(params)
    losses: list[float] = []
    task_log: list[tuple[int, str, float]] = []
    passes_per_step: list[int] = []
    forward_passes = 0
    for step in range(1, train.steps + 1):
        total = params.zeros_like()
        step_losses = []
        for a in range(accum):
            batch = _draw_batch(source, train.batch_tokens, data_rng,
                                batch_id=(step - 1) * accum + a + 1)
            gv = sample_gates(p, model_config, gate_rng)
            try:
                loss, grads = loss_and_grads(params, model_config, batch, gv)
            except ModelError as e:
                raise TrainingError(f"training diverged at step {step}: {e}") from None
            for name in total:
                total[name] += grads[name]
            step_losses.append(loss)
            task_log.append((step, "drop", loss))
            forward_passes += 1
        adam_update(params, total, state, lr_for_step(train, step))
        losses.append(sum(step_losses) / len(step_losses))
        passes_per_step.append(accum)
    return TrainResult(params, losses, task_log, forward_passes, passes_per_step)
