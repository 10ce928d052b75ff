"""Command line driver.

Subcommands:
  plan       build one strategy's sub-network plan, print its metrics
  metrics    print the five-strategy metric table for one depth
  pretrain   train the full-depth teacher
  distill    greedy-decode a source corpus with the teacher
  finetune   multi-task fine-tuning, or the layer-drop baseline
  eval-grid  accuracy at every (encoder depth, decoder depth) task
  report     cellwise delta between two saved grids
  pipeline   all stages in order, ending with a delta report

Configs are JSON with full defaulting: any subset of DEFAULT_CONFIG's
keys may be given, the rest fill in, unknown keys are rejected. Exit
codes: 0 success, 2 usage, 3 invalid configuration or input, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from flexdepth.assignment import (
    STRATEGIES,
    AssignmentError,
    build_plan,
    serialize_plan,
)
from flexdepth.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from flexdepth.data import DataConfig, evaluation_set, sample_pairs
from flexdepth.depth_space import divisor_depths, is_composite, task_grid
from flexdepth.evaluation import (
    delta_report,
    evaluate_grid,
    grid_from_csv,
    grid_to_csv,
    grid_to_text,
    report_to_text,
    vanilla_truncation_probe,
)
from flexdepth.metrics import plan_metrics
from flexdepth.model import ModelConfig, ModelError
from flexdepth.training import (
    AccumPolicy,
    TrainConfig,
    TrainingError,
    finetune_layerdrop,
    finetune_multitask,
    generate_distillation,
    load_corpus,
    pretrain,
    save_corpus,
    write_log_csv,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "strategy": "seq",
    "data": {"task": "copy", "vocab_size": 16, "min_len": 3, "max_len": 8},
    "model": {"enc_layers": 4, "dec_layers": 2, "width": 32, "heads": 2,
              "ffn_width": 64, "max_len": 12},
    "pretrain": {"steps": 700, "batch_tokens": 512, "peak_lr": 1.5e-3,
                 "warmup": 140, "schedule": "inverse_sqrt"},
    "finetune": {"steps": 250, "batch_tokens": 512, "peak_lr": 5e-4,
                 "warmup": 70, "schedule": "inverse_sqrt",
                 "policy": {"kind": "full", "n_enc": 0, "n_dec": 0, "fraction": 0.0}},
    "drop_p": 0.2,
    "accum": 0,
    "distill_size": 512,
    "eval_size": 128,
}

ARM_CHOICES = STRATEGIES + ("layerdrop",)


class UsageError(Exception):
    pass


def _merge(base, user, path="config"):
    for key, value in user.items():
        if key not in base:
            raise ValueError(f"unknown key {path}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"{path}.{key} must be an object")
            _merge(base[key], value, f"{path}.{key}")
        else:
            base[key] = value


def load_config(path) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        if not isinstance(user, dict):
            raise ValueError(f"{path} must hold a JSON object")
        _merge(cfg, user)
    if cfg["strategy"] not in ARM_CHOICES:
        raise ValueError(f"unknown strategy {cfg['strategy']!r}, expected one of {ARM_CHOICES}")
    return cfg


def _data_config(cfg) -> DataConfig:
    return DataConfig(**cfg["data"])


def _model_config(cfg) -> ModelConfig:
    model = dict(cfg["model"])
    model["vocab_size"] = cfg["data"]["vocab_size"]
    mc = ModelConfig(**model)
    if mc.max_len < cfg["data"]["max_len"] + 2:
        raise ValueError("model max_len too small for the data length range")
    return mc


def _train_config(section, seed) -> TrainConfig:
    section = dict(section)
    policy = section.pop("policy", None)
    if policy is not None:
        section["policy"] = AccumPolicy(**policy)
    return TrainConfig(seed=seed, **section)


def _plans(cfg, model_config):
    # the stochastic baseline has no plan of its own; its inference rule
    # keeps the leftmost layer of each chunk, so it is scored under left
    name = cfg["strategy"]
    plan_strategy = "left" if name == "layerdrop" else name
    enc = build_plan(divisor_depths(model_config.enc_layers), plan_strategy)
    dec = build_plan(divisor_depths(model_config.dec_layers), plan_strategy)
    return enc, dec


def _base_seed(args, cfg) -> int:
    return cfg["seed"] if args.seed is None else args.seed


def _require(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for this command")
    return getattr(args, name)


def _out_dir(args) -> Path:
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    config, params, meta = load_checkpoint(path)
    return config, params, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(args) -> None:
    depth_set = divisor_depths(args.depth)
    plan = build_plan(depth_set, args.strategy)
    text = serialize_plan(plan)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    pm = plan_metrics(plan)
    print(f"TB {pm.tb:.4f}")
    print(f"ALD {pm.ald:.4f}")


def cmd_metrics(args) -> None:
    if not is_composite(args.depth):
        raise ValueError(
            f"depth {args.depth} has no nontrivial divisors; the metric table "
            "needs a composite depth"
        )
    depth_set = divisor_depths(args.depth)
    rows = [(name, plan_metrics(build_plan(depth_set, name))) for name in STRATEGIES]
    lines = [f"depth {args.depth}, depth set {list(depth_set.depths)}",
             f"{'strategy':<12}{'TB':>8}{'ALD':>8}"]
    for name, pm in rows:
        lines.append(f"{name:<12}{pm.tb:>8.4f}{pm.ald:>8.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        if out.suffix == ".csv":
            out.write_text("strategy,tb,ald\n" + "".join(
                f"{name},{pm.tb!r},{pm.ald!r}\n" for name, pm in rows
            ))
        else:
            out.write_text(text)
    print(text, end="")


def _run_pretrain(cfg, seed, out: Path, verbose: bool):
    model_config = _model_config(cfg)
    train = _train_config(cfg["pretrain"], seed)
    result = pretrain(model_config, train, _data_config(cfg))
    save_checkpoint(out / "teacher.ckpt", model_config, result.params,
                    {"stage": "pretrain", "seed": seed})
    write_log_csv(result.task_log, out / "pretrain_log.csv")
    if verbose and result.losses:
        print(f"pretrain final loss {result.losses[-1]:.4f}")
    return model_config, result


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    out = _out_dir(args)
    _run_pretrain(cfg, _base_seed(args, cfg), out, args.verbose)
    print(f"wrote {out / 'teacher.ckpt'}")


def _run_distill(cfg, seed, teacher_config, teacher_params, out_path: Path):
    data = _data_config(cfg)
    if teacher_config.vocab_size != data.vocab_size:
        raise ValueError("checkpoint vocabulary does not match the data config")
    rng = np.random.default_rng(seed + 2)
    sources = [s for s, _ in sample_pairs(data, cfg["distill_size"], rng)]
    corpus = generate_distillation(teacher_params, teacher_config, sources)
    save_corpus(corpus, out_path)
    return corpus


def cmd_distill(args) -> None:
    cfg = load_config(args.config)
    ckpt = _require(args, "checkpoint")
    out = Path(_require(args, "out"))
    teacher_config, teacher_params, _ = _load_model(ckpt)
    corpus = _run_distill(cfg, _base_seed(args, cfg), teacher_config, teacher_params, out)
    print(f"wrote {out}: {len(corpus)} pairs, {corpus.excluded} excluded")


def _run_finetune(cfg, seed, model_config, init_params, corpus, out: Path):
    train = _train_config(cfg["finetune"], seed + 1)
    grid = task_grid(model_config.enc_layers, model_config.dec_layers)
    if cfg["strategy"] == "layerdrop":
        accum = cfg["accum"] or len(grid.tasks)
        result = finetune_layerdrop(init_params, model_config, corpus,
                                    cfg["drop_p"], accum, train)
    else:
        enc_plan, dec_plan = _plans(cfg, model_config)
        result = finetune_multitask(init_params, model_config, corpus, grid,
                                    enc_plan, dec_plan, train)
    save_checkpoint(out / "student.ckpt", model_config, result.params,
                    {"stage": "finetune", "strategy": cfg["strategy"], "seed": seed})
    write_log_csv(result.task_log, out / "finetune_log.csv")
    return result


def cmd_finetune(args) -> None:
    cfg = load_config(args.config)
    ckpt = _require(args, "checkpoint")
    corpus = load_corpus(_require(args, "corpus"))
    out = _out_dir(args)
    model_config, params, _ = _load_model(ckpt)
    _run_finetune(cfg, _base_seed(args, cfg), model_config, params, corpus, out)
    print(f"wrote {out / 'student.ckpt'}")


def _eval_pairs(cfg, seed):
    return evaluation_set(_data_config(cfg), cfg["eval_size"], seed + 3)


def cmd_eval_grid(args) -> None:
    cfg = load_config(args.config)
    ckpt = _require(args, "checkpoint")
    out = _out_dir(args)
    model_config, params, _ = _load_model(ckpt)
    enc_plan, dec_plan = _plans(cfg, model_config)
    grid = task_grid(model_config.enc_layers, model_config.dec_layers)
    pairs = _eval_pairs(cfg, _base_seed(args, cfg))
    tag = args.tag or Path(ckpt).stem
    result = evaluate_grid(params, model_config, grid, enc_plan, dec_plan, pairs,
                           checkpoint_id=tag, dataset_id=cfg["data"]["task"])
    grid_to_csv(result, out / f"grid_{tag}.csv")
    text = grid_to_text(result)
    (out / f"grid_{tag}.txt").write_text(text)
    print(text, end="")
    print(f"mean seq acc {result.mean_seq_acc()!r}")


def cmd_report(args) -> None:
    grid_a = grid_from_csv(_require(args, "grid_a"))
    grid_b = grid_from_csv(_require(args, "grid_b"))
    rep = delta_report(grid_a, grid_b, label_a=args.label_a, label_b=args.label_b)
    text = report_to_text(rep)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_pipeline(args) -> None:
    cfg = load_config(args.config)
    out = _out_dir(args)
    seed = _base_seed(args, cfg)
    stage = "pretrain"
    try:
        model_config, pre = _run_pretrain(cfg, seed, out, args.verbose)

        stage = "distill"
        corpus = _run_distill(cfg, seed, model_config, pre.params, out / "corpus.txt")

        stage = "finetune"
        fine = _run_finetune(cfg, seed, model_config, pre.params, corpus, out)

        stage = "evaluate"
        pairs = _eval_pairs(cfg, seed)
        enc_plan, dec_plan = _plans(cfg, model_config)
        grid = task_grid(model_config.enc_layers, model_config.dec_layers)
        probe = vanilla_truncation_probe(pre.params, model_config, grid,
                                         enc_plan, dec_plan, pairs,
                                         dataset_id=cfg["data"]["task"])
        student = evaluate_grid(fine.params, model_config, grid, enc_plan, dec_plan,
                                pairs, checkpoint_id="student",
                                dataset_id=cfg["data"]["task"])
        grid_to_csv(probe, out / "grid_pretrained.csv")
        (out / "grid_pretrained.txt").write_text(grid_to_text(probe))
        grid_to_csv(student, out / "grid_student.csv")
        (out / "grid_student.txt").write_text(grid_to_text(student))

        stage = "report"
        rep = delta_report(probe, student, label_a="pretrained", label_b="student")
        text = report_to_text(rep)
        (out / "report.txt").write_text(text)
        print(text, end="")
    except Exception as e:
        print(f"stage {stage} failed: {e}", file=sys.stderr)
        raise


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--config", default=None, help="JSON config path")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flexdepth", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="build one strategy's plan")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("metrics", parents=[common], help="five-strategy metric table")
    p.add_argument("--depth", type=int, required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pretrain", parents=[common], help="train the full-depth teacher")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", parents=[common], help="decode sources with the teacher")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune across the depth grid")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-grid", parents=[common], help="accuracy at every depth task")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tag", default=None, help="name used in grid files")
    p.set_defaults(func=cmd_eval_grid)

    p = sub.add_parser("report", parents=[common], help="delta between two grids")
    p.add_argument("--grid-a", dest="grid_a", default=None)
    p.add_argument("--grid-b", dest="grid_b", default=None)
    p.add_argument("--label-a", dest="label_a", default="a")
    p.add_argument("--label-b", dest="label_b", default="b")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", parents=[common], help="all stages in order")
    p.set_defaults(func=cmd_pipeline)

    return parser


def _exit_code(e: Exception) -> int:
    if isinstance(e, UsageError):
        return 2
    if isinstance(e, (FileNotFoundError, ValueError, KeyError, TypeError, AssignmentError)):
        return 3
    if isinstance(e, (TrainingError, ModelError, CheckpointError, OSError)):
        return 4
    return 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        code = _exit_code(e)
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
