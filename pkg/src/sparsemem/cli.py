"""Command-line entry points: train, eval, gradcheck, bench.

Exit codes: 0 success, 1 task failure (training abort, failed check),
2 usage error (bad flags, bad config, degenerate inputs).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .bench import (
    BENCH_MODELS,
    fit_exponent,
    results_to_csv,
    run_bench,
)
from .container import ContainerError, load_file
from .model import MODEL_NAMES, build_model
from .sparse import ContractViolation
from .tasks import TASK_NAMES, TaskConfig, input_width, output_width
from .training import (
    LstmOnly,
    TrainConfig,
    Trainer,
    TrainingAbort,
    build_from_config,
    evaluate,
    gradient_check,
    load_train_config,
)

EVAL_SCHEMA = "sparsemem-eval-v1"
EVAL_HEADER = "level,mean_bit_error,episodes"

USAGE_ERROR = 2
TASK_FAILURE = 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsemem",
                                description="sparse-memory sequence models")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a synthetic task")
    t.add_argument("--task", choices=TASK_NAMES)
    t.add_argument("--model", choices=MODEL_NAMES)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/default", help="output directory")
    t.add_argument("--episodes", type=int, help="minibatch budget override")
    t.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")

    e = sub.add_parser("eval", help="per-level bit error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--levels", required=True,
                   help="comma-separated difficulty levels, e.g. 1,2,4,8")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--task", choices=TASK_NAMES,
                   help="override the checkpoint's task")
    e.add_argument("--seed", type=int, default=12345)
    e.add_argument("--out", help="CSV path (default stdout)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--model", default="sam-exact",
                   choices=MODEL_NAMES + ("lstm",))
    g.add_argument("--slots", type=int, default=16)
    g.add_argument("--steps", type=int, default=5)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--word", type=int, default=8)
    g.add_argument("--hidden", type=int, default=12)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="time/space sweep over memory sizes")
    b.add_argument("--models", default="sam-exact,sam-ann,dam",
                   help=f"comma-separated subset of {','.join(BENCH_MODELS)}")
    b.add_argument("--n", default="1024,2048,4096,8192,16384,32768,65536,131072",
                   help="comma-separated slot counts")
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--minibatch", type=int, default=8)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--dense-ceiling", type=int, default=2 ** 14)
    b.add_argument("--linkage-ceiling", type=int, default=2 ** 11)
    b.add_argument("--hidden", type=int, default=100)
    b.add_argument("--word", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default stdout)")
    b.add_argument("--fit", action="store_true",
                   help="print fitted log-log exponents per model")
    return p


def _cmd_train(args) -> int:
    try:
        cfg = load_train_config(args.config) if args.config else TrainConfig()
        overrides = {}
        if args.task:
            overrides["task"] = args.task
        if args.model:
            overrides["model"] = args.model
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.episodes is not None:
            overrides["episodes"] = args.episodes
        cfg = replace(cfg, **overrides)
        cfg.validate()
    except (ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        if args.resume:
            trainer = Trainer.resume(args.out)
            if args.episodes is not None:
                trainer.cfg = replace(trainer.cfg, episodes=args.episodes)
        else:
            trainer = Trainer(cfg, args.out)
        summary = trainer.train()
    except (ContractViolation, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return TASK_FAILURE
    print(f"trained {summary['episodes']} minibatches, curriculum h="
          f"{summary['h']}, recent loss {summary['mean_recent_loss']}")
    return 0


def _load_checkpoint_model(path: str):
    sections = load_file(path)
    if sections.get("format") != "sparsemem-checkpoint-v1":
        raise ContractViolation(f"{path} is not a training checkpoint")
    cfg = TrainConfig(**sections["config"])
    model, task = build_from_config(cfg)
    for key in model.params:
        got = sections.get("param_" + key)
        if got is None or got.shape != model.params[key].shape:
            raise ContractViolation(f"checkpoint parameter {key!r} missing "
                                    "or of the wrong shape")
        model.params[key][:] = got
    return model, task, cfg


def _cmd_eval(args) -> int:
    try:
        levels = [int(x) for x in args.levels.split(",") if x.strip() != ""]
        if not levels:
            raise ContractViolation("no levels given")
        model, task, cfg = _load_checkpoint_model(args.checkpoint)
        if args.task and args.task != cfg.task:
            task = TaskConfig(args.task, 1, word=cfg.task_word)
            if (input_width(task) != model.cfg.controller.input_width
                    or output_width(task) != model.cfg.controller.output_width):
                raise ContractViolation(
                    f"task {args.task!r} widths do not match the checkpoint")
        rows = evaluate(model, task, levels, episodes=args.episodes,
                        seed=args.seed)
    except (ContractViolation, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    lines = [f"# {EVAL_SCHEMA}", EVAL_HEADER]
    lines += [f"{r['level']},{r['mean_bit_error']:.6f},{r['episodes']}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    in_w, out_w = 6, 5
    try:
        if args.model == "lstm":
            model = LstmOnly(in_w, out_w, hidden=args.hidden, seed=args.seed)
        else:
            model = build_model(args.model, in_w, out_w, args.slots,
                                hidden=args.hidden, word=args.word,
                                k=min(4, args.slots), heads=args.heads,
                                k_link=4, seed=args.seed)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    B, T = args.batch, args.steps
    inputs = rng.normal(size=(B, T, in_w))
    targets = (rng.random((B, T, out_w)) > 0.5).astype(np.float64)
    mask = np.ones((B, T))
    report = gradient_check(model, inputs, targets, mask, eps=args.eps,
                            tolerance=args.tolerance)
    print(f"model={args.model} n_params={report['n_params']} "
          f"rel_error={report['rel_error']:.3e} "
          f"unstable={report['unstable']} "
          f"{'PASS' if report['ok'] else 'FAIL'}")
    return 0 if report["ok"] else TASK_FAILURE


def _cmd_bench(args) -> int:
    try:
        models = [m.strip() for m in args.models.split(",") if m.strip()]
        n_values = [int(x) for x in args.n.split(",")]
        if not models or not n_values:
            raise ContractViolation("need at least one model and one N")
        for name in models:
            if name not in BENCH_MODELS:
                raise ContractViolation(f"not a benchmark model: {name!r}")
    except (ContractViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR

    def progress(res):
        print(f"  {res.csv_row()}", file=sys.stderr)

    results = run_bench(models, n_values, steps=args.steps,
                        minibatch=args.minibatch, trials=args.trials,
                        dense_ceiling=args.dense_ceiling,
                        linkage_ceiling=args.linkage_ceiling,
                        hidden=args.hidden, word=args.word, seed=args.seed,
                        progress=progress)
    text = results_to_csv(results)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.fit:
        for name in models:
            try:
                slope, pts = fit_exponent(results, name)
            except ContractViolation:
                continue
            print(f"# fit {name}: exponent {slope:.3f} over {pts} points",
                  file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "gradcheck":
        return _cmd_gradcheck(args)
    return _cmd_bench(args)


if __name__ == "__main__":
    sys.exit(main())
