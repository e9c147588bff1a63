"""Command-line surface: suite generation, demo collection, encoder
pretraining, world-model training, evaluation, ablations, and trace dumps.

Config files are line-delimited key=value text. Failures exit nonzero with a
single machine-readable JSON error line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import grounding, gwm as gwm_mod, harness, mpc, vocab as vocab_mod, wiser, world


def read_config(path) -> dict:
    cfg = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        cfg[k.strip()] = v.strip()
    return cfg


def _planner_config(args, mode: str) -> mpc.PlannerConfig:
    cfg = mpc.PlannerConfig(mode=mode)
    overrides = {}
    for name in ("n_proposals", "horizon", "keyframes", "replan_interval"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "temperature", None) is not None:
        overrides["temperature"] = args.temperature
    if getattr(args, "prompt_mode", None) is not None:
        overrides["prompt_mode"] = args.prompt_mode
    return replace(cfg, **overrides)


def cmd_gen(args) -> int:
    cfg = wiser.BenchConfig()
    if args.config:
        raw = read_config(args.config)
        if "n_categories" in raw:
            cfg = replace(cfg, n_categories=int(raw["n_categories"]))
        if "demos_per_task" in raw:
            cfg = replace(cfg, demos_per_task=int(raw["demos_per_task"]))
    train, test = wiser.generate_suite(cfg, seed=args.seed)
    report = wiser.validate_split(train, test)
    if not report.ok:
        raise ValueError(f"generated suites failed validation: {report.failures}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.suite").write_text(wiser.suite_to_text(train))
    (out / "test.suite").write_text(wiser.suite_to_text(test))
    (out / "meta.txt").write_text(
        f"seed={args.seed}\ntrain_hash={train.content_hash()}\n"
        f"test_hash={test.content_hash()}\n")
    print(f"wrote {len(train.tasks)} train and {len(test.tasks)} test tasks "
          f"to {out}")
    return 0


def _load_suite(suite_dir, split: str) -> wiser.TaskSuite:
    path = Path(suite_dir) / f"{split}.suite"
    if not path.exists():
        raise ValueError(f"no {split} suite under {suite_dir}")
    return wiser.suite_from_text(path.read_text())


def cmd_demos(args) -> int:
    suite = _load_suite(args.suite, "train")
    ds = wiser.collect_demos(suite, per_task=args.per_task, seed=args.seed)
    wiser.write_dataset(ds, args.out)
    print(f"collected {len(ds.trajectories)} demonstrations to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    voc = vocab_mod.build_vocabulary()
    rcfg = world.default_render_config(voc.n_colors, voc.n_glyphs)
    if args.oracle:
        enc = grounding.build_oracle_encoder(voc, rcfg)
    else:
        corpus = grounding.generate_pretraining_corpus(voc, args.n, args.seed,
                                                       render_cfg=rcfg)
        cfg = grounding.PretrainConfig(seed=args.seed, epochs=args.epochs,
                                       d_e=args.d_e)
        enc = grounding.pretrain_encoder(corpus, cfg, vocab=voc, render_cfg=rcfg)
        acc = grounding.evaluate_retrieval(enc, 8, seed=args.seed + 1)
        print(f"held-out retrieval accuracy: {acc:.3f}")
    grounding.save_encoder(args.out, enc)
    print(f"wrote encoder ({enc.kind}, hash {grounding.encoder_hash(enc)}) "
          f"to {args.out}")
    return 0


def cmd_train_wm(args) -> int:
    enc = grounding.load_encoder(args.encoder)
    ds = wiser.read_dataset(args.data)
    cfg = gwm_mod.GwmConfig(seed=args.seed, epochs=args.epochs)
    model = gwm_mod.build_gwm(cfg, args.kind, enc)
    model, curve = gwm_mod.train_gwm(model, ds, enc, cfg)
    gwm_mod.save_gwm(args.out, model)
    print(f"trained {args.kind} world model, final loss "
          f"{sum(curve[-10:]) / min(10, len(curve)):.6f}, wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    enc = grounding.load_encoder(args.encoder)
    suite = _load_suite(args.suite, args.split)
    ds = wiser.read_dataset(args.data)
    model = None
    if args.wm:
        model = gwm_mod.load_gwm(args.wm, enc)
    mode = args.mode.replace("-", "_")
    cfg = _planner_config(args, mode)
    table = harness.evaluate_suite(suite, cfg, enc, ds, model=model,
                                   seed=args.seed)
    harness.write_report(table, args.report, fmt=args.format)
    print(f"{args.split} {mode}: grasp {table.grasp_mean:.3f} "
          f"reach {table.reach_mean:.3f} success {table.success_mean:.3f} "
          f"-> {args.report}")
    return 0


def cmd_ablate(args) -> int:
    enc = grounding.load_encoder(args.encoder)
    suite = _load_suite(args.suite, args.split)
    ds = wiser.read_dataset(args.data)
    model = gwm_mod.load_gwm(args.wm, enc) if args.wm else None
    mode = args.mode.replace("-", "_")
    base = _planner_config(args, mode)
    values = []
    for v in args.values.split(","):
        v = v.strip()
        if args.param == "mode":
            values.append(v.replace("-", "_"))
        elif args.param == "dataset_fraction":
            values.append(float(v))
        else:
            values.append(int(v))
    report = harness.ablation_sweep(args.param, values, base, suite, enc, ds,
                                    model=model, seed=args.seed)
    harness.write_report(report, args.report, fmt=args.format)
    for r in report.results:
        print(f"{args.param}={r.value}: success {r.table.success_mean:.3f}")
    for f in report.flags:
        print(f"flag: {f}")
    return 0


def cmd_trace(args) -> int:
    enc = grounding.load_encoder(args.encoder)
    split = args.task.split("/")[1]
    suite = _load_suite(args.suite, split)
    task = next((t for t in suite.tasks if t.task_id == args.task), None)
    if task is None:
        raise ValueError(f"unknown task id {args.task}")
    ds = wiser.read_dataset(args.data)
    model = gwm_mod.load_gwm(args.wm, enc) if args.wm else None
    mode = args.mode.replace("-", "_")
    cfg = _planner_config(args, mode)
    trace = mpc.run_episode(task, cfg, enc, ds, model=model, seed=args.seed)
    out = Path(args.out)
    world.dump_episode(out, trace, task.task_id, enc.render_cfg,
                       outcome_flags=trace.outcome)
    (out / "replans.txt").write_text(mpc.trace_to_text(trace))
    print(f"episode {task.task_id}: grasp {trace.outcome.grasp} "
          f"reach {trace.outcome.reach} success {trace.outcome.success}; "
          f"{len(trace.states)} frames -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gwmpc",
                                description="retrieval-based MPC planner and "
                                            "semantic-generalization benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the train/test task suites")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    d = sub.add_parser("demos", help="collect scripted-expert demonstrations")
    d.add_argument("--suite", required=True)
    d.add_argument("--per-task", dest="per_task", type=int, default=6)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_demos)

    t = sub.add_parser("pretrain", help="pretrain or build the frozen encoder")
    t.add_argument("--vocab", default=None, help="unused; vocabulary is built in")
    t.add_argument("--n", type=int, default=32000)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--d-e", dest="d_e", type=int, default=96)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--oracle", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_pretrain)

    w = sub.add_parser("train-wm", help="train the latent world model")
    w.add_argument("--data", required=True)
    w.add_argument("--encoder", required=True)
    w.add_argument("--kind", choices=("rendered", "raw"), default="rendered")
    w.add_argument("--epochs", type=int, default=10)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(fn=cmd_train_wm)

    def planner_args(sp):
        sp.add_argument("--n-proposals", dest="n_proposals", type=int)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--keyframes", type=int)
        sp.add_argument("--replan-interval", dest="replan_interval", type=int)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--prompt-mode", dest="prompt_mode",
                        choices=("decomposed", "whole"))
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a planner mode on a split")
    e.add_argument("--suite", required=True)
    e.add_argument("--split", choices=("train", "test"), required=True)
    e.add_argument("--mode", choices=("gwm", "gt", "no-wm", "random"),
                   required=True)
    e.add_argument("--encoder", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--wm", default=None)
    e.add_argument("--report", required=True)
    e.add_argument("--format", choices=("csv", "structured-text"), default="csv")
    planner_args(e)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one planner hyperparameter")
    a.add_argument("--param", choices=harness.ABLATION_PARAMS, required=True)
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--suite", required=True)
    a.add_argument("--split", choices=("train", "test"), default="test")
    a.add_argument("--mode", choices=("gwm", "gt", "no-wm", "random"),
                   default="gt")
    a.add_argument("--encoder", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--wm", default=None)
    a.add_argument("--report", required=True)
    a.add_argument("--format", choices=("csv", "structured-text"), default="csv")
    planner_args(a)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("trace", help="run one episode and dump frames")
    r.add_argument("--task", required=True, help="task id like numbers/test/05")
    r.add_argument("--suite", required=True)
    r.add_argument("--mode", choices=("gwm", "gt", "no-wm", "random"),
                   default="gt")
    r.add_argument("--encoder", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--wm", default=None)
    r.add_argument("--out", required=True)
    planner_args(r)
    r.set_defaults(fn=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single machine-readable error line
        print(json.dumps({"error": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
