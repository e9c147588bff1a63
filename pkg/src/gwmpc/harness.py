"""Suite evaluation, ablations, and report writing.

Runs every task of a split once, aggregates grasp/reach/success means,
sweeps planner hyperparameters, and emits byte-stable CSV or line-delimited
text reports.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import grounding, mpc, wiser
from .grounding import GroundedEncoder
from .gwm import GwmModel
from .mpc import EpisodeTrace, PlannerConfig
from .wiser import DemoDataset, TaskSuite


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    category: str
    split: str
    grasp: int
    reach: int
    success: int
    error: str | None = None


@dataclass(frozen=True)
class MetricsTable:
    split: str
    mode: str
    rows: tuple
    config_hash: str
    encoder_hash: str
    gwm_hash: str
    seed: int

    @property
    def grasp_mean(self) -> float:
        return float(np.mean([r.grasp for r in self.rows]))

    @property
    def reach_mean(self) -> float:
        return float(np.mean([r.reach for r in self.rows]))

    @property
    def success_mean(self) -> float:
        return float(np.mean([r.success for r in self.rows]))


def _gwm_hash(model: GwmModel | None) -> str:
    if model is None:
        return "-"
    import hashlib
    from . import gwm as gwm_mod
    from . import diffmath as dm
    h = hashlib.sha256(dm.serialize_network(model.net))
    if model.action_head is not None:
        h.update(dm.serialize_network(model.action_head))
    return h.hexdigest()[:16]


def evaluate_suite(suite: TaskSuite, cfg: PlannerConfig, enc: GroundedEncoder,
                   ds: DemoDataset, model: GwmModel | None = None,
                   seed: int = 0, proposal_render_cfg=None,
                   collect_traces: bool = False) -> MetricsTable | tuple:
    """One episode per task; per-episode errors mark the task failed."""
    cfg.validate()
    rows = []
    traces = []
    for task in suite.tasks:
        try:
            trace = mpc.run_episode(task, cfg, enc, ds, model=model, seed=seed,
                                    proposal_render_cfg=proposal_render_cfg)
            oc = trace.outcome
            rows.append(TaskResult(task_id=task.task_id, category=task.category,
                                   split=task.split, grasp=oc.grasp,
                                   reach=oc.reach, success=oc.success))
            if collect_traces:
                traces.append(trace)
        except (ValueError, KeyError) as e:
            rows.append(TaskResult(task_id=task.task_id, category=task.category,
                                   split=task.split, grasp=0, reach=0,
                                   success=0, error=str(e)))
    table = MetricsTable(split=suite.split, mode=cfg.mode, rows=tuple(rows),
                         config_hash=cfg.content_hash(),
                         encoder_hash=grounding.encoder_hash(enc),
                         gwm_hash=_gwm_hash(model), seed=seed)
    if collect_traces:
        return table, traces
    return table


def selection_counts(traces, n_proposals: int) -> np.ndarray:
    """Histogram of selected candidate ranks over all replan events with a
    full proposal set."""
    counts = np.zeros(n_proposals, dtype=np.int64)
    for tr in traces:
        for r in tr.replans:
            if len(r.candidates) == n_proposals:
                counts[r.score.selected] += 1
    return counts


def chi_square_uniform_p(counts: np.ndarray) -> float:
    """p-value of the chi-square test against the uniform distribution."""
    return float(stats.chisquare(counts).pvalue)


ABLATION_PARAMS = ("replan_interval", "horizon", "keyframes", "mode",
                   "dataset_fraction")


@dataclass(frozen=True)
class AblationResult:
    param: str
    value: object
    table: MetricsTable


@dataclass(frozen=True)
class AblationReport:
    param: str
    results: tuple
    flags: tuple


def ablation_sweep(param: str, values, base_cfg: PlannerConfig,
                   suite: TaskSuite, enc: GroundedEncoder, ds: DemoDataset,
                   model: GwmModel | None = None, seed: int = 0,
                   train_model_fn=None) -> AblationReport:
    """One full evaluation per value, all other config fields shared.

    dataset_fraction=f keeps the first f of the categories with one demo per
    task; a model-training callback is required to refit the world model when
    the base mode needs one.
    """
    if param not in ABLATION_PARAMS:
        raise ValueError(f"unknown ablation parameter {param!r}")
    for v in values:
        _check_value(param, v, base_cfg)
    results = []
    for v in values:
        cfg = base_cfg
        run_ds = ds
        run_model = model
        if param == "dataset_fraction":
            keep = max(1, int(round(len(suite.blocks) * float(v))))
            sub_suite = wiser.TaskSuite(split="train",
                                        blocks=suite.blocks[:keep])
            run_ds = wiser.collect_demos(sub_suite, per_task=1, seed=seed)
            if base_cfg.mode == "gwm":
                if train_model_fn is None:
                    raise ValueError("dataset_fraction sweep in gwm mode needs "
                                     "a train_model_fn callback")
                run_model = train_model_fn(run_ds)
        elif param == "mode":
            cfg = replace(base_cfg, mode=v)
        else:
            cfg = replace(base_cfg, **{param: v})
        table = evaluate_suite(suite, cfg, enc, run_ds, model=run_model,
                               seed=seed)
        results.append(AblationResult(param=param, value=v, table=table))
    flags = _qualitative_flags(param, results, base_cfg)
    return AblationReport(param=param, results=tuple(results), flags=flags)


def _check_value(param: str, v, base_cfg: PlannerConfig) -> None:
    probe = base_cfg
    if param == "mode":
        probe = replace(base_cfg, mode=v)
    elif param == "dataset_fraction":
        if not (0.0 < float(v) <= 1.0):
            raise ValueError(f"dataset fraction {v} outside (0, 1]")
        return
    else:
        probe = replace(base_cfg, **{param: v})
    probe.validate()


def _qualitative_flags(param: str, results, base_cfg: PlannerConfig) -> tuple:
    flags = []
    by_value = {r.value: r.table.success_mean for r in results}
    if param == "horizon" and len(by_value) > 1:
        lo = min(by_value)
        hi = max(by_value)
        if by_value[lo] < by_value[hi]:
            flags.append(f"horizon_too_short: success {by_value[lo]:.3f} at "
                         f"horizon {lo} vs {by_value[hi]:.3f} at {hi}")
    if param == "keyframes" and len(by_value) > 1:
        lo = min(by_value)
        hi = max(by_value)
        if by_value[lo] < by_value[hi]:
            flags.append(f"keyframe_starvation: success {by_value[lo]:.3f} at "
                         f"{lo} keyframes vs {by_value[hi]:.3f} at {hi}")
    return tuple(flags)


CSV_HEADER = "task_id,category,split,grasp,reach,success"


def table_to_csv(table: MetricsTable) -> str:
    lines = [CSV_HEADER]
    for r in table.rows:
        lines.append(f"{r.task_id},{r.category},{r.split},{r.grasp},{r.reach},"
                     f"{r.success}")
    if table.rows:
        lines.append(f"summary,all,{table.split},{table.grasp_mean:.6f},"
                     f"{table.reach_mean:.6f},{table.success_mean:.6f}")
    return "\n".join(lines) + "\n"


def table_to_text(table: MetricsTable) -> str:
    lines = [f"split={table.split}", f"mode={table.mode}",
             f"config={table.config_hash}", f"encoder={table.encoder_hash}",
             f"gwm={table.gwm_hash}", f"seed={table.seed}",
             f"n_tasks={len(table.rows)}",
             f"grasp_mean={table.grasp_mean:.6f}",
             f"reach_mean={table.reach_mean:.6f}",
             f"success_mean={table.success_mean:.6f}"]
    for r in table.rows:
        err = "" if r.error is None else f"|error={r.error}"
        lines.append(f"task|id={r.task_id}|grasp={r.grasp}|reach={r.reach}"
                     f"|success={r.success}{err}")
    return "\n".join(lines) + "\n"


def write_report(table_or_report, path, fmt: str = "csv") -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(table_or_report, AblationReport):
        parts = []
        for r in table_or_report.results:
            parts.append(f"# {table_or_report.param}={r.value}\n"
                         + (table_to_csv(r.table) if fmt == "csv"
                            else table_to_text(r.table)))
        for f in table_or_report.flags:
            parts.append(f"# flag: {f}\n")
        out.write_text("".join(parts))
        return
    if fmt == "csv":
        out.write_text(table_to_csv(table_or_report))
    elif fmt == "structured-text":
        out.write_text(table_to_text(table_or_report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_csv_report(text: str) -> list:
    lines = text.strip().splitlines()
    if lines[0] != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    rows = []
    for line in lines[1:]:
        task_id, category, split, g, r, s = line.split(",")
        rows.append((task_id, category, split, float(g), float(r), float(s)))
    return rows
