"""Closed-loop planner: nearest-neighbor candidate proposal from the
demonstration set, goal embeddings with pick/place decomposition, cosine
scoring with per-goal softmax normalization, and replanning.

Four candidate-evaluation modes share the loop: "gwm" scores predicted
future features, "gt" scores true-simulator futures, "no_wm" scores the
unpredicted current features plus action tokens, and "random" picks
uniformly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import grounding, gwm as gwm_mod, vocab as vocab_mod, world
from .grounding import GroundedEncoder, backbone_embed, cosine, encode_frame
from .gwm import GwmModel, PredictionInput, gt_future, pad_chunk, tokenize_actions
from .wiser import DemoDataset, TaskSpec
from .world import EPISODE_CAP, WorldState

MODES = ("gwm", "gt", "no_wm", "random")
PROMPT_MODES = ("decomposed", "whole")

# Squared-distance penalty for a gripper mismatch: the grid diagonal squared,
# so gripper state dominates any positional difference.
GRIP_PENALTY = float(world.GRID_W ** 2 + world.GRID_H ** 2)


@dataclass(frozen=True)
class PlannerConfig:
    n_proposals: int = 12
    horizon: int = 12
    keyframes: int = 4
    replan_interval: int = 4
    temperature: float = 1.0
    mode: str = "gwm"
    prompt_mode: str = "decomposed"
    episode_cap: int = EPISODE_CAP

    def validate(self) -> None:
        if self.n_proposals < 1:
            raise ValueError("need at least one proposal")
        if not (1 <= self.replan_interval <= self.horizon):
            raise ValueError(f"replan interval {self.replan_interval} outside "
                             f"1..{self.horizon}")
        if not (1 <= self.keyframes <= self.horizon):
            raise ValueError(f"keyframes {self.keyframes} outside 1..{self.horizon}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.prompt_mode!r}")

    def content_hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Candidate:
    chunk: tuple
    traj_id: int
    step: int
    distance: float


@dataclass(frozen=True)
class CandidateScore:
    cos_pick: tuple
    cos_place: tuple
    sigma_pick: tuple
    sigma_place: tuple
    scores: tuple
    selected: int


@dataclass(frozen=True)
class ReplanRecord:
    t: int
    grasped: bool
    candidates: tuple  # (traj_id, step, distance) per candidate
    score: CandidateScore


@dataclass
class EpisodeTrace:
    task_id: str
    mode: str
    seed: int
    states: tuple
    actions: tuple
    replans: tuple
    outcome: world.EpisodeOutcome


def propose_candidates(ds: DemoDataset, proprio: tuple, n: int,
                       horizon: int) -> list:
    """Top-n distinct chunks by squared proprioceptive distance.

    Scans every (trajectory, step) pair, padding chunks at trajectory ends by
    repeating the final action; ties rank by (trajectory id, step) ascending;
    chunks equal as action sequences are deduplicated.
    """
    tid, stp, xs, ys, gs = ds.proprio_index()
    if len(tid) == 0:
        raise ValueError("no valid transitions to propose from")
    qx, qy, qg = proprio
    d = (xs - qx) ** 2.0 + (ys - qy) ** 2.0 + GRIP_PENALTY * (gs != qg)
    order = np.lexsort((stp, tid, d))
    out: list[Candidate] = []
    seen = set()
    for idx in order:
        ti = int(tid[idx])
        k = int(stp[idx])
        chunk = pad_chunk(ds.trajectories[ti].actions, k, horizon)
        if chunk in seen:
            continue
        seen.add(chunk)
        out.append(Candidate(chunk=chunk, traj_id=ti, step=k,
                             distance=float(d[idx])))
        if len(out) == n:
            break
    return out


def decompose_instruction(instruction: str):
    """Split a templated instruction into pick and place sub-prompts.

    Returns None when the instruction does not match the template, signalling
    whole-instruction scoring.
    """
    head = "pick up the "
    mid = " and place it onto the "
    if not instruction.startswith(head) or mid not in instruction:
        return None
    rest = instruction[len(head):]
    x, _, y = rest.partition(mid)
    if not x or not y:
        return None
    return vocab_mod.pick_prompt(x), vocab_mod.place_prompt(y)


def build_goal_embeddings(enc: GroundedEncoder, instruction: str,
                          obs0: np.ndarray, obs_t: np.ndarray,
                          mode: str = "decomposed") -> dict:
    """Goal embeddings from system prompt + (sub-)instruction + context."""
    context = [obs0, obs_t]
    if mode == "decomposed":
        parts = decompose_instruction(instruction)
        if parts is not None:
            pick, place = parts
            return {
                "pick": grounding.encode_instruction(
                    enc, f"{vocab_mod.SYSTEM_PROMPT} {pick}", context),
                "place": grounding.encode_instruction(
                    enc, f"{vocab_mod.SYSTEM_PROMPT} {place}", context),
            }
    return {"whole": grounding.encode_instruction(
        enc, f"{vocab_mod.SYSTEM_PROMPT} {instruction}", context)}


def score_candidates(z_list, goals: dict, grasped: bool,
                     temperature: float = 1.0) -> CandidateScore:
    """Cosines against each goal, softmax over candidates per goal, and the
    grasp-state switch; ties break toward the lower candidate rank."""
    if len(z_list) == 0:
        raise ValueError("no candidate embeddings to score")
    if "whole" in goals:
        cos_w = np.array([cosine(z, goals["whole"]) for z in z_list])
        cos_pick = cos_place = cos_w
    else:
        cos_pick = np.array([cosine(z, goals["pick"]) for z in z_list])
        cos_place = np.array([cosine(z, goals["place"]) for z in z_list])
    sigma_pick = dm.softmax(cos_pick, temperature)
    sigma_place = dm.softmax(cos_place, temperature)
    scores = sigma_place if grasped else sigma_pick
    selected = int(np.argmax(scores))
    return CandidateScore(cos_pick=tuple(cos_pick), cos_place=tuple(cos_place),
                          sigma_pick=tuple(sigma_pick),
                          sigma_place=tuple(sigma_place),
                          scores=tuple(scores), selected=selected)


@dataclass
class PlannerContext:
    cfg: PlannerConfig
    enc: GroundedEncoder
    ds: DemoDataset
    model: GwmModel | None = None
    rng: np.random.Generator | None = None
    proposal_render_cfg: world.RenderConfig | None = None
    obs0: np.ndarray | None = None


def _candidate_embeddings(ctx: PlannerContext, state: WorldState,
                          obs_feature: np.ndarray, candidates) -> list:
    cfg = ctx.cfg
    enc = ctx.enc
    zs = []
    if cfg.mode == "gt":
        for cand in candidates:
            feats = gt_future(state, cand.chunk, cfg.keyframes, enc)
            zs.append(backbone_embed(enc, feats, None))
        return zs
    if ctx.model is not None and ctx.model.kind == "raw":
        for cand in candidates:
            toks = tokenize_actions(state, cand.chunk, cfg.keyframes, enc,
                                    "raw", ctx.model)
            pred = gwm_mod.predict_future(
                ctx.model, PredictionInput(obs_feature, toks))
            zs.append(backbone_embed(enc, pred, None))
        return zs
    tokens = np.stack([tokenize_actions(state, cand.chunk, cfg.keyframes, enc,
                                        "rendered",
                                        render_cfg=ctx.proposal_render_cfg)
                       for cand in candidates])
    if cfg.mode == "gwm":
        preds = gwm_mod.predict_future_batch(ctx.model, obs_feature, tokens)
        for pred in preds:
            zs.append(backbone_embed(enc, pred, None))
    elif cfg.mode == "no_wm":
        for toks in tokens:
            feats = np.concatenate([obs_feature[None, :], toks], axis=0)
            zs.append(backbone_embed(enc, feats, None))
    else:
        raise ValueError(f"mode {cfg.mode!r} has no embedding path")
    return zs


def plan_step(ctx: PlannerContext, state: WorldState, obs: np.ndarray,
              instruction: str, grasped: bool) -> tuple:
    """One replanning event: propose, score per mode, return the selected
    chunk's first replan_interval actions plus the replan record."""
    cfg = ctx.cfg
    candidates = propose_candidates(ctx.ds, state.proprio, cfg.n_proposals,
                                    cfg.horizon)
    if cfg.mode == "random":
        sel = int(ctx.rng.integers(0, len(candidates)))
        n = len(candidates)
        uniform = tuple(1.0 / n for _ in range(n))
        score = CandidateScore(cos_pick=(0.0,) * n, cos_place=(0.0,) * n,
                               sigma_pick=uniform, sigma_place=uniform,
                               scores=uniform, selected=sel)
    else:
        obs_feature = encode_frame(ctx.enc, obs)
        goals = build_goal_embeddings(ctx.enc, instruction, ctx.obs0, obs,
                                      cfg.prompt_mode)
        zs = _candidate_embeddings(ctx, state, obs_feature, candidates)
        score = score_candidates(zs, goals, grasped, cfg.temperature)
    chosen = candidates[score.selected]
    record = ReplanRecord(
        t=state.step_count, grasped=grasped,
        candidates=tuple((c.traj_id, c.step, c.distance) for c in candidates),
        score=score)
    return chosen.chunk[:cfg.replan_interval], record


def _running_outcome(states, actions, task: TaskSpec,
                     grasped_any: bool) -> world.EpisodeOutcome:
    return world.outcome(world.Rollout(states=tuple(states),
                                       actions=tuple(actions)), task)


def run_episode(task: TaskSpec, cfg: PlannerConfig, enc: GroundedEncoder,
                ds: DemoDataset, model: GwmModel | None = None, seed: int = 0,
                proposal_render_cfg=None) -> EpisodeTrace:
    """Closed-loop rollout until success or the step cap, replanning every
    replan_interval steps; the reset observation anchors every goal
    embedding."""
    cfg.validate()
    if cfg.mode == "gwm":
        if model is None:
            raise ValueError("gwm mode needs a trained world model")
        if model.encoder_hash != grounding.encoder_hash(enc):
            raise ValueError("world model and encoder checkpoints do not match")
    state = world.make_scene(task.scene, seed, mode="eval")
    obs0 = world.render(state, enc.render_cfg)
    ctx = PlannerContext(cfg=cfg, enc=enc, ds=ds, model=model,
                         rng=np.random.default_rng(np.random.PCG64(seed)),
                         proposal_render_cfg=proposal_render_cfg, obs0=obs0)
    cube_idx = world._find_cube(state, task.target_color)
    states = [state]
    actions: list[world.Action] = []
    replans = []
    grasped_any = False
    done = False
    while not done and len(actions) < cfg.episode_cap:
        obs = world.render(state, enc.render_cfg)
        grasped = state.held is not None
        prefix, record = plan_step(ctx, state, obs, task.instruction, grasped)
        replans.append(record)
        for a in prefix:
            state = world.step(state, a)
            states.append(state)
            actions.append(a)
            grasped_any = grasped_any or state.held == cube_idx
            oc = _running_outcome(states, actions, task, grasped_any)
            if oc.success == 1 or len(actions) >= cfg.episode_cap:
                done = True
                break
    final = world.outcome(world.Rollout(states=tuple(states),
                                        actions=tuple(actions)), task)
    return EpisodeTrace(task_id=task.task_id, mode=cfg.mode, seed=seed,
                        states=tuple(states), actions=tuple(actions),
                        replans=tuple(replans), outcome=final)


def replay_trace(trace: EpisodeTrace) -> bool:
    """Re-execute the recorded actions and compare every state."""
    st = trace.states[0]
    for a, expect in zip(trace.actions, trace.states[1:]):
        st = world.step(st, a)
        if st != expect:
            return False
    return True


def trace_to_text(trace: EpisodeTrace) -> str:
    lines = [f"task_id={trace.task_id}", f"mode={trace.mode}",
             f"seed={trace.seed}", f"n_steps={len(trace.actions)}",
             f"grasp={trace.outcome.grasp} reach={trace.outcome.reach} "
             f"success={trace.outcome.success}"]
    for r in trace.replans:
        cands = ";".join(f"{t},{s},{d:.1f}" for t, s, d in r.candidates)
        sig_p = ";".join(f"{v:.6f}" for v in r.score.sigma_pick)
        sig_q = ";".join(f"{v:.6f}" for v in r.score.sigma_place)
        cos_p = ";".join(f"{v:.6f}" for v in r.score.cos_pick)
        cos_q = ";".join(f"{v:.6f}" for v in r.score.cos_place)
        lines.append(f"replan|t={r.t}|grasped={int(r.grasped)}|cands={cands}"
                     f"|cos_pick={cos_p}|cos_place={cos_q}"
                     f"|sigma_pick={sig_p}|sigma_place={sig_q}"
                     f"|selected={r.score.selected}")
    for a in trace.actions:
        lines.append(f"action={a.dx},{a.dy},{a.grip}")
    return "\n".join(lines) + "\n"
