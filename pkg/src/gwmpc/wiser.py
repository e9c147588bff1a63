"""Benchmark generator and demonstration-dataset layer.

24 themed categories, each with a train scene and a test scene that share
the identical slot geometry (so the 12 pick-and-place motions coincide)
while colors, mark glyphs, and referring-expression styles are disjoint
between the splits. Demonstrations are scripted-expert rollouts with
jittered starts, indexed by proprioceptive state for retrieval.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vocab as vocab_mod
from . import world
from .vocab import Vocabulary
from .world import Action, SceneSpec, WorldState

N_CATEGORIES = 24
COLORS_PER_SPLIT = 4
GLYPHS_PER_SPLIT = 3
TASKS_PER_SCENE = 12
DEMOS_PER_TASK = 6


@dataclass(frozen=True)
class Category:
    name: str
    train_colors: tuple
    test_colors: tuple
    train_glyphs: tuple
    test_glyphs: tuple
    train_cube_styles: tuple = vocab_mod.CUBE_STYLES_TRAIN
    test_cube_styles: tuple = vocab_mod.CUBE_STYLES_TEST
    train_mark_styles: tuple = vocab_mod.MARK_STYLES_TRAIN
    test_mark_styles: tuple = vocab_mod.MARK_STYLES_TEST


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    category: str
    split: str
    cube_slot: int
    mark_slot: int
    target_color: int
    target_glyph: int
    cube_ref: str
    mark_ref: str
    instruction: str
    scene: SceneSpec


@dataclass(frozen=True)
class CategoryBlock:
    category: Category
    scene: SceneSpec
    tasks: tuple


@dataclass(frozen=True)
class TaskSuite:
    split: str
    blocks: tuple

    @property
    def tasks(self) -> tuple:
        return tuple(t for b in self.blocks for t in b.tasks)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.tasks:
            h.update(repr((t.task_id, t.cube_slot, t.mark_slot, t.target_color,
                           t.target_glyph, t.instruction,
                           t.scene.cube_colors, t.scene.mark_glyphs)).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class BenchConfig:
    n_categories: int = N_CATEGORIES
    demos_per_task: int = DEMOS_PER_TASK


def _build_tasks(vocab: Vocabulary, category: Category, split: str,
                 scene: SceneSpec) -> tuple:
    cube_styles = (category.train_cube_styles if split == "train"
                   else category.test_cube_styles)
    mark_styles = (category.train_mark_styles if split == "train"
                   else category.test_mark_styles)
    tasks = []
    for cs in range(4):
        for ms in range(3):
            idx = cs * 3 + ms
            color = scene.cube_colors[cs]
            glyph = scene.mark_glyphs[ms]
            cube_ref = vocab_mod.cube_reference(cube_styles[idx % len(cube_styles)],
                                                vocab.color_names[color], cs)
            mark_ref = vocab_mod.mark_reference(
                mark_styles[(idx // len(cube_styles)) % len(mark_styles)],
                vocab.mark_words[glyph], ms)
            tasks.append(TaskSpec(
                task_id=f"{category.name}/{split}/{idx:02d}",
                category=category.name, split=split, cube_slot=cs, mark_slot=ms,
                target_color=color, target_glyph=glyph, cube_ref=cube_ref,
                mark_ref=mark_ref,
                instruction=vocab_mod.render_instruction(cube_ref, mark_ref),
                scene=scene))
    return tuple(tasks)


def generate_suite(cfg: BenchConfig, seed: int,
                   vocab: Vocabulary | None = None) -> tuple:
    """Deterministic (train, test) suite pair with per-category split-disjoint
    attributes and identical slot geometry across the splits."""
    voc = vocab or vocab_mod.build_vocabulary()
    per_cat_colors = 2 * COLORS_PER_SPLIT
    per_cat_glyphs = 2 * GLYPHS_PER_SPLIT
    need_colors = cfg.n_categories * per_cat_colors
    need_glyphs = cfg.n_categories * per_cat_glyphs
    if voc.n_colors < need_colors:
        raise ValueError(f"vocabulary short {need_colors - voc.n_colors} color "
                         f"words for {cfg.n_categories} categories")
    if voc.n_glyphs < need_glyphs:
        raise ValueError(f"vocabulary short {need_glyphs - voc.n_glyphs} mark "
                         f"words for {cfg.n_categories} categories")
    rng = np.random.default_rng(np.random.PCG64(seed))
    color_order = rng.permutation(voc.n_colors)
    train_blocks, test_blocks = [], []
    for k in range(cfg.n_categories):
        name = vocab_mod.MARK_WORD_GROUPS[k % len(vocab_mod.MARK_WORD_GROUPS)][0]
        pool = color_order[k * per_cat_colors:(k + 1) * per_cat_colors]
        train_colors = tuple(int(c) for c in pool[:COLORS_PER_SPLIT])
        test_colors = tuple(int(c) for c in pool[COLORS_PER_SPLIT:])
        gbase = k * per_cat_glyphs
        glyphs = list(range(gbase, gbase + per_cat_glyphs))
        train_glyphs = tuple(glyphs[:GLYPHS_PER_SPLIT])
        test_glyphs = tuple(glyphs[GLYPHS_PER_SPLIT:])
        category = Category(name=name, train_colors=train_colors,
                            test_colors=test_colors, train_glyphs=train_glyphs,
                            test_glyphs=test_glyphs)
        train_scene = SceneSpec(
            cube_colors=tuple(train_colors[i] for i in rng.permutation(4)),
            mark_glyphs=tuple(train_glyphs[i] for i in rng.permutation(3)))
        test_scene = SceneSpec(
            cube_colors=tuple(test_colors[i] for i in rng.permutation(4)),
            mark_glyphs=tuple(test_glyphs[i] for i in rng.permutation(3)))
        train_blocks.append(CategoryBlock(
            category=category, scene=train_scene,
            tasks=_build_tasks(voc, category, "train", train_scene)))
        test_blocks.append(CategoryBlock(
            category=category, scene=test_scene,
            tasks=_build_tasks(voc, category, "test", test_scene)))
    return (TaskSuite(split="train", blocks=tuple(train_blocks)),
            TaskSuite(split="test", blocks=tuple(test_blocks)))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    failures: tuple


def validate_split(train: TaskSuite, test: TaskSuite) -> ValidationReport:
    """Attribute/style disjointness plus motion equality per category."""
    failures = []
    if len(train.blocks) != len(test.blocks):
        failures.append("category count mismatch between splits")
    for tb, eb in zip(train.blocks, test.blocks):
        name = tb.category.name
        tcolors = set(t.target_color for t in tb.tasks)
        ecolors = set(t.target_color for t in eb.tasks)
        if tcolors & ecolors:
            failures.append(f"{name}: shared cube colors {sorted(tcolors & ecolors)}")
        tglyphs = set(t.target_glyph for t in tb.tasks)
        eglyphs = set(t.target_glyph for t in eb.tasks)
        if tglyphs & eglyphs:
            failures.append(f"{name}: shared mark glyphs {sorted(tglyphs & eglyphs)}")
        tstyles = set(tb.category.train_cube_styles) | set(tb.category.train_mark_styles)
        estyles = set(eb.category.test_cube_styles) | set(eb.category.test_mark_styles)
        if tstyles & estyles:
            failures.append(f"{name}: shared referring styles {sorted(tstyles & estyles)}")
        tmotions = set((t.cube_slot, t.mark_slot) for t in tb.tasks)
        emotions = set((t.cube_slot, t.mark_slot) for t in eb.tasks)
        if tmotions != emotions:
            failures.append(f"{name}: motion sets differ across splits")
    return ValidationReport(ok=not failures, failures=tuple(failures))


@dataclass(frozen=True)
class TrajectoryRecord:
    traj_id: int
    task_id: str
    instruction: str
    initial_state: WorldState
    actions: tuple
    frame_refs: tuple  # relative PPM paths, one per state

    @property
    def n_transitions(self) -> int:
        return len(self.actions)


@dataclass
class DemoDataset:
    trajectories: tuple
    suite_hash: str
    seed: int
    _index: tuple | None = field(default=None, compare=False, repr=False)

    def __eq__(self, other):
        return (isinstance(other, DemoDataset)
                and self.trajectories == other.trajectories
                and self.suite_hash == other.suite_hash
                and self.seed == other.seed)

    def proprio_index(self):
        """Arrays (traj, step, x, y, grip) over every transition start."""
        if self._index is None:
            tid, stp, xs, ys, gs = [], [], [], [], []
            for ti, tr in enumerate(self.trajectories):
                st = tr.initial_state
                for k, a in enumerate(tr.actions):
                    tid.append(ti)
                    stp.append(k)
                    xs.append(st.agent[0])
                    ys.append(st.agent[1])
                    gs.append(st.gripper)
                    st = world.step(st, a)
            self._index = (np.array(tid), np.array(stp), np.array(xs),
                           np.array(ys), np.array(gs))
        return self._index


def collect_demos(suite: TaskSuite, per_task: int, seed: int) -> DemoDataset:
    """Expert rollouts per task with jittered starts; the first demo of each
    task starts exactly at the reset cell. Every rollout must succeed."""
    if per_task < 1:
        raise ValueError("per_task must be >= 1")
    trajectories = []
    traj_id = 0
    for block in suite.blocks:
        for task in block.tasks:
            for d in range(per_task):
                demo_seed = seed * 1_000_003 + traj_id
                mode = "eval" if d == 0 else "demo"
                state0 = world.make_scene(block.scene, demo_seed, mode=mode)
                actions = world.expert_policy(state0, task)
                ro = world.rollout(state0, actions)
                oc = world.outcome(ro, task)
                if oc.success != 1:
                    raise ValueError(f"expert failed on task {task.task_id}")
                refs = tuple(f"frames/traj_{traj_id:05d}/frame_{i:04d}.ppm"
                             for i in range(len(ro.states)))
                trajectories.append(TrajectoryRecord(
                    traj_id=traj_id, task_id=task.task_id,
                    instruction=task.instruction, initial_state=state0,
                    actions=tuple(actions), frame_refs=refs))
                traj_id += 1
    return DemoDataset(trajectories=tuple(trajectories),
                       suite_hash=suite.content_hash(), seed=seed)


def half_data_suite(suite: TaskSuite) -> TaskSuite:
    """First half of the categories, used for the reduced-data training run."""
    return TaskSuite(split=suite.split,
                     blocks=suite.blocks[:len(suite.blocks) // 2])


_TRAJ_MAGIC = b"GWMTRAJ1"
_REF_WIDTH = 48


def _pack_state(state: WorldState) -> bytes:
    parts = [struct.pack("<BBBb", state.agent[0], state.agent[1], state.gripper,
                         -1 if state.held is None else state.held)]
    for (x, y), color in state.cubes:
        parts.append(struct.pack("<BBH", x, y, color))
    for (x, y), glyph in state.marks:
        parts.append(struct.pack("<BBH", x, y, glyph))
    parts.append(struct.pack("<I", state.step_count))
    return b"".join(parts)


def _unpack_state(buf: bytes, off: int) -> tuple:
    ax, ay, grip, held = struct.unpack_from("<BBBb", buf, off); off += 4
    cubes = []
    for _ in range(4):
        x, y, c = struct.unpack_from("<BBH", buf, off); off += 4
        cubes.append(((x, y), c))
    marks = []
    for _ in range(3):
        x, y, g = struct.unpack_from("<BBH", buf, off); off += 4
        marks.append(((x, y), g))
    (sc,) = struct.unpack_from("<I", buf, off); off += 4
    return WorldState(agent=(ax, ay), gripper=grip,
                      held=None if held < 0 else held, cubes=tuple(cubes),
                      marks=tuple(marks), step_count=sc), off


def _write_trajectory(path: Path, tr: TrajectoryRecord) -> None:
    buf = bytearray()
    buf += _TRAJ_MAGIC
    buf += struct.pack("<I", tr.traj_id)
    tid = tr.task_id.encode()
    ins = tr.instruction.encode()
    buf += struct.pack("<H", len(tid)) + tid
    buf += struct.pack("<H", len(ins)) + ins
    buf += _pack_state(tr.initial_state)
    buf += struct.pack("<I", len(tr.actions))
    st = tr.initial_state
    for k, a in enumerate(tr.actions):
        ref = tr.frame_refs[k].encode()
        if len(ref) > _REF_WIDTH:
            raise ValueError(f"frame ref too long: {tr.frame_refs[k]}")
        buf += struct.pack("<IBBBbbB", k, st.agent[0], st.agent[1], st.gripper,
                           a.dx, a.dy, a.grip)
        buf += ref.ljust(_REF_WIDTH, b"\x00")
        st = world.step(st, a)
    final_ref = tr.frame_refs[-1].encode()
    buf += final_ref.ljust(_REF_WIDTH, b"\x00")
    path.write_bytes(bytes(buf))


def _read_trajectory(path: Path) -> TrajectoryRecord:
    buf = path.read_bytes()
    if buf[:8] != _TRAJ_MAGIC:
        raise ValueError(f"{path}: bad trajectory magic at byte 0")
    off = 8
    try:
        (traj_id,) = struct.unpack_from("<I", buf, off); off += 4
        (n,) = struct.unpack_from("<H", buf, off); off += 2
        task_id = buf[off:off + n].decode(); off += n
        (n,) = struct.unpack_from("<H", buf, off); off += 2
        instruction = buf[off:off + n].decode(); off += n
        state0, off = _unpack_state(buf, off)
        (n_trans,) = struct.unpack_from("<I", buf, off); off += 4
        actions = []
        refs = []
        for _ in range(n_trans):
            k, ax, ay, grip, dx, dy, gc = struct.unpack_from("<IBBBbbB", buf, off)
            off += 10
            refs.append(buf[off:off + _REF_WIDTH].rstrip(b"\x00").decode())
            off += _REF_WIDTH
            actions.append(Action(dx, dy, gc))
        refs.append(buf[off:off + _REF_WIDTH].rstrip(b"\x00").decode())
        off += _REF_WIDTH
        if off > len(buf):
            raise struct.error("past end")
    except (struct.error, UnicodeDecodeError) as e:
        raise ValueError(f"{path}: corrupt trajectory record at byte {off}") from e
    return TrajectoryRecord(traj_id=traj_id, task_id=task_id,
                            instruction=instruction, initial_state=state0,
                            actions=tuple(actions), frame_refs=tuple(refs))


def write_dataset(ds: DemoDataset, path, write_frames: bool = False,
                  render_cfg=None) -> None:
    """Directory layout: manifest.txt plus one fixed-width record file per
    trajectory; PPM frames are referenced by relative path and materialized
    only on request."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"suite_hash={ds.suite_hash}", f"seed={ds.seed}",
             f"n_trajectories={len(ds.trajectories)}"]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    for tr in ds.trajectories:
        _write_trajectory(out / f"traj_{tr.traj_id:05d}.bin", tr)
        if write_frames:
            ro = world.rollout(tr.initial_state, tr.actions)
            for st, ref in zip(ro.states, tr.frame_refs):
                fpath = out / ref
                fpath.parent.mkdir(parents=True, exist_ok=True)
                world.write_ppm(fpath, world.render(st, render_cfg))


def read_dataset(path) -> DemoDataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ValueError(f"no manifest.txt under {root}")
    fields = {}
    for line in manifest.read_text().splitlines():
        k, v = line.split("=", 1)
        fields[k] = v
    n = int(fields["n_trajectories"])
    trajectories = []
    for i in range(n):
        trajectories.append(_read_trajectory(root / f"traj_{i:05d}.bin"))
    return DemoDataset(trajectories=tuple(trajectories),
                       suite_hash=fields["suite_hash"], seed=int(fields["seed"]))


def suite_to_text(suite: TaskSuite) -> str:
    lines = [f"split={suite.split}", f"n_categories={len(suite.blocks)}"]
    for b in suite.blocks:
        c = b.category
        lines.append("category|name=%s|train_colors=%s|test_colors=%s"
                     "|train_glyphs=%s|test_glyphs=%s" % (
                         c.name,
                         ",".join(map(str, c.train_colors)),
                         ",".join(map(str, c.test_colors)),
                         ",".join(map(str, c.train_glyphs)),
                         ",".join(map(str, c.test_glyphs))))
        lines.append("scene|cube_colors=%s|mark_glyphs=%s" % (
            ",".join(map(str, b.scene.cube_colors)),
            ",".join(map(str, b.scene.mark_glyphs))))
        for t in b.tasks:
            lines.append("task|id=%s|cube_slot=%d|mark_slot=%d|color=%d|glyph=%d"
                         "|cube_ref=%s|mark_ref=%s|instruction=%s" % (
                             t.task_id, t.cube_slot, t.mark_slot, t.target_color,
                             t.target_glyph, t.cube_ref, t.mark_ref, t.instruction))
    return "\n".join(lines) + "\n"


def suite_from_text(text: str) -> TaskSuite:
    lines = text.splitlines()
    split = lines[0].split("=", 1)[1]
    blocks = []
    category = None
    scene = None
    tasks: list[TaskSpec] = []

    def flush():
        if category is not None:
            blocks.append(CategoryBlock(category=category, scene=scene,
                                        tasks=tuple(tasks)))

    for line in lines[2:]:
        kind, _, rest = line.partition("|")
        fields = dict(kv.split("=", 1) for kv in rest.split("|"))
        if kind == "category":
            flush()
            tasks = []
            category = Category(
                name=fields["name"],
                train_colors=tuple(int(v) for v in fields["train_colors"].split(",")),
                test_colors=tuple(int(v) for v in fields["test_colors"].split(",")),
                train_glyphs=tuple(int(v) for v in fields["train_glyphs"].split(",")),
                test_glyphs=tuple(int(v) for v in fields["test_glyphs"].split(",")))
        elif kind == "scene":
            scene = SceneSpec(
                cube_colors=tuple(int(v) for v in fields["cube_colors"].split(",")),
                mark_glyphs=tuple(int(v) for v in fields["mark_glyphs"].split(",")))
        elif kind == "task":
            tasks.append(TaskSpec(
                task_id=fields["id"], category=category.name, split=split,
                cube_slot=int(fields["cube_slot"]), mark_slot=int(fields["mark_slot"]),
                target_color=int(fields["color"]), target_glyph=int(fields["glyph"]),
                cube_ref=fields["cube_ref"], mark_ref=fields["mark_ref"],
                instruction=fields["instruction"], scene=scene))
    flush()
    return TaskSuite(split=split, blocks=tuple(blocks))
