"""Deterministic pick-and-place gridworld with byte-exact rasterized frames.

A single agent moves on a 12x9 grid holding at most one of four colored
cubes; three glyph marks sit on a fixed row below the cube row. Rendering is
a pure function of state, and every cell is decodable back to its contents:
each 8x8 cell block reserves a top band for the agent sprite, a center block
for a carried cube, four side sub-regions for the mark glyph, and a bottom
band that always shows the resting cube's color.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GRID_W = 12
GRID_H = 9
CELL_PX = 8
CUBE_ROW_Y = 4
MARK_ROW_Y = 6
CUBE_SLOTS_X = (2, 4, 7, 9)
MARK_SLOTS_X = (3, 6, 9)
RESET_CELL = (6, 1)
EPISODE_CAP = 60

GRIP_OPEN = 0
GRIP_CLOSED = 1

CMD_OPEN = 0
CMD_CLOSE = 1
CMD_HOLD = 2

BACKGROUND = (0, 0, 0)
AGENT_INK_OPEN = (255, 255, 0)
AGENT_INK_CLOSED = (255, 0, 255)
RESERVED_COLORS = (BACKGROUND, (255, 255, 255), AGENT_INK_OPEN,
                   AGENT_INK_CLOSED)

# 16-pixel top-band sprite patterns (2 rows x 8 cols, bit = row*8 + col).
SPRITE_CHECKER = 0b1010101001010101
SPRITE_CHECKER_INV = SPRITE_CHECKER ^ 0xFFFF

# Glyph sub-regions inside a cell, as (rows, cols) slices: two 2x2 blocks on
# each side of the center block.
GLYPH_SUBREGIONS = (
    (slice(2, 4), slice(0, 2)),
    (slice(4, 6), slice(0, 2)),
    (slice(2, 4), slice(6, 8)),
    (slice(4, 6), slice(6, 8)),
)
TOP_BAND = (slice(0, 2), slice(0, 8))
CENTER_BLOCK = (slice(2, 6), slice(2, 6))
BOTTOM_BAND = (slice(6, 8), slice(0, 8))


@dataclass(frozen=True)
class Action:
    dx: int
    dy: int
    grip: int  # CMD_OPEN | CMD_CLOSE | CMD_HOLD

    def __post_init__(self):
        if self.dx not in (-1, 0, 1) or self.dy not in (-1, 0, 1):
            raise ValueError(f"move deltas must be in -1..1, got {(self.dx, self.dy)}")
        if self.grip not in (CMD_OPEN, CMD_CLOSE, CMD_HOLD):
            raise ValueError(f"unknown gripper command {self.grip}")


HOLD_ACTION = Action(0, 0, CMD_HOLD)

ALL_ACTIONS = tuple(Action(dx, dy, g)
                    for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                    for g in (CMD_OPEN, CMD_CLOSE, CMD_HOLD))


@dataclass(frozen=True)
class SceneSpec:
    """Colors for the four cube slots and glyphs for the three mark slots,
    listed in slot order (ascending x)."""

    cube_colors: tuple
    mark_glyphs: tuple

    def validate(self) -> None:
        if len(self.cube_colors) != len(CUBE_SLOTS_X):
            raise ValueError(f"expected {len(CUBE_SLOTS_X)} cube colors, "
                             f"got {len(self.cube_colors)}")
        if len(set(self.cube_colors)) != len(self.cube_colors):
            raise ValueError("duplicate cube colors in scene")
        if len(self.mark_glyphs) != len(MARK_SLOTS_X):
            raise ValueError(f"expected {len(MARK_SLOTS_X)} mark glyphs, "
                             f"got {len(self.mark_glyphs)}")
        if len(set(self.mark_glyphs)) != len(self.mark_glyphs):
            raise ValueError("duplicate mark glyphs in scene")


@dataclass(frozen=True)
class WorldState:
    agent: tuple  # (x, y)
    gripper: int
    held: int | None  # cube index
    cubes: tuple  # ((x, y), color_id) per cube
    marks: tuple  # ((x, y), glyph_id) per mark
    step_count: int = 0

    def validate(self) -> None:
        cells = [self.agent] + [c for c, _ in self.cubes] + [m for m, _ in self.marks]
        for x, y in cells:
            if not (0 <= x < GRID_W and 0 <= y < GRID_H):
                raise ValueError(f"cell {(x, y)} outside {GRID_W}x{GRID_H} grid")
        if len(self.cubes) != 4 or len(self.marks) != 3:
            raise ValueError("scene must hold exactly 4 cubes and 3 marks")
        ground = [cell for i, (cell, _) in enumerate(self.cubes) if i != self.held]
        if len(set(ground)) != len(ground):
            raise ValueError("two resting cubes share a cell")
        if self.held is not None:
            if self.cubes[self.held][0] != self.agent:
                raise ValueError("held cube is not co-located with the agent")
            if self.gripper != GRIP_CLOSED:
                raise ValueError("held cube with open gripper")
        mcells = [cell for cell, _ in self.marks]
        if len(set(mcells)) != len(mcells):
            raise ValueError("marks overlap")
        for (x, y) in mcells:
            if y != MARK_ROW_Y:
                raise ValueError(f"mark off the marks row at {(x, y)}")
        if self.step_count < 0:
            raise ValueError("negative step count")

    @property
    def proprio(self) -> tuple:
        return (self.agent[0], self.agent[1], self.gripper)


@dataclass(frozen=True)
class EpisodeOutcome:
    grasp: int
    reach: int
    success: int

    def __post_init__(self):
        if self.success > self.grasp * self.reach:
            raise ValueError("success implies both grasp and reach")


@dataclass(frozen=True)
class Rollout:
    """States s_0..s_T and the actions that produced them."""

    states: tuple
    actions: tuple


def make_scene(scene: SceneSpec, seed: int, mode: str = "eval") -> WorldState:
    """Place cubes and marks on their slots with the agent at the reset cell.

    Evaluation mode ignores the seed entirely; demo-collection mode jitters
    the agent start by at most one cell per axis.
    """
    scene.validate()
    if mode not in ("eval", "demo"):
        raise ValueError(f"unknown scene mode {mode!r}")
    agent = RESET_CELL
    if mode == "demo":
        rng = np.random.default_rng(np.random.PCG64(seed))
        jitter = rng.integers(-1, 2, size=2)
        agent = (int(RESET_CELL[0] + jitter[0]), int(RESET_CELL[1] + jitter[1]))
        agent = (min(max(agent[0], 0), GRID_W - 1), min(max(agent[1], 0), GRID_H - 1))
    cubes = tuple(((x, CUBE_ROW_Y), color)
                  for x, color in zip(CUBE_SLOTS_X, scene.cube_colors))
    marks = tuple(((x, MARK_ROW_Y), glyph)
                  for x, glyph in zip(MARK_SLOTS_X, scene.mark_glyphs))
    state = WorldState(agent=agent, gripper=GRIP_OPEN, held=None,
                       cubes=cubes, marks=marks, step_count=0)
    state.validate()
    return state


def step(state: WorldState, action: Action) -> WorldState:
    """Pure transition; illegal effects are no-ops."""
    x = min(max(state.agent[0] + action.dx, 0), GRID_W - 1)
    y = min(max(state.agent[1] + action.dy, 0), GRID_H - 1)
    agent = (x, y)
    gripper = state.gripper
    held = state.held
    cubes = list(state.cubes)
    if held is not None:
        cubes[held] = (agent, cubes[held][1])
    if action.grip == CMD_CLOSE:
        gripper = GRIP_CLOSED
        if held is None:
            for i, (cell, _) in enumerate(cubes):
                if cell == agent:
                    held = i
                    break
    elif action.grip == CMD_OPEN:
        gripper = GRIP_OPEN
        if held is not None:
            blocked = any(cell == agent for i, (cell, _) in enumerate(cubes)
                          if i != held)
            if not blocked:
                held = None
    return WorldState(agent=agent, gripper=gripper, held=held,
                      cubes=tuple(cubes), marks=state.marks,
                      step_count=state.step_count + 1)


def rollout(state: WorldState, actions) -> Rollout:
    states = [state]
    for a in actions:
        states.append(step(states[-1], a))
    return Rollout(states=tuple(states), actions=tuple(actions))


@dataclass(frozen=True)
class RenderConfig:
    cell_px: int
    palette: tuple  # color id -> (r, g, b)
    glyph_atlas: tuple  # glyph id -> 16-bit pattern over the glyph sub-regions
    glyph_inks: tuple  # glyph id -> (r, g, b), pairwise distinct
    agent_sprite: int  # 16-bit pattern over the top band
    background: tuple = BACKGROUND
    agent_ink_open: tuple = AGENT_INK_OPEN
    agent_ink_closed: tuple = AGENT_INK_CLOSED

    def validate(self) -> None:
        if self.cell_px != CELL_PX:
            raise ValueError(f"cell_px must be {CELL_PX}")
        if len(set(self.palette)) != len(self.palette):
            raise ValueError("palette entries must be pairwise distinct")
        reserved = {self.background, self.agent_ink_open, self.agent_ink_closed}
        if len(reserved) != 3:
            raise ValueError("reserved render colors must be distinct")
        if reserved & set(self.palette):
            raise ValueError("palette collides with reserved render colors")
        if len(set(self.glyph_atlas)) != len(self.glyph_atlas):
            raise ValueError("glyph patterns must be pairwise distinct")
        if any(p == 0 for p in self.glyph_atlas):
            raise ValueError("glyph patterns must be non-empty")
        if len(self.glyph_inks) != len(self.glyph_atlas):
            raise ValueError("one ink per glyph pattern required")
        if len(set(self.glyph_inks)) != len(self.glyph_inks):
            raise ValueError("glyph inks must be pairwise distinct")
        if (set(self.glyph_inks) & set(self.palette)) or (set(self.glyph_inks)
                                                          & reserved):
            raise ValueError("glyph inks collide with palette or reserved colors")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.cell_px, self.palette, self.glyph_atlas,
                       self.glyph_inks, self.agent_sprite, self.background,
                       self.agent_ink_open, self.agent_ink_closed)).encode())
        return h.hexdigest()[:16]


def _spread_colors(n: int, used) -> tuple:
    """Greedy farthest-point RGB sampling: consecutive picks maximize the
    minimum distance to everything chosen so far, keeping every color pair
    (cube colors, glyph inks, reserved inks) well separated."""
    levels = np.arange(16, 256, 16)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"),
                    axis=-1).reshape(-1, 3).astype(np.float64)
    grid = grid[grid.max(axis=1) >= 64.0]
    ref = np.array(sorted(used), dtype=np.float64)
    mind = ((grid[:, None, :] - ref[None, :, :]) ** 2).sum(-1).min(axis=1)
    out = []
    for _ in range(n):
        i = int(np.argmax(mind))
        if mind[i] <= 0.0:
            raise ValueError("color grid exhausted")
        out.append((int(grid[i, 0]), int(grid[i, 1]), int(grid[i, 2])))
        mind = np.minimum(mind, ((grid - grid[i]) ** 2).sum(-1))
    return tuple(out)


def build_palette(n_colors: int) -> tuple:
    """n widely spread, pairwise-distinct cube RGB triples."""
    return _spread_colors(n_colors, set(RESERVED_COLORS))


def build_glyph_inks(n_glyphs: int, palette: tuple) -> tuple:
    """Distinct glyph tints, spread away from the cube palette and the
    reserved inks, so a glyph's identity is carried by its ink as well as
    its pattern."""
    return _spread_colors(n_glyphs, set(RESERVED_COLORS) | set(palette))


def build_glyph_atlas(n_glyphs: int) -> tuple:
    """Patterns whose per-sub-region pixel counts form unique signatures."""
    sigs = [(a, b, c, d)
            for a in range(5) for b in range(5) for c in range(5) for d in range(5)
            if (a, b, c, d) != (0, 0, 0, 0)]
    if n_glyphs > len(sigs):
        raise ValueError(f"glyph atlas supports at most {len(sigs)} glyphs")
    atlas = []
    for sig in sigs[:n_glyphs]:
        pattern = 0
        for region, count in enumerate(sig):
            for bit in range(count):
                pattern |= 1 << (region * 4 + bit)
        atlas.append(pattern)
    return tuple(atlas)


def default_render_config(n_colors: int, n_glyphs: int,
                          sprite: int = SPRITE_CHECKER) -> RenderConfig:
    palette = build_palette(n_colors)
    cfg = RenderConfig(cell_px=CELL_PX, palette=palette,
                       glyph_atlas=build_glyph_atlas(n_glyphs),
                       glyph_inks=build_glyph_inks(n_glyphs, palette),
                       agent_sprite=sprite)
    cfg.validate()
    return cfg


def _cell_view(img: np.ndarray, cell: tuple) -> np.ndarray:
    x, y = cell
    return img[y * CELL_PX:(y + 1) * CELL_PX, x * CELL_PX:(x + 1) * CELL_PX]


def region_coords(regions) -> tuple:
    """Row/col pixel coordinates of a region tuple in bit order."""
    rs, cs = [], []
    for rows, cols in regions:
        for r in range(rows.start, rows.stop):
            for c in range(cols.start, cols.stop):
                rs.append(r)
                cs.append(c)
    return np.array(rs), np.array(cs)

GLYPH_COORDS = region_coords(GLYPH_SUBREGIONS)
SPRITE_COORDS = region_coords((TOP_BAND,))

_PATTERN_CACHE: dict = {}


def _pattern_coords(coords, pattern: int):
    key = (id(coords[0]), pattern)
    got = _PATTERN_CACHE.get(key)
    if got is None:
        bits = np.array([(pattern >> b) & 1 for b in range(len(coords[0]))],
                        dtype=bool)
        got = (coords[0][bits], coords[1][bits])
        _PATTERN_CACHE[key] = got
    return got


def _paint_pattern(block: np.ndarray, coords, pattern: int, ink) -> None:
    rs, cs = _pattern_coords(coords, pattern)
    block[rs, cs] = ink


def render(state: WorldState, cfg: RenderConfig) -> np.ndarray:
    """Rasterize a full observation as an [H, W, 3] uint8 image."""
    img = np.empty((GRID_H * CELL_PX, GRID_W * CELL_PX, 3), dtype=np.uint8)
    img[:, :] = cfg.background
    for i, (cell, color) in enumerate(state.cubes):
        if i != state.held:
            _cell_view(img, cell)[:, :] = cfg.palette[color]
    for cell, glyph in state.marks:
        _paint_pattern(_cell_view(img, cell), GLYPH_COORDS,
                       cfg.glyph_atlas[glyph], cfg.glyph_inks[glyph])
    if state.held is not None:
        block = _cell_view(img, state.agent)
        block[CENTER_BLOCK] = cfg.palette[state.cubes[state.held][1]]
    ink = cfg.agent_ink_closed if state.gripper == GRIP_CLOSED else cfg.agent_ink_open
    _paint_pattern(_cell_view(img, state.agent), SPRITE_COORDS,
                   cfg.agent_sprite, ink)
    return img


def render_agent_only(agent: tuple, gripper: int, cfg: RenderConfig) -> np.ndarray:
    img = np.empty((GRID_H * CELL_PX, GRID_W * CELL_PX, 3), dtype=np.uint8)
    img[:, :] = cfg.background
    ink = cfg.agent_ink_closed if gripper == GRIP_CLOSED else cfg.agent_ink_open
    _paint_pattern(_cell_view(img, agent), SPRITE_COORDS, cfg.agent_sprite, ink)
    return img


def keyframe_indices(chunk_len: int, n_keyframes: int) -> tuple:
    """Post-action step indices round(i*c/K) for i = 1..K."""
    return tuple(int(math_floor_round(i * chunk_len / n_keyframes))
                 for i in range(1, n_keyframes + 1))


def math_floor_round(x: float) -> int:
    return int(np.floor(x + 0.5))


def render_agent_frames(state: WorldState, chunk, n_keyframes: int,
                        cfg: RenderConfig) -> list:
    """Agent-only kinematic keyframes under a chunk: position and gripper flag
    evolve, all object interactions are ignored and no objects are drawn."""
    c = len(chunk)
    if n_keyframes < 1:
        raise ValueError("need at least one keyframe")
    if n_keyframes > c:
        raise ValueError(f"{n_keyframes} keyframes exceed chunk length {c}")
    x, y = state.agent
    grip = state.gripper
    poses = []
    for a in chunk:
        x = min(max(x + a.dx, 0), GRID_W - 1)
        y = min(max(y + a.dy, 0), GRID_H - 1)
        if a.grip == CMD_CLOSE:
            grip = GRIP_CLOSED
        elif a.grip == CMD_OPEN:
            grip = GRIP_OPEN
        poses.append(((x, y), grip))
    return [render_agent_only(*poses[j - 1], cfg)
            for j in keyframe_indices(c, n_keyframes)]


def outcome(trace, task) -> EpisodeOutcome:
    """Score a finished episode against a task.

    Grasp: the target cube was held at some step. Reach: the agent's final
    cell is the target mark's cell and the final action was a pure stop.
    Success additionally requires the target cube resting on the target mark.
    """
    states = trace.states
    actions = trace.actions
    first = states[0]
    cube_idx = _find_cube(first, task.target_color)
    mark_cell = _find_mark(first, task.target_glyph)
    grasp = int(any(s.held == cube_idx for s in states))
    final = states[-1]
    reach = 0
    if actions:
        last = actions[-1]
        reach = int(final.agent == mark_cell and last.dx == 0 and last.dy == 0)
    placed = int(final.cubes[cube_idx][0] == mark_cell and final.held != cube_idx)
    return EpisodeOutcome(grasp=grasp, reach=reach,
                          success=grasp * reach * placed)


def _find_cube(state: WorldState, color: int) -> int:
    for i, (_, c) in enumerate(state.cubes):
        if c == color:
            return i
    raise ValueError(f"no cube with color {color} in scene")


def _find_mark(state: WorldState, glyph: int) -> tuple:
    for cell, g in state.marks:
        if g == glyph:
            return cell
    raise ValueError(f"no mark with glyph {glyph} in scene")


def _route(src: tuple, dst: tuple, y_first: bool = False) -> list:
    """Axis-ordered shortest path moves."""
    moves = []
    x, y = src
    legs = ("y", "x") if y_first else ("x", "y")
    for leg in legs:
        if leg == "x":
            while x != dst[0]:
                d = 1 if dst[0] > x else -1
                moves.append(Action(d, 0, CMD_HOLD))
                x += d
        else:
            while y != dst[1]:
                d = 1 if dst[1] > y else -1
                moves.append(Action(0, d, CMD_HOLD))
                y += d
    return moves


def expert_policy(state: WorldState, task) -> tuple:
    """Full scripted solution from the given state: walk to the target cube,
    close, walk to the target mark, stop and open.

    The approach leg runs x-then-y and the carry leg y-then-x, so the carry
    happens along the marks row: every intermediate pose lies on a route
    segment shared with other cube/mark pairings, which keeps retrieval
    recoverable at any replanning point.
    """
    cube_idx = _find_cube(state, task.target_color)
    mark_cell = _find_mark(state, task.target_glyph)
    actions: list[Action] = []
    pos = state.agent
    if state.held != cube_idx:
        if state.held is not None:
            actions.append(Action(0, 0, CMD_OPEN))
        cube_cell = state.cubes[cube_idx][0]
        actions.extend(_route(pos, cube_cell))
        actions.append(Action(0, 0, CMD_CLOSE))
        pos = cube_cell
    actions.extend(_route(pos, mark_cell, y_first=True))
    actions.append(Action(0, 0, CMD_OPEN))
    return tuple(actions)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path} is not a binary PPM file")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    raw = parts[3]
    expected = w * h * 3
    if len(raw) < expected:
        raise ValueError(f"truncated PPM: have {len(raw)} bytes, need {expected}")
    return np.frombuffer(raw[:expected], dtype=np.uint8).reshape(h, w, 3)


def dump_episode(out_dir, trace, task_id: str, cfg: RenderConfig,
                 outcome_flags: EpisodeOutcome | None = None) -> None:
    """Frame dump: one PPM per state plus a line-delimited manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"task_id={task_id}", f"n_frames={len(trace.states)}"]
    for i, s in enumerate(trace.states):
        name = f"frame_{i:04d}.ppm"
        write_ppm(out / name, render(s, cfg))
        if i < len(trace.actions):
            a = trace.actions[i]
            lines.append(f"frame={name} action={a.dx},{a.dy},{a.grip}")
        else:
            lines.append(f"frame={name} action=-")
    if outcome_flags is not None:
        lines.append(f"grasp={outcome_flags.grasp} reach={outcome_flags.reach} "
                     f"success={outcome_flags.success}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
