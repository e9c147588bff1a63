"""Frozen vision-language-aligned embedding space.

Two interchangeable builds behind one interface: an oracle encoder that
inverts the renderer exactly and grounds referring expressions by
construction, and a learned encoder pretrained contrastively on randomized
caption/clip pairs covering the full vocabulary. Both expose a frame
featurizer (feature space shared by real and predicted futures) and a
backbone that fuses frame features with instruction text into unit-norm
embeddings scored by cosine similarity.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import vocab as vocab_mod
from . import world
from .vocab import Vocabulary
from .world import (CELL_PX, GRID_H, GRID_W, RenderConfig, WorldState,
                    default_render_config, keyframe_indices, render)

D_E_DEFAULT = 64
D_Z_DEFAULT = 32
ORACLE_BIAS = 0.25

# Per-cell pooling regions: top band, center block, four glyph sub-regions,
# bottom band. Fixed pixel averaging, no learned parameters.
_POOL_REGIONS = ((world.TOP_BAND,), (world.CENTER_BLOCK,),
                 *[(r,) for r in world.GLYPH_SUBREGIONS], (world.BOTTOM_BAND,))
N_REGIONS = len(_POOL_REGIONS)
# Global relational channels appended to the per-cell stats: carried-cube
# color, mark-row resident color, and the ink of marks that carry a cube.
N_GLOBAL = 15
POOL_DIM = GRID_W * GRID_H * N_REGIONS * 3 + N_GLOBAL


def pool_image(image: np.ndarray) -> np.ndarray:
    """Fixed vision stem: mean RGB over the seven layout regions of every
    cell plus a few parameterless relational sums, all in [0, 1].

    The relational block exposes event evidence that per-cell means carry
    only as cell-position products: the color held in a center block, the
    color resting on the marks row, and the glyph ink at cells whose bottom
    band is occupied.
    """
    if image.shape != (GRID_H * CELL_PX, GRID_W * CELL_PX, 3):
        raise ValueError(f"image shape {image.shape} does not match the "
                         f"{GRID_W}x{GRID_H} raster")
    # 2x2-pixel block sums per cell: [cell_y, row_pair, cell_x, col_pair, 3]
    sub = (image.reshape(GRID_H, 4, 2, GRID_W, 4, 2, 3)
           .sum(axis=(2, 5), dtype=np.int64).astype(np.float64))
    top = sub[:, 0].sum(axis=2) / 16.0
    bottom = sub[:, 3].sum(axis=2) / 16.0
    center = sub[:, 1:3, :, 1:3].sum(axis=(1, 3)) / 16.0
    g1 = sub[:, 1, :, 0] / 4.0
    g2 = sub[:, 2, :, 0] / 4.0
    g3 = sub[:, 1, :, 3] / 4.0
    g4 = sub[:, 2, :, 3] / 4.0
    parts = [top, center, g1, g2, g3, g4, bottom]
    center_sum = center.sum(axis=(0, 1)) / (5.0 * 255.0)
    bottom_sum = bottom.sum(axis=(0, 1)) / (5.0 * 255.0)
    held = np.clip(center_sum - bottom_sum, 0.0, 1.0)
    row_cube = bottom[world.MARK_ROW_Y].sum(axis=0) / 255.0
    occupied = bottom[world.MARK_ROW_Y].sum(axis=1, keepdims=True) > 5.0
    glyph_mean = (g1 + g2 + g3 + g4)[world.MARK_ROW_Y] / 4.0
    row_ink = (glyph_mean * occupied).sum(axis=0) * (2.0 / 255.0)
    rel = np.clip(np.concatenate([center_sum, bottom_sum, held,
                                  row_cube, row_ink]), 0.0, 1.0)
    return np.concatenate(
        [np.stack(parts, axis=2).reshape(-1) / 255.0, rel])


def pool_to_u8(pooled: np.ndarray) -> np.ndarray:
    return np.round(pooled * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class FrameSymbols:
    """Exact cell-level contents decoded from a rendered frame."""

    agent: tuple
    gripper: int
    held_color: int | None
    ground_cubes: tuple  # ((x, y, color_id), ...) sorted by color
    marks: tuple  # ((x, y, glyph_id), ...) sorted by x


def _pack_px(px) -> int:
    return (int(px[0]) << 16) | (int(px[1]) << 8) | int(px[2])


_LUT_CACHE: dict = {}


def _luts(cfg: RenderConfig):
    got = _LUT_CACHE.get(cfg)
    if got is None:
        palette_lut = {_pack_px(rgb): cid for cid, rgb in enumerate(cfg.palette)}
        ink_lut = {_pack_px(rgb): gid for gid, rgb in enumerate(cfg.glyph_inks)}
        got = (palette_lut, ink_lut)
        _LUT_CACHE[cfg] = got
    return got


_POW2_16 = (1 << np.arange(16)).astype(np.int64)


def decode_image(image: np.ndarray, cfg: RenderConfig) -> FrameSymbols:
    """Invert the renderer: recover agent pose, grasp, cubes, and marks."""
    palette_lut, ink_lut = _luts(cfg)
    cells = (image.reshape(GRID_H, CELL_PX, GRID_W, CELL_PX, 3)
             .transpose(0, 2, 1, 3, 4))
    top = cells[:, :, 0:2, :, :]
    open_hit = np.all(top == np.array(cfg.agent_ink_open, np.uint8),
                      axis=-1).any(axis=(2, 3))
    closed_hit = np.all(top == np.array(cfg.agent_ink_closed, np.uint8),
                        axis=-1).any(axis=(2, 3))
    ys, xs = np.nonzero(open_hit | closed_hit)
    if len(ys) != 1:
        raise ValueError(f"expected exactly one agent cell, found {len(ys)}")
    agent = (int(xs[0]), int(ys[0]))
    gripper = world.GRIP_CLOSED if closed_hit[ys[0], xs[0]] else world.GRIP_OPEN

    bottom = cells[:, :, 6, 0].astype(np.int64)
    packed = (bottom[..., 0] << 16) | (bottom[..., 1] << 8) | bottom[..., 2]
    bg = _pack_px(cfg.background)
    ground = []
    for y, x in zip(*np.nonzero(packed != bg)):
        cid = palette_lut.get(int(packed[y, x]))
        if cid is not None:
            ground.append((int(x), int(y), cid))

    grows, gcols = world.GLYPH_COORDS
    gpx = cells[:, :, grows, gcols].astype(np.int64)
    gpacked = (gpx[..., 0] << 16) | (gpx[..., 1] << 8) | gpx[..., 2]
    marks = []
    for y, x in zip(*np.nonzero((gpacked != bg).any(axis=-1))):
        gid = None
        for v in gpacked[y, x]:
            gid = ink_lut.get(int(v))
            if gid is not None:
                break
        if gid is None:
            continue  # glyph regions showing cube color only
        bits = int((gpacked[y, x] == _pack_px(cfg.glyph_inks[gid])) @ _POW2_16)
        if bits != cfg.glyph_atlas[gid]:
            raise ValueError(f"glyph pattern mismatch at cell {(int(x), int(y))}")
        marks.append((int(x), int(y), gid))

    held_color = None
    ax, ay = agent
    ccid = palette_lut.get(_pack_px(cells[ay, ax][3, 3]))
    if ccid is not None and ccid != palette_lut.get(int(packed[ay, ax])):
        held_color = ccid
    return FrameSymbols(agent=agent, gripper=gripper, held_color=held_color,
                        ground_cubes=tuple(sorted(ground, key=lambda t: t[2])),
                        marks=tuple(sorted(marks)))


def state_symbols(state: WorldState) -> FrameSymbols:
    ground = sorted(((c[0], c[1], color) for i, (c, color) in enumerate(state.cubes)
                     if i != state.held), key=lambda t: t[2])
    held = None if state.held is None else state.cubes[state.held][1]
    marks = sorted((c[0], c[1], g) for c, g in state.marks)
    return FrameSymbols(agent=state.agent, gripper=state.gripper,
                        held_color=held, ground_cubes=tuple(ground),
                        marks=tuple(marks))


# Oracle frame-code layout within a d_e vector:
#   [0:12) agent x one-hot  [12:21) agent y one-hot  [21] gripper closed
#   [22] held flag          [23] held color scalar (id+1)/C
#   [24:36) four (x, y, color-scalar) cube slots sorted by color
#   [36:42) three (x, glyph-scalar) mark slots sorted by x
_CODE_CUBES = 24
_CODE_MARKS = 36
_CODE_LEN = 42


def _oracle_code(sym: FrameSymbols, n_colors: int, n_glyphs: int,
                 d_e: int) -> np.ndarray:
    code = np.zeros(d_e)
    code[sym.agent[0]] = 1.0
    code[GRID_W + sym.agent[1]] = 1.0
    code[21] = float(sym.gripper == world.GRIP_CLOSED)
    entries = list(sym.ground_cubes)
    if sym.held_color is not None:
        code[22] = 1.0
        code[23] = (sym.held_color + 1) / n_colors
        entries.append((sym.agent[0], sym.agent[1], sym.held_color))
    entries.sort(key=lambda t: t[2])
    for i, (x, y, cid) in enumerate(entries[:4]):
        base = _CODE_CUBES + 3 * i
        code[base] = x / (GRID_W - 1)
        code[base + 1] = y / (GRID_H - 1)
        code[base + 2] = (cid + 1) / n_colors
    for i, (x, _, gid) in enumerate(sym.marks[:3]):
        base = _CODE_MARKS + 2 * i
        code[base] = x / (GRID_W - 1)
        code[base + 1] = (gid + 1) / n_glyphs
    return code


@dataclass(frozen=True)
class DecodedCode:
    agent: tuple
    held_color: int | None
    cubes: tuple  # (x, y, color)
    marks: tuple  # (x, glyph)


def _decode_code(code: np.ndarray, n_colors: int, n_glyphs: int) -> DecodedCode:
    ax = int(np.argmax(code[:GRID_W]))
    ay = int(np.argmax(code[GRID_W:GRID_W + GRID_H]))
    held = None
    if code[22] > 0.5:
        cid = int(round(code[23] * n_colors - 1))
        if 0 <= cid < n_colors:
            held = cid
    cubes = []
    for i in range(4):
        base = _CODE_CUBES + 3 * i
        v = code[base + 2]
        if v > 0.5 / n_colors:
            cid = int(round(v * n_colors - 1))
            if 0 <= cid < n_colors:
                x = int(round(code[base] * (GRID_W - 1)))
                y = int(round(code[base + 1] * (GRID_H - 1)))
                cubes.append((x, y, cid))
    marks = []
    for i in range(3):
        base = _CODE_MARKS + 2 * i
        v = code[base + 1]
        if v > 0.5 / n_glyphs:
            gid = int(round(v * n_glyphs - 1))
            if 0 <= gid < n_glyphs:
                marks.append((int(round(code[base] * (GRID_W - 1))), gid))
    return DecodedCode(agent=(ax, ay), held_color=held,
                       cubes=tuple(cubes), marks=tuple(marks))


@dataclass(frozen=True)
class GroundedEncoder:
    """Frozen after construction; every operation is read-only."""

    kind: str  # "oracle" | "learned"
    vocab: Vocabulary
    render_cfg: RenderConfig
    d_e: int
    d_z: int
    temperature: float = 0.07
    featurizer: dm.Network | None = None
    backbone: dm.Network | None = None
    text_table: np.ndarray | None = None
    text_idf: np.ndarray | None = None
    loss_curve: tuple = field(default=(), compare=False)


def build_oracle_encoder(vocab: Vocabulary, render_cfg: RenderConfig) -> GroundedEncoder:
    """Exact encoder: the image pathway inverts the renderer, the text
    pathway maps referring expressions onto the same symbol codes."""
    render_cfg.validate()
    if len(render_cfg.palette) < vocab.n_colors:
        raise ValueError(f"palette covers {len(render_cfg.palette)} colors, "
                         f"vocabulary names {vocab.n_colors}")
    if len(render_cfg.glyph_atlas) < vocab.n_glyphs:
        missing = vocab.mark_words[len(render_cfg.glyph_atlas)]
        raise ValueError(f"glyph atlas is missing an entry for {missing!r}")
    d_z = vocab.n_colors + vocab.n_glyphs + 1
    return GroundedEncoder(kind="oracle", vocab=vocab, render_cfg=render_cfg,
                           d_e=D_E_DEFAULT, d_z=d_z)


def encode_frame(enc: GroundedEncoder, image: np.ndarray) -> np.ndarray:
    """Deterministic frame feature of dimension enc.d_e."""
    if image.shape != (GRID_H * CELL_PX, GRID_W * CELL_PX, 3):
        raise ValueError(f"image shape {image.shape} does not match the "
                         f"expected {(GRID_H * CELL_PX, GRID_W * CELL_PX, 3)} raster")
    if enc.kind == "oracle":
        sym = decode_image(image, enc.render_cfg)
        return _oracle_code(sym, enc.vocab.n_colors, enc.vocab.n_glyphs, enc.d_e)
    return featurize_pooled(enc, pool_image(image))


def featurize_pooled(enc: GroundedEncoder, pooled: np.ndarray) -> np.ndarray:
    if enc.kind != "learned":
        raise ValueError("pooled featurization is only defined for the learned build")
    return dm.forward(enc.featurizer, pooled)


def _frames_array(frames) -> np.ndarray | None:
    if frames is None:
        return None
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0:
        return None
    return arr


def _oracle_events(codes: np.ndarray, n_colors: int, n_glyphs: int):
    """Grasped colors across frames and glyphs carrying a cube at the end."""
    picked = []
    for code in codes:
        d = _decode_code(code, n_colors, n_glyphs)
        if d.held_color is not None and d.held_color not in picked:
            picked.append(d.held_color)
    final = _decode_code(codes[-1], n_colors, n_glyphs)
    deposits = []
    mark_cells = {}
    for x, gid in final.marks:
        mark_cells[(x, world.MARK_ROW_Y)] = gid
    for x, y, cid in final.cubes:
        if final.held_color == cid and (x, y) == final.agent:
            continue
        gid = mark_cells.get((x, y))
        if gid is not None and gid not in deposits:
            deposits.append(gid)
    return picked, deposits


def _resolve_targets(enc: GroundedEncoder, text: str, layout: DecodedCode | None):
    """Target color/glyph ids named by a prompt, using the scene layout for
    positional references. Unresolvable targets are skipped."""
    toks = enc.vocab.tokenize(text)
    pick_color = None
    place_glyph = None
    joined = " ".join(toks)

    def slot_color(ref: vocab_mod.ResolvedReference):
        if layout is None or len(layout.cubes) < 4:
            return None
        by_x = sorted(layout.cubes)
        idx = ref.value if ref.kind == "slot_left" else len(by_x) - 1 - ref.value
        if 0 <= idx < len(by_x):
            return by_x[idx][2]
        return None

    def slot_glyph(ref: vocab_mod.ResolvedReference):
        if layout is None or len(layout.marks) < 3:
            return None
        by_x = sorted(layout.marks)
        idx = ref.value if ref.kind == "slot_left" else len(by_x) - 1 - ref.value
        if 0 <= idx < len(by_x):
            return by_x[idx][1]
        return None

    if "pick up the " in joined:
        x_part = joined.split("pick up the ", 1)[1]
        for stop in (" and place it onto the ", " from the table"):
            if stop in x_part:
                x_part = x_part.split(stop, 1)[0]
                break
        ref = vocab_mod.parse_cube_reference(enc.vocab, x_part)
        pick_color = ref.value if ref.kind == "color" else slot_color(ref)
    y_part = None
    if "place it onto the " in joined:
        y_part = joined.split("place it onto the ", 1)[1]
    elif "place the grasped object to the " in joined:
        y_part = joined.split("place the grasped object to the ", 1)[1]
        if y_part.endswith(" on the table"):
            y_part = y_part[: -len(" on the table")]
    if y_part is not None:
        ref = vocab_mod.parse_mark_reference(enc.vocab, y_part)
        place_glyph = ref.value if ref.kind == "glyph" else slot_glyph(ref)
    return pick_color, place_glyph


def backbone_embed(enc: GroundedEncoder, frames, text: str | None) -> np.ndarray:
    """Unit-norm joint embedding of a frame-feature sequence and/or text.

    Predicted future features are accepted in place of real ones with no
    structural distinction.
    """
    arr = _frames_array(frames)
    if arr is None and not text:
        raise ValueError("backbone_embed needs frames or text")
    if arr is not None and arr.shape[-1] != enc.d_e:
        raise ValueError(f"frame features have dim {arr.shape[-1]}, "
                         f"encoder expects {enc.d_e}")
    if enc.kind == "oracle":
        C, G = enc.vocab.n_colors, enc.vocab.n_glyphs
        z = np.zeros(enc.d_z)
        layout = None
        if arr is not None:
            picked, deposits = _oracle_events(arr, C, G)
            for cid in picked:
                z[cid] += 1.0
            for gid in deposits:
                z[C + gid] += 1.0
            layout = _decode_code(arr[0], C, G)
        if text:
            pick_color, place_glyph = _resolve_targets(enc, text, layout)
            if pick_color is not None:
                z[pick_color] += 1.0
            if place_glyph is not None:
                z[C + place_glyph] += 1.0
        z[-1] = ORACLE_BIAS
        return z / np.linalg.norm(z)
    frames_mean = arr.mean(axis=0) if arr is not None else np.zeros(enc.d_e)
    text_mean = _text_feature(enc, text) if text else np.zeros(enc.d_e)
    x = np.concatenate([_rms(frames_mean), _rms(text_mean)])
    out = dm.forward(enc.backbone, x)
    return out / np.sqrt(np.sum(out * out) + 1e-12)


def _rms(v: np.ndarray) -> np.ndarray:
    """Scale a fused input half to unit RMS so neither modality drowns the
    other; zero vectors (absent modality) pass through."""
    return v / np.sqrt(np.mean(v * v) + 1e-6)


def _text_feature(enc: GroundedEncoder, text: str) -> np.ndarray:
    index = vocab_mod.token_index(enc.vocab)
    bag = text_bag(enc.vocab, text, index, idf=enc.text_idf)
    return bag @ enc.text_table


def text_bag(vocab: Vocabulary, text: str, index: dict | None = None,
             idf=None) -> np.ndarray:
    """Token-count vector, optionally reweighted by inverse document
    frequency so template and system-prompt words do not drown the
    discriminative ones."""
    index = index or vocab_mod.token_index(vocab)
    toks = vocab.tokenize(text)
    bag = np.zeros(len(index))
    for t in toks:
        bag[index[t]] += 1.0
    if idf is not None:
        bag = bag * idf
    return bag / len(toks)


def caption_idf(vocab: Vocabulary, captions, index: dict | None = None) -> np.ndarray:
    """ln(N / df) over full prompts (system prompt counts into every one)."""
    index = index or vocab_mod.token_index(vocab)
    df = np.zeros(len(index))
    sys_toks = set(vocab_mod.SYSTEM_PROMPT.split())
    n = 0
    for cap in captions:
        n += 1
        for t in set(cap.split()) | sys_toks:
            df[index[t]] += 1.0
    return np.log(n / np.maximum(df, 1.0))


def encode_instruction(enc: GroundedEncoder, prompt: str, context) -> np.ndarray:
    """Goal embedding from a prompt plus context frames."""
    if not prompt:
        raise ValueError("empty prompt")
    ctx_feats = [encode_frame(enc, img) for img in (context or [])]
    return backbone_embed(enc, np.array(ctx_feats) if ctx_feats else None, prompt)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class CorpusItem:
    clip: np.ndarray  # [K, POOL_DIM] uint8 pooled keyframes
    context: np.ndarray  # [2, POOL_DIM] uint8 pooled (episode start, window start)
    caption: str


@dataclass(frozen=True)
class Corpus:
    items: tuple
    keyframes: int
    seed: int
    group_size: int = 4


@dataclass(frozen=True)
class _CorpusTask:
    target_color: int
    target_glyph: int


GROUP_SIZE = 4


def _scene_state(colors, glyphs, start) -> WorldState:
    cubes = tuple(((x, world.CUBE_ROW_Y), int(c))
                  for x, c in zip(world.CUBE_SLOTS_X, colors))
    marks = tuple(((x, world.MARK_ROW_Y), int(g))
                  for x, g in zip(world.MARK_SLOTS_X, glyphs))
    return WorldState(agent=start, gripper=world.GRIP_OPEN, held=None,
                      cubes=cubes, marks=marks, step_count=0)


def generate_pretraining_corpus(vocab: Vocabulary, n: int, seed: int,
                                render_cfg: RenderConfig | None = None,
                                horizon: int = 12, keyframes: int = 4) -> Corpus:
    """Caption/clip pairs from randomized scenes over the full vocabulary.

    Items come in groups of four that share one scene and start pose but
    differ in target, window, and caption, so that matching within a group
    requires reading the caption rather than recognizing the scene. Early
    groups force every color and mark word to appear as a caption target.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    cfg = render_cfg or default_render_config(vocab.n_colors, vocab.n_glyphs)
    rng = np.random.default_rng(np.random.PCG64(seed))
    cube_styles = vocab_mod.CUBE_STYLES_TRAIN + vocab_mod.CUBE_STYLES_TEST
    mark_styles = vocab_mod.MARK_STYLES_TRAIN + vocab_mod.MARK_STYLES_TEST
    n_groups = (n + GROUP_SIZE - 1) // GROUP_SIZE
    color_groups = (vocab.n_colors + 3) // 4
    glyph_groups = (vocab.n_glyphs + 2) // 3
    items = []
    for g in range(n_groups):
        colors = rng.choice(vocab.n_colors, size=4, replace=False)
        glyphs = rng.choice(vocab.n_glyphs, size=3, replace=False)
        if g < color_groups:
            colors = [(g * 4 + j) % vocab.n_colors for j in range(4)]
        elif g < color_groups + glyph_groups:
            gb = (g - color_groups) * 3
            glyphs = [(gb + j) % vocab.n_glyphs for j in range(3)]
        start = (int(rng.integers(0, GRID_W)), int(rng.integers(0, 4)))
        state0 = _scene_state(colors, glyphs, start)
        o0_pooled = pool_to_u8(pool_image(render(state0, cfg)))
        cube_perm = rng.permutation(4)
        mark_perm = rng.permutation(3)
        # Groups are kind-homogeneous: with mixed kinds, window phase and
        # caption template alone would separate the group, so the attributes
        # would never need to be read. Place groups cap at the three distinct
        # marks and carry one whole-instruction item instead.
        group_kind = ("pick", "place", "whole")[int(rng.choice(3, p=(0.4, 0.4, 0.2)))]
        if g < color_groups:
            group_kind = "pick"
        elif g < color_groups + glyph_groups:
            group_kind = "place"
        if group_kind == "pick":
            kinds = ["pick"] * 4
        elif group_kind == "place":
            # The fourth member must not be place or whole: only three marks
            # exist, so its mark would duplicate one of the place captions'
            # targets and create an in-group false negative.
            kinds = ["place", "place", "place", "pick"]
        else:
            kinds = ["whole"] * 4
        rollouts = []
        for j in range(GROUP_SIZE):
            cube_slot = int(cube_perm[j])
            mark_slot = int(mark_perm[j % 3])
            task = _CorpusTask(int(state0.cubes[cube_slot][1]),
                               int(state0.marks[mark_slot][1]))
            rollouts.append((cube_slot, mark_slot,
                             world.rollout(state0, world.expert_policy(state0, task))))
        for j in range(GROUP_SIZE):
            if len(items) == n:
                break
            cube_slot, mark_slot, ro = rollouts[j]
            target_color = int(state0.cubes[cube_slot][1])
            target_glyph = int(state0.marks[mark_slot][1])
            total = len(ro.actions)
            forced = g < color_groups + glyph_groups
            cube_style = "attr_direct" if forced else cube_styles[int(rng.integers(0, 4))]
            mark_style = "glyph_direct" if forced else mark_styles[int(rng.integers(0, 4))]
            cube_ref = vocab_mod.cube_reference(
                cube_style, vocab.color_names[target_color], cube_slot)
            mark_ref = vocab_mod.mark_reference(
                mark_style, vocab.mark_words[target_glyph], mark_slot)
            kind = kinds[j]
            grasp_step = next(si for si, s in enumerate(ro.states)
                              if s.held is not None)
            if kind == "pick":
                t = int(rng.integers(max(0, grasp_step - horizon), grasp_step))
                caption = vocab_mod.pick_prompt(cube_ref)
                idxs = [min(t + k, total)
                        for k in keyframe_indices(horizon, keyframes)]
            elif kind == "place":
                t = int(rng.integers(max(0, total - horizon), total))
                caption = vocab_mod.place_prompt(mark_ref)
                idxs = [min(t + k, total)
                        for k in keyframe_indices(horizon, keyframes)]
            else:
                t = 0
                caption = vocab_mod.render_instruction(cube_ref, mark_ref)
                idxs = list(keyframe_indices(total, keyframes))
            clip = np.stack([pool_to_u8(pool_image(render(ro.states[k], cfg)))
                             for k in idxs])
            # The dynamic context frame comes from a sibling episode in the
            # same scene: if it came from the matched episode it would show
            # the very outcome the caption names, and matching could bypass
            # the caption entirely.
            sib = rollouts[(j + 1) % len(rollouts)][2]
            t_ctx = int(rng.integers(0, len(sib.actions) + 1))
            ctx = np.stack([o0_pooled,
                            pool_to_u8(pool_image(render(sib.states[t_ctx], cfg)))])
            items.append(CorpusItem(clip=clip, context=ctx, caption=caption))
    return Corpus(items=tuple(items), keyframes=keyframes, seed=seed,
                  group_size=GROUP_SIZE)


@dataclass(frozen=True)
class PretrainConfig:
    d_e: int = D_E_DEFAULT
    d_z: int = D_Z_DEFAULT
    feat_hidden: int = 256
    hidden: int = 256
    batch: int = 128
    epochs: int = 20
    lr: float = 2e-3
    min_lr: float = 1e-6
    temperature: float = 0.07
    seed: int = 0


def pretrain_encoder(corpus: Corpus, cfg: PretrainConfig,
                     vocab: Vocabulary | None = None,
                     render_cfg: RenderConfig | None = None) -> GroundedEncoder:
    """Contrastive pretraining of featurizer, backbone, and text embedder.

    The returned encoder is frozen; the per-step loss is recorded on it.
    """
    if len(corpus.items) == 0:
        raise ValueError("corpus is empty")
    if cfg.batch < 2:
        raise ValueError("contrastive pretraining needs batch >= 2")
    voc = vocab or vocab_mod.build_vocabulary()
    rcfg = render_cfg or default_render_config(voc.n_colors, voc.n_glyphs)
    index = vocab_mod.token_index(voc)
    n = len(corpus.items)
    K = corpus.keyframes

    clips = np.stack([it.clip for it in corpus.items])  # [n, K, P] u8
    ctxs = np.stack([it.context for it in corpus.items])  # [n, 2, P] u8
    idf = caption_idf(voc, [it.caption for it in corpus.items], index)
    bags = np.stack([text_bag(voc, it.caption, index, idf=idf)
                     for it in corpus.items])

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    feat = dm.build_network(
        dm.NetworkSpec(POOL_DIM, (cfg.feat_hidden,), cfg.d_e), cfg.seed + 1)
    backbone = dm.build_network(
        dm.NetworkSpec(2 * cfg.d_e, (cfg.hidden,), cfg.d_z), cfg.seed + 2)
    table = rng.normal(0.0, 0.1, (len(index), cfg.d_e))

    params = list(feat.params) + list(backbone.params) + [table]
    shell = dm.Network(spec=feat.spec, params=tuple(params))
    steps_per_epoch = max(1, n // cfg.batch)
    opt = dm.init_opt_state(shell, lr=cfg.lr, max_steps=cfg.epochs * steps_per_epoch,
                            min_lr=cfg.min_lr)
    nf, nb = len(feat.params), len(backbone.params)
    bspec = backbone.spec
    # Batches are drawn group-wise so every batch carries same-scene
    # negatives; without them, scene appearance alone separates the pairs.
    gsize = max(1, corpus.group_size)
    n_groups = n // gsize
    groups_per_batch = max(1, cfg.batch // gsize)
    curve = []
    for epoch in range(cfg.epochs):
        gorder = rng.permutation(n_groups)
        for bi in range(steps_per_epoch):
            gsel = gorder[bi * groups_per_batch:(bi + 1) * groups_per_batch]
            sel = np.concatenate([np.arange(g * gsize, (g + 1) * gsize)
                                  for g in gsel]) if len(gsel) else np.array([], int)
            if len(sel) < 2:
                continue
            bclip = clips[sel].astype(np.float64).reshape(len(sel) * K, -1) / 255.0
            bctx = ctxs[sel].astype(np.float64).reshape(len(sel) * 2, -1) / 255.0
            bbag = bags[sel]

            def closure(pt):
                fe = pt[:nf]
                bb = pt[nf:nf + nb]
                tbl = pt[nf + nb]
                cf = dm._forward_graph(feat.spec, fe, dm.Tensor(bclip))
                cf = dm.rms_norm(dm.t_mean(
                    dm.t_reshape(cf, (len(sel), K, cfg.d_e)), axis=1))
                xf = dm._forward_graph(feat.spec, fe, dm.Tensor(bctx))
                xf = dm.rms_norm(dm.t_mean(
                    dm.t_reshape(xf, (len(sel), 2, cfg.d_e)), axis=1))
                tf = dm.rms_norm(dm.t_matmul(dm.Tensor(bbag), tbl))
                zeros = dm.Tensor(np.zeros((len(sel), cfg.d_e)))
                vid = dm.l2_normalize(dm._forward_graph(
                    bspec, bb, dm.t_concat([cf, zeros], axis=1)))
                goal = dm.l2_normalize(dm._forward_graph(
                    bspec, bb, dm.t_concat([xf, tf], axis=1)))
                return dm.loss_contrastive(vid, goal, cfg.temperature)

            try:
                grads = dm.gradients(shell, closure)
            except ValueError as e:
                if "non-finite" in str(e):
                    raise ValueError(
                        f"pretraining diverged at step {opt.step}") from e
                raise
            loss_val = closure([dm.Tensor(p) for p in shell.params]).item()
            curve.append(loss_val)
            shell, opt = dm.optimizer_step(shell, grads, opt)
    params = shell.params
    feat = dm.Network(spec=feat.spec, params=tuple(params[:nf]))
    backbone = dm.Network(spec=bspec, params=tuple(params[nf:nf + nb]))
    table = params[nf + nb]
    return GroundedEncoder(kind="learned", vocab=voc, render_cfg=rcfg,
                           d_e=cfg.d_e, d_z=cfg.d_z,
                           temperature=cfg.temperature, featurizer=feat,
                           backbone=backbone, text_table=table, text_idf=idf,
                           loss_curve=tuple(curve))


def serialize_encoder(enc: GroundedEncoder) -> bytes:
    head = [f"kind={enc.kind}", f"d_e={enc.d_e}", f"d_z={enc.d_z}",
            f"temperature={enc.temperature!r}",
            f"rendercfg={enc.render_cfg.content_hash()}",
            f"sprite={enc.render_cfg.agent_sprite}",
            f"vocabulary={','.join(sorted(enc.vocab.tokens))}"]
    blobs = []
    if enc.kind == "learned":
        blobs = [dm.serialize_network(enc.featurizer),
                 dm.serialize_network(enc.backbone),
                 enc.text_table.astype("<f4").tobytes(),
                 enc.text_idf.astype("<f4").tobytes()]
    head.append(f"blobs={len(blobs)}")
    for b in blobs:
        head.append(f"blob_len={len(b)}")
    header = ("\n".join(head) + "\n\n").encode()
    return header + b"".join(blobs)


def encoder_hash(enc: GroundedEncoder) -> str:
    return hashlib.sha256(serialize_encoder(enc)).hexdigest()[:16]


def save_encoder(path, enc: GroundedEncoder) -> None:
    Path(path).write_bytes(serialize_encoder(enc))


def load_encoder(path) -> GroundedEncoder:
    data = Path(path).read_bytes()
    sep = data.find(b"\n\n")
    if sep < 0:
        raise ValueError("missing header terminator in encoder checkpoint")
    fields = {}
    blob_lens = []
    for line in data[:sep].decode().splitlines():
        k, v = line.split("=", 1)
        if k == "blob_len":
            blob_lens.append(int(v))
        else:
            fields[k] = v
    voc = vocab_mod.build_vocabulary()
    if ",".join(sorted(voc.tokens)) != fields["vocabulary"]:
        raise ValueError("checkpoint vocabulary does not match this build")
    rcfg = default_render_config(voc.n_colors, voc.n_glyphs,
                                 sprite=int(fields["sprite"]))
    if rcfg.content_hash() != fields["rendercfg"]:
        raise ValueError("checkpoint render config does not match this build")
    kind = fields["kind"]
    off = sep + 2
    blobs = []
    for ln in blob_lens:
        blobs.append(data[off:off + ln])
        if len(blobs[-1]) != ln:
            raise ValueError(f"truncated encoder checkpoint at byte {off}")
        off += ln
    if kind == "oracle":
        return build_oracle_encoder(voc, rcfg)
    feat = dm.deserialize_network(blobs[0])
    backbone = dm.deserialize_network(blobs[1])
    table = np.frombuffer(blobs[2], dtype="<f4").astype(np.float64)
    d_e = int(fields["d_e"])
    table = table.reshape(-1, d_e)
    idf = np.frombuffer(blobs[3], dtype="<f4").astype(np.float64)
    return GroundedEncoder(kind="learned", vocab=voc, render_cfg=rcfg,
                           d_e=d_e, d_z=int(fields["d_z"]),
                           temperature=float(fields["temperature"]),
                           featurizer=feat, backbone=backbone,
                           text_table=table, text_idf=idf)


def evaluate_retrieval(enc: GroundedEncoder, n_scenes: int, seed: int,
                       keyframes: int = 4) -> float:
    """Top-1 accuracy of 12-way caption-to-clip matching on fresh scenes."""
    voc = enc.vocab
    cfg = enc.render_cfg
    rng = np.random.default_rng(np.random.PCG64(seed))
    cube_styles = vocab_mod.CUBE_STYLES_TRAIN + vocab_mod.CUBE_STYLES_TEST
    mark_styles = vocab_mod.MARK_STYLES_TRAIN + vocab_mod.MARK_STYLES_TEST
    hits = 0
    total = 0
    for si in range(n_scenes):
        colors = rng.choice(voc.n_colors, size=4, replace=False)
        glyphs = rng.choice(voc.n_glyphs, size=3, replace=False)
        scene = world.SceneSpec(cube_colors=tuple(int(c) for c in colors),
                                mark_glyphs=tuple(int(g) for g in glyphs))
        state0 = world.make_scene(scene, 0)
        o0 = render(state0, cfg)
        clips = []
        goals = []
        for cs in range(4):
            for ms in range(3):
                task = _CorpusTask(int(colors[cs]), int(glyphs[ms]))
                ro = world.rollout(state0, world.expert_policy(state0, task))
                idxs = keyframe_indices(len(ro.actions), keyframes)
                feats = np.stack([encode_frame(enc, render(ro.states[j], cfg))
                                  for j in idxs])
                clips.append(backbone_embed(enc, feats, None))
                cube_ref = vocab_mod.cube_reference(
                    cube_styles[(si + cs) % 4], voc.color_names[int(colors[cs])], cs)
                mark_ref = vocab_mod.mark_reference(
                    mark_styles[(si + ms) % 4], voc.mark_words[int(glyphs[ms])], ms)
                prompt = (vocab_mod.SYSTEM_PROMPT + " "
                          + vocab_mod.render_instruction(cube_ref, mark_ref))
                goals.append(encode_instruction(enc, prompt, [o0, o0]))
        sims = np.array(goals) @ np.array(clips).T
        hits += int(np.sum(np.argmax(sims, axis=1) == np.arange(12)))
        total += 12
    return hits / total
