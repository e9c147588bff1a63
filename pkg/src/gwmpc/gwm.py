"""Latent world model: predicts future keyframe features in the frozen
encoder's feature space from the current observation's feature plus
tokenized actions.

Two conditioning kinds: "rendered" tokenizes a chunk by drawing the agent's
future kinematic poses and featurizing them with the frozen encoder (zero
learnable action-encoding parameters), "raw" projects the flat numeric chunk
through a learned head. Training regresses the features of the true future
keyframes; instructions are never read and the encoder is never updated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import grounding, world
from .grounding import GroundedEncoder, encode_frame, encoder_hash
from .wiser import DemoDataset
from .world import WorldState, keyframe_indices, render, render_agent_frames

ACTION_DIM = 3  # (dx, dy, centered gripper command)


@dataclass(frozen=True)
class GwmConfig:
    horizon: int = 12
    keyframes: int = 4
    hidden: tuple = (256, 256)
    epochs: int = 10
    batch: int = 256
    lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class GwmModel:
    kind: str  # "rendered" | "raw"
    net: dm.Network
    action_head: dm.Network | None
    d_e: int
    horizon: int
    keyframes: int
    encoder_hash: str

    @property
    def trainable_param_count(self) -> int:
        n = self.net.param_count
        if self.action_head is not None:
            n += self.action_head.param_count
        return n


@dataclass(frozen=True)
class PredictionInput:
    obs_feature: np.ndarray  # [d_e]
    action_tokens: np.ndarray  # [K, d_e]


def build_gwm(cfg: GwmConfig, kind: str, enc: GroundedEncoder) -> GwmModel:
    if kind not in ("rendered", "raw"):
        raise ValueError(f"unknown conditioning kind {kind!r}")
    d_e = enc.d_e
    spec = dm.NetworkSpec((1 + cfg.keyframes) * d_e, cfg.hidden,
                          cfg.keyframes * d_e, activation="tanh")
    net = dm.build_network(spec, cfg.seed)
    head = None
    if kind == "raw":
        head_spec = dm.NetworkSpec(cfg.horizon * ACTION_DIM, (),
                                   cfg.keyframes * d_e, activation="identity")
        head = dm.build_network(head_spec, cfg.seed + 1)
    return GwmModel(kind=kind, net=net, action_head=head, d_e=d_e,
                    horizon=cfg.horizon, keyframes=cfg.keyframes,
                    encoder_hash=encoder_hash(enc))


def chunk_numeric(chunk) -> np.ndarray:
    """Flat numeric encoding of a chunk: per action (dx, dy, grip - 1)."""
    return np.array([(a.dx, a.dy, a.grip - 1) for a in chunk],
                    dtype=np.float64).reshape(-1)


def tokenize_actions(state: WorldState, chunk, n_keyframes: int,
                     enc: GroundedEncoder, kind: str,
                     model: GwmModel | None = None,
                     render_cfg=None) -> np.ndarray:
    """K action-token features for a chunk.

    Rendered kind draws agent-only keyframes and featurizes them with the
    frozen encoder; raw kind projects the numeric chunk through the model's
    learned action head.
    """
    if n_keyframes > len(chunk):
        raise ValueError(f"{n_keyframes} keyframes exceed chunk length {len(chunk)}")
    if kind == "rendered":
        cfg = render_cfg or enc.render_cfg
        frames = render_agent_frames(state, chunk, n_keyframes, cfg)
        return np.stack([encode_frame(enc, f) for f in frames])
    if kind == "raw":
        if model is None or model.action_head is None:
            raise ValueError("raw tokenization needs a model with an action head")
        flat = chunk_numeric(chunk)
        out = dm.forward(model.action_head, flat)
        return out.reshape(n_keyframes, -1)
    raise ValueError(f"unknown conditioning kind {kind!r}")


def pad_chunk(actions, start: int, horizon: int) -> tuple:
    """Slice actions[start:start+horizon], repeating the final action at the
    trajectory end."""
    chunk = list(actions[start:start + horizon])
    if not chunk:
        chunk = [actions[-1]]
    while len(chunk) < horizon:
        chunk.append(chunk[-1])
    return tuple(chunk)


def gt_future(state: WorldState, chunk, n_keyframes: int,
              enc: GroundedEncoder) -> np.ndarray:
    """True-simulator future: roll the chunk forward, render full
    observations at the keyframe indices, and featurize each."""
    if n_keyframes > len(chunk):
        raise ValueError(f"{n_keyframes} keyframes exceed chunk length {len(chunk)}")
    idxs = keyframe_indices(len(chunk), n_keyframes)
    feats = []
    st = state
    want = set(idxs)
    collected = {}
    for i, a in enumerate(chunk, start=1):
        st = world.step(st, a)
        if i in want:
            collected[i] = encode_frame(enc, render(st, enc.render_cfg))
    for i in idxs:
        feats.append(collected[i])
    return np.stack(feats)


def predict_future(model: GwmModel, inp: PredictionInput) -> np.ndarray:
    """Predicted future keyframe features, shaped exactly like gt_future's
    output so they feed the backbone with no adapter."""
    if inp.action_tokens.shape != (model.keyframes, model.d_e):
        raise ValueError(f"action tokens shaped {inp.action_tokens.shape}, "
                         f"expected {(model.keyframes, model.d_e)}")
    if inp.obs_feature.shape != (model.d_e,):
        raise ValueError(f"observation feature shaped {inp.obs_feature.shape}, "
                         f"expected {(model.d_e,)}")
    x = np.concatenate([inp.obs_feature, inp.action_tokens.reshape(-1)])
    delta = dm.forward(model.net, x).reshape(model.keyframes, model.d_e)
    return inp.obs_feature[None, :] + delta


def predict_future_batch(model: GwmModel, obs_feature: np.ndarray,
                         tokens: np.ndarray) -> np.ndarray:
    """Batched prediction for N candidates: tokens [N, K, d_e] -> [N, K, d_e]."""
    n = tokens.shape[0]
    x = np.concatenate([np.repeat(obs_feature[None, :], n, axis=0),
                        tokens.reshape(n, -1)], axis=1)
    delta = dm.forward(model.net, x).reshape(n, model.keyframes, model.d_e)
    return obs_feature[None, None, :] + delta


def predict_future_raw_actions(model: GwmModel, state: WorldState, chunk,
                               enc: GroundedEncoder) -> np.ndarray:
    if model.kind != "raw":
        raise ValueError(f"model kind is {model.kind!r}, expected 'raw'")
    obs = encode_frame(enc, render(state, enc.render_cfg))
    tokens = tokenize_actions(state, chunk, model.keyframes, enc, "raw", model)
    return predict_future(model, PredictionInput(obs, tokens))


def _training_arrays(model: GwmModel, ds: DemoDataset, enc: GroundedEncoder,
                     cfg: GwmConfig):
    """Design matrices over every transition with stride 1.

    Chunks at trajectory ends are padded by repeating the final action, so
    target keyframes clamp to the final state.
    """
    obs_rows, tok_rows, tgt_rows = [], [], []
    idxs = keyframe_indices(cfg.horizon, cfg.keyframes)
    for tr in ds.trajectories:
        ro = world.rollout(tr.initial_state, tr.actions)
        feats = [encode_frame(enc, render(s, enc.render_cfg)) for s in ro.states]
        total = len(tr.actions)
        for t in range(total):
            chunk = pad_chunk(tr.actions, t, cfg.horizon)
            obs_rows.append(feats[t])
            if model.kind == "rendered":
                tok_rows.append(tokenize_actions(ro.states[t], chunk,
                                                 cfg.keyframes, enc, "rendered"))
            else:
                tok_rows.append(chunk_numeric(chunk))
            tgt_rows.append(np.stack([feats[min(t + j, total)] for j in idxs]))
    return (np.array(obs_rows), np.array(tok_rows),
            np.array(tgt_rows).reshape(len(tgt_rows), -1))


def train_gwm(model: GwmModel, ds: DemoDataset, enc: GroundedEncoder,
              cfg: GwmConfig) -> tuple[GwmModel, tuple]:
    """Feature-space regression of true future keyframes; returns the trained
    model and the per-step loss curve. The instruction field is never read
    and the encoder is never touched."""
    if not ds.trajectories:
        raise ValueError("empty demonstration dataset")
    if encoder_hash(enc) != model.encoder_hash:
        raise ValueError("model was built against a different encoder")
    obs, toks, tgts = _training_arrays(model, ds, enc, cfg)
    n = obs.shape[0]
    d_e = model.d_e
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))

    raw = model.kind == "raw"
    params = list(model.net.params)
    n_net = len(params)
    if raw:
        params += list(model.action_head.params)
    shell = dm.Network(spec=model.net.spec, params=tuple(params))
    steps_per_epoch = max(1, n // cfg.batch)
    opt = dm.init_opt_state(shell, lr=cfg.lr, weight_decay=cfg.weight_decay,
                            max_steps=cfg.epochs * steps_per_epoch,
                            min_lr=cfg.min_lr)
    head_spec = model.action_head.spec if raw else None
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for bi in range(steps_per_epoch):
            sel = order[bi * cfg.batch:(bi + 1) * cfg.batch]
            bobs = obs[sel]
            btgt = tgts[sel] - np.tile(bobs, (1, cfg.keyframes))

            if raw:
                bnum = toks[sel]

                def closure(pt):
                    tok = dm._forward_graph(head_spec, pt[n_net:], dm.Tensor(bnum))
                    x = dm.t_concat([dm.Tensor(bobs), tok], axis=1)
                    out = dm._forward_graph(model.net.spec, pt[:n_net], x)
                    return dm.loss_mse(out, dm.Tensor(btgt))
            else:
                bx = np.concatenate([bobs, toks[sel].reshape(len(sel), -1)], axis=1)

                def closure(pt):
                    out = dm._forward_graph(model.net.spec, pt[:n_net], dm.Tensor(bx))
                    return dm.loss_mse(out, dm.Tensor(btgt))

            try:
                grads = dm.gradients(shell, closure)
            except ValueError as e:
                if "non-finite" in str(e):
                    raise ValueError(f"training diverged at step {opt.step}") from e
                raise
            curve.append(closure([dm.Tensor(p) for p in shell.params]).item())
            shell, opt = dm.optimizer_step(shell, grads, opt)
    net = dm.Network(spec=model.net.spec, params=tuple(shell.params[:n_net]))
    head = (dm.Network(spec=head_spec, params=tuple(shell.params[n_net:]))
            if raw else None)
    trained = GwmModel(kind=model.kind, net=net, action_head=head, d_e=d_e,
                       horizon=model.horizon, keyframes=model.keyframes,
                       encoder_hash=model.encoder_hash)
    return trained, tuple(curve)


_GWM_MAGIC = b"GWMWM1\x00\x00"


def save_gwm(path, model: GwmModel) -> None:
    head = (f"kind={model.kind}\nd_e={model.d_e}\nhorizon={model.horizon}\n"
            f"keyframes={model.keyframes}\nencoder={model.encoder_hash}\n")
    net_blob = dm.serialize_network(model.net)
    head_blob = (dm.serialize_network(model.action_head)
                 if model.action_head is not None else b"")
    payload = (_GWM_MAGIC + struct.pack("<HQQ", len(head), len(net_blob),
                                        len(head_blob))
               + head.encode() + net_blob + head_blob)
    Path(path).write_bytes(payload)


def load_gwm(path, enc: GroundedEncoder | None = None) -> GwmModel:
    data = Path(path).read_bytes()
    if data[:8] != _GWM_MAGIC:
        raise ValueError("bad world-model checkpoint magic")
    hlen, nlen, alen = struct.unpack_from("<HQQ", data, 8)
    off = 8 + 18
    fields = dict(line.split("=", 1)
                  for line in data[off:off + hlen].decode().splitlines())
    off += hlen
    net = dm.deserialize_network(data[off:off + nlen]); off += nlen
    head = dm.deserialize_network(data[off:off + alen]) if alen else None
    model = GwmModel(kind=fields["kind"], net=net, action_head=head,
                     d_e=int(fields["d_e"]), horizon=int(fields["horizon"]),
                     keyframes=int(fields["keyframes"]),
                     encoder_hash=fields["encoder"])
    if enc is not None and encoder_hash(enc) != model.encoder_hash:
        raise ValueError("checkpoint was trained against a different encoder")
    return model
