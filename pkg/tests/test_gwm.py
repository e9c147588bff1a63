from dataclasses import replace

import numpy as np
import pytest

from gwmpc import grounding as gr
from gwmpc import gwm
from gwmpc import wiser
from gwmpc import world as w


@pytest.fixture(scope="module")
def small_ds(train_suite):
    small = wiser.TaskSuite(split="train", blocks=train_suite.blocks[:2])
    return wiser.collect_demos(small, per_task=2, seed=5)


@pytest.fixture(scope="module")
def trained_tiny(small_ds, tiny_learned_enc):
    cfg = gwm.GwmConfig(hidden=(64,), epochs=12, batch=128, seed=2)
    model = gwm.build_gwm(cfg, "rendered", tiny_learned_enc)
    return gwm.train_gwm(model, small_ds, tiny_learned_enc, cfg)


class TestTokenizeActions:
    def test_rendered_is_weight_independent(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        chunk = [w.Action(1, 0, w.CMD_HOLD)] * 12
        cfg_a = gwm.GwmConfig(seed=1)
        cfg_b = gwm.GwmConfig(seed=2)
        ma = gwm.build_gwm(cfg_a, "rendered", oracle_enc)
        mb = gwm.build_gwm(cfg_b, "rendered", oracle_enc)
        ta = gwm.tokenize_actions(s, chunk, 4, oracle_enc, "rendered", ma)
        tb = gwm.tokenize_actions(s, chunk, 4, oracle_enc, "rendered", mb)
        assert np.array_equal(ta, tb)

    def test_noop_chunk_identical_tokens(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        toks = gwm.tokenize_actions(s, [w.HOLD_ACTION] * 12, 4, oracle_enc,
                                    "rendered")
        for row in toks[1:]:
            assert np.array_equal(row, toks[0])

    def test_raw_shape(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        model = gwm.build_gwm(gwm.GwmConfig(), "raw", oracle_enc)
        toks = gwm.tokenize_actions(s, [w.HOLD_ACTION] * 12, 4, oracle_enc,
                                    "raw", model)
        assert toks.shape == (4, oracle_enc.d_e)

    def test_too_many_keyframes_rejected(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        with pytest.raises(ValueError, match="exceed"):
            gwm.tokenize_actions(s, [w.HOLD_ACTION] * 3, 4, oracle_enc,
                                 "rendered")


class TestGtFuture:
    def test_keyframe_indices_match_agent_frames(self):
        assert w.keyframe_indices(12, 4) == (3, 6, 9, 12)

    def test_noop_chunk_equals_current_features(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        feats = gwm.gt_future(s, [w.HOLD_ACTION] * 12, 4, oracle_enc)
        cur = gr.encode_frame(oracle_enc, w.render(s, oracle_enc.render_cfg))
        for row in feats:
            diff = np.nonzero(row != cur)[0]
            assert len(diff) == 0 or np.all(diff < 21)  # only step-free pose

    def test_shape_matches_prediction(self, oracle_enc, sample_scene):
        s = w.make_scene(sample_scene, 0)
        feats = gwm.gt_future(s, [w.HOLD_ACTION] * 12, 4, oracle_enc)
        model = gwm.build_gwm(gwm.GwmConfig(), "rendered", oracle_enc)
        toks = gwm.tokenize_actions(s, [w.HOLD_ACTION] * 12, 4, oracle_enc,
                                    "rendered")
        obs = gr.encode_frame(oracle_enc, w.render(s, oracle_enc.render_cfg))
        pred = gwm.predict_future(model, gwm.PredictionInput(obs, toks))
        assert pred.shape == feats.shape


class TestPadChunk:
    def test_inside_trajectory(self):
        actions = tuple(w.Action(1, 0, w.CMD_HOLD) for _ in range(20))
        assert len(gwm.pad_chunk(actions, 5, 12)) == 12

    def test_pad_repeats_final_action(self):
        actions = (w.Action(1, 0, w.CMD_HOLD), w.Action(0, 0, w.CMD_OPEN))
        chunk = gwm.pad_chunk(actions, 1, 5)
        assert chunk == (w.Action(0, 0, w.CMD_OPEN),) * 5


class TestTrainGwm:
    def test_loss_decreases(self, trained_tiny):
        _, curve = trained_tiny
        assert np.mean(curve[-5:]) < np.mean(curve[:5])

    def test_encoder_untouched(self, small_ds, tiny_learned_enc):
        before = gr.serialize_encoder(tiny_learned_enc)
        cfg = gwm.GwmConfig(hidden=(32,), epochs=1, batch=128, seed=0)
        model = gwm.build_gwm(cfg, "rendered", tiny_learned_enc)
        gwm.train_gwm(model, small_ds, tiny_learned_enc, cfg)
        assert gr.serialize_encoder(tiny_learned_enc) == before

    def test_language_never_read(self, small_ds, tiny_learned_enc):
        cfg = gwm.GwmConfig(hidden=(32,), epochs=1, batch=128, seed=0)
        model = gwm.build_gwm(cfg, "rendered", tiny_learned_enc)
        poisoned = wiser.DemoDataset(
            trajectories=tuple(replace(tr, instruction="zzz not even tokens")
                               for tr in small_ds.trajectories),
            suite_hash=small_ds.suite_hash, seed=small_ds.seed)
        a, _ = gwm.train_gwm(model, small_ds, tiny_learned_enc, cfg)
        b, _ = gwm.train_gwm(model, poisoned, tiny_learned_enc, cfg)
        for p, q in zip(a.net.params, b.net.params):
            assert np.array_equal(p, q)

    def test_beats_copy_current_baseline(self, trained_tiny, small_ds,
                                         tiny_learned_enc):
        model, _ = trained_tiny
        enc = tiny_learned_enc
        cfg = gwm.GwmConfig(hidden=(64,), epochs=4, batch=128, seed=2)
        obs, toks, tgts = gwm._training_arrays(model, small_ds, enc, cfg)
        sel = np.arange(0, len(obs), 7)
        pred_err = 0.0
        copy_err = 0.0
        for i in sel:
            pred = gwm.predict_future(
                model, gwm.PredictionInput(obs[i], toks[i]))
            tgt = tgts[i].reshape(cfg.keyframes, enc.d_e)
            pred_err += float(np.mean((pred - tgt) ** 2))
            copy_err += float(np.mean((obs[i][None, :] - tgt) ** 2))
        assert pred_err < copy_err

    def test_empty_dataset_rejected(self, tiny_learned_enc):
        cfg = gwm.GwmConfig()
        model = gwm.build_gwm(cfg, "rendered", tiny_learned_enc)
        empty = wiser.DemoDataset(trajectories=(), suite_hash="x", seed=0)
        with pytest.raises(ValueError, match="empty"):
            gwm.train_gwm(model, empty, tiny_learned_enc, cfg)


class TestPredict:
    def test_deterministic(self, trained_tiny, tiny_learned_enc, sample_scene):
        model, _ = trained_tiny
        s = w.make_scene(sample_scene, 0)
        obs = gr.encode_frame(tiny_learned_enc,
                              w.render(s, tiny_learned_enc.render_cfg))
        toks = gwm.tokenize_actions(s, [w.HOLD_ACTION] * 12, 4,
                                    tiny_learned_enc, "rendered")
        a = gwm.predict_future(model, gwm.PredictionInput(obs, toks))
        b = gwm.predict_future(model, gwm.PredictionInput(obs, toks))
        assert np.array_equal(a, b)

    def test_output_shape(self, trained_tiny, tiny_learned_enc, sample_scene):
        model, _ = trained_tiny
        s = w.make_scene(sample_scene, 0)
        obs = gr.encode_frame(tiny_learned_enc,
                              w.render(s, tiny_learned_enc.render_cfg))
        toks = gwm.tokenize_actions(s, [w.HOLD_ACTION] * 12, 4,
                                    tiny_learned_enc, "rendered")
        pred = gwm.predict_future(model, gwm.PredictionInput(obs, toks))
        assert pred.shape == (4, tiny_learned_enc.d_e)

    def test_batch_matches_single(self, trained_tiny, tiny_learned_enc,
                                  sample_scene, rng):
        model, _ = trained_tiny
        s = w.make_scene(sample_scene, 0)
        obs = gr.encode_frame(tiny_learned_enc,
                              w.render(s, tiny_learned_enc.render_cfg))
        toks = np.stack([
            gwm.tokenize_actions(s, [w.ALL_ACTIONS[i]] * 12, 4,
                                 tiny_learned_enc, "rendered")
            for i in rng.integers(0, 27, size=5)])
        batch = gwm.predict_future_batch(model, obs, toks)
        for i in range(5):
            single = gwm.predict_future(model, gwm.PredictionInput(obs, toks[i]))
            assert np.allclose(batch[i], single)

    def test_raw_kind_on_rendered_model_rejected(self, trained_tiny,
                                                 tiny_learned_enc,
                                                 sample_scene):
        model, _ = trained_tiny
        s = w.make_scene(sample_scene, 0)
        with pytest.raises(ValueError, match="raw"):
            gwm.predict_future_raw_actions(model, s, [w.HOLD_ACTION] * 12,
                                           tiny_learned_enc)

    def test_raw_model_has_more_parameters(self, tiny_learned_enc):
        cfg = gwm.GwmConfig(hidden=(64,))
        rendered = gwm.build_gwm(cfg, "rendered", tiny_learned_enc)
        raw = gwm.build_gwm(cfg, "raw", tiny_learned_enc)
        assert raw.trainable_param_count > rendered.trainable_param_count


class TestCheckpoint:
    def test_round_trip(self, trained_tiny, tiny_learned_enc, tmp_path):
        model, _ = trained_tiny
        path = tmp_path / "wm.ckpt"
        gwm.save_gwm(path, model)
        model2 = gwm.load_gwm(path, tiny_learned_enc)
        for p, q in zip(model.net.params, model2.net.params):
            assert np.allclose(p, q, atol=1e-6)

    def test_encoder_hash_mismatch_rejected(self, trained_tiny, oracle_enc,
                                            tmp_path):
        model, _ = trained_tiny
        path = tmp_path / "wm.ckpt"
        gwm.save_gwm(path, model)
        with pytest.raises(ValueError, match="different encoder"):
            gwm.load_gwm(path, oracle_enc)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"JUNKJUNK" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            gwm.load_gwm(path)
