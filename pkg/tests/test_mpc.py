import numpy as np
import pytest

from gwmpc import grounding as gr
from gwmpc import gwm, mpc, vocab as vm, wiser, world as w


def brute_force_proposals(ds, proprio, n, horizon):
    """Independent reference: full scan, explicit sort, explicit dedup."""
    qx, qy, qg = proprio
    scored = []
    for ti, tr in enumerate(ds.trajectories):
        ro = w.rollout(tr.initial_state, tr.actions)
        for k in range(len(tr.actions)):
            st = ro.states[k]
            d = ((st.agent[0] - qx) ** 2 + (st.agent[1] - qy) ** 2
                 + mpc.GRIP_PENALTY * (st.gripper != qg))
            scored.append((d, ti, k))
    scored.sort()
    out = []
    seen = set()
    for d, ti, k in scored:
        chunk = gwm.pad_chunk(ds.trajectories[ti].actions, k, horizon)
        if chunk in seen:
            continue
        seen.add(chunk)
        out.append((chunk, ti, k, d))
        if len(out) == n:
            break
    return out


class TestProposeCandidates:
    def test_zero_distance_state_ranks_first(self, demo_ds):
        tr = demo_ds.trajectories[100]
        ro = w.rollout(tr.initial_state, tr.actions)
        st = ro.states[3]
        cands = mpc.propose_candidates(demo_ds, st.proprio, 12, 12)
        assert cands[0].distance == 0.0

    def test_matches_brute_force_reference(self, demo_ds, rng):
        for _ in range(25):
            proprio = (int(rng.integers(0, w.GRID_W)),
                       int(rng.integers(0, w.GRID_H)),
                       int(rng.integers(0, 2)))
            fast = mpc.propose_candidates(demo_ds, proprio, 12, 12)
            slow = brute_force_proposals(demo_ds, proprio, 12, 12)
            assert len(fast) == len(slow)
            for c, (chunk, ti, k, d) in zip(fast, slow):
                assert c.chunk == chunk
                assert (c.traj_id, c.step) == (ti, k)
                assert c.distance == pytest.approx(d)

    def test_reset_pose_covers_every_task_prefix(self, demo_ds, train_suite):
        state = w.make_scene(train_suite.blocks[0].scene, 0)
        cands = mpc.propose_candidates(demo_ds, state.proprio, 12, 12)
        chunks = {c.chunk for c in cands}
        block_trajs = [tr for tr in demo_ds.trajectories
                       if tr.task_id.startswith("numbers/train/")]
        for task in train_suite.blocks[0].tasks:
            expert = w.expert_policy(state, task)
            prefix = gwm.pad_chunk(expert, 0, 12)
            assert prefix in chunks, task.task_id

    def test_distinct_chunks(self, demo_ds):
        cands = mpc.propose_candidates(demo_ds, (6, 1, 0), 12, 12)
        assert len({c.chunk for c in cands}) == len(cands)

    def test_empty_dataset_rejected(self):
        empty = wiser.DemoDataset(trajectories=(), suite_hash="x", seed=0)
        with pytest.raises(ValueError, match="no valid"):
            mpc.propose_candidates(empty, (0, 0, 0), 3, 12)


class TestDecomposeInstruction:
    def test_template_decomposition(self):
        pick, place = mpc.decompose_instruction(
            "pick up the pale red cube and place it onto the seven mark")
        assert pick == "pick up the pale red cube from the table"
        assert place == "place the grasped object to the seven mark on the table"

    def test_malformed_returns_none(self):
        assert mpc.decompose_instruction("grab the nearest cube") is None
        assert mpc.decompose_instruction("pick up the cube") is None

    def test_round_trip_over_all_tasks(self, suites):
        for suite in suites:
            for task in suite.tasks:
                pick, place = mpc.decompose_instruction(task.instruction)
                assert pick == vm.pick_prompt(task.cube_ref)
                assert place == vm.place_prompt(task.mark_ref)


class TestScoreCandidates:
    def _goals(self, rng, d=16):
        g = rng.normal(size=(2, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return {"pick": g[0], "place": g[1]}

    def test_single_candidate(self, rng):
        goals = self._goals(rng)
        score = mpc.score_candidates([goals["pick"]], goals, grasped=False)
        assert score.selected == 0
        assert score.sigma_pick == (1.0,)

    def test_grasp_switch(self, rng):
        goals = self._goals(rng)
        zs = [goals["pick"], goals["place"], rng.normal(size=16)]
        before = mpc.score_candidates(zs, goals, grasped=False)
        after = mpc.score_candidates(zs, goals, grasped=True)
        assert before.selected == 0
        assert after.selected == 1

    def test_sigma_is_probability_vector(self, rng):
        goals = self._goals(rng)
        zs = [rng.normal(size=16) for _ in range(9)]
        score = mpc.score_candidates(zs, goals, grasped=False, temperature=0.5)
        assert abs(sum(score.sigma_pick) - 1.0) <= 1e-9
        assert abs(sum(score.sigma_place) - 1.0) <= 1e-9
        assert all(v > 0 for v in score.sigma_pick)

    def test_argmax_invariant_to_positive_scaling(self, rng):
        goals = self._goals(rng)
        zs = [rng.normal(size=16) for _ in range(6)]
        base = mpc.score_candidates(zs, goals, grasped=False)
        scaled = mpc.score_candidates(
            [z * s for z, s in zip(zs, rng.uniform(0.2, 8.0, size=6))],
            goals, grasped=False)
        assert base.selected == scaled.selected

    def test_empty_rejected(self, rng):
        with pytest.raises(ValueError, match="no candidate"):
            mpc.score_candidates([], self._goals(rng), grasped=False)


class TestPlanStep:
    def test_random_mode_reproducible(self, demo_ds, train_suite, oracle_enc):
        task = train_suite.tasks[0]
        cfg = mpc.PlannerConfig(mode="random")
        a = mpc.run_episode(task, cfg, oracle_enc, demo_ds, seed=9)
        b = mpc.run_episode(task, cfg, oracle_enc, demo_ds, seed=9)
        assert a.actions == b.actions
        assert a.outcome == b.outcome

    def test_gt_oracle_reset_selection_grasps_target(self, demo_ds, suites,
                                                     oracle_enc):
        for suite in suites:
            for block in suite.blocks[:3]:
                for task in block.tasks:
                    state = w.make_scene(block.scene, 0)
                    obs = w.render(state, oracle_enc.render_cfg)
                    ctx = mpc.PlannerContext(
                        cfg=mpc.PlannerConfig(mode="gt"), enc=oracle_enc,
                        ds=demo_ds, obs0=obs)
                    prefix, record = mpc.plan_step(ctx, state, obs,
                                                   task.instruction, False)
                    chosen = record.candidates[record.score.selected]
                    chunk = mpc.propose_candidates(
                        demo_ds, state.proprio, 12, 12)[record.score.selected].chunk
                    ro = w.rollout(state, chunk)
                    cube_idx = w._find_cube(state, task.target_color)
                    assert any(s.held == cube_idx for s in ro.states), task.task_id


class TestRunEpisode:
    def test_gt_oracle_succeeds(self, demo_ds, train_suite, test_suite,
                                oracle_enc):
        for task in (train_suite.tasks[5], test_suite.tasks[200]):
            trace = mpc.run_episode(task, mpc.PlannerConfig(mode="gt"),
                                    oracle_enc, demo_ds, seed=0)
            assert trace.outcome == w.EpisodeOutcome(1, 1, 1)

    def test_same_seed_identical_trace(self, demo_ds, train_suite, oracle_enc):
        task = train_suite.tasks[7]
        cfg = mpc.PlannerConfig(mode="gt")
        a = mpc.run_episode(task, cfg, oracle_enc, demo_ds, seed=0)
        b = mpc.run_episode(task, cfg, oracle_enc, demo_ds, seed=0)
        assert a.states == b.states
        assert mpc.trace_to_text(a) == mpc.trace_to_text(b)

    def test_replay_integrity(self, demo_ds, train_suite, oracle_enc):
        task = train_suite.tasks[30]
        trace = mpc.run_episode(task, mpc.PlannerConfig(mode="gt"), oracle_enc,
                                demo_ds, seed=0)
        assert mpc.replay_trace(trace)

    def test_gwm_mode_requires_model(self, demo_ds, train_suite, oracle_enc):
        with pytest.raises(ValueError, match="world model"):
            mpc.run_episode(train_suite.tasks[0],
                            mpc.PlannerConfig(mode="gwm"), oracle_enc,
                            demo_ds)

    def test_mismatched_model_rejected_before_running(self, demo_ds,
                                                      train_suite, oracle_enc,
                                                      tiny_learned_enc):
        model = gwm.build_gwm(gwm.GwmConfig(hidden=(32,)), "rendered",
                              tiny_learned_enc)
        with pytest.raises(ValueError, match="do not match"):
            mpc.run_episode(train_suite.tasks[0],
                            mpc.PlannerConfig(mode="gwm"), oracle_enc,
                            demo_ds, model=model)

    def test_step_cap_respected(self, demo_ds, train_suite, oracle_enc):
        task = train_suite.tasks[3]
        cfg = mpc.PlannerConfig(mode="random", episode_cap=20)
        trace = mpc.run_episode(task, cfg, oracle_enc, demo_ds, seed=1)
        assert len(trace.actions) <= 20


class TestPlannerConfig:
    def test_invalid_replan_interval(self):
        with pytest.raises(ValueError, match="replan"):
            mpc.PlannerConfig(replan_interval=0).validate()

    def test_invalid_mode(self):
        with pytest.raises(ValueError, match="mode"):
            mpc.PlannerConfig(mode="telepathy").validate()

    def test_keyframes_bounded_by_horizon(self):
        with pytest.raises(ValueError, match="keyframes"):
            mpc.PlannerConfig(keyframes=13, horizon=12).validate()
