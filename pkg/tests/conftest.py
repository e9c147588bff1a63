import numpy as np
import pytest

from gwmpc import grounding, vocab as vocab_mod, wiser, world


@pytest.fixture(scope="session")
def vocab():
    return vocab_mod.build_vocabulary()


@pytest.fixture(scope="session")
def render_cfg(vocab):
    return world.default_render_config(vocab.n_colors, vocab.n_glyphs)


@pytest.fixture(scope="session")
def oracle_enc(vocab, render_cfg):
    return grounding.build_oracle_encoder(vocab, render_cfg)


@pytest.fixture(scope="session")
def suites():
    return wiser.generate_suite(wiser.BenchConfig(), seed=0)


@pytest.fixture(scope="session")
def train_suite(suites):
    return suites[0]


@pytest.fixture(scope="session")
def test_suite(suites):
    return suites[1]


@pytest.fixture(scope="session")
def demo_ds(train_suite):
    return wiser.collect_demos(train_suite, per_task=6, seed=0)


@pytest.fixture(scope="session")
def tiny_learned_enc(vocab, render_cfg):
    """Small contrastive encoder for contract tests (not accuracy)."""
    corpus = grounding.generate_pretraining_corpus(vocab, 512, seed=3,
                                                   render_cfg=render_cfg)
    cfg = grounding.PretrainConfig(d_e=32, d_z=16, feat_hidden=64, hidden=64,
                                   batch=64, epochs=2, seed=3)
    return grounding.pretrain_encoder(corpus, cfg, vocab=vocab,
                                      render_cfg=render_cfg)


@pytest.fixture()
def sample_scene(vocab):
    return world.SceneSpec(cube_colors=(10, 55, 99, 140),
                           mark_glyphs=(3, 77, 120))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
