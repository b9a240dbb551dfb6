import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turngraph import tensor as T
from turngraph.attention import ModelParams
from turngraph.augment import AugmentationConfig
from turngraph.contrastive import (ContrastiveBatch, ContrastiveConfig, NoNegatives, batch_loss,
                                   encode_view_pairs, infonce_turn_loss, pretrain_step,
                                   similarity_stats, video_loss)
from turngraph.optim import AdamWState
from cases import COMPOSITES, input_dims, random_video
from gradcheck import TOL, check_with_resample


def _batch(z1, z2, tau=1.0):
    return ContrastiveBatch(T.Tensor(np.asarray(z1, float)), T.Tensor(np.asarray(z2, float)), tau)


def loop_video_loss(b, include_positive=False):
    terms = [infonce_turn_loss(b, s, anchor, include_positive).item()
             for s in range(b.num_turns) for anchor in (1, 2)]
    return float(np.mean(terms))


def test_identical_two_turns_is_ln2():
    z = np.ones((2, 3))
    assert video_loss(_batch(z, z)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert infonce_turn_loss(_batch(z, z), 0).item() == pytest.approx(math.log(2), abs=1e-12)


def test_orthogonal_positive_case():
    # pos sim 1, both negatives at sim 0: -log(e / 2)
    z = np.eye(2)
    assert video_loss(_batch(z, z)).item() == pytest.approx(-math.log(math.e / 2), abs=1e-12)
    assert video_loss(_batch(z, z)).item() == pytest.approx(math.log(2) - 1, abs=1e-12)


def test_single_turn_has_no_loss():
    z = np.ones((1, 3))
    assert video_loss(_batch(z, z)) is None
    with pytest.raises(NoNegatives):
        infonce_turn_loss(_batch(z, z), 0)
    out = batch_loss([(T.Tensor(z), T.Tensor(z))], ContrastiveConfig())
    assert out.loss.item() == 0.0 and out.skipped == 1


def test_batch_loss_averages_and_counts_skips():
    rng = np.random.default_rng(0)
    a = [T.Tensor(rng.normal(size=(3, 4))) for _ in range(2)]
    single = T.Tensor(rng.normal(size=(1, 4)))
    cfg = ContrastiveConfig()
    out = batch_loss([(a[0], a[1]), (single, single)], cfg)
    expect = video_loss(ContrastiveBatch(a[0], a[1], cfg.tau)).item() / 2
    assert out.loss.item() == pytest.approx(expect) and out.skipped == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31), st.booleans())
def test_vectorized_matches_loop(S, seed, include_positive):
    rng = np.random.default_rng(seed)
    b = _batch(rng.normal(size=(S, 5)), rng.normal(size=(S, 5)), float(rng.uniform(0.1, 2)))
    assert video_loss(b, include_positive).item() == pytest.approx(loop_video_loss(b, include_positive), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31), st.floats(0.01, 100))
def test_scale_invariance(S, seed, c):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(S, 4)), rng.normal(size=(S, 4))
    assert video_loss(_batch(z1, z2, 0.5)).item() == pytest.approx(video_loss(_batch(c * z1, c * z2, 0.5)).item(), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31))
def test_turn_reorder_invariance(S, seed):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(S, 4)), rng.normal(size=(S, 4))
    p = rng.permutation(S)
    assert video_loss(_batch(z1, z2)).item() == pytest.approx(video_loss(_batch(z1[p], z2[p])).item(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31))
def test_standard_form_nonnegative(S, seed):
    rng = np.random.default_rng(seed)
    b = _batch(rng.normal(size=(S, 4)), rng.normal(size=(S, 4)), 0.5)
    assert video_loss(b, include_positive=True).item() >= 0


def test_positive_not_dominant_gives_positive_loss():
    z1 = np.array([[1.0, 0.0], [1.0, 0.1]])
    z2 = np.array([[0.0, 1.0], [1.0, 0.0]])
    for anchor in (1, 2):
        assert infonce_turn_loss(_batch(z1, z2), 0, anchor).item() > 0


def test_similarity_stats():
    z = np.eye(3)
    pos, neg = similarity_stats(_batch(z, z))
    assert pos == pytest.approx(1.0) and neg == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    errs = check_with_resample(COMPOSITES["contrastive"], seed)
    assert max(errs.values()) <= TOL, errs


def _cfg(**aug):
    return SimpleNamespace(factor_mode="factorized", max_seq_len=None, link_factors=True,
                           aug=AugmentationConfig(**aug), contrastive=ContrastiveConfig())


def test_zero_ratio_views_are_identical():
    # subgraph's ratio is the fraction kept, so its identity setting is 1
    rng = np.random.default_rng(0)
    params = ModelParams.init(input_dims(), 8, 2, 2, rng)
    videos = [random_video(rng, turns=(2, 4), vid=f"v{i}") for i in range(3)]
    cfg = _cfg(node_drop=0, edge_perturb=0, node_mask=0, subgraph=1.0)
    for z1, z2 in encode_view_pairs(videos, params, cfg, rng):
        pos, _ = similarity_stats(ContrastiveBatch(z1, z2))
        assert pos == pytest.approx(1.0, abs=1e-12)


def test_negatives_come_from_the_same_video():
    rng = np.random.default_rng(1)
    params = ModelParams.init(input_dims(), 8, 2, 2, rng)
    a, b = random_video(rng, turns=(3, 3), vid="a"), random_video(rng, turns=(3, 3), vid="b")
    b2 = random_video(np.random.default_rng(99), turns=(3, 3), vid="b")
    cfg = _cfg(node_drop=0, edge_perturb=0, node_mask=0, subgraph=1.0)
    first = encode_view_pairs([a, b], params, cfg, np.random.default_rng(5))
    second = encode_view_pairs([a, b2], params, cfg, np.random.default_rng(5))
    loss = lambda z: video_loss(ContrastiveBatch(*z)).item()  # noqa: E731
    assert loss(first[0]) == loss(second[0])
    assert loss(first[1]) != loss(second[1])


def test_video_level_mode_uses_batch_videos_as_turns():
    rng = np.random.default_rng(2)
    params = ModelParams.init(input_dims(), 8, 2, 1, rng)
    videos = [random_video(rng, vid=f"v{i}") for i in range(4)]
    cfg = _cfg()
    cfg.factor_mode = "video_level"
    (pair,) = encode_view_pairs(videos, params, cfg, rng)
    assert pair[0].shape == (4, 8)


def test_pretrain_step_deterministic():
    def run():
        rng = np.random.default_rng(3)
        params = ModelParams.init(input_dims(), 8, 2, 2, rng)
        videos = [random_video(rng, turns=(2, 3), vid=f"v{i}") for i in range(3)]
        opt = AdamWState()
        return [pretrain_step(videos, params, opt, _cfg(), rng) for _ in range(2)], params
    (m1, p1), (m2, p2) = run(), run()
    assert m1 == m2
    for k in p1.parameters():
        np.testing.assert_array_equal(p1.parameters()[k].data, p2.parameters()[k].data)


def test_pretrain_step_all_single_turn_videos():
    rng = np.random.default_rng(4)
    params = ModelParams.init(input_dims(), 8, 2, 1, rng)
    before = {k: v.data.copy() for k, v in params.parameters().items()}
    videos = [random_video(rng, turns=(1, 1), vid=f"v{i}") for i in range(2)]
    out = pretrain_step(videos, params, AdamWState(), _cfg(), rng)
    assert out["loss"] == 0.0 and out["skipped"] == 2
    for k, v in params.parameters().items():
        np.testing.assert_array_equal(v.data, before[k])
