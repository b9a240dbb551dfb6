import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turngraph import tensor as T
from turngraph.attention import (AttentionLayerParams, ModelParams, encode_groups, encode_video,
                                 layout, normalize_scores, raw_score_from_projections, run_layers,
                                 update_nodes)
from turngraph.graph import assemble, build_turn_graphs
from turngraph.records import Turn, VideoRecord
from cases import COMPOSITES, COORDS, input_dims, random_video
from gradcheck import TOL, check_with_resample


def naive_layer(layer: AttentionLayerParams, x: np.ndarray, batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-node, per-head loop over in-neighbours using the scalar helpers."""
    n, d = x.shape
    out = np.zeros((n, d))
    alpha = np.zeros((batch.num_edges, layer.heads))
    with T.no_grad():
        for v in range(n):
            edges = np.flatnonzero(batch.dst == v)
            for h in range(layer.heads):
                betas = [layer.raw_score(x[batch.src[e]], x[v], int(batch.etype[e]), h).item() for e in edges]
                a = normalize_scores(betas).data
                alpha[edges, h] = a
                msg = sum(a[i] * layer.project(x[batch.src[e]], int(batch.etype[e]), h).data
                          for i, e in enumerate(edges))
                out[v, layer.head_slice(h)] = msg
    return out, alpha


def small_model(rng, dim=8, heads=2, layers=2):
    return ModelParams.init(input_dims(), dim, heads, layers, rng)


def test_raw_score_examples():
    e = [1.0, 0.0, 0.0, 0.0]
    assert raw_score_from_projections(e, [1.0, 2.0], [3.0, 4.0]).item() == 1.0
    assert raw_score_from_projections([-1.0, 0, 0, 0], [1.0, 2.0], [3.0, 4.0]).item() == pytest.approx(-0.2)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 10_000))
def test_raw_score_scales_with_positive_e(c, seed):
    rng = np.random.default_rng(seed)
    e, ps, pd = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
    base = raw_score_from_projections(e, ps, pd).item()
    scaled = raw_score_from_projections(c * e, ps, pd).item()
    assert scaled == pytest.approx(c * base, rel=1e-9, abs=1e-12)


def test_normalize_scores_examples():
    np.testing.assert_allclose(normalize_scores([0.3] * 4).data, [0.25] * 4)
    np.testing.assert_allclose(normalize_scores([0.0, math.log(3)]).data, [0.25, 0.75])
    with pytest.raises(ValueError):
        normalize_scores([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(-50, 50))
def test_normalize_scores_shift_invariant(betas, c):
    a = normalize_scores(betas).data
    b = normalize_scores(np.array(betas) + c).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_layer_matches_naive_reference(seed):
    rng = np.random.default_rng(seed)
    video = random_video(rng, turns=(1, 3), rows=(0, 2))
    params = small_model(rng, layers=1)
    batch = assemble([layout(video, params, "factorized")])
    out, alpha = params.layers[0].forward(batch.x, batch)
    ref_out, ref_alpha = naive_layer(params.layers[0], batch.x.data, batch)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    np.testing.assert_allclose(alpha, ref_alpha, atol=1e-12)


def test_alpha_normalized_per_node_and_head():
    rng = np.random.default_rng(11)
    for _ in range(25):
        video = random_video(rng, turns=(1, 4))
        params = small_model(rng, heads=4)
        for mode in ("factorized", "video_level"):
            batch = assemble([layout(video, params, mode)])
            _, alphas = run_layers(batch, params.layers)
            for a in alphas:
                sums = np.zeros((batch.num_nodes, 4))
                np.add.at(sums, batch.dst, a)
                np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_single_neighbour_update_is_projection():
    rng = np.random.default_rng(2)
    layer = AttentionLayerParams.init(4, 2, rng)
    x = T.Tensor(rng.normal(size=(2, 4)))
    batch = assemble([build_turn_graphs(
        VideoRecord("v", [Turn("a", np.ones((1, 5)), np.zeros((0, 4)), np.zeros((0, 3)))]),
        small_model(rng, dim=4))], link_factors=False)
    batch.x = x
    out, _ = layer.forward(x, batch)
    # the text node's only in-neighbour is z and vice versa
    for v, u in ((0, 1), (1, 0)):
        et = int(batch.etype[np.flatnonzero(batch.dst == v)[0]])
        expect = np.concatenate([layer.project(x.data[u], et, h).data for h in range(2)])
        np.testing.assert_allclose(out.data[v], expect, atol=1e-12)


def test_identical_neighbours_output_independent_of_alpha():
    rng = np.random.default_rng(3)
    params = small_model(rng, layers=1)
    feats = np.tile(rng.normal(size=5), (4, 1))
    video = VideoRecord("v", [Turn("a", feats, np.zeros((0, 4)), np.zeros((0, 3)))])
    batch = assemble([layout(video, params, "factorized")])
    out, _ = params.layers[0].forward(batch.x, batch)
    # z's neighbours are four identical text nodes
    z = out.data[4]
    W = params.layers[0].weight.data[batch.etype[batch.dst == 4][0]]
    np.testing.assert_allclose(z, batch.x.data[0] @ W, atol=1e-12)


def test_z_is_convex_combination_of_projected_nodes():
    rng = np.random.default_rng(4)
    params = small_model(rng, layers=1)
    video = VideoRecord("v", [Turn("a", rng.normal(size=(3, 5)), np.zeros((0, 4)), np.zeros((0, 3)))])
    batch = assemble([layout(video, params, "factorized")])
    layer = params.layers[0]
    out, alpha = layer.forward(batch.x, batch)
    into_z = np.flatnonzero(batch.dst == 3)
    for h in range(layer.heads):
        hs = layer.head_slice(h)
        expect = sum(alpha[e, h] * (batch.x.data[batch.src[e]] @ layer.weight.data[batch.etype[e]])[hs]
                     for e in into_z)
        np.testing.assert_allclose(out.data[3, hs], expect, atol=1e-12)
        assert alpha[into_z, h].min() >= 0 and alpha[into_z, h].sum() == pytest.approx(1.0)


def test_mean_readout_is_mean_of_updated_nodes():
    rng = np.random.default_rng(5)
    video = random_video(rng, turns=(3, 3))
    params = small_model(rng)
    z = encode_video(video, params, "mean_readout")
    batch = assemble([layout(video, params, "mean_readout")], with_factors=False)
    x, _ = run_layers(batch, params.layers)
    for s, rows in enumerate(batch.node_rows[0]):
        np.testing.assert_allclose(z.data[s], x.data[rows].mean(axis=0), atol=1e-12)


def test_node_order_permutation_invariance():
    rng = np.random.default_rng(6)
    params = small_model(rng)
    video = random_video(rng, turns=(2, 3), rows=(2, 3))
    z = encode_video(video, params).data
    shuffled = VideoRecord("v", [Turn(t.speaker_id, *(rng.permutation(t.features(k)) for k in range(3)))
                                 for t in video.turns])
    np.testing.assert_allclose(encode_video(shuffled, params).data, z, atol=1e-12)


def test_update_nodes_permutation_equivariant():
    rng = np.random.default_rng(7)
    params = small_model(rng)
    (g,) = build_turn_graphs(random_video(rng, turns=(1, 1), rows=(2, 3)), params)
    out = update_nodes(g, params.layers[0])
    perm = rng.permutation(g.num_nodes)
    moved = update_nodes(g.with_nodes(perm, adj=g.adj[np.ix_(perm, perm)]), params.layers[0])
    np.testing.assert_allclose(moved.x.data, out.x.data[perm], atol=1e-12)
    np.testing.assert_allclose(moved.z.data, out.z.data, atol=1e-12)


def test_single_turn_factorized_matches_video_level():
    rng = np.random.default_rng(8)
    params = small_model(rng)
    video = random_video(rng, turns=(1, 1))
    a = encode_video(video, params, "factorized", link_factors=False).data
    b = encode_video(video, params, "video_level").data
    np.testing.assert_allclose(a, b, atol=1e-12)


def _perturb_turn(video, s, rng):
    turns = list(video.turns)
    t = turns[s]
    turns[s] = Turn(t.speaker_id, *(t.features(k) + rng.normal(size=t.features(k).shape) for k in range(3)))
    return VideoRecord(video.video_id, turns)


def test_z_without_links_depends_only_on_own_turn():
    rng = np.random.default_rng(9)
    params = small_model(rng)
    video = random_video(rng, turns=(3, 3), rows=(1, 2))
    base = encode_video(video, params, link_factors=False).data
    moved = encode_video(_perturb_turn(video, 1, rng), params, link_factors=False).data
    np.testing.assert_array_equal(base[[0, 2]], moved[[0, 2]])
    assert not np.allclose(base[1], moved[1])


def test_z_sees_other_turns_only_through_their_z():
    rng = np.random.default_rng(10)
    params = small_model(rng, layers=1)
    video = random_video(rng, turns=(3, 3), rows=(1, 2))
    base = encode_video(video, params).data
    moved = encode_video(_perturb_turn(video, 1, rng), params).data
    # after one layer the other turns' z still hold the shared seed
    np.testing.assert_array_equal(base[[0, 2]], moved[[0, 2]])
    two = small_model(np.random.default_rng(10), layers=2)
    assert not np.allclose(encode_video(video, two).data[0],
                           encode_video(_perturb_turn(video, 1, rng), two).data[0])


def test_encode_groups_batched_equals_single():
    rng = np.random.default_rng(12)
    params = small_model(rng)
    videos = [random_video(rng, vid=f"v{i}") for i in range(4)]
    for mode in ("factorized", "video_level", "mean_readout"):
        groups = [layout(v, params, mode) for v in videos]
        together = encode_groups(groups, params, mode)
        for v, z in zip(videos, together):
            np.testing.assert_allclose(z.data, encode_video(v, params, mode).data, atol=1e-12)


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        AttentionLayerParams.init(10, 4, np.random.default_rng(0))


def test_unknown_edge_type_rejected():
    layer = AttentionLayerParams.init(4, 2, np.random.default_rng(0))
    with pytest.raises(KeyError):
        layer.project(np.ones(4), 16, 0)


def test_unknown_mode_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        encode_video(random_video(rng), small_model(rng), "dense")


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradients(seed):
    errs = check_with_resample(COMPOSITES["attention"], seed, max_coords=COORDS["attention"])
    assert max(errs.values()) <= TOL, errs
