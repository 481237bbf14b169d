import numpy as np
import pytest

from mvagg.attention import (
    HamConfig,
    HamConfigError,
    channel_gate,
    channel_scores,
    ham_forward,
    init_ham_params,
    spatial_gate,
    top_k_indices,
    top_k_select,
)
from mvagg.gradcheck import check_gradients
from mvagg.tensor import Tensor

import oracles


def params_for(cfg, seed=0, dtype=np.float32):
    p = init_ham_params(cfg, np.random.default_rng(seed))
    return {k: Tensor(v.data, name=k, dtype=dtype) for k, v in p.items()}


def feats(rng, C, h=5, w=6):
    return rng.normal(size=(C, h, w)).astype(np.float32)


def test_config_invariants():
    assert HamConfig(C=16, D=1).K == 16
    assert HamConfig(C=16, D=4).K == 4
    with pytest.raises(HamConfigError):
        HamConfig(C=8, D=2, K=9)
    with pytest.raises(HamConfigError):
        HamConfig(C=8, D=1, K=4)
    with pytest.raises(HamConfigError):
        HamConfig(C=8, D=0)


def test_param_shapes():
    cfg = HamConfig(C=16, D=3, K=4)
    p = params_for(cfg)
    assert p["ham.mlp1.weight"].shape == (cfg.mlp_hidden, 16)
    assert p["ham.mlp2.weight"].shape == (16 * 3, cfg.mlp_hidden)
    assert sum(k.endswith("conv1.weight") for k in p) == 3
    assert p["ham.spatial.2.conv1.weight"].shape == (2, 2, 7, 7)
    assert p["ham.spatial.2.conv2.weight"].shape == (1, 2, 7, 7)


def test_scores_uniform_on_zero_input():
    cfg = HamConfig(C=8, D=2, K=4)
    p = params_for(cfg)
    p["ham.mlp1.bias"] = Tensor(np.zeros(cfg.mlp_hidden))
    p["ham.mlp2.bias"] = Tensor(np.zeros(16))
    s = channel_scores(Tensor(np.zeros((8, 3, 3))), p, cfg).data
    np.testing.assert_allclose(s, 1 / 8, atol=1e-7)


def test_scores_match_sequential_oracle(rng):
    cfg = HamConfig(C=16, D=4, K=4)
    p = params_for(cfg, seed=3)
    for _ in range(5):
        f = feats(rng, 16)
        s = channel_scores(Tensor(f), p, cfg).data
        np.testing.assert_allclose(s.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)
        assert np.all((s > 0) & (s < 1))
        np.testing.assert_allclose(s, oracles.channel_scores_ref(f, p, 4), atol=1e-6)


def test_scores_shape_mismatch():
    cfg = HamConfig(C=8, D=2, K=4)
    with pytest.raises(HamConfigError):
        channel_scores(Tensor(np.zeros((7, 3, 3))), params_for(cfg), cfg)


def test_top_k_examples(rng):
    assert top_k_indices(np.array([[0.5, 0.3, 0.2]]), 2)[0].tolist() == [0, 1]
    assert sorted(top_k_indices(rng.random((1, 9)), 9)[0].tolist()) == list(range(9))
    assert top_k_indices(np.array([[0.2, 0.4, 0.4, 0.1]]), 2)[0].tolist() == [1, 2]
    with pytest.raises(HamConfigError):
        top_k_indices(np.ones((1, 3)), 4)
    with pytest.raises(HamConfigError):
        top_k_indices(np.ones((1, 3)), 0)


def test_top_k_matches_sort_oracle(rng):
    for _ in range(50):
        s = rng.random(12)
        assert top_k_indices(s[None], 4)[0].tolist() == oracles.topk_sort(s, 4)


def test_top_k_select_gathers_in_score_order(rng):
    f = feats(rng, 6)
    scores = np.array([[0.1, 0.3, 0.05, 0.25, 0.2, 0.1], [0.3, 0.1, 0.1, 0.1, 0.1, 0.3]])
    outs, idx = top_k_select(Tensor(f), scores, 3)
    assert idx[0].tolist() == [1, 3, 4] and idx[1].tolist() == [0, 5, 1]
    np.testing.assert_array_equal(outs[0].data, f[[1, 3, 4]])
    np.testing.assert_array_equal(outs[1].data, f[[0, 5, 1]])


def test_d1_is_score_multiplication(rng):
    cfg = HamConfig(C=8, D=1)
    p = params_for(cfg, seed=1)
    f = feats(rng, 8)
    (out,), scores, idx = channel_gate(Tensor(f), p, cfg)
    s = scores.data.reshape(8)
    assert np.array_equal(out.data, f * s[:, None, None])
    assert idx[0].tolist() == list(range(8))


def test_d1_uniform_scores_scale_by_one_over_c():
    cfg = HamConfig(C=4, D=1)
    p = params_for(cfg)
    for k in ("ham.mlp2.weight", "ham.mlp2.bias"):
        p[k] = Tensor(np.zeros(p[k].shape))
    f = np.arange(4 * 9, dtype=np.float32).reshape(4, 3, 3)
    (out,), _, _ = channel_gate(Tensor(f), p, cfg)
    np.testing.assert_allclose(out.data, f / 4, rtol=1e-6)


def test_d2_k_equals_c_outputs_are_permutations(rng):
    cfg = HamConfig(C=6, D=2, K=6)
    p = params_for(cfg)
    f = feats(rng, 6)
    outs, _, idx = channel_gate(Tensor(f), p, cfg)
    for o, i in zip(outs, idx):
        assert sorted(i.tolist()) == list(range(6))
        np.testing.assert_array_equal(o.data, f[i])


def test_channel_gate_compositional_oracle(rng):
    cfg = HamConfig(C=128, D=4, K=32)
    p = params_for(cfg, seed=5)
    f = feats(rng, 128, 4, 4)
    outs, scores, idx = channel_gate(Tensor(f), p, cfg)
    want_scores = oracles.channel_scores_ref(f, p, 4)
    np.testing.assert_allclose(scores.data, want_scores, atol=1e-6)
    for d in range(4):
        ref_idx = oracles.topk_sort(scores.data[d], 32)
        assert idx[d].tolist() == ref_idx
        np.testing.assert_array_equal(outs[d].data, f[ref_idx])


def test_score_multiply_flag(rng):
    cfg = HamConfig(C=8, D=2, K=3, score_multiply=True)
    p = params_for(cfg)
    f = feats(rng, 8)
    outs, scores, idx = channel_gate(Tensor(f), p, cfg)
    for d in range(2):
        w = scores.data[d][idx[d]]
        np.testing.assert_allclose(outs[d].data, f[idx[d]] * w[:, None, None], rtol=1e-6)


def test_spatial_gate_examples(rng):
    cfg = HamConfig(C=4, D=2, K=2)
    p = params_for(cfg)
    for k in list(p):
        if ".spatial.1." in k:
            p[k] = Tensor(np.zeros(p[k].shape))
    f = feats(rng, 2)
    out, att = spatial_gate(Tensor(f), p, 1, cfg)
    np.testing.assert_array_equal(att.data, 0.5)
    np.testing.assert_allclose(out.data, f / 2)
    out, _ = spatial_gate(Tensor(np.zeros((2, 5, 6))), params_for(cfg), 0, cfg)
    assert not out.data.any()
    with pytest.raises(HamConfigError):
        spatial_gate(Tensor(f), p, 2, cfg)


def test_spatial_gate_matches_oracle(rng):
    cfg = HamConfig(C=8, D=2, K=4)
    p = params_for(cfg, seed=2)
    f = feats(rng, 4, 6, 7)
    out, att = spatial_gate(Tensor(f), p, 1, cfg)
    want_out, want_att = oracles.spatial_gate_ref(f, p, 1)
    assert att.shape == (1, 6, 7)
    np.testing.assert_allclose(att.data, want_att, atol=1e-6)
    np.testing.assert_allclose(out.data, want_out, atol=1e-6)


def test_ham_forward_single_view_single_homography(rng):
    cfg = HamConfig(C=4, D=1)
    p = params_for(cfg)
    f = feats(rng, 4)
    (paths,) = ham_forward([Tensor(f)], p, cfg)
    s = oracles.channel_scores_ref(f, p, 1)[0]
    want, _ = oracles.spatial_gate_ref(f * s[:, None, None], p, 0)
    np.testing.assert_allclose(paths[0].data, want, atol=1e-6)


def test_ham_forward_composition_and_view_independence(rng):
    cfg = HamConfig(C=8, D=2, K=3)
    p = params_for(cfg, seed=4)
    views = [feats(rng, 8) for _ in range(3)]
    out = ham_forward([Tensor(v) for v in views], p, cfg)
    assert len(out) == 3 and all(len(o) == 2 for o in out)
    for v, paths in zip(views, out):
        s = oracles.channel_scores_ref(v, p, 2)
        for d in range(2):
            sel = v[oracles.topk_sort(s[d], 3)]
            want, _ = oracles.spatial_gate_ref(sel, p, d)
            np.testing.assert_allclose(paths[d].data, want, atol=1e-6)
    # permuting views permutes outputs
    perm = ham_forward([Tensor(views[i]) for i in (2, 0, 1)], p, cfg)
    for a, b in zip(perm, [out[2], out[0], out[1]]):
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)
    # perturbing view 1 leaves view 0 untouched
    bumped = [views[0], views[1] + 1.0, views[2]]
    out2 = ham_forward([Tensor(v) for v in bumped], p, cfg)
    for x, y in zip(out[0], out2[0]):
        assert np.array_equal(x.data, y.data)


def test_ham_forward_rejects_mismatched_views(rng):
    cfg = HamConfig(C=4, D=1)
    with pytest.raises(HamConfigError):
        ham_forward([Tensor(feats(rng, 4, 5, 6)), Tensor(feats(rng, 4, 5, 7))], params_for(cfg), cfg)


def _gate_inputs(cfg, seed, views, min_gap=0.02):
    """Random inputs whose top-K choice is stable under finite-difference steps.

    Selection flips are non-differentiable points, so seeds whose sorted
    scores come closer than ``min_gap`` are skipped.
    """
    for s in range(seed, seed + 200):
        p = params_for(cfg, seed=s, dtype=np.float64)
        r = np.random.default_rng(s)
        inputs = {k: v.data for k, v in p.items()}
        for i in range(views):
            inputs[f"view{i}"] = r.uniform(-1, 1, size=(cfg.C, 5, 5))
        if cfg.D == 1:
            return inputs
        gaps = []
        for i in range(views):
            sc = np.sort(channel_scores(Tensor(inputs[f"view{i}"]), p, cfg).data, axis=1)
            gaps.append(np.min(np.diff(sc, axis=1)))
        if min(gaps) > min_gap:
            return inputs
    raise RuntimeError("no stable seed found")


def test_channel_gate_d1_gradient():
    cfg = HamConfig(C=4, D=1)
    inputs = _gate_inputs(cfg, 0, 1)
    inputs = {k: v for k, v in inputs.items() if ".spatial." not in k}
    res = check_gradients(lambda t: channel_gate(t["view0"], t, cfg)[0][0], inputs)
    assert res.ok, res.failures[:3]


def test_spatial_gate_gradient():
    cfg = HamConfig(C=4, D=2, K=2)
    p = params_for(cfg, seed=1, dtype=np.float64)
    inputs = {k: v.data for k, v in p.items() if ".spatial.0." in k}
    inputs["x"] = np.random.default_rng(1).uniform(-1, 1, size=(2, 5, 5))
    res = check_gradients(lambda t: spatial_gate(t["x"], t, 0, cfg)[0], inputs)
    assert res.ok, res.failures[:3]


@pytest.mark.parametrize("D,K,mult", [(1, None, False), (2, 2, False), (2, 2, True)])
def test_ham_forward_gradient(D, K, mult):
    from mvagg.tensor import concat

    cfg = HamConfig(C=4, D=D, K=K, score_multiply=mult)
    inputs = _gate_inputs(cfg, 2, 2)

    def fn(t):
        out = ham_forward([t["view0"], t["view1"]], t, cfg)
        return concat([x for v in out for x in v], axis=0)

    res = check_gradients(fn, inputs, h=1e-6, atol=1e-6)
    assert res.ok, res.failures[:3]
    assert not res.kinks, res.kinks[:3]
