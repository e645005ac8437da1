import numpy as np
import pytest

from grouptraj.autodiff import Tensor, check_gradients
from grouptraj.dataset import Scene, SyntheticCrowdSpec, synthetic_scenes
from grouptraj.group_graph import GroupAssignment
from grouptraj.model import (
    ModelParams,
    SceneBatch,
    decode,
    draw_eps,
    encode,
    encode_self,
    gcn_forward,
    hierarchical_forward,
    init_params,
    load_params,
    param_shapes,
    parallel_forward,
    predict,
    predict_batch,
    save_params,
)
from grouptraj.training import LossConfig, variety_loss


@pytest.fixture(scope="module")
def scene3():
    spec = SyntheticCrowdSpec(group_sizes=[2, 1], noise=0.02, seed=3)
    return synthetic_scenes(spec, 1)[0]


def relu(x):
    return np.maximum(x, 0)


def test_param_shapes_and_count():
    shapes = param_shapes()
    assert shapes["enc.W"] == (48, 128) and shapes["dec.W"] == (56, 128)
    assert shapes["intra1.W"] == (48, 72) and shapes["intra2.W"] == (72, 16)
    assert shapes["inter1.W"] == (16, 72) and param_shapes("parallel")["inter1.W"] == (48, 72)
    assert shapes["mu.W"] == (32, 8) and shapes["out.W"] == (32, 2)
    params = init_params(0)
    assert params.names() == list(shapes) and len(set(params.names())) == len(shapes)
    assert params.n_values() == sum(int(np.prod(s)) for s in shapes.values())


def test_params_reject_wrong_shape():
    params = init_params(0)
    tensors = dict(params.items())
    tensors["mu.W"] = Tensor(np.zeros((31, 8)))
    with pytest.raises(ValueError):
        ModelParams(tensors)


def test_encode_self_single_ped():
    params = init_params(1)
    x_rel = np.random.default_rng(0).normal(size=(1, 8, 2))
    c = encode_self(x_rel, np.zeros((1, 2)), np.ones((1, 1)), params)
    assert c.shape == (1, 48)
    np.testing.assert_allclose(c.data[0, 32:], relu(params["sp.b"].data), atol=1e-15)


def test_encode_self_symmetric_peds():
    params = init_params(2)
    x_rel = np.tile(np.random.default_rng(1).normal(size=(1, 8, 2)), (2, 1, 1))
    d = np.array([0.3, -0.4])
    # rows (0,0), (0,1), (1,0), (1,1); mirrored offsets
    pair = np.array([[0, 0], d, -d, [0, 0]])
    pool = np.array([[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    c = encode_self(x_rel, pair, pool, params)
    np.testing.assert_array_equal(c.data[0, :32], c.data[1, :32])
    # the spatial half sees opposite offsets, so it only matches for a sign-symmetric MLP
    assert c.shape == (2, 48)


def test_encode_self_rejects_nan():
    x = np.zeros((1, 8, 2))
    x[0, 3, 1] = np.nan
    with pytest.raises(ValueError):
        encode_self(x, np.zeros((1, 2)), np.ones((1, 1)), init_params(0))


def test_gcn_identity_adjacency_is_mlp():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(4, 5))
    w1, b1, w2, b2 = rng.normal(size=(5, 6)), rng.normal(size=6), rng.normal(size=(6, 3)), rng.normal(size=3)
    out = gcn_forward(Tensor(h), np.eye(4), [(Tensor(w1), Tensor(b1)), (Tensor(w2), Tensor(b2))])
    np.testing.assert_allclose(out.data, relu(relu(h @ w1 + b1) @ w2 + b2), atol=1e-12)


def test_gcn_hand_computed():
    h = Tensor([[1.0, 2.0], [3.0, 4.0]])
    a = np.array([[0.5, 0.5], [0.0, 1.0]])
    eye, zero = Tensor(np.eye(2)), Tensor(np.zeros(2))
    # first layer: [[2, 3], [3, 4]]; second: [[2.5, 3.5], [3, 4]]
    np.testing.assert_array_equal(gcn_forward(h, a, [(eye, zero)]).data, [[2, 3], [3, 4]])
    np.testing.assert_array_equal(gcn_forward(h, a, [(eye, zero), (eye, zero)]).data, [[2.5, 3.5], [3, 4]])
    neg = Tensor(-np.eye(2))
    np.testing.assert_array_equal(gcn_forward(h, a, [(neg, zero)]).data, np.zeros((2, 2)))


def test_gcn_equal_rows_stay_equal():
    rng = np.random.default_rng(4)
    row = rng.normal(size=(1, 48))
    h = Tensor(np.vstack([row, row, rng.normal(size=(1, 48))]))
    a = np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])
    params = init_params(4)
    out = gcn_forward(h, a, [(params["intra1.W"], params["intra1.b"]), (params["intra2.W"], params["intra2.b"])])
    np.testing.assert_array_equal(out.data[0], out.data[1])


def _one_ped_scene():
    pos = np.cumsum(np.full((1, 20, 2), 0.4), axis=1)
    return Scene(np.array([1]), pos, GroupAssignment.singletons(1))


def test_hierarchical_single_ped_degenerate():
    params = init_params(5)
    batch = SceneBatch.from_scenes([_one_ped_scene()])
    c = encode_self(batch.x_rel, batch.pair_disp, batch.pair_pool, params)
    out = hierarchical_forward(c, batch, params)
    e_intra = gcn_forward(c, np.eye(1), [(params["intra1.W"], params["intra1.b"]), (params["intra2.W"], params["intra2.b"])])
    e_inter = gcn_forward(e_intra, np.eye(1), [(params["inter1.W"], params["inter1.b"]), (params["inter2.W"], params["inter2.b"])])
    np.testing.assert_allclose(out.e.data, np.hstack([e_intra.data, e_inter.data]), atol=1e-15)
    assert out.e.shape == (1, 32) and out.mu.shape == (1, 8) and np.all(out.sigma.data > 0)


def test_group_members_share_inter_features(scene3):
    params = init_params(6)
    out = encode(SceneBatch.from_scenes([scene3]), params)
    members = scene3.groups.members()[0]
    np.testing.assert_array_equal(out.e.data[members[0], 16:], out.e.data[members[1], 16:])


def test_all_singletons_finite():
    spec = SyntheticCrowdSpec(group_sizes=[1, 1, 1], seed=4)
    out = encode(SceneBatch.from_scenes(synthetic_scenes(spec, 1)), init_params(0))
    assert np.isfinite(out.e.data).all() and np.all(out.sigma.data > 0)


def test_parallel_degenerate_branches():
    params = init_params(7, "parallel")
    one_group = synthetic_scenes(SyntheticCrowdSpec(group_sizes=[3], seed=2), 1)[0]
    batch = SceneBatch.from_scenes([one_group])
    np.testing.assert_array_equal(batch.a_complement, np.eye(3))
    c = encode_self(batch.x_rel, batch.pair_disp, batch.pair_pool, params)
    out = parallel_forward(c, batch, params)
    mlp = gcn_forward(c, np.eye(3), [(params["inter1.W"], params["inter1.b"]), (params["inter2.W"], params["inter2.b"])])
    np.testing.assert_allclose(out.e.data[:, 16:], mlp.data, atol=1e-15)
    singles = SceneBatch.from_scenes(synthetic_scenes(SyntheticCrowdSpec(group_sizes=[1, 1], seed=2), 1))
    np.testing.assert_array_equal(singles.a_intra, np.eye(2))


def test_variants_differ(scene3):
    batch = SceneBatch.from_scenes([scene3])
    hier, par = init_params(8), init_params(8, "parallel")
    assert not np.allclose(encode(batch, hier).e.data, encode(batch, par).e.data)


def test_permutation_equivariance(scene3):
    params = init_params(9)
    perm = np.array([2, 0, 1])
    base = predict(scene3, params, k=3, rho=0.5, seed=1)
    moved = predict(scene3.permute(perm), params, k=3, rho=0.5, eps=base.eps[:, perm])
    np.testing.assert_allclose(moved.mean_trajectory, base.mean_trajectory[perm], atol=1e-12)
    np.testing.assert_allclose(moved.samples, base.samples[:, perm], atol=1e-12)
    enc_a = encode(SceneBatch.from_scenes([scene3]), params)
    enc_b = encode(SceneBatch.from_scenes([scene3.permute(perm)]), params)
    np.testing.assert_allclose(enc_b.mu.data, enc_a.mu.data[perm], atol=1e-12)
    np.testing.assert_allclose(enc_b.sigma.data, enc_a.sigma.data[perm], atol=1e-12)


def test_decoder_shapes_and_identical_rows():
    params = init_params(10)
    z = Tensor(np.tile(np.random.default_rng(0).normal(size=(1, 8)), (2, 1)))
    out = decode(z, np.array([[0.1, 0.2], [0.1, 0.2]]), params, 1)
    assert out.shape == (2, 1, 2)
    out = decode(z, np.array([[0.1, 0.2], [0.1, 0.2]]), params, 12)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    with pytest.raises(ValueError):
        decode(z, np.zeros((2, 2)), params, 0)


def test_predict_shapes_determinism_and_mean(scene3):
    params = init_params(11)
    a = predict(scene3, params, k=20, rho=1.0, seed=5)
    b = predict(scene3, params, k=20, rho=1.0, seed=5)
    assert a.samples.shape == (20, 3, 12, 2) and a.mean_trajectory.shape == (3, 12, 2)
    assert a.samples.tobytes() == b.samples.tobytes() and a.eps.tobytes() == b.eps.tobytes()
    zero = predict(scene3, params, k=1, eps=np.zeros((1, 3, 8)))
    # same rows through BLAS with a different row count, so equal up to rounding
    np.testing.assert_allclose(zero.samples[0], zero.mean_trajectory, rtol=0, atol=1e-14)
    np.testing.assert_allclose(a.sample_positions()[0, :, 0], scene3.last_observed + a.samples[0, :, 0])
    with pytest.raises(ValueError):
        predict(scene3, params, k=0)


def test_batched_predictions_match_single_scene():
    scenes = synthetic_scenes(SyntheticCrowdSpec(group_sizes=[2, 1], seed=8), 2)
    params = init_params(12)
    batch = SceneBatch.from_scenes(scenes)
    eps = draw_eps(batch.groups, 2, 0.5, 0)
    together = predict_batch(batch, params, k=2, eps=eps)
    alone = predict(scenes[1], params, k=2, eps=eps[:, 3:])
    np.testing.assert_allclose(together[1].samples, alone.samples, atol=1e-12)
    np.testing.assert_allclose(together[1].mean_trajectory, alone.mean_trajectory, atol=1e-12)


@pytest.mark.parametrize("variant", ["hierarchical", "parallel"])
def test_checkpoint_round_trip(tmp_path, variant):
    params = init_params(13, variant)
    save_params(tmp_path / "p.ckpt", params, {"epoch": "3"})
    back, meta = load_params(tmp_path / "p.ckpt", with_meta=True)
    assert back.variant == variant and meta == {"epoch": "3"}
    for (na, a), (nb, b) in zip(params.items(), back.items()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_text("hello\n")
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.ckpt")


def test_full_loss_gradient_subset(scene3):
    # cheap variant of the full check; every tensor, a few coordinates each
    params = init_params(14)
    batch = SceneBatch.from_scenes([scene3])
    cfg = LossConfig(alpha=1.0, k_variety=3, rho=0.5)
    eps = draw_eps(batch.groups, 3, 0.5, 2)
    rng = np.random.default_rng(0)
    tensors = list(params)
    coords = [rng.choice(t.size, size=min(3, t.size), replace=False) for t in tensors]
    errs = check_gradients(lambda: variety_loss(batch, params, cfg, eps=eps), tensors, coords=coords)
    assert max(errs) < 1e-4, dict(zip(params.names(), errs))
