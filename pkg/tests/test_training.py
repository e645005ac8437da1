import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouptraj.autodiff import ShapeError, Tensor
from grouptraj.dataset import SyntheticCrowdSpec, synthetic_scenes
from grouptraj.group_graph import GroupAssignment
from grouptraj.model import PredictionSet, SceneBatch, draw_eps, init_params
from grouptraj.training import (
    Adam,
    LossConfig,
    NumericalError,
    ade,
    best_of_k_eval,
    count_crossings,
    fde,
    kl_standard_normal,
    rho_sweep,
    segments_intersect,
    train,
    trajectory_l1,
    variety_loss,
    variety_min,
    within_group_crossings,
    within_group_divergence,
    write_metrics_csv,
)


def naive_ade_fde(pred, true):
    n, t = pred.shape[:2]
    total, final = 0.0, 0.0
    for i in range(n):
        for s in range(t):
            total += math.sqrt((pred[i, s, 0] - true[i, s, 0]) ** 2 + (pred[i, s, 1] - true[i, s, 1]) ** 2)
        final += math.sqrt((pred[i, -1, 0] - true[i, -1, 0]) ** 2 + (pred[i, -1, 1] - true[i, -1, 1]) ** 2)
    return total / (n * t), final / n


@pytest.fixture(scope="module")
def tiny():
    return synthetic_scenes(SyntheticCrowdSpec(group_sizes=[2, 1], noise=0.01, seed=5), 3)


def test_l1_examples():
    x = np.random.default_rng(0).normal(size=(2, 3, 2))
    assert trajectory_l1(Tensor(x), x).item() == 0.0
    assert trajectory_l1(Tensor(x + 0.1), x).item() == pytest.approx(1.2)
    with pytest.raises(ShapeError):
        trajectory_l1(Tensor(x), x[:, :2])


def test_l1_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
    expected = sum(abs(a[i, t, c] - b[i, t, c]) for i in range(3) for t in range(5) for c in range(2))
    assert trajectory_l1(Tensor(a), b).item() == pytest.approx(expected, rel=1e-14)


def test_kl_examples():
    assert kl_standard_normal(Tensor(np.zeros((2, 8))), Tensor(np.ones((2, 8)))).item() == 0.0
    assert kl_standard_normal(Tensor([[1.0]]), Tensor([[1.0]])).item() == pytest.approx(0.5)
    assert kl_standard_normal(Tensor([[0.0]]), Tensor([[2.0]])).item() == pytest.approx(0.5 * (1 - math.log(2)))
    assert round(kl_standard_normal(Tensor([[0.0]]), Tensor([[2.0]])).item(), 4) == 0.1534
    with pytest.raises(ValueError):
        kl_standard_normal(Tensor([[0.0]]), Tensor([[0.0]]))


def test_kl_matches_monte_carlo():
    mu, var = np.array([0.7, -0.3]), np.array([0.5, 1.8])
    x = np.random.default_rng(2).normal(size=(1_000_000, 2)) * np.sqrt(var) + mu
    log_q = -0.5 * (np.log(2 * np.pi * var) + (x - mu) ** 2 / var)
    log_p = -0.5 * (np.log(2 * np.pi) + x**2)
    estimate = float((log_q - log_p).sum(axis=1).mean())
    exact = kl_standard_normal(Tensor(mu[None]), Tensor(var[None])).item()
    assert abs(estimate - exact) < 0.01


def test_variety_min_selects_smallest():
    true = np.zeros((1, 1, 2))
    # per-candidate L1 0.5, 0.2, 0.9
    cands = np.array([[[[0.5, 0.0]]], [[[0.1, 0.1]]], [[[0.0, -0.9]]]])
    loss, best = variety_min(Tensor(cands), true)
    assert loss.item() == pytest.approx(0.2) and best.tolist() == [1]


def test_variety_min_grad_only_through_chosen():
    true = np.zeros((2, 1, 2))
    c = Tensor(np.array([[[[1.0, 0.0]], [[0.0, 0.0]]], [[[0.2, 0.0]], [[3.0, 0.0]]]]), requires_grad=True)
    loss, best = variety_min(c, true)
    loss.backward()
    assert best.tolist() == [1, 0] and loss.item() == pytest.approx(0.2)
    np.testing.assert_array_equal(c.grad[0, 0], 0.0)
    np.testing.assert_array_equal(c.grad[1, 1], 0.0)
    assert c.grad[1, 0, 0, 0] == 1.0


def test_variety_loss_k1_reduces_to_l1_plus_kl(tiny):
    from grouptraj.model import LATENT_DIM, decode, encode
    from grouptraj.sampler import reparameterize

    params = init_params(0)
    batch = SceneBatch.from_scenes(tiny[:1])
    cfg = LossConfig(alpha=0.7, k_variety=1, rho=0.5)
    eps = draw_eps(batch.groups, 1, 0.5, 3)
    got = variety_loss(batch, params, cfg, eps=eps).item()
    enc = encode(batch, params)
    z = reparameterize(enc.mu, enc.sigma, eps.reshape(-1, LATENT_DIM))
    pred = decode(z, batch.last_disp, params, batch.horizon)
    expected = trajectory_l1(pred, batch.future_rel).item() + 0.7 * kl_standard_normal(enc.mu, enc.sigma).item()
    assert got == pytest.approx(expected, rel=1e-12)
    assert got >= 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        LossConfig(k_variety=0)


class _Bag:
    """Minimal stand-in exposing the ``items()`` interface Adam reads."""

    def __init__(self, **tensors):
        self._t = OrderedDict(tensors)

    def items(self):
        return self._t.items()


def test_adam_zero_gradient_leaves_params():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    x.grad = np.zeros(2)
    opt = Adam(_Bag(x=x), lr=0.1)
    for _ in range(5):
        opt.step()
    np.testing.assert_array_equal(x.data, [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_lr():
    x = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam(_Bag(x=x), lr=1e-3)
    for _ in range(1000):
        before = x.data.copy()
        x.grad = np.array([0.5, -2.0, 10.0])
        opt.step()
    np.testing.assert_allclose(np.abs(x.data - before), 1e-3, rtol=1e-4)


def test_adam_quadratic_bowl():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam(_Bag(x=x), lr=1e-2)
    for _ in range(2000):
        x.grad = None
        x.square().sum().backward()
        opt.step()
    assert np.linalg.norm(x.data) < 1e-3


def test_adam_rejects_nan_with_name():
    x = Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError, match="weights"):
        Adam(_Bag(weights=x)).step()


def test_adam_state_round_trip():
    params = init_params(0)
    for p in params:
        p.grad = np.ones(p.shape)
    opt = Adam(params, lr=1e-3)
    opt.step()
    clone = Adam(params.copy(), lr=1e-3)
    clone.load_state(opt.state())
    assert clone.t == 1 and all(np.array_equal(clone.m[n], opt.m[n]) for n in opt.m)


def test_ade_fde_examples():
    true = np.random.default_rng(0).normal(size=(2, 12, 2))
    assert ade(true, true) == 0.0 and fde(true, true) == 0.0
    assert ade(true + np.array([0.3, 0.4]), true) == pytest.approx(0.5, abs=1e-15)
    pred = true + np.random.default_rng(1).normal(size=true.shape)
    pred[:, -1] = true[:, -1] + np.array([1.0, 0.0])
    assert fde(pred, true) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        ade(true, true[:, :5])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_ade_fde_match_naive_loops(n, t, seed):
    rng = np.random.default_rng(seed)
    pred, true = rng.normal(size=(n, t, 2)) * 3, rng.normal(size=(n, t, 2)) * 3
    a, f = naive_ade_fde(pred, true)
    assert abs(ade(pred, true) - a) < 1e-12 and abs(fde(pred, true) - f) < 1e-12
    per_step = np.linalg.norm(pred - true, axis=-1)
    assert fde(pred, true) <= per_step.max(axis=1).mean() + 1e-12


def test_best_of_k_one_equals_plain_metrics(tiny):
    from grouptraj.model import predict

    params = init_params(1)
    m = best_of_k_eval(tiny[:1], params, k=1, rho=1.0, seed=4)
    seed = np.random.SeedSequence(4).spawn(1)[0]
    pred = predict(tiny[0], params, k=1, rho=1.0, seed=seed)
    assert m.ade == pytest.approx(ade(pred.sample_positions()[0], tiny[0].future), abs=1e-12)
    assert m.fde == pytest.approx(fde(pred.sample_positions()[0], tiny[0].future), abs=1e-12)
    assert m.n_peds == 3 and m.n_scenes == 1


def test_best_of_k_monotone_in_nested_samples(tiny):
    for s in range(3):
        params = init_params(10 + s)
        values = [best_of_k_eval(tiny, params, k=k, rho=0.5, seed=s).ade for k in (1, 2, 5, 20)]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_best_of_k_fde_modes(tiny):
    params = init_params(2)
    a = best_of_k_eval(tiny, params, k=5, rho=0.0, seed=1)
    b = best_of_k_eval(tiny, params, k=5, rho=0.0, seed=1, fde_mode="independent")
    assert a.ade == b.ade and b.fde <= a.fde
    with pytest.raises(ValueError):
        best_of_k_eval(tiny, params, k=5, fde_mode="median")


def test_perfect_sample_scores_zero(tiny):
    scene = tiny[0]
    disp = np.diff(np.concatenate([scene.last_observed[:, None], scene.future], axis=1), axis=1)
    pred = PredictionSet(disp[None], disp, np.zeros((1, 3, 8)), scene.last_observed)
    np.testing.assert_allclose(pred.sample_positions()[0], scene.future, atol=1e-12)


def test_descent_smoke(tiny):
    params = init_params(3)
    batch = SceneBatch.from_scenes(tiny[:1])
    cfg = LossConfig(alpha=1.0, k_variety=2, rho=0.5)
    eps = draw_eps(batch.groups, 2, 0.5, 0)
    loss = variety_loss(batch, params, cfg, eps=eps)
    before = loss.item()
    params.zero_grads()
    loss.backward()
    for p in params:
        p.data -= 1e-5 * p.grad
    assert variety_loss(batch, params, cfg, eps=eps).item() < before


def test_train_runs_and_logs(tiny):
    lines = []
    cfg = LossConfig(alpha=1.0, k_variety=2, learning_rate=1e-3, batch_size=2, epochs=3)
    res = train(tiny, cfg, seed=1, log_line=lines.append)
    assert len(lines) == 3 and len(lines[0].split()) == 5
    assert res.best_epoch in (1, 2, 3) and np.isfinite(res.best_val_ade)
    again = train(tiny, cfg, seed=1)
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(res.final_params, again.final_params))


def test_rho_sweep_rows_in_order(tiny):
    cfg = LossConfig(k_variety=1, learning_rate=1e-3, batch_size=4, epochs=1)
    rows = rho_sweep(tiny, tiny, cfg, eval_k=2)
    assert [r["rho"] for r in rows] == [0, 0.2, 0.5, 0.7, 0.9, 1]
    with pytest.raises(ValueError):
        rho_sweep(tiny, tiny, cfg, rhos=[0.5, 1.5])


def test_segments_intersect_cases():
    assert segments_intersect((0, 0), (1, 1), (0, 1), (1, 0))
    assert not segments_intersect((0, 0), (1, 0), (0, 1), (1, 1))
    assert segments_intersect((0, 0), (2, 0), (1, 0), (1, 1))  # touching
    assert not segments_intersect((0, 0), (1, 0), (2, 0), (3, 0))  # collinear, apart
    assert count_crossings(np.array([[0, 0], [2, 2]]), np.array([[0, 2], [2, 0]])) == 1


def test_coherence_counters():
    groups = GroupAssignment.from_labels([0, 0, 1])
    last = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    straight = np.zeros((2, 3, 4, 2))
    straight[..., 0] = 0.5
    swap = straight.copy()
    swap[1, 0, :, 1] = 0.4  # member 0 drifts up across member 1's lane
    p_keep = PredictionSet(straight, straight[0], np.zeros((2, 3, 8)), last)
    p_swap = PredictionSet(swap, straight[0], np.zeros((2, 3, 8)), last)
    assert within_group_crossings(p_keep, groups) == 0
    assert within_group_crossings(p_swap, groups) > 0
    assert within_group_divergence(p_keep, groups) == 0.0
    assert within_group_divergence(p_swap, groups) > 0.0


def test_metrics_csv(tmp_path):
    row = dict(dataset="eth", split="test", k=20, rho=1.0, ade_m=0.4, fde_m=0.8, n_scenes=3, n_peds=9, seed=0)
    write_metrics_csv(tmp_path / "m.csv", [row])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "dataset,split,k,rho,ade_m,fde_m,n_scenes,n_peds,seed" and len(lines) == 2
