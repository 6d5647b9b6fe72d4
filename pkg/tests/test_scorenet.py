import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrbm.constraints import Hypercube
from mrbm.diffusion import BetaSchedule, TimeGrid, rescale_factor
from mrbm.geometry import ContractError, Euclidean, Sphere
from mrbm.scorenet import (MlpParams, ScoreModel, TrainConfig, TrainingError, cosine_lr, default_mode,
                           divergence, forward, ism_loss, ism_value, load_checkpoint, save_checkpoint,
                           train)

BOX2 = Hypercube.symmetric(2)


def linear_net(A, bias=None):
    """One affine layer ``s(t, x) = A x + bias`` (time input ignored)."""
    A = np.asarray(A, dtype=float)
    D = A.shape[0]
    W = np.vstack([A.T, np.zeros((1, D))])
    return MlpParams([W], [np.zeros(D) if bias is None else np.asarray(bias, dtype=float)])


def small_net(seed, d=2, width=8, n_layers=3):
    return MlpParams.init(d + 1, d, width, n_layers, np.random.default_rng(seed))


def fd_divergence(fn, x, h=1e-5):
    div = np.zeros(len(x))
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        div += (fn(x + e)[:, j] - fn(x - e)[:, j]) / (2 * h)
    return div


def test_init_shapes_and_bounds():
    p = MlpParams.init(3, 2, 16, 4, np.random.default_rng(0))
    assert p.shapes == [[3, 16], [16, 16], [16, 16], [16, 2]]
    assert np.all(np.abs(p.weights[1]) <= np.sqrt(6 / 16))
    assert np.all(np.abs(p.biases[0]) <= 1 / np.sqrt(3))
    q = MlpParams.from_flat(p.shapes, p.flat())
    assert np.array_equal(q.flat(), p.flat())
    with pytest.raises(ValueError):
        MlpParams.from_flat(p.shapes, p.flat()[:-1])


def test_zero_network_gives_zero_score_and_loss(rng):
    p = MlpParams.zeros_like(small_net(0))
    x = rng.uniform(-0.5, 0.5, (10, 2))
    assert np.array_equal(forward(p, 0.3, x), np.zeros((10, 2)))
    assert ism_loss(p, rng.random(10), x) == 0.0


def test_hidden_permutation_invariance(rng):
    p = small_net(1, n_layers=2, width=12)
    perm = rng.permutation(12)
    q = MlpParams([p.weights[0][:, perm], p.weights[1][perm]], [p.biases[0][perm], p.biases[1]])
    x, t = rng.uniform(-1, 1, (7, 2)), rng.random(7)
    np.testing.assert_allclose(forward(q, t, x), forward(p, t, x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(divergence(q, t, x), divergence(p, t, x), rtol=1e-10, atol=1e-12)


def test_forward_is_deterministic():
    a = MlpParams.init(3, 2, 32, 3, np.random.default_rng(4))
    b = MlpParams.init(3, 2, 32, 3, np.random.default_rng(4))
    x = np.linspace(-1, 1, 10).reshape(5, 2)
    assert np.array_equal(forward(a, 0.5, x), forward(b, 0.5, x))


def test_divergence_of_linear_field(rng):
    A = rng.standard_normal((3, 3))
    x = rng.standard_normal((6, 3))
    np.testing.assert_allclose(divergence(linear_net(A), 0.0, x), np.trace(A), rtol=1e-12)
    np.testing.assert_allclose(divergence(linear_net(-np.eye(3)), 0.0, x), -3.0)


def test_exact_divergence_matches_finite_differences(rng):
    for seed in range(5):
        p = small_net(seed, d=3, width=16)
        x, t = rng.uniform(-1, 1, (8, 3)), rng.random(8)
        fd = fd_divergence(lambda y: forward(p, t, y), x)
        np.testing.assert_allclose(divergence(p, t, x), fd, rtol=1e-5, atol=1e-6)


def test_hutchinson_is_unbiased(rng):
    p = small_net(3, d=3, width=16)
    x, t = rng.uniform(-1, 1, (4, 3)), rng.random(4)
    exact = divergence(p, t, x)
    draws = np.array([divergence(p, t, x, "hutchinson", rng) for _ in range(1000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(1000)
    assert np.all(np.abs(draws.mean(axis=0) - exact) < 3 * se + 1e-12)
    averaged = divergence(p, t, x, "hutchinson", rng, probes=1000)
    assert np.all(np.abs(averaged - exact) < 4 * draws.std(axis=0, ddof=1) / np.sqrt(1000) + 1e-12)


def test_sphere_divergence_of_projected_constant(rng):
    # V = a - (a.x) x on the unit sphere in R^3 has surface divergence -2 a.x
    a = rng.standard_normal(3)
    p = MlpParams([np.zeros((4, 3))], [a])
    z = rng.standard_normal((20, 3))
    x = z / np.linalg.norm(z, axis=1, keepdims=True)
    np.testing.assert_allclose(divergence(p, 0.0, x, manifold=Sphere(2)), -2 * x @ a, atol=1e-12)


def test_sphere_hutchinson_matches_exact(rng):
    p = small_net(6, d=3, width=16)
    z = rng.standard_normal((3, 3))
    x = z / np.linalg.norm(z, axis=1, keepdims=True)
    exact = divergence(p, 0.4, x, manifold=Sphere(2))
    draws = np.array([divergence(p, 0.4, x, "hutchinson", rng, manifold=Sphere(2)) for _ in range(2000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(2000)
    assert np.all(np.abs(draws.mean(axis=0) - exact) < 3.5 * se + 1e-12)


def test_unknown_mode_and_auto_choice():
    p = small_net(0)
    with pytest.raises(ContractError):
        divergence(p, 0.0, np.zeros((1, 2)), mode="bogus")
    assert default_mode(3) == "exact" and default_mode(4) == "hutchinson"
    assert default_mode(Sphere(2)) == "exact"


def test_ism_of_gaussian_score(rng):
    # s = -x on N(0, 1): E[s^2 / 2 + s'] = 1/2 - 1
    x = rng.standard_normal((200_000, 1))
    loss = ism_loss(linear_net([[-1.0]]), 0.0, x)
    assert loss == pytest.approx(-0.5, abs=5 * np.sqrt(0.5 / 200_000))
    lam = ism_loss(linear_net([[-1.0]]), 1.0, x)
    assert lam == pytest.approx(2 * loss, rel=1e-12)


def test_ism_minimised_by_true_score(rng):
    x = rng.standard_normal((100_000, 1))
    losses = {a: ism_loss(linear_net([[a]]), 0.0, x) for a in (-1.5, -1.2, -1.0, -0.8, -0.5)}
    assert min(losses, key=losses.get) == -1.0


def test_ism_value_matches_loss(rng):
    p = small_net(2)
    x, t = rng.uniform(-0.8, 0.8, (16, 2)), rng.random(16)
    assert ism_value(forward(p, t, x), divergence(p, t, x), t) == pytest.approx(ism_loss(p, t, x), rel=1e-12)


def test_rescaled_loss_matches_finite_difference_field(rng):
    p = small_net(7)
    x = rng.uniform(-0.999, 0.999, (64, 2))
    lb = BOX2.boundary_distance_lb(x)
    # keep away from the ramp kink and face switches so central differences are valid
    x = x[(np.abs(lb - 0.01) > 1e-4) & (np.abs(np.abs(x[:, 0]) - np.abs(x[:, 1])) > 1e-4)]
    t = rng.random(len(x))

    def field(y):
        return forward(p, t, y) * rescale_factor(BOX2, y, 0.01)[0][:, None]

    expected = ism_value(field(x), fd_divergence(field, x, 1e-7), t)
    assert ism_loss(p, t, x, BOX2, 0.01) == pytest.approx(expected, rel=1e-5)


def test_rescaled_field_vanishes_on_boundary():
    p = small_net(8)
    x = np.array([[1.0 - 1e-14, 0.3], [0.2, -1.0 + 1e-14]])
    loss_near = ism_loss(p, np.zeros(2), x, BOX2, 0.01)
    f, _ = rescale_factor(BOX2, x, 0.01)
    assert np.all(f < 1e-11) and np.isfinite(loss_near)


def test_parameter_gradient_matches_finite_differences(rng):
    for seed in range(10):
        p = small_net(seed)
        x, t = rng.uniform(-0.999, 0.999, (12, 2)), rng.random(12)
        loss, g = ism_loss(p, t, x, BOX2, 0.01, with_grad=True)
        flat, shapes, h = p.flat(), p.shapes, 1e-6
        fd = np.empty_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (ism_loss(MlpParams.from_flat(shapes, up), t, x, BOX2, 0.01)
                     - ism_loss(MlpParams.from_flat(shapes, dn), t, x, BOX2, 0.01)) / (2 * h)
        err = np.linalg.norm(g.flat() - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4, (seed, err)


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        ism_loss(small_net(0), np.zeros(0), np.zeros((0, 2)))


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=100, repeats=8)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)


def test_cosine_schedule():
    assert cosine_lr(2e-4, 0, 100) == 2e-4
    assert cosine_lr(2e-4, 50, 100) == pytest.approx(1e-4)
    assert cosine_lr(2e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)


def _bimodal(rng, n=2000):
    means = np.array([[-0.5, -0.5], [0.5, 0.5]])
    x = means[rng.integers(0, 2, n)] + 0.15 * rng.standard_normal((n, 2))
    return x[BOX2.contains(x)]


def test_zero_steps_leaves_parameters(rng):
    p = small_net(0)
    cfg = TrainConfig(steps=0, batch_size=16, repeats=8, width=8, n_layers=3)
    res = train(Euclidean(2), BOX2, _bimodal(rng), TimeGrid(BetaSchedule(1e-3, 2.0)), cfg, params=p)
    assert np.array_equal(res.params.flat(), p.flat()) and res.losses == []


def test_training_reduces_loss_and_is_reproducible(rng, tmp_path):
    data = _bimodal(rng)
    grid = TimeGrid(BetaSchedule(1e-3, 2.0))
    cfg = TrainConfig(learning_rate=2e-3, steps=300, batch_size=128, repeats=8, width=32, n_layers=3, seed=3)
    a = train(Euclidean(2), BOX2, data, grid, cfg)
    b = train(Euclidean(2), BOX2, data, grid, cfg)
    assert a.losses == b.losses and np.array_equal(a.params.flat(), b.params.flat())
    assert np.mean(a.losses[-50:]) < np.mean(a.losses[:50])
    assert a.lrs[0] == 2e-3 and a.lrs[-1] < 1e-6
    path = tmp_path / "loss.csv"
    a.write_loss_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 301


def test_non_finite_loss_raises(rng):
    p = small_net(0)
    p.weights[0][0, 0] = np.nan
    cfg = TrainConfig(steps=5, batch_size=16, repeats=8, width=8, n_layers=3)
    with pytest.raises(TrainingError) as info:
        train(Euclidean(2), BOX2, _bimodal(rng), TimeGrid(BetaSchedule()), cfg, params=p)
    assert info.value.step == 0


def test_checkpoint_round_trip(tmp_path):
    p = small_net(5, width=16)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, p, {"width": 16, "note": "x"})
    q, cfg = load_checkpoint(path)
    assert np.array_equal(q.flat(), p.flat()) and cfg == {"width": 16, "note": "x"}
    (tmp_path / "bad.bin").write_bytes(b"nothing here")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_score_model_tangent_on_sphere(rng):
    p = small_net(1, d=3)
    z = rng.standard_normal((10, 3))
    x = z / np.linalg.norm(z, axis=1, keepdims=True)
    s = ScoreModel(p, Sphere(2))(0.2, x)
    np.testing.assert_allclose(np.sum(s * x, axis=1), 0.0, atol=1e-12)
    assert ScoreModel(p)(0.2, x).shape == (10, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_divergence_additive_over_batch(seed):
    # rows are independent: evaluating a batch equals evaluating rows separately
    r = np.random.default_rng(seed)
    p = small_net(seed % 7)
    x, t = r.uniform(-1, 1, (3, 2)), r.random(3)
    whole = divergence(p, t, x)
    parts = np.concatenate([divergence(p, t[i:i + 1], x[i:i + 1]) for i in range(3)])
    np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=1e-13)
