import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from mrbm.constraints import Hypercube, Simplex
from mrbm.diagnostics import (MmdKernel, bin_masses, NonConvergenceError, ScalingResult, convergence_time,
                              fit_power_law, histogram_tv, histogram_tv_se, ks_1d, mmd, mmd_bootstrap_ci,
                              mmd_squared, rbm_density_1d, rbm_density_1d_eigen, rbm_score_1d,
                              tv_to_uniform, uniform_marginal_density)
from mrbm.geometry import ContractError, Euclidean

# p_0.01(0.5 | 0.5) from the cosine series at 40 significant digits (mpmath.nsum)
P_001_HALF = 3.989422804014326779400999519069159968628
# population MMD^2 of N(0,1) vs N(3,1) with a unit RBF kernel: (2 / sqrt 3)(1 - exp(-9/6))
MMD2_SHIFT3 = 0.8970520223272109912874010180185321257062


def test_density_large_time_uniform():
    x = np.linspace(0, 1, 101)
    assert np.max(np.abs(rbm_density_1d(x, 50.0, 0.3) - 1)) < 1e-8


def test_density_reflection_symmetry():
    x = np.linspace(0, 1, 51)
    for t in (0.01, 0.1, 1.0):
        np.testing.assert_allclose(rbm_density_1d(x, t, 0.2), rbm_density_1d(1 - x, t, 0.8), atol=1e-12, rtol=0)


def test_density_frozen_value():
    assert rbm_density_1d(0.5, 0.01, 0.5) == pytest.approx(P_001_HALF, abs=1e-8)
    assert rbm_density_1d_eigen(0.5, 0.01, 0.5) == pytest.approx(P_001_HALF, abs=1e-8)


def test_density_integrates_to_one():
    for t in (0.001, 0.05, 2.0):
        val, _ = integrate.quad(lambda x: rbm_density_1d(x, t, 0.3), 0, 1, points=[0.3], epsabs=1e-13,
                                limit=200)
        assert abs(val - 1) < 1e-8


def test_image_series_equals_eigen_series():
    g = np.linspace(0, 1, 50)
    X, X0 = np.meshgrid(g, g)
    for t in (0.01, 0.1, 1.0):
        np.testing.assert_allclose(rbm_density_1d(X, t, X0), rbm_density_1d_eigen(X, t, X0), atol=1e-8, rtol=0)


def test_density_domain_error():
    with pytest.raises(ValueError):
        rbm_density_1d(0.5, 0.0, 0.5)


def test_score_matches_log_derivative():
    x = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = (np.log(rbm_density_1d(x + h, 0.05, 0.3)) - np.log(rbm_density_1d(x - h, 0.05, 0.3))) / (2 * h)
    np.testing.assert_allclose(rbm_score_1d(x, 0.05, 0.3), fd, atol=1e-6)


def test_histogram_tv_basics(rng):
    a = rng.random(1000)
    assert histogram_tv(a, a.copy(), 20) == 0.0
    assert histogram_tv(a, a + 5, 20) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        histogram_tv(np.array([]), a)
    with pytest.raises(ValueError):
        histogram_tv(a, a, bins=1)


def test_histogram_tv_uniform_noise(rng):
    u = rng.random(100_000)
    tv = histogram_tv(u, lambda x: np.ones_like(x), 20, [(0, 1)])
    # multinomial fluctuation: sum_i 0.5 E|p_hat - p| ~ 0.5 * 20 * sqrt(2 / pi) * sqrt(p (1 - p) / n)
    bound = 0.5 * 20 * math.sqrt(2 / math.pi) * math.sqrt(0.05 * 0.95 / 100_000)
    assert bound == pytest.approx(0.00550, abs=1e-4)
    assert tv < 0.02
    se = histogram_tv_se(u, lambda x: np.ones_like(x), 20, [(0, 1)], rng=rng)
    assert 0 < se < 0.01


def test_uniform_marginals_integrate_to_one():
    for c, k in [(Hypercube.symmetric(3), 2), (Simplex(3), 2), (Simplex(5), 1), (Simplex(2), 2)]:
        lo, hi = c.bounding_box()
        mass = bin_masses(uniform_marginal_density(c, k), 200, list(zip(lo[:k], hi[:k])), sub=4)
        # midpoint rule; the simplex diagonal cuts cells, costing O(1 / 800) of mass
        assert mass.sum() == pytest.approx(1.0, abs=2e-3)
    # closed form check against a Dirichlet sample: first coordinate of Simplex(5) is Beta(1, 5)
    dens = uniform_marginal_density(Simplex(5), 1)
    x = np.array([0.1, 0.4, 0.7])
    np.testing.assert_allclose(dens(x), 5 * (1 - x) ** 4)


def test_tv_to_uniform_on_simplex(rng):
    x = rng.dirichlet(np.ones(4), 200_000)[:, :3]
    assert tv_to_uniform(x, Simplex(3), bins=20, k=2) < 0.03


def test_ks(rng):
    stat, p = ks_1d(rng.random(2000), rng.random(2000))
    assert p > 0.001


def test_mmd_identical_sets(rng):
    a = rng.standard_normal((500, 2))
    value, raw = mmd(a, a.copy(), MmdKernel([1.0]))
    assert raw <= 0 and value == 0.0


def test_mmd_null(rng):
    a, b = rng.standard_normal(10_000), rng.standard_normal(10_000)
    assert mmd(a, b, MmdKernel([1.0]))[0] < 0.01 + 0.05  # sqrt of an O(1/n) U-statistic
    assert abs(mmd_squared(a, b, MmdKernel([1.0]))) < 1e-3


def test_mmd_gaussian_shift(rng):
    k = MmdKernel([1.0])
    raws = [mmd_squared(rng.standard_normal(10_000), rng.standard_normal(10_000) + 3, k) for _ in range(8)]
    se = np.std(raws, ddof=1)
    single = mmd_squared(rng.standard_normal(10_000), rng.standard_normal(10_000) + 3, k)
    assert abs(single - MMD2_SHIFT3) < 3 * se
    assert abs(np.mean(raws) - MMD2_SHIFT3) < 3 * se / math.sqrt(8) + 1e-3


def test_mmd_symmetry_and_shuffle(rng):
    a, b = rng.standard_normal((300, 2)), rng.standard_normal((200, 2)) + 0.5
    k = MmdKernel([0.5, 2.0], [0.3, 0.7])
    assert mmd_squared(a, b, k) == pytest.approx(mmd_squared(b, a, k), rel=1e-12)
    assert mmd_squared(a, b, k) == pytest.approx(mmd_squared(a[::-1], rng.permutation(b), k), rel=1e-10)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd(np.zeros((1, 2)), np.zeros((5, 2)), MmdKernel([1.0]))
    with pytest.raises(ValueError):
        MmdKernel([1.0, -1.0])
    with pytest.raises(ValueError):
        MmdKernel([1.0, 2.0], [1.0])
    k = MmdKernel([1.0, 2.0], [2.0, 2.0])
    assert k.weights == [0.5, 0.5]


def test_mmd_bootstrap_ci(rng):
    a, b = rng.standard_normal(300), rng.standard_normal(300) + 1
    lo, hi = mmd_bootstrap_ci(a, b, MmdKernel([1.0]), n_boot=200, rng=rng)
    assert lo <= mmd(a, b, MmdKernel([1.0]))[0] <= hi


def test_power_law_fits(rng):
    d = np.array([1, 2, 3, 5, 7, 10])
    e, r2 = fit_power_law(d, d ** 2.0)
    assert abs(e - 2) < 1e-12 and r2 == pytest.approx(1.0)
    assert fit_power_law(d, 7.0 * d)[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fit_power_law([1, 2], [1, 2])
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, 0, 2])


def test_power_law_noisy_regression():
    dims = np.arange(1, 11)
    errs = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        t = dims ** 1.5 * np.exp(0.05 * r.standard_normal(10))
        errs.append(abs(fit_power_law(dims, t)[0] - 1.5))
    assert max(errs) < 0.2


def test_convergence_time_uniform_start(rng):
    c = Hypercube.symmetric(1)
    x0 = rng.uniform(-1, 1, (4096, 1))
    steps, wall = convergence_time(Euclidean(1), c, "metropolis", 1, x0, 0.2, 1e-2, rng)
    assert steps == 0 and wall == 0.0


def test_convergence_time_monotone_in_threshold():
    c = Hypercube.symmetric(2)
    # 20x20 bins with 4096 chains have a TV noise floor near 0.125
    res = [convergence_time(Euclidean(2), c, "metropolis", 2, np.zeros(2), th, 1e-2,
                            np.random.default_rng(5), check_every=10, max_steps=20_000)[0]
           for th in (0.2, 0.3, 0.5)]
    assert res[0] >= res[1] >= res[2] > 0


def test_convergence_time_cap():
    with pytest.raises(NonConvergenceError):
        convergence_time(Euclidean(1), Hypercube.symmetric(1), "metropolis", 1, [0.0], 0.01, 1e-6,
                         np.random.default_rng(0), n_chains=256, max_steps=100)
    with pytest.raises(ContractError):
        convergence_time(Euclidean(1), Hypercube.symmetric(1), "metropolis", 1, [0.0], 1.5, 1e-2,
                         np.random.default_rng(0))


def test_scaling_result_export(tmp_path):
    r = ScalingResult("metropolis", [1, 2, 3], [10, 20, 30], [0.1, 0.2, 0.3], 1.0, 1.0)
    p = tmp_path / "s.csv"
    r.to_csv(p)
    assert p.read_text().splitlines()[0] == "d,steps,wall_seconds"
    assert json.loads(r.to_json())["exponent"] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.005, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_density_series_agree_property(t, x, x0):
    assert rbm_density_1d(x, t, x0) == pytest.approx(rbm_density_1d_eigen(x, t, x0), abs=1e-8)
