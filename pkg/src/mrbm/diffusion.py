"""Forward noising and reverse generation on constrained manifolds.

The forward process is driftless constrained Brownian motion run on the
clock ``tau(t) = int_0^t beta(s) ds``; its invariant law is uniform on M.
Both directions use the Metropolis discretisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSet, Hypercube, NoConstraint, ProductConstraint, Simplex
from .diagnostics import histogram_tv, tv_to_uniform
from .geometry import ContractError, Manifold, Product, Sphere, Torus, TWO_PI
from .samplers import StepConfig, metropolis_step
from .streams import stream


class InputError(ValueError):
    pass


class InitialisationError(RuntimeError):
    pass


class TuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    beta0: float = 1e-3
    beta1: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta0 <= self.beta1:
            raise ContractError(f"need 0 < beta0 <= beta1, got {self.beta0}, {self.beta1}")

    def __call__(self, t):
        return self.beta0 + (np.asarray(t, dtype=float) / self.T) * (self.beta1 - self.beta0)

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t / self.T


@dataclass(frozen=True)
class TimeGrid:
    """``t_k = k T / N`` and left-point step sizes ``gamma_k = beta(t_k) T / N``."""

    schedule: BetaSchedule
    N: int = 100

    def __post_init__(self):
        if self.N < 1:
            raise ContractError("time grid needs N >= 1")

    @property
    def T(self):
        return self.schedule.T

    @property
    def times(self):
        return np.arange(self.N + 1) * self.T / self.N

    @property
    def gammas(self):
        return self.schedule(self.times[:-1]) * self.T / self.N


def ou_drift(t, x):
    """Euclidean variance-preserving drift ``-x / 2`` (per unit of clock time)."""
    return -0.5 * np.asarray(x, dtype=float)


def forward_noise_batch(m: Manifold, c: ConstraintSet, data, grid: TimeGrid, repeats=8, rng=None,
                        max_steps=None, drift=None):
    """Noised training pairs with trajectory-level variance reduction.

    Each datum gets a rollout length ``K ~ U{0..N}`` and ``repeats`` distinct
    save indices in ``[0, K]`` (with replacement when ``K + 1 < repeats``).
    Returns ``(t, x)`` arrays of length ``len(data) * repeats``, grouped by
    datum. ``max_steps`` forces every ``K``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    inside = c.contains(data)
    if not np.all(inside):
        raise InputError(f"datum {int(np.flatnonzero(~inside)[0])} lies outside the constraint set")
    n, N = len(data), grid.N
    K = rng.integers(0, N + 1, n) if max_steps is None else np.full(n, int(max_steps))
    keys = rng.random((n, N + 1))
    keys[np.arange(N + 1)[None, :] > K[:, None]] = np.inf
    distinct = np.argsort(keys, axis=1)[:, :repeats]
    fallback = (rng.random((n, repeats)) * (K[:, None] + 1)).astype(int)
    idx = np.where((K[:, None] + 1) >= repeats, distinct, fallback)
    times, gammas = grid.times, grid.gammas
    out = np.empty((n, repeats, data.shape[1]))
    x = data.copy()
    last = int(idx.max()) if idx.size else 0
    for k in range(last + 1):
        sel = idx == k
        if np.any(sel):
            rows, cols = np.nonzero(sel)
            out[rows, cols] = x[rows]
        if k < last:
            x, _ = metropolis_step(m, c, x, StepConfig(gammas[k], drift), times[k], rng)
    return times[idx].ravel(), out.reshape(n * repeats, -1)


def score_rescale(c: ConstraintSet, x, raw, eps=0.01):
    """Scale ``raw`` by ``min(1, d(x, boundary) / eps)``: zero on the boundary, linear inside."""
    if not eps > 0:
        raise ContractError("score rescaling needs eps > 0")
    lb = np.asarray(c.boundary_distance_lb(x), dtype=float)
    return np.asarray(raw, dtype=float) * np.minimum(1.0, np.maximum(lb, 0.0) / eps)[..., None]


def rescale_factor(c: ConstraintSet, x, eps=0.01):
    """Multiplier ``min(1, d / eps)`` and its gradient with respect to ``x``."""
    lb, grad = c.distance_and_grad(x)
    lb = np.maximum(np.asarray(lb, dtype=float), 0.0)
    ramp = lb < eps
    factor = np.where(ramp, lb / eps, 1.0)
    return factor, np.where(ramp[..., None], grad / eps, 0.0)


def _proposal(m: Manifold, c: ConstraintSet, n, rng, box):
    if isinstance(m, Product):
        parts = c.parts if isinstance(c, ProductConstraint) else [None] * len(m.factors)
        cols = []
        for f, part, s in zip(m.factors, parts, m.slices):
            sub_box = None if box is None else (box[0][s], box[1][s])
            cols.append(_proposal(f, part if part is not None else NoConstraint(), n, rng, sub_box))
        return np.concatenate(cols, axis=1)
    if isinstance(m, Sphere):
        z = rng.standard_normal((n, m.storage_size))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
    if isinstance(m, Torus):
        return rng.random((n, m.d)) * TWO_PI
    if isinstance(c, Simplex):
        return rng.dirichlet(np.ones(c.d + 1), n)[:, :-1]
    if box is None:
        box = c.bounding_box()
    if box is None:
        raise InitialisationError(f"no bounding box for uniform initialisation on {m!r}")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    return lo + (hi - lo) * rng.random((n, lo.size))


def uniform_sample(m: Manifold, c: ConstraintSet, n, rng, box=None, max_rounds=1000):
    """Uniform draws on M by rejection.

    Proposals: uniform on the bounding box for flat charts (exact Dirichlet
    draws for the simplex), normalised Gaussians on spheres, uniform angles
    on tori; products propose factorwise.
    """
    out = np.empty((0, m.storage_size))
    for _ in range(max_rounds):
        need = n - len(out)
        if need <= 0:
            return out[:n]
        batch = _proposal(m, c, max(2 * need, 64), rng, box)
        out = np.vstack([out, batch[c.contains(batch)]])
    if len(out) >= n:
        return out[:n]
    raise InitialisationError(f"uniform initialisation got {len(out)}/{n} points in {max_rounds} rounds")


def reverse_generate(m: Manifold, c: ConstraintSet, score, grid: TimeGrid, n_samples, rng,
                     eps=0.01, box=None, x_init=None, n_steps=None):
    """Run the Metropolis chain backward from the uniform law with drift ``gamma * score``.

    Reverse step ``k`` uses ``gamma_{N-1-k}`` and the score at time
    ``T - t_k``. With ``eps`` set the score is rescaled to vanish at the
    boundary; ``eps=None`` uses it as given. ``n_steps`` truncates the run
    (0 returns the initial draws).
    """
    x = uniform_sample(m, c, n_samples, rng, box) if x_init is None else np.array(x_init, dtype=float)
    times, gammas = grid.times, grid.gammas
    N = grid.N

    for k in range(N if n_steps is None else min(int(n_steps), N)):
        t_now = times[N - k]

        def drift(_t, y, t_now=t_now):
            raw = score(t_now, y)
            return raw if eps is None else score_rescale(c, y, raw, eps)

        x, _ = metropolis_step(m, c, x, StepConfig(gammas[N - 1 - k], drift), t_now, rng)
    return x


def _uniform_tv(m, c, samples, bins, rng):
    """TV to uniform on the first (up to two) coordinates.

    Cubes and simplices use the closed-form marginal; other sets compare
    against a uniform reference sample ten times larger.
    """
    samples = np.atleast_2d(samples)
    k = min(2, samples.shape[1])
    if isinstance(c, (Hypercube, Simplex)):
        return tv_to_uniform(samples, c, bins=bins, k=k)
    ref = uniform_sample(m, c, 10 * len(samples), rng)
    both = np.vstack([samples[:, :k], ref[:, :k]])
    return histogram_tv(samples[:, :k], ref[:, :k], bins, list(zip(both.min(0), both.max(0))))


def forward_tv(m, c, x0_sample, beta1, beta0=1e-3, N=100, n_chains=50_000, bins=None, seed=0,
               t_frac=1.0):
    """TV to uniform of the forward process at time ``t_frac * T`` started from resampled data."""
    x0_sample = np.atleast_2d(np.asarray(x0_sample, dtype=float))
    rng = stream(seed, "forward_tv")
    x = x0_sample[rng.integers(0, len(x0_sample), n_chains)]
    grid = TimeGrid(BetaSchedule(beta0, max(beta1, beta0)), N)
    n_steps = int(round(t_frac * N))
    for k in range(n_steps):
        x, _ = metropolis_step(m, c, x, StepConfig(grid.gammas[k]), grid.times[k], rng)
    if bins is None:
        bins = 20 if x.shape[1] == 1 else 10
    return _uniform_tv(m, c, x, bins, rng)


def tune_beta1(m, c, x0_sample, criterion_tv=0.05, beta0=1e-3, N=100, cap=1e4, n_chains=50_000,
               bins=None, seed=0, rel_tol=0.02):
    """Smallest ``beta1`` (doubling, then bisection) with forward TV-to-uniform below the criterion.

    Every evaluation replays the same random stream, so the search is
    deterministic for a given seed.
    """
    x0_sample = np.atleast_2d(np.asarray(x0_sample, dtype=float))
    if len(x0_sample) == 0:
        raise ContractError("tune_beta1 needs a non-empty sample")

    def ok(b1):
        return forward_tv(m, c, x0_sample, b1, beta0, N, n_chains, bins, seed) < criterion_tv

    if ok(beta0):
        return beta0
    lo, hi = beta0, 2.0 * beta0
    while not ok(hi):
        lo, hi = hi, 2.0 * hi
        if hi > cap:
            raise TuningError(f"forward process not mixed below beta1 cap {cap}")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
