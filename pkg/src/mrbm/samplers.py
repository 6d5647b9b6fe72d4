"""Discretisations of constrained Brownian motion with optional drift.

Three step kernels share one calling convention: ``x`` is a point ``(D,)`` or
a batch ``(n, D)`` and every row is an independent chain.

* ``metropolis_step``: one Gaussian proposal, kept iff it lands inside.
* ``rejection_step``: proposals redrawn until one lands inside.
* ``reflected_step``: the step is traced as a billiard path, reflecting
  off the boundary (flat charts only).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .constraints import ConstraintSet, UnsupportedOperationError
from .geometry import ContractError, Manifold

NUDGE = 1e-10


class StuckStateError(RuntimeError):
    def __init__(self, tries, step=None):
        self.tries, self.step = tries, step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"rejection sampler exceeded {tries} tries{where}")


class ReflectionBudgetError(RuntimeError):
    def __init__(self, count, step=None):
        self.count, self.step = count, step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"reflected step exceeded {count} reflections{where}")


class ChainError(RuntimeError):
    """A step failed inside a chain driver; ``step`` is the failing index."""

    def __init__(self, step, cause):
        self.step, self.cause = step, cause
        super().__init__(f"step {step}: {cause}")


@dataclass
class StepConfig:
    gamma: float
    drift: Optional[Callable] = None
    max_rejection_tries: int = 10_000
    max_reflections: int = 1_000

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractError(f"step size must be positive, got {self.gamma}")
        if self.max_rejection_tries < 1 or self.max_reflections < 1:
            raise ContractError("try and reflection caps must be >= 1")


@dataclass
class Trajectory:
    steps: np.ndarray
    times: np.ndarray
    points: np.ndarray
    accept_flags: Optional[np.ndarray] = None
    rng_seed: Optional[int] = None

    def __len__(self):
        return len(self.steps)

    @property
    def states(self):
        return list(zip(self.steps.tolist(), self.times.tolist(), self.points))

    def rows(self, chain_id=0):
        acc = self.accept_flags
        for i, (k, t, p) in enumerate(zip(self.steps, self.times, self.points)):
            flag = "" if acc is None or i == 0 else int(acc[i - 1])
            yield [chain_id, int(k), repr(float(t)), flag] + [repr(float(v)) for v in p]


def write_trajectories_csv(path, trajectories):
    """``chain_id,k,t,accept,coord_0,...``; the initial state has an empty accept field."""
    trajectories = list(trajectories)
    D = trajectories[0].points.shape[1] if trajectories else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain_id", "k", "t", "accept"] + [f"coord_{j}" for j in range(D)])
        for cid, tr in enumerate(trajectories):
            w.writerows(tr.rows(cid))


def _increment(m, x, gamma, z, drift, t):
    inc = np.sqrt(gamma) * z
    if drift is not None:
        b = np.asarray(drift(t, x), dtype=float)
        if hasattr(m, "project"):
            b = m.project(x, b)
        inc = inc + gamma * b
    return inc


def metropolis_step(m: Manifold, c: ConstraintSet, x, cfg: StepConfig, t=0.0, rng=None):
    """One Metropolis step: ``exp_x(gamma b + sqrt(gamma) z)`` if it lands inside, else ``x``."""
    x = np.asarray(x, dtype=float)
    z = m.randn(x, rng)
    proposal = m.exp(x, _increment(m, x, cfg.gamma, z, cfg.drift, t))
    accepted = np.asarray(c.contains(proposal))
    new = np.where(accepted[..., None], proposal, x)
    if x.ndim == 1:
        return new, bool(accepted)
    return new, accepted


def rejection_step(m: Manifold, c: ConstraintSet, x, cfg: StepConfig, rng=None, t=0.0):
    """Gaussian step conditioned on landing inside, by redrawing."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    out = np.empty_like(xb)
    pending = np.arange(len(xb))
    tries = 0
    while pending.size:
        if tries >= cfg.max_rejection_tries:
            raise StuckStateError(tries)
        xp = xb[pending]
        z = m.randn(xp, rng)
        prop = m.exp(xp, _increment(m, xp, cfg.gamma, z, cfg.drift, t))
        ok = c.contains(prop)
        out[pending[ok]] = prop[ok]
        pending = pending[~ok]
        tries += 1
    return out[0] if single else out


def nudge_inside(c: ConstraintSet, x, margin=NUDGE, max_iter=8):
    """Move points with ``max f_i > -margin`` inward along the active constraint gradient."""
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        vals = c.values(x)
        worst = np.max(vals, axis=-1)
        near = worst > -margin
        if not np.any(near):
            break
        idx = np.argmax(vals[near], axis=-1)
        g = np.atleast_2d(c.gradient(x[near], idx))
        gn2 = np.sum(g * g, axis=-1, keepdims=True)
        x[near] = x[near] - (worst[near][:, None] + margin) * g / gn2
    return x


def reflected_step(m: Manifold, c: ConstraintSet, x, v, cfg: StepConfig, return_length=False):
    """Trace ``v`` from ``x`` as a geodesic billiard inside the constraint set.

    Each leg runs to the first boundary hit or the remaining length; at a hit
    the direction is transported to the hit point and mirrored in the
    boundary normal. A result on the boundary is nudged ``1e-10`` inward.
    With ``return_length`` the total traversed length is returned as well.
    """
    if not m.flat:
        raise UnsupportedOperationError(f"reflected step needs a flat chart, got {m!r}")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x).copy()
    vb = np.atleast_2d(v)
    ell = np.linalg.norm(vb, axis=1)
    s = vb / np.where(ell > 0, ell, 1.0)[:, None]
    travelled = np.zeros(len(xb))
    count = np.zeros(len(xb), dtype=int)
    active = np.flatnonzero(ell > 0)
    while active.size:
        xa, sa, la = xb[active], s[active], ell[active]
        hit, t, _, normal = c.ray_batch(xa, sa, la)
        alpha = np.where(hit, np.minimum(t, la), la)
        x_new = m.exp(xa, alpha[:, None] * sa)
        sa = m.transport(xa, sa, x_new)
        sa = np.where(hit[:, None], sa - 2.0 * np.sum(sa * normal, axis=1, keepdims=True) * normal, sa)
        xb[active] = x_new
        s[active] = sa
        travelled[active] += alpha
        ell[active] = np.where(hit, np.maximum(la - alpha, 0.0), 0.0)
        count[active] += hit
        if count.max() > cfg.max_reflections:
            raise ReflectionBudgetError(int(count.max()))
        active = active[hit & (ell[active] > 0)]
    xb = nudge_inside(c, xb)
    out = xb[0] if single else xb
    if return_length:
        return out, (travelled[0] if single else travelled)
    return out


def reflected_increment_step(m, c, x, cfg: StepConfig, t=0.0, rng=None):
    """Draw ``v = sqrt(gamma) z + gamma b`` and apply ``reflected_step``."""
    x = np.asarray(x, dtype=float)
    z = m.randn(x, rng)
    return reflected_step(m, c, x, _increment(m, x, cfg.gamma, z, cfg.drift, t), cfg)


SAMPLERS = ("metropolis", "rejection", "reflected")


def _check_sampler(sampler):
    if sampler not in SAMPLERS:
        raise ContractError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def advance(m, c, x, sampler, cfg: StepConfig, t, rng):
    """One step of the named sampler; returns ``(new_x, accepted)``.

    ``accepted`` is all-true for the rejection and reflected samplers.
    """
    if sampler == "metropolis":
        return metropolis_step(m, c, x, cfg, t, rng)
    if sampler == "rejection":
        new = rejection_step(m, c, x, cfg, rng, t)
    else:
        new = reflected_increment_step(m, c, x, cfg, t, rng)
    acc = np.ones(np.shape(x)[:-1], bool)
    return new, (bool(acc) if acc.ndim == 0 else acc)


def uniform_schedule(gamma, n_steps, t0=0.0):
    """Times ``t_k = t0 + k gamma`` (length ``N+1``) and constant step sizes (length ``N``)."""
    gammas = np.full(int(n_steps), float(gamma))
    times = t0 + np.concatenate([[0.0], np.cumsum(gammas)])
    return times, gammas


def run_chain(m, c, x0, sampler, times, gammas, drift=None, rng=None, seed=None,
              max_rejection_tries=10_000, max_reflections=1_000):
    """Run one chain through the schedule and record every state."""
    _check_sampler(sampler)
    x = np.asarray(x0, dtype=float)
    if not c.contains(x):
        raise ContractError("initial state must lie inside the constraint set")
    gammas = np.asarray(gammas, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(times) != len(gammas) + 1:
        raise ContractError("need len(times) == len(gammas) + 1")
    if rng is None:
        from .streams import stream
        rng = stream(0 if seed is None else seed, "chain")
    points = np.empty((len(gammas) + 1, x.size))
    points[0] = x
    flags = np.ones(len(gammas), bool)
    for k, g in enumerate(gammas):
        cfg = StepConfig(g, drift, max_rejection_tries, max_reflections)
        try:
            x, acc = advance(m, c, x, sampler, cfg, times[k], rng)
        except (StuckStateError, ReflectionBudgetError) as exc:
            raise ChainError(k, exc) from exc
        points[k + 1] = x
        flags[k] = acc
    return Trajectory(np.arange(len(gammas) + 1), times, points,
                      flags if sampler == "metropolis" else None, seed)


def run_chains(m, c, x0, sampler, gammas, times=None, drift=None, rng=None,
               max_rejection_tries=10_000, max_reflections=1_000, record=None):
    """Batched driver: ``x0`` is ``(n, D)``; returns final states and acceptance counts.

    ``record`` optionally lists step indices whose states are returned in a
    dict keyed by index (index 0 is the initial state).
    """
    _check_sampler(sampler)
    x = np.array(np.atleast_2d(x0), dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    if times is None:
        times = np.concatenate([[0.0], np.cumsum(gammas)])
    accepts = np.zeros(len(x), dtype=np.int64)
    record = set() if record is None else set(int(r) for r in record)
    saved = {0: x.copy()} if 0 in record else {}
    for k, g in enumerate(gammas):
        cfg = StepConfig(g, drift, max_rejection_tries, max_reflections)
        try:
            x, acc = advance(m, c, x, sampler, cfg, times[k], rng)
        except (StuckStateError, ReflectionBudgetError) as exc:
            raise ChainError(k, exc) from exc
        accepts += acc
        if k + 1 in record:
            saved[k + 1] = x.copy()
    if record:
        return x, accepts, saved
    return x, accepts


@dataclass
class LocalMoments:
    """Monte Carlo one-step moments at a point, each with a standard error."""

    drift_hat: np.ndarray
    drift_hat_se: np.ndarray
    cov_hat: np.ndarray
    cov_hat_se: np.ndarray
    accept_prob: float
    accept_prob_se: float
    metropolis_drift: np.ndarray
    metropolis_drift_se: np.ndarray
    metropolis_cov: np.ndarray = field(default=None)


def empirical_local_moments(m, c, x, gamma, n_samples, rng, chunk=200_000):
    """One-step drift, diffusion and acceptance estimates at ``x``.

    Rejection-kernel moments come from ``rejection_step`` draws, the
    acceptance probability from independent raw proposals, and the
    Metropolis-kernel moments from independent ``metropolis_step`` draws, so
    the identity ``b = a * b_hat`` can be checked across independent samples.
    """
    if n_samples < 100:
        raise ContractError("empirical_local_moments needs n_samples >= 100")
    x = np.asarray(x, dtype=float)
    if not c.contains(x):
        raise ContractError("local moments need an interior point")
    r_rej, r_acc, r_met = rng.spawn(3)
    cfg = StepConfig(gamma)
    D = x.size

    s1 = np.zeros(D)
    s2 = np.zeros((D, D))
    s2sq = np.zeros((D, D))
    m1 = np.zeros(D)
    m1sq = np.zeros(D)
    m2 = np.zeros((D, D))
    n_acc = 0
    s1sq = np.zeros(D)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        xs = np.broadcast_to(x, (k, D))
        dy = rejection_step(m, c, xs, cfg, r_rej) - xs
        s1 += dy.sum(0)
        s1sq += (dy ** 2).sum(0)
        outer = dy[:, :, None] * dy[:, None, :]
        s2 += outer.sum(0)
        s2sq += (outer ** 2).sum(0)
        prop = m.exp(xs, np.sqrt(gamma) * m.randn(xs, r_acc))
        n_acc += int(np.count_nonzero(c.contains(prop)))
        ym, _ = metropolis_step(m, c, xs, cfg, 0.0, r_met)
        dm = ym - xs
        m1 += dm.sum(0)
        m1sq += (dm ** 2).sum(0)
        m2 += (dm[:, :, None] * dm[:, None, :]).sum(0)
        done += k
    n = float(n_samples)

    def mean_se(s, ssq):
        mean = s / n
        var = np.maximum(ssq / n - mean ** 2, 0.0)
        return mean, np.sqrt(var / (n - 1))

    d_mean, d_se = mean_se(s1, s1sq)
    c_mean, c_se = mean_se(s2, s2sq)
    md_mean, md_se = mean_se(m1, m1sq)
    a = n_acc / n
    return LocalMoments(
        drift_hat=d_mean / gamma, drift_hat_se=d_se / gamma,
        cov_hat=c_mean / gamma, cov_hat_se=c_se / gamma,
        accept_prob=a, accept_prob_se=float(np.sqrt(a * (1 - a) / (n - 1))),
        metropolis_drift=md_mean / gamma, metropolis_drift_se=md_se / gamma,
        metropolis_cov=m2 / n / gamma,
    )


def acceptance_probability(m, c, x, gamma, n_samples, rng, chunk=200_000):
    """Monte Carlo estimate of ``P(exp_x(sqrt(gamma) Z) in M)`` and its standard error."""
    x = np.asarray(x, dtype=float)
    hits = 0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        xs = np.broadcast_to(x, (k, x.size))
        prop = m.exp(xs, np.sqrt(gamma) * m.randn(xs, rng))
        hits += int(np.count_nonzero(c.contains(prop)))
        done += k
    a = hits / n_samples
    return a, float(np.sqrt(a * (1 - a) / max(n_samples - 1, 1)))
