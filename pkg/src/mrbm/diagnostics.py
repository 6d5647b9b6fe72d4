"""Oracles and two-sample metrics used to verify the samplers."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .constraints import Hypercube, Simplex
from .geometry import ContractError
from .samplers import StepConfig, advance


# Reflected Brownian motion on [0, 1]

def _phi(u, t):
    return np.exp(-u * u / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)


def _image_terms(x, t, x0, k):
    return _phi(x - x0 + 2 * k, t) + _phi(x + x0 + 2 * k, t)


def rbm_density_1d(x, t, x0, tol=1e-16, max_terms=10_000):
    """Transition density of reflected Brownian motion on [0, 1] by the method of images.

    ``t`` is the variance of the driving Brownian motion (the accumulated sum of
    step sizes). Image pairs are added symmetrically until a new pair adds less
    than ``tol`` times the running sum everywhere.
    """
    if not t > 0:
        raise ValueError(f"rbm_density_1d needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    total = _image_terms(x, t, x0, 0)
    for k in range(1, max_terms):
        term = _image_terms(x, t, x0, k) + _image_terms(x, t, x0, -k)
        total = total + term
        if np.all(term <= tol * total):
            break
    return total


def rbm_density_1d_eigen(x, t, x0, tol=1e-16, max_terms=100_000):
    """Same density from the Neumann cosine series ``1 + 2 sum exp(-n^2 pi^2 t / 2) cos cos``."""
    if not t > 0:
        raise ValueError(f"rbm_density_1d_eigen needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    total = np.ones(np.broadcast(x, x0).shape)
    for n in range(1, max_terms):
        w = math.exp(-0.5 * n * n * math.pi * math.pi * t)
        total = total + 2.0 * w * np.cos(n * math.pi * x) * np.cos(n * math.pi * x0)
        if 2.0 * w <= tol * 1e-3:
            break
    return total


def rbm_score_1d(x, t, x0, tol=1e-16, max_terms=10_000):
    """``d/dx log p_t(x | x0)`` for the image-charges density."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    def dterms(k):
        u1, u2 = x - x0 + 2 * k, x + x0 + 2 * k
        return -(u1 * _phi(u1, t) + u2 * _phi(u2, t)) / t

    dens = rbm_density_1d(x, t, x0, tol, max_terms)
    total = dterms(0)
    for k in range(1, max_terms):
        term = dterms(k) + dterms(-k)
        total = total + term
        if np.all(np.abs(term) <= tol * (np.abs(total) + dens)):
            break
    return total / dens


# Histogram total variation

def _as_columns(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _hist(a, bins, rng_):
    counts, _ = np.histogramdd(a, bins=[bins] * a.shape[1], range=rng_)
    return counts / max(len(a), 1)


def bin_masses(density, bins, range_, sub=32):
    """Per-bin integral of ``density`` (vectorised over ``(m, k)`` points) by the midpoint rule."""
    k = len(range_)
    grids = []
    for lo, hi in range_:
        edges = np.linspace(lo, hi, bins + 1)
        w = (hi - lo) / bins
        offs = (np.arange(sub) + 0.5) / sub * w
        grids.append((edges[:-1, None] + offs[None, :]).ravel())
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    vals = np.asarray(density(pts if k > 1 else pts[:, 0]), dtype=float).reshape([bins * sub] * k)
    cell = np.prod([(hi - lo) / (bins * sub) for lo, hi in range_])
    for ax in range(k):
        shape = vals.shape[:ax] + (bins, sub) + vals.shape[ax + 1:]
        vals = vals.reshape(shape).sum(axis=ax + 1)
    return vals * cell


def histogram_tv(samples_a, samples_b_or_density, bins=20, range_=None, sub=32):
    """Total variation ``0.5 sum |p_a - p_b|`` over a shared histogram.

    The second argument is either samples or a density callable; a density is
    integrated per bin with ``sub`` midpoint sub-points per axis. ``range_``
    defaults to the joint sample extent (required for a density).
    """
    a = _as_columns(samples_a)
    if len(a) == 0:
        raise ValueError("histogram_tv needs non-empty samples")
    if bins < 2:
        raise ValueError("histogram_tv needs at least 2 bins")
    if callable(samples_b_or_density):
        if range_ is None:
            raise ValueError("range_ is required with an analytic density")
        range_ = [tuple(r) for r in np.atleast_2d(range_)]
        pa = _hist(a, bins, range_)
        pb = bin_masses(samples_b_or_density, bins, range_, sub)
    else:
        b = _as_columns(samples_b_or_density)
        if len(b) == 0:
            raise ValueError("histogram_tv needs non-empty samples")
        if range_ is None:
            both = np.vstack([a, b])
            range_ = list(zip(both.min(0), both.max(0)))
        range_ = [tuple(r) for r in np.atleast_2d(range_)]
        pa = _hist(a, bins, range_)
        pb = _hist(b, bins, range_)
    return float(0.5 * np.abs(pa - pb).sum())


def histogram_tv_se(samples, density, bins, range_, n_boot=200, rng=None):
    """Bootstrap standard error of ``histogram_tv`` against a fixed density."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = _as_columns(samples)
    range_ = [tuple(r) for r in np.atleast_2d(range_)]
    p = _hist(a, bins, range_).ravel()
    q = bin_masses(density, bins, range_).ravel()
    n = len(a)
    leftover = max(1.0 - p.sum(), 0.0)
    draws = rng.multinomial(n, np.append(p, leftover), size=n_boot)[:, :-1] / n
    return float(np.std(0.5 * np.abs(draws - q).sum(axis=1), ddof=1))


def uniform_marginal_density(c, k=2):
    """Density of the first ``k`` coordinates of the uniform law on a cube or simplex."""
    if isinstance(c, Hypercube):
        lo, hi = c.lo[:k], c.hi[:k]
        vol = float(np.prod(hi - lo))

        def dens(x):
            x = _as_columns(x)
            inside = np.all((x > lo) & (x < hi), axis=1)
            return inside / vol
        return dens
    if isinstance(c, Simplex):
        d = c.d
        k = min(k, d)
        coef = math.factorial(d) / math.factorial(d - k)

        def dens(x):
            x = _as_columns(x)
            s = 1.0 - x.sum(axis=1)
            inside = np.all(x > 0, axis=1) & (s > 0)
            return np.where(inside, coef * np.where(inside, s, 0.0) ** (d - k), 0.0)
        return dens
    raise ContractError(f"no closed-form uniform marginal for {type(c).__name__}")


def tv_to_uniform(samples, c, bins=20, k=2):
    """TV between the first ``k`` coordinates of ``samples`` and the uniform marginal."""
    samples = _as_columns(samples)
    k = min(k, samples.shape[1])
    lo, hi = c.bounding_box()
    range_ = list(zip(lo[:k], hi[:k]))
    return histogram_tv(samples[:, :k], uniform_marginal_density(c, k), bins, range_)


def ks_1d(a, b):
    """Two-sample Kolmogorov-Smirnov statistic and p-value for 1D samples."""
    res = stats.ks_2samp(np.ravel(a), np.ravel(b))
    return float(res.statistic), float(res.pvalue)


# Maximum mean discrepancy

@dataclass
class MmdKernel:
    """Weighted sum of RBF kernels ``sum_j w_j exp(-|x - y|^2 / (2 l_j^2))``."""

    lengthscales: list
    weights: list = None

    def __post_init__(self):
        self.lengthscales = [float(v) for v in np.atleast_1d(self.lengthscales)]
        if self.weights is None:
            self.weights = [1.0 / len(self.lengthscales)] * len(self.lengthscales)
        self.weights = [float(v) for v in np.atleast_1d(self.weights)]
        if len(self.weights) != len(self.lengthscales):
            raise ValueError("kernel weights and lengthscales differ in length")
        if any(l <= 0 for l in self.lengthscales) or any(w < 0 for w in self.weights):
            raise ValueError("lengthscales must be positive and weights nonnegative")
        total = sum(self.weights)
        self.weights = [w / total for w in self.weights]

    def gram(self, x, y):
        sq = x @ y.T
        sq *= -2.0
        sq += np.sum(x * x, 1)[:, None]
        sq += np.sum(y * y, 1)[None, :]
        np.maximum(sq, 0.0, out=sq)
        if len(self.lengthscales) == 1:
            sq *= -0.5 / self.lengthscales[0] ** 2
            return np.exp(sq, out=sq)
        out = np.zeros_like(sq)
        tmp = np.empty_like(sq)
        for l, w in zip(self.lengthscales, self.weights):
            np.multiply(sq, -0.5 / (l * l), out=tmp)
            np.exp(tmp, out=tmp)
            tmp *= w
            out += tmp
        return out


def _kernel_sum(kernel, x, y, block=2048, exclude_diag=False):
    """Sum of gram entries; with ``exclude_diag`` ``y`` is ``x`` and only upper blocks are formed."""
    total = 0.0
    for i in range(0, len(x), block):
        for j in range(i if exclude_diag else 0, len(y), block):
            K = kernel.gram(x[i:i + block], y[j:j + block])
            if exclude_diag and i == j:
                total += K.sum() - np.trace(K)
            elif exclude_diag:
                total += 2.0 * K.sum()
            else:
                total += K.sum()
    return total


def mmd_squared(samples_a, samples_b, kernel: MmdKernel):
    """Unbiased U-statistic estimate of MMD^2 (within-sample diagonals excluded)."""
    a = _as_columns(samples_a)
    b = _as_columns(samples_b)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd needs at least 2 samples in each set")
    kaa = _kernel_sum(kernel, a, a, exclude_diag=True) / (m * (m - 1))
    kbb = _kernel_sum(kernel, b, b, exclude_diag=True) / (n * (n - 1))
    kab = _kernel_sum(kernel, a, b) / (m * n)
    return float(kaa + kbb - 2.0 * kab)


def mmd(samples_a, samples_b, kernel: MmdKernel):
    """``(mmd, raw_mmd2)``: the signed square root clamps negative estimates to 0."""
    raw = mmd_squared(samples_a, samples_b, kernel)
    return math.sqrt(raw) if raw > 0 else 0.0, raw


def mmd_bootstrap_ci(samples_a, samples_b, kernel, n_boot=200, level=0.95, rng=None):
    """Percentile bootstrap interval for the MMD, resampling each set independently."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = _as_columns(samples_a)
    b = _as_columns(samples_b)
    vals = np.empty(n_boot)
    for i in range(n_boot):
        ia = rng.integers(0, len(a), len(a))
        ib = rng.integers(0, len(b), len(b))
        vals[i] = mmd(a[ia], b[ib], kernel)[0]
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(vals, alpha)), float(np.quantile(vals, 1.0 - alpha))


# Convergence time and scaling

@dataclass
class ScalingResult:
    sampler: str
    dims: list
    steps: list
    wall_seconds: list
    exponent: float = float("nan")
    r2: float = float("nan")
    step_exponent: float = float("nan")
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d", "steps", "wall_seconds"])
            for d, s, t in zip(self.dims, self.steps, self.wall_seconds):
                w.writerow([d, s, repr(float(t))])

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class NonConvergenceError(RuntimeError):
    pass


def convergence_time(m, c, sampler, d, x0, tv_threshold, gamma, rng, n_chains=4096,
                     check_every=50, bins=20, max_steps=10_000_000):
    """Steps and sampler wall-clock seconds until the chains look uniform.

    ``n_chains`` chains start at ``x0`` (a point or an ``(n_chains, d)`` array).
    Every ``check_every`` steps the TV between the first two coordinates and
    the uniform marginal is computed (20x20 bins, or 20 bins when ``d == 1``);
    only the sampler steps are timed.
    """
    if not 0 < tv_threshold < 1:
        raise ContractError("tv_threshold must lie in (0, 1)")
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n_chains, d)))
    cfg = StepConfig(gamma)
    k = min(d, 2)
    steps = 0
    wall = 0.0
    while True:
        if tv_to_uniform(x, c, bins, k) < tv_threshold:
            return steps, wall
        if steps >= max_steps:
            raise NonConvergenceError(f"no convergence within {max_steps} steps")
        t0 = time.perf_counter()
        for _ in range(check_every):
            x, _ = advance(m, c, x, sampler, cfg, 0.0, rng)
        wall += time.perf_counter() - t0
        steps += check_every


def fit_power_law(dims, times):
    """Least-squares slope of ``log time`` on ``log d``; returns ``(exponent, r2)``."""
    dims = np.asarray(dims, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(dims) < 3 or len(dims) != len(times):
        raise ValueError("fit_power_law needs at least 3 (d, time) pairs")
    if np.any(dims <= 0) or np.any(times <= 0):
        raise ValueError("fit_power_law needs positive dims and times")
    lx, ly = np.log(dims), np.log(times)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)
