"""Geometry kernels for the manifolds used by the samplers.

Points and tangent vectors are plain numpy arrays in each manifold's storage
chart. Every function accepts a single point of shape ``(D,)`` or a batch of
shape ``(n, D)``; operations act on the trailing axis.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi
SMALL_NORM = 1e-12


class ContractError(ValueError):
    """An argument violates the documented precondition of an operation."""


class GeodesicDegeneracyError(ValueError):
    """The minimising geodesic between two points is not unique."""


class Manifold:
    """Base class. Subclasses define the chart and the elementary operations."""

    kind: str = ""
    flat = True

    @property
    def storage_size(self) -> int:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def exp(self, p, v):
        raise NotImplementedError

    def randn(self, p, rng):
        p = np.asarray(p, dtype=float)
        return np.asarray(rng.standard_normal(p.shape), dtype=float)

    def transport(self, p, v, q):
        return np.array(v, dtype=float)

    def inner(self, u, v):
        return np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def normalise(self, p):
        return np.asarray(p, dtype=float)

    def params(self) -> dict:
        return {}

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params()}

    def __eq__(self, other):
        return type(self) is type(other) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(repr(self.to_json()))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class Euclidean(Manifold):
    kind = "euclidean"

    def __init__(self, d: int):
        if d < 1:
            raise ContractError(f"dimension must be >= 1, got {d}")
        self.d = int(d)

    @property
    def storage_size(self):
        return self.d

    @property
    def dim(self):
        return self.d

    def exp(self, p, v):
        return np.asarray(p, dtype=float) + np.asarray(v, dtype=float)

    def params(self):
        return {"d": self.d}


class LogCholeskySPD(Manifold):
    """SPD(n) in log-Cholesky coordinates.

    Coordinates are the lower-triangular entries of the Cholesky factor in
    row-major order (``i >= j``), with each diagonal entry replaced by its log.
    Geodesics are straight lines in this chart.
    """

    kind = "log_cholesky_spd"

    def __init__(self, n: int):
        if n < 1:
            raise ContractError(f"matrix size must be >= 1, got {n}")
        self.n = int(n)
        rows, cols = np.tril_indices(self.n)
        self._rows, self._cols = rows, cols
        self.diag_mask = rows == cols

    @property
    def storage_size(self):
        return self.n * (self.n + 1) // 2

    @property
    def dim(self):
        return self.storage_size

    def exp(self, p, v):
        return np.asarray(p, dtype=float) + np.asarray(v, dtype=float)

    def to_cholesky(self, coords):
        """Lower-triangular factor(s) ``L`` from coordinates."""
        coords = np.asarray(coords, dtype=float)
        vals = np.where(self.diag_mask, np.exp(coords), coords)
        L = np.zeros(coords.shape[:-1] + (self.n, self.n))
        L[..., self._rows, self._cols] = vals
        return L

    def from_cholesky(self, L):
        L = np.asarray(L, dtype=float)
        vals = L[..., self._rows, self._cols]
        return np.where(self.diag_mask, np.log(np.where(self.diag_mask, vals, 1.0)), vals)

    def to_matrix(self, coords):
        L = self.to_cholesky(coords)
        return L @ np.swapaxes(L, -1, -2)

    def from_matrix(self, S):
        return self.from_cholesky(np.linalg.cholesky(np.asarray(S, dtype=float)))

    def params(self):
        return {"n": self.n}


class Torus(Manifold):
    """Flat torus with period 2*pi in every angle."""

    kind = "torus"

    def __init__(self, d: int):
        if d < 1:
            raise ContractError(f"dimension must be >= 1, got {d}")
        self.d = int(d)

    @property
    def storage_size(self):
        return self.d

    @property
    def dim(self):
        return self.d

    def exp(self, p, v):
        return np.mod(np.asarray(p, dtype=float) + np.asarray(v, dtype=float), TWO_PI)

    def normalise(self, p):
        return np.mod(np.asarray(p, dtype=float), TWO_PI)

    def params(self):
        return {"d": self.d}


class Sphere(Manifold):
    """Unit sphere S^d stored in ambient R^(d+1) coordinates."""

    kind = "sphere"
    flat = False

    def __init__(self, d: int):
        if d < 1:
            raise ContractError(f"dimension must be >= 1, got {d}")
        self.d = int(d)

    @property
    def storage_size(self):
        return self.d + 1

    @property
    def dim(self):
        return self.d

    def normalise(self, p):
        p = np.asarray(p, dtype=float)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def project(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        return v - np.sum(v * p, axis=-1, keepdims=True) * p

    def exp(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        small = nv < SMALL_NORM
        safe = np.where(small, 1.0, nv)
        out = np.cos(nv) * p + np.sin(nv) * v / safe
        out = np.where(small, p, out)
        return self.normalise(out)

    def randn(self, p, rng):
        p = np.asarray(p, dtype=float)
        return self.project(p, rng.standard_normal(p.shape))

    def transport(self, p, v, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        denom = 1.0 + np.sum(p * q, axis=-1, keepdims=True)
        if np.any(denom < 1e-12):
            raise GeodesicDegeneracyError("parallel transport between antipodal points")
        return v - np.sum(q * v, axis=-1, keepdims=True) / denom * (p + q)

    def distance(self, p, q):
        c = np.clip(np.sum(np.asarray(p) * np.asarray(q), axis=-1), -1.0, 1.0)
        return np.arccos(c)

    def params(self):
        return {"d": self.d}


class Product(Manifold):
    """Cartesian product; coordinates are concatenated factor coordinates."""

    kind = "product"

    def __init__(self, factors):
        factors = tuple(factors)
        if not factors:
            raise ContractError("product needs at least one factor")
        self.factors = factors
        self.flat = all(f.flat for f in factors)
        bounds = np.cumsum([0] + [f.storage_size for f in factors])
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def storage_size(self):
        return self.slices[-1].stop

    @property
    def dim(self):
        return sum(f.dim for f in self.factors)

    def _blocks(self, fn, *arrays):
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        return np.concatenate([fn(f, *[a[..., s] for a in arrays])
                               for f, s in zip(self.factors, self.slices)], axis=-1)

    def exp(self, p, v):
        return self._blocks(lambda f, a, b: f.exp(a, b), p, v)

    def randn(self, p, rng):
        return self._blocks(lambda f, a: f.randn(a, rng), p)

    def transport(self, p, v, q):
        return self._blocks(lambda f, a, b, c: f.transport(a, b, c), p, v, q)

    def normalise(self, p):
        return self._blocks(lambda f, a: f.normalise(a), p)

    def params(self):
        return {"factors": [f.to_json() for f in self.factors]}

    def __repr__(self):
        return f"Product({list(self.factors)!r})"


_KINDS = {cls.kind: cls for cls in (Euclidean, Sphere, Torus, LogCholeskySPD, Product)}


def manifold_from_json(obj: dict) -> Manifold:
    """Inverse of ``Manifold.to_json``."""
    try:
        cls = _KINDS[obj["kind"]]
    except KeyError as exc:
        raise ContractError(f"unknown manifold descriptor {obj!r}") from exc
    params = dict(obj.get("params", {}))
    if cls is Product:
        return Product([manifold_from_json(f) for f in params["factors"]])
    return cls(**params)


def _check(m: Manifold, *arrays):
    for a in arrays:
        if np.shape(a)[-1:] != (m.storage_size,):
            raise ContractError(
                f"expected trailing size {m.storage_size} for {m!r}, got shape {np.shape(a)}")


def exp_map(m: Manifold, p, v):
    """Exponential map ``exp_p(v)``; renormalises sphere outputs."""
    _check(m, p, v)
    return m.exp(p, v)


def tangent_randn(m: Manifold, p, rng):
    """Standard Gaussian in the tangent space at ``p`` (batched over ``p``)."""
    _check(m, p)
    return m.randn(p, rng)


def parallel_transport(m: Manifold, p, v, q):
    """Transport ``v`` from ``p`` to ``q`` along the minimising geodesic."""
    _check(m, p, v, q)
    return m.transport(p, v, q)


def reflect_tangent(m: Manifold, v, n, tol: float = 1e-8):
    """Householder reflection ``v - 2 <v, n> n`` against the unit normal ``n``."""
    _check(m, v, n)
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    norm_n = np.sqrt(m.inner(n, n))
    if np.any(np.abs(norm_n - 1.0) > tol):
        raise ContractError("reflection normal must have unit norm")
    return v - 2.0 * m.inner(v, n)[..., None] * n
