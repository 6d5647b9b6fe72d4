"""Constraint sets ``M = {x : f_i(x) < 0}``.

Sets are open: a point with ``max_i f_i(x) = 0`` is outside. All methods are
batched over the leading axes of ``x``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import ContractError, LogCholeskySPD, Manifold, Product, Sphere

AMBIGUITY_TOL = 1e-12


class DomainError(ValueError):
    """Operation requires a point inside the constraint set."""


class UnsupportedOperationError(NotImplementedError):
    """The operation is not available for this constraint / manifold pair."""


class BoundaryAmbiguityError(ValueError):
    """A query lies on (numerically) a polygon edge."""


@dataclass
class Intersection:
    t_star: float
    constraint_index: int
    normal: np.ndarray


class ConstraintSet:
    """Base class. ``values`` returns the stacked constraint functions."""

    kind = ""
    n_constraints = 1

    def values(self, x):
        raise NotImplementedError

    def max_violation(self, x):
        return np.max(self.values(x), axis=-1)

    def contains(self, x):
        return self.max_violation(x) < 0

    def distance_and_grad(self, x):
        """Lower bound on the distance to the boundary and its gradient."""
        raise UnsupportedOperationError(f"no boundary distance for {self.kind}")

    def boundary_distance_lb(self, x):
        return self.distance_and_grad(x)[0]

    def ray_batch(self, x, direction, length):
        """Batched first boundary hit along ``x + t * direction`` for ``t`` in ``(0, length]``.

        Returns ``(hit, t, index, normal)`` with ``t = inf`` and ``index = -1``
        where the segment stays inside.
        """
        raise UnsupportedOperationError(f"ray intersection not supported for {self.kind}")

    def gradient(self, x, index):
        raise UnsupportedOperationError(f"no constraint gradient for {self.kind}")

    def bounding_box(self):
        """``(lo, hi)`` box containing the set in the storage chart, or None."""
        return None

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params()}

    def params(self) -> dict:
        return {}


def _push_outside(c, x, direction, t, hit):
    """Nudge hit times up by ulps until the hit point is no longer inside."""
    for _ in range(64):
        if not np.any(hit):
            break
        p = x + np.where(hit, t, 0.0)[:, None] * direction
        bad = hit & (c.max_violation(p) < 0)
        if not np.any(bad):
            break
        t = np.where(bad, np.nextafter(t, np.inf) + 1e-16 * np.abs(t), t)
    return t


class LinearConstraint(ConstraintSet):
    """``A x < b`` with explicit rows; subclasses may override for speed."""

    def __init__(self, A, b):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if A.shape[0] < 1 or A.shape[0] != b.shape[0]:
            raise ContractError("halfspaces need k >= 1 rows with matching b")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0):
            raise ContractError("halfspace rows must be nonzero")
        self.A, self.b, self.row_norms = A, b, norms
        self.n_constraints = A.shape[0]
        self.d = A.shape[1]

    def values(self, x):
        return np.asarray(x, dtype=float) @ self.A.T - self.b

    def distance_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        dist = -self.values(x) / self.row_norms
        i = np.argmin(dist, axis=-1)
        lb = np.take_along_axis(dist, i[..., None], axis=-1)[..., 0]
        grad = -self.A[i] / self.row_norms[i][..., None]
        return lb, grad

    def gradient(self, x, index):
        return self.A[index]

    def ray_batch(self, x, direction, length):
        rate = direction @ self.A.T
        slack = np.maximum(self.b - x @ self.A.T, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = np.where(rate > 0, slack / rate, np.inf)
        return self._finish(x, direction, length, ts)

    def _finish(self, x, direction, length, ts):
        idx = np.argmin(ts, axis=-1)
        t = ts[np.arange(len(ts)), idx]
        hit = t <= length
        t = np.where(hit, t, np.inf)
        t = _push_outside(self, x, direction, t, hit)
        idx = np.where(hit, idx, -1)
        normal = np.zeros_like(x)
        if np.any(hit):
            g = self.gradient(x[hit], idx[hit])
            normal[hit] = g / np.linalg.norm(g, axis=-1, keepdims=True)
        return hit, t, idx, normal


class Halfspaces(LinearConstraint):
    kind = "halfspaces"

    def params(self):
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    def bounding_box(self):
        from scipy.optimize import linprog

        lo, hi = np.empty(self.d), np.empty(self.d)
        for j in range(self.d):
            e = np.zeros(self.d)
            e[j] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(sign * e, A_ub=self.A, b_ub=self.b, bounds=[(None, None)] * self.d)
                if res.status != 0:
                    return None
                out[j] = sign * res.fun
        return lo, hi


class Hypercube(LinearConstraint):
    """Axis-aligned box ``lo < x < hi``; faces ordered ``x - hi`` then ``lo - x``."""

    kind = "hypercube"

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ContractError("hypercube needs lo < hi per dimension")
        self.lo, self.hi = lo, hi
        d = lo.size
        eye = np.eye(d)
        super().__init__(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @classmethod
    def symmetric(cls, d, half_width=1.0):
        return cls(-half_width * np.ones(d), half_width * np.ones(d))

    def values(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x - self.hi, self.lo - x], axis=-1)

    def max_violation(self, x):
        x = np.asarray(x, dtype=float)
        return np.max(np.maximum(x - self.hi, self.lo - x), axis=-1)

    def distance_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        up, down = self.hi - x, x - self.lo
        near_up = up <= down
        per_dim = np.where(near_up, up, down)
        j = np.argmin(per_dim, axis=-1)
        lb = np.take_along_axis(per_dim, j[..., None], axis=-1)[..., 0]
        sign = np.where(np.take_along_axis(near_up, j[..., None], axis=-1)[..., 0], -1.0, 1.0)
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, j[..., None], sign[..., None], axis=-1)
        return lb, grad

    def ray_batch(self, x, direction, length):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_up = np.where(direction > 0, np.maximum(self.hi - x, 0.0) / direction, np.inf)
            t_dn = np.where(direction < 0, np.maximum(x - self.lo, 0.0) / -direction, np.inf)
        return self._finish(x, direction, length, np.concatenate([t_up, t_dn], axis=-1))

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def params(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


class Simplex(LinearConstraint):
    """Open unit simplex ``x_i > 0, sum(x) < 1``; faces ``-x_i`` then ``sum(x) - 1``."""

    kind = "simplex"

    def __init__(self, d: int):
        d = int(d)
        A = np.vstack([-np.eye(d), np.ones((1, d))])
        b = np.concatenate([np.zeros(d), [1.0]])
        super().__init__(A, b)

    def values(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([-x, np.sum(x, axis=-1, keepdims=True) - 1.0], axis=-1)

    def ray_batch(self, x, direction, length):
        s = np.sum(direction, axis=-1, keepdims=True)
        slack = np.maximum(1.0 - np.sum(x, axis=-1, keepdims=True), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_coord = np.where(direction < 0, np.maximum(x, 0.0) / -direction, np.inf)
            t_sum = np.where(s > 0, slack / s, np.inf)
        return self._finish(x, direction, length, np.concatenate([t_coord, t_sum], axis=-1))

    def bounding_box(self):
        return np.zeros(self.d), np.ones(self.d)

    def params(self):
        return {"d": self.d}


class TraceBound(ConstraintSet):
    """``tr(L L^T) < C`` on log-Cholesky coordinates."""

    kind = "trace_bound"

    def __init__(self, C: float, n: int = 2):
        if not C > 0:
            raise ContractError("trace bound C must be positive")
        self.C = float(C)
        self.chart = LogCholeskySPD(n)
        self.diag = self.chart.diag_mask
        # sup of |grad tr| over the boundary tr = C: 2 sqrt(C + C^2)
        self.lipschitz = 2.0 * math.sqrt(self.C + self.C ** 2)

    def trace(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(np.where(self.diag, np.exp(2.0 * x), x * x), axis=-1)

    def values(self, x):
        return (self.trace(x) - self.C)[..., None]

    def gradient(self, x, index=0):
        x = np.asarray(x, dtype=float)
        return np.where(self.diag, 2.0 * np.exp(2.0 * x), 2.0 * x)

    def distance_and_grad(self, x):
        lb = (self.C - self.trace(x)) / self.lipschitz
        return lb, -self.gradient(x) / self.lipschitz

    def ray_batch(self, x, direction, length, tol=1e-12):
        n = x.shape[0]
        length = np.broadcast_to(np.asarray(length, dtype=float), (n,))
        hit = self.trace(x + length[:, None] * direction) >= self.C
        lo = np.zeros(n)
        hi = np.where(hit, length, 0.0)
        # tr along a line is convex and starts below C, so the root is unique
        while True:
            open_ = hit & (hi - lo > tol)
            if not np.any(open_):
                break
            mid = 0.5 * (lo + hi)
            above = self.trace(x + mid[:, None] * direction) >= self.C
            hi = np.where(open_ & above, mid, hi)
            lo = np.where(open_ & ~above, mid, lo)
        t = np.where(hit, hi, np.inf)
        idx = np.where(hit, 0, -1)
        normal = np.zeros_like(x)
        if np.any(hit):
            g = self.gradient(x[hit] + t[hit, None] * direction[hit])
            normal[hit] = g / np.linalg.norm(g, axis=-1, keepdims=True)
        return hit, t, idx, normal

    def params(self):
        return {"C": self.C, "n": self.chart.n}


class NoConstraint(ConstraintSet):
    kind = "all"

    def values(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1,), -np.inf)

    def distance_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], np.inf), np.zeros(x.shape)

    def ray_batch(self, x, direction, length):
        n = x.shape[0]
        return np.zeros(n, bool), np.full(n, np.inf), np.full(n, -1), np.zeros_like(x)


def lonlat_to_unit(lon_deg, lat_deg):
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _frame_with_pole(r):
    """Rotation whose rows form an orthonormal basis with ``r`` as the z-axis."""
    r = r / np.linalg.norm(r)
    helper = np.eye(3)[np.argmin(np.abs(r))]
    e1 = np.cross(helper, r)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(r, e1)
    return np.vstack([e1, e2, r])


class SphericalPolygon(ConstraintSet):
    """Spherical polygon with great-circle edges and a known interior reference point.

    Membership counts crossings of the geodesic from the reference to the query
    with the polygon edges. Each edge contributes when the query longitude (in
    the frame whose pole is the reference) falls in the edge's longitude window
    and the edge plane separates query and reference.

    ``ring_step`` and ``n_rings`` parametrise the step-function surrogate used
    by ``distance_and_grad``: the surrogate is ``ring_step * j`` where ``j`` is
    the number of consecutive rings (radii ``ring_step, 2 ring_step, ...``)
    around the point that lie entirely inside, probed at ``ring_points`` each.
    """

    kind = "spherical_polygon"

    def __init__(self, vertices, reference, ring_step=0.0025, n_rings=4, ring_points=16):
        V = np.asarray(vertices, dtype=float)
        r = np.asarray(reference, dtype=float)
        if V.ndim != 2 or V.shape[1] != 3 or V.shape[0] < 3:
            raise ContractError("polygon needs at least 3 vertices in R^3")
        if np.any(np.abs(np.linalg.norm(V, axis=1) - 1.0) > 1e-10):
            raise ContractError("polygon vertices must be unit vectors")
        if abs(np.linalg.norm(r) - 1.0) > 1e-10:
            raise ContractError("reference must be a unit vector")
        W = np.roll(V, -1, axis=0)
        if np.any(np.linalg.norm(V - W, axis=1) < 1e-12):
            raise ContractError("degenerate polygon edge (repeated vertex)")
        self.vertices, self.reference = V, r
        self.Q = _frame_with_pole(r)
        normals = np.cross(V, W)
        self.normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        self.ref_side = np.sign(self.normals @ r)
        if np.any(np.abs(self.normals @ r) < AMBIGUITY_TOL):
            raise ContractError("reference lies on an edge great circle")
        lon_v = self._longitude(V)
        lon_w = np.roll(lon_v, -1)
        self.win_lo = np.minimum(lon_v, lon_w)
        self.win_hi = np.maximum(lon_v, lon_w)
        self.wrapped = self.win_hi - self.win_lo > math.pi
        winding = np.sum(np.mod(lon_w - lon_v + math.pi, 2 * math.pi) - math.pi)
        if abs(winding) < math.pi:
            raise ContractError("reference point is not inside the polygon (winding number 0)")
        if polygon_crossings_bruteforce(self, r[None])[0] != 0:
            raise ContractError("reference point fails the brute-force crossing check")
        self.ring_step, self.n_rings, self.ring_points = float(ring_step), int(n_rings), int(ring_points)

    def _longitude(self, x):
        local = np.asarray(x, dtype=float) @ self.Q.T
        lon = np.arctan2(local[..., 1], local[..., 0])
        return np.where(lon <= -math.pi, math.pi, lon)

    def crossing_counts(self, q, on_ambiguous="raise"):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        lon = self._longitude(q)[:, None]
        in_window = np.where(self.wrapped,
                             (lon >= self.win_hi) | (lon < self.win_lo),
                             (lon >= self.win_lo) & (lon < self.win_hi))
        side = q @ self.normals.T
        ambiguous = in_window & (np.abs(side) < AMBIGUITY_TOL)
        crosses = in_window & (self.ref_side * np.sign(side) == -1)
        amb_rows = np.any(ambiguous, axis=1)
        if np.any(amb_rows) and on_ambiguous == "raise":
            raise BoundaryAmbiguityError(
                f"{int(amb_rows.sum())} query point(s) lie on a polygon edge")
        return np.sum(crosses, axis=1), amb_rows

    def contains(self, x, on_ambiguous="outside"):
        x = np.asarray(x, dtype=float)
        counts, amb = self.crossing_counts(x.reshape(-1, 3), on_ambiguous=on_ambiguous)
        inside = (counts % 2 == 0) & ~amb
        return inside.reshape(x.shape[:-1])

    def values(self, x):
        return np.where(self.contains(x), -1.0, 1.0)[..., None]

    def distance_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 3)
        n = flat.shape[0]
        ok = np.ones(n, bool)
        level = np.zeros(n)
        sphere = Sphere(2)
        a = np.linspace(0.0, 2 * math.pi, self.ring_points, endpoint=False)
        helper = np.where(np.abs(flat[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
        e1 = sphere.project(flat, helper)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(flat, e1)
        for j in range(1, self.n_rings + 1):
            rad = j * self.ring_step
            dirs = np.cos(a)[None, :, None] * e1[:, None] + np.sin(a)[None, :, None] * e2[:, None]
            pts = sphere.exp(np.repeat(flat[:, None], self.ring_points, axis=1), rad * dirs)
            ring_in = np.all(self.contains(pts), axis=1)
            ok &= ring_in
            level = np.where(ok, rad, level)
        return level.reshape(x.shape[:-1]), np.zeros(x.shape)

    def params(self):
        return {"vertices": self.vertices.tolist(), "reference": self.reference.tolist(),
                "ring_step": self.ring_step, "n_rings": self.n_rings,
                "ring_points": self.ring_points}

    @classmethod
    def from_csv(cls, path, **kwargs):
        """Load ``lon_deg,lat_deg`` vertices plus a ``# reference: lon,lat`` line."""
        ref = None
        rows = []
        with open(path, newline="") as fh:
            lines = []
            for lineno, line in enumerate(fh, 1):
                s = line.strip()
                if s.startswith("#"):
                    body = s.lstrip("#").strip()
                    if body.lower().startswith("reference:"):
                        lon, lat = (float(v) for v in body.split(":", 1)[1].split(","))
                        ref = lonlat_to_unit(lon, lat)
                    continue
                if s:
                    lines.append((lineno, s))
        reader = csv.reader([s for _, s in lines])
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["lon_deg", "lat_deg"]:
            raise ValueError(f"{path}: expected header 'lon_deg,lat_deg'")
        for (lineno, _), row in zip(lines[1:], reader):
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed vertex row {row!r}") from exc
        if ref is None:
            raise ValueError(f"{path}: missing '# reference: lon,lat' line")
        lonlat = np.array(rows)
        return cls(lonlat_to_unit(lonlat[:, 0], lonlat[:, 1]), ref, **kwargs)

    def to_csv(self, path):
        lon, lat = unit_to_lonlat(self.vertices)
        rlon, rlat = unit_to_lonlat(self.reference)
        with open(path, "w", newline="") as fh:
            fh.write(f"# reference: {float(rlon)!r},{float(rlat)!r}\n")
            fh.write("lon_deg,lat_deg\n")
            for a, b in zip(lon, lat):
                fh.write(f"{float(a)!r},{float(b)!r}\n")


def unit_to_lonlat(x):
    x = np.asarray(x, dtype=float)
    lon = np.degrees(np.arctan2(x[..., 1], x[..., 0]))
    lat = np.degrees(np.arcsin(np.clip(x[..., 2], -1.0, 1.0)))
    return lon, lat


def polygon_crossings_bruteforce(poly, q, n_walk=64):
    """Crossing count by walking the great circle from the reference to each query.

    Sign changes of each edge plane along the sampled path are located by
    linear interpolation and kept only when the crossing point lies on the
    edge's minor arc. Antipodal queries walk along a fixed generic meridian.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = poly.reference
    V = poly.vertices
    W = np.roll(V, -1, axis=0)
    P = np.cross(V, W)
    cos_th = np.clip(q @ r, -1.0, 1.0)
    theta = np.arccos(cos_th)
    u = q - cos_th[:, None] * r
    un = np.linalg.norm(u, axis=1, keepdims=True)
    generic = np.cross(r, [0.3141592653589793, 0.2718281828459045, 0.5772156649015329])
    generic /= np.linalg.norm(generic)
    u = np.where(un > 1e-9, u / np.where(un > 1e-9, un, 1.0), generic)
    s = np.linspace(0.0, 1.0, n_walk + 1)[None, :, None] * theta[:, None, None]
    path = np.cos(s) * r + np.sin(s) * u[:, None, :]
    path[:, -1] = q
    f = path @ P.T
    f0, f1 = f[:, :-1], f[:, 1:]
    change = (np.sign(f0) != np.sign(f1)) & (f0 != 0)
    counts = np.zeros(q.shape[0], dtype=int)
    qi, si, ei = np.nonzero(change)
    if qi.size:
        a = path[qi, si]
        b = path[qi, si + 1]
        fa, fb = f0[qi, si, ei], f1[qi, si, ei]
        c = a + (b - a) * (fa / (fa - fb))[:, None]
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        p = P[ei]
        on_arc = (np.sum(np.cross(V[ei], c) * p, axis=1) >= 0) & \
                 (np.sum(np.cross(c, W[ei]) * p, axis=1) >= 0)
        np.add.at(counts, qi[on_arc], 1)
    return counts


class ProductConstraint(ConstraintSet):
    """Per-factor constraints on a product manifold."""

    kind = "product"

    def __init__(self, manifold: Product, parts):
        parts = list(parts)
        if len(parts) != len(manifold.factors):
            raise ContractError("one constraint per product factor required")
        self.manifold, self.parts = manifold, parts
        self.slices = manifold.slices
        self.n_constraints = sum(p.n_constraints for p in parts)
        self.offsets = np.cumsum([0] + [p.n_constraints for p in parts])

    def values(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([p.values(x[..., s]) for p, s in zip(self.parts, self.slices)], axis=-1)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        out = np.ones(x.shape[:-1], bool)
        for p, s in zip(self.parts, self.slices):
            out &= p.contains(x[..., s])
        return out

    def max_violation(self, x):
        x = np.asarray(x, dtype=float)
        return np.max(np.stack([p.max_violation(x[..., s]) for p, s in zip(self.parts, self.slices)],
                               axis=-1), axis=-1)

    def distance_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        lbs, grads = [], []
        for p, s in zip(self.parts, self.slices):
            lb, g = p.distance_and_grad(x[..., s])
            full = np.zeros(x.shape)
            full[..., s] = g
            lbs.append(lb)
            grads.append(full)
        lbs = np.stack(lbs, axis=-1)
        i = np.argmin(lbs, axis=-1)
        lb = np.take_along_axis(lbs, i[..., None], axis=-1)[..., 0]
        grad = np.take_along_axis(np.stack(grads, axis=-2), i[..., None, None], axis=-2)[..., 0, :]
        return lb, grad

    def gradient(self, x, index):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        index = np.broadcast_to(np.asarray(index), (x.shape[0],))
        out = np.zeros_like(x)
        part = np.searchsorted(self.offsets, index, side="right") - 1
        for k, (p, s) in enumerate(zip(self.parts, self.slices)):
            rows = part == k
            if np.any(rows):
                g = p.gradient(x[rows][:, s], index[rows] - self.offsets[k])
                out[np.ix_(rows, np.arange(x.shape[1])[s])] = g
        return out

    def ray_batch(self, x, direction, length):
        n = x.shape[0]
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1)
        normal = np.zeros_like(x)
        for k, (p, s) in enumerate(zip(self.parts, self.slices)):
            hit, t, idx, nrm = p.ray_batch(x[:, s], direction[:, s], length)
            better = hit & (t < best_t)
            best_t = np.where(better, t, best_t)
            best_i = np.where(better, idx + self.offsets[k], best_i)
            normal[better] = 0.0
            normal[better, s] = nrm[better]
        return np.isfinite(best_t), best_t, best_i, normal

    def bounding_box(self):
        los, his = [], []
        for p, s in zip(self.parts, self.slices):
            box = p.bounding_box()
            if box is None:
                return None
            los.append(box[0])
            his.append(box[1])
        return np.concatenate(los), np.concatenate(his)

    def params(self):
        return {"manifold": self.manifold.to_json(), "parts": [p.to_json() for p in self.parts]}


def constraint_from_json(obj: dict) -> ConstraintSet:
    from .geometry import manifold_from_json

    kind = obj["kind"]
    params = dict(obj.get("params", {}))
    if kind == "halfspaces":
        return Halfspaces(params["A"], params["b"])
    if kind == "hypercube":
        if "d" in params:
            return Hypercube.symmetric(params["d"], params.get("half_width", 1.0))
        return Hypercube(params["lo"], params["hi"])
    if kind == "simplex":
        return Simplex(params["d"])
    if kind == "trace_bound":
        return TraceBound(params["C"], params.get("n", 2))
    if kind == "all":
        return NoConstraint()
    if kind == "spherical_polygon":
        if "path" in params:
            path = params.pop("path")
            return SphericalPolygon.from_csv(path, **params)
        return SphericalPolygon(params.pop("vertices"), params.pop("reference"), **params)
    if kind == "product":
        m = manifold_from_json(params["manifold"])
        return ProductConstraint(m, [constraint_from_json(p) for p in params["parts"]])
    raise ContractError(f"unknown constraint kind {kind!r}")


def load_halfspaces_csv(path) -> Halfspaces:
    """Rows ``a_1,...,a_d,b``; blank lines and ``#`` comments are skipped."""
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return Halfspaces(data[:, :-1], data[:, -1])


# Module-level operations mirroring the method API.

def contains(c: ConstraintSet, x):
    return c.contains(x)


def max_violation(c: ConstraintSet, x):
    return c.max_violation(x)


def boundary_distance_lb(c: ConstraintSet, x):
    """Lower bound on the distance from ``x`` to the boundary (a surrogate for polygons)."""
    if not np.all(c.contains(x)):
        raise DomainError("boundary distance requested for a point outside the set")
    return c.boundary_distance_lb(x)


def ray_intersect(c: ConstraintSet, x, direction, length, manifold: Manifold | None = None):
    """First boundary hit of the segment ``x + t * direction``, ``t in (0, length]``.

    Returns an ``Intersection`` or ``None`` if the segment stays inside.
    """
    if manifold is not None and not manifold.flat:
        raise UnsupportedOperationError(f"ray intersection needs a flat chart, got {manifold!r}")
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-8:
        raise ContractError("ray direction must be unit norm")
    hit, t, idx, normal = c.ray_batch(x[None], direction[None], np.asarray([float(length)]))
    if not hit[0]:
        return None
    return Intersection(float(t[0]), int(idx[0]), normal[0])


def spherical_polygon_contains(poly: SphericalPolygon, q) -> bool:
    """Exact-crossing membership test; raises on boundary-ambiguous queries."""
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-10:
        raise ContractError("query must be a unit vector")
    counts, _ = poly.crossing_counts(q[None], on_ambiguous="raise")
    return bool(counts[0] % 2 == 0)
