"""Synthetic targets and file-ingested point sets.

Mixture parameters for the synthetic generators are placeholders chosen
here; each dataset records its generator in ``meta``.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .constraints import (ConstraintSet, Hypercube, NoConstraint, ProductConstraint, Simplex,
                          SphericalPolygon, TraceBound, constraint_from_json, lonlat_to_unit)
from .geometry import Euclidean, LogCholeskySPD, Manifold, Product, Sphere, manifold_from_json
from .streams import stream


class GeneratorMismatchError(RuntimeError):
    pass


class DataParseError(ValueError):
    def __init__(self, path, line, msg):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {msg}")


@dataclass
class Dataset:
    manifold: Manifold
    constraint: ConstraintSet
    points: np.ndarray
    meta: dict = field(default_factory=dict)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, self.manifold.storage_size)
        if self.train_idx is None:
            self.train_idx = np.arange(len(self.points))
            self.test_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)

    def __len__(self):
        return len(self.points)

    @property
    def train(self):
        return self.points[self.train_idx]

    @property
    def test(self):
        return self.points[self.test_idx]

    def save(self, directory):
        """Write ``points.csv`` and ``manifest.json`` into ``directory``."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "points.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.points.shape[1])])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])
        manifest = {
            "manifold": self.manifold.to_json(),
            "constraint": self.constraint.to_json(),
            "seed": self.meta.get("seed"),
            "generator": self.meta.get("generator"),
            "meta": self.meta,
            "split": {"train": self.train_idx.tolist(), "test": self.test_idx.tolist()},
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        m = manifold_from_json(manifest["manifold"])
        pts = np.loadtxt(os.path.join(directory, "points.csv"), delimiter=",", skiprows=1, ndmin=2)
        return cls(m, constraint_from_json(manifest["constraint"]), pts.reshape(-1, m.storage_size),
                   manifest.get("meta", {}), manifest["split"]["train"], manifest["split"]["test"])


def split_indices(n, seed, train_frac=0.9):
    perm = stream(seed, "split", n).permutation(n)
    k = int(round(train_frac * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def _truncated_mixture(c, means, sigma, n, rng, min_rate=1e-4, batch=None):
    """Equal-weight isotropic Gaussian mixture conditioned on ``c`` by rejection."""
    means = np.asarray(means, dtype=float)
    out, drawn = [], 0
    batch = batch or max(1024, 2 * n)
    got = 0
    while got < n:
        comp = rng.integers(0, len(means), batch)
        x = means[comp] + sigma * rng.standard_normal((batch, means.shape[1]))
        keep = x[c.contains(x)]
        drawn += batch
        out.append(keep)
        got += len(keep)
        if drawn >= 100 * batch or drawn >= 1e6:
            if got / drawn < min_rate:
                raise GeneratorMismatchError(
                    f"acceptance {got / drawn:.2e} below {min_rate:.0e}: mixture misses the set")
    return np.concatenate(out)[:n]


def bimodal_parameters(c: ConstraintSet, d: int):
    """Means and scale of the two-component target on a cube or simplex."""
    if isinstance(c, Hypercube):
        mid = 0.5 * (c.lo + c.hi)
        half = 0.5 * (c.hi - c.lo)
        return np.stack([mid - 0.5 * half, mid + 0.5 * half]), 0.2 * float(np.min(half))
    if isinstance(c, Simplex):
        centroid = np.full(d, 1.0 / (d + 1))
        # clip the shift to 90% of the gap between the centroid and the face sum(x) = 1
        offset = min(0.25, 0.9 * (1.0 - d / (d + 1)))
        second = centroid.copy()
        second[0] += offset
        return np.stack([np.full(d, 1.0 / (2 * d)), second]), 0.1 / np.sqrt(d)
    raise TypeError(f"bimodal generator supports cubes and simplices, got {c.kind}")


def synth_bimodal(m: Manifold, c: ConstraintSet, d: int, n: int, seed: int = 0) -> Dataset:
    if m.storage_size != d:
        raise ValueError(f"manifold size {m.storage_size} does not match d={d}")
    means, sigma = bimodal_parameters(c, d)
    pts = _truncated_mixture(c, means, sigma, n, stream(seed, "bimodal", d, n))
    tr, te = split_indices(n, seed)
    meta = {"seed": seed, "generator": {"name": "bimodal", "means": means.tolist(), "sigma": sigma,
                                        "weights": [0.5, 0.5]}}
    return Dataset(m, c, pts, meta, tr, te)


def load_geo_points(path, polygon) -> Dataset:
    """Read ``lon_deg,lat_deg`` rows, keep those inside ``polygon`` (object or CSV path)."""
    if not isinstance(polygon, SphericalPolygon):
        polygon = SphericalPolygon.from_csv(polygon)
    lonlat = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["lon_deg", "lat_deg"]:
            raise DataParseError(path, 1, f"expected header lon_deg,lat_deg, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise DataParseError(path, line, f"expected 2 fields, got {len(row)}")
            try:
                lon, lat = float(row[0]), float(row[1])
            except ValueError as exc:
                raise DataParseError(path, line, str(exc)) from None
            if not (np.isfinite(lon) and np.isfinite(lat)) or abs(lat) > 90:
                raise DataParseError(path, line, f"invalid coordinates {lon}, {lat}")
            lonlat.append((lon, lat))
    arr = np.array(lonlat, dtype=float).reshape(-1, 2)
    pts = lonlat_to_unit(arr[:, 0], arr[:, 1]).reshape(-1, 3)
    keep = polygon.contains(pts) if len(pts) else np.zeros(0, bool)
    dropped = int(np.sum(~keep))
    report = {"rows": len(pts), "kept": int(np.sum(keep)), "dropped": dropped, "suspicious": False}
    if len(pts) and dropped > 0.5 * len(pts):
        report["suspicious"] = True
        warnings.warn(f"{path}: {dropped} of {len(pts)} points lie outside the polygon")
    return Dataset(Sphere(2), polygon, pts[keep], {"source": str(path), "report": report})


def spd_product(C):
    m = Product([LogCholeskySPD(2), Euclidean(2)])
    return m, ProductConstraint(m, [TraceBound(C, 2), NoConstraint()])


def synth_spd_ellipsoids(n: int, C: float, seed: int = 0) -> Dataset:
    """SPD shape plus planar location; shapes are Wishart(3) draws rescaled to trace ``u C``, ``u ~ U(0.05, 0.95)``."""
    if not C > 0:
        raise ValueError("trace bound C must be positive")
    m, c = spd_product(C)
    rng = stream(seed, "spd", n)
    chart = m.factors[0]
    out, drawn = [], 0
    while sum(len(o) for o in out) < n:
        k = max(64, 2 * n)
        G = rng.standard_normal((k, 2, 3))
        S = G @ np.swapaxes(G, 1, 2) / 3.0
        tr = np.trace(S, axis1=1, axis2=2)
        S *= (C * rng.uniform(0.05, 0.95, k) / tr)[:, None, None]
        loc = rng.standard_normal((k, 2))
        x = np.concatenate([chart.from_matrix(S), loc], axis=1)
        drawn += k
        out.append(x[c.contains(x)])
        if sum(len(o) for o in out) < 1e-4 * drawn:
            raise GeneratorMismatchError("SPD generator fails the trace bound")
    pts = np.concatenate(out)[:n]
    tr_idx, te_idx = split_indices(n, seed)
    meta = {"seed": seed, "generator": {"name": "spd_ellipsoids", "C": C, "wishart_dof": 3,
                                        "trace_fraction": [0.05, 0.95]}}
    return Dataset(m, c, pts, meta, tr_idx, te_idx)
