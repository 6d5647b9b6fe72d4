import json
import warnings

import numpy as np
import pytest

from mrbm.constraints import Hypercube, Simplex, SphericalPolygon, lonlat_to_unit
from mrbm.datasets import (DataParseError, Dataset, GeneratorMismatchError, _truncated_mixture,
                           bimodal_parameters, load_geo_points, split_indices, synth_bimodal,
                           synth_spd_ellipsoids)
from mrbm.geometry import Euclidean, Sphere

SQUARE = SphericalPolygon(lonlat_to_unit([0, 90, 180, 270], [45, 45, 45, 45]), [0.0, 0.0, 1.0])


def test_split_is_a_partition():
    tr, te = split_indices(1000, 3)
    assert len(tr) == 900 and len(te) == 100
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(1000))
    assert np.array_equal(split_indices(1000, 3)[0], tr)
    assert not np.array_equal(split_indices(1000, 4)[0], tr)


@pytest.mark.parametrize("c,d", [(Hypercube.symmetric(2), 2), (Hypercube.symmetric(5), 5), (Simplex(2), 2),
                                 (Simplex(10), 10)])
def test_bimodal_inside_and_reproducible(c, d):
    ds = synth_bimodal(Euclidean(d), c, d, 2000, seed=1)
    assert ds.points.shape == (2000, d) and np.all(c.contains(ds.points))
    assert np.array_equal(synth_bimodal(Euclidean(d), c, d, 2000, seed=1).points, ds.points)
    means, _ = bimodal_parameters(c, d)
    assert np.all(c.contains(means))


def test_bimodal_has_two_modes():
    c = Hypercube.symmetric(2)
    ds = synth_bimodal(Euclidean(2), c, 2, 4000, seed=0)
    s = ds.points.sum(axis=1)
    low, high = np.mean(s < -0.5), np.mean(s > 0.5)
    assert 0.4 < low < 0.6 and 0.4 < high < 0.6


def test_bimodal_rejects_other_sets():
    with pytest.raises(TypeError):
        bimodal_parameters(SQUARE, 3)
    with pytest.raises(ValueError):
        synth_bimodal(Euclidean(3), Hypercube.symmetric(2), 2, 10)


def test_mixture_far_from_set_raises(rng):
    with pytest.raises(GeneratorMismatchError):
        _truncated_mixture(Hypercube.symmetric(2), [[50.0, 50.0]], 0.1, 10, rng)


def test_dataset_round_trip(tmp_path):
    ds = synth_bimodal(Euclidean(3), Simplex(3), 3, 300, seed=2)
    ds.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert np.array_equal(back.points, ds.points)
    assert np.array_equal(back.train_idx, ds.train_idx) and np.array_equal(back.test_idx, ds.test_idx)
    assert back.constraint.to_json() == ds.constraint.to_json()
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["seed"] == 2 and manifest["generator"]["name"] == "bimodal"
    assert (tmp_path / "d" / "points.csv").read_text().splitlines()[0] == "x0,x1,x2"


def test_spd_generator():
    ds = synth_spd_ellipsoids(500, 2.0, seed=0)
    assert ds.points.shape == (500, 5) and np.all(ds.constraint.contains(ds.points))
    S = ds.manifold.factors[0].to_matrix(ds.points[:, :3])
    tr = np.trace(S, axis1=1, axis2=2)
    assert np.all((tr > 0.05 * 2.0 - 1e-9) & (tr < 0.95 * 2.0 + 1e-9))
    assert np.all(np.linalg.eigvalsh(S) > 0)
    with pytest.raises(ValueError):
        synth_spd_ellipsoids(10, -1.0)


def _write(path, text):
    path.write_text(text)
    return path


def test_geo_points_filter_and_report(tmp_path):
    p = _write(tmp_path / "pts.csv", "lon_deg,lat_deg\n10,60\n# comment\n\n100,80\n20,0\n")
    ds = load_geo_points(p, SQUARE)
    assert isinstance(ds.manifold, Sphere) and len(ds) == 2
    assert ds.meta["report"] == {"rows": 3, "kept": 2, "dropped": 1, "suspicious": False}
    np.testing.assert_allclose(np.linalg.norm(ds.points, axis=1), 1.0)


def test_geo_points_polygon_from_file(tmp_path):
    SQUARE.to_csv(tmp_path / "poly.csv")
    p = _write(tmp_path / "pts.csv", "lon_deg,lat_deg\n10,60\n")
    assert len(load_geo_points(p, tmp_path / "poly.csv")) == 1


def test_geo_points_warn_when_mostly_outside(tmp_path):
    p = _write(tmp_path / "pts.csv", "lon_deg,lat_deg\n10,60\n20,0\n30,-10\n")
    with pytest.warns(UserWarning, match="outside"):
        ds = load_geo_points(p, SQUARE)
    assert ds.meta["report"]["suspicious"]


@pytest.mark.parametrize("body,line", [("lon_deg,lat_deg\n10,60\n10\n", 3),
                                       ("lon_deg,lat_deg\n10,sixty\n", 2),
                                       ("lon_deg,lat_deg\n10,60\n5,95\n", 3),
                                       ("lon,lat\n10,60\n", 1)])
def test_geo_points_parse_errors(tmp_path, body, line):
    p = _write(tmp_path / "pts.csv", body)
    with pytest.raises(DataParseError) as info:
        load_geo_points(p, SQUARE)
    assert info.value.line == line and f":{line}:" in str(info.value)


def test_geo_points_empty(tmp_path):
    p = _write(tmp_path / "pts.csv", "lon_deg,lat_deg\n")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert len(load_geo_points(p, SQUARE)) == 0
