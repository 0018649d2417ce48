import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from digisc import constellation as cst
from digisc.errors import ConfigurationError, FramingError, MissingFileError


def brute_nearest(q, pts):
    best, bi = math.inf, -1
    for j, p in enumerate(pts):
        d = (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2
        if d < best:
            best, bi = d, j
    return bi


def hamming(a, b):
    return sum(x != y for x, y in zip(a, b))


# ---------------------------------------------------------------- square QAM

def test_qpsk_points():
    c = cst.make_square_qam(4)
    s = 1 / math.sqrt(2)
    assert sorted(map(tuple, np.round(c.points, 12))) == sorted(
        (round(a, 12), round(b, 12)) for a in (-s, s) for b in (-s, s)
    )


def test_16qam_levels():
    c = cst.make_square_qam(16)
    lv = np.unique(np.round(c.points[:, 0], 12))
    expect = np.array([-3, -1, 1, 3]) / math.sqrt(10)
    np.testing.assert_allclose(lv, expect, atol=1e-12)
    # E|s|^2 over the uniform grid: mean(I^2) + mean(Q^2) = 2 * (1 + 9) / 2 / 10
    assert abs(np.mean(np.sum(c.points**2, 1)) - 1.0) < 1e-12


@pytest.mark.parametrize("m", [4, 16, 64, 256])
def test_square_qam_unit_power(m):
    c = cst.make_square_qam(m)
    assert abs(np.mean(np.sum(c.points**2, 1)) - 1.0) <= 1e-6
    assert c.order == m and c.bits_per_symbol == int(math.log2(m))


@pytest.mark.parametrize("m", [4, 16, 64, 256])
def test_gray_adjacency_exhaustive(m):
    c = cst.make_square_qam(m)
    lv = np.unique(np.round(c.points[:, 0], 10))
    step = lv[1] - lv[0]
    for i, j in itertools.combinations(range(m), 2):
        d = np.abs(c.points[i] - c.points[j])
        neighbour = (abs(d[0] - step) < 1e-9 and d[1] < 1e-9) or (abs(d[1] - step) < 1e-9 and d[0] < 1e-9)
        if neighbour:
            assert hamming(c.labels[i], c.labels[j]) == 1, (i, j)


@pytest.mark.parametrize("m", [2, 8, 32, 3, 12, 1, 0])
def test_square_qam_rejects_bad_order(m):
    with pytest.raises(ConfigurationError):
        cst.make_square_qam(m)


def test_constellation_is_frozen_and_validated():
    c = cst.make_square_qam(4)
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0
    with pytest.raises(ConfigurationError):
        cst.Constellation(c.points * 2, c.labels)
    with pytest.raises(ConfigurationError):
        cst.Constellation(c.points, ("00", "00", "01", "10"))
    with pytest.raises(ConfigurationError):
        cst.Constellation(np.ones((3, 2)) / math.sqrt(2), ("00", "01", "10"))


# ---------------------------------------------------------------- learnable spacing

def test_learnable_spacing_qpsk_matches_square():
    for s in (0.1, 1.0, 7.5):
        np.testing.assert_allclose(cst.make_learnable_spacing(4, s).points, cst.make_square_qam(4).points, atol=1e-12)


def test_learnable_spacing_scale_invariant():
    a = cst.make_learnable_spacing(16, 0.3)
    b = cst.make_learnable_spacing(16, 0.6)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)


def test_learnable_spacing_ratio_three_is_16qam():
    # levels -3,-1,1,3: outer/inner ratio 3, equal gaps
    c = cst.make_learnable_spacing(16, gaps=[2.0, 2.0, 2.0])
    np.testing.assert_allclose(c.points, cst.make_square_qam(16).points, atol=1e-12)
    assert c.labels == cst.make_square_qam(16).labels


def test_learnable_spacing_unequal_gaps_unit_power():
    c = cst.make_learnable_spacing(16, gaps=[1.0, 3.0, 1.0])
    assert abs(np.mean(np.sum(c.points**2, 1)) - 1.0) <= 1e-6
    lv = np.unique(np.round(c.points[:, 0], 12))
    assert abs((lv[2] - lv[1]) / (lv[1] - lv[0]) - 3.0) < 1e-9


@pytest.mark.parametrize("s", [0.0, -1.0])
def test_learnable_spacing_rejects_nonpositive(s):
    with pytest.raises(ConfigurationError):
        cst.make_learnable_spacing(16, s)


def test_grid_points_from_gaps_differentiable():
    g = torch.tensor([1.0, 2.0, 1.0], dtype=torch.float64, requires_grad=True)
    pts = cst.grid_points_from_gaps(g)
    assert torch.allclose(torch.mean(torch.sum(pts**2, -1)), torch.tensor(1.0, dtype=torch.float64))
    pts[5, 0].backward()
    assert torch.isfinite(g.grad).all() and g.grad.abs().sum() > 0


# ---------------------------------------------------------------- nearest point / demod

def test_nearest_point_examples():
    c = cst.make_square_qam(4)
    s = 1 / math.sqrt(2)
    i = cst.nearest_point(c, (1.0, 1.0))
    np.testing.assert_allclose(c.points[i], [s, s])
    assert cst.nearest_point(c, (0.0, 0.0)) == 0


@pytest.mark.parametrize("m", [4, 16, 64])
def test_nearest_matches_brute_force(m):
    c = cst.make_square_qam(m)
    rng = np.random.default_rng(m)
    q = rng.normal(scale=1.2, size=(2000, 2))
    got = cst.nearest_indices(q, c.points)
    assert [brute_nearest(p, c.points) for p in q] == got.tolist()
    got_t = cst.nearest_indices(torch.as_tensor(q), c.points)
    assert got_t.tolist() == got.tolist()


def test_demodulate_ml_noiseless():
    c = cst.make_square_qam(16)
    idx = np.random.default_rng(0).integers(0, 16, 500)
    assert cst.demodulate(c, c.points[idx]).tolist() == idx.tolist()


def test_map_uniform_priors_equals_ml():
    c = cst.make_square_qam(16)
    y = np.random.default_rng(1).normal(size=(3000, 2))
    ml = cst.demodulate(c, y)
    mp = cst.demodulate(c, y, rule="map", priors=np.full(16, 1 / 16), noise_var=0.3)
    assert ml.tolist() == mp.tolist()


def test_map_skewed_priors_brute_force():
    c = cst.make_square_qam(4)
    priors = np.full(4, 0.01)
    priors[3] = 0.97
    nv = 1.0
    y = np.random.default_rng(2).normal(scale=1.5, size=(2000, 2))
    got = cst.demodulate(c, y, rule="map", priors=priors, noise_var=nv)
    expect = []
    for p in y:
        post = [math.log(priors[j]) - ((p[0] - c.points[j][0]) ** 2 + (p[1] - c.points[j][1]) ** 2) / nv for j in range(4)]
        expect.append(int(np.argmax(post)))
    assert got.tolist() == expect
    ml = cst.demodulate(c, y)
    flipped = got != ml
    assert flipped.any() and np.all(got[flipped] == 3)


@pytest.mark.parametrize("priors", [np.ones(4), np.array([0.5, 0.5, 0.5, -0.5]), np.ones(3) / 3])
def test_map_rejects_bad_priors(priors):
    with pytest.raises(ConfigurationError):
        cst.demodulate(cst.make_square_qam(4), np.zeros((1, 2)), rule="map", priors=priors, noise_var=1.0)


# ---------------------------------------------------------------- bits

def test_symbols_to_bits_example():
    c = cst.make_square_qam(4)
    assert c.labels[0] == "00" and c.labels[1] == "01"
    assert cst.symbols_to_bits(c, [0, 1]) == "0001"
    assert cst.symbols_to_bits(c, []) == "" and cst.bits_to_symbols(c, "") == []


@given(st.lists(st.integers(0, 63), max_size=1000))
@settings(max_examples=50, deadline=None)
def test_bits_roundtrip(seq):
    c = cst.make_square_qam(64)
    assert cst.bits_to_symbols(c, cst.symbols_to_bits(c, seq)) == seq
    assert cst.bits_to_indices(c, cst.indices_to_bits(c, seq)).tolist() == seq


def test_bits_framing_errors():
    c = cst.make_square_qam(16)
    with pytest.raises(FramingError):
        cst.bits_to_symbols(c, "101")
    with pytest.raises(FramingError):
        cst.bits_to_indices(c, [1, 0, 1])


def test_soft_bits_half_is_centroid():
    c = cst.make_square_qam(16)
    np.testing.assert_allclose(cst.soft_bits_to_points(c, np.full(4, 0.5)), [[0.0, 0.0]], atol=1e-12)
    hard = cst.indices_to_bits(c, [7]).astype(float)
    np.testing.assert_allclose(cst.soft_bits_to_points(c, hard)[0], c.points[7], atol=1e-12)


def test_pair_iq_rejects_odd():
    with pytest.raises(FramingError):
        cst.pair_iq(np.zeros(5))


def test_pair_iq_roundtrip_and_power():
    v = np.random.default_rng(3).normal(size=(4, 64))
    v = v * np.sqrt(64 / np.sum(v**2, -1, keepdims=True))
    s = cst.pair_iq(v)
    assert s.shape == (4, 32, 2)
    np.testing.assert_allclose(np.mean(np.sum(s**2, -1), -1), 1.0, atol=1e-12)
    np.testing.assert_allclose(cst.unpair_iq(s), v, atol=1e-12)


# ---------------------------------------------------------------- K-means

def blobs(seed=0, n=400, sigma=0.1):
    rng = np.random.default_rng(seed)
    centres = np.array([[2, 2], [-2, 2], [-2, -2], [2, -2]], dtype=float)
    return centres, np.concatenate([c + sigma * rng.standard_normal((n, 2)) for c in centres])


def test_kmeans_recovers_blobs():
    centres, x = blobs()
    res = cst.lloyd_kmeans(x, 4, seed=0)
    for c in centres:
        assert np.min(np.linalg.norm(res.centroids - c, axis=1)) < 0.05


def test_kmeans_objective_monotone():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3000, 2))
    for seed in range(5):
        obj = cst.lloyd_kmeans(x, 16, seed=seed).objective
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(obj, obj[1:]))


def test_kmeans_bank_of_m_points():
    pts = np.random.default_rng(7).normal(size=(8, 2))
    c = cst.kmeans_constellation(pts, 8, seed=0, min_bank_factor=1)
    expect = cst.normalize_points(pts)
    got = sorted(map(tuple, np.round(c.points, 9)))
    assert got == sorted(map(tuple, np.round(expect, 9)))


def test_kmeans_deterministic_and_unit_power():
    _, x = blobs(1)
    a = cst.kmeans_constellation(x, 4, seed=3)
    b = cst.kmeans_constellation(x, 4, seed=3)
    assert a == b and a.kind == "irregular"
    assert abs(np.mean(np.sum(a.points**2, 1)) - 1) <= 1e-6


def test_kmeans_bank_too_small():
    with pytest.raises(ConfigurationError):
        cst.kmeans_constellation(np.zeros((20, 2)), 4)


def test_kmeans_empty_cluster_reseeded():
    # 3 distinct locations, 4 clusters: one cluster must be re-seeded
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 10, axis=0)
    x = np.concatenate([x, [[5.0, 5.0]]])
    res = cst.lloyd_kmeans(x, 4, seed=0)
    assert np.all(np.isfinite(res.centroids))
    assert len(np.unique(np.round(res.centroids, 9), axis=0)) == 4


def test_irregular_labels_sorted_by_angle():
    c = cst.kmeans_constellation(blobs(2)[1], 4, seed=0)
    ang = np.mod(np.arctan2(c.points[:, 1], c.points[:, 0]), 2 * np.pi)
    assert np.all(np.diff(ang) >= 0)
    assert c.labels == ("00", "01", "10", "11")


# ---------------------------------------------------------------- files

def test_constellation_file_roundtrip(tmp_path):
    c = cst.kmeans_constellation(blobs(3)[1], 4, seed=1)
    p = cst.save_constellation(c, tmp_path / "a" / "c.json")
    assert cst.load_constellation(p) == c
    d = json.loads(p.read_text())
    assert d["format"] == "digisc-constellation" and d["version"] == 1
    with pytest.raises(MissingFileError):
        cst.load_constellation(tmp_path / "nope.json")
    d["version"] = 99
    with pytest.raises(ConfigurationError):
        cst.constellation_from_dict(d)
