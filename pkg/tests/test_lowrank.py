import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcbandit.lowrank import (
    DegenerateFactorError,
    FactorPair,
    RankError,
    ThinSvd,
    balanced_factorize,
    incoherence,
    rank_r_project,
    rebalance_fast,
    tangent_project,
    truncated_svd,
)
from oracles import brute_force_rank1_best, complement_tangent_project, dense_rebalance, dense_truncate


def rel_max(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


# --- balanced_factorize / rank_r_project --------------------------------------------------

def test_diagonal_factorization():
    pair = balanced_factorize(np.diag([3.0, 2.0, 0.0]), 2)
    expected = np.array([[np.sqrt(3), 0], [0, np.sqrt(2)], [0, 0]])
    # singular vectors are defined up to sign; fix signs column-wise
    signs = np.sign(pair.u[[0, 1], [0, 1]])
    np.testing.assert_allclose(pair.u * signs, expected, atol=1e-14)
    np.testing.assert_allclose(pair.v * signs, expected, atol=1e-14)


def test_zero_matrix_gives_zero_factors():
    pair = balanced_factorize(np.zeros((4, 3)), 1)
    assert not pair.u.any() and not pair.v.any()
    assert pair.balance_defect() == 0.0


def test_random_matches_dense_truncation(rng):
    m = rng.standard_normal((20, 15))
    pair = balanced_factorize(m, 4)
    assert np.linalg.norm(pair.product() - dense_truncate(m, 4)) < 1e-9
    proj, svd = rank_r_project(m, 4)
    assert np.linalg.norm(proj - dense_truncate(m, 4)) < 1e-9
    assert np.linalg.norm(svd.matrix() - proj) < 1e-9


def test_rank_r_project_examples_shared():
    proj, svd = rank_r_project(np.diag([3.0, 2.0, 0.0]), 2)
    np.testing.assert_allclose(proj, np.diag([3.0, 2.0, 0.0]), atol=1e-14)
    proj0, _ = rank_r_project(np.zeros((4, 3)), 1)
    assert not proj0.any()


def test_rank_errors():
    with pytest.raises(RankError):
        balanced_factorize(np.ones((3, 2)), 3)
    with pytest.raises(RankError):
        rank_r_project(np.ones((3, 2)), 0)
    with pytest.raises(ValueError):
        balanced_factorize(np.array([[1.0, np.nan], [0.0, 1.0]]), 1)


def test_thin_svd_invariants(rng):
    svd = truncated_svd(rng.standard_normal((25, 18)), 5)
    np.testing.assert_allclose(svd.left.T @ svd.left, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(svd.right.T @ svd.right, np.eye(5), atol=1e-10)
    assert np.all(np.diff(svd.singular_values) <= 0)
    assert svd.lambda_max >= svd.lambda_min > 0
    assert svd.condition_number == pytest.approx(svd.lambda_max / svd.lambda_min)


def test_rank_r_project_beats_brute_force_on_tiny_instances():
    grid = np.linspace(-2, 2, 9)
    gen = np.random.default_rng(7)
    for _ in range(5):
        m = gen.uniform(-2, 2, size=(3, 3))
        proj, _ = rank_r_project(m, 1)
        assert np.linalg.norm(proj - m) <= brute_force_rank1_best(m, grid) + 1e-12


# --- rebalance_fast -----------------------------------------------------------------------

def test_balanced_pair_is_a_fixed_point(rng):
    pair = balanced_factorize(rng.standard_normal((12, 9)), 3)
    out, clamped = rebalance_fast(pair)
    assert clamped == 0
    assert rel_max(out.product(), pair.product()) < 1e-13
    assert out.balance_defect() <= max(pair.balance_defect(), 1e-12 * np.linalg.norm(out.u.T @ out.u))


def test_scale_symmetry(rng):
    pair = balanced_factorize(rng.standard_normal((10, 8)), 2)
    skewed = FactorPair(2.0 * pair.u, 0.5 * pair.v)
    out, _ = rebalance_fast(skewed)
    assert rel_max(out.product(), pair.product()) < 1e-12
    assert out.balance_defect() <= 1e-8 * np.linalg.norm(out.u.T @ out.u)


def test_matches_dense_rebalancing(rng):
    u = rng.standard_normal((30, 3)) * np.array([5.0, 1.0, 0.2])
    v = rng.standard_normal((20, 3))
    out, _ = rebalance_fast(FactorPair(u, v))
    assert np.max(np.abs(out.product() - dense_rebalance(u, v))) < 1e-9


def test_strict_mode_flags_collapse():
    u = np.zeros((5, 2))
    u[:, 0] = 1.0
    v = np.ones((4, 2))
    out, clamped = rebalance_fast(FactorPair(u, v))
    assert clamped > 0
    assert np.all(np.isfinite(out.u)) and np.all(np.isfinite(out.v))
    with pytest.raises(DegenerateFactorError):
        rebalance_fast(FactorPair(u, v), strict=True)


def test_rebalance_rejects_non_finite():
    u = np.ones((3, 1))
    u[0, 0] = np.inf
    with pytest.raises(ValueError):
        rebalance_fast(FactorPair(u, np.ones((2, 1))))


@st.composite
def factor_pairs(draw):
    d1 = draw(st.integers(2, 12))
    d2 = draw(st.integers(2, 12))
    r = draw(st.integers(1, min(d1, d2, 4)))
    seed = draw(st.integers(0, 2**32 - 1))
    g = np.random.default_rng(seed)
    scale_u = draw(st.floats(1e-2, 1e2))
    scale_v = draw(st.floats(1e-2, 1e2))
    return FactorPair(scale_u * g.standard_normal((d1, r)), scale_v * g.standard_normal((d2, r)))


@settings(max_examples=300, deadline=None)
@given(factor_pairs())
def test_property_rebalance_keeps_product_and_balances(pair):
    out, clamped = rebalance_fast(pair)
    assert clamped == 0
    assert rel_max(out.product(), pair.product()) < 1e-10
    assert out.balance_defect() <= 1e-8 * np.linalg.norm(out.u.T @ out.u)
    assert np.all(np.isfinite(out.u)) and np.all(np.isfinite(out.v))


# --- tangent_project ----------------------------------------------------------------------

def _svd(rng, d1, d2, r):
    return truncated_svd(rng.standard_normal((d1, r)) @ rng.standard_normal((r, d2)), r)


def test_tangent_elements_are_fixed(rng):
    svd = _svd(rng, 8, 6, 2)
    q = np.outer(svd.left[:, 0], svd.right[:, 0])
    np.testing.assert_allclose(tangent_project(q, svd), q, atol=1e-12)


def test_normal_space_is_annihilated(rng):
    svd = _svd(rng, 8, 6, 2)
    q = complement_tangent_project(rng.standard_normal((8, 6)), svd.left, svd.right)
    normal = rng.standard_normal((8, 6))
    normal = normal - complement_tangent_project(normal, svd.left, svd.right)
    assert np.max(np.abs(svd.left.T @ normal)) < 1e-12 and np.max(np.abs(normal @ svd.right)) < 1e-12
    assert np.max(np.abs(tangent_project(normal, svd))) < 1e-12
    assert np.max(np.abs(tangent_project(q, svd) - q)) < 1e-12


def test_matches_explicit_complement(rng):
    svd = _svd(rng, 12, 12, 2)
    q = rng.standard_normal((12, 12))
    expected = complement_tangent_project(q, svd.left, svd.right)
    assert np.max(np.abs(tangent_project(q, svd) - expected)) < 1e-10


def test_tangent_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        tangent_project(np.zeros((3, 3)), _svd(rng, 4, 3, 1))


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 10), st.integers(2, 10), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_property_tangent_idempotent(d1, d2, r, seed):
    r = min(r, d1, d2)
    g = np.random.default_rng(seed)
    svd = _svd(g, d1, d2, r)
    q = g.standard_normal((d1, d2))
    once = tangent_project(q, svd)
    assert np.max(np.abs(tangent_project(once, svd) - once)) < 1e-10 * max(1.0, np.max(np.abs(q)))


# --- incoherence --------------------------------------------------------------------------

def test_identity_columns_are_maximally_spiky():
    d, r = 10, 2
    eye = np.eye(d)[:, :r]
    rep = incoherence(ThinSvd(eye, np.array([2.0, 1.0]), eye))
    assert rep.mu == pytest.approx(np.sqrt(d / r))


def test_flat_rows_give_unit_incoherence():
    d, r = 8, 2
    h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
    basis = np.vstack([h, h])[:, :r] / np.sqrt(d)
    rep = incoherence(ThinSvd(basis, np.array([1.0, 1.0]), basis))
    np.testing.assert_allclose(rep.row_norms_left, np.sqrt(r / d))
    assert rep.mu == pytest.approx(1.0)


def test_incoherence_matches_row_scan(rng):
    d, r = 100, 2
    left = np.linalg.qr(rng.standard_normal((d, r)))[0]
    right = np.linalg.qr(rng.standard_normal((d, r)))[0]
    rep = incoherence(ThinSvd(left, np.array([3.0, 1.0]), right))
    scan = 0.0
    for mat in (left, right):
        for row in mat:
            scan = max(scan, np.sqrt(d / r) * np.sqrt(sum(x * x for x in row)))
    assert rep.mu == pytest.approx(scan, rel=1e-12)
