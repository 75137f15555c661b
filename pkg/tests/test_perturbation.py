import math

import numpy as np
import pytest

from speclab.errors import PerturbationError
from speclab.fem import assemble_mass, make_dofmap
from speclab.geometry import DomainSpec, MeshParams, Mode, build_mixed_domain, refine
from speclab.perturbation import (EigenspaceBasis, RateFit, best_approx_check, bessel_j, fit_rate,
                                  gap_lemma_check, local_expansion, order_decompose, richardson)
from speclab.pipeline import square_eigenfunction
from speclab.runner import square_order

RADII = (0.1, 0.2, 0.3, 0.4)


@pytest.fixture(scope="module")
def fine_square():
    return refine(build_mixed_domain(DomainSpec(Mode.MIXED, 0.0), MeshParams(1 / 16, 0)))


def _nodal(mesh, j, k):
    x, y = mesh.nodes.T
    return square_eigenfunction(j, k)(x, y)


def _orthonormal_basis(mesh, pairs, lam):
    V = np.column_stack([_nodal(mesh, j, k) for j, k in pairs])
    dm = make_dofmap(mesh)
    W = V[dm.free_nodes]
    L = np.linalg.cholesky(W.T @ (assemble_mass(mesh, dm) @ W))
    return EigenspaceBasis(lam, V @ np.linalg.inv(L).T, mesh)


def test_bessel_against_tabulated():
    assert bessel_j(0, 1.0) == pytest.approx(0.7651976865579666, rel=1e-14)
    assert bessel_j(1, 2.5) == pytest.approx(0.4970941024642741, rel=1e-13)
    assert bessel_j(3, 0.0) == 0.0


@pytest.mark.parametrize("j,k", [(1, 1), (1, 2), (2, 1), (3, 1), (2, 2)])
def test_local_expansion_leading_coefficient(fine_square, j, k):
    order, a = square_order(j, k)
    lam = math.pi ** 2 * (j * j + k * k)
    le = local_expansion(fine_square, _nodal(fine_square, j, k), lam, RADII)
    assert le.coefficients[order - 1] == pytest.approx(a, rel=0.02)
    # lower orders vanish, and the even/odd split is exact by symmetry
    assert np.all(np.abs(le.coefficients[:order - 1]) < 1e-10)
    other = 2 if order == 1 else 1
    assert abs(le.coefficients[other - 1]) < 1e-10


def test_local_expansion_needs_three_radii(fine_square):
    with pytest.raises(PerturbationError) as e:
        local_expansion(fine_square, _nodal(fine_square, 1, 1), 2 * math.pi ** 2, (0.1, 0.2))
    assert e.value.code == "BAD_RADII"


def test_local_expansion_radius_outside(fine_square):
    with pytest.raises(PerturbationError) as e:
        local_expansion(fine_square, _nodal(fine_square, 1, 1), 2 * math.pi ** 2, (0.1, 0.3, 0.7))
    assert e.value.code == "RADIUS_OOB"


def test_basis_validation(fine_square):
    b = _orthonormal_basis(fine_square, [(1, 2), (2, 1)], 5 * math.pi ** 2)
    assert b.validate() < 1e-12
    with pytest.raises(PerturbationError):
        EigenspaceBasis(1.0, b.vectors * 2, fine_square).validate()
    with pytest.raises(PerturbationError):
        EigenspaceBasis(1.0, np.ones(7), fine_square)


@pytest.fixture(scope="module")
def cluster(fine_square):
    return _orthonormal_basis(fine_square, [(1, 2), (2, 1)], 5 * math.pi ** 2)


def test_order_decompose_splits_cluster(cluster):
    d = order_decompose(cluster, RADII)
    assert d.orders == [1, 2]
    assert abs(d.leading[0][0]) == pytest.approx(4 * math.pi, rel=0.02)
    assert abs(d.leading[1][0]) == pytest.approx(2 * math.pi ** 2, rel=0.02)
    # mixing blocks are orthonormal in coefficient space
    C = np.column_stack(d.mixing)
    assert C.T @ C == pytest.approx(np.eye(2), abs=1e-12)


@pytest.mark.parametrize("theta", [0.3, 1.1, 2.5])
def test_order_decompose_rotation_invariant(cluster, theta):
    base = order_decompose(cluster, RADII)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    rot = order_decompose(cluster.rotated(R), RADII)
    assert rot.orders == base.orders
    for a, b in zip(base.leading, rot.leading):
        assert np.abs(a) == pytest.approx(np.abs(b), rel=1e-9)


def test_order_unresolved(cluster):
    with pytest.raises(PerturbationError) as e:
        order_decompose(cluster, RADII, K_max=1)
    assert e.value.code == "ORDER_UNRESOLVED"


# ---------------------------------------------------------------- gap lemma

def test_gap_lemma_worked_example():
    Q = np.diag([-5.0, -0.1, 0.05, 4.0])
    F = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.02, 0.01]])
    rep = gap_lemma_check(Q, F, N=2, m=2)
    assert rep.gamma == 4.0
    assert rep.nu == pytest.approx([-0.1, 0.05])
    assert rep.h1 and rep.passed
    assert np.max(rep.errors_i) <= rep.bound_i
    assert rep.projection_distance <= rep.bound_ii
    assert len(rep.csv_row()) == len(rep.CSV_HEADER)


def test_gap_lemma_exact_invariant_subspace():
    rng = np.random.default_rng(3)
    W, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    nu = np.array([-3.0, -2.0, 0.01, -0.02, 2.5, 4.0])
    Q = (W * nu) @ W.T
    rep = gap_lemma_check(Q, W[:, [2, 3]], N=3, m=2)
    assert rep.gamma == pytest.approx(2.0)
    assert rep.delta_complement < 1e-12
    assert rep.projection_distance < 1e-12
    assert np.max(rep.errors_i) < 1e-12


def test_gap_lemma_no_gap():
    Q = np.diag([-1.0, 0.0, 0.0, 1.0])
    with pytest.raises(PerturbationError) as e:
        gap_lemma_check(Q, np.eye(4)[:, [1]], N=1, m=1)
    assert e.value.code == "H2_FAIL"


def test_gap_lemma_bad_model():
    with pytest.raises(PerturbationError) as e:
        gap_lemma_check(np.eye(3), np.ones((3, 2)), N=1, m=1)
    assert e.value.code == "BAD_MODEL"


# ---------------------------------------------------------------- fitting

def test_fit_rate_exact_power():
    eps = [0.3, 0.2, 0.15, 0.1, 0.05]
    f = fit_rate([(e, 3 * e ** 2) for e in eps], pinned_slope=2)
    assert f.slope == pytest.approx(2, abs=1e-12)
    assert f.constant == pytest.approx(3, rel=1e-12)
    assert f.pinned_constant == pytest.approx(3, rel=1e-12)
    assert f.rms < 1e-12 and not f.excluded


def test_fit_rate_higher_order_term_bends_slope_up():
    eps = [0.3, 0.2, 0.15, 0.1, 0.05]
    f = fit_rate([(e, 3 * e ** 2 + e ** 4) for e in eps])
    assert 2 < f.slope < 2.1


def test_fit_rate_floor_excludes():
    recs = [(0.4, 1.6e-1), (0.2, 4e-2), (0.1, 1e-2), (0.05, 2.5e-3)]
    f = fit_rate(recs, signal_floor=[0, 0, 0, 1e-2])
    assert len(f.eps_used) == 3 and f.excluded[0]["epsilon"] == 0.05
    with pytest.raises(PerturbationError) as e:
        fit_rate(recs, signal_floor=0.02)
    assert e.value.code == "FIT_UNDERDETERMINED"


def test_fit_csv_row():
    f = fit_rate([(e, e ** 4) for e in (0.4, 0.2, 0.1)], pinned_slope=4)
    assert len(f.csv_row()) == len(RateFit.CSV_HEADER)
    assert f.to_dict()["pinned_constant"] == pytest.approx(1.0)


def test_richardson_removes_h2():
    exact, c = 19.7392, 3.7
    v, err = richardson(exact + c * 0.1 ** 2, exact + c * 0.05 ** 2)
    assert v == pytest.approx(exact, rel=1e-14)
    assert err == pytest.approx(c * (0.01 - 0.0025) / 3)
    v4, _ = richardson(exact + c * 0.1 ** 4, exact + c * 0.05 ** 4, order=4)
    assert v4 == pytest.approx(exact, rel=1e-14)


def test_best_approx_check():
    M = np.eye(3)
    phi = np.array([1.0, 0.0, 0.0])
    u = np.array([0.9, 0.1, 0.0])
    ok = best_approx_check(phi, u, 20.0, 19.0, 0.01, M)
    assert ok.rhs == pytest.approx(0.81) and ok.lhs == pytest.approx(0.19) and not ok.ok
    assert best_approx_check(phi, u, 20.0, 19.9, 0.01, M).ok
