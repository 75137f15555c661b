import math

import numpy as np
import pytest
import scipy.io

from speclab.errors import AssemblyError
from speclab.fem import (CONSTRAINED, OneSidedTrace, P1Evaluator, assemble_boundary_mass, assemble_mass,
                         assemble_sigma_load, assemble_stiffness, make_dofmap, transfer, write_matrix_market)
from speclab.geometry import (DomainSpec, EdgeTag, Mesh, MeshParams, Mode, build_mixed_domain,
                              build_perturbed_domain, refine)
from speclab.ldl import factorize


def unit_triangle():
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), np.zeros(3, dtype=np.int8))


def test_single_triangle_kernel():
    m = unit_triangle()
    K = assemble_stiffness(m, make_dofmap(m, all_free=True)).toarray()
    assert np.allclose(K.sum(axis=1), 0.0, atol=1e-15)
    assert np.allclose(K, [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    M = assemble_mass(m, make_dofmap(m, all_free=True)).toarray()
    assert M.sum() == pytest.approx(0.5)


def test_kernel_all_free(tube_mesh):
    K = assemble_stiffness(tube_mesh, make_dofmap(tube_mesh, all_free=True))
    assert np.abs(K @ np.ones(K.shape[0])).max() < 1e-12


@pytest.mark.parametrize("a,b,c", [(0.0, 1.0, 0.0), (2.0, -0.3, 1.7), (-1.0, 0.0, 4.0)])
def test_patch_test(tube_mesh, a, b, c):
    dm = make_dofmap(tube_mesh, all_free=True)
    K = assemble_stiffness(tube_mesh, dm)
    u = a + b * tube_mesh.nodes[:, 0] + c * tube_mesh.nodes[:, 1]
    assert u @ (K @ u) == pytest.approx((b * b + c * c) * 1.1, rel=1e-12)


def test_bitwise_symmetry(tube_mesh):
    dm = make_dofmap(tube_mesh)
    for A in (assemble_stiffness(tube_mesh, dm), assemble_mass(tube_mesh, dm)):
        assert (A != A.T).nnz == 0


def test_mass_totals(tube_mesh, square_mesh):
    for mesh, area in ((tube_mesh, 1.1), (square_mesh, 1.0)):
        M = assemble_mass(mesh, make_dofmap(mesh, all_free=True))
        one = np.ones(M.shape[0])
        assert one @ (M @ one) == pytest.approx(area, rel=1e-12)


def test_stiffness_positive_definite(square_system):
    _, _, K, M = square_system
    assert factorize(K).inertia == (0, 0, K.shape[0])
    assert factorize(M).inertia == (0, 0, M.shape[0])


def test_rayleigh_quotient_of_interpolant(square_mesh):
    vals = []
    mesh = square_mesh
    for _ in range(2):
        dm = make_dofmap(mesh)
        x, y = dm.restrict(mesh.nodes[:, 0]), dm.restrict(mesh.nodes[:, 1])
        u = np.sin(np.pi * (x + 0.5)) * np.sin(np.pi * y)
        K, M = assemble_stiffness(mesh, dm), assemble_mass(mesh, dm)
        vals.append((u @ (K @ u)) / (u @ (M @ u)))
        mesh = refine(mesh)
    err = [abs(v - 2 * math.pi ** 2) for v in vals]
    assert err[1] < err[0]
    assert err[0] / err[1] == pytest.approx(4.0, rel=0.1)


def test_dofmap_constraints(mixed_mesh):
    dm = make_dofmap(mixed_mesh)
    outer = np.unique(mixed_mesh.tagged(EdgeTag.DIRICHLET_OUTER))
    assert np.all(dm.free_of_node[outer] == CONSTRAINED)
    win = mixed_mesh.tagged(EdgeTag.SIGMA_NEUMANN)
    interior = np.setdiff1d(np.unique(win), outer)
    assert len(interior) > 0 and np.all(dm.free_of_node[interior] >= 0)
    closed = make_dofmap(mixed_mesh, neumann_window=False)
    assert np.all(closed.free_of_node[interior] == CONSTRAINED)
    u = np.arange(dm.n_free, dtype=float)
    assert np.array_equal(dm.restrict(dm.expand(u)), u)


def test_sigma_load_consistency(tube_mesh, mixed_mesh):
    for mesh, length in ((tube_mesh, 0.1), (mixed_mesh, 0.2)):
        # the window endpoints are constrained, so the partition of unity needs all nodes
        dm = make_dofmap(mesh, all_free=True)
        assert assemble_sigma_load(mesh, dm, lambda x: np.ones_like(x)).sum() == pytest.approx(length, rel=1e-12)
        assert np.all(assemble_sigma_load(mesh, dm, lambda x: 0.0 * x) == 0.0)
        assert abs(assemble_sigma_load(mesh, dm, lambda x: 2 * x).sum()) < 1e-15


def test_sigma_load_quadratic_exact(mixed_mesh):
    # int x^2 over (-0.1, 0.1) against the partition of unity
    dm = make_dofmap(mixed_mesh, all_free=True)
    b = assemble_sigma_load(mixed_mesh, dm, lambda x: x ** 2)
    assert b.sum() == pytest.approx(2 * 0.1 ** 3 / 3, rel=1e-12)


def test_sigma_load_support(tube_mesh):
    dm = make_dofmap(tube_mesh)
    b = dm.expand(assemble_sigma_load(tube_mesh, dm, lambda x: np.ones_like(x)))
    on_sigma = np.unique(tube_mesh.tagged(EdgeTag.SIGMA_INTERFACE))
    off = np.setdiff1d(np.arange(tube_mesh.n_nodes), on_sigma)
    assert np.all(b[off] == 0.0)


def test_sigma_missing(square_mesh):
    dm = make_dofmap(square_mesh)
    with pytest.raises(AssemblyError) as exc:
        assemble_sigma_load(square_mesh, dm, lambda x: x)
    assert exc.value.code == "SIGMA_MISSING"
    with pytest.raises(AssemblyError):
        assemble_boundary_mass(square_mesh, dm)


def test_boundary_mass(mixed_mesh):
    dm = make_dofmap(mixed_mesh, all_free=True)
    B = assemble_boundary_mass(mixed_mesh, dm)
    one = np.ones(B.shape[0])
    assert one @ (B @ one) == pytest.approx(0.2, rel=1e-12)
    on = np.unique(mixed_mesh.tagged(EdgeTag.SIGMA_NEUMANN))
    assert np.linalg.matrix_rank(B[on][:, on].toarray()) == len(on)
    w = np.linalg.eigvalsh(B[on][:, on].toarray())
    assert w.min() > 0
    p = MeshParams(0.0125, 3, h_far=0.05)
    small = build_mixed_domain(DomainSpec(Mode.MIXED, 0.1), p)
    big = build_mixed_domain(DomainSpec(Mode.MIXED, 0.2), p)
    tr = [assemble_boundary_mass(m, make_dofmap(m, all_free=True)).diagonal().sum() for m in (small, big)]
    assert tr[1] / tr[0] == pytest.approx(2.0, rel=0.05)


def test_one_sided_trace_linear_field(tube_mesh):
    # u = 3y + x on Omega, arbitrary in the tube: the y-gradient from above is 3
    nodal = 3 * tube_mesh.nodes[:, 1] + tube_mesh.nodes[:, 0]
    nodal = np.where(tube_mesh.nodes[:, 1] < 0, 7 * tube_mesh.nodes[:, 1] ** 2, nodal)
    tr = OneSidedTrace(tube_mesh, nodal)
    assert np.allclose(tr(np.linspace(-0.049, 0.049, 11)), 3.0, atol=1e-12)


def test_evaluator_and_transfer(tube_mesh, mixed_mesh):
    f = lambda p: 1.5 - 2 * p[:, 0] + 0.25 * p[:, 1]
    ev = P1Evaluator(mixed_mesh)
    pts = np.array([[0.1, 0.3], [-0.33, 0.77], [0.0, 0.0]])
    assert np.allclose(ev(f(mixed_mesh.nodes), pts), f(pts), atol=1e-13)
    assert np.isnan(ev(f(mixed_mesh.nodes), np.array([[0.0, -0.5]]))[0])
    moved = transfer(mixed_mesh, f(mixed_mesh.nodes), tube_mesh)
    inside = tube_mesh.nodes[:, 1] >= 0
    assert np.allclose(moved[inside], f(tube_mesh.nodes)[inside], atol=1e-12)
    assert np.all(moved[tube_mesh.nodes[:, 1] < 0] == 0.0)


def test_matrix_market_round_trip(tmp_path, square_system):
    _, _, K, _ = square_system
    path = tmp_path / "K.mtx"
    write_matrix_market(K, path)
    back = scipy.io.mmread(str(path)).tocsr()
    assert (back != K).nnz == 0
    first = path.read_text().splitlines()[0]
    assert first.startswith("%%MatrixMarket matrix coordinate real")


def test_dofmap_mismatch(tube_mesh, mixed_mesh):
    with pytest.raises(AssemblyError) as exc:
        assemble_stiffness(tube_mesh, make_dofmap(mixed_mesh))
    assert exc.value.code == "DOFMAP_MISMATCH"


def test_tube_mesh_area_identity():
    for eps in (0.2, 0.05):
        m = build_perturbed_domain(DomainSpec(Mode.TUBE, eps), MeshParams(eps / 4, 2, h_far=0.05))
        M = assemble_mass(m, make_dofmap(m, all_free=True))
        assert M.sum() == pytest.approx(1 + eps, rel=1e-12)
