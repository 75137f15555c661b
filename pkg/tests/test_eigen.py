import json
import math

import numpy as np
import pytest
import scipy.linalg as sla

from speclab.eigen import count_below, eigs_smallest, start_vector, steklov_smallest
from speclab.errors import SolverError
from speclab.fem import assemble_boundary_mass, assemble_mass, assemble_stiffness, make_dofmap
from speclab.geometry import DomainSpec, EdgeTag, MeshParams, Mode, build_mixed_domain, refine

L1, L2 = 2 * math.pi ** 2, 5 * math.pi ** 2


@pytest.fixture(scope="module")
def square_levels(square_mesh):
    out, mesh = [], square_mesh
    for _ in range(3):
        dm = make_dofmap(mesh)
        K, M = assemble_stiffness(mesh, dm), assemble_mass(mesh, dm)
        out.append((K, M, eigs_smallest(K, M, 3)))
        mesh = refine(mesh)
    return out


def test_square_spectrum_converges_from_above(square_levels):
    vals = np.array([r.values for _, _, r in square_levels])
    exact = np.array([L1, L2, L2])
    err = vals - exact
    assert np.all(err > 0)
    assert np.all(np.diff(err, axis=0) < 0)
    ratio = err[1] / err[2]
    assert np.all(np.abs(ratio - 4) < 0.4)
    assert vals[-1] == pytest.approx(exact, rel=2e-3)


def test_orthonormal_and_residuals(square_levels):
    K, M, r = square_levels[-1]
    G = r.vectors.T @ (M @ r.vectors)
    assert np.abs(G - np.eye(3)).max() < 1e-10
    assert r.residuals.max() <= 1e-10
    assert np.all(np.diff(r.values) >= 0)


def test_cluster_split_below_discretization_error(square_levels):
    _, _, r = square_levels[-1]
    assert r.values[2] - r.values[1] < r.values[1] - L2


def test_matches_dense(square_levels):
    K, M, r = square_levels[0]
    ref = sla.eigh(K.toarray(), M.toarray(), eigvals_only=True, subset_by_index=[0, 2])
    assert np.allclose(r.values, ref, rtol=1e-11)


def test_deterministic(square_levels):
    K, M, r = square_levels[1]
    again = eigs_smallest(K, M, 3)
    assert np.array_equal(again.values, r.values)
    assert np.array_equal(again.vectors, r.vectors)


def test_seed_changes_start_only(square_levels):
    K, M, r = square_levels[0]
    other = eigs_smallest(K, M, 3, seed=7)
    assert np.allclose(other.values, r.values, rtol=1e-11)
    assert not np.array_equal(start_vector(10, 0), start_vector(10, 7))


def test_shifted_inertia(square_levels):
    K, M, r = square_levels[0]
    sigma = 60.0
    res = eigs_smallest(K, M, 2, shift=sigma)
    dense = sla.eigh(K.toarray(), M.toarray(), eigvals_only=True)
    near = np.sort(dense[np.argsort(np.abs(dense - sigma))[:2]])
    assert np.allclose(res.values, near, rtol=1e-10)
    assert count_below(K, M, sigma) == int((dense < sigma).sum()) == 3


def test_diagnostics_json_lines(square_levels):
    _, _, r = square_levels[0]
    lines = r.diagnostics_jsonl().splitlines()
    assert len(lines) == r.iterations
    rec = json.loads(lines[-1])
    assert set(rec) == {"phase", "iteration", "residual", "ritz_values"}


@pytest.mark.parametrize("eps", [0.2, 0.1])
def test_domain_monotonicity(eps):
    # the square grid is a sub-grid of the tube grid, so the inclusion is exact discretely
    p = MeshParams(eps / 4, 3, h_far=0.05)
    base = build_mixed_domain(DomainSpec(Mode.MIXED, eps), p)
    from speclab.geometry import build_perturbed_domain
    tube = build_perturbed_domain(DomainSpec(Mode.TUBE, eps), p)
    d0, d1 = make_dofmap(base, neumann_window=False), make_dofmap(tube)
    l0 = eigs_smallest(assemble_stiffness(base, d0), assemble_mass(base, d0), 1).values[0]
    l1 = eigs_smallest(assemble_stiffness(tube, d1), assemble_mass(tube, d1), 1).values[0]
    assert l1 < l0


def test_bad_count(square_levels):
    K, M, _ = square_levels[0]
    with pytest.raises(SolverError) as exc:
        eigs_smallest(K, M, 0)
    assert exc.value.code == "BAD_COUNT"


def test_no_convergence_reports_partial(square_levels):
    K, M, _ = square_levels[0]
    with pytest.raises(SolverError) as exc:
        eigs_smallest(K, M, 3, max_iter=4)
    assert exc.value.code == "NO_CONVERGENCE"
    assert "residuals" in exc.value.details


# ---------------------------------------------------------------- Steklov

def _steklov_system(eps, h=0.05):
    mesh = build_mixed_domain(DomainSpec(Mode.MIXED, eps), MeshParams(h, 2, h_far=0.1))
    dm = make_dofmap(mesh)
    return mesh, dm, assemble_stiffness(mesh, dm), assemble_boundary_mass(mesh, dm, EdgeTag.SIGMA_NEUMANN)


def test_steklov_against_dense_schur():
    mesh, dm, K, B = _steklov_system(0.3)
    res = steklov_smallest(K, B)
    s = np.flatnonzero(B.diagonal() > 0)
    i = np.setdiff1d(np.arange(K.shape[0]), s)
    Kd = K.toarray()
    S = Kd[np.ix_(s, s)] - Kd[np.ix_(s, i)] @ np.linalg.solve(Kd[np.ix_(i, i)], Kd[np.ix_(i, s)])
    ref = sla.eigh(S, B.toarray()[np.ix_(s, s)], eigvals_only=True)[0]
    assert res.value == pytest.approx(ref, rel=1e-10)
    u = res.vector
    assert u @ (B @ u) == pytest.approx(1.0, rel=1e-12)
    assert (u @ (K @ u)) / (u @ (B @ u)) == pytest.approx(res.value, rel=1e-8)


def test_steklov_scaling():
    _, _, K, B = _steklov_system(0.3)
    a = steklov_smallest(K, B).value
    b = steklov_smallest(K, 3.0 * B).value
    assert b == pytest.approx(a / 3.0, rel=1e-9)


def test_steklov_decreases_with_window():
    s = [steklov_smallest(*_steklov_system(e, 0.025)[2:]).value for e in (0.2, 0.4)]
    assert s[1] < s[0]


def test_steklov_empty_sigma(square_system):
    _, _, K, M = square_system
    with pytest.raises(SolverError) as exc:
        steklov_smallest(K, 0 * M)
    assert exc.value.code == "EMPTY_SIGMA"
