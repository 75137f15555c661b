"""P1 finite-element assembly on :class:`~speclab.geometry.Mesh`.

Matrices are returned as ``scipy.sparse.csr_matrix`` restricted to the free
degrees of freedom.  They are assembled from the lower triangle and mirrored,
so ``A[i, j] == A[j, i]`` holds bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import AssemblyError
from .geometry import EdgeTag, Mesh

CONSTRAINED = -1

_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


@dataclass(frozen=True)
class DofMap:
    free_of_node: np.ndarray
    n_free: int

    @property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.free_of_node >= 0)

    def expand(self, u: np.ndarray) -> np.ndarray:
        """Free-DOF vector to nodal vector (zeros on constrained nodes)."""
        out = np.zeros(len(self.free_of_node))
        out[self.free_nodes] = u
        return out

    def restrict(self, nodal: np.ndarray) -> np.ndarray:
        return np.asarray(nodal, dtype=float)[self.free_nodes]


def make_dofmap(mesh: Mesh, all_free: bool = False, neumann_window: bool = True) -> DofMap:
    """Constrain every node lying on a DIRICHLET_OUTER or ARTIFICIAL edge.

    Nodes interior to SIGMA_NEUMANN edges stay free, which discretizes the
    space of functions vanishing on the boundary except on the window.  With
    ``neumann_window=False`` the window is clamped too, giving the unperturbed
    Dirichlet problem on the same grid.
    """
    n = mesh.n_nodes
    fixed = np.zeros(n, dtype=bool)
    if not all_free:
        tags = [EdgeTag.DIRICHLET_OUTER, EdgeTag.ARTIFICIAL]
        if not neumann_window:
            tags.append(EdgeTag.SIGMA_NEUMANN)
        for tag in tags:
            fixed[mesh.tagged(tag).ravel()] = True
    free_of_node = np.full(n, CONSTRAINED, dtype=np.int64)
    free_of_node[~fixed] = np.arange(int((~fixed).sum()))
    return DofMap(free_of_node=free_of_node, n_free=int((~fixed).sum()))


def _check(mesh: Mesh, dofmap: DofMap):
    if len(dofmap.free_of_node) != mesh.n_nodes:
        raise AssemblyError("dofmap does not match the mesh", code="DOFMAP_MISMATCH")


def _symmetric_from_lower(rows, cols, vals, n):
    """Sum contributions into the lower triangle, then mirror exactly."""
    lo = np.maximum(rows, cols)
    hi = np.minimum(rows, cols)
    T = sp.coo_matrix((vals, (lo, hi)), shape=(n, n)).tocsr()
    T.sum_duplicates()
    D = sp.diags(T.diagonal())
    A = (T + T.T - D).tocsr()
    A.sort_indices()
    return A


def _assemble(mesh, dofmap, local):
    """local: (n_tri, 3, 3) element matrices."""
    _check(mesh, dofmap)
    dof = dofmap.free_of_node[mesh.triangles]
    r = np.repeat(dof[:, :, None], 3, axis=2)
    c = np.repeat(dof[:, None, :], 3, axis=1)
    # each unordered pair once: a >= b in local numbering
    a_idx, b_idx = np.tril_indices(3)
    r = r[:, a_idx, b_idx].ravel()
    c = c[:, a_idx, b_idx].ravel()
    v = local[:, a_idx, b_idx].ravel()
    keep = (r >= 0) & (c >= 0)
    return _symmetric_from_lower(r[keep], c[keep], v[keep], dofmap.n_free)


def p1_gradients(mesh: Mesh):
    """Barycentric gradients (n_tri, 3, 2) and areas (n_tri,)."""
    p = mesh.nodes[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    g = np.empty(p.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (y[:, j] - y[:, k]) / (2 * area)
        g[:, i, 1] = (x[:, k] - x[:, j]) / (2 * area)
    return g, area


def assemble_stiffness(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    g, area = p1_gradients(mesh)
    local = area[:, None, None] * np.einsum("tik,tjk->tij", g, g)
    return _assemble(mesh, dofmap, local)


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    _, area = p1_gradients(mesh)
    local = area[:, None, None] * _MASS_REF[None]
    return _assemble(mesh, dofmap, local)


def _sigma_edges(mesh: Mesh, tags):
    e = np.vstack([mesh.tagged(t) for t in tags]) if tags else np.zeros((0, 2), int)
    if len(e) == 0:
        raise AssemblyError("mesh has no Sigma edges", code="SIGMA_MISSING")
    return e


SIGMA_TAGS = (EdgeTag.SIGMA_INTERFACE, EdgeTag.SIGMA_NEUMANN)


def assemble_sigma_load(mesh: Mesh, dofmap: DofMap, dfdxd: Callable[[np.ndarray], np.ndarray],
                        tags=SIGMA_TAGS) -> np.ndarray:
    """b_i = integral over the Sigma edges of phi_i * dfdxd(x), 2-point Gauss.

    ``dfdxd`` is evaluated at the x-coordinates of the Gauss points (Sigma lies
    on y = 0).  For the Neumann window the same vector discretizes
    ``-int phi df/dnu`` since the outward normal there is (0, -1).
    """
    _check(mesh, dofmap)
    e = _sigma_edges(mesh, [t for t in tags if len(mesh.tagged(t))])
    p, q = mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]]
    length = np.linalg.norm(q - p, axis=1)
    b = np.zeros(mesh.n_nodes)
    for t in _GAUSS2:
        x = (1 - t) * p[:, 0] + t * q[:, 0]
        f = np.asarray(dfdxd(x), dtype=float) * np.ones_like(x)
        w = 0.5 * length * f
        np.add.at(b, e[:, 0], w * (1 - t))
        np.add.at(b, e[:, 1], w * t)
    return dofmap.restrict(b)


def assemble_boundary_mass(mesh: Mesh, dofmap: DofMap, tag: EdgeTag = EdgeTag.SIGMA_NEUMANN) -> sp.csr_matrix:
    """Consistent 1D mass ``length/6 [[2, 1], [1, 2]]`` on the edges with ``tag``."""
    _check(mesh, dofmap)
    e = mesh.tagged(tag)
    if len(e) == 0:
        raise AssemblyError(f"no edges tagged {EdgeTag(tag).name}", code="SIGMA_MISSING")
    length = np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    dof = dofmap.free_of_node[e]
    r = np.concatenate([dof[:, 0], dof[:, 1], dof[:, 1]])
    c = np.concatenate([dof[:, 0], dof[:, 1], dof[:, 0]])
    v = np.concatenate([length / 3, length / 3, length / 6])
    keep = (r >= 0) & (c >= 0)
    return _symmetric_from_lower(r[keep], c[keep], v[keep], dofmap.n_free)


class OneSidedTrace:
    """y-derivative of a P1 field on Sigma, taken from the triangles above y = 0.

    Callable on x-coordinates; returns the constant value of the Sigma edge
    that contains each point (one Omega-side triangle per edge).
    """

    def __init__(self, mesh: Mesh, nodal: np.ndarray, tags=SIGMA_TAGS):
        e = _sigma_edges(mesh, [t for t in tags if len(mesh.tagged(t))])
        g, _ = p1_gradients(mesh)
        grad = np.einsum("ti,tik->tk", np.asarray(nodal)[mesh.triangles], g)
        tri = mesh.triangles
        ty = mesh.nodes[tri][:, :, 1]
        cand = np.flatnonzero((ty.mean(axis=1) > 0) & ((ty == 0.0).sum(axis=1) >= 2))
        key = {}
        for t in cand:
            a, b, c = tri[t]
            for u, v in ((a, b), (b, c), (c, a)):
                key[(min(u, v), max(u, v))] = t
        xl = np.minimum(mesh.nodes[e[:, 0], 0], mesh.nodes[e[:, 1], 0])
        xr = np.maximum(mesh.nodes[e[:, 0], 0], mesh.nodes[e[:, 1], 0])
        vals = np.array([grad[key[(min(u, v), max(u, v))], 1] for u, v in e])
        order = np.argsort(xl)
        self.xl, self.xr, self.values = xl[order], xr[order], vals[order]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(self.xl, x, side="right") - 1, 0, len(self.xl) - 1)
        return self.values[i]


class P1Evaluator:
    """Point evaluation of P1 fields on a fixed mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        self._p = p
        self._tree = cKDTree(p.mean(axis=1))
        self._rmax = float(np.linalg.norm(p - p.mean(axis=1)[:, None, :], axis=2).max())

    def locate(self, pts: np.ndarray):
        """Triangle index and barycentric coordinates; index -1 outside the mesh."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri = np.full(len(pts), -1)
        bary = np.zeros((len(pts), 3))
        tol = 1e-12
        for k, x in enumerate(pts):
            cand = self._tree.query_ball_point(x, self._rmax * (1 + 1e-9))
            for t in cand:
                lam = _barycentric(self._p[t], x)
                if lam.min() >= -tol:
                    tri[k], bary[k] = t, lam
                    break
        return tri, bary

    def __call__(self, nodal: np.ndarray, pts: np.ndarray, outside=np.nan) -> np.ndarray:
        tri, bary = self.locate(pts)
        vals = np.full(len(tri), outside, dtype=float)
        ok = tri >= 0
        vals[ok] = np.einsum("ki,ki->k", np.asarray(nodal)[self.mesh.triangles[tri[ok]]], bary[ok])
        return vals


def _barycentric(p, x):
    T = np.array([[p[1, 0] - p[0, 0], p[2, 0] - p[0, 0]], [p[1, 1] - p[0, 1], p[2, 1] - p[0, 1]]])
    l12 = np.linalg.solve(T, x - p[0])
    return np.array([1 - l12.sum(), l12[0], l12[1]])


def transfer(src: Mesh, nodal: np.ndarray, dst: Mesh) -> np.ndarray:
    """Nodal interpolation of a P1 field onto ``dst``; zero outside ``src``.

    Destination nodes that coincide with source nodes copy the value exactly.
    """
    out = np.zeros(dst.n_nodes)
    index = {tuple(p): i for i, p in enumerate(src.nodes.tolist())}
    miss = []
    for j, p in enumerate(dst.nodes.tolist()):
        i = index.get(tuple(p))
        if i is None:
            miss.append(j)
        else:
            out[j] = nodal[i]
    if miss:
        vals = P1Evaluator(src)(nodal, dst.nodes[miss], outside=0.0)
        out[miss] = vals
    return out


def write_matrix_market(A: sp.spmatrix, path) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), precision=17, symmetry="general")
