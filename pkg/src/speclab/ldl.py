"""Sparse symmetric LDL^T factorization with a nested-dissection ordering.

The numeric kernel is the up-looking algorithm: elimination tree from a
symbolic pass, then row k of L from a sparse triangular solve along the
tree.  No pivoting is done, so indefinite matrices are accepted as long as no
pivot vanishes; the pivot signs then give the inertia.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .errors import SolverError

LEAF_SIZE = 96


@numba.njit(cache=True)
def _bfs(indptr, indices, active, stamp, start, level, queue):
    """BFS from ``start`` over nodes with active == stamp; returns visit count."""
    head, tail = 0, 1
    queue[0] = start
    level[start] = 0
    while head < tail:
        v = queue[head]
        head += 1
        for p in range(indptr[v], indptr[v + 1]):
            w = indices[p]
            if active[w] == stamp and level[w] < 0:
                level[w] = level[v] + 1
                queue[tail] = w
                tail += 1
    return tail


class _Graph:
    def __init__(self, A):
        A = sp.csr_matrix(A)
        G = (abs(A) + abs(A).T).tocsr()
        G.setdiag(0)
        G.eliminate_zeros()
        self.indptr = G.indptr.astype(np.int64)
        self.indices = G.indices.astype(np.int64)
        n = A.shape[0]
        self.active = np.full(n, -1, dtype=np.int64)
        self.level = np.full(n, -1, dtype=np.int64)
        self.queue = np.empty(n, dtype=np.int64)
        self.stamp = 0

    def bfs(self, nodes, start):
        self.level[nodes] = -1
        cnt = _bfs(self.indptr, self.indices, self.active, self.stamp, start, self.level, self.queue)
        return self.queue[:cnt].copy()


def nested_dissection(A, leaf_size: int = LEAF_SIZE) -> np.ndarray:
    """Fill-reducing permutation from recursive BFS level-set separators."""
    n = A.shape[0]
    g = _Graph(A)
    out = []
    # explicit stack; entries are (nodes, separator-to-append-after)
    stack = [("part", np.arange(n, dtype=np.int64))]
    while stack:
        kind, nodes = stack.pop()
        if kind == "sep":
            out.append(nodes)
            continue
        if len(nodes) <= leaf_size:
            out.append(nodes)
            continue
        g.stamp += 1
        g.active[nodes] = g.stamp
        reach = g.bfs(nodes, nodes[0])
        if len(reach) < len(nodes):
            rest = nodes[g.level[nodes] < 0]
            stack.append(("part", rest))
            stack.append(("part", reach))
            continue
        # pseudo-peripheral start: two sweeps
        for _ in range(2):
            far = reach[-1]
            reach = g.bfs(nodes, far)
        lev = g.level[reach]
        nlev = int(lev.max()) + 1
        if nlev < 3:
            out.append(nodes)
            continue
        counts = np.bincount(lev, minlength=nlev)
        before = np.cumsum(counts) - counts
        after = len(nodes) - before - counts
        lo = np.minimum(before, after)
        cand = np.arange(1, nlev - 1)
        ok = cand[lo[cand] >= 0.3 * len(nodes)]
        if len(ok) == 0:
            ok = cand[np.argsort(-lo[cand])[:1]]
        L = int(ok[np.argmin(counts[ok])])
        sep_mask = lev == L
        sep = reach[sep_mask]
        # shrink: separator nodes with no neighbour beyond the cut join the near side
        keep = np.ones(len(sep), dtype=bool)
        lvl = g.level
        for k, v in enumerate(sep):
            nb = g.indices[g.indptr[v]:g.indptr[v + 1]]
            nb = nb[g.active[nb] == g.stamp]
            if not np.any(lvl[nb] > L):
                keep[k] = False
        near = np.concatenate([reach[lev < L], sep[~keep]])
        far_part = reach[lev > L]
        sep = sep[keep]
        stack.append(("sep", sep))
        stack.append(("part", far_part))
        stack.append(("part", near))
    perm = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
    if len(perm) != n or len(np.unique(perm)) != n:
        raise SolverError("ordering is not a permutation", code="ORDERING_FAILED")
    return perm


@numba.njit(cache=True)
def _symbolic(n, Ap, Ai, P, Pinv, Parent, Lnz, Flag):
    for k in range(n):
        Parent[k] = -1
        Flag[k] = k
        Lnz[k] = 0
        kk = P[k]
        for p in range(Ap[kk], Ap[kk + 1]):
            i = Pinv[Ai[p]]
            if i < k:
                while Flag[i] != k:
                    if Parent[i] == -1:
                        Parent[i] = k
                    Lnz[i] += 1
                    Flag[i] = k
                    i = Parent[i]


@numba.njit(cache=True)
def _numeric(n, Ap, Ai, Ax, P, Pinv, Lp, Parent, Lnz, Li, Lx, D, Y, Pattern, Flag, tiny):
    for k in range(n):
        Y[k] = 0.0
        top = n
        Flag[k] = k
        Lnz[k] = 0
        kk = P[k]
        for p in range(Ap[kk], Ap[kk + 1]):
            i = Pinv[Ai[p]]
            if i <= k:
                Y[i] += Ax[p]
                ln = 0
                while Flag[i] != k:
                    Pattern[ln] = i
                    ln += 1
                    Flag[i] = k
                    i = Parent[i]
                while ln > 0:
                    top -= 1
                    ln -= 1
                    Pattern[top] = Pattern[ln]
        D[k] = Y[k]
        Y[k] = 0.0
        while top < n:
            i = Pattern[top]
            yi = Y[i]
            Y[i] = 0.0
            p2 = Lp[i] + Lnz[i]
            for p in range(Lp[i], p2):
                Y[Li[p]] -= Lx[p] * yi
            lki = yi / D[i]
            D[k] -= lki * yi
            Li[p2] = k
            Lx[p2] = lki
            Lnz[i] += 1
            top += 1
        if abs(D[k]) <= tiny:
            return k
    return n


@numba.njit(cache=True)
def _solve(n, Lp, Li, Lx, D, x):
    for j in range(n):
        xj = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s


@dataclass
class Factorization:
    """P A P^T = L D L^T with unit lower-triangular L stored by columns."""

    A: sp.csr_matrix
    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    D: np.ndarray

    @property
    def n(self) -> int:
        return len(self.D)

    @property
    def nnz_L(self) -> int:
        return int(self.Lp[-1])

    @property
    def inertia(self):
        """(n_negative, n_zero, n_positive) pivot counts."""
        return (int((self.D < 0).sum()), int((self.D == 0).sum()), int((self.D > 0).sum()))

    def _raw(self, b):
        x = np.ascontiguousarray(b[self.perm], dtype=float)
        _solve(self.n, self.Lp, self.Li, self.Lx, self.D, x)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def solve(self, b, refine: int = 2, rtol: float = 1e-13) -> np.ndarray:
        """Solve A x = b with a few steps of iterative refinement.

        Raises REFINEMENT_FAILED when the residual grows during refinement.
        """
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            return np.column_stack([self.solve(b[:, j], refine, rtol) for j in range(b.shape[1])])
        x = self._raw(b)
        bn = np.linalg.norm(b)
        if bn == 0:
            return x
        r = b - self.A @ x
        rn = np.linalg.norm(r)
        for _ in range(refine):
            if rn <= rtol * bn:
                break
            x_new = x + self._raw(r)
            r_new = b - self.A @ x_new
            rn_new = np.linalg.norm(r_new)
            if rn_new > rn:
                if rn > 1e-6 * bn:
                    raise SolverError(
                        "iterative refinement diverged", code="REFINEMENT_FAILED",
                        residual=float(rn_new / bn))
                break
            x, r, rn = x_new, r_new, rn_new
        return x


def factorize(A, perm: np.ndarray | None = None, pivot_tol: float = 1e-14) -> Factorization:
    """LDL^T of a symmetric sparse matrix.

    A pivot with ``|d| <= pivot_tol * max|diag(A)|`` raises FACTOR_SINGULAR.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise SolverError("matrix is not square", code="SHAPE")
    if perm is None:
        perm = nested_dissection(A)
    perm = np.asarray(perm, dtype=np.int64)
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    C = A.tocsc()
    C.sort_indices()
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    Ax = C.data.astype(float)
    Parent = np.empty(n, dtype=np.int64)
    Lnz = np.empty(n, dtype=np.int64)
    Flag = np.empty(n, dtype=np.int64)
    _symbolic(n, Ap, Ai, perm, pinv, Parent, Lnz, Flag)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(Lnz, out=Lp[1:])
    Li = np.empty(Lp[-1], dtype=np.int64)
    Lx = np.empty(Lp[-1], dtype=float)
    D = np.empty(n)
    Y = np.zeros(n)
    Pattern = np.empty(n, dtype=np.int64)
    scale = float(np.abs(A.diagonal()).max()) if n else 1.0
    k = _numeric(n, Ap, Ai, Ax, perm, pinv, Lp, Parent, Lnz, Li, Lx, D, Y, Pattern, Flag,
                 pivot_tol * scale)
    if k < n:
        raise SolverError(f"zero pivot at step {k}", code="FACTOR_SINGULAR",
                          pivot=int(k), row=int(perm[k]))
    return Factorization(A=A, perm=perm, Lp=Lp, Li=Li, Lx=Lx, D=D)
