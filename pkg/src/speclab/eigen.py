"""Generalized symmetric eigensolvers built on :mod:`speclab.ldl`.

``eigs_smallest`` runs shift-invert Lanczos in the M inner product with full
reorthogonalization, then a Rayleigh-Ritz pass over the converged vectors so
that close clusters come back as an M-orthonormal, K-diagonal basis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import SolverError
from .ldl import factorize, nested_dissection

log = logging.getLogger(__name__)


def start_vector(n: int, seed: int = 0) -> np.ndarray:
    """Ones plus a small deterministic LCG perturbation."""
    state = (seed * 6364136223846793005 + 1442695040888963407) % (1 << 64)
    out = np.empty(n)
    for i in range(n):
        state = (state * 6364136223846793005 + 1442695040888963407) % (1 << 64)
        out[i] = (state >> 11) / float(1 << 53)
    return 1.0 + 0.5 * (out - 0.5)


@dataclass
class EigResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    iterations: int
    shift: float
    diagnostics: list = field(default_factory=list)
    residuals_l2: np.ndarray | None = None

    def diagnostics_jsonl(self) -> str:
        return "\n".join(json.dumps(d, sort_keys=True) for d in self.diagnostics)


def _pattern_union(K, M):
    return (abs(sp.csr_matrix(K)) + abs(sp.csr_matrix(M))).tocsr()


def eigs_smallest(K, M, count: int, tol: float = 1e-10, seed: int = 0, shift: float = 0.0,
                  max_iter: int | None = None, perm=None) -> EigResult:
    """The ``count`` eigenpairs of K x = lambda M x closest to ``shift``.

    With the default shift 0 and K positive definite these are the smallest.
    Vectors are M-orthonormal.  Convergence means

        ||K x - lambda M x||_{K^-1} <= tol * ||K x||_{K^-1}

    for every returned pair.  The Euclidean relative residual is reported in
    ``residuals_l2``; it carries a rounding floor near eps * ||K|| ||x|| / ||K x||,
    which grows like h^-3 and passes 1e-10 on fine meshes.
    """
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    n = K.shape[0]
    if count < 1 or count > n:
        raise SolverError(f"cannot compute {count} eigenpairs of an order-{n} pencil", code="BAD_COUNT")
    if perm is None:
        perm = nested_dissection(_pattern_union(K, M))
    F = factorize((K - shift * M).tocsr(), perm)
    max_iter = min(n, max_iter or max(60, 12 * count + 40))

    V = np.zeros((n, max_iter + 1))
    MV = np.zeros((n, max_iter + 1))
    alpha = np.zeros(max_iter)
    beta = np.zeros(max_iter)
    v = start_vector(n, seed)
    Mv = M @ v
    nv = np.sqrt(v @ Mv)
    V[:, 0], MV[:, 0] = v / nv, Mv / nv
    diagnostics = []
    j = 0
    for j in range(max_iter):
        w = F.solve(MV[:, j])
        alpha[j] = w @ MV[:, j]
        w -= alpha[j] * V[:, j]
        if j > 0:
            w -= beta[j - 1] * V[:, j - 1]
        for _ in range(2):
            w -= V[:, : j + 1] @ (MV[:, : j + 1].T @ w)
        Mw = M @ w
        beta[j] = np.sqrt(max(w @ Mw, 0.0))
        m = j + 1
        theta, S = sla.eigh_tridiagonal(alpha[:m], beta[: m - 1]) if m > 1 else (alpha[:1], np.ones((1, 1)))
        order = np.argsort(-np.abs(theta))
        est = np.abs(beta[j] * S[-1, order[: min(count, m)]]) / np.abs(theta[order[: min(count, m)]])
        diagnostics.append({"phase": "lanczos", "iteration": m, "residual": float(est.max()),
                            "ritz_values": [float(shift + 1.0 / t) for t in theta[order[: min(count, m)]]]})
        breakdown = beta[j] <= 1e-14 * abs(alpha[j])
        if (m >= count and est.max() < tol * 1e-2) or breakdown:
            break
        V[:, j + 1] = w / beta[j]
        MV[:, j + 1] = Mw / beta[j]

    m = j + 1
    theta, S = sla.eigh_tridiagonal(alpha[:m], beta[: m - 1]) if m > 1 else (alpha[:1], np.ones((1, 1)))
    order = np.argsort(-np.abs(theta))[: min(count, m)]
    X = V[:, :m] @ S[:, order]
    # one shift-invert step damps high-frequency rounding left in the Ritz vectors
    X = F.solve(M @ X)
    # Rayleigh-Ritz on the converged span
    KX, MX = K @ X, M @ X
    Kh, Mh = X.T @ KX, X.T @ MX
    Kh, Mh = 0.5 * (Kh + Kh.T), 0.5 * (Mh + Mh.T)
    lam, C = sla.eigh(Kh, Mh)
    X = X @ C
    KX, MX = KX @ C, MX @ C
    R = KX - MX * lam
    res_l2 = np.linalg.norm(R, axis=0) / np.maximum(np.linalg.norm(KX, axis=0), 1e-300)
    F0 = F if shift == 0.0 else factorize(K, perm)
    res = np.sqrt(np.abs(np.einsum("ij,ij->j", R, F0.solve(R)))) / np.sqrt(
        np.maximum(np.abs(np.einsum("ij,ij->j", X, KX)), 1e-300))
    # sign convention: largest-magnitude component positive
    for i in range(X.shape[1]):
        k = int(np.argmax(np.abs(X[:, i])))
        if X[k, i] < 0:
            X[:, i] *= -1
    result = EigResult(values=lam, vectors=X, residuals=res, iterations=m, shift=shift,
                       diagnostics=diagnostics, residuals_l2=res_l2)
    if len(lam) < count or res.max() > tol:
        raise SolverError("Lanczos did not converge", code="NO_CONVERGENCE",
                          iterations=m, residuals=res.tolist(), diagnostics=diagnostics)
    log.debug("lanczos converged in %d steps", m)
    return result


def count_below(K, M, sigma: float, perm=None) -> int:
    """Number of eigenvalues of K x = lambda M x below ``sigma`` (Sylvester inertia)."""
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    if perm is None:
        perm = nested_dissection(_pattern_union(K, M))
    return factorize((K - sigma * M).tocsr(), perm).inertia[0]


@dataclass
class SteklovResult:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float


def steklov_smallest(K, B, tol: float = 1e-12, seed: int = 0, max_iter: int = 500) -> SteklovResult:
    """Smallest finite eigenvalue of K u = sigma B u with B positive semidefinite.

    Inverse iteration.  Every iterate lies in the range of K^{-1} B, where B is
    definite, so the infinite eigenvalues never enter.
    """
    K = sp.csr_matrix(K)
    B = sp.csr_matrix(B)
    if B.nnz == 0 or not np.any(B.diagonal() > 0):
        raise SolverError("boundary mass is empty", code="EMPTY_SIGMA")
    F = factorize(K)
    u = F.solve(B @ start_vector(K.shape[0], seed))
    sigma_old = np.inf
    for it in range(1, max_iter + 1):
        Bu = B @ u
        u = u / np.sqrt(u @ Bu)
        Bu = B @ u
        Ku = K @ u
        sigma = float(u @ Ku)
        r = np.linalg.norm(Ku - sigma * Bu) / np.linalg.norm(Ku)
        if r < tol or abs(sigma - sigma_old) <= 1e-3 * tol * sigma and r < 1e3 * tol:
            return SteklovResult(sigma, u, it, float(r))
        sigma_old = sigma
        u = F.solve(Bu)
    raise SolverError("inverse iteration did not converge", code="NO_CONVERGENCE",
                      iterations=max_iter, residual=float(r))
