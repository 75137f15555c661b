"""Eigenspace machinery for the tube and window perturbations.

Local expansion at the junction, order decomposition of an eigenspace, the
restricted form r_eps and chi_eps, a finite-dimensional gap-lemma check,
blow-up form eigenvalues, and rate fitting helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import PerturbationError
from .fem import OneSidedTrace, P1Evaluator, assemble_mass, make_dofmap, transfer
from .geometry import BlowupKind, BlowupSpec, Mesh, MeshParams
from .torsion import BlowupResult, HarmonicOddPolynomial, TorsionSolver, blowup_torsion

N_ANGLES = 720
K_MAX = 4


# ---------------------------------------------------------------- basis

@dataclass
class EigenspaceBasis:
    """M-orthonormal discrete eigenvectors spanning a cluster at lambda_N.

    ``vectors`` holds nodal values (n_nodes x m) on ``mesh``.
    """

    lam: float
    vectors: np.ndarray
    mesh: Mesh
    discrete_values: np.ndarray | None = None
    traces: list | None = None

    def __post_init__(self):
        V = np.asarray(self.vectors, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        self.vectors = V
        if V.shape[0] != self.mesh.n_nodes:
            raise PerturbationError("basis vectors must be nodal on the mesh", code="BAD_BASIS")

    @property
    def m(self) -> int:
        return self.vectors.shape[1]

    def gram(self, M=None) -> np.ndarray:
        dm = make_dofmap(self.mesh)
        M = assemble_mass(self.mesh, dm) if M is None else M
        W = self.vectors[dm.free_nodes]
        return W.T @ (M @ W)

    def validate(self, M=None, tol: float = 1e-8):
        err = float(np.abs(self.gram(M) - np.eye(self.m)).max())
        if err > tol:
            raise PerturbationError("basis is not M-orthonormal", code="BAD_BASIS", gram_error=err)
        return err

    def rotated(self, Q: np.ndarray) -> "EigenspaceBasis":
        traces = None
        if self.traces is not None:
            traces = [_combo(self.traces, Q[:, j]) for j in range(Q.shape[1])]
        return EigenspaceBasis(self.lam, self.vectors @ Q, self.mesh, self.discrete_values, traces)


def _combo(fns, c):
    c = np.array(c, dtype=float)
    return lambda x: sum(ci * f(x) for ci, f in zip(c, fns))


# ---------------------------------------------------------------- local expansion

def bessel_j(k: int, x: float) -> float:
    """J_k(x) from the ascending series."""
    half = 0.5 * x
    term = half ** k / math.factorial(k)
    total, m = term, 0
    while abs(term) > 1e-17 * max(abs(total), 1e-300) or m < 3:
        m += 1
        term *= -half * half / (m * (m + k))
        total += term
        if m > 200:
            break
    return total


@dataclass
class LocalExpansion:
    coefficients: np.ndarray
    raw: np.ndarray
    per_radius: np.ndarray
    radii: np.ndarray
    lam: float
    fit_residual: np.ndarray


def sine_moments(evaluator: P1Evaluator, nodal: np.ndarray, radii, K_max: int = K_MAX) -> np.ndarray:
    """c_k(r) = (2/pi) int_0^pi u(r, theta) sin(k theta) d theta, trapezoid rule."""
    theta = np.linspace(0.0, math.pi, N_ANGLES)
    out = np.empty((len(radii), K_max))
    for i, r in enumerate(radii):
        pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        u = evaluator(nodal, pts)
        if np.any(np.isnan(u)):
            raise PerturbationError(f"radius {r} leaves the mesh", code="RADIUS_OOB", radius=float(r))
        for k in range(1, K_max + 1):
            out[i, k - 1] = 2.0 / math.pi * np.trapezoid(u * np.sin(k * theta), theta)
    return out


def local_expansion(mesh: Mesh, vector: np.ndarray, lam: float, radii: Sequence[float],
                    K_max: int = K_MAX, evaluator: P1Evaluator | None = None) -> LocalExpansion:
    """Coefficients a_k of u ~ sum_k a_k r^k sin(k theta) near the origin."""
    radii = np.asarray(radii, dtype=float)
    if len(radii) < 3:
        raise PerturbationError("need at least three radii", code="BAD_RADII")
    ev = evaluator or P1Evaluator(mesh)
    c = sine_moments(ev, np.asarray(vector, dtype=float), radii, K_max)
    s = math.sqrt(lam)
    per = np.empty_like(c)
    for k in range(1, K_max + 1):
        norm = (s / 2) ** k / math.factorial(k)
        per[:, k - 1] = [c[i, k - 1] * norm / bessel_j(k, s * r) for i, r in enumerate(radii)]
    A = np.column_stack([np.ones_like(radii), radii ** 2])
    coef, res = np.empty(K_max), np.empty(K_max)
    for k in range(K_max):
        sol, *_ = np.linalg.lstsq(A, per[:, k], rcond=None)
        coef[k] = sol[0]
        res[k] = float(np.sqrt(np.mean((A @ sol - per[:, k]) ** 2)))
    return LocalExpansion(coef, c, per, radii, lam, res)


# ---------------------------------------------------------------- order decomposition

@dataclass
class OrderDecomposition:
    orders: list
    blocks: list            # nodal arrays (n_nodes x dim_j)
    mixing: list            # coefficient matrices w.r.t. the input basis (m x dim_j)
    leading: list           # leading coefficients a_{k_j} per block vector
    coefficient_matrix: np.ndarray
    threshold: float

    @property
    def p(self) -> int:
        return len(self.orders)


def order_decompose(basis: EigenspaceBasis, radii: Sequence[float], threshold_rel: float = 1e-3,
                    K_max: int = K_MAX) -> OrderDecomposition:
    """Split the eigenspace by increasing vanishing order at the origin."""
    ev = P1Evaluator(basis.mesh)
    A = np.array([local_expansion(basis.mesh, basis.vectors[:, i], basis.lam, radii, K_max, ev).coefficients
                  for i in range(basis.m)])
    thr = threshold_rel * float(np.abs(A).max()) if A.size else 0.0
    C = np.eye(basis.m)
    orders, blocks, mixing, leading = [], [], [], []
    for k in range(1, K_max + 1):
        if C.shape[1] == 0:
            break
        col = C.T @ A[:, [k - 1]]           # functionals of order k on the current space
        U, sv, _ = np.linalg.svd(col, full_matrices=True)
        rank = int((sv > thr).sum())
        if rank == 0:
            continue
        carry = C @ U[:, :rank]
        orders.append(k)
        mixing.append(carry)
        blocks.append(basis.vectors @ carry)
        leading.append((carry.T @ A[:, k - 1]).tolist())
        C = C @ U[:, rank:]
    if C.shape[1]:
        raise PerturbationError(f"{C.shape[1]} directions vanish to order > {K_max}",
                                code="ORDER_UNRESOLVED", K_max=K_max)
    return OrderDecomposition(orders, blocks, mixing, leading, A, thr)


# ---------------------------------------------------------------- r_eps and chi_eps

@dataclass
class RestrictedForm:
    matrix: np.ndarray
    mu: np.ndarray                  # eigenvalues, non-increasing
    gram: np.ndarray                # U_i^T K U_j
    mass: np.ndarray                # U_i^T M U_j
    chi2: float
    torsion: np.ndarray             # T(eps Sigma, phi_i)
    M_eps: float
    delta_estimate: float
    U: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)


def r_eps_form(basis: EigenspaceBasis, tube_mesh: Mesh, solver: TorsionSolver | None = None,
               M_eps=None) -> RestrictedForm:
    """r_eps(i, j) = U_i^T K U_j + lambda_N U_i^T M U_j on the perturbed mesh."""
    solver = solver or TorsionSolver(tube_mesh)
    dm = solver.dofmap
    M_eps = assemble_mass(tube_mesh, dm) if M_eps is None else M_eps
    cols, phis = [], []
    for i in range(basis.m):
        nodal = transfer(basis.mesh, basis.vectors[:, i], tube_mesh)
        phis.append(dm.restrict(nodal))
        trace = basis.traces[i] if basis.traces is not None else OneSidedTrace(tube_mesh, nodal)
        cols.append(solver.solve(trace).U)
    U = np.column_stack(cols)
    G = U.T @ (solver.K @ U)
    Mm = U.T @ (M_eps @ U)
    G, Mm = 0.5 * (G + G.T), 0.5 * (Mm + Mm.T)
    R = G + basis.lam * Mm
    mu = np.sort(np.linalg.eigvalsh(R))[::-1]
    chi2 = float(np.linalg.eigvalsh(G).max())
    M_est = float(np.sqrt(np.diag(Mm).max()))
    delta = basis.lam * M_est / (1 - M_est) if M_est < 1 else float("inf")
    return RestrictedForm(R, mu, G, Mm, chi2, np.diag(G).copy(), M_est, delta, U, np.column_stack(phis))


def chi_eps(form: RestrictedForm) -> float:
    """chi_eps^2: top eigenvalue of the torsion Gram matrix."""
    return form.chi2


# ---------------------------------------------------------------- gap lemma

@dataclass
class GapLemmaReport:
    gamma: float
    delta: float
    delta_complement: float
    xi: np.ndarray
    nu: np.ndarray
    bound_i: float
    errors_i: np.ndarray
    projection_distance: float
    bound_ii: float
    h1: bool
    conclusion_i: bool
    conclusion_ii: bool

    CSV_HEADER = ("gamma", "delta", "delta_complement", "max_error_i", "bound_i", "projection_distance",
                  "bound_ii", "h1", "conclusion_i", "conclusion_ii")

    @property
    def passed(self) -> bool:
        return self.h1 and self.conclusion_i and self.conclusion_ii

    def csv_row(self) -> list:
        return [self.gamma, self.delta, self.delta_complement, float(np.max(self.errors_i)), self.bound_i,
                self.projection_distance, self.bound_ii, self.h1, self.conclusion_i, self.conclusion_ii]


def gap_lemma_check(Q: np.ndarray, F: np.ndarray, N: int, m: int, slack: float = 1e-12) -> GapLemmaReport:
    """Finite-dimensional gap lemma for the form x^T Q y with trial space span(F).

    ``N`` is 1-based.  gamma is the distance of the off-cluster spectrum from 0
    (requires nu_{N-1} <= -gamma and nu_{N+m} >= gamma) and delta = ||Q P_F||.
    """
    Q = np.asarray(Q, dtype=float)
    Q = 0.5 * (Q + Q.T)
    n = Q.shape[0]
    F = np.asarray(F, dtype=float).reshape(n, -1)
    if F.shape[1] != m or not 1 <= N <= n - m + 1:
        raise PerturbationError("inconsistent N, m and trial space", code="BAD_MODEL")
    nu, W = np.linalg.eigh(Q)
    below = -nu[N - 2] if N >= 2 else np.inf
    above = nu[N + m - 1] if N + m - 1 < n else np.inf
    gamma = float(min(below, above))
    if not gamma > 0:
        raise PerturbationError("spectrum has no gap around the cluster", code="H2_FAIL", gamma=gamma)
    Fo, _ = np.linalg.qr(F)
    QF = Q @ Fo
    delta = float(np.linalg.norm(QF, 2))
    delta_c = float(np.linalg.norm(QF - Fo @ (Fo.T @ QF), 2))
    xi = np.linalg.eigvalsh(Fo.T @ QF)
    cluster = nu[N - 1:N + m - 1]
    err = np.abs(cluster - xi)
    bound_i = 4 * delta ** 2 / gamma
    Wc = W[:, N - 1:N + m - 1]
    dist = float(np.linalg.norm(Fo - Wc @ (Wc.T @ Fo), 2))
    bound_ii = math.sqrt(2) * delta / gamma
    h1 = delta < gamma / math.sqrt(2)
    return GapLemmaReport(gamma, delta, delta_c, xi, cluster, bound_i, err, dist, bound_ii, h1,
                          bool(np.all(err <= bound_i + slack)), bool(dist <= bound_ii + slack))


# ---------------------------------------------------------------- blow-up form

@dataclass
class BlockForm:
    order: int
    coefficients: list
    unit_torsion: float
    mu: np.ndarray
    blowup: BlowupResult


def blowup_form(decomp: OrderDecomposition, sigma_half_width: float, R_list: Sequence[float],
                mesh_params: MeshParams, kind: BlowupKind = BlowupKind.PI) -> list:
    """Eigenvalues mu_{j, l} of the blow-up form on each order block.

    Within block j every vector has leading polynomial a Im(z^k_j), so the form
    is T_unit * a a^T with T_unit the blow-up torsion of Im(z^k_j).
    """
    out = []
    spec = BlowupSpec(kind, sigma_half_width, float(R_list[0]))
    cache = {}
    for k, coef in zip(decomp.orders, decomp.leading):
        if k not in cache:
            cache[k] = blowup_torsion(spec, HarmonicOddPolynomial(k, 1.0), R_list, mesh_params)
        res = cache[k]
        a = np.asarray(coef, dtype=float)
        mu = np.sort(np.linalg.eigvalsh(res.limit * np.outer(a, a)))[::-1]
        out.append(BlockForm(k, a.tolist(), res.limit, mu, res))
    return out


# ---------------------------------------------------------------- fitting

@dataclass
class RateFit:
    slope: float
    log_constant: float
    residuals: np.ndarray
    eps_used: np.ndarray
    excluded: list
    rms: float
    pinned_slope: float | None = None
    pinned_constant: float | None = None

    @property
    def constant(self) -> float:
        return math.exp(self.log_constant)

    CSV_HEADER = ("slope", "constant", "pinned_slope", "pinned_constant", "rms", "n_used", "n_excluded")

    def csv_row(self) -> list:
        return [self.slope, self.constant, self.pinned_slope, self.pinned_constant, self.rms,
                len(self.eps_used), len(self.excluded)]

    def to_dict(self) -> dict:
        return {"slope": self.slope, "constant": self.constant, "log_constant": self.log_constant,
                "residuals": self.residuals.tolist(), "eps_used": self.eps_used.tolist(),
                "excluded": self.excluded, "rms": self.rms, "pinned_slope": self.pinned_slope,
                "pinned_constant": self.pinned_constant}


def fit_rate(records: Sequence[tuple], signal_floor=0.0, pinned_slope: float | None = None) -> RateFit:
    """Least squares of log(value) on log(eps).

    ``signal_floor`` is a scalar or one floor per record; points with
    value <= floor are excluded.  With ``pinned_slope`` the constant is also
    reported for that fixed exponent (geometric mean of value / eps^slope).
    """
    eps = np.array([r[0] for r in records], dtype=float)
    val = np.array([r[1] for r in records], dtype=float)
    floor = np.broadcast_to(np.asarray(signal_floor, dtype=float), eps.shape)
    keep = val > floor
    excluded = [{"epsilon": float(e), "value": float(v), "floor": float(f), "reason": "below signal floor"}
                for e, v, f, k in zip(eps, val, floor, keep) if not k]
    if keep.sum() < 3:
        raise PerturbationError("fewer than three usable points", code="FIT_UNDERDETERMINED",
                                excluded=excluded)
    x, y = np.log(eps[keep]), np.log(val[keep])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, logc), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ np.array([slope, logc])
    pc = None
    if pinned_slope is not None:
        pc = float(np.exp(np.mean(y - pinned_slope * x)))
    return RateFit(float(slope), float(logc), res, eps[keep], excluded,
                   float(np.sqrt(np.mean(res ** 2))), pinned_slope, pc)


def richardson(value_h, value_h2, order: int = 2):
    """Extrapolate two results on meshes h and h/2; returns (value, error estimate)."""
    f = 2.0 ** order
    v1, v2 = np.asarray(value_h, dtype=float), np.asarray(value_h2, dtype=float)
    return (f * v2 - v1) / (f - 1), np.abs(v2 - v1) / (f - 1)


# ---------------------------------------------------------------- best approximation

@dataclass
class BestApproxReport:
    lhs: float
    rhs: float
    slack: float

    @property
    def ok(self) -> bool:
        return self.slack >= -1e-8


def best_approx_check(phi: np.ndarray, u_eps: np.ndarray, lam_N: float, lam_eps: float, T: float,
                      M_eps) -> BestApproxReport:
    """lambda_eps * T >= ((lambda_N - lambda_eps) <phi, u_eps>)^2 on the perturbed mesh."""
    inner = float(phi @ (M_eps @ u_eps))
    lhs = lam_eps * T
    rhs = ((lam_N - lam_eps) * inner) ** 2
    return BestApproxReport(lhs, rhs, lhs - rhs)
