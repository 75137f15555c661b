"""Thin and boundary f-torsional rigidity, and their blow-up limits.

For a load vector b (the Sigma pairing of df/dy), the torsion function U solves
K U = b and T = U^T b = U^T K U.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .errors import TorsionError
from .fem import assemble_sigma_load, assemble_stiffness, make_dofmap
from .geometry import BlowupSpec, Mesh, MeshParams, build_blowup_domain
from .ldl import factorize

IDENTITY_RTOL = 1e-10


@dataclass(frozen=True)
class HarmonicOddPolynomial:
    """psi(x, y) = a * Im((x + i y)^k)."""

    k: int
    a: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise TorsionError("degree must be positive", code="BAD_DEGREE")

    def __call__(self, x, y):
        return self.a * np.imag((np.asarray(x) + 1j * np.asarray(y)) ** self.k)

    def trace_derivative(self, x):
        """d psi / dy on y = 0."""
        return self.a * self.k * np.asarray(x, dtype=float) ** (self.k - 1)

    def describe(self) -> str:
        return f"{self.a!r}*Im(z^{self.k})"


@dataclass
class TorsionResult:
    value: float
    U: np.ndarray
    energy: float
    pairing: float
    load: np.ndarray
    descriptor: str = ""
    domain: dict = field(default_factory=dict)
    K: sp.csr_matrix | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "T": self.value, "energy": self.energy, "pairing": self.pairing,
            "epsilon": self.domain.get("epsilon"), "f": self.descriptor,
            "mesh_hash": self.domain.get("mesh_hash"),
        }, sort_keys=True)


class TorsionSolver:
    """Stiffness and factorization of one mesh, reused across loads."""

    def __init__(self, mesh: Mesh, dofmap=None):
        self.mesh = mesh
        self.dofmap = dofmap if dofmap is not None else make_dofmap(mesh)
        self.K = assemble_stiffness(mesh, self.dofmap)
        self._F = None

    @property
    def factorization(self):
        if self._F is None:
            self._F = factorize(self.K)
        return self._F

    def load(self, dfdxd: Callable) -> np.ndarray:
        return assemble_sigma_load(self.mesh, self.dofmap, dfdxd)

    def solve_load(self, b: np.ndarray, descriptor: str = "") -> TorsionResult:
        if not np.any(b):
            U = np.zeros_like(b)
        else:
            U = self.factorization.solve(b)
        energy = float(U @ (self.K @ U))
        pairing = float(U @ b)
        if abs(energy - pairing) > IDENTITY_RTOL * abs(pairing):
            raise TorsionError("energy and pairing disagree", code="IDENTITY_FAILED",
                               energy=energy, pairing=pairing)
        info = self.mesh.info
        domain = {"kind": info.get("kind"), "epsilon": info.get("epsilon"),
                  "mesh_hash": self.mesh.fingerprint()}
        return TorsionResult(value=max(pairing, 0.0), U=U, energy=energy, pairing=pairing,
                             load=b, descriptor=descriptor, domain=domain, K=self.K)

    def solve(self, dfdxd: Callable, descriptor: str = "") -> TorsionResult:
        return self.solve_load(self.load(dfdxd), descriptor)


def _require_kind(mesh: Mesh, kind: str):
    if mesh.info.get("kind") != kind:
        raise TorsionError(f"expected a {kind} mesh, got {mesh.info.get('kind')}", code="WRONG_MODE")


def thin_torsion(mesh: Mesh, dfdxd: Callable, descriptor: str = "") -> TorsionResult:
    """T(eps Sigma, f) on the tube-perturbed domain."""
    _require_kind(mesh, "TUBE")
    return TorsionSolver(mesh).solve(dfdxd, descriptor)


def boundary_torsion(mesh: Mesh, dfdxd: Callable, descriptor: str = "") -> TorsionResult:
    """Mixed problem: Neumann window with flux df/dy, Dirichlet elsewhere."""
    _require_kind(mesh, "MIXED")
    return TorsionSolver(mesh).solve(dfdxd, descriptor)


@dataclass
class RayleighReport:
    quotients: np.ndarray
    T: float
    max_excess: float
    skipped: list

    @property
    def ok(self) -> bool:
        return self.max_excess <= IDENTITY_RTOL * max(self.T, 1e-300)


def rayleigh_check(result: TorsionResult, test_vectors) -> RayleighReport:
    """(v^T b)^2 / v^T K v <= T for every test vector v (columns or a list)."""
    V = np.asarray(test_vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    elif V.shape[0] != len(result.U):
        V = V.T
    q, skipped = [], []
    for j in range(V.shape[1]):
        v = V[:, j]
        e = float(v @ (result.K @ v))
        if e <= 0:
            skipped.append(j)
            q.append(np.nan)
            continue
        q.append(float(v @ result.load) ** 2 / e)
    q = np.array(q)
    excess = np.nanmax(q - result.value) if np.any(~np.isnan(q)) else -np.inf
    return RayleighReport(q, result.value, float(excess), skipped)


def torsion_norm_ratio(result: TorsionResult, M) -> float:
    """||U||^2_{L2} / T."""
    if result.value <= 0:
        raise TorsionError("ratio undefined for zero torsion", code="ZERO_TORSION")
    return float(result.U @ (M @ result.U)) / result.value


@dataclass
class BlowupResult:
    radii: np.ndarray
    values: np.ndarray
    limit: float
    model: str
    error_estimate: float
    exponent: float
    n_nodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"radii": self.radii.tolist(), "values": self.values.tolist(), "limit": self.limit,
                "model": self.model, "error_estimate": self.error_estimate,
                "exponent": self.exponent, "n_nodes": list(self.n_nodes)}


def extrapolate_power(radii: Sequence[float], values: Sequence[float]):
    """Fit T(R) = T_inf - c R^-beta exactly through three points.

    Returns (T_inf, beta).  Data that does not decay geometrically falls back
    to the last value with beta = nan.
    """
    R = np.asarray(radii, dtype=float)[-3:]
    T = np.asarray(values, dtype=float)[-3:]
    d1, d2 = T[1] - T[0], T[2] - T[1]
    if d1 <= 0 or d2 <= 0 or d2 >= d1 * (R[2] - R[1]) / (R[1] - R[0]):
        return float(T[-1]), float("nan")

    def g(beta):
        a = R ** -beta
        return (a[1] - a[2]) / (a[0] - a[1]) - d2 / d1

    lo, hi = 1e-6, 50.0
    if g(lo) * g(hi) > 0:
        return float(T[-1]), float("nan")
    beta = brentq(g, lo, hi, xtol=1e-14)
    a = R ** -beta
    c = d2 / (a[1] - a[2])
    return float(T[2] + c * a[2]), float(beta)


def blowup_torsion(spec: BlowupSpec, psi: HarmonicOddPolynomial, R_list: Sequence[float],
                   mesh_params: MeshParams, mono_rtol: float = 1e-9) -> BlowupResult:
    """Truncated blow-up torsion for each R, extrapolated to R = infinity."""
    R_list = [float(r) for r in R_list]
    if len(R_list) < 2 or any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise TorsionError("R_list must be ascending with at least two entries", code="BAD_RADII")
    vals, sizes = [], []
    for R in R_list:
        s = BlowupSpec(spec.kind, spec.sigma_half_width, R,
                       None if spec.tube_follows_radius else spec.tube_trunc_length)
        mesh = build_blowup_domain(s, mesh_params)
        res = TorsionSolver(mesh).solve(psi.trace_derivative, psi.describe())
        vals.append(res.value)
        sizes.append(mesh.n_nodes)
    vals = np.array(vals)
    drops = vals[:-1] - vals[1:]
    if np.any(drops > mono_rtol * np.abs(vals[1:])):
        raise TorsionError("T(R) decreases with R; mesh too coarse", code="BLOWUP_NONMONOTONE",
                           values=vals.tolist())
    if len(vals) >= 3:
        limit, beta = extrapolate_power(R_list, vals)
        if math.isnan(beta):
            err = float(abs(vals[-1] - vals[-2]))
        elif len(vals) >= 4:
            prev, _ = extrapolate_power(R_list[:-1], vals[:-1])
            err = float(abs(limit - prev))
        else:
            err = float(abs(limit - vals[-1]))
        model = "power3"
    else:
        limit, beta, err, model = float(vals[-1]), float("nan"), float(abs(vals[-1] - vals[0])), "last"
    return BlowupResult(np.array(R_list), vals, limit, model, err, beta, sizes)
