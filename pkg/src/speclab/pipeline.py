"""Per-epsilon computations used by the runner.

Each sweep point builds the perturbed mesh and the matching unperturbed mesh
(same grid on the square), refines both ``levels - 1`` times, and on every
level computes the eigenvalue cluster, the restricted form r_eps and the
torsion identities.  Results are plain JSON-compatible dicts.
"""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from .config import ExperimentConfig
from .eigen import eigs_smallest, steklov_smallest
from .fem import (OneSidedTrace, assemble_boundary_mass, assemble_mass, assemble_stiffness, make_dofmap,
                  transfer)
from .geometry import (BlowupKind, BlowupSpec, DomainSpec, EdgeTag, Mode, build_mixed_domain,
                       build_perturbed_domain, refine)
from .perturbation import (EigenspaceBasis, best_approx_check, blowup_form, gap_lemma_check,
                           order_decompose, r_eps_form, richardson)
from .torsion import HarmonicOddPolynomial, TorsionSolver, blowup_torsion, rayleigh_check

log = logging.getLogger(__name__)

SOLVER_CALLS = {"count": 0}


def square_spectrum(n: int):
    """The n smallest Dirichlet eigenvalues of the unit square with their (j, k)."""
    top = int(math.isqrt(n)) + 3
    pairs = sorted(((j * j + k * k, j, k) for j in range(1, top + 1) for k in range(1, top + 1)))
    return [(math.pi ** 2 * s, j, k) for s, j, k in pairs[:n]]


def square_eigenfunction(j: int, k: int):
    """Normalized phi_{j,k}(x, y) = 2 sin(j pi (x + 1/2)) sin(k pi y) on (-1/2, 1/2) x (0, 1)."""
    def phi(x, y):
        return 2.0 * np.sin(j * math.pi * (np.asarray(x) + 0.5)) * np.sin(k * math.pi * np.asarray(y))
    return phi


def cluster_value(N: int, m: int) -> float:
    spec = square_spectrum(N + m)
    vals = [v for v, _, _ in spec]
    cl = vals[N - 1:N + m - 1]
    if max(cl) - min(cl) > 1e-9 * max(cl):
        raise ValueError(f"eigenvalues {N}..{N + m - 1} of the square do not form one cluster")
    if N >= 2 and abs(vals[N - 2] - cl[0]) < 1e-9 * cl[0]:
        raise ValueError("cluster does not start at N")
    if abs(vals[N + m - 1] - cl[0]) < 1e-9 * cl[0]:
        raise ValueError("cluster extends beyond N + m - 1")
    return cl[0]


def _meshes(cfg: ExperimentConfig, eps: float):
    params = cfg.mesh.params(eps, cfg.w)
    base = build_mixed_domain(DomainSpec(Mode.MIXED, eps, cfg.w / 2), params)
    if cfg.mode == "TUBE":
        pert = build_perturbed_domain(DomainSpec(Mode.TUBE, eps, cfg.w / 2, cfg.L), params)
    else:
        pert = base
    out = [(base, pert)]
    for _ in range(cfg.mesh.levels - 1):
        base = refine(base)
        pert = base if cfg.mode == "MIXED" else refine(pert)
        out.append((base, pert))
    return params, out


def _eigs(K, M, count, seed):
    SOLVER_CALLS["count"] += 1
    return eigs_smallest(K, M, count, seed=seed)


def _identity_suite(solver: TorsionSolver, f, g, n_vectors: int, seed: int) -> dict:
    """Rayleigh, scaling and polarization checks for one mesh."""
    rf = solver.solve(f)
    rg = solver.solve(g)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((len(rf.U), n_vectors))
    ray = rayleigh_check(rf, V)
    at_u = rayleigh_check(rf, rf.U)
    alpha = 2.5
    ra = solver.solve_load(alpha * rf.load)
    scaling = abs(ra.value - alpha ** 2 * rf.value) / (alpha ** 2 * rf.value)
    linear = float(np.abs(ra.U - alpha * rf.U).max() / np.abs(alpha * rf.U).max())
    rp = solver.solve_load(rf.load + rg.load)
    rm = solver.solve_load(rf.load - rg.load)
    lhs, rhs = rp.value + rm.value, 2 * rf.value + 2 * rg.value
    polar = abs(lhs - rhs) / abs(rhs)
    energy = max(abs(r.energy - r.pairing) / abs(r.pairing) for r in (rf, rg, ra, rp, rm))
    return {"rayleigh_max_excess": ray.max_excess / rf.value, "rayleigh_at_U": float(at_u.quotients[0] / rf.value - 1),
            "scaling": scaling, "linearity": linear, "polarization": polar, "energy_pairing": energy,
            "n_rayleigh": int(n_vectors)}


def sweep_point(cfg: ExperimentConfig, eps: float) -> dict:
    """All measurements for one epsilon.  Raises on any stage failure."""
    t0 = time.perf_counter()
    lam_N = cluster_value(cfg.N, cfg.count)
    n_eig = cfg.N + cfg.count - 1
    sl = slice(cfg.N - 1, n_eig)
    params, levels = _meshes(cfg, eps)
    rec = {"epsilon": float(eps), "lambda_N": lam_N, "levels": []}
    for ell, (base, pert) in enumerate(levels):
        lv = {"level": ell, "h_target": params.h_target / 2 ** ell, "h_far": params.h_far / 2 ** ell}
        dm0 = make_dofmap(base, neumann_window=False)
        K0, M0 = assemble_stiffness(base, dm0), assemble_mass(base, dm0)
        e0 = _eigs(K0, M0, n_eig, cfg.seed)
        dm1 = make_dofmap(pert)
        solver = TorsionSolver(pert, dm1)
        M1 = assemble_mass(pert, dm1)
        e1 = _eigs(solver.K, M1, n_eig, cfg.seed)
        lv.update({"n_free": dm1.n_free, "n_free_omega": dm0.n_free, "mesh_hash": pert.fingerprint(),
                   "lambda_eps": e1.values[sl].tolist(), "lambda_omega": e0.values[sl].tolist(),
                   "residual_max": float(max(e0.residuals.max(), e1.residuals.max()))})
        V0 = np.column_stack([dm0.expand(e0.vectors[:, i]) for i in range(sl.start, sl.stop)])
        basis = EigenspaceBasis(lam_N, V0, base, discrete_values=e0.values[sl])
        form = r_eps_form(basis, pert, solver, M1)
        lv.update({"T": form.torsion.tolist(), "chi2": form.chi2, "mu": form.mu.tolist(),
                   "r_matrix": form.matrix.tolist(), "M_eps": form.M_eps,
                   "delta_estimate": form.delta_estimate,
                   "norm_ratio": (np.diag(form.mass) / form.torsion).tolist()})
        if ell == len(levels) - 1:
            nodal = transfer(base, V0[:, 0], pert)
            f = OneSidedTrace(pert, nodal)
            lv["identities"] = _identity_suite(solver, f, lambda x: 2.0 * np.asarray(x) + 1.0,
                                               cfg.rayleigh_vectors, cfg.seed)
        # best approximation for each cluster vector against its own branch
        ba = []
        for i in range(cfg.count):
            rep = best_approx_check(form.phi[:, i], e1.vectors[:, sl.start + i], float(e0.values[sl.start + i]),
                                    float(e1.values[sl.start + i]), float(form.torsion[i]), M1)
            ba.append({"lhs": rep.lhs, "rhs": rep.rhs, "slack": rep.slack})
        lv["best_approx"] = ba
        rec["levels"].append(lv)
    _combine(rec, cfg)
    rec["seconds"] = time.perf_counter() - t0
    return rec


def _combine(rec: dict, cfg: ExperimentConfig):
    L = rec["levels"]
    lam_N = rec["lambda_N"]
    fin = L[-1]
    lam = np.array(fin["lambda_eps"])
    lam0 = np.array(fin["lambda_omega"])
    keys = ("lambda_eps", "lambda_omega", "T", "chi2", "mu")
    if cfg.mesh.richardson and len(L) >= 2:
        ext = {k: richardson(L[-2][k], L[-1][k])[0] for k in keys}
        if len(L) >= 3:
            prev = {k: richardson(L[-3][k], L[-2][k])[0] for k in keys}
            floor = np.abs(ext["lambda_eps"] - prev["lambda_eps"])
        else:
            floor = richardson(L[-2]["lambda_eps"], L[-1]["lambda_eps"])[1]
    else:
        ext = {k: np.asarray(fin[k], dtype=float) for k in keys}
        floor = np.zeros_like(lam)
    gap = lam_N - np.asarray(ext["lambda_eps"])
    mu = np.asarray(ext["mu"])
    chi2 = float(ext["chi2"])
    rec.update({
        "lambda_raw": lam.tolist(),
        "lambda_rich": np.asarray(ext["lambda_eps"]).tolist(),
        "lambda_omega_rich": np.asarray(ext["lambda_omega"]).tolist(),
        "gap": gap.tolist(),
        "gap_raw": (lam_N - lam).tolist(),
        "gap_paired": (np.asarray(ext["lambda_omega"]) - np.asarray(ext["lambda_eps"])).tolist(),
        "gap_paired_raw": (lam0 - lam).tolist(),
        "floor": np.asarray(floor).tolist(),
        "T": np.asarray(ext["T"]).tolist(),
        "chi2": chi2,
        "mu": mu.tolist(),
        "theorem_residual": (np.abs(gap - mu) / chi2).tolist(),
        "norm_ratio": fin["norm_ratio"],
        "best_approx_min_slack": float(min(b["slack"] for lv in L for b in lv["best_approx"])),
        "identities": fin["identities"],
    })


# ---------------------------------------------------------------- config-level pieces

def order_analysis(cfg: ExperimentConfig, eps: float, rotation_seed: int | None = None) -> dict:
    """Order decomposition of the unperturbed cluster on the finest sweep mesh for ``eps``."""
    lam_N = cluster_value(cfg.N, cfg.count)
    _, levels = _meshes(cfg, eps)
    base = levels[-1][0]
    dm0 = make_dofmap(base, neumann_window=False)
    K0, M0 = assemble_stiffness(base, dm0), assemble_mass(base, dm0)
    e0 = _eigs(K0, M0, cfg.N + cfg.count - 1, cfg.seed)
    V0 = np.column_stack([dm0.expand(e0.vectors[:, i]) for i in range(cfg.N - 1, cfg.N + cfg.count - 1)])
    basis = EigenspaceBasis(lam_N, V0, base, discrete_values=e0.values[cfg.N - 1:])
    dec = order_decompose(basis, cfg.radii, cfg.order_threshold)
    out = {"orders": dec.orders, "leading": dec.leading, "coefficient_matrix": dec.coefficient_matrix.tolist(),
           "decomposition": dec, "basis": basis, "M": M0, "dofmap": dm0}
    # orient each block vector like the analytic eigenfunction it approximates
    x, y = base.nodes.T
    analytic = [square_eigenfunction(j, k)(x, y) for _, j, k in square_spectrum(cfg.N + cfg.count)]
    signed = []
    for blk, lead in zip(dec.blocks, dec.leading):
        v = blk[:, 0]
        w = dm0.restrict(v)
        ips = [abs(float(w @ (M0 @ dm0.restrict(a)))) for a in analytic]
        best = int(np.argmax(ips))
        s = np.sign(float(w @ (M0 @ dm0.restrict(analytic[best]))))
        signed.append(float(s * lead[0]))
    out["signed_leading"] = signed
    if rotation_seed is not None:
        rng = np.random.default_rng(rotation_seed)
        Q, _ = np.linalg.qr(rng.standard_normal((cfg.count, cfg.count)))
        rot = order_decompose(basis.rotated(Q), cfg.radii, cfg.order_threshold)
        angles = []
        for A, B in zip(dec.mixing, rot.mixing):
            # rotated coordinates c' describe V Q c', i.e. Q c' in the original ones
            qa, qb = np.linalg.qr(np.asarray(A))[0], np.linalg.qr(Q @ np.asarray(B))[0]
            s = np.linalg.svd(qa.T @ qb, compute_uv=False)
            angles.append(float(np.arccos(np.clip(s.min(), -1, 1))))
        out["rotated"] = {"orders": rot.orders, "leading_abs": [abs(v[0]) for v in rot.leading],
                          "principal_angles": angles}
    return out


def blowup_constants(cfg: ExperimentConfig, decomposition) -> list:
    """mu_j from the blow-up form of each order block (PI for tubes, half-plane for windows)."""
    kind = BlowupKind.PI if cfg.mode == "TUBE" else BlowupKind.HALF_SPACE
    forms = blowup_form(decomposition, cfg.w / 2, cfg.blowup.R_list, cfg.blowup.params(), kind)
    return [{"order": f.order, "coefficients": f.coefficients, "unit_torsion": f.unit_torsion,
             "mu": f.mu.tolist(), "blowup": f.blowup.to_dict()} for f in forms]


def blowup_run(cfg: ExperimentConfig) -> dict:
    kind = BlowupKind(cfg.blowup_kind)
    res = blowup_torsion(BlowupSpec(kind, cfg.blowup_half_width, float(cfg.blowup.R_list[0])),
                         HarmonicOddPolynomial(1, 1.0), cfg.blowup.R_list, cfg.blowup.params())
    return res.to_dict()


def polya_point(cfg: ExperimentConfig, eps: float) -> dict:
    """Boundary torsion with unit flux, Steklov sigma_1 and T * sigma_1 <= |Gamma|."""
    params = cfg.mesh.params(eps, cfg.w)
    mesh = build_mixed_domain(DomainSpec(Mode.MIXED, eps, cfg.w / 2), params)
    solver = TorsionSolver(mesh)
    tr = solver.solve(lambda x: np.ones_like(x), "1")
    B = assemble_boundary_mass(mesh, solver.dofmap, EdgeTag.SIGMA_NEUMANN)
    SOLVER_CALLS["count"] += 1
    st = steklov_smallest(solver.K, B, seed=cfg.seed)
    gamma = eps * cfg.w
    prod = tr.value * st.value
    return {"epsilon": float(eps), "T": tr.value, "sigma1": st.value, "product": prod, "gamma": gamma,
            "slack": gamma - prod, "steklov_iterations": st.iterations, "steklov_residual": st.residual}


def random_gap_model(rng, n: int, m: int):
    """Symmetric model with a cluster near 0 and a trial space tilted off it."""
    N = int(rng.integers(1, n - m + 2))
    gamma0 = float(rng.uniform(0.5, 2.0))
    low = -gamma0 - rng.exponential(2.0, N - 1)
    high = gamma0 + rng.exponential(2.0, n - N - m + 1)
    mid = rng.uniform(-0.3, 0.3, m) * gamma0
    nu = np.concatenate([low, mid, high])
    W, _ = np.linalg.qr(rng.standard_normal((n, n)))
    Q = (W * nu) @ W.T
    idx = np.arange(N - 1, N - 1 + m)
    tilt = float(rng.choice([1e-3, 1e-2, 0.05, 0.1, 0.3]))
    F = W[:, idx] + tilt * rng.standard_normal((n, m))
    return Q, F, N, m


def lemma_suite(cfg: ExperimentConfig) -> dict:
    """Draw seeded models until ``lemma_models`` of them satisfy (H1) and (H2)."""
    rng = np.random.default_rng(cfg.seed)
    tested, drawn, skipped, failures, rows = 0, 0, 0, [], []
    worst_i, worst_ii = -np.inf, -np.inf
    while tested < cfg.lemma_models and drawn < 50 * cfg.lemma_models:
        drawn += 1
        n = int(rng.integers(4, cfg.lemma_max_size + 1))
        m = int(rng.integers(1, min(4, n - 1) + 1))
        Q, F, N, m = random_gap_model(rng, n, m)
        rep = gap_lemma_check(Q, F, N, m)
        if not rep.h1:
            skipped += 1
            continue
        tested += 1
        rows.append([drawn - 1, n, N, m] + rep.csv_row())
        worst_i = max(worst_i, float((rep.errors_i - rep.bound_i).max()))
        worst_ii = max(worst_ii, rep.projection_distance - rep.bound_ii)
        if not (rep.conclusion_i and rep.conclusion_ii):
            failures.append(drawn - 1)
    return {"models": tested, "drawn": drawn, "skipped_h1": skipped, "failures": failures,
            "worst_margin_i": worst_i, "worst_margin_ii": worst_ii, "rows": rows}
