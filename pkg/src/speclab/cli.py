"""Command-line entry point: ``speclab <subcommand> [options]``.

Sweep-like subcommands (sweep, blowup, lemma, polya) exit 0 only when every
acceptance criterion they evaluate passes.  Library errors exit with 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import pipeline, runner
from .errors import SpecLabError

EXIT_FAIL = 1
EXIT_ERROR = 2
DEFAULT_PRESET = {"blowup": "blowup", "lemma": "lemma", "polya": "mixed", "steklov": "mixed"}


def _load_config(args) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.preset(args.preset or DEFAULT_PRESET.get(args.command, "ground"))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _eps(args, cfg) -> float:
    if args.eps is not None:
        return float(args.eps)
    if cfg.epsilon_list:
        return float(cfg.epsilon_list[0])
    raise SpecLabError("no epsilon given and the config has no epsilon_list", code="EPS_EMPTY")


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else Path("runs") / cfg.name


def _emit(obj):
    sys.stdout.write(runner.dumps(obj))


def _finish(bundle, out) -> int:
    sys.stdout.write(runner.report(out))
    return 0 if runner.all_passed(bundle) else EXIT_FAIL


def _mesh_pair(cfg, eps):
    _, levels = pipeline._meshes(cfg, eps)
    return levels[0]


def cmd_mesh(args, cfg):
    from .geometry import validate
    base, pert = _mesh_pair(cfg, _eps(args, cfg))
    rep = validate(pert)
    rep["fingerprint"] = pert.fingerprint()
    if args.matrix_market:
        from .fem import assemble_mass, assemble_stiffness, make_dofmap, write_matrix_market
        out = _out(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        dm = make_dofmap(pert)
        write_matrix_market(assemble_stiffness(pert, dm), out / "K.mtx")
        write_matrix_market(assemble_mass(pert, dm), out / "M.mtx")
    _emit(rep)
    return 0


def cmd_eigs(args, cfg):
    from .eigen import eigs_smallest
    from .fem import assemble_mass, assemble_stiffness, make_dofmap
    _, pert = _mesh_pair(cfg, _eps(args, cfg))
    dm = make_dofmap(pert)
    res = eigs_smallest(assemble_stiffness(pert, dm), assemble_mass(pert, dm), args.count or cfg.N + cfg.count - 1,
                        seed=cfg.seed)
    if args.diagnostics:
        sys.stderr.write(res.diagnostics_jsonl())
    _emit({"epsilon": _eps(args, cfg), "n_free": dm.n_free, "values": res.values, "residuals": res.residuals,
           "iterations": res.iterations})
    return 0


def cmd_torsion(args, cfg):
    from .torsion import HarmonicOddPolynomial, TorsionSolver
    _, pert = _mesh_pair(cfg, _eps(args, cfg))
    psi = HarmonicOddPolynomial(args.k, 1.0)
    res = TorsionSolver(pert).solve(psi.trace_derivative, psi.describe())
    _emit(json.loads(res.to_json()))
    return 0


def cmd_steklov(args, cfg):
    pt = pipeline.polya_point(cfg, _eps(args, cfg))
    _emit({k: pt[k] for k in ("epsilon", "sigma1", "steklov_iterations", "steklov_residual")})
    return 0


def _run_as(args, cfg, **changes):
    cfg = dataclasses.replace(cfg, **changes)
    out = _out(args, cfg)
    bundle = runner.run(cfg, out, jobs=args.jobs, serial=args.serial)
    return _finish(bundle, out)


def cmd_sweep(args, cfg):
    return _run_as(args, cfg)


def cmd_blowup(args, cfg):
    return _run_as(args, cfg, mode="BLOWUP", epsilon_list=(), fits=(), polya_epsilon_list=(),
                   criteria=("AC4",))


def cmd_lemma(args, cfg):
    return _run_as(args, cfg, mode="LEMMA", epsilon_list=(), fits=(), polya_epsilon_list=(),
                   criteria=("AC6",))


def cmd_polya(args, cfg):
    if cfg.mode != "MIXED":
        raise SpecLabError("polya needs a MIXED config", code="WRONG_MODE")
    cfg = dataclasses.replace(cfg, polya_epsilon_list=cfg.polya_epsilon_list or cfg.epsilon_list,
                              criteria=("AC9",))
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    bundle = {"config": json.loads(cfg.canonical()), "polya": runner.polya_stage(cfg, runner.Cache())[0]}
    bundle["summary"] = runner.evaluate(cfg, bundle)
    runner.write_bundle(cfg, bundle, out)
    return _finish(bundle, out)


def cmd_fit(args, cfg):
    """Refit rates from an existing bundle without solving anything."""
    out = _out(args, cfg)
    try:
        recs = json.loads((out / "records.json").read_text())
        bcfg = cfgmod.from_dict(json.loads((out / "config.json").read_text()))
    except FileNotFoundError as exc:
        raise SpecLabError(f"no sweep bundle at {out}", code="NOT_FOUND") from exc
    blow = None
    if (out / "blowup_form.json").exists():
        blow = json.loads((out / "blowup_form.json").read_text())
    fits = runner.branch_fits(bcfg, recs, runner._expected_mu(bcfg, blow))
    (out / "fits.json").write_text(runner.dumps(fits))
    _emit(fits)
    return 0 if all(runner._fit_pass(f) for f in fits.values()) else EXIT_FAIL


def cmd_report(args, cfg):
    sys.stdout.write(runner.report(_out(args, cfg)))
    return 0


COMMANDS = {
    "mesh": (cmd_mesh, "build and validate the perturbed mesh for one epsilon"),
    "eigs": (cmd_eigs, "smallest eigenvalues of the perturbed domain"),
    "torsion": (cmd_torsion, "thin or boundary torsion with load from Im z^k"),
    "blowup": (cmd_blowup, "blow-up torsion with R extrapolation (AC4)"),
    "sweep": (cmd_sweep, "full epsilon sweep with fits and criteria"),
    "fit": (cmd_fit, "refit rates from an existing bundle"),
    "lemma": (cmd_lemma, "random matrix checks of the gap lemma (AC6)"),
    "steklov": (cmd_steklov, "first Steklov eigenvalue on the Neumann window"),
    "polya": (cmd_polya, "T * sigma_1 <= eps w over the configured epsilons (AC9)"),
    "report": (cmd_report, "text table and gnuplot data from a bundle"),
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; the subparser copy
    # must not overwrite values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", metavar="PATH", default=d(None), help="experiment config JSON")
    c.add_argument("--preset", choices=cfgmod.preset_names(), default=d(None),
                   help="bundled config (default: ground)")
    c.add_argument("--out", metavar="DIR", default=d(None), help="bundle directory (default: runs/<name>)")
    c.add_argument("--jobs", type=int, default=d(1), metavar="N", help="worker processes for sweep points")
    c.add_argument("--seed", type=int, metavar="S", default=d(None), help="override the config seed")
    c.add_argument("--serial", action="store_true", default=d(False), help="sequential deterministic execution")
    c.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return c


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speclab", parents=[_common(False)], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[_common(True)], help=help_)
        if name in ("mesh", "eigs", "torsion", "steklov"):
            sp.add_argument("--eps", type=float, help="epsilon (default: first of the config)")
        if name == "eigs":
            sp.add_argument("--count", type=int)
            sp.add_argument("--diagnostics", action="store_true", help="JSON-lines iteration log on stderr")
        if name == "torsion":
            sp.add_argument("--k", type=int, default=1, help="order of the harmonic load Im z^k")
        if name == "mesh":
            sp.add_argument("--matrix-market", action="store_true", help="write K.mtx and M.mtx to --out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.set_printoptions(precision=12)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except SpecLabError as exc:
        sys.stderr.write(f"speclab: error {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
