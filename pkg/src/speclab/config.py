"""Experiment configuration, canonical serialization and cache keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError

MODES = ("TUBE", "MIXED", "BLOWUP", "LEMMA")


@dataclass(frozen=True)
class MeshRule:
    """h_target = min(eps * w / h_factor, h_far), then red refinement."""

    h_factor: float = 4.0
    h_far: float = 0.02
    grading_levels: int = 4
    levels: int = 3
    richardson: bool = True

    def params(self, eps: float, w: float):
        from .geometry import MeshParams
        h = min(eps * w / self.h_factor, self.h_far)
        return MeshParams(h, self.grading_levels, h_far=self.h_far)


@dataclass(frozen=True)
class BlowupConfig:
    R_list: tuple = (2.0, 4.0, 8.0)
    h_target: float = 0.0078125
    grading_levels: int = 6
    h_far: float = 0.03125

    def params(self):
        from .geometry import MeshParams
        return MeshParams(self.h_target, self.grading_levels, h_far=self.h_far)


@dataclass(frozen=True)
class BranchFit:
    """Rate check for one eigenvalue branch (1-based within the cluster)."""

    branch: int
    order: int
    epsilon: tuple
    slope_range: tuple
    constant_rtol: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mode: str
    epsilon_list: tuple = ()
    w: float = 1.0
    L: float = 1.0
    N: int = 1
    count: int = 1
    mesh: MeshRule = MeshRule()
    blowup: BlowupConfig = BlowupConfig()
    fits: tuple = ()
    criteria: tuple = ()
    radii: tuple = (0.1, 0.2, 0.3, 0.4)
    order_threshold: float = 1e-3
    blowup_kind: str = "HALF_SPACE"
    blowup_half_width: float = 1.0
    polya_epsilon_list: tuple = ()
    lemma_models: int = 200
    lemma_max_size: int = 50
    rayleigh_vectors: int = 100
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def canonical(self) -> str:
        return canonical_json(dataclasses.asdict(self))

    def key(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:20]

    def point_key(self, eps: float) -> str:
        """Cache key of one sweep point: everything except the other epsilons."""
        d = dataclasses.asdict(self)
        for k in ("epsilon_list", "fits", "criteria", "name", "polya_epsilon_list",
                  "lemma_models", "lemma_max_size"):
            d.pop(k)
        d["epsilon"] = float(eps)
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:20]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


def _canon(obj):
    if isinstance(obj, float):
        return float(repr(obj))
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"))


def validate(cfg: ExperimentConfig):
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}", code="BAD_MODE")
    eps = list(cfg.epsilon_list)
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("epsilon_list must be strictly decreasing", code="EPS_ORDER")
    for e in eps + list(cfg.polya_epsilon_list):
        if not 0 < e < 1 or e * cfg.w / 2 >= 0.5:
            raise ConfigError(f"epsilon {e} outside (0, 1) or window too wide", code="EPS_RANGE")
        h = min(e * cfg.w / cfg.mesh.h_factor, cfg.mesh.h_far)
        if h > e * cfg.w / 2:
            raise ConfigError(f"epsilon {e} is below the mesh resolution", code="EPS_UNRESOLVED")
    if cfg.mode in ("TUBE", "MIXED") and not eps:
        raise ConfigError("sweep modes need epsilon_list", code="EPS_EMPTY")
    if cfg.N < 1 or cfg.count < 1:
        raise ConfigError("N and count must be positive", code="BAD_TARGET")
    if cfg.mesh.levels < 1 or (cfg.mesh.richardson and cfg.mesh.levels < 2):
        raise ConfigError("Richardson needs at least two mesh levels", code="BAD_MESH_RULE")
    R = list(cfg.blowup.R_list)
    if len(R) < 2 or any(b <= a for a, b in zip(R, R[1:])):
        raise ConfigError("blow-up R_list must be ascending with two or more radii", code="BAD_RADII")
    for f in cfg.fits:
        if not 1 <= f.branch <= cfg.count:
            raise ConfigError(f"fit branch {f.branch} outside the cluster", code="BAD_FIT")
        if not set(f.epsilon) <= set(eps):
            raise ConfigError("fit epsilons must belong to epsilon_list", code="BAD_FIT")


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}", code="UNKNOWN_KEY")
    try:
        if "mesh" in d:
            d["mesh"] = MeshRule(**d["mesh"])
        if "blowup" in d:
            d["blowup"] = BlowupConfig(**{k: _tupled(v) for k, v in d["blowup"].items()})
        if "fits" in d:
            d["fits"] = tuple(BranchFit(**{k: _tupled(v) for k, v in f.items()}) for f in d["fits"])
        d = {k: _tupled(v) for k, v in d.items()}
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc), code="BAD_CONFIG") from exc


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config {p} not found", code="NOT_FOUND")
    return from_dict(json.loads(p.read_text()))


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("speclab.presets").iterdir() if p.name.endswith(".json"))


def preset(name: str) -> ExperimentConfig:
    f = resources.files("speclab.presets") / f"{name}.json"
    if not f.is_file():
        raise ConfigError(f"no preset {name!r}; available: {preset_names()}", code="NOT_FOUND")
    return from_dict(json.loads(f.read_text()))


def cache_dir() -> Path:
    return Path(os.environ.get("SPECLAB_CACHE", Path.home() / ".cache" / "speclab"))
