"""Exception types carrying the machine-readable error codes used across the package."""


class SpecLabError(Exception):
    """Base error; ``code`` is a stable identifier such as ``SIGMA_MISSING``."""

    code = "ERROR"

    def __init__(self, message="", code=None, **details):
        if code is not None:
            self.code = code
        self.details = details
        super().__init__(f"[{self.code}] {message}" if message else f"[{self.code}]")


class MeshError(SpecLabError):
    code = "MESH_INVALID"


class AssemblyError(SpecLabError):
    code = "ASSEMBLY"


class SolverError(SpecLabError):
    code = "SOLVER"


class TorsionError(SpecLabError):
    code = "TORSION"


class PerturbationError(SpecLabError):
    code = "PERTURBATION"


class ConfigError(SpecLabError):
    code = "CONFIG"
