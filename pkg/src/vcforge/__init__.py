"""vcforge: software-defined vClusters on a shared, simulated HPC fleet."""

from .controlplane import ControlPlane
from .errors import VcforgeError
from .manifest import Registry, VClusterManifest, VServiceRecipe, parse_manifest
from .scenario import run_scenario
from .tenancy import Principal, Role, Tenancy

__version__ = "0.1.0"

__all__ = [
    "ControlPlane",
    "Principal",
    "Registry",
    "Role",
    "Tenancy",
    "VClusterManifest",
    "VServiceRecipe",
    "VcforgeError",
    "parse_manifest",
    "run_scenario",
]
