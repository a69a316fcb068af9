"""Reduced-model accelerated parametric inversion for diffuse optical tomography."""

from .driver import InversionConfig, InversionResult, run_inversion
from .fom import MeshConfig, Placement, SolveLedger, assemble
from .pals import PalsModel
from .rom import RomBasis, build_basis, project
from .updates import UpdatePolicy

__all__ = [
    "InversionConfig",
    "InversionResult",
    "run_inversion",
    "MeshConfig",
    "Placement",
    "SolveLedger",
    "assemble",
    "PalsModel",
    "RomBasis",
    "build_basis",
    "project",
    "UpdatePolicy",
]

__version__ = "0.1.0"
