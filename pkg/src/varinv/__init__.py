"""Minimization-based regularization of inverse problems.

The package couples a generic treatment of reduced, all-at-once and
Morozov-type all-at-once Tikhonov/Ivanov regularization (:mod:`varinv.toy`)
with a concrete finite-element instance for 2-D electrical impedance
tomography (:mod:`varinv.eit`, :mod:`varinv.optimizer`).
"""
from .eit import BoundaryRecord, ConductivityField, StateEnsemble
from .mesh import TriMesh, build_structured_mesh
from .optimizer import SolveReport, solve_instance
from .regularization import RegConfig

__all__ = ["BoundaryRecord", "ConductivityField", "RegConfig", "SolveReport", "StateEnsemble",
           "TriMesh", "build_structured_mesh", "solve_instance"]
__version__ = "0.1.0"
