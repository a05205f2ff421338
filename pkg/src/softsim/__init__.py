"""Collision-aware quasi-static simulation of tetrahedral soft bodies."""

from .bvh import AabbTree, WindingTree
from .collision import CollisionPipeline, CollisionRecord, Obstacle, SpringElement
from .kernels import BACKEND
from .material import MaterialPreset, StiffnessCurve, builtin_presets, strain_measure
from .mesh import (BODY, CHAMBER, DistortionReport, SurfaceMesh, TetMesh,
                   center_shape, extract_boundary, fit_rotation,
                   measure_distortion, tet_volume)
from .projection import project_body, project_chamber, project_spring
from .solver import (Simulation, SimulationResult, SolverConfig,
                     run_simulation, stage_schedule)

__version__ = "0.1.0"

__all__ = [
    "AabbTree", "BACKEND", "BODY", "CHAMBER", "CollisionPipeline",
    "CollisionRecord", "DistortionReport", "MaterialPreset", "Obstacle",
    "Simulation", "SimulationResult", "SolverConfig", "SpringElement",
    "StiffnessCurve", "SurfaceMesh", "TetMesh", "WindingTree",
    "builtin_presets", "center_shape", "extract_boundary", "fit_rotation",
    "measure_distortion", "project_body", "project_chamber", "project_spring",
    "run_simulation", "stage_schedule", "strain_measure", "tet_volume",
    "__version__",
]
