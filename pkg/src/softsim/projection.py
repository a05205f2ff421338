"""Local step: per-element target shapes for chamber, body, and springs.

Chamber elements scale their rest shape uniformly to hit the requested
volume ratio. Body elements blend the rigidly fitted current shape with the
rest shape, weighted by the strain-dependent stiffness, then rescale to
preserve the rest volume (incompressibility). Spring targets are simply the
collision-free correspondence points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .material import StiffnessCurve, strain_measures
from .mesh import CHAMBER, TetMesh, center_shape, center_shapes, gather_shapes, \
    shape_volumes, tet_volume

VOLUME_EPS_REL = 1e-12


@dataclass
class LocalTargets:
    """World-frame centered targets (rotation already applied) plus the
    spring pull set; everything the global blend needs, held fixed."""

    rotated: np.ndarray            # (n_tets, 3, 4) R_e applied to the target shape
    rotations: np.ndarray          # (n_tets, 3, 3)
    weights: np.ndarray            # (n_tets,) rest-volume energy weights
    spring_vertices: np.ndarray    # (n_springs,) int
    spring_targets: np.ndarray     # (n_springs, 3)
    spring_stiffness: np.ndarray   # (n_springs,)
    degenerate_fits: int = 0
    degenerate_blends: int = 0
    strain: np.ndarray = field(default_factory=lambda: np.empty(0))


def project_chamber(rest_shape: np.ndarray, ratio: float) -> np.ndarray:
    """Uniform scaling of the centered rest shape to ``ratio`` times its volume."""
    return center_shape(rest_shape) * float(ratio) ** (1.0 / 3.0)


def project_body(rest_shape: np.ndarray, deformed_shape: np.ndarray,
                 curve: StiffnessCurve) -> tuple[np.ndarray, np.ndarray]:
    """Single-element body target: (centered target shape, rotation).

    The deformed shape is pulled back into the rest frame, blended with the
    rest shape by the strain-dependent weight, and rescaled so the target
    volume equals the rest volume exactly. A collapsed blend falls back to
    the rest shape.
    """
    (target,), (rot,), _, _ = _project_bodies(
        rest_shape[None], deformed_shape[None], curve)
    return target, rot


def _project_bodies(rest_shapes: np.ndarray, deformed_shapes: np.ndarray,
                    curve: StiffnessCurve):
    b = center_shapes(rest_shapes)
    a = center_shapes(deformed_shapes)
    rot, sigma, fit_flags = kernels.fit_rotations(b, a)
    strain = strain_measures(np.abs(sigma))
    r_omega = np.asarray(curve.evaluate(strain))
    pulled = rot.transpose(0, 2, 1) @ a
    blend = (1.0 - r_omega)[:, None, None] * pulled + r_omega[:, None, None] * b
    rest_vol = shape_volumes(b)
    blend_vol = shape_volumes(blend)
    bad = np.abs(blend_vol) <= VOLUME_EPS_REL * np.abs(rest_vol)
    scale = np.ones_like(rest_vol)
    good = ~bad
    scale[good] = np.cbrt(rest_vol[good] / blend_vol[good])
    targets = blend * scale[:, None, None]
    targets[bad] = b[bad]
    return targets, rot, strain, (fit_flags, bad)


def project_spring(target: np.ndarray) -> np.ndarray:
    """A zero-rest-length spring's target is its correspondence point."""
    return np.asarray(target, dtype=np.float64)


def refresh_spring_arrays(targets: LocalTargets, springs: dict) -> LocalTargets:
    """Rebuild the spring columns in place; element targets are untouched.

    Only active springs enter the energy; dormant ones are bookkeeping."""
    vids = sorted(v for v, s in springs.items() if s.active)
    targets.spring_vertices = np.asarray(vids, dtype=np.int64)
    targets.spring_targets = np.array([springs[v].record.target for v in vids],
                                      dtype=np.float64).reshape(-1, 3)
    targets.spring_stiffness = np.asarray([springs[v].stiffness for v in vids],
                                          dtype=np.float64)
    return targets


def apply_chamber_drive(targets: LocalTargets, mesh: TetMesh,
                        rest_centered: np.ndarray, chamber_ratio: float) -> LocalTargets:
    """Rescale the chamber rows of an existing projection to a new drive
    ratio, reusing the rotations fitted when the projection was built."""
    chamber = mesh.region == CHAMBER
    if np.any(chamber):
        ratios = np.maximum(chamber_ratio / mesh.chamber_base[chamber], 0.0)
        scaled = rest_centered[chamber] * np.cbrt(ratios)[:, None, None]
        targets.rotated[chamber] = targets.rotations[chamber] @ scaled
    return targets


def project_all(mesh: TetMesh, positions: np.ndarray, curve: StiffnessCurve,
                chamber_ratio: float, springs: dict) -> LocalTargets:
    """Batch local step over every element plus the active spring set.

    ``chamber_ratio`` is the cumulative drive relative to the original rest
    chamber; elements reborn by remeshing carry the inflation already baked
    into their rest shape in ``mesh.chamber_base``.
    """
    rest_c = center_shapes(mesh.rest_shapes)
    def_shapes = gather_shapes(positions, mesh.tets)
    targets, rot, strain, (fit_flags, blend_flags) = _project_bodies(
        mesh.rest_shapes, def_shapes, curve)

    chamber = mesh.region == CHAMBER
    if np.any(chamber):
        ratios = np.maximum(chamber_ratio / mesh.chamber_base[chamber], 0.0)
        targets[chamber] = rest_c[chamber] * np.cbrt(ratios)[:, None, None]

    rotated = rot @ targets

    out = LocalTargets(rotated=rotated, rotations=rot,
                       weights=mesh.rest_volumes(),
                       spring_vertices=np.empty(0, np.int64),
                       spring_targets=np.empty((0, 3)),
                       spring_stiffness=np.empty(0),
                       degenerate_fits=int(fit_flags.sum()),
                       degenerate_blends=int(blend_flags[~chamber].sum()),
                       strain=strain)
    return refresh_spring_arrays(out, springs)
