"""Shared contact-scenario fixtures for the CLI and acceptance tests."""

import numpy as np

from softsim import meshgen
from softsim.collision import Obstacle
from softsim.mesh import TetMesh

CELL = 0.01


def bending_beam(nx=10, ny=3, nz=3) -> TetMesh:
    """Cantilever with a chamber layer along the top, sealed at both ends;
    inflation curls it downward."""

    def chamber(i, j, k):
        return k == nz - 1 and 1 <= i <= nx - 3

    return meshgen.box_grid((nx, ny, nz), cell=CELL, chamber_mask=chamber,
                            fixed_box=((-1e-9, -1e-9, -1e-9),
                                       (1e-9, ny * CELL + 1e-9, nz * CELL + 1e-9)))


def beam_past_pillar() -> TetMesh:
    """Beam plus an anchored pillar in one mesh; the curling beam grazes the
    pillar top mid-sweep and clears it at full actuation (self-collision).
    Run with a light spring_scale (~1) so grazing contact slides off."""
    beam = bending_beam()
    pillar = meshgen.box_grid((3, 3, 2), cell=CELL, origin=(0.0861, 0.0013, -0.0761),
                              fixed_box=((0.076, -0.01, -0.0762), (0.14, 0.04, -0.076)))
    return meshgen.merge_meshes(beam, pillar)


WRAP_CYL_CENTER = (0.08, 0.015, -0.034)
WRAP_CYL_RADIUS = 0.024


def wrap_scene() -> tuple[TetMesh, Obstacle]:
    """Long beam curling onto a cylinder under its belly: sustained wrap."""
    beam = bending_beam(nx=14)
    cyl = meshgen.cylinder_surface(WRAP_CYL_RADIUS, 0.07, segments=32,
                                   center=WRAP_CYL_CENTER, axis="y")
    return beam, Obstacle(cyl)


def prong_mesh() -> TetMesh:
    """Two prongs on a shared base, used for prescribed-contact scenarios."""

    def cells(i, j, k):
        return k < 2 or i <= 2 or i >= 6

    return meshgen.box_grid((9, 2, 8), cell=CELL, cell_mask=cells,
                            fixed_box=((-1e-9, -1e-9, -1e-9),
                                       (0.09 + 1e-9, 0.02 + 1e-9, 1e-9)))


def penetrating_prongs() -> TetMesh:
    """Prongs bent into mutual interpenetration; elasticity plus springs must
    separate them back toward the rest gap."""
    m = prong_mesh()
    z = m.rest[:, 2]
    x = m.rest[:, 0]
    h = np.clip((z - 0.02) / 0.06, 0.0, 1.0)
    left = x <= 0.03 + 1e-9
    right = x >= 0.06 - 1e-9
    m.pos = m.rest.copy()
    m.pos[left, 0] += 0.024 * h[left] ** 2
    m.pos[right, 0] -= 0.024 * h[right] ** 2
    # small tilt keeps the contact away from lattice-aligned degeneracies
    m.pos[left, 1] += 0.0013 * h[left] ** 2
    m.pos[left, 2] += 0.0007 * h[left] ** 2
    return m


def dipped_beam_and_box() -> tuple[TetMesh, Obstacle]:
    """Free-hanging beam bent down into a box obstacle; recovery pulls it out."""
    m = meshgen.box_grid((10, 3, 3), cell=CELL,
                         fixed_box=((-1e-9, -1e-9, -1e-9),
                                    (1e-9, 0.03 + 1e-9, 0.03 + 1e-9)))
    x = m.rest[:, 0]
    h = np.clip((x - 0.02) / 0.08, 0.0, 1.0)
    m.pos = m.rest.copy()
    m.pos[:, 2] -= 0.018 * h ** 2
    m.pos[:, 1] += 0.0011 * h ** 2  # generic tilt
    box = Obstacle(meshgen.box_surface((0.055, -0.01, -0.052), (0.135, 0.041, -0.0063)))
    return m, box
