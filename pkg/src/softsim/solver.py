"""Global blend, Anderson acceleration, and the staged actuation loop.

Each iteration runs fresh collision detection, updates the spring set,
projects local targets, then solves one sparse least-squares blend for the
free vertex positions (the same SPD matrix serves all three coordinates).
Anderson extrapolation over the local+global fixed-point map is kept only
when it does not increase the energy evaluated with targets refit at the
candidate. Large actuation ratios run in stages of at most ``alpha_max``,
with remesh checks between stages.

The chamber volume target enters as per-element scaled rest shapes plus a
slow multiplicative drive correction: the blend alone settles short of the
requested ratio because the body resists, so once displacement has roughly
settled the drive is scaled by the remaining deficit until the achieved
volume matches the target.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .collision import CollisionPipeline, Obstacle, SpringElement
from .errors import ConfigError, FactorizationError, SingularSystemError
from .material import StiffnessCurve
from .mesh import CHAMBER, TetMesh, center_shapes, centering_matrix, gather_shapes
from .projection import LocalTargets, project_all

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    max_inner_iterations: int = 200
    convergence_tol: float = 1e-5          # max displacement / bbox diagonal
    anderson_depth: int = 5                # 0 disables extrapolation
    contact_offset: float | None = None    # meters; None = 2e-3 * bbox diagonal
    alpha_max: float = 4.0                 # per-stage ratio cap and remesh volume threshold
    d_max: float = 4.0                     # remesh distortion threshold
    spring_scale: float = 10.0             # spring stiffness / mean body element weight
    exclusion_rings: int = 2
    collision_surface: str = "all"         # "all" boundary vertices or "chamber" only
    volume_feedback: float = 0.7           # drive correction exponent, 0 disables
    drive_cap: float = 5.0                 # clamp on the drive correction factor

    def validate(self) -> None:
        if self.max_inner_iterations < 1:
            raise ConfigError("max_inner_iterations must be >= 1")
        if self.convergence_tol <= 0.0:
            raise ConfigError("convergence_tol must be positive")
        if self.anderson_depth < 0:
            raise ConfigError("anderson_depth must be >= 0")
        if self.contact_offset is not None and self.contact_offset <= 0.0:
            raise ConfigError("contact_offset must be positive")
        if self.alpha_max <= 1.0:
            raise ConfigError("alpha_max must exceed 1")
        if self.d_max <= 1.0:
            raise ConfigError("d_max must exceed 1")
        if self.spring_scale <= 0.0:
            raise ConfigError("spring_scale must be positive")
        if self.exclusion_rings < 0:
            raise ConfigError("exclusion_rings must be >= 0")
        if self.collision_surface not in ("all", "chamber"):
            raise ConfigError("collision_surface must be 'all' or 'chamber'")
        if not 0.0 <= self.volume_feedback <= 1.0:
            raise ConfigError("volume_feedback must lie in [0, 1]")
        if self.drive_cap < 1.0:
            raise ConfigError("drive_cap must be >= 1")

    def resolved_contact_offset(self, mesh: TetMesh) -> float:
        if self.contact_offset is not None:
            return float(self.contact_offset)
        return 2e-3 * mesh.bbox_diag("rest")


@dataclass
class IterationReport:
    stage: int
    iteration: int
    elastic_energy: float
    spring_energy: float
    active_springs: int
    max_displacement: float
    detect_seconds: float
    response_seconds: float
    solve_seconds: float
    accepted_acceleration: bool = False
    pre_update_energy: float = 0.0
    post_update_energy: float = 0.0
    chamber_ratio: float = 1.0
    restarted: bool = False  # spring churn, drive correction, or rejected extrapolation


@dataclass
class StageReport:
    stage: int
    target_ratio: float
    achieved_ratio: float
    converged: bool
    iterations: int
    residual_springs: int        # springs still exerting force at the end
    tracked_springs: int = 0     # includes dormant ones awaiting release
    remesh_triggers: int = 0
    remeshed: bool = False


@dataclass
class SimulationResult:
    mesh: TetMesh
    stages: list[StageReport]
    iterations: list[IterationReport]
    released_vertices: set[int]
    converged: bool

    @property
    def final_chamber_ratio(self) -> float:
        return self.stages[-1].achieved_ratio if self.stages else 1.0

    @property
    def residual_springs(self) -> int:
        return self.stages[-1].residual_springs if self.stages else 0


def stage_schedule(total_ratio: float, alpha_max: float) -> list[float]:
    """Cumulative per-stage chamber ratios: alpha_max steps, clamped at the total."""
    if total_ratio < 1.0:
        raise ConfigError("actuation ratio must be >= 1")
    ratios = []
    k = 1
    while True:
        r = min(total_ratio, k * alpha_max)
        ratios.append(r)
        if r >= total_ratio:
            return ratios
        k += 1


def elastic_energy(positions: np.ndarray, tets: np.ndarray, weights: np.ndarray,
                   rotated_targets: np.ndarray) -> float:
    d = center_shapes(gather_shapes(positions, tets)) - rotated_targets
    return float(np.einsum("e,eij->", weights, d * d))


def spring_energy(positions: np.ndarray, vertices: np.ndarray,
                  targets: np.ndarray, stiffness: np.ndarray) -> float:
    if vertices.size == 0:
        return 0.0
    d = positions[vertices] - targets
    return float(np.sum(stiffness * np.einsum("ij,ij->i", d, d)))


def total_energy(positions: np.ndarray, tets: np.ndarray, weights: np.ndarray,
                 targets: LocalTargets) -> float:
    return (elastic_energy(positions, tets, weights, targets.rotated)
            + spring_energy(positions, targets.spring_vertices,
                            targets.spring_targets, targets.spring_stiffness))


class GlobalSystem:
    """Normal equations of the blend energy over free vertex coordinates.

    The scalar matrix is shared by the x, y, z systems. Anchored vertices are
    eliminated into the right-hand side; vertices referenced by no element
    are pinned in place. The factorization is cached and renewed only when
    the spring set changes.
    """

    def __init__(self, mesh: TetMesh, weights: np.ndarray):
        self.nv = mesh.n_vertices
        self.tets = mesh.tets
        self.weights = weights
        referenced = np.zeros(self.nv, dtype=bool)
        referenced[np.unique(mesh.tets)] = True
        fixed_mask = np.zeros(self.nv, dtype=bool)
        fixed_mask[mesh.fixed] = True
        self.fixed = np.flatnonzero(fixed_mask)
        self.free = np.flatnonzero(referenced & ~fixed_mask)
        n = mesh.n_tets
        cm = centering_matrix()
        self._rows = np.broadcast_to(mesh.tets[:, :, None], (n, 4, 4)).ravel()
        self._cols = np.broadcast_to(mesh.tets[:, None, :], (n, 4, 4)).ravel()
        self._vals = (weights[:, None, None] * cm).ravel()
        self.spring_stamp: tuple | None = None
        self.lu = None
        self.A_fc = None

    def factorize(self, spring_vertices: np.ndarray, spring_stiffness: np.ndarray) -> None:
        stamp = (spring_vertices.tobytes(), spring_stiffness.tobytes())
        if stamp == self.spring_stamp and self.lu is not None:
            return
        if self.fixed.size == 0 and spring_vertices.size == 0:
            raise SingularSystemError(
                "nothing pins rigid translation: anchor at least one vertex or add a spring")
        rows, cols, vals = self._rows, self._cols, self._vals
        if spring_vertices.size:
            rows = np.concatenate([rows, spring_vertices])
            cols = np.concatenate([cols, spring_vertices])
            vals = np.concatenate([vals, spring_stiffness])
        a = sp.coo_matrix((vals, (rows, cols)), shape=(self.nv, self.nv)).tocsr()
        a_free = a[self.free]
        self.A_fc = a_free[:, self.fixed].tocsr()
        try:
            self.lu = splu(a_free[:, self.free].tocsc())
        except RuntimeError as exc:
            if "singular" in str(exc).lower():
                raise SingularSystemError(
                    f"global system is singular: {exc}") from exc
            raise FactorizationError(str(exc)) from exc
        self.spring_stamp = stamp

    def matrix(self, spring_vertices: np.ndarray, spring_stiffness: np.ndarray):
        """Free-vertex scalar system matrix (diagnostics and tests)."""
        self.factorize(spring_vertices, spring_stiffness)
        rows, cols, vals = self._rows, self._cols, self._vals
        if spring_vertices.size:
            rows = np.concatenate([rows, spring_vertices])
            cols = np.concatenate([cols, spring_vertices])
            vals = np.concatenate([vals, spring_stiffness])
        a = sp.coo_matrix((vals, (rows, cols)), shape=(self.nv, self.nv)).tocsr()
        return a[self.free][:, self.free]

    def solve(self, positions: np.ndarray, targets: LocalTargets) -> np.ndarray:
        """Exact minimizer of the blend energy for fixed local targets."""
        self.factorize(targets.spring_vertices, targets.spring_stiffness)
        rhs = np.zeros((self.nv, 3))
        contrib = (self.weights[:, None, None] * targets.rotated).transpose(0, 2, 1)
        np.add.at(rhs, self.tets.ravel(), contrib.reshape(-1, 3))
        if targets.spring_vertices.size:
            np.add.at(rhs, targets.spring_vertices,
                      targets.spring_stiffness[:, None] * targets.spring_targets)
        b = rhs[self.free]
        if self.fixed.size:
            b = b - self.A_fc @ positions[self.fixed]
        out = positions.copy()
        out[self.free] = self.lu.solve(b)
        return out


def assemble_global(mesh: TetMesh, weights: np.ndarray | None = None,
                    spring_vertices: np.ndarray | None = None,
                    spring_stiffness: np.ndarray | None = None) -> GlobalSystem:
    """Build and factorize the global system for the current spring set."""
    if weights is None:
        weights = mesh.rest_volumes()
    system = GlobalSystem(mesh, weights)
    sv = np.empty(0, np.int64) if spring_vertices is None else np.asarray(spring_vertices, np.int64)
    sk = np.empty(0, np.float64) if spring_stiffness is None else np.asarray(spring_stiffness, np.float64)
    system.factorize(sv, sk)
    return system


class AndersonAccelerator:
    """Type-II Anderson mixing over the local+global fixed-point map."""

    def __init__(self, depth: int):
        self.depth = depth
        self.reset()

    def reset(self) -> None:
        self._f: list[np.ndarray] = []
        self._g: list[np.ndarray] = []

    def push(self, x: np.ndarray, gx: np.ndarray) -> None:
        if self.depth == 0:
            return
        self._f.append(gx - x)
        self._g.append(gx.copy())
        if len(self._f) > self.depth + 1:
            self._f.pop(0)
            self._g.pop(0)

    def candidate(self) -> np.ndarray | None:
        """Extrapolated iterate, or None when history cannot support one."""
        if self.depth == 0 or len(self._f) < 2:
            return None
        df = np.stack([self._f[i + 1] - self._f[i] for i in range(len(self._f) - 1)], axis=1)
        dg = np.stack([self._g[i + 1] - self._g[i] for i in range(len(self._g) - 1)], axis=1)
        try:
            gamma, *_ = np.linalg.lstsq(df, self._f[-1], rcond=None)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(gamma)):
            return None
        return self._g[-1] - dg @ gamma


def anderson_accelerate(history_x: list[np.ndarray], history_gx: list[np.ndarray],
                        depth: int) -> np.ndarray:
    """One-shot extrapolation from matched histories; plain update if unusable."""
    acc = AndersonAccelerator(depth)
    for x, gx in zip(history_x, history_gx):
        acc.push(x, gx)
    out = acc.candidate()
    return history_gx[-1].copy() if out is None else out


class Simulation:
    """Owns the mutable solve state: mesh, springs, trees, factorization."""

    def __init__(self, mesh: TetMesh, obstacles: list[Obstacle] | None = None,
                 curve: StiffnessCurve | None = None,
                 config: SolverConfig | None = None,
                 remesh_enabled: bool = True, tessellator=None):
        self.config = config or SolverConfig()
        self.config.validate()
        self.mesh = mesh
        self.obstacles = obstacles or []
        self.curve = curve or StiffnessCurve.constant(0.5)
        self.remesh_enabled = remesh_enabled
        self.tessellator = tessellator
        self.contact_offset = self.config.resolved_contact_offset(mesh)
        self.chamber_rest_volume = mesh.region_volume(CHAMBER, "rest")
        self.has_chamber = self.chamber_rest_volume > 0.0
        self.springs: dict[int, SpringElement] = {}
        self.released_vertices: set[int] = set()
        self.drive_correction = 1.0
        self._rebuild_epoch()

    def _rebuild_epoch(self) -> None:
        """Refresh everything tied to mesh topology (startup and post-remesh)."""
        self.weights = self.mesh.rest_volumes()
        body = self.mesh.region != CHAMBER
        ref = self.weights[body] if np.any(body) else self.weights
        self.spring_stiffness = self.config.spring_scale * float(ref.mean())
        self.pipeline = CollisionPipeline(self.mesh, self.contact_offset,
                                          self.config.exclusion_rings,
                                          self.config.collision_surface)
        self.system = GlobalSystem(self.mesh, self.weights)
        self.anderson = AndersonAccelerator(self.config.anderson_depth)
        self.springs = {}
        self._rest_centered = center_shapes(self.mesh.rest_shapes)

    # -- measurements ------------------------------------------------------

    def chamber_ratio(self, positions: np.ndarray) -> float:
        if not self.has_chamber:
            return 1.0
        from .mesh import tet_volumes
        vols = tet_volumes(positions, self.mesh.tets)
        return float(vols[self.mesh.region == CHAMBER].sum()) / self.chamber_rest_volume

    def detect(self, positions: np.ndarray):
        self.pipeline.refit(positions)
        self_hits = self.pipeline.detect_self(positions)
        obstacle_hits = self.pipeline.detect_obstacles(positions, self.obstacles)
        return self_hits, obstacle_hits

    def _project(self, positions: np.ndarray, drive_ratio: float) -> LocalTargets:
        return project_all(self.mesh, positions, self.curve, drive_ratio, self.springs)

    def _energy(self, positions: np.ndarray, targets: LocalTargets) -> float:
        return total_energy(positions, self.mesh.tets, self.weights, targets)

    # -- the collision-aware inner loop -------------------------------------

    def inner_loop(self, stage_ratio: float, stage_index: int = 0,
                   reports: list[IterationReport] | None = None) -> StageReport:
        from .projection import apply_chamber_drive, refresh_spring_arrays

        cfg = self.config
        mesh = self.mesh
        diag = mesh.bbox_diag("deformed")
        if diag == 0.0:
            diag = 1.0
        x = mesh.pos.copy()
        self.anderson.reset()
        converged = False
        iterations = 0
        feedback_gate = 20.0 * cfg.convergence_tol
        drive = stage_ratio * self.drive_correction
        targets = self._project(x, drive)  # carried across iterations

        for it in range(cfg.max_inner_iterations):
            iterations = it + 1
            restarted = False
            t0 = time.perf_counter()
            self_hits, obstacle_hits = self.detect(x)
            t1 = time.perf_counter()
            active_before = {v for v, s in self.springs.items() if s.active}
            self.springs, update = self.pipeline.update_springs(
                self.springs, x, self.obstacles, self_hits, obstacle_hits,
                self.spring_stiffness)
            self.released_vertices.update(update.released)
            active_now = {v for v, s in self.springs.items() if s.active}
            if active_now != active_before:  # the energy landscape changed
                self.anderson.reset()
                restarted = True
            refresh_spring_arrays(targets, self.springs)
            t2 = time.perf_counter()

            achieved = self.chamber_ratio(x)
            pre_energy = self._energy(x, targets)

            y = self.system.solve(x, targets)
            self.anderson.push(x.ravel(), y.ravel())
            accepted_acc = False
            candidate = self.anderson.candidate()
            targets_plain = self._project(y, drive)
            refresh_spring_arrays(targets_plain, self.springs)
            # the plain update provably lowers the energy under the targets it
            # minimized; an extrapolation is kept only when its refit energy
            # undercuts the current iterate, so either way post <= pre
            plain_post = self._energy(y, targets)
            if candidate is not None:
                xa = candidate.reshape(-1, 3)
                targets_acc = self._project(xa, drive)
                refresh_spring_arrays(targets_acc, self.springs)
                e_acc = self._energy(xa, targets_acc)
                if np.isfinite(e_acc) and e_acc <= pre_energy:
                    x_next, targets_next, post_energy = xa, targets_acc, e_acc
                    accepted_acc = True
                else:
                    # discard the extrapolation but keep the history: the
                    # rejected pairs still sample the same map, and a wipe
                    # here starves the acceleration on slow bending modes
                    x_next, targets_next, post_energy = y, targets_plain, plain_post
                    restarted = True
            else:
                x_next, targets_next, post_energy = y, targets_plain, plain_post
            t3 = time.perf_counter()

            max_disp = float(np.max(np.linalg.norm(x_next - x, axis=1))) / diag
            x, targets = x_next, targets_next

            # the collided set counts tracked springs, not just fresh
            # detections: contact is resolved only once every spring has
            # cleared the release band
            collision_free = (len(self_hits) == 0 and len(obstacle_hits) == 0
                              and not self.springs)
            settled = max_disp < cfg.convergence_tol
            if self.has_chamber and cfg.volume_feedback > 0.0 and stage_ratio > 1.0:
                achieved_now = self.chamber_ratio(x)
                deficit = stage_ratio / max(achieved_now, 1e-9)
                on_target = abs(deficit - 1.0) <= 0.002
                if max_disp < feedback_gate and not on_target:
                    new_corr = self.drive_correction * deficit ** cfg.volume_feedback
                    self.drive_correction = float(np.clip(new_corr, 1.0 / cfg.drive_cap,
                                                          cfg.drive_cap))
                    drive = stage_ratio * self.drive_correction
                    apply_chamber_drive(targets, mesh, self._rest_centered, drive)
                    restarted = True
                    if settled:
                        settled = False  # targets moved; keep iterating

            if reports is not None:
                reports.append(IterationReport(
                    stage=stage_index, iteration=it,
                    elastic_energy=elastic_energy(x, mesh.tets, self.weights,
                                                  targets.rotated),
                    spring_energy=spring_energy(
                        x, targets.spring_vertices, targets.spring_targets,
                        targets.spring_stiffness),
                    active_springs=len(active_now),
                    max_displacement=max_disp,
                    detect_seconds=t1 - t0,
                    response_seconds=t2 - t1,
                    solve_seconds=t3 - t2,
                    accepted_acceleration=accepted_acc,
                    pre_update_energy=pre_energy,
                    post_update_energy=post_energy,
                    chamber_ratio=achieved,
                    restarted=restarted))

            if collision_free and settled:
                converged = True
                break

        mesh.pos[:] = x
        return StageReport(stage=stage_index, target_ratio=stage_ratio,
                           achieved_ratio=self.chamber_ratio(x),
                           converged=converged, iterations=iterations,
                           residual_springs=sum(s.active for s in self.springs.values()),
                           tracked_springs=len(self.springs))

    # -- staged actuation -----------------------------------------------------

    def run(self, total_ratio: float, on_frame=None) -> SimulationResult:
        from .remesh import apply_remesh, scan_triggers

        cfg = self.config
        stages: list[StageReport] = []
        iteration_reports: list[IterationReport] = []
        schedule = stage_schedule(total_ratio, cfg.alpha_max) if self.has_chamber \
            else [1.0]
        if not self.has_chamber and total_ratio > 1.0:
            logger.warning("no chamber elements: actuation ratio %.3g ignored", total_ratio)

        for k, ratio in enumerate(schedule):
            report = self.inner_loop(ratio, stage_index=k, reports=iteration_reports)
            if not report.converged:
                logger.warning("stage %d (ratio %.3g) hit the iteration cap", k, ratio)
            triggers = scan_triggers(self.mesh, self.mesh.rest_volumes(), cfg)
            report.remesh_triggers = len(triggers)
            if triggers and self.remesh_enabled:
                achieved = self.chamber_ratio(self.mesh.pos)
                self.mesh = apply_remesh(self.mesh, triggers, achieved,
                                         tessellator=self.tessellator)
                self._rebuild_epoch()
                report.remeshed = True
            stages.append(report)
            if on_frame is not None:
                on_frame(k, self.mesh)
        return SimulationResult(mesh=self.mesh, stages=stages,
                                iterations=iteration_reports,
                                released_vertices=set(self.released_vertices),
                                converged=all(s.converged for s in stages))


def run_simulation(mesh: TetMesh, obstacles: list[Obstacle] | None,
                   total_ratio: float, config: SolverConfig | None = None,
                   curve: StiffnessCurve | None = None,
                   remesh_enabled: bool = True, tessellator=None,
                   on_frame=None) -> SimulationResult:
    """Full staged solve; see :class:`Simulation` for the moving parts."""
    sim = Simulation(mesh, obstacles, curve, config,
                     remesh_enabled=remesh_enabled, tessellator=tessellator)
    return sim.run(total_ratio, on_frame=on_frame)
