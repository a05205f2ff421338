"""Command-line entry point.

Subcommands: ``simulate`` (config-driven staged solve with frames and
metrics), ``validate`` (structural checks on a mesh or obstacle file),
``detect`` (one-shot collision detection with timing), and ``bench-bvh``
(build/refit/query scaling table on random tet soups).

Exit codes: 0 success, 1 hard error, 2 finished but not converged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .collision import CollisionPipeline, Obstacle
from .errors import SimError
from .io import (load_obj, load_simulation_config, load_tet_mesh, save_obj,
                 write_frame, write_metrics)
from .mesh import BODY, CHAMBER, extract_boundary, validity_checks
from .meshgen import random_tet_soup
from .solver import Simulation, SolverConfig

logger = logging.getLogger("softsim")


def _add_common(p):
    p.add_argument("--verbose", action="store_true", help="debug logging")
    p.add_argument("--threads", type=int, default=None,
                   help="numba thread count (results are thread-count independent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softsim",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run a staged actuation solve")
    ps.add_argument("--config", required=True, help="JSON scene description")
    ps.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dot-path config override, repeatable")
    ps.add_argument("--out", default=None, help="output directory override")
    _add_common(ps)

    pv = sub.add_parser("validate", help="check a mesh (.node/.ele/.vtk) or obstacle (.obj)")
    pv.add_argument("path", help="mesh basename or file")
    _add_common(pv)

    pd = sub.add_parser("detect", help="one-shot collision detection with timing")
    pd.add_argument("path", help="mesh basename or file")
    pd.add_argument("--obstacle", action="append", default=[],
                    help="obstacle OBJ path, repeatable")
    pd.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="solver.* overrides affecting detection")
    pd.add_argument("--no-warmup", action="store_true",
                    help="report the first (cold) run instead of the steady-state run")
    _add_common(pd)

    pb = sub.add_parser("bench-bvh", help="tree build/refit/query scaling table")
    pb.add_argument("--sizes", default="5000,10000,20000,40000,80000",
                    help="comma-separated tet counts")
    pb.add_argument("--seed", type=int, default=0)
    _add_common(pb)
    return parser


def _setup(args) -> None:
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and kernels.NUMBA_AVAILABLE:
        import numba
        numba.set_num_threads(max(1, args.threads))


def cmd_simulate(args) -> int:
    cfg = load_simulation_config(args.config, overrides=args.set)
    out_dir = Path(args.out) if args.out else cfg.output_directory
    out_dir.mkdir(parents=True, exist_ok=True)

    tessellator = None
    if cfg.remesh_tessellator:
        from .remesh import subprocess_tessellator
        tessellator = subprocess_tessellator(cfg.remesh_tessellator)

    sim = Simulation(cfg.mesh, cfg.obstacles, cfg.material.curve, cfg.solver,
                     remesh_enabled=cfg.remesh_enabled, tessellator=tessellator)

    def on_frame(stage, mesh):
        write_frame(out_dir, mesh, stage, write_volume=cfg.write_volume_frames)

    result = sim.run(cfg.actuation_ratio, on_frame=on_frame)
    save_obj(out_dir / "final_body_surface.obj",
             extract_boundary(result.mesh, BODY, "deformed"))
    write_metrics(out_dir / "metrics.csv", result.iterations)

    summary = {
        "actuation_ratio": cfg.actuation_ratio,
        "final_chamber_ratio": result.final_chamber_ratio,
        "residual_springs": result.residual_springs,
        "tracked_springs": result.stages[-1].tracked_springs if result.stages else 0,
        "released_vertices": len(result.released_vertices),
        "converged": result.converged,
        "stages": [{"stage": s.stage, "target_ratio": s.target_ratio,
                    "achieved_ratio": s.achieved_ratio, "converged": s.converged,
                    "iterations": s.iterations, "residual_springs": s.residual_springs,
                    "tracked_springs": s.tracked_springs,
                    "remesh_triggers": s.remesh_triggers, "remeshed": s.remeshed}
                   for s in result.stages],
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"stages: {len(result.stages)}  "
          f"final chamber ratio: {result.final_chamber_ratio:.4f}  "
          f"residual springs: {result.residual_springs}  "
          f"converged: {result.converged}")
    return 0 if result.converged else 2


def cmd_validate(args) -> int:
    path = Path(args.path)
    failures = 0
    if path.suffix == ".obj":
        surf = load_obj(path)
        ok, detail = surf.watertight_report()
        print(f"{'PASS' if ok else 'FAIL'} watertight: {detail}")
        failures += 0 if ok else 1
        if ok:
            vol = surf.signed_volume()
            print(f"{'PASS' if vol > 0 else 'FAIL'} outward-oriented: signed volume {vol:g}")
            failures += 0 if vol > 0 else 1
        print(f"INFO triangles: {surf.n_triangles}, vertices: {surf.n_vertices}")
    else:
        mesh = load_tet_mesh(path)
        for name, ok, detail in validity_checks(mesh):
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            failures += 0 if ok else 1
        n_chamber = int((mesh.region == CHAMBER).sum())
        print(f"INFO tets: {mesh.n_tets} ({n_chamber} chamber), "
              f"vertices: {mesh.n_vertices}, "
              f"chamber volume: {mesh.region_volume(CHAMBER, 'rest'):.6g}, "
              f"body volume: {mesh.region_volume(BODY, 'rest'):.6g}")
    return 0 if failures == 0 else 1


def _run_detection(pipeline, mesh, obstacles):
    t0 = time.perf_counter()
    pipeline.refit(mesh.pos)
    self_hits = pipeline.detect_self(mesh.pos)
    obstacle_hits = pipeline.detect_obstacles(mesh.pos, obstacles)
    return self_hits, obstacle_hits, time.perf_counter() - t0


def cmd_detect(args) -> int:
    mesh = load_tet_mesh(args.path)
    obstacles = [Obstacle(load_obj(p), name=p) for p in args.obstacle]
    solver_overrides = {}
    for item in args.set:
        key, _, raw = item.partition("=")
        if key.startswith("solver."):
            try:
                solver_overrides[key[len("solver."):]] = json.loads(raw)
            except json.JSONDecodeError:
                solver_overrides[key[len("solver."):]] = raw
    cfg = SolverConfig(**solver_overrides)
    cfg.validate()

    pipeline = CollisionPipeline(mesh, cfg.resolved_contact_offset(mesh),
                                 cfg.exclusion_rings, cfg.collision_surface)
    self_hits, obstacle_hits, cold = _run_detection(pipeline, mesh, obstacles)
    elapsed = cold
    if not args.no_warmup:
        self_hits, obstacle_hits, elapsed = _run_detection(pipeline, mesh, obstacles)

    for v in self_hits:
        print(f"self vertex={v}")
    for v, oid in obstacle_hits:
        print(f"obstacle vertex={v} obstacle={oid}")
    print(f"records: {len(self_hits) + len(obstacle_hits)} "
          f"({len(self_hits)} self, {len(obstacle_hits)} obstacle)")
    print(f"surface vertices tested: {len(pipeline.surface_vertices)}")
    print(f"cold detection: {cold * 1e3:.2f} ms")
    print(f"detection time: {elapsed * 1e3:.2f} ms")
    return 0


def cmd_bench_bvh(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError:
        print("error: --sizes must be comma-separated integers", file=sys.stderr)
        return 1
    if not sizes or any(s <= 0 for s in sizes):
        print("error: sizes must be positive", file=sys.stderr)
        return 1

    from .bvh import AabbTree

    print(f"backend: {kernels.BACKEND}")
    print(f"{'tets':>8} {'build_ms':>10} {'refit_ms':>10} {'query_ms':>10} "
          f"{'visits':>12} {'visits/query':>14}")
    rows = []
    for n in sizes:
        mesh = random_tet_soup(n, seed=args.seed)
        t0 = time.perf_counter()
        tree = AabbTree(mesh.tets, mesh.pos)
        t1 = time.perf_counter()
        rng = np.random.default_rng(args.seed + 1)
        moved = mesh.pos + rng.normal(scale=1e-3, size=mesh.pos.shape)
        tree.refit(moved)
        t2 = time.perf_counter()
        queries = rng.uniform(0.0, 1.0, size=(n, 3))
        qverts = np.arange(n, dtype=np.int64)
        # warm once so jit compilation never lands in the timed run
        tree.query_points_in_tets(queries[:1], qverts[:1])
        t3 = time.perf_counter()
        _, _, visits = tree.query_points_in_tets(queries, qverts)
        t4 = time.perf_counter()
        rows.append((n, visits))
        print(f"{n:>8} {1e3 * (t1 - t0):>10.2f} {1e3 * (t2 - t1):>10.2f} "
              f"{1e3 * (t4 - t3):>10.2f} {visits:>12} {visits / n:>14.2f}")
    for (n0, v0), (n1, v1) in zip(rows, rows[1:]):
        print(f"growth {n0}->{n1}: visits x{v1 / v0:.3f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup(args)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "detect":
            return cmd_detect(args)
        if args.command == "bench-bvh":
            return cmd_bench_bvh(args)
    except SimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    parser.error("no command")
    return 1


if __name__ == "__main__":
    sys.exit(main())
