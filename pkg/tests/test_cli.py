import json
import re

import numpy as np
import pytest

import oracles
import scenarios
from softsim import meshgen
from softsim.cli import main
from softsim.io import load_obj, save_obj, save_tet_mesh
from softsim.mesh import SurfaceMesh, TetMesh, extract_boundary


def write_cube_scene(tmp_path, ratio=1.0, solver=None, extra=None):
    m = meshgen.cube_with_core(4, cell=0.01, core=2)
    save_tet_mesh(tmp_path / "cube", m)
    data = {
        "version": 1,
        "mesh": {"node": "cube.node", "ele": "cube.ele"},
        "fixed_vertices": {"box": {"min": [-1, -1, -1], "max": [1, 1, 1e-9]}},
        "actuation_ratio": ratio,
        "solver": solver or {"max_inner_iterations": 300},
        "output": {"directory": "out"},
    }
    if extra:
        data.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path, m


class TestSimulate:
    def test_identity_run_exits_zero_with_input_boundary(self, tmp_path, capsys):
        cfg, m = write_cube_scene(tmp_path, ratio=1.0)
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0
        frame = load_obj(tmp_path / "run" / "frame_0000.obj")
        surf = extract_boundary(m, None, "rest")
        assert np.array_equal(frame.triangles, surf.triangles)
        assert np.allclose(frame.positions, surf.positions, atol=1e-12)
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["converged"] is True
        assert summary["residual_springs"] == 0

    def test_missing_mesh_exits_one_with_path(self, tmp_path, capsys):
        cfg, _ = write_cube_scene(tmp_path)
        (tmp_path / "cube.node").unlink()
        rc = main(["simulate", "--config", str(cfg)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "ParseError" in err and "cube.node" in err

    def test_unconverged_exits_two(self, tmp_path):
        cfg, _ = write_cube_scene(tmp_path, ratio=2.0,
                                  solver={"max_inner_iterations": 2})
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_two_beam_contact_scenario(self, tmp_path, capsys):
        mesh = scenarios.beam_past_pillar()
        save_tet_mesh(tmp_path / "beams", mesh)
        data = {
            "version": 1,
            "mesh": {"node": "beams.node", "ele": "beams.ele"},
            "fixed_vertices": {"ids": mesh.fixed.tolist()},
            "actuation_ratio": 4.0,
            "solver": {"max_inner_iterations": 2000, "convergence_tol": 1e-4,
                       "spring_scale": 1.0},
            "remesh": {"enabled": False},
            "output": {"directory": "out"},
        }
        cfg = tmp_path / "beams.json"
        cfg.write_text(json.dumps(data))
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["residual_springs"] == 0
        assert summary["tracked_springs"] == 0
        assert summary["released_vertices"] > 0  # contact actually happened

    def test_metrics_and_frames_written(self, tmp_path):
        cfg, _ = write_cube_scene(tmp_path, ratio=1.5)
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 0
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "final_body_surface.obj").exists()

    def test_determinism_byte_identical_frames(self, tmp_path):
        cfg, _ = write_cube_scene(tmp_path, ratio=1.5)
        assert main(["simulate", "--config", str(cfg), "--threads", "1",
                     "--out", str(tmp_path / "a")]) == 0
        assert main(["simulate", "--config", str(cfg), "--threads", "1",
                     "--out", str(tmp_path / "b")]) == 0
        for name in ("frame_0000.obj", "final_body_surface.obj", "summary.json"):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes()), name

    def test_set_override_changes_behavior(self, tmp_path):
        cfg, _ = write_cube_scene(tmp_path, ratio=2.0)
        rc = main(["simulate", "--config", str(cfg),
                   "--set", "actuation_ratio=1.0",
                   "--out", str(tmp_path / "run")])
        assert rc == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["actuation_ratio"] == 1.0
        assert len(summary["stages"]) == 1


class TestValidate:
    def test_valid_mesh_all_pass(self, tmp_path, capsys):
        m = meshgen.cube_with_core(4, cell=0.01, core=2)
        save_tet_mesh(tmp_path / "ok", m)
        rc = main(["validate", str(tmp_path / "ok.node")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "FAIL" not in out
        assert "PASS conformity" in out

    def test_duplicate_tet_fails_conformity(self, tmp_path, capsys):
        m = meshgen.cube_with_core(4, cell=0.01, core=2)
        dup = TetMesh(rest=m.rest, pos=m.pos,
                      tets=np.vstack([m.tets, m.tets[:1]]),
                      region=np.concatenate([m.region, m.region[:1]]))
        save_tet_mesh(tmp_path / "dup", dup)
        rc = main(["validate", str(tmp_path / "dup.node")])
        out = capsys.readouterr().out
        assert rc == 1
        assert re.search(r"FAIL conformity.*duplicate", out)

    def test_non_watertight_obstacle_fails(self, tmp_path, capsys):
        sphere = meshgen.icosphere(0.5, 1)
        holed = SurfaceMesh(sphere.positions, sphere.triangles[:-2])
        save_obj(tmp_path / "holed.obj", holed)
        rc = main(["validate", str(tmp_path / "holed.obj")])
        out = capsys.readouterr().out
        assert rc == 1
        assert "FAIL watertight" in out

    def test_watertight_obstacle_passes(self, tmp_path, capsys):
        save_obj(tmp_path / "s.obj", meshgen.icosphere(0.5, 1))
        rc = main(["validate", str(tmp_path / "s.obj")])
        assert rc == 0
        assert "PASS watertight" in capsys.readouterr().out


class TestDetect:
    def test_collision_free_fixture_zero_records(self, tmp_path, capsys):
        m = meshgen.cube_with_core(4, cell=0.01, core=2)
        save_tet_mesh(tmp_path / "free", m)
        rc = main(["detect", str(tmp_path / "free.node")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "records: 0" in out
        assert re.search(r"detection time: [\d.]+ ms", out)

    def test_interpenetrating_fixture_matches_oracle(self, tmp_path, capsys):
        a = meshgen.box_grid((3, 2, 2), cell=0.01)
        b = meshgen.box_grid((3, 2, 2), cell=0.0107, origin=(0.0252, 0.0031, 0.0043))
        m = meshgen.merge_meshes(a, b)
        save_tet_mesh(tmp_path / "pen", m)
        rc = main(["detect", str(tmp_path / "pen.node")])
        out = capsys.readouterr().out
        assert rc == 0
        from softsim.collision import CollisionPipeline
        from softsim.solver import SolverConfig
        cfg = SolverConfig()
        pipe = CollisionPipeline(m, cfg.resolved_contact_offset(m),
                                 cfg.exclusion_rings, cfg.collision_surface)
        excl = {(int(k) // m.n_tets, int(k) % m.n_tets)
                for k in pipe.excl_keys.tolist()}
        expected = oracles.brute_self_collisions(m.pos, m.tets,
                                                 pipe.surface_vertices, excl)
        assert f"records: {len(expected)}" in out
        assert len(expected) > 0

    def test_obstacle_argument(self, tmp_path, capsys):
        m = meshgen.cube_with_core(4, cell=0.01, core=2)
        save_tet_mesh(tmp_path / "m", m)
        save_obj(tmp_path / "obs.obj",
                 meshgen.icosphere(0.015, 2, center=(0.02, 0.02, 0.0)))
        rc = main(["detect", str(tmp_path / "m.node"),
                   "--obstacle", str(tmp_path / "obs.obj")])
        out = capsys.readouterr().out
        assert rc == 0
        assert re.search(r"records: [1-9]", out)


class TestBenchBvh:
    def test_single_size_one_row(self, capsys):
        rc = main(["bench-bvh", "--sizes", "1000"])
        out = capsys.readouterr().out
        assert rc == 0
        rows = [l for l in out.splitlines() if re.match(r"\s+1000\s", l)]
        assert len(rows) == 1

    def test_doubling_growth_subquadratic(self, capsys):
        rc = main(["bench-bvh", "--sizes", "2000,4000,8000"])
        out = capsys.readouterr().out
        assert rc == 0
        growths = [float(m.group(1)) for m in
                   re.finditer(r"visits x([\d.]+)", out)]
        assert len(growths) == 2
        assert all(g < 2.5 for g in growths)

    def test_zero_size_usage_error(self, capsys):
        rc = main(["bench-bvh", "--sizes", "0"])
        assert rc == 1
        assert "sizes must be positive" in capsys.readouterr().err

    def test_garbage_sizes_usage_error(self, capsys):
        rc = main(["bench-bvh", "--sizes", "12,banana"])
        assert rc == 1
