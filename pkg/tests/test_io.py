import json

import numpy as np
import pytest

from softsim import meshgen
from softsim.errors import ConfigError, ParseError, ValidationError
from softsim.io import (METRICS_COLUMNS, apply_overrides, load_node, load_obj,
                        load_simulation_config, load_tet_mesh, load_vtk,
                        save_obj, save_tet_mesh, save_vtk, write_frame,
                        write_metrics)
from softsim.mesh import BODY, CHAMBER, extract_boundary
from softsim.solver import IterationReport


class TestNodeEle:
    def test_handcrafted_single_tet(self, tmp_path):
        (tmp_path / "one.node").write_text(
            "4 3 0 0\n1 0.0 0.0 0.0\n2 1.0 0.0 0.0\n3 0.0 1.0 0.0\n4 0.0 0.0 1.0\n")
        (tmp_path / "one.ele").write_text("1 4 0\n1 1 2 3 4\n")
        mesh = load_tet_mesh(tmp_path / "one")
        assert mesh.n_vertices == 4
        assert mesh.n_tets == 1
        assert mesh.region[0] == BODY

    def test_zero_based_indices_autodetected(self, tmp_path):
        (tmp_path / "z.node").write_text(
            "4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n")
        (tmp_path / "z.ele").write_text("1 4 1\n0 0 1 2 3 1\n")
        mesh = load_tet_mesh(tmp_path / "z")
        assert mesh.n_tets == 1
        assert mesh.region[0] == CHAMBER

    def test_negative_tet_reoriented_with_warning(self, tmp_path, caplog):
        (tmp_path / "n.node").write_text(
            "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / "n.ele").write_text("1 4 0\n1 1 3 2 4\n")  # inverted
        import logging
        with caplog.at_level(logging.WARNING):
            mesh = load_tet_mesh(tmp_path / "n")
        assert mesh.rest_volumes()[0] > 0.0
        assert any("reoriented 1" in r.message for r in caplog.records)

    def test_roundtrip_is_exact(self, tmp_path, rng, small_cube):
        small_cube.rest += rng.normal(scale=1e-7, size=small_cube.rest.shape)
        small_cube.pos = small_cube.rest.copy()
        small_cube.rest_shapes = None
        small_cube.__post_init__()
        save_tet_mesh(tmp_path / "rt", small_cube)
        back = load_tet_mesh(tmp_path / "rt")
        assert np.array_equal(back.tets, small_cube.tets)
        assert np.array_equal(back.rest, small_cube.rest)
        assert np.array_equal(back.region, small_cube.region)

    def test_missing_file_is_parse_error(self, tmp_path):
        with pytest.raises(ParseError, match="not found"):
            load_tet_mesh(tmp_path / "absent")

    def test_bad_row_reports_line(self, tmp_path):
        (tmp_path / "bad.node").write_text("2 3 0 0\n1 0 0 0\n2 oops 0 0\n")
        with pytest.raises(ParseError, match="bad.node:3"):
            load_node(tmp_path / "bad.node")

    def test_unknown_node_reference_rejected(self, tmp_path):
        (tmp_path / "u.node").write_text(
            "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / "u.ele").write_text("1 4 0\n1 1 2 3 9\n")
        with pytest.raises(ValidationError, match="unknown node"):
            load_tet_mesh(tmp_path / "u")


class TestVtk:
    def test_roundtrip(self, tmp_path, small_cube):
        save_vtk(tmp_path / "m.vtk", small_cube, "rest")
        back = load_vtk(tmp_path / "m.vtk")
        assert np.array_equal(back.tets, small_cube.tets)
        assert np.array_equal(back.rest, small_cube.rest)
        assert np.array_equal(back.region, small_cube.region)

    def test_load_via_generic_loader(self, tmp_path, small_cube):
        save_vtk(tmp_path / "m.vtk", small_cube, "rest")
        back = load_tet_mesh(tmp_path / "m.vtk")
        assert back.n_tets == small_cube.n_tets

    def test_non_vtk_rejected(self, tmp_path):
        (tmp_path / "x.vtk").write_text("hello\nworld\nASCII\n")
        with pytest.raises(ParseError):
            load_vtk(tmp_path / "x.vtk")


class TestObj:
    def test_roundtrip(self, tmp_path):
        surf = meshgen.icosphere(0.7, 1, center=(0.1, 0.2, -0.3))
        save_obj(tmp_path / "s.obj", surf)
        back = load_obj(tmp_path / "s.obj")
        assert np.array_equal(back.positions, surf.positions)
        assert np.array_equal(back.triangles, surf.triangles)

    def test_slash_faces_and_quads(self, tmp_path):
        (tmp_path / "q.obj").write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
        surf = load_obj(tmp_path / "q.obj")
        assert surf.n_triangles == 2

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "e.obj").write_text("# nothing\n")
        with pytest.raises(ParseError):
            load_obj(tmp_path / "e.obj")


class TestFramesAndMetrics:
    def test_frame_zero_equals_boundary(self, tmp_path, small_cube):
        paths = write_frame(tmp_path, small_cube, 0)
        surf = extract_boundary(small_cube, None, "deformed")
        back = load_obj(paths[0])
        assert np.array_equal(back.positions, surf.positions)
        assert np.array_equal(back.triangles, surf.triangles)

    def test_identical_meshes_identical_bytes(self, tmp_path, small_cube):
        p1 = write_frame(tmp_path / "a", small_cube, 3)[0]
        p2 = write_frame(tmp_path / "b", small_cube, 3)[0]
        assert p1.read_bytes() == p2.read_bytes()

    def test_volume_frame_optional(self, tmp_path, small_cube):
        paths = write_frame(tmp_path, small_cube, 1, write_volume=True)
        assert len(paths) == 2
        assert paths[1].suffix == ".vtk"

    def test_metrics_rows_and_header(self, tmp_path):
        reports = [IterationReport(stage=0, iteration=i, elastic_energy=1.0,
                                   spring_energy=0.5, active_springs=2,
                                   max_displacement=1e-4, detect_seconds=0.01,
                                   response_seconds=0.02, solve_seconds=0.03)
                   for i in range(10)]
        path = write_metrics(tmp_path / "m.csv", reports)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 11
        assert lines[0] == ",".join(METRICS_COLUMNS)

    def test_empty_metrics_header_only(self, tmp_path):
        path = write_metrics(tmp_path / "m.csv", [])
        assert path.read_text().strip() == ",".join(METRICS_COLUMNS)


class TestConfig:
    def write_scene(self, tmp_path, extra=None, solver=None):
        m = meshgen.cube_with_core(4, cell=0.01, core=2)
        save_tet_mesh(tmp_path / "cube", m)
        sphere = meshgen.icosphere(0.02, 1, center=(0.08, 0.02, 0.02))
        save_obj(tmp_path / "obs.obj", sphere)
        data = {
            "version": 1,
            "mesh": {"node": "cube.node", "ele": "cube.ele"},
            "fixed_vertices": {"box": {"min": [-1, -1, -1], "max": [1, 1, 1e-9]}},
            "obstacles": [{"surface": "obs.obj", "translation": [0.01, 0.0, 0.0],
                           "rotation_deg": [0.0, 0.0, 90.0]}],
            "material": {"preset": "dragon-skin-20"},
            "actuation_ratio": 1.5,
            "solver": solver or {"max_inner_iterations": 40},
            "output": {"directory": "out"},
        }
        if extra:
            data.update(extra)
        (tmp_path / "cfg.json").write_text(json.dumps(data))
        return tmp_path / "cfg.json"

    def test_full_scene_loads(self, tmp_path):
        cfg = load_simulation_config(self.write_scene(tmp_path))
        assert cfg.actuation_ratio == 1.5
        assert cfg.material.mooney_c1 == pytest.approx(0.119)
        assert len(cfg.obstacles) == 1
        assert cfg.mesh.fixed.size == 25
        assert cfg.solver.max_inner_iterations == 40

    def test_unknown_key_rejected(self, tmp_path):
        path = self.write_scene(tmp_path, solver={"max_iterations_typo": 5})
        with pytest.raises(ConfigError, match="max_iterations_typo"):
            load_simulation_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = self.write_scene(tmp_path, extra={"solverr": {}})
        with pytest.raises(ConfigError, match="solverr"):
            load_simulation_config(path)

    def test_version_required(self, tmp_path):
        path = self.write_scene(tmp_path)
        data = json.loads(path.read_text())
        del data["version"]
        path.write_text(json.dumps(data))
        with pytest.raises(ConfigError, match="version"):
            load_simulation_config(path)

    def test_overrides_reach_solver(self, tmp_path):
        path = self.write_scene(tmp_path)
        cfg = load_simulation_config(path, overrides=[
            "solver.alpha_max=2.5", "actuation_ratio=2.0",
            "solver.collision_surface=chamber"])
        assert cfg.solver.alpha_max == 2.5
        assert cfg.actuation_ratio == 2.0
        assert cfg.solver.collision_surface == "chamber"

    def test_every_solver_field_overridable(self, tmp_path):
        from dataclasses import fields
        from softsim.solver import SolverConfig
        values = {"max_inner_iterations": 7, "convergence_tol": 1e-4,
                  "anderson_depth": 2, "contact_offset": 1e-3,
                  "alpha_max": 3.0, "d_max": 5.0, "spring_scale": 2.0,
                  "exclusion_rings": 1, "collision_surface": "chamber",
                  "volume_feedback": 0.4, "drive_cap": 2.0}
        assert set(values) == {f.name for f in fields(SolverConfig)}
        path = self.write_scene(tmp_path)
        overrides = [f"solver.{k}={json.dumps(v)}" for k, v in values.items()]
        cfg = load_simulation_config(path, overrides=overrides)
        for k, v in values.items():
            assert getattr(cfg.solver, k) == v

    def test_obstacle_transform_applied(self, tmp_path):
        path = self.write_scene(tmp_path)
        cfg = load_simulation_config(path)
        sphere = meshgen.icosphere(0.02, 1, center=(0.08, 0.02, 0.02))
        r = np.array([[0.0, -1.0, 0], [1.0, 0.0, 0], [0, 0, 1.0]])  # 90 deg about z
        expected = sphere.positions @ r.T + [0.01, 0.0, 0.0]
        assert np.allclose(cfg.obstacles[0].surface.positions, expected)

    def test_bad_ratio_rejected(self, tmp_path):
        path = self.write_scene(tmp_path, extra={"actuation_ratio": 0.5})
        with pytest.raises(ConfigError, match="actuation_ratio"):
            load_simulation_config(path)

    def test_missing_mesh_file_is_parse_error(self, tmp_path):
        path = self.write_scene(tmp_path, extra={"mesh": {"node": "nope.node",
                                                          "ele": "nope.ele"}})
        with pytest.raises(ParseError, match="not found"):
            load_simulation_config(path)

    def test_apply_overrides_parses_json_values(self):
        data = {"a": {"b": 1}}
        apply_overrides(data, ["a.b=2", "a.c=[1,2]", "d=text"])
        assert data == {"a": {"b": 2, "c": [1, 2]}, "d": "text"}
