"""File formats: TetGen .node/.ele, legacy VTK, OBJ, CSV metrics, JSON config.

Numbers are written with round-trip-safe precision (%.17g) and every format
written here can be read back. Config parsing is strict: unknown keys are
rejected so a misspelled threshold cannot silently fall back to a default.
"""

from __future__ import annotations

import csv
import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .collision import Obstacle
from .errors import ConfigError, ParseError, ValidationError
from .material import MaterialPreset, StiffnessCurve, builtin_presets
from .mesh import BODY, CHAMBER, SurfaceMesh, TetMesh, extract_boundary, fix_orientation
from .solver import IterationReport, SolverConfig

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"
CONFIG_VERSION = 1

METRICS_COLUMNS = ["stage", "iteration", "elastic_energy", "spring_energy",
                   "active_springs", "max_displacement", "detect_seconds",
                   "response_seconds", "solve_seconds"]


# ---------------------------------------------------------------------------
# TetGen .node / .ele


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _parse_error(path, lineno, msg):
    return ParseError(f"{path}:{lineno}: {msg}")


def load_node(path) -> tuple[np.ndarray, np.ndarray]:
    """(ids, positions) from a .node file."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    parts = header.split()
    try:
        count, dim = int(parts[0]), int(parts[1])
    except (ValueError, IndexError):
        raise _parse_error(path, lineno, f"bad node header {header!r}") from None
    if dim != 3:
        raise _parse_error(path, lineno, f"expected 3-d nodes, got {dim}")
    ids = np.empty(count, np.int64)
    pos = np.empty((count, 3))
    for i in range(count):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: expected {count} nodes, found {i}") from None
        p = line.split()
        try:
            ids[i] = int(p[0])
            pos[i] = [float(p[1]), float(p[2]), float(p[3])]
        except (ValueError, IndexError):
            raise _parse_error(path, lineno, f"bad node row {line!r}") from None
    return ids, pos


def load_ele(path) -> tuple[np.ndarray, np.ndarray | None]:
    """(tets as node ids, region attribute or None) from a .ele file."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    parts = header.split()
    try:
        count, per = int(parts[0]), int(parts[1])
        nattr = int(parts[2]) if len(parts) > 2 else 0
    except ValueError:
        raise _parse_error(path, lineno, f"bad element header {header!r}") from None
    if per != 4:
        raise _parse_error(path, lineno, f"only linear tets supported, got {per} nodes")
    tets = np.empty((count, 4), np.int64)
    region = np.empty(count, np.int64) if nattr > 0 else None
    for i in range(count):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: expected {count} tets, found {i}") from None
        p = line.split()
        try:
            tets[i] = [int(p[1]), int(p[2]), int(p[3]), int(p[4])]
            if region is not None:
                region[i] = int(float(p[5]))
        except (ValueError, IndexError):
            raise _parse_error(path, lineno, f"bad element row {line!r}") from None
    return tets, region


def load_tet_mesh(base, default_region: int = BODY) -> TetMesh:
    """Mesh from ``base``.node/...ele (or a .vtk file), validated.

    Node numbering (0- or 1-based, or arbitrary ids) is resolved through the
    .node id column. Negative tets are reoriented with a warning count.
    """
    base = Path(base)
    if base.suffix == ".vtk":
        return load_vtk(base, default_region=default_region)
    if base.suffix in (".node", ".ele"):
        base = base.with_suffix("")
    node_path = base.with_suffix(".node")
    ele_path = base.with_suffix(".ele")
    if not node_path.exists():
        raise ParseError(f"{node_path}: file not found")
    if not ele_path.exists():
        raise ParseError(f"{ele_path}: file not found")
    ids, pos = load_node(node_path)
    raw_tets, raw_region = load_ele(ele_path)
    id_map = {int(i): k for k, i in enumerate(ids)}
    if len(id_map) != len(ids):
        raise ValidationError(f"{node_path}: duplicate node ids")
    try:
        tets = np.array([[id_map[int(v)] for v in row] for row in raw_tets], np.int64)
    except KeyError as exc:
        raise ValidationError(f"{ele_path}: element references unknown node {exc}") from None
    region = np.full(tets.shape[0], default_region, np.uint8)
    if raw_region is not None:
        region = np.where(raw_region == 1, CHAMBER, BODY).astype(np.uint8)
    fixes = fix_orientation(pos, tets)
    if fixes:
        logger.warning("%s: reoriented %d negative-volume tets", ele_path, fixes)
    mesh = TetMesh(rest=pos, pos=pos.copy(), tets=tets, region=region)
    mesh.validate()
    return mesh


def save_tet_mesh(base, mesh: TetMesh) -> tuple[Path, Path]:
    """Write ``base``.node/.ele (1-based, region attribute, rest positions)."""
    base = Path(base)
    node_path = base.with_suffix(".node")
    ele_path = base.with_suffix(".ele")
    with open(node_path, "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, p in enumerate(mesh.rest, start=1):
            fh.write(f"{i} " + " ".join(FLOAT_FMT % c for c in p) + "\n")
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.n_tets} 4 1\n")
        for i, (row, tag) in enumerate(zip(mesh.tets, mesh.region), start=1):
            fh.write(f"{i} " + " ".join(str(v + 1) for v in row) + f" {int(tag)}\n")
    return node_path, ele_path


# ---------------------------------------------------------------------------
# legacy VTK unstructured grid (ASCII)


def save_vtk(path, mesh: TetMesh, configuration: str = "deformed") -> Path:
    path = Path(path)
    p = mesh.pos if configuration == "deformed" else mesh.rest
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("tetrahedral mesh with region tags\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for v in p:
            fh.write(" ".join(FLOAT_FMT % c for c in v) + "\n")
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        for row in mesh.tets:
            fh.write("4 " + " ".join(str(v) for v in row) + "\n")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        fh.write("\n".join(["10"] * mesh.n_tets) + "\n")
        fh.write(f"CELL_DATA {mesh.n_tets}\n")
        fh.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(str(int(r)) for r in mesh.region) + "\n")
    return path


def load_vtk(path, default_region: int = BODY) -> TetMesh:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    tokens: list[str] = []
    with open(path) as fh:
        lines = fh.readlines()
    if len(lines) < 4 or "vtk" not in lines[0].lower():
        raise ParseError(f"{path}:1: not a legacy VTK file")
    if lines[2].strip().upper() != "ASCII":
        raise ParseError(f"{path}:3: only ASCII VTK supported")
    for line in lines[3:]:
        tokens.extend(line.split())
    it = iter(range(len(tokens)))

    def find(keyword):
        for i, tok in enumerate(tokens):
            if tok.upper() == keyword:
                return i
        raise ParseError(f"{path}: missing {keyword} section")

    i = find("POINTS")
    n = int(tokens[i + 1])
    coords = np.array(tokens[i + 3:i + 3 + 3 * n], dtype=float).reshape(n, 3)
    i = find("CELLS")
    m = int(tokens[i + 1])
    body = tokens[i + 3:]
    tets = np.empty((m, 4), np.int64)
    k = 0
    for c in range(m):
        cnt = int(body[k])
        if cnt != 4:
            raise ParseError(f"{path}: cell {c} has {cnt} nodes, expected 4")
        tets[c] = [int(x) for x in body[k + 1:k + 5]]
        k += 5
    region = np.full(m, default_region, np.uint8)
    try:
        i = find("CELL_DATA")
        j = find("LOOKUP_TABLE")
        vals = tokens[j + 2:j + 2 + m]
        region = np.where(np.array(vals, dtype=float) == 1, CHAMBER, BODY).astype(np.uint8)
    except ParseError:
        pass
    fixes = fix_orientation(coords, tets)
    if fixes:
        logger.warning("%s: reoriented %d negative-volume tets", path, fixes)
    mesh = TetMesh(rest=coords, pos=coords.copy(), tets=tets, region=region)
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# OBJ surfaces


def save_obj(path, surface: SurfaceMesh) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for v in surface.positions:
            fh.write("v " + " ".join(FLOAT_FMT % c for c in v) + "\n")
        for t in surface.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return path


def load_obj(path) -> SurfaceMesh:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except (ValueError, IndexError):
                    raise _parse_error(path, lineno, f"bad vertex {line!r}") from None
            elif parts[0] == "f":
                try:
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                except (ValueError, IndexError):
                    raise _parse_error(path, lineno, f"bad face {line!r}") from None
                if len(idx) < 3:
                    raise _parse_error(path, lineno, "face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):  # triangulate fans
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise ParseError(f"{path}: no usable geometry")
    return SurfaceMesh(positions=np.asarray(verts), triangles=np.asarray(tris, np.int64))


# ---------------------------------------------------------------------------
# frames and metrics


def write_frame(out_dir, mesh: TetMesh, frame_index: int,
                write_volume: bool = False) -> list[Path]:
    """Deformed boundary surface as OBJ (optionally the volume as VTK)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    surf = extract_boundary(mesh, None, "deformed")
    paths = [save_obj(out_dir / f"frame_{frame_index:04d}.obj", surf)]
    if write_volume:
        paths.append(save_vtk(out_dir / f"frame_{frame_index:04d}.vtk", mesh))
    return paths


def write_metrics(path, reports: list[IterationReport]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in reports:
            writer.writerow([r.stage, r.iteration,
                             FLOAT_FMT % r.elastic_energy, FLOAT_FMT % r.spring_energy,
                             r.active_springs, FLOAT_FMT % r.max_displacement,
                             FLOAT_FMT % r.detect_seconds, FLOAT_FMT % r.response_seconds,
                             FLOAT_FMT % r.solve_seconds])
    return path


# ---------------------------------------------------------------------------
# configuration

_SCHEMA = {
    "version": None,
    "mesh": {"node": None, "ele": None, "vtk": None,
             "surfaces": {"chamber": None, "body": None}, "tessellator": None},
    "fixed_vertices": {"ids": None, "box": {"min": None, "max": None}},
    "obstacles": [{"surface": None, "translation": None, "rotation_deg": None}],
    "material": {"preset": None, "name": None, "mooney_c1": None,
                 "mooney_c2": None, "curve": None},
    "actuation_ratio": None,
    "solver": {f.name: None for f in fields(SolverConfig)},
    "remesh": {"enabled": None, "tessellator": None},
    "output": {"directory": None, "write_volume_frames": None},
}


def _check_keys(data, schema, path=""):
    if isinstance(schema, dict):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        for key, value in data.items():
            if key not in schema:
                raise ConfigError(f"unknown config key {path + key!r}")
            if schema[key] is not None:
                _check_keys(value, schema[key], path + key + ".")
    elif isinstance(schema, list):
        if not isinstance(data, list):
            raise ConfigError(f"{path[:-1]}: expected a list")
        for i, item in enumerate(data):
            _check_keys(item, schema[0], f"{path[:-1]}[{i}].")


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dot.path=value`` overrides; values parse as JSON, else strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data


@dataclass
class SimulationConfig:
    """Parsed and validated scene description."""

    mesh: TetMesh
    obstacles: list[Obstacle]
    material: MaterialPreset
    actuation_ratio: float
    solver: SolverConfig
    remesh_enabled: bool = True
    remesh_tessellator: str | None = None
    output_directory: Path = Path("out")
    write_volume_frames: bool = False


def _euler_matrix(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _load_obstacle(spec: dict, base_dir: Path, index: int) -> Obstacle:
    if "surface" not in spec:
        raise ConfigError(f"obstacles[{index}]: missing 'surface'")
    surf = load_obj(base_dir / spec["surface"])
    pos = surf.positions
    rot = spec.get("rotation_deg")
    if rot is not None:
        r = _euler_matrix(*(np.deg2rad(np.asarray(rot, float))))
        pos = pos @ r.T
    tr = spec.get("translation")
    if tr is not None:
        pos = pos + np.asarray(tr, float)
    return Obstacle(SurfaceMesh(positions=pos, triangles=surf.triangles),
                    name=str(spec["surface"]))


def _load_material(spec: dict | None) -> MaterialPreset:
    presets = builtin_presets()
    if spec is None:
        return presets["default"]
    if "preset" in spec:
        name = spec["preset"]
        if name not in presets:
            raise ConfigError(f"unknown material preset {name!r}; "
                              f"available: {sorted(presets)}")
        preset = presets[name]
        if "curve" in spec and spec["curve"] is not None:
            preset.curve = StiffnessCurve.from_knots(spec["curve"])
        return preset
    curve = StiffnessCurve.from_knots(spec["curve"]) if spec.get("curve") \
        else StiffnessCurve.constant(0.5)
    try:
        return MaterialPreset(name=spec.get("name", "custom"),
                              mooney_c1=float(spec["mooney_c1"]),
                              mooney_c2=float(spec["mooney_c2"]),
                              curve=curve)
    except KeyError as exc:
        raise ConfigError(f"material: missing {exc}") from None


def _load_mesh_section(spec: dict, base_dir: Path) -> TetMesh:
    if "vtk" in spec:
        return load_vtk(base_dir / spec["vtk"])
    if "node" in spec or "ele" in spec:
        if "node" not in spec:
            raise ConfigError("mesh: 'ele' given without 'node'")
        return load_tet_mesh(base_dir / spec["node"])
    if "surfaces" in spec:
        cmd = spec.get("tessellator")
        if not cmd:
            raise ConfigError("mesh.surfaces requires a 'tessellator' command")
        return initial_tessellation(base_dir / spec["surfaces"]["chamber"],
                                    base_dir / spec["surfaces"]["body"], cmd)
    raise ConfigError("mesh: give 'node'/'ele', 'vtk', or 'surfaces'+'tessellator'")


def initial_tessellation(chamber_obj, body_obj, command) -> TetMesh:
    """Run an external tessellator over the two input surfaces.

    Invoked as ``command chamber.obj body.obj out_base``; must produce
    ``out_base.node/.ele``. Tets are tagged chamber when their centroid falls
    inside the chamber surface.
    """
    from .bvh import WindingTree

    chamber_surface = load_obj(chamber_obj)
    base_cmd = command.split() if isinstance(command, str) else list(command)
    with tempfile.TemporaryDirectory(prefix="softsim-tess-") as tmp:
        out_base = Path(tmp) / "tessellated"
        proc = subprocess.run(base_cmd + [str(chamber_obj), str(body_obj), str(out_base)],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise ParseError(f"tessellator exited with {proc.returncode}: "
                             f"{proc.stderr.strip()}")
        mesh = load_tet_mesh(out_base)
    wt = WindingTree(chamber_surface.positions, chamber_surface.triangles)
    centroids = mesh.rest[mesh.tets].mean(axis=1)
    mesh.region = np.where(wt.contains(centroids), CHAMBER, BODY).astype(np.uint8)
    return mesh


def load_simulation_config(path, overrides: list[str] | None = None) -> SimulationConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if overrides:
        data = apply_overrides(data, overrides)
    _check_keys(data, _SCHEMA)
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, "
                          f"got {data.get('version')!r}")
    if "mesh" not in data:
        raise ConfigError("config: missing 'mesh' section")
    base_dir = path.parent

    mesh = _load_mesh_section(data["mesh"], base_dir)

    fixed = data.get("fixed_vertices")
    if fixed:
        if "ids" in fixed:
            mesh.fixed = np.unique(np.asarray(fixed["ids"], np.int64))
        elif "box" in fixed:
            lo = np.asarray(fixed["box"]["min"], float)
            hi = np.asarray(fixed["box"]["max"], float)
            mesh.fixed = np.flatnonzero(np.all((mesh.rest >= lo) & (mesh.rest <= hi), axis=1))
        if mesh.fixed.size and (mesh.fixed.min() < 0 or mesh.fixed.max() >= mesh.n_vertices):
            raise ConfigError("fixed_vertices ids out of range")

    obstacles = [_load_obstacle(o, base_dir, i)
                 for i, o in enumerate(data.get("obstacles", []))]
    material = _load_material(data.get("material"))

    ratio = float(data.get("actuation_ratio", 1.0))
    if ratio < 1.0:
        raise ConfigError("actuation_ratio must be >= 1")

    solver_spec = data.get("solver", {})
    solver = SolverConfig(**solver_spec)
    solver.validate()

    remesh = data.get("remesh", {})
    output = data.get("output", {})
    return SimulationConfig(
        mesh=mesh, obstacles=obstacles, material=material,
        actuation_ratio=ratio, solver=solver,
        remesh_enabled=bool(remesh.get("enabled", True)),
        remesh_tessellator=remesh.get("tessellator"),
        output_directory=Path(output.get("directory", "out")),
        write_volume_frames=bool(output.get("write_volume_frames", False)))
