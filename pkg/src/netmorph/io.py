"""Experiment configuration and file formats.

Configs are INI files read with :mod:`configparser`; every key is validated
against a schema and unknown keys are rejected.  Field snapshots are legacy
VTK ASCII unstructured grids written with 17 significant digits, so a
read/write round trip reproduces the file byte for byte.
"""

import configparser
import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cli import KINDS


class ConfigError(ValueError):
    pass


def _float_list(text):
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


# (type, default) per section and key
SCHEMA = {
    "experiment": {
        "kind": (str, "simulate"),
        "seed": (int, 0),
        "stride": (int, 0),
    },
    "model": {
        "D": (float, 1e-3),
        "c": (float, 50.0),
        "gamma": (float, 0.5),
        "r": (float, 0.1),
        "rho": (float, 1e-12),
        "S": (float, 1.0),
        "m_boundary": (str, "dirichlet"),
        "extinction_monitor": (_bool, False),
    },
    "mesh": {
        "generator": (str, "diamond"),
        "h": (float, 0.05),
        "n": (int, 8),
        "triangles": (int, 0),
        "refine": (int, 0),
        "file": (str, ""),
    },
    "initial": {
        "kind": (str, "strip"),
        "shift": (float, 0.0),
        "amplitude": (float, 1e-3),
    },
    "stop": {
        "T": (_opt_float, 1.0),
        "tol_E": (_opt_float, None),
        "tol_m": (_opt_float, None),
        "extinction": (_opt_float, None),
        "max_steps": (int, 1_000_000),
    },
    "time": {
        "dt_max": (float, 1e-2),
        "dt_min": (float, 1e-14),
        "solver": (str, "lagged"),
        "on_energy_increase": (str, "warn"),
    },
    "stationary": {
        "eps": (_float_list, [10.0**-k for k in range(1, 7)]),
        "boundary": (str, "full"),
        "alpha": (_opt_float, None),
        "active_set": (str, "hyperbola"),
        "tol": (float, 1e-15),
        "instability_T": (float, 0.0),
    },
    "oned": {
        "n": (int, 200),
        "m0": (float, 0.5),
        "T": (float, 20.0),
        "cB_min": (float, 0.0),
        "cB_max": (float, 4.0),
        "cB_count": (int, 41),
    },
    "convergence": {
        "levels": (int, 3),
        "n0": (int, 8),
    },
}

@dataclass
class ExperimentConfig:
    """Validated configuration; ``values[section][key]`` holds typed entries."""

    values: dict
    source_text: str = ""
    path: str = None

    @property
    def kind(self):
        return self.values["experiment"]["kind"]

    def section(self, name):
        return self.values[name]

    def sha256(self):
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()

    def canonical(self):
        """Fully expanded config as INI text (defaults included)."""
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            for key, val in keys.items():
                if isinstance(val, list):
                    val = ", ".join(repr(v) for v in val)
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)


def _parser():
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    p.optionxform = str  # keep D, S, T distinct from d, s, t
    return p


def parse_config(text, path=None, kind=None):
    """Parse and validate INI ``text``; ``kind`` overrides ``[experiment] kind``."""
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {sec: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()}
              for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            conv = SCHEMA[sec][key][0]
            try:
                values[sec][key] = conv(raw)
            except ValueError:
                raise ConfigError(f"{sec}.{key}: cannot parse {raw!r} as {conv.__name__.strip('_')}") from None
    if kind is not None:
        values["experiment"]["kind"] = kind
    cfg = ExperimentConfig(values, text, path)
    validate(cfg)
    return cfg


def load_config(path, kind=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path), kind)


def validate(cfg):
    v = cfg.values
    kind = v["experiment"]["kind"]
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {', '.join(KINDS)}; got {kind!r}")
    m = v["model"]
    checks = [
        (m["D"] >= 0, "model.D must be >= 0"),
        (m["c"] > 0, "model.c must be > 0"),
        (m["r"] > 0, "model.r must be > 0"),
        (m["rho"] >= 0, "model.rho must be >= 0"),
        (m["m_boundary"] in ("dirichlet", "neumann"), "model.m_boundary must be dirichlet or neumann"),
        (v["experiment"]["stride"] >= 0, "experiment.stride must be >= 0"),
        (v["mesh"]["generator"] in ("diamond", "unit_square", "file"), "mesh.generator must be diamond, unit_square or file"),
        (v["mesh"]["h"] > 0, "mesh.h must be > 0"),
        (v["mesh"]["n"] >= 1, "mesh.n must be >= 1"),
        (v["mesh"]["refine"] >= 0, "mesh.refine must be >= 0"),
        (v["initial"]["kind"] in ("strip", "zero"), "initial.kind must be strip or zero"),
        (v["time"]["dt_max"] > 0, "time.dt_max must be > 0"),
        (0 < v["time"]["dt_min"] <= v["time"]["dt_max"], "time.dt_min must lie in (0, dt_max]"),
        (v["time"]["solver"] in ("lagged", "direct", "cg", "ilu"), "time.solver must be lagged, direct, cg or ilu"),
        (v["time"]["on_energy_increase"] in ("warn", "abort", "reject"),
         "time.on_energy_increase must be warn, abort or reject"),
        (v["stationary"]["boundary"] in ("full", "markers"), "stationary.boundary must be full or markers"),
        (all(e > 0 for e in v["stationary"]["eps"]), "stationary.eps entries must be > 0"),
        (v["stationary"]["active_set"] in ("hyperbola", "all", "none"),
         "stationary.active_set must be hyperbola, all or none"),
        (v["oned"]["n"] >= 1, "oned.n must be >= 1"),
        (v["oned"]["cB_count"] >= 1, "oned.cB_count must be >= 1"),
        (v["convergence"]["levels"] >= 2, "convergence.levels must be >= 2"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if v["mesh"]["generator"] == "file":
        f = v["mesh"]["file"]
        if not f:
            raise ConfigError("mesh.file is required when mesh.generator = file")
        base = Path(cfg.path).parent if cfg.path else Path(".")
        if not (base / f).is_file() and not Path(f).is_file():
            raise ConfigError(f"mesh.file {f!r} does not exist")
    if kind == "simulate":
        if m["gamma"] < 1 and m["rho"] == 0 and not m["extinction_monitor"]:
            raise ConfigError("model.rho = 0 with model.gamma < 1 makes the relaxation singular; "
                              "set rho > 0 or extinction_monitor = true")
        s = v["stop"]
        if all(s[k] is None for k in ("T", "tol_E", "tol_m", "extinction")):
            raise ConfigError("stop needs T, tol_E, tol_m or extinction")
        if s["T"] is not None and s["T"] < 0:
            raise ConfigError("stop.T must be >= 0")
    if kind == "stationary-variational" and not 0.5 <= m["gamma"] < 1:
        raise ConfigError("stationary-variational needs 1/2 <= model.gamma < 1")
    if kind == "oned-classify" and m["gamma"] < 0.5:
        raise ConfigError("oned-classify needs model.gamma >= 1/2")
    if kind == "oned-extinction" and not -1 <= m["gamma"] <= 1:
        raise ConfigError("oned-extinction needs -1 <= model.gamma <= 1")


# -- VTK snapshots --------------------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def write_vtk(path, points, triangles, point_data=None, cell_data=None, title="netmorph snapshot"):
    """Write a legacy VTK ASCII unstructured grid of triangles.

    ``point_data``/``cell_data`` map names to arrays of shape (n,) or (n, k).
    """
    points = np.asarray(points, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {len(points)} double")
    out.extend(f"{_fmt(x)} {_fmt(y)} 0" for x, y in points[:, :2])
    out.append(f"CELLS {len(triangles)} {4 * len(triangles)}")
    out.extend(f"3 {a} {b} {c}" for a, b, c in triangles)
    out.append(f"CELL_TYPES {len(triangles)}")
    out.extend(["5"] * len(triangles))

    def block(header, data):
        if not data:
            return
        out.append(header)
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            ncomp = 1 if arr.ndim == 1 else arr.shape[1]
            out.append(f"SCALARS {name} double {ncomp}")
            out.append("LOOKUP_TABLE default")
            rows = arr.reshape(len(arr), -1)
            out.extend(" ".join(_fmt(v) for v in row) for row in rows)

    block(f"POINT_DATA {len(points)}", point_data)
    block(f"CELL_DATA {len(triangles)}", cell_data)
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk(path):
    """Read a file written by :func:`write_vtk`.

    Returns a dict with ``title``, ``points`` (n, 2), ``triangles``,
    ``point_data`` and ``cell_data``.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# vtk DataFile"):
        raise ValueError(f"{path}: not a legacy VTK file")
    title = lines[1]
    i = 4
    n = int(lines[i].split()[1])
    pts = np.array([[float(t) for t in lines[i + 1 + j].split()[:2]] for j in range(n)])
    i += n + 1
    m = int(lines[i].split()[1])
    tris = np.array([[int(t) for t in lines[i + 1 + j].split()[1:4]] for j in range(m)], dtype=np.int64)
    i += m + 1 + 1 + m  # cells, CELL_TYPES header and entries
    data = {"point_data": {}, "cell_data": {}}
    target, count = None, 0
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] == "POINT_DATA":
            target, count = data["point_data"], int(head[1])
            i += 1
        elif head[0] == "CELL_DATA":
            target, count = data["cell_data"], int(head[1])
            i += 1
        elif head[0] == "SCALARS":
            name, ncomp = head[1], int(head[3]) if len(head) > 3 else 1
            rows = [[float(t) for t in lines[i + 2 + j].split()] for j in range(count)]
            arr = np.array(rows)
            target[name] = arr[:, 0] if ncomp == 1 else arr
            i += 2 + count
        else:
            raise ValueError(f"{path}: unexpected line {lines[i]!r}")
    return {"title": title, "points": pts, "triangles": tris, **data}


def snapshot_fields(mesh, p, m, r):
    """Point and cell arrays of a snapshot: p, m, |u| and log10|u| (clamped at -300)."""
    from . import fem

    g = fem.gradient_per_triangle(mesh, p)
    u = fem.velocity(m, g, fem.per_triangle(mesh, r))
    mag = np.sqrt(np.sum(u * u, axis=1))
    return {"p": np.asarray(p, dtype=float)}, {
        "m": np.asarray(m, dtype=float),
        "u_abs": mag,
        "log10_u_abs": np.log10(np.maximum(mag, 1e-300)),
    }


def write_snapshot(path, mesh, p, m, r, extra_cell_data=None, title="netmorph snapshot"):
    """Snapshot of pressure, conductance and velocity magnitude on ``mesh``."""
    pd, cd = snapshot_fields(mesh, p, m, r)
    if extra_cell_data:
        cd.update(extra_cell_data)
    write_vtk(path, mesh.vertices, mesh.triangles, pd, cd, title)


def rewrite_vtk(src, dst):
    """Read ``src`` and write it back to ``dst`` (byte-identical for our files)."""
    d = read_vtk(src)
    write_vtk(dst, d["points"], d["triangles"], d["point_data"], d["cell_data"], d["title"])


# -- CSV, summary, manifest ------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return _fmt(v)


class CsvWriter:
    """Streaming CSV with a fixed header; floats use 17 significant digits."""

    def __init__(self, path, header):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)
        self.header = tuple(header)

    def write(self, row):
        self._w.writerow([_cell(v) for v in row])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, header, rows):
    with CsvWriter(path, header) as w:
        for row in rows:
            w.write(row)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def mesh_stats(mesh):
    return {
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        "edges": mesh.n_edges,
        "h": mesh.h,
        "h_min": float(mesh.h_T.min()),
        "area": mesh.area,
        "dirichlet_edges": int(len(mesh.dirichlet_edges)),
        "neumann_edges": int(len(mesh.neumann_edges)),
    }


def write_manifest(path, cfg, mesh=None, threads=1, extra=None):
    from . import __version__

    data = {
        "kind": cfg.kind,
        "config_sha256": cfg.sha256(),
        "config_path": cfg.path,
        "version": __version__,
        "seed": cfg.values["experiment"]["seed"],
        "threads": threads,
        "numpy": np.__version__,
    }
    if mesh is not None:
        data["mesh"] = mesh_stats(mesh)
    if extra:
        data.update(extra)
    write_json(path, data)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
