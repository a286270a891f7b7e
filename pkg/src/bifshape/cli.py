"""Command-line front end: mesh generation, bifurcation diagrams,
branch-point location, shape optimization, and SVG plotting.

One JSON config file describes a run; flag overrides are applied on top.
Every subcommand validates its configuration fully before computing and
writes a machine-readable summary.json next to its outputs. Exit codes:
0 success, 1 solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import continuation, shape
from . import moore_spence as ms
from .mesh import MeshError, TriMesh, gen_rounded_square, gen_unit_disk, read_mesh, write_mesh

log = logging.getLogger("bifshape")


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "problem": "allen_cahn",
    "mesh": None,
    "lambda_range": None,
    "dlambda": 0.1,
    "seed_lambda": None,
    "seed_field": "zero",
    "target_lambda": None,
    "epsilon": 1e-10,
    "C": 0.1,
    "n_eigs": 5,
    "n_seed": 5,
    "max_branches": 12,
    "inner_product": {"kind": "h1_vector"},
    "newton_tol": 1e-9,
    "ms_tol": 1e-9,
    "max_iterations": 100,
    "step_length": 0.5,
    "diagnostic": "h1_norm",
    "seed": 0,
    "preflight": True,
    "method": "descent",
    "output_dir": ".",
}


@dataclass
class RunConfig:
    """Validated run configuration; unknown keys are rejected."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path, overrides=()):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top-level config must be a JSON object")
        unknown = set(raw) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = dict(_DEFAULTS)
        values.update(raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not key=value")
            key, _, text = item.partition("=")
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key in override: {key}")
            try:
                values[key] = json.loads(text)
            except json.JSONDecodeError:
                values[key] = text
        cfg = cls(values)
        cfg._validate()
        return cfg

    def _validate(self):
        v = self.values
        if v["problem"] != "allen_cahn":
            raise ConfigError(f"unsupported problem {v['problem']!r}")
        mesh_spec = v["mesh"]
        if not isinstance(mesh_spec, dict):
            raise ConfigError("config requires a 'mesh' object ({'shape': ...} or {'path': ...})")
        if "path" in mesh_spec:
            if not os.path.exists(mesh_spec["path"]):
                raise ConfigError(f"mesh file {mesh_spec['path']} does not exist")
        elif mesh_spec.get("shape") == "disk":
            if not (0.0 < float(mesh_spec.get("h", 0)) < 1.0):
                raise ConfigError("disk mesh requires 0 < h < 1")
        elif mesh_spec.get("shape") == "rounded_square":
            edge = float(mesh_spec.get("edge", 2.0))
            radius = float(mesh_spec.get("radius", 0.1))
            h = float(mesh_spec.get("h", 0))
            if not (edge > 0 and 0 < 2 * radius < edge and 0 < h < radius):
                raise ConfigError("rounded_square mesh requires 0 < 2*radius < edge and 0 < h < radius")
        else:
            raise ConfigError(f"mesh spec {mesh_spec!r} is neither a path nor a known shape")
        if v["lambda_range"] is not None:
            lo, hi = v["lambda_range"]
            if not (float(hi) > float(lo)):
                raise ConfigError("lambda_range must satisfy hi > lo")
            if float(v["dlambda"]) <= 0:
                raise ConfigError("dlambda must be positive")
        for key in ("epsilon", "C", "newton_tol", "ms_tol"):
            if float(v[key]) <= 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("n_eigs", "n_seed", "max_branches", "max_iterations"):
            if int(v[key]) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not (0.0 < float(v["step_length"]) <= 1.0):
            raise ConfigError("step_length must lie in (0, 1]")
        ip = v["inner_product"]
        if not isinstance(ip, dict) or ip.get("kind") not in ("h1_vector", "linear_elasticity"):
            raise ConfigError("inner_product.kind must be h1_vector or linear_elasticity")
        if v["method"] not in ("descent", "lbfgs"):
            raise ConfigError("method must be descent or lbfgs")
        diag = v["diagnostic"]
        if diag != "h1_norm" and not (
            isinstance(diag, dict) and "point" in diag and len(diag["point"]) == 2
        ):
            raise ConfigError("diagnostic must be 'h1_norm' or {'point': [x, y]}")
        if v["seed_field"] != "zero" and not os.path.exists(v["seed_field"]):
            raise ConfigError(f"seed_field file {v['seed_field']} does not exist")

    def build_mesh(self) -> TriMesh:
        spec = self.values["mesh"]
        if "path" in spec:
            return read_mesh(spec["path"])
        if spec["shape"] == "disk":
            return gen_unit_disk(float(spec["h"]))
        return gen_rounded_square(
            float(spec.get("edge", 2.0)), float(spec.get("radius", 0.1)), float(spec["h"])
        )

    def diagnostic_descriptor(self):
        diag = self.values["diagnostic"]
        if diag == "h1_norm":
            return "h1_norm"
        return ("point", float(diag["point"][0]), float(diag["point"][1]))

    def inner_product_spec(self) -> shape.InnerProductSpec:
        ip = self.values["inner_product"]
        return shape.InnerProductSpec(
            kind=ip["kind"], mu_e=float(ip.get("mu", 1.0)), lam_e=float(ip.get("lambda", 1.0))
        )


def _write_summary(out_dir, lambda_final=None, objective_final=None, iterations=None,
                   accepted=None, rejected=None, wall_time=0.0):
    payload = {
        "lambda_final": lambda_final,
        "objective_final": objective_final,
        "iterations": iterations,
        "accepted_steps": accepted,
        "rejected_steps": rejected,
        "wall_time_s": round(wall_time, 3),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


@contextlib.contextmanager
def _run_log(out_dir):
    """Tee log records of the run into <out_dir>/run.log."""
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def _seed_field(cfg, mesh) -> np.ndarray:
    if cfg["seed_field"] == "zero":
        return np.zeros(mesh.num_vertices)
    state = shape.load_state(cfg["seed_field"])
    if state.u.shape != (mesh.num_vertices,):
        raise ConfigError("seed_field length does not match the mesh")
    return state.u


def cmd_mesh(args) -> int:
    t0 = time.time()
    if args.shape == "disk":
        mesh = gen_unit_disk(args.h)
    elif args.shape == "rounded_square":
        mesh = gen_rounded_square(args.edge, args.radius, args.h)
    else:
        raise ConfigError(f"unknown shape {args.shape!r}")
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_mesh(mesh, args.out)
    _write_summary(out_dir, wall_time=time.time() - t0)
    log.info("wrote %s (%d vertices, %d triangles)", args.out, mesh.num_vertices, mesh.num_triangles)
    return 0


def cmd_locate(args) -> int:
    t0 = time.time()
    cfg = RunConfig.load(args.config, args.override)
    if cfg["seed_lambda"] is None:
        raise ConfigError("locate requires seed_lambda")
    out_dir = args.out or cfg["output_dir"]
    with _run_log(out_dir):
        mesh = cfg.build_mesh()
        state = ms.ms_initialize(
            mesh, _seed_field(cfg, mesh), float(cfg["seed_lambda"]),
            n=int(cfg["n_eigs"]), tol=float(cfg["ms_tol"]),
        )
        write_mesh(mesh, os.path.join(out_dir, "mesh.json"))
        shape.save_state(state, os.path.join(out_dir, "state.json"), mesh)
        obj = None
        if cfg["target_lambda"] is not None:
            obj = shape.objective(state, float(cfg["target_lambda"]))
        _write_summary(out_dir, lambda_final=state.lam, objective_final=obj, wall_time=time.time() - t0)
        log.info("branch point located at lambda = %.10f", state.lam)
    return 0


def cmd_diagram(args) -> int:
    t0 = time.time()
    cfg = RunConfig.load(args.config, args.override)
    if cfg["lambda_range"] is None:
        raise ConfigError("diagram requires lambda_range")
    out_dir = args.out or cfg["output_dir"]
    with _run_log(out_dir):
        mesh = cfg.build_mesh()
        lo, hi = (float(x) for x in cfg["lambda_range"])
        diagram = continuation.deflated_continuation(
            mesh, lo, hi, float(cfg["dlambda"]),
            max_branches=int(cfg["max_branches"]), n_seed=int(cfg["n_seed"]),
            tol=float(cfg["newton_tol"]), diagnostic=cfg.diagnostic_descriptor(),
        )
        continuation.refine_with_arclength(mesh, diagram, ds=0.6 * float(cfg["dlambda"]),
                                           tol=float(cfg["newton_tol"]))
        write_mesh(mesh, os.path.join(out_dir, "mesh.json"))
        continuation.export_diagram(
            diagram, mesh, os.path.join(out_dir, "diagram.csv"), os.path.join(out_dir, "fields")
        )
        births = diagram.birth_values()
        with open(os.path.join(out_dir, "births.json"), "w") as fh:
            json.dump({"birth_lambdas": births}, fh, sort_keys=True)
        _write_summary(
            out_dir, lambda_final=births[0] if births else None,
            iterations=len(diagram.branches), wall_time=time.time() - t0,
        )
        log.info("diagram: %d branches, births %s", len(diagram.branches), births)
    return 0


def cmd_optimize(args) -> int:
    t0 = time.time()
    cfg = RunConfig.load(args.config, args.override)
    if cfg["seed_lambda"] is None or cfg["target_lambda"] is None:
        raise ConfigError("optimize requires seed_lambda and target_lambda")
    out_dir = args.out or cfg["output_dir"]
    with _run_log(out_dir):
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.values, fh, sort_keys=True, indent=1)
        mesh = cfg.build_mesh()
        state = ms.ms_initialize(
            mesh, _seed_field(cfg, mesh), float(cfg["seed_lambda"]),
            n=int(cfg["n_eigs"]), tol=float(cfg["ms_tol"]),
        )
        log.info("starting branch point: lambda = %.10f", state.lam)
        opts = shape.OptimizeOptions(
            epsilon=float(cfg["epsilon"]), C=float(cfg["C"]),
            s0=float(cfg["step_length"]), max_iterations=int(cfg["max_iterations"]),
            ms_tol=float(cfg["ms_tol"]), inner_product=cfg.inner_product_spec(),
            method=cfg["method"], preflight=bool(cfg["preflight"]),
            seed=int(cfg["seed"]), run_dir=out_dir,
        )
        result = shape.optimize(mesh, state, float(cfg["target_lambda"]), opts)
        _write_summary(
            out_dir,
            lambda_final=result.state.lam,
            objective_final=shape.objective(result.state, float(cfg["target_lambda"])),
            iterations=len({h["iteration"] for h in result.history}),
            accepted=result.accepted_steps,
            rejected=result.rejected_steps,
            wall_time=time.time() - t0,
        )
        log.info("optimized: lambda = %.10f", result.state.lam)
    return 0


def _svg_polyline(points, color, width=1.5):
    path = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{path}"/>'


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def _render_svg(series, folds, xlabel, ylabel, out_path, logy=False):
    """series: list of (label, [(x, y), ...]); folds: [(x, y), ...]."""
    W, H, pad = 640, 440, 54
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    if logy:
        ys = [np.log10(max(y, 1e-300)) for y in ys]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 += (x1 - x0 or 1.0) * 0.02
    y1 += (y1 - y0 or 1.0) * 0.05
    sx = (W - 2 * pad) / (x1 - x0 or 1.0)
    sy = (H - 2 * pad) / (y1 - y0 or 1.0)

    def to_px(x, y):
        if logy:
            y = np.log10(max(y, 1e-300))
        return pad + (x - x0) * sx, H - pad - (y - y0) * sy

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2:.0f}" y="{H - 12}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="16" y="{H / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {H / 2:.0f})">{ylabel}</text>',
        f'<text x="{pad}" y="{H - pad + 16}" font-size="11" text-anchor="middle">{x0:.4g}</text>',
        f'<text x="{W - pad}" y="{H - pad + 16}" font-size="11" text-anchor="middle">{x1:.4g}</text>',
        f'<text x="{pad - 4}" y="{H - pad}" font-size="11" text-anchor="end">'
        f'{(10**y0 if logy else y0):.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="11" text-anchor="end">'
        f'{(10**y1 if logy else y1):.4g}</text>',
    ]
    for i, (label, pts) in enumerate(series):
        if not pts:
            continue
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(_svg_polyline([to_px(*p) for p in sorted(pts)], color))
    for x, y in folds:
        px, py = to_px(x, y)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="none" stroke="black" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(out_path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def cmd_plot(args) -> int:
    t0 = time.time()
    with open(args.input) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    if header[:4] == ["branch_id", "lambda", "diagnostic", "is_fold"]:
        branches: dict[str, list] = {}
        folds = []
        for bid, lam, diag, is_fold in rows:
            point = (float(lam), float(diag))
            branches.setdefault(bid, []).append(point)
            if is_fold.strip() == "1":
                folds.append(point)
        series = [(bid, pts) for bid, pts in sorted(branches.items())]
        _render_svg(series, folds, "lambda", "diagnostic", args.out)
    elif header[:2] == ["iteration", "objective"]:
        accepted = [(float(r[0]), float(r[1])) for r in rows if r[3] in ("1", "True")]
        _render_svg([("objective", accepted)], [], "iteration", "objective", args.out, logy=True)
    else:
        raise ConfigError(f"{args.input}: unrecognized CSV header {header}")
    _write_summary(out_dir, wall_time=time.time() - t0)
    log.info("wrote %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bifshape",
        description="Bifurcation diagrams and shape control of branch points "
        "for the cubic-quintic Allen-Cahn equation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate a mesh file")
    p.add_argument("--shape", required=True, choices=["disk", "rounded_square"])
    p.add_argument("--h", type=float, required=True, help="target edge length")
    p.add_argument("--edge", type=float, default=2.0)
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    for name, func, help_text in (
        ("diagram", cmd_diagram, "deflated + arclength continuation, CSV output"),
        ("locate", cmd_locate, "locate a branch point from a config seed"),
        ("optimize", cmd_optimize, "drive a branch point to the target parameter"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (defaults to config output_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render a diagram or history CSV to SVG")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MeshError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ms.SolveError, shape.ShapeError, continuation.NewtonError, ValueError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
