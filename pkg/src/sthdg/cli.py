"""Command line front end: ``sthdg run|verify|convergence|mesh-info``.

Configuration is plain ``key = value`` text, one entry per line, with ``#``
comments.  Exit codes: 0 success, 2 config error, 3 solver nonconvergence,
4 verification failure, 5 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("sthdg")


class ConfigError(ValueError):
    pass


BENCHMARK_IDS = ("taylor-green", "manufactured", "stokes-steady", "zero", "custom-file")


@dataclass
class RunConfig:
    mesh: str = "8"                 # builtin n x n square, or a mesh file path
    k_s: int = 2
    k_t: int = 1
    N: int = 8
    T: float = 1.0
    nu: float = 0.01
    alpha: float | None = None      # None -> 8 k_s^2
    benchmark: str = "taylor-green"
    problem_file: str = ""          # for benchmark = custom-file
    tol: float = 1e-10
    max_iter: int = 50
    condense: bool = True
    out: str = "out"
    seed: int = 0
    levels: int = 3
    samples: int = 100
    vtk: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.k_s < 1 or self.k_t < 0:
            raise ConfigError(f"degrees must satisfy k_s >= 1, k_t >= 0 (got {self.k_s}, {self.k_t})")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        for name in ("T", "nu", "tol"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.max_iter < 1 or self.samples < 1:
            raise ConfigError("max_iter and samples must be at least 1")
        if self.levels < 3:
            raise ConfigError("levels must be at least 3")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.benchmark not in BENCHMARK_IDS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; choose from {BENCHMARK_IDS}")
        if self.benchmark == "custom-file" and not self.problem_file:
            raise ConfigError("benchmark custom-file needs problem_file")
        if self.mesh.isdigit() and int(self.mesh) < 1:
            raise ConfigError("builtin mesh size must be at least 1")

    # -- text round trip
    def emit(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else _emit_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        vals = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: unknown or malformed entry {raw!r}")
            vals[key] = _coerce(key, types[key], val)
        vals.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**vals)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, **overrides)


def _emit_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, typ, val):
    typ = str(typ)
    try:
        if val.lower() == "none" and "None" in typ:
            return None
        if typ.startswith("bool"):
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ.startswith("int"):
            return int(val)
        if typ.startswith("float"):
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {typ}") from None
    return val


# ----------------------------------------------------------------- problem setup

def load_mesh(cfg: RunConfig):
    from .mesh import MeshError, build_uniform_mesh, check_conforming, read_mesh
    if cfg.mesh.isdigit():
        return build_uniform_mesh(int(cfg.mesh))
    try:
        mesh = read_mesh(cfg.mesh)
    except OSError as exc:
        raise ConfigError(f"cannot read mesh {cfg.mesh}: {exc}") from None
    except MeshError as exc:
        raise ConfigError(str(exc)) from None
    check_conforming(mesh)
    return mesh


def load_problem(cfg: RunConfig):
    from .benchmarks import get_benchmark, load_problem_file
    if cfg.benchmark == "custom-file":
        try:
            return load_problem_file(cfg.problem_file, cfg.nu, cfg.T)
        except OSError as exc:
            raise ConfigError(f"cannot read problem file: {exc}") from None
    return get_benchmark(cfg.benchmark, cfg.nu, cfg.T)


def solver_config(cfg: RunConfig):
    from .solver import SolverConfig
    return SolverConfig(alpha=cfg.alpha, tol=cfg.tol, max_iter=cfg.max_iter, condense=cfg.condense)


# ----------------------------------------------------------------- output

def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"output directory {p} is not writable")
    return p


def write_vtk(path, space, u, p=None, title="sthdg field") -> None:
    """Legacy ASCII unstructured grid; every element carries its own three
    vertices so the discontinuous field is written without averaging."""
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts = space.v0[:, None, :] + np.einsum("kij,vj->kvi", space.J, ref)
    uv = np.einsum("vb,kcb->kvc", space.vel_basis.eval(ref), u)
    ne = space.ne
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {3 * ne} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in pts.reshape(-1, 2).tolist()]
    out.append(f"CELLS {ne} {4 * ne}")
    out += [f"3 {3 * k} {3 * k + 1} {3 * k + 2}" for k in range(ne)]
    out.append(f"CELL_TYPES {ne}")
    out += ["5"] * ne
    out.append(f"POINT_DATA {3 * ne}")
    out.append("VECTORS u double")
    out += [f"{a!r} {b!r} 0.0" for a, b in uv.reshape(-1, 2).tolist()]
    if p is not None:
        pv = np.einsum("vb,kb->kv", space.pres_basis.eval(ref), p)
        out += ["SCALARS p double 1", "LOOKUP_TABLE default"]
        out += [repr(v) for v in pv.ravel().tolist()]
    Path(path).write_text("\n".join(out) + "\n")


def _end_values(st):
    """Coefficients at t_{m+1}^- (unnormalized Legendre: value 1 at xi = 1)."""
    return st.u.sum(axis=-1), st.p.sum(axis=-1)


# ----------------------------------------------------------------- commands

def cmd_run(cfg: RunConfig) -> int:
    from .mesh import SpaceTimeLayout
    from .solver import run_simulation
    from .verify import write_csv
    out = ensure_dir(cfg.out)
    mesh = load_mesh(cfg)
    data = load_problem(cfg)
    from .mesh import build_face_topology
    from .spaces import SlabSpace
    faces = build_face_topology(mesh)
    space = SlabSpace(mesh, faces, cfg.k_s, cfg.k_t)

    def snapshot(st):
        if cfg.vtk:
            u, p = _end_values(st)
            write_vtk(out / f"u_{st.n + 1:04d}.vtk", space, u, p, f"sthdg {data.name} t={st.t1!r}")

    run = run_simulation(data, solver_config(cfg), mesh, SpaceTimeLayout.uniform(cfg.T, cfg.N),
                         cfg.k_s, cfg.k_t, faces=faces, diagnostics=True, callback=snapshot)
    ledger = [{k: e[k] for k in ("slab", "t0", "t1", "energy_in", "energy_out", "jump", "viscous",
                                 "convective", "forcing", "residual", "relative_residual")}
              for e in run.ledger]
    for e, st in zip(ledger, run.states):
        e["iterations"] = st.iterations
    write_csv(ledger, out / "energy_ledger.csv")
    conf = [dict(slab=i, **c) for i, c in enumerate(run.conformity)]
    write_csv(conf, out / "conformity.csv")
    s = run.summary()
    print(f"slabs={s['slabs']} converged={s['converged']} max_iterations={s['max_iterations']} "
          f"max_energy_residual={s['max_energy_residual']:.3e} final_energy={s['final_energy']:.6e}")
    if not run.converged:
        print("error: Picard iteration did not converge; partial artifacts kept", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def verify_checks(cfg: RunConfig, levels=(2, 4, 8), duality: bool = True):
    """Run the identity suite, constant estimates and an energy report;
    returns (rows, failures)."""
    from .benchmarks import taylor_green
    from .mesh import SpaceTimeLayout, build_uniform_mesh
    from .solver import run_simulation
    from .verify import constant_estimates, energy_inequality_report, identity_suite, make_space
    rows, failures = [], []

    def check(name, value, ok, bound):
        rows.append({"check": name, "value": value, "bound": bound, "pass": bool(ok)})
        if not ok:
            failures.append(name)

    space = make_space(2, cfg.k_s, cfg.k_t)
    ids = identity_suite(space, seed=cfg.seed, samples=cfg.samples, alpha=cfg.alpha)
    for key in ("viscous", "convection", "positivity", "lifting", "lifting_2k", "gradient",
                "time_lifting", "time_lifting_k0"):
        check(f"identity_{key}", ids[key], ids[key] <= 1e-10, 1e-10)
    check("positivity_min", ids["positivity_min"], ids["positivity_min"] >= -1e-12, -1e-12)

    est = constant_estimates(levels, cfg.k_s, cfg.k_t, alpha=cfg.alpha,
                             samples=min(cfg.samples, 50), seed=cfg.seed, duality=duality,
                             nu=cfg.nu)
    for r in est["rows"]:
        check(f"coercivity_n{r['n']}", r["coercivity"], r["coercivity"] > 0, 0.0)
    for key, ok in est["bounded"].items():
        check(f"bounded_{key}", est["rows"][-1][key], ok, "1.2 x running max")

    data = taylor_green(cfg.nu, 0.5)
    run = run_simulation(data, solver_config(cfg), build_uniform_mesh(4),
                         SpaceTimeLayout.uniform(0.5, 4), cfg.k_s, cfg.k_t)
    if not run.converged:
        check("energy_run_converged", 0, False, 1)
    else:
        rep = energy_inequality_report(run, data)
        check("energy_slack", rep["min_relative_slack"], rep["min_relative_slack"] >= -1e-8, -1e-8)
        check("energy_slab_residual", rep["max_slab_residual"], rep["max_slab_residual"] <= 1e-8, 1e-8)
        check("energy_cumulative_residual", rep["max_cumulative_residual"],
              rep["max_cumulative_residual"] <= 1e-8, 1e-8)
        check("energy_nonincreasing", float(rep["nonincreasing"]), rep["nonincreasing"], 1)
    return rows, failures, est


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import write_csv
    out = ensure_dir(cfg.out)
    rows, failures, est = verify_checks(cfg)
    write_csv(rows, out / "verify_checks.csv", header=["check", "value", "bound", "pass"])
    write_csv(est["rows"], out / "constants.csv")
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']} value={r['value']}")
    if failures:
        print(f"verification failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_convergence(cfg: RunConfig) -> int:
    from .verify import consistency_residuals, convergence_study, write_csv
    if not cfg.mesh.isdigit():
        raise ConfigError("convergence studies need a builtin mesh size")
    out = ensure_dir(cfg.out)
    n0 = int(cfg.mesh)
    levels = [(n0 * 2**i, cfg.N * 2**i) for i in range(cfg.levels)]
    data = load_problem(cfg)
    study = convergence_study(data, solver_config(cfg), levels, cfg.k_s, cfg.k_t)
    rows = [dict(r) for r in study.records]
    for r in rows:
        r.pop("seconds", None)
    if data.exact_grad is not None:
        for r, c in zip(rows, consistency_residuals(study, data)):
            r.update({f"consistency_{k}": v for k, v in c.items() if k not in ("n", "N")})
    metrics = [k for k in rows[0] if k not in ("n", "N", "h", "tau", "iterations")]
    metrics += [k for r in rows for k in r if k not in metrics and k not in ("n", "N", "h", "tau", "iterations")]
    from .verify import observed_order
    order_row = {"n": "order"}
    for k in metrics:
        vals = [(r["h"], r[k]) for r in rows if k in r]
        order_row[k] = observed_order(*zip(*vals)) if len(vals) >= 2 else float("nan")
    header = ["n", "N", "h", "tau", "iterations"] + metrics
    text = write_csv(rows + [order_row], out / "convergence.csv", header=header)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_mesh_info(cfg: RunConfig) -> int:
    from .mesh import build_face_topology, mesh_metrics
    from .spaces import SlabSpace
    mesh = load_mesh(cfg)
    faces = build_face_topology(mesh)
    info = mesh_metrics(mesh, faces)
    info.update(elements=mesh.n_elements, vertices=mesh.n_vertices, faces=faces.n_faces,
                boundary_faces=int(len(faces.boundary)))
    info.update(SlabSpace(mesh, faces, cfg.k_s, cfg.k_t).counts())
    for k, v in info.items():
        print(f"{k} = {v}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "convergence": cmd_convergence,
            "mesh-info": cmd_mesh_info}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sthdg", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--levels", type=int, help="number of refinement levels")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .solver import NonconvergenceError
    try:
        try:
            text = Path(args.config).read_text() if args.config else ""
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        text += "\n" + "\n".join(args.set)
        cfg = RunConfig.parse(text, seed=args.seed, out=args.out, levels=args.levels)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonconvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
