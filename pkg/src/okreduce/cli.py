"""Command-line front end: ``okreduce {mesh,diagnose,solve,landscape,export}``.

Runs are driven by a plain-text config with one ``key = value`` per line
(``#`` starts a comment).  Any key can be overridden with ``--set key=value``.
Every run writes ``config.txt`` (the effective config), ``manifest.txt``
(versions, command line, timings, outputs) and its own artifacts into the
output directory.

Exit codes: 0 success, 2 config error, 3 numerical divergence, 4 geometry error.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import torus_field as tf
from .energy import first_variation_residual, total_energy, write_residual_csv
from .jacobi import (DegenerateGeometry, SolverError, coercivity_probe, jacobi_residuals, kernel_check, write_coo,
                     write_eigen_report)
from .landscape import (CriticalConfig, ScanError, critical_points, multiplicity_verdict, negative_control, scan,
                        verify_bifurcation, write_critical_csv)
from .reduction import BaseBundle, DivergenceError, SolverConfig, solve_auxiliary, write_report, write_trace
from .surface import (GeometryError, PerturbationTooLarge, build_schwarz_p, compute_geometry, enclosed_volume,
                      perturb, read_obj, write_obj, write_vertex_csv)

logger = logging.getLogger("okreduce")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_GEOMETRY = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _xi(text: str) -> tuple[float, float, float]:
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"xi needs three numbers, got {text!r}")
    return tuple(float(p) for p in parts)


@dataclass
class RunConfig:
    resolution: int = 64
    relax: bool = True
    grid_n: int = 64
    modes: int = 8
    operator: str = "hessian"
    gamma: float = 0.01
    forcing: str = "cos(1,0,0) + cos(0,1,0) + cos(0,0,1)"
    tol: float = 1e-9
    max_iter: int = 60
    damping: float = 1.0
    vol_tol: float = 1e-8
    cap: float = 0.1
    gamma_max: float = 0.1
    landscape_m: int = 9
    xi: tuple = (0.0, 0.0, 0.0)
    output: str = "okreduce_out"
    seed: int = 0

    _parsers = {
        "resolution": int, "relax": _bool, "grid_n": int, "modes": int, "operator": str, "gamma": float,
        "forcing": str, "tol": float, "max_iter": int, "damping": float, "vol_tol": float, "cap": float,
        "gamma_max": float, "landscape_m": int, "xi": _xi, "output": str, "seed": int,
    }

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, value: str) -> None:
        key = key.strip().lower()
        if key not in self._parsers:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(self, key, self._parsers[key](value.strip()))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            k, v = line.split("=", 1)
            cfg.set(k, v)
        return cfg

    def to_text(self) -> str:
        out = []
        for k in self.keys():
            v = getattr(self, k)
            if k == "xi":
                v = " ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"

    def validate(self) -> None:
        checks = [
            (self.resolution >= 32, f"resolution {self.resolution} below minimum 32"),
            (self.grid_n >= 4, "grid_n must be >= 4"),
            (1 <= self.modes <= 32, "modes must lie in [1, 32]"),
            (self.operator in ("hessian", "cotan"), "operator must be 'hessian' or 'cotan'"),
            (0 < self.gamma_max, "gamma_max must be positive"),
            (0 <= self.gamma <= self.gamma_max, f"gamma {self.gamma} outside [0, gamma_max={self.gamma_max}]"),
            (self.tol > 0 and self.vol_tol > 0, "tolerances must be positive"),
            (self.max_iter >= 1, "max_iter must be >= 1"),
            (0 < self.damping <= 1, "damping must lie in (0, 1]"),
            (0 < self.cap <= 0.5, "cap must lie in (0, 0.5]"),
            (self.landscape_m >= 5, "landscape_m must be >= 5"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            spec = tf.ForcingSpec.parse(self.forcing)
        except tf.TorusFieldError as exc:
            raise ConfigError(str(exc)) from exc
        if spec.band_limit >= self.grid_n / 2:
            raise ConfigError("forcing band limit aliases on the field grid")

    @property
    def forcing_spec(self) -> tf.ForcingSpec:
        return tf.ForcingSpec.parse(self.forcing)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(tol=self.tol, max_iter=self.max_iter, damping=self.damping, vol_tol=self.vol_tol,
                            cap=self.cap, gamma_max=self.gamma_max, modes=self.modes)


class Run:
    """Output directory, manifest and timings of one invocation."""

    def __init__(self, cfg: RunConfig, command: str, argv: list[str]):
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.argv = argv
        self.timings: list[tuple[str, float]] = []
        self.files: list[str] = []
        self._t = time.perf_counter()
        (self.out / "config.txt").write_text(cfg.to_text())
        self.files.append("config.txt")

    def lap(self, label: str) -> None:
        now = time.perf_counter()
        self.timings.append((label, now - self._t))
        self._t = now

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def finish(self, status: str) -> None:
        lines = [
            f"okreduce {__version__}",
            f"command: {self.command}",
            f"argv: {' '.join(self.argv)}",
            f"python: {platform.python_version()}  numpy: {np.__version__}  scipy: {scipy.__version__}",
            f"status: {status}",
            "timings:",
            *[f"  {k}: {v:.3f} s" for k, v in self.timings],
            "outputs:",
            *[f"  {f}" for f in sorted(set(self.files))],
            "config:",
            *["  " + line for line in self.cfg.to_text().splitlines()],
        ]
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _base_mesh(run: Run):
    """Reuse ``base.obj`` in the output directory when it exists, otherwise build and store it."""
    obj = run.out / "base.obj"
    if obj.exists():
        mesh = read_obj(obj)
        logger.info("loaded base mesh from %s", obj)
    else:
        mesh = build_schwarz_p(run.cfg.resolution, relax=run.cfg.relax)
        write_obj(mesh, run.path("base.obj"))
        run.files.append("base.obj.wrap")
    return mesh


def _bundle(run: Run) -> BaseBundle:
    b = BaseBundle.from_mesh(_base_mesh(run), kind=run.cfg.operator)
    run.lap("base bundle")
    return b


def _diagnostics_text(mesh, geom, bundle: BaseBundle | None, report=None) -> str:
    nu_int = geom.normals.T @ geom.mass
    lines = [
        f"vertices: {mesh.n_vertices}",
        f"triangles: {mesh.n_triangles}",
        f"euler_characteristic: {geom.euler}",
        f"area: {geom.total_area:.12f}",
        f"volume: {enclosed_volume(mesh):.12f}",
        f"max_abs_H: {np.abs(geom.H).max():.6e}",
        f"gauss_bonnet: {geom.angle_defect.sum():.12f} (2 pi chi = {2 * np.pi * geom.euler:.12f})",
        f"int_nu: {' '.join(f'{x:.3e}' for x in nu_int)}",
        f"mean_edge: {geom.mean_edge:.6e}",
    ]
    if bundle is not None:
        G = bundle.gram.matrix
        lines.append("gram:")
        lines += ["  " + " ".join(f"{x:.9e}" for x in row) for row in G]
        lines.append(f"gram_condition: {bundle.gram.cond:.6e}")
        lines.append(f"lambda0: {bundle.lambda0:.6e}")
    if report is not None:
        lines.append("kernel:")
        lines += ["  " + line for line in report.to_text().splitlines()]
    return "\n".join(lines) + "\n"


def cmd_mesh(run: Run) -> int:
    cfg = run.cfg
    mesh = build_schwarz_p(cfg.resolution, relax=cfg.relax)
    run.lap("build mesh")
    write_obj(mesh, run.path("base.obj"))
    run.files.append("base.obj.wrap")
    geom = compute_geometry(mesh)
    write_vertex_csv(mesh, geom, run.path("geometry.csv"))
    bundle = BaseBundle.from_mesh(mesh, kind=cfg.operator)
    report = kernel_check(bundle.op, bundle.geom)
    run.lap("diagnostics")
    run.path("diagnostics.txt").write_text(_diagnostics_text(mesh, geom, bundle, report))
    if "relax_history" in mesh.meta:
        hist = mesh.meta["relax_history"]
        run.path("relax_history.txt").write_text("".join(f"{i} {h:.6e}\n" for i, h in enumerate(hist)))
    print(f"mesh: chi={geom.euler} area={geom.total_area:.6f} max|H|={np.abs(geom.H).max():.3e}")
    return EXIT_OK


def cmd_diagnose(run: Run) -> int:
    bundle = _bundle(run)
    report = kernel_check(bundle.op, bundle.geom)
    coer = coercivity_probe(bundle.op, bundle.geom, bundle.gram, samples=50, seed=run.cfg.seed)
    run.lap("kernel and coercivity")
    text = _diagnostics_text(bundle.mesh, bundle.geom, bundle, report)
    text += f"jacobi_residual_strong: {' '.join(f'{x:.6e}' for x in jacobi_residuals(bundle.op, bundle.geom, 'strong'))}\n"
    text += f"coercivity_min_ratio: {coer.min():.6e}\n"
    run.path("diagnostics.txt").write_text(text)
    write_eigen_report(report, run.path("kernel_report.txt"))
    print(report.message)
    return EXIT_OK if report.passed else EXIT_GEOMETRY


def cmd_solve(run: Run, xi) -> int:
    cfg = run.cfg
    bundle = _bundle(run)
    f = cfg.forcing_spec
    state = solve_auxiliary(bundle, cfg.gamma, xi, f, cfg.solver_config(), with_energy=True)
    run.lap("auxiliary solve")
    write_report(state, run.path("solve_report.json"), inputs={"gamma": cfg.gamma, "xi": list(map(float, xi)),
                                                                 "forcing": f.to_text()})
    write_trace(state, run.path("solve_trace.csv"))
    np.savetxt(run.path("w.txt"), state.w, fmt="%.17g")
    gmesh = perturb(bundle.mesh, bundle.geom, state.w, state.xi, cap=cfg.cap)
    write_obj(gmesh, run.path("perturbed.obj"))
    run.files.append("perturbed.obj.wrap")
    res = first_variation_residual(gmesh, bundle.geom, bundle.gram, cfg.gamma, f, cfg.modes)
    write_residual_csv(res, run.path("residual.csv"))
    print(f"solve: {state.iterations} iterations, |w|={state.w_sup:.3e}, lambda={state.lam:.6e}, "
          f"|A|={np.linalg.norm(state.A):.3e}")
    return EXIT_OK


def cmd_landscape(run: Run) -> int:
    cfg = run.cfg
    bundle = _bundle(run)
    f = cfg.forcing_spec
    scfg = cfg.solver_config()
    rmap = scan(bundle, cfg.gamma, f, cfg.landscape_m, scfg)
    run.lap("scan")
    rmap.write_csv(run.path("landscape.csv"))
    points = critical_points(rmap, CriticalConfig())
    median = float(np.median(rmap.A_norm[rmap.converged]))
    lines = []
    if not (len(points) == 1 and points[0].kind == "degenerate-manifold"):
        for p in points:
            rep = verify_bifurcation(bundle, cfg.gamma, f, p.xi, median, scfg)
            p.A_norm = rep.A_norm
            lines.append(f"  {p.kind:<10s} xi=({p.xi[0]:.5f}, {p.xi[1]:.5f}, {p.xi[2]:.5f}) phi={p.phi:.12f} "
                         f"|A|/median={rep.ratio:.3e} {'ok' if rep.passed else 'FAILED'}")
        ctrl = negative_control(bundle, cfg.gamma, f, rmap, points, scfg)
        lines.append(f"  negative control xi=({ctrl.xi[0]:.4f}, {ctrl.xi[1]:.4f}, {ctrl.xi[2]:.4f}) "
                     f"|A|/median={ctrl.ratio:.3e} {'ok' if ctrl.passed else 'FAILED'}")
    run.lap("critical points")
    write_critical_csv(points, run.path("critical_points.csv"))
    verdict = multiplicity_verdict(points)
    summary = [f"gamma: {cfg.gamma}", f"forcing: {f.to_text()}", f"M: {cfg.landscape_m}",
               f"phi range: {np.nanmax(rmap.phi) - np.nanmin(rmap.phi):.6e}", f"median |A|: {median:.6e}",
               f"verdict: {verdict}", *lines]
    run.path("summary.txt").write_text("\n".join(summary) + "\n")
    print(verdict)
    return EXIT_OK if not verdict.startswith("FAILED") else EXIT_DIVERGENCE


def cmd_export(run: Run) -> int:
    cfg = run.cfg
    bundle = _bundle(run)
    n = cfg.grid_n
    u = tf.indicator_from_lifted(bundle.mesh.lifted(), n, volume_hint=bundle.volume)
    tf.write_binary(u, run.path("indicator.bin"))
    v = tf.poisson_solve(u)
    tf.write_binary(v, run.path("potential.bin"))
    tf.write_csv_slice(u, run.path("indicator_slice.csv"))
    f = cfg.forcing_spec
    if not f.is_zero:
        tf.write_binary(tf.forcing_field(f, n), run.path("forcing.bin"))
    write_coo(bundle.op.matrix, run.path("jacobi_coo.txt"))
    e = total_energy(bundle.mesh, cfg.gamma, f, K=cfg.modes)
    run.path("energy.txt").write_text("".join(f"{k}: {v}\n" for k, v in e.as_row().items()))
    run.lap("export")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="okreduce", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"okreduce {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("mesh", "build the base Schwarz P mesh and its diagnostics"),
                        ("diagnose", "kernel, Gram and coercivity diagnostics of the base mesh"),
                        ("solve", "solve the auxiliary problem at one translation xi"),
                        ("landscape", "scan the reduced energy and locate its critical points"),
                        ("export", "write fields and operator matrices")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--output", help="output directory (same as --set output=...)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "solve":
            sp.add_argument("--xi", help="translation as three numbers, e.g. '0.1 0.2 0.3'")
    return p


def load_config(args) -> RunConfig:
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = RunConfig.from_text(text)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    if args.output:
        cfg.output = args.output
    if getattr(args, "xi", None):
        cfg.xi = _xi(args.xi)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args.command, argv)
    status, code = "ok", EXIT_OK
    try:
        if args.command == "mesh":
            code = cmd_mesh(run)
        elif args.command == "diagnose":
            code = cmd_diagnose(run)
        elif args.command == "solve":
            code = cmd_solve(run, cfg.xi)
        elif args.command == "landscape":
            code = cmd_landscape(run)
        elif args.command == "export":
            code = cmd_export(run)
    except (ConfigError, tf.TorusFieldError) as exc:
        status, code = f"config error: {exc}", EXIT_CONFIG
    except (DivergenceError, ScanError, SolverError, PerturbationTooLarge) as exc:
        status, code = f"numerical divergence: {exc}", EXIT_DIVERGENCE
    except (GeometryError, DegenerateGeometry) as exc:
        status, code = f"geometry error: {exc}", EXIT_GEOMETRY
    if code != EXIT_OK and status == "ok":
        status = f"exit {code}"
    run.finish(status)
    if status != "ok" and code != EXIT_OK:
        print(status, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
