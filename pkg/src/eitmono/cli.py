"""Command-line driver: mesh, simulate, reconstruct, sweep and render.

Every command reads one JSON run configuration. Output files carry the
configuration hash and the package version, and ``reconstruct`` refuses
measurement files produced under a different configuration.

Exit codes: 0 success, 2 configuration or parameter error, 3 numerical
failure, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EitMonoError, FormatError, NumericalError, ParameterError
from .forward import (ConductivityField, VoltageMatrix, assemble, cached_derivative_tensor,
                      element_owner, raw_voltage_matrix)
from .geometry import BetaBounds, Phantom, PixelGrid, PixelSet, build_grid
from .measurement import NoiseSpec, add_noise, current_patterns, read_measurement, write_measurement
from .mesh import ElectrodeLayout, Mesh, generate_disk_mesh, refine, save_mesh
from .monotonicity import MonotonicityConfig, NonlinearContext, TestMatrices, validate_beta
from .peeling import (ReconstructionResult, peel, read_reconstruction_csv,
                      write_reconstruction_csv, write_trace)
from .render import render_image, write_ppm

log = logging.getLogger("eitmono")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
DOMAIN_AREA = math.pi


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class MeshParams:
    k: int = 32
    electrode_size: float | None = None  # None: pi/k
    z: float = 1e-2
    target_nodes: int = 20000
    grading: float = 0.95

    def layout(self, k: int | None = None) -> ElectrodeLayout:
        k = self.k if k is None else k
        size = self.electrode_size if k == self.k else None
        return ElectrodeLayout(k, size, self.z)


@dataclass(frozen=True)
class RunConfig:
    name: str
    mesh: MeshParams
    phantom: dict
    grid_side: float
    beta: BetaBounds
    alpha0_positive: float
    alpha0_negative: float
    noise_level: float = 0.0
    seed: int = 0
    mode: str = "linear"
    fast_start: bool = True
    volume_floor: float = 0.0
    enforce_alpha_bound: bool = True
    sweep_k: tuple[int, ...] = ()
    sweep_alpha0: float = 0.0
    output_dir: str | None = None
    description: str = field(default="", compare=False)

    @property
    def phantom_obj(self) -> Phantom:
        return Phantom.from_dict(self.phantom)

    def canonical(self) -> dict:
        """Everything that affects results (the output directory does not)."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("description")
        return d

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def monotonicity(self, part: str, noise_delta: float | None = None) -> MonotonicityConfig:
        alpha0 = self.alpha0_positive if part == "positive" else self.alpha0_negative
        return MonotonicityConfig(self.beta, alpha0, self.mode, part, self.volume_floor,
                                  noise_delta, DOMAIN_AREA, self.enforce_alpha_bound)


_TOP_KEYS = {"name", "description", "mesh", "phantom", "grid", "beta", "alpha0", "noise",
             "mode", "fast_start", "volume_floor", "enforce_alpha_bound", "sweep", "output_dir"}


def _section(d: dict, key: str, allowed: set[str]) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")
    return sec


def parse_config(d: dict) -> RunConfig:
    """Validate a config document; raises ConfigError naming the problem."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(d) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    try:
        m = _section(d, "mesh", {"k", "electrode_size", "z", "target_nodes", "grading"})
        mesh = MeshParams(int(m.get("k", 32)), m.get("electrode_size"), float(m.get("z", 1e-2)),
                          int(m.get("target_nodes", 20000)), float(m.get("grading", 0.95)))
        grid = _section(d, "grid", {"side", "pixels_per_unit"})
        if "pixels_per_unit" in grid:
            side = 1.0 / float(grid["pixels_per_unit"])
        else:
            side = float(grid.get("side", 1.0 / 35.0))
        b = _section(d, "beta", {"beta", "beta_lower", "beta_upper"})
        beta = BetaBounds(float(b.get("beta", 4.0)), float(b.get("beta_lower", 1.0)),
                          float(b.get("beta_upper", 1.0)))
        a = _section(d, "alpha0", {"positive", "negative"})
        noise = _section(d, "noise", {"level", "seed"})
        sweep = _section(d, "sweep", {"k", "alpha0"})
        cfg = RunConfig(
            name=str(d.get("name", "run")), description=str(d.get("description", "")),
            mesh=mesh, phantom=d.get("phantom", {"background": 1.0}), grid_side=side,
            beta=beta, alpha0_positive=float(a.get("positive", 0.0)),
            alpha0_negative=float(a.get("negative", 0.0)),
            noise_level=float(noise.get("level", 0.0)), seed=int(noise.get("seed", 0)),
            mode=str(d.get("mode", "linear")), fast_start=bool(d.get("fast_start", True)),
            volume_floor=float(d.get("volume_floor", 0.0)),
            enforce_alpha_bound=bool(d.get("enforce_alpha_bound", True)),
            sweep_k=tuple(int(k) for k in sweep.get("k", ())),
            sweep_alpha0=float(sweep.get("alpha0", 0.0)), output_dir=d.get("output_dir"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    # constructing these objects runs their own checks
    layout = cfg.mesh.layout()
    if cfg.mesh.target_nodes < 50 * layout.k:
        raise ConfigError(f"mesh.target_nodes must be at least 50*k = {50 * layout.k}")
    if not 0.0 <= cfg.mesh.grading <= 1.0:
        raise ConfigError("mesh.grading must lie in [0, 1]")
    try:
        phantom = cfg.phantom_obj
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise ConfigError(f"invalid phantom: {exc!r}") from None
    validate_beta(phantom, cfg.beta)
    NoiseSpec(cfg.noise_level, cfg.seed)
    for part in ("positive", "negative"):
        cfg.monotonicity(part)
    for k in cfg.sweep_k:
        cfg.mesh.layout(k)
        if cfg.mesh.target_nodes < 50 * k:
            raise ConfigError(f"mesh.target_nodes must be at least 50*k = {50 * k} for sweep k={k}")
    if cfg.sweep_alpha0 < 0:
        raise ConfigError("sweep.alpha0 must be nonnegative")
    phantom.check_disjoint(build_grid(1.0, cfg.grid_side))


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    cfg = parse_config(doc)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
        NoiseSpec(cfg.noise_level, cfg.seed)
    return cfg


def builtin_config(name: str) -> Path:
    """Path of a checked-in config, e.g. ``builtin_config("fig3")``."""
    return Path(str(resources.files("eitmono") / "configs" / f"{name}.json"))


# -- shared setup -----------------------------------------------------------

def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "code_version": __version__}


def _comments(cfg: RunConfig) -> tuple[str, ...]:
    return (f"config_hash {cfg.digest()}", f"code_version {__version__}")


def _meshes(cfg: RunConfig, k: int | None = None) -> tuple[ElectrodeLayout, Mesh]:
    layout = cfg.mesh.layout(k)
    mesh = generate_disk_mesh(layout, cfg.mesh.target_nodes, cfg.mesh.grading)
    return layout, mesh


def _grid(cfg: RunConfig) -> PixelGrid:
    return build_grid(1.0, cfg.grid_side)


def simulate_pair(cfg: RunConfig, layout: ElectrodeLayout, mesh: Mesh,
                  noise_level: float | None = None) -> tuple[VoltageMatrix, VoltageMatrix]:
    """Background matrix on ``mesh`` and data on the once-refined mesh."""
    patterns = current_patterns(layout.k)
    phantom = cfg.phantom_obj
    sigma0 = ConductivityField.constant(mesh, phantom.background)
    B, _ = raw_voltage_matrix(assemble(mesh, sigma0, layout), patterns)
    fine = refine(mesh)
    sigma = ConductivityField.from_phantom(fine, phantom)
    R, V = raw_voltage_matrix(assemble(fine, sigma, layout), patterns)
    base = {"k": layout.k, "z": list(layout.z), "electrode_size": layout.size,
            "phantom": phantom.to_dict(), **_provenance(cfg)}
    background = VoltageMatrix(0.5 * (B + B.T), dict(
        base, role="background", mesh_hash=mesh.digest(), conductivity_hash=sigma0.digest(),
        conductivity=sigma0.description))
    clean = VoltageMatrix(0.5 * (R + R.T), dict(
        base, role="data", mesh_hash=fine.digest(), reconstruction_mesh_hash=mesh.digest(),
        conductivity_hash=sigma.digest()))
    level = cfg.noise_level if noise_level is None else noise_level
    data = add_noise(clean, V, NoiseSpec(level, cfg.seed), patterns)
    return background, data


def _check_alpha_bound(cfg: RunConfig, delta: float) -> None:
    for part in ("positive", "negative"):
        cfg.monotonicity(part, delta)


def build_context(cfg: RunConfig, layout: ElectrodeLayout, mesh: Mesh, background: VoltageMatrix,
                 data: VoltageMatrix, grid: PixelGrid, cache_dir=None) -> TestMatrices:
    patterns = current_patterns(layout.k)
    sigma0 = ConductivityField.constant(mesh, cfg.phantom_obj.background)
    system = assemble(mesh, sigma0, layout)
    if cache_dir is not None:
        tensor = cached_derivative_tensor(cache_dir, mesh, sigma0, layout, patterns, grid, system)
    else:
        from .forward import derivative_tensor
        tensor = derivative_tensor(mesh, sigma0, layout, patterns, grid, system)
    nonlinear = None
    if cfg.mode == "nonlinear":
        nonlinear = NonlinearContext(mesh, layout, sigma0, patterns, element_owner(mesh, grid))
    return TestMatrices(background, data, tensor, nonlinear)


def reconstruct_parts(cfg: RunConfig, ctx: TestMatrices, grid: PixelGrid,
                      delta: float | None) -> tuple[ReconstructionResult, ReconstructionResult]:
    results = []
    for part in ("positive", "negative"):
        results.append(peel(ctx, grid, cfg.monotonicity(part, delta), fast_start=cfg.fast_start))
    return results[0], results[1]


def _summary(result: ReconstructionResult, grid: PixelGrid) -> dict:
    pix = result.pixels
    cent = grid.centroids(pix.indices)
    lam = [e.lam_min for e in result.trace if e.decision == "removed"]
    return {"pixels": len(pix), "area": len(pix) * grid.pixel_area,
            "centroid": cent.mean(axis=0).tolist() if len(pix) else None,
            "tests": result.stats.get("tests"), "bulk_steps": result.stats.get("bulk_steps"),
            "vetoed": result.stats.get("vetoed"), "wall_time": result.stats.get("wall_time"),
            "lam_min_last_removal": lam[-1] if lam else None}


# -- commands -----------------------------------------------------------------

def cmd_mesh(cfg: RunConfig, out: Path) -> None:
    t0 = time.perf_counter()
    layout, mesh = _meshes(cfg)
    fine = refine(mesh)
    save_mesh(mesh, out / "mesh.txt")
    save_mesh(fine, out / "simulation_mesh.txt")
    meta = dict(_provenance(cfg), k=layout.k, reconstruction_mesh_hash=mesh.digest(),
                simulation_mesh_hash=fine.digest(), nodes=mesh.n_nodes,
                simulation_nodes=fine.n_nodes, triangles=mesh.n_triangles)
    (out / "mesh.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("mesh: %d nodes (simulation %d) in %.1f s", mesh.n_nodes, fine.n_nodes,
             time.perf_counter() - t0)


def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    t0 = time.perf_counter()
    layout, mesh = _meshes(cfg)
    background, data = simulate_pair(cfg, layout, mesh)
    _check_alpha_bound(cfg, data.metadata.get("delta"))
    write_measurement(out / "background.txt", background)
    write_measurement(out / "data.txt", data)
    log.info("simulate: wrote background.txt and data.txt (delta=%.3g) in %.1f s",
             data.metadata.get("delta", 0.0), time.perf_counter() - t0)


def _load_inputs(cfg: RunConfig, out: Path, mesh: Mesh) -> tuple[VoltageMatrix, VoltageMatrix]:
    background = read_measurement(out / "background.txt")
    data = read_measurement(out / "data.txt")
    want = _provenance(cfg)
    for name, vm in (("background.txt", background), ("data.txt", data)):
        for key, value in want.items():
            if vm.metadata.get(key) != value:
                raise FormatError(f"{name}: {key} is {vm.metadata.get(key)!r}, "
                                  f"expected {value!r}; rerun simulate with this config")
        if vm.k != cfg.mesh.k:
            raise FormatError(f"{name}: k = {vm.k} but the config has k = {cfg.mesh.k}")
    if background.metadata.get("mesh_hash") != mesh.digest():
        raise FormatError("background.txt was computed on a different reconstruction mesh")
    return background, data


def cmd_reconstruct(cfg: RunConfig, out: Path) -> None:
    t0 = time.perf_counter()
    layout, mesh = _meshes(cfg)
    background, data = _load_inputs(cfg, out, mesh)
    delta = data.metadata.get("delta") or None
    _check_alpha_bound(cfg, delta)
    grid = _grid(cfg)
    ctx = build_context(cfg, layout, mesh, background, data, grid, out / "cache")
    pos, neg = reconstruct_parts(cfg, ctx, grid, delta)
    comments = _comments(cfg)
    write_reconstruction_csv(out / "reconstruction.csv", grid, pos.pixels, neg.pixels, comments)
    write_trace(out / "trace_positive.txt", pos, grid, comments)
    write_trace(out / "trace_negative.txt", neg, grid, comments)
    img = render_image(grid, pos.pixels, neg.pixels, cfg.phantom_obj)
    write_ppm(out / "reconstruction.ppm", img, comments)
    overlap = pos.pixels & neg.pixels
    report = dict(_provenance(cfg), name=cfg.name, mode=cfg.mode, fast_start=cfg.fast_start,
                  noise_level=cfg.noise_level, seed=cfg.seed, delta=delta,
                  alpha0={"positive": cfg.alpha0_positive, "negative": cfg.alpha0_negative},
                  positive=_summary(pos, grid), negative=_summary(neg, grid),
                  overlap=len(overlap), mesh_nodes=mesh.n_nodes,
                  background_mesh="reconstruction mesh",
                  wall_time=time.perf_counter() - t0)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("reconstruct: %d positive, %d negative pixels, overlap %d",
             len(pos.pixels), len(neg.pixels), len(overlap))


def boundary_distance(result: ReconstructionResult, grid: PixelGrid) -> tuple[float, bool]:
    """Distance from the unit circle to the nearest pixel centroid, and an empty flag."""
    if len(result.pixels) == 0:
        return 1.0, True
    c = grid.centroids(result.pixels.indices)
    return float(1.0 - np.hypot(c[:, 0], c[:, 1]).max()), False


def run_sweep(cfg: RunConfig, ks=None, out: Path | None = None) -> list[dict]:
    ks = tuple(ks if ks is not None else cfg.sweep_k)
    if not ks:
        raise ConfigError("sweep needs a nonempty sweep.k list")
    grid = _grid(cfg)
    rows = []
    sweep_cfg = replace(cfg, noise_level=0.0, alpha0_positive=cfg.sweep_alpha0,
                        alpha0_negative=cfg.sweep_alpha0)
    for k in ks:
        layout, mesh = _meshes(cfg, k)
        background, data = simulate_pair(sweep_cfg, layout, mesh, noise_level=0.0)
        ctx = build_context(sweep_cfg, layout, mesh, background, data, grid)
        result = peel(ctx, grid, sweep_cfg.monotonicity("positive"), fast_start=cfg.fast_start)
        d, empty = boundary_distance(result, grid)
        rows.append({"k": k, "h": 2 * math.pi / k, "d_k": d, "empty": int(empty),
                     "pixels": len(result.pixels)})
        log.info("sweep k=%d: d_k=%.4f (%d pixels)", k, d, len(result.pixels))
        if out is not None:
            img = render_image(grid, result.pixels, PixelSet(), cfg.phantom_obj)
            write_ppm(out / f"sweep_k{k:02d}.ppm", img, _comments(cfg))
    return rows


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    rows = run_sweep(cfg, out=out)
    lines = [f"# {c}" for c in _comments(cfg)] + ["k,h,d_k,empty,pixels"]
    lines += [f"{r['k']},{r['h']:.17g},{r['d_k']:.17g},{r['empty']},{r['pixels']}" for r in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")


def cmd_render(cfg: RunConfig, out: Path) -> None:
    grid = _grid(cfg)
    path = out / "reconstruction.csv"
    pos, neg = read_reconstruction_csv(path, grid)
    img = render_image(grid, pos, neg, cfg.phantom_obj)
    write_ppm(out / "render.ppm", img, _comments(cfg))


COMMANDS = {"mesh": cmd_mesh, "simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "sweep": cmd_sweep, "render": cmd_render}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eitmono", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True,
                   help="JSON run config, or the name of a built-in one (fig3, fig3_noisy, fig5)")
    p.add_argument("--seed", type=int, default=None, help="override the noise seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"eitmono {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = Path(args.config)
        if not path.exists() and builtin_config(args.config).exists():
            path = builtin_config(args.config)
        cfg = load_config(path, args.seed)
        out = Path(args.out or cfg.output_dir or f"out/{cfg.name}")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, ParameterError) as exc:
        print(f"eitmono: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"eitmono: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"eitmono: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EitMonoError as exc:
        print(f"eitmono: internal error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
