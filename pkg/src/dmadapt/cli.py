"""Command line: ``adapt``, ``check`` and ``decompose``.

Every option has a config-file key of the same name (dashes become
underscores) in a flat TOML table; command-line values win over the file.
Errors end the process with a nonzero status and one ``error: <Kind>: <text>``
line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import tomli

from .adapt import PhaseConfig
from .decompose import classify_interface, is_simply_connected, make_simply_connected, pqr_partition
from .dist import PipelineParams, check_frozen, run_pipeline, write_trace
from .mesh import Mesh, generate_cube_mesh, mesh_read, mesh_write, validate_conformity
from .metric import DiscreteMetricField, Polar2Metric, UniformMetric, scale_to_complexity
from .report import conformity_stats, metric_io, write_hist_csv, write_report_json, write_sol

log = logging.getLogger("dmadapt")

EXIT_FINDINGS = 1
EXIT_CONFIG = 2
EXIT_FAILURE = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mesh: str | None = None
    cube: int | None = None
    metric: str = "polar2"
    complexity: float = 2000.0
    coarse_fraction: float = 15.0
    splits: str = "2x1x2"
    workers: int | None = None
    threads: int = 1
    seed: int | None = None
    interface_layers: int = 3
    interior_layers: int = 3
    interface_nqual: int = 1
    interface_nsmth: int = 2
    interface_pre_collapse: bool = True
    interior_nqual: int = 3
    interior_nsmth: int = 5
    interior_pre_collapse: bool = True
    interior_post_collapse: bool = True
    naive_interior: bool = False
    skip_coarse: bool = False
    out: str = "out"
    name: str = "adapted"

    def split_tuple(self) -> tuple:
        return parse_splits(self.splits)

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return int(self.workers)
        env = os.environ.get("ADAPT_WORKERS")
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"ADAPT_WORKERS={env!r} is not an integer") from None
        return 1

    def pipeline_params(self) -> PipelineParams:
        return PipelineParams(
            target_complexity=self.complexity,
            coarse_fraction=self.coarse_fraction,
            splits=self.split_tuple(),
            workers=self.resolved_workers(),
            master_threads=self.threads,
            worker_threads=self.threads,
            interface=PhaseConfig.interface(num_layers=self.interface_layers,
                                            n_quality_iters=self.interface_nqual,
                                            n_smooth_iters=self.interface_nsmth,
                                            use_pre_collapse=self.interface_pre_collapse),
            interior=PhaseConfig.interior(num_layers=self.interior_layers,
                                          n_quality_iters=self.interior_nqual,
                                          n_smooth_iters=self.interior_nsmth,
                                          use_pre_collapse=self.interior_pre_collapse,
                                          use_post_collapse=self.interior_post_collapse),
            seed=self.seed,
            skip_coarse=self.skip_coarse,
            naive_interior=self.naive_interior,
        )


def parse_splits(text) -> tuple:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().split("x")
    try:
        out = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad splits {text!r}; expected NXxNYxNZ") from None
    if len(out) != 3 or min(out) < 1:
        raise ConfigError(f"bad splits {text!r}; expected three positive integers")
    return out


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "splits" in data and isinstance(data["splits"], list):
        data["splits"] = "x".join(str(x) for x in data["splits"])
    return data


def effective_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    if cfg.mesh is None and cfg.cube is None:
        raise ConfigError("give --mesh PATH or --cube N")
    if cfg.mesh is not None and cfg.cube is not None:
        raise ConfigError("--mesh and --cube are exclusive")
    return cfg


def load_mesh(cfg: RunConfig) -> Mesh:
    if cfg.cube is not None:
        if cfg.cube < 1:
            raise ConfigError("--cube must be >= 1")
        return generate_cube_mesh(cfg.cube)
    return mesh_read(cfg.mesh)


def load_metric(spec: str, mesh: Mesh):
    if spec == "polar2":
        return Polar2Metric()
    if spec.startswith("uniform:"):
        try:
            h = float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad uniform metric {spec!r}") from None
        return UniformMetric(h)
    if spec.endswith(".sol"):
        values = metric_io(spec)
        if len(values) != mesh.n_vertices:
            raise ConfigError(f"{spec} has {len(values)} tensors for {mesh.n_vertices} vertices")
        return DiscreteMetricField(values)
    raise ConfigError(f"unknown metric {spec!r}; use polar2, uniform:h or a .sol path")


# --------------------------------------------------------------------------
# subcommands

def cmd_adapt(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.pipeline_params()
    mesh = load_mesh(cfg)
    field_ = load_metric(cfg.metric, mesh)
    input_stats = conformity_stats(mesh.copy(), scale_to_complexity(field_, mesh, cfg.complexity))
    t0 = time.perf_counter()
    res = run_pipeline(mesh, field_, params)
    total = time.perf_counter() - t0
    merged = res.mesh
    findings = validate_conformity(merged)
    frozen = check_frozen(res)
    mesh_write(merged, out / f"{cfg.name}.mesh")
    write_sol(merged.metric[merged.vertex_ids()], out / f"{cfg.name}.sol")
    write_hist_csv(res.report.mean_ratio_hist, out / "mean_ratio_hist.csv")
    write_hist_csv(res.report.edge_length_hist, out / "edge_length_hist.csv")
    write_trace(res.trace, out / "trace.txt")
    timing = dict(res.timing, total=total)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    extra = {
        "input_unit_band_fraction": input_stats.unit_band_fraction,
        "conformity_findings": findings.lines(),
        "frozen_interface_problems": frozen,
        "envelopes": len(res.trace),
        "subdomains": len(res.subdomain_stats),
    }
    write_report_json(res.report, out / "report.json", config=asdict(cfg) | {"workers": params.workers},
                      extra=extra)
    print(f"vertices {res.report.vertices} tetrahedra {res.report.tetrahedra} "
          f"unit_band {res.report.unit_band_fraction:.3f} mean_ratio {res.report.mean_mean_ratio:.3f}")
    if findings or frozen:
        for line in findings.lines() + frozen:
            print(line)
        raise _Failure("ConformityError", f"{len(findings.lines()) + len(frozen)} findings")
    return 0


def cmd_check(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(cfg)
    findings = validate_conformity(mesh)
    report = None
    if not findings:
        report = conformity_stats(mesh, load_metric(cfg.metric, mesh))
        write_report_json(report, out / "report.json", config=asdict(cfg))
        write_hist_csv(report.mean_ratio_hist, out / "mean_ratio_hist.csv")
        write_hist_csv(report.edge_length_hist, out / "edge_length_hist.csv")
        print(f"vertices {report.vertices} tetrahedra {report.tetrahedra} "
              f"unit_band {report.unit_band_fraction:.3f} mean_ratio {report.mean_mean_ratio:.3f}")
        return 0
    for line in findings.lines():
        print(line)
    raise _Failure("ConformityError", f"{len(findings.lines())} findings, first: {findings.lines()[0]}")


def cmd_decompose(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(cfg)
    part = pqr_partition(mesh, *cfg.split_tuple())
    moved = make_simply_connected(mesh, part.n_subdomains)
    classify_interface(mesh, part)
    ok = is_simply_connected(mesh)
    manifest = {
        "n_subdomains": part.n_subdomains,
        "splits": list(part.splits),
        "sizes": part.sizes(mesh),
        "interface_points": part.interface_points(),
        "interface_counts": part.interface_counts(),
        "neighbors": {str(k): sorted(v) for k, v in sorted(part.neighbors.items())},
        "repaired_tets": moved,
        "simply_connected": ok,
    }
    (out / "partition.json").write_text(json.dumps(manifest, indent=2))
    mesh_write(mesh, out / "partition.mesh", gids=False)
    print(f"subdomains {part.n_subdomains} interface_points {len(manifest['interface_points'])}")
    if not ok:
        raise _Failure("RepairError", "subdomains are not face-connected")
    return 0


# --------------------------------------------------------------------------
# argument parsing

class _Failure(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FINDINGS):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _bool_flag(p, name, help_):
    dest = name.replace("-", "_")
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmadapt", description="Distributed anisotropic tetrahedral adaptation")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML file with defaults for any option")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--mesh", help="input MEDIT .mesh")
        src.add_argument("--cube", type=int, help="generate an N^3-cell unit cube instead")
        p.add_argument("--metric", help="polar2 | uniform:h | path.sol")
        p.add_argument("--out", help="output directory")

    pa = sub.add_parser("adapt", help="run the full distributed adaptation pipeline")
    common(pa)
    pa.add_argument("--complexity", type=float, help="target complexity")
    pa.add_argument("--coarse-fraction", type=float)
    pa.add_argument("--splits", help="NXxNYxNZ")
    pa.add_argument("--workers", type=int, help="worker count (fallback: ADAPT_WORKERS)")
    pa.add_argument("--threads", type=int, help="threads per worker")
    pa.add_argument("--seed", type=int)
    pa.add_argument("--interface-layers", type=int)
    pa.add_argument("--interior-layers", type=int)
    pa.add_argument("--interface-nqual", type=int)
    pa.add_argument("--interface-nsmth", type=int)
    pa.add_argument("--interior-nqual", type=int)
    pa.add_argument("--interior-nsmth", type=int)
    _bool_flag(pa, "interface-pre-collapse", "collapse short edges before interface refinement")
    _bool_flag(pa, "interior-pre-collapse", "collapse short edges before interior refinement")
    _bool_flag(pa, "interior-post-collapse", "collapse short edges after interior refinement")
    _bool_flag(pa, "naive-interior", "interior phase without prelocking or pseudo-activity")
    _bool_flag(pa, "skip-coarse", "use the input as the coarse mesh")
    pa.add_argument("--name", help="basename of the output mesh files")

    pc = sub.add_parser("check", help="validate a mesh and report its metric conformity")
    common(pc)

    pd = sub.add_parser("decompose", help="partition a mesh and write partition.json")
    common(pd)
    pd.add_argument("--splits", help="NXxNYxNZ")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = {"adapt": cmd_adapt, "check": cmd_check, "decompose": cmd_decompose}[args.command]
    try:
        cfg = effective_config(args)
        return cmd(cfg)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Failure as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
