"""Cube benchmark: shear-layer field at a target complexity, with a per-phase timing breakdown."""
from __future__ import annotations

import argparse
import json
import logging
import time

from dmadapt.cli import parse_splits
from dmadapt.dist import PipelineParams, check_frozen, run_pipeline
from dmadapt.mesh import generate_cube_mesh, validate_conformity
from dmadapt.metric import Polar2Metric, scale_to_complexity
from dmadapt.report import conformity_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cube", type=int, default=8)
    ap.add_argument("--complexity", type=float, nargs="+", default=[2000.0])
    ap.add_argument("--splits", default="2x1x2")
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write all results to this file")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    rows = []
    for c in args.complexity:
        mesh = generate_cube_mesh(args.cube)
        before = conformity_stats(mesh.copy(), scale_to_complexity(Polar2Metric(), mesh, c))
        params = PipelineParams(target_complexity=c, splits=parse_splits(args.splits),
                                workers=args.workers, seed=args.seed)
        t0 = time.perf_counter()
        res = run_pipeline(mesh, Polar2Metric(), params)
        wall = time.perf_counter() - t0
        rep = res.report
        row = {
            "complexity": c, "wall": wall, "vertices": rep.vertices, "tetrahedra": rep.tetrahedra,
            "verts_per_c": rep.vertices / c, "tets_per_c": rep.tetrahedra / c,
            "input_unit_band": before.unit_band_fraction, "unit_band": rep.unit_band_fraction,
            "min_mean_ratio": rep.min_mean_ratio, "mean_mean_ratio": rep.mean_mean_ratio,
            "conforming": validate_conformity(res.mesh).empty, "frozen_ok": not check_frozen(res),
            "timing": {k: v for k, v in res.timing.items() if k != "worker"},
        }
        rows.append(row)
        print(f"C={c:g}: {rep.vertices} vertices ({row['verts_per_c']:.2f} C), {rep.tetrahedra} tets "
              f"({row['tets_per_c']:.2f} C), unit band {before.unit_band_fraction:.3f} -> "
              f"{rep.unit_band_fraction:.3f}, mean ratio {rep.mean_mean_ratio:.3f}, "
              f"conforming {row['conforming']}, frozen {row['frozen_ok']}, {wall:.1f}s")
        for k, v in row["timing"].items():
            print(f"    {k:26s} {v:8.2f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
