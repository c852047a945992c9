"""Metric-conformity statistics, partial statistics for distributed runs, and .sol I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import MeshParseError
from .mesh import unique_edges
from .metric import DiscreteMetricField, InvalidMetricError, is_spd, six_to_matrix

SQRT2 = math.sqrt(2.0)
MR_BINS = np.linspace(0.0, 1.0, 21)
EDGE_BINS = 0.125 * 2.0 ** (np.arange(25) / 4.0)


@dataclass
class Histogram:
    bins: list
    counts: list
    underflow: int = 0
    overflow: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.counts)) + self.underflow + self.overflow

    def rows(self):
        return [(self.bins[i], self.bins[i + 1], self.counts[i]) for i in range(len(self.counts))]


@dataclass
class ConformityReport:
    vertices: int
    tetrahedra: int
    complexity: float
    unit_band_fraction: float
    mean_ratio_hist: Histogram
    edge_length_hist: Histogram
    min_mean_ratio: float
    mean_mean_ratio: float
    max_mean_ratio: float
    min_edge: float
    mean_edge: float
    max_edge: float
    edges: int
    verts_per_complexity: float = 0.0
    tets_per_complexity: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def _mr_hist(q) -> Histogram:
    counts, _ = np.histogram(np.clip(q, 0.0, 1.0), bins=MR_BINS)
    return Histogram(MR_BINS.tolist(), counts.tolist())


def _edge_hist(lengths) -> Histogram:
    lengths = np.asarray(lengths)
    counts, _ = np.histogram(lengths, bins=EDGE_BINS)
    return Histogram(EDGE_BINS.tolist(), counts.tolist(),
                     int(np.sum(lengths < EDGE_BINS[0])), int(np.sum(lengths > EDGE_BINS[-1])))


def tet_complexity_shares(mesh, tets) -> np.ndarray:
    """Per-tet share of the discrete complexity (sums to the mesh total)."""
    sq = np.sqrt(np.maximum(np.linalg.det(six_to_matrix(mesh.metric[:mesh.n_slots])), 0.0))
    vols = mesh.tet_volumes(tets)
    return vols / 4.0 * sq[tets].sum(axis=1)


def _measures(mesh):
    tets = mesh.tet_array()
    edges = unique_edges(tets)
    lengths = np.empty(len(edges))
    K.edge_lengths(mesh.coords, mesh.metric, edges, lengths)
    q = np.empty(len(tets))
    K.qualities(mesh.coords, mesh.logm, tets, q)
    return tets, edges, lengths, q


def _in_band(lengths) -> np.ndarray:
    return (lengths >= 1.0 / SQRT2) & (lengths <= SQRT2)


def build_report(n_vertices, q, lengths, complexity) -> ConformityReport:
    q = np.asarray(q, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    nt, ne = len(q), len(lengths)
    c = float(complexity)
    return ConformityReport(
        vertices=int(n_vertices), tetrahedra=nt, complexity=c,
        unit_band_fraction=float(_in_band(lengths).mean()) if ne else 0.0,
        mean_ratio_hist=_mr_hist(q), edge_length_hist=_edge_hist(lengths),
        min_mean_ratio=float(q.min()) if nt else 0.0,
        mean_mean_ratio=float(q.mean()) if nt else 0.0,
        max_mean_ratio=float(q.max()) if nt else 0.0,
        min_edge=float(lengths.min()) if ne else 0.0,
        mean_edge=float(lengths.mean()) if ne else 0.0,
        max_edge=float(lengths.max()) if ne else 0.0,
        edges=ne,
        verts_per_complexity=n_vertices / c if c > 0 else 0.0,
        tets_per_complexity=nt / c if c > 0 else 0.0,
    )


def conformity_stats(mesh, field=None) -> ConformityReport:
    """Edge-length and mean-ratio statistics of ``mesh`` under its vertex metric.

    If ``field`` is given it is sampled at the vertices first (analytic) or
    copied in (discrete).
    """
    if field is not None:
        if isinstance(field, DiscreteMetricField):
            mesh.set_metric(field.values)
        else:
            mesh.sample(field)
    tets, _, lengths, q = _measures(mesh)
    comp = float(tet_complexity_shares(mesh, tets).sum())
    return build_report(mesh.n_vertices, q, lengths, comp)


# --------------------------------------------------------------------------
# partial statistics of one subdomain

def partial_stats(mesh) -> dict:
    """Statistics of one subdomain in a form that merges exactly across subdomains.

    Edges with two interface endpoints may exist in several subdomains; they are
    listed by global id pair so the merge can count each once.
    """
    tets, edges, lengths, q = _measures(mesh)
    iface = mesh.interface[edges[:, 0]] & mesh.interface[edges[:, 1]] if len(edges) else \
        np.zeros(0, dtype=bool)
    shared = []
    for (a, b), L in zip(edges[iface], lengths[iface]):
        ga, gb = tuple(int(x) for x in mesh.gid[a]), tuple(int(x) for x in mesh.gid[b])
        shared.append([sorted([list(ga), list(gb)]), float(L)])
    iverts = [list(map(int, mesh.gid[v])) for v in mesh.vertex_ids() if mesh.interface[v]]
    return {
        "vertices": int(mesh.n_vertices),
        "interface_vertices": iverts,
        "tet_quality": q.tolist(),
        "complexity": float(tet_complexity_shares(mesh, tets).sum()),
        "edge_lengths": lengths[~iface].tolist(),
        "shared_edges": shared,
    }


def merge_partial_stats(parts) -> ConformityReport:
    q, lengths, comp = [], [], 0.0
    shared = {}
    iverts = set()
    nverts = 0
    for p in parts:
        q.extend(p["tet_quality"])
        lengths.extend(p["edge_lengths"])
        comp += p["complexity"]
        nverts += p["vertices"]
        for key, L in p["shared_edges"]:
            shared.setdefault(json.dumps(key), L)
        for g in p["interface_vertices"]:
            t = tuple(g)
            if t in iverts:
                nverts -= 1
            iverts.add(t)
    lengths.extend(shared.values())
    return build_report(nverts, q, lengths, comp)


# --------------------------------------------------------------------------
# serialization

def write_report_json(report: ConformityReport, path, config: dict | None = None,
                      extra: dict | None = None):
    d = report.to_dict()
    if config is not None:
        d["config"] = config
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not serializable: {type(o)}")


def write_hist_csv(hist: Histogram, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        if hist.underflow or hist.overflow:
            w.writerow([0.0, hist.bins[0], hist.underflow])
        for lo, hi, c in hist.rows():
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        if hist.underflow or hist.overflow:
            w.writerow([hist.bins[-1], "inf", hist.overflow])


def write_sol(values, path):
    """Write per-vertex symmetric tensors (m11 m21 m22 m31 m32 m33) as SolAtVertices."""
    values = np.asarray(values, dtype=float).reshape(-1, 6)
    lines = ["MeshVersionFormatted 2", "", "Dimension 3", "", "SolAtVertices", str(len(values)),
             "1 3"]
    lines += [" ".join(repr(float(x)) for x in row) for row in values]
    lines += ["", "End", ""]
    Path(path).write_text("\n".join(lines))


def read_sol(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    i = 0

    def next_content():
        nonlocal i
        while i < len(lines):
            body = lines[i].split("#", 1)[0].strip()
            i += 1
            if body:
                return i, body
        raise MeshParseError(len(lines), "unexpected end of file")

    values = None
    while i < len(lines):
        try:
            ln, body = next_content()
        except MeshParseError:
            break
        kw = body.split()[0]
        if kw in ("MeshVersionFormatted", "Dimension"):
            parts = body.split()
            if len(parts) == 1:
                next_content()
            elif kw == "Dimension" and parts[1] != "3":
                raise MeshParseError(ln, "only Dimension 3 is supported")
        elif kw == "SolAtVertices":
            ln, body = next_content()
            try:
                n = int(body)
            except ValueError:
                raise MeshParseError(ln, f"bad vertex count {body!r}") from None
            ln, body = next_content()
            typ = body.split()
            if typ != ["1", "3"]:
                raise MeshParseError(ln, f"expected one symmetric tensor field ('1 3'), got {body!r}")
            values = np.empty((n, 6))
            for k in range(n):
                ln, body = next_content()
                parts = body.split()
                if len(parts) != 6:
                    raise MeshParseError(ln, f"expected 6 tensor components, got {len(parts)}")
                try:
                    values[k] = [float(x) for x in parts]
                except ValueError:
                    raise MeshParseError(ln, "non-numeric tensor component") from None
        elif kw == "End":
            break
        else:
            raise MeshParseError(ln, f"unknown keyword {kw!r}")
    if values is None:
        raise MeshParseError(len(lines), "no SolAtVertices section")
    return values


def metric_io(path, values=None, mesh=None, field=None):
    """Read a .sol file, or write ``values`` (or ``field`` sampled on ``mesh``) to it."""
    if values is None and field is None:
        vals = read_sol(path)
        for k, row in enumerate(vals):
            if not is_spd(row):
                raise InvalidMetricError(f"tensor {k} is not positive definite")
        return vals
    if values is None:
        values = field.evaluate(mesh.coords[mesh.vertex_ids()])
    write_sol(values, path)
    return np.asarray(values)
