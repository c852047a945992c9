"""Subdomain packing, point-to-point envelopes, worker contexts, merge and the
end-to-end a priori pipeline.

Workers are threads with their own inbox; the master is worker 0. Every
message is an :class:`Envelope` with a single destination, so the recorded
trace is the complete communication history of a run.
"""
from __future__ import annotations

import json
import logging
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .adapt import (DriverStats, PhaseConfig, adapt_driver, interface_preprocess,
                    interior_preprocess, interior_preprocess_naive)
from .decompose import (assign_new_elements, classify_interface, make_simply_connected,
                        pqr_partition)
from .errors import (CapacityError, FrozenInterfaceViolation, PayloadCorruptionError,
                     PipelineError)
from .mesh import Mesh, face_key
from .metric import (AnalyticMetricField, DiscreteMetricField, complexity_factor,
                     discrete_complexity, log_metric)
from .report import ConformityReport, merge_partial_stats, partial_stats

log = logging.getLogger(__name__)

MAGIC = b"DMSD"
VERSION = 1
MAX_COUNT = 2**31 - 1
MASTER = 0

# magic, version, subdomain id, vertices, tets, boundary faces, prelock,
# pseudo-active, interface vertices, next local id
_HEADER = struct.Struct("<4sIiiiiiiiq")

# (name, count field, row width, dtype)
_SECTIONS = (
    ("coordinates", "nv", 3, "<f8"),
    ("global_ids", "nv", 2, "<i8"),
    ("tetrahedra", "nt", 4, "<i4"),
    ("boundary_faces", "nbf", 4, "<i4"),
    ("prelock", "npre", 1, "<i4"),
    ("pseudo_active", "npa", 1, "<i4"),
    ("metric", "nv", 6, "<f8"),
    ("interface", "nif", 1, "<i4"),
)


# --------------------------------------------------------------------------
# packed subdomains

@dataclass
class Subdomain:
    """A subdomain in local numbering plus the state the interior phase needs."""
    sid: int
    mesh: Mesh
    prelock: list = field(default_factory=list)
    pseudo_active: list = field(default_factory=list)


def section_layout(counts: dict) -> list:
    """(name, offset, nbytes) of every section, derived from header counts alone."""
    out = []
    off = _HEADER.size
    for name, cnt, width, dt in _SECTIONS:
        nbytes = counts[cnt] * width * np.dtype(dt).itemsize
        out.append((name, off, nbytes))
        off += nbytes
    return out


def packed_size(counts: dict) -> int:
    name, off, nbytes = section_layout(counts)[-1]
    return off + nbytes


def pack_subdomain(sub: Subdomain) -> bytes:
    """Serialize a subdomain into one flat little-endian buffer.

    Vertices and tets are renumbered densely in increasing slot order.
    """
    mesh = sub.mesh
    vids = mesh.vertex_ids()
    vmap = np.full(mesh.n_slots, -1, dtype=np.int64)
    vmap[vids] = np.arange(len(vids))
    tids = mesh.tet_ids()
    tmap = {t: k for k, t in enumerate(tids)}
    tets = vmap[mesh.tet_array(tids)] if tids else np.zeros((0, 4), dtype=np.int64)
    bf = sorted(mesh.bfaces.values())
    bfaces = np.array([[vmap[a], vmap[b], vmap[c], tag] for (a, b, c), tag in bf],
                      dtype=np.int64).reshape(-1, 4)
    prelock = np.array(sorted(vmap[v] for v in sub.prelock if mesh.alive[v]), dtype=np.int64)
    pseudo = np.array(sorted(tmap[t] for t in sub.pseudo_active if t in tmap), dtype=np.int64)
    iface = np.flatnonzero(mesh.interface[vids])
    counts = dict(nv=len(vids), nt=len(tids), nbf=len(bfaces), npre=len(prelock),
                  npa=len(pseudo), nif=len(iface))
    for k, c in counts.items():
        if c > MAX_COUNT:
            raise CapacityError(f"{k} = {c} exceeds the 32-bit section limit")
    if len(vids) and int(tets.max(initial=0)) > MAX_COUNT:
        raise CapacityError("vertex index exceeds the 32-bit limit")
    next_local = int(mesh.next_local.get(sub.sid, 0))
    parts = [_HEADER.pack(MAGIC, VERSION, sub.sid, counts["nv"], counts["nt"], counts["nbf"],
                          counts["npre"], counts["npa"], counts["nif"], next_local)]
    data = {
        "coordinates": mesh.coords[vids],
        "global_ids": mesh.gid[vids],
        "tetrahedra": tets,
        "boundary_faces": bfaces,
        "prelock": prelock,
        "pseudo_active": pseudo,
        "metric": mesh.metric[vids],
        "interface": iface,
    }
    for name, _, _, dt in _SECTIONS:
        parts.append(np.ascontiguousarray(data[name], dtype=dt).tobytes())
    buf = b"".join(parts)
    assert len(buf) == packed_size(counts)
    return buf


def read_header(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise PayloadCorruptionError("header", f"buffer of {len(buf)} bytes is shorter than the header")
    magic, version, sid, nv, nt, nbf, npre, npa, nif, next_local = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise PayloadCorruptionError("header", f"bad magic {magic!r}")
    if version != VERSION:
        raise PayloadCorruptionError("header", f"unsupported version {version}")
    counts = dict(nv=nv, nt=nt, nbf=nbf, npre=npre, npa=npa, nif=nif)
    for k, c in counts.items():
        if c < 0:
            raise PayloadCorruptionError("header", f"negative count {k}")
    return dict(sid=sid, next_local=next_local, **counts)


def _sections(buf: bytes, head: dict) -> dict:
    out = {}
    for (name, off, nbytes), (_, cnt, width, dt) in zip(section_layout(head), _SECTIONS):
        if off + nbytes > len(buf):
            raise PayloadCorruptionError(name, f"truncated: need {nbytes} bytes at {off}, "
                                               f"buffer has {len(buf)}")
        arr = np.frombuffer(buf, dtype=dt, count=head[cnt] * width, offset=off)
        out[name] = arr.reshape(-1, width) if width > 1 else arr
    end = packed_size(head)
    if len(buf) != end:
        raise PayloadCorruptionError("trailer", f"{len(buf) - end} unexpected trailing bytes")
    return out


def _check_range(name, arr, n):
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise PayloadCorruptionError(name, f"index out of range [0, {n})")


def unpack_subdomain(buf: bytes) -> Subdomain:
    """Rebuild mesh, gids, metric, interface flags, prelocks and pseudo-activity."""
    head = read_header(buf)
    s = _sections(buf, head)
    nv, nt = head["nv"], head["nt"]
    _check_range("tetrahedra", s["tetrahedra"], nv)
    _check_range("boundary_faces", s["boundary_faces"][:, :3], nv)
    _check_range("prelock", s["prelock"], nv)
    _check_range("pseudo_active", s["pseudo_active"], nt)
    _check_range("interface", s["interface"], nv)
    metric = np.array(s["metric"], dtype=float)
    if nv and not np.all(np.isfinite(metric)):
        raise PayloadCorruptionError("metric", "non-finite tensor component")
    sid = head["sid"]
    mesh = Mesh(capacity=2 * nv + 8)
    mesh.reserve(nv)
    mesh.coords[:nv] = s["coordinates"]
    mesh.metric[:nv] = metric
    mesh.logm[:nv] = log_metric(metric) if nv else 0.0
    mesh.gid[:nv] = s["global_ids"]
    mesh.alive[:nv] = True
    mesh.interface[s["interface"]] = True
    mesh.n_slots = nv
    mesh.vtets = [set() for _ in range(nv)]
    for tet in s["tetrahedra"].tolist():
        mesh.add_tet(tuple(tet), owner=sid, active=False, pseudo=False)
    for a, b, c, tag in s["boundary_faces"].tolist():
        mesh.add_bface((a, b, c), tag)
    mesh.sid = sid
    mesh.next_local = {sid: head["next_local"]}
    prelock = s["prelock"].tolist()
    pseudo = s["pseudo_active"].tolist()
    mesh.locks.prelock(prelock)
    for t in pseudo:
        mesh.pseudo[t] = True
        mesh.active[t] = True
    return Subdomain(sid, mesh, prelock, pseudo)


def extract_subdomain(mesh: Mesh, sid: int, prelock=(), pseudo_active=()) -> Subdomain:
    """Copy the tets owned by ``sid`` (and what they reference) out of the master mesh."""
    tids = [t for t in mesh.tet_ids() if mesh.owner[t] == sid]
    verts = sorted({v for t in tids for v in mesh.tets[t]})
    vmap = {v: k for k, v in enumerate(verts)}
    tmap = {t: k for k, t in enumerate(tids)}
    n = len(verts)
    sub = Mesh(capacity=2 * n + 8)
    sub.reserve(n)
    idx = np.array(verts, dtype=np.int64)
    sub.coords[:n] = mesh.coords[idx]
    sub.metric[:n] = mesh.metric[idx]
    sub.logm[:n] = mesh.logm[idx]
    sub.gid[:n] = mesh.gid[idx]
    sub.interface[:n] = mesh.interface[idx]
    sub.alive[:n] = True
    sub.n_slots = n
    sub.vtets = [set() for _ in range(n)]
    keys = set()
    for t in tids:
        tet = tuple(vmap[v] for v in mesh.tets[t])
        sub.add_tet(tet, owner=sid, active=False, pseudo=False)
        for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            keys.add(face_key(*(mesh.tets[t][i] for i in f)))
    for key, (face, tag) in mesh.bfaces.items():
        if key in keys:
            sub.add_bface(tuple(vmap[v] for v in face), tag)
    sub.sid = sid
    sub.next_local = {sid: mesh.next_local.get(sid, 0)}
    return Subdomain(sid, sub, [vmap[v] for v in prelock if v in vmap],
                     [tmap[t] for t in pseudo_active if t in tmap])


def merge_subdomains(buffers) -> Mesh:
    """Glue unpacked subdomains along vertices with equal global ids.

    Interface copies must agree bit for bit; the copy from the subdomain named
    in the global id is kept.
    """
    subs = [unpack_subdomain(b) if isinstance(b, (bytes, bytearray)) else b for b in buffers]
    subs.sort(key=lambda s: s.sid)
    out = Mesh(capacity=8)
    by_gid: dict = {}
    for sub in subs:
        m = sub.mesh
        local = {}
        for v in m.vertex_ids():
            g = (int(m.gid[v, 0]), int(m.gid[v, 1]))
            if g[0] < 0:
                raise PayloadCorruptionError("global_ids", f"vertex {v} of subdomain {sub.sid} "
                                                           f"has no global id")
            if g in by_gid:
                w = by_gid[g]
                if not np.array_equal(out.coords[w], m.coords[v]):
                    raise FrozenInterfaceViolation(
                        f"vertex {g} differs between subdomains: {out.coords[w]} vs {m.coords[v]}")
                if sub.sid == g[0]:
                    out.metric[w] = m.metric[v]
                    out.logm[w] = m.logm[v]
                out.interface[w] = True
            else:
                w = out.add_vertex(m.coords[v], m.metric[v], m.logm[v], gid=g)
                out.interface[w] = bool(m.interface[v])
                by_gid[g] = w
            local[int(v)] = w
        for t in m.tet_ids():
            out.add_tet(tuple(local[v] for v in m.tets[t]), owner=sub.sid)
        for face, tag in m.bfaces.values():
            out.add_bface(tuple(local[v] for v in face), tag)
        out.next_local[sub.sid] = max(out.next_local.get(sub.sid, 0), m.next_local.get(sub.sid, 0))
    return out


# --------------------------------------------------------------------------
# envelopes and transport

class Kind(IntEnum):
    SUBDOMAIN = 1
    STATS = 2
    DONE = 3


_ENV = struct.Struct("<BIIQ")


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    src: int
    dst: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _ENV.pack(int(self.kind), self.src, self.dst, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Envelope":
        if len(data) < _ENV.size:
            raise PayloadCorruptionError("envelope", "shorter than the envelope header")
        kind, src, dst, n = _ENV.unpack_from(data)
        if len(data) != _ENV.size + n:
            raise PayloadCorruptionError("envelope", f"payload length {n} does not match")
        try:
            k = Kind(kind)
        except ValueError:
            raise PayloadCorruptionError("envelope", f"unknown kind {kind}") from None
        return cls(k, src, dst, bytes(data[_ENV.size:]))


@dataclass(frozen=True)
class TraceRecord:
    kind: int
    src: int
    dst: int
    nbytes: int
    timestamp_ns: int

    def line(self) -> str:
        return f"{self.kind} {self.src} {self.dst} {self.nbytes} {self.timestamp_ns}"


class Transport:
    """One inbox per participant; ``send`` is the only way to move bytes."""

    def __init__(self, n_participants: int):
        self.inboxes = [queue.Queue() for _ in range(n_participants)]
        self.trace: list[TraceRecord] = []
        self._lock = threading.Lock()

    def send(self, env: Envelope):
        data = env.encode()
        with self._lock:
            self.trace.append(TraceRecord(int(env.kind), env.src, env.dst, len(env.payload),
                                          time.monotonic_ns()))
        self.inboxes[env.dst].put(data)

    def close(self, dst: int):
        """End-of-input marker for a worker's inbox (local, not a message)."""
        self.inboxes[dst].put(None)

    def recv(self, who: int, timeout: float | None = None):
        data = self.inboxes[who].get(timeout=timeout)
        return None if data is None else Envelope.decode(data)

    def trace_lines(self) -> list[str]:
        return [r.line() for r in self.trace]


def write_trace(trace, path):
    with open(path, "w") as fh:
        for r in trace:
            fh.write(r.line() + "\n")


# --------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineParams:
    target_complexity: float = 2000.0
    coarse_fraction: float = 15.0
    splits: tuple = (2, 1, 2)
    workers: int = 4
    master_threads: int = 1
    worker_threads: int = 1
    interface: PhaseConfig = field(default_factory=PhaseConfig.interface)
    interior: PhaseConfig = field(default_factory=PhaseConfig.interior)
    coarse: PhaseConfig = field(default_factory=PhaseConfig.full)
    seed: int | None = None
    skip_coarse: bool = False
    naive_interior: bool = False

    def __post_init__(self):
        if len(self.splits) != 3 or min(self.splits) < 1:
            raise ValueError("splits must be three positive integers")
        if self.target_complexity <= 0:
            raise ValueError("target_complexity must be positive")
        if self.coarse_fraction < 1:
            raise ValueError("coarse_fraction must be >= 1")
        if self.workers < 1 or self.master_threads < 1 or self.worker_threads < 1:
            raise ValueError("worker and thread counts must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("target_complexity", "coarse_fraction", "workers",
                                            "master_threads", "worker_threads", "seed",
                                            "skip_coarse", "naive_interior")}
        d["splits"] = list(self.splits)
        for k in ("interface", "interior", "coarse"):
            d[k] = getattr(self, k).to_dict()
        return d


@dataclass
class PipelineResult:
    mesh: Mesh
    report: ConformityReport
    trace: list
    timing: dict
    subdomain_stats: dict
    frozen_tets: dict  # sid -> sorted list of gid-quads of tets touching the interface
    frozen_coords: dict  # gid -> coordinates of interface vertices before distribution
    merged_report: ConformityReport | None = None
    master_stats: dict = field(default_factory=dict)


def _rescale(mesh, analytic, target):
    """Scale the metric so the mesh complexity equals ``target``.

    Analytic fields are rescaled and re-sampled; otherwise the vertex tensors are
    scaled in place. Returns the field the driver should use.
    """
    if analytic is not None:
        out = analytic.scaled(complexity_factor(discrete_complexity(mesh, analytic), target))
        mesh.sample(out)
        return out
    mesh.scale_metric(complexity_factor(
        discrete_complexity(mesh, mesh.metric[:mesh.n_slots]), target))
    return None


def frozen_snapshot(mesh: Mesh, sids=None):
    """Per-subdomain multiset of tets with an interface vertex and interface coordinates,
    all keyed by global ids."""
    gid = lambda v: (int(mesh.gid[v, 0]), int(mesh.gid[v, 1]))  # noqa: E731
    tets: dict = {}
    for t in mesh.tet_ids():
        tet = mesh.tets[t]
        if any(mesh.interface[v] for v in tet):
            tets.setdefault(mesh.owner[t], []).append(tuple(sorted(gid(v) for v in tet)))
    for k in tets:
        tets[k].sort()
    coords = {gid(v): tuple(mesh.coords[v].tolist()) for v in mesh.vertex_ids() if mesh.interface[v]}
    return tets, coords


class _Worker(threading.Thread):
    def __init__(self, wid, transport, field_, params: PipelineParams):
        super().__init__(name=f"worker-{wid}", daemon=True)
        self.wid = wid
        self.transport = transport
        self.field = field_
        self.params = params

    def run(self):
        while True:
            env = self.transport.recv(self.wid)
            if env is None:
                return
            sid = None
            try:
                sid = read_header(env.payload)["sid"]
                out, stats = process_subdomain(env.payload, self.field, self.params)
                self.transport.send(Envelope(Kind.SUBDOMAIN, self.wid, MASTER, out))
                self.transport.send(Envelope(Kind.STATS, self.wid, MASTER,
                                             json.dumps(stats).encode()))
            except Exception as exc:  # reported to the master, which raises PipelineError
                log.exception("worker %d failed on subdomain %s", self.wid, sid)
                msg = json.dumps({"sid": sid, "error": f"{type(exc).__name__}: {exc}"})
                self.transport.send(Envelope(Kind.DONE, self.wid, MASTER, msg.encode()))


def process_subdomain(buf: bytes, field_, params: PipelineParams):
    """Interior phase of one subdomain: returns (packed result, stats dict)."""
    timing = {}
    t0 = time.perf_counter()
    sub = unpack_subdomain(buf)
    timing["unpack"] = time.perf_counter() - t0
    mesh = sub.mesh
    t0 = time.perf_counter()
    if params.naive_interior:
        interior_preprocess_naive(mesh)
    else:
        interior_preprocess(mesh, sub.prelock, sub.pseudo_active, params.interior.num_layers)
    timing["interior_preprocessing"] = time.perf_counter() - t0
    seed = None if params.seed is None else params.seed + 1 + sub.sid
    st: DriverStats = adapt_driver(mesh, field_, params.interior, params.worker_threads, seed)
    timing["interior_adaptation"] = st.wall_time
    mesh.locks.release_prelocks()
    t0 = time.perf_counter()
    out = pack_subdomain(Subdomain(sub.sid, mesh))
    timing["pack"] = time.perf_counter() - t0
    stats = {
        "sid": sub.sid,
        "timing": timing,
        "interior_cpu_time": st.cpu_time,
        "driver": st.to_dict(),
        "partial": partial_stats(mesh),
    }
    return out, stats


def run_pipeline(mesh: Mesh, field_, params: PipelineParams | None = None) -> PipelineResult:
    """Coarse adaptation, decomposition, interface phase, distribution, interior phase, merge."""
    params = params or PipelineParams()
    timing: dict = {}
    master_stats: dict = {}
    mesh.sid = None
    n_sub = int(np.prod(params.splits))
    seed = params.seed

    # 1. coarse mesh
    t0 = time.perf_counter()
    analytic = isinstance(field_, AnalyticMetricField)
    if not analytic:
        mesh.set_metric(field_.values if isinstance(field_, DiscreteMetricField) else field_)
    if not params.skip_coarse:
        target = params.target_complexity / params.coarse_fraction
        cfield = _rescale(mesh, field_ if analytic else None, target)
        st = adapt_driver(mesh, cfield, params.coarse, params.master_threads, seed)
        master_stats["coarse"] = st.to_dict()
    timing["coarse_adaptation"] = time.perf_counter() - t0
    fine = _rescale(mesh, field_ if analytic else None, params.target_complexity)

    # 2. decomposition
    t0 = time.perf_counter()
    part = pqr_partition(mesh, *params.splits)
    timing["decomposition"] = time.perf_counter() - t0

    # 3-6. interface preprocessing
    t0 = time.perf_counter()
    interface_preprocess(mesh, part.interface_points(), params.interface.num_layers, n_sub)
    timing["interface_preprocessing"] = time.perf_counter() - t0

    # 7. interface adaptation on the whole mesh
    t0 = time.perf_counter()
    st = adapt_driver(mesh, fine, params.interface, params.master_threads, seed)
    master_stats["interface"] = st.to_dict()
    prelock = mesh.locks.prelocked()
    pseudo_inactive = {t for t in mesh.tet_ids() if not mesh.pseudo[t]}
    mesh.locks.release_prelocks()
    assign_new_elements(mesh)
    timing["interface_adaptation"] = time.perf_counter() - t0

    # 8. simply connected subdomains
    t0 = time.perf_counter()
    master_stats["repaired_tets"] = make_simply_connected(mesh, n_sub)
    classify_interface(mesh, part)
    mesh.assign_missing_gids(lambda v: part.vertex_owner[v])
    timing["simply_connected"] = time.perf_counter() - t0
    frozen_tets, frozen_coords = frozen_snapshot(mesh)

    # 9. pack and send
    t0 = time.perf_counter()
    transport = Transport(params.workers + 1)
    workers = [_Worker(w + 1, transport, fine, params) for w in range(params.workers)]
    for w in workers:
        w.start()
    for sid in range(n_sub):
        sub = extract_subdomain(mesh, sid, prelock, pseudo_inactive)
        buf = pack_subdomain(sub)
        transport.send(Envelope(Kind.SUBDOMAIN, MASTER, sid % params.workers + 1, buf))
    for w in workers:
        transport.close(w.wid)
    timing["pack_send"] = time.perf_counter() - t0

    # 10-11 run in the workers; 12. collect and merge
    t0 = time.perf_counter()
    results, stats, errors = {}, {}, []
    pending = 2 * n_sub
    while pending > 0:
        env = transport.recv(MASTER)
        if env.kind is Kind.SUBDOMAIN:
            results[read_header(env.payload)["sid"]] = env.payload
            pending -= 1
        elif env.kind is Kind.STATS:
            s = json.loads(env.payload)
            stats[s["sid"]] = s
            pending -= 1
        else:
            e = json.loads(env.payload)
            errors.append(e)
            pending -= 2
    for w in workers:
        w.join()
    timing["collect"] = time.perf_counter() - t0
    if errors:
        e = min(errors, key=lambda e: (e["sid"] is None, e["sid"] or 0))
        raise PipelineError(e["sid"], e["error"])

    t0 = time.perf_counter()
    merged = merge_subdomains([results[s] for s in range(n_sub)])
    timing["merge"] = time.perf_counter() - t0
    report = merge_partial_stats([stats[s]["partial"] for s in range(n_sub)])
    for s in range(n_sub):
        for k, v in stats[s]["timing"].items():
            timing.setdefault("worker", {}).setdefault(k, []).append(v)
    return PipelineResult(mesh=merged, report=report, trace=list(transport.trace), timing=timing,
                          subdomain_stats=stats, frozen_tets=frozen_tets,
                          frozen_coords=frozen_coords, master_stats=master_stats)


def check_frozen(result: PipelineResult) -> list:
    """Differences between the pre-distribution interface snapshot and the merged mesh."""
    tets, coords = frozen_snapshot(result.mesh)
    problems = []
    for sid in sorted(set(result.frozen_tets) | set(tets)):
        if result.frozen_tets.get(sid, []) != tets.get(sid, []):
            problems.append(f"interface tets of subdomain {sid} changed")
    if coords != result.frozen_coords:
        problems.append("interface vertex coordinates changed")
    return problems


__all__ = [
    "Subdomain", "pack_subdomain", "unpack_subdomain", "extract_subdomain", "merge_subdomains",
    "Envelope", "Kind", "Transport", "TraceRecord", "write_trace", "PipelineParams",
    "PipelineResult", "run_pipeline", "check_frozen", "section_layout", "packed_size",
    "read_header", "process_subdomain", "frozen_snapshot",
]
