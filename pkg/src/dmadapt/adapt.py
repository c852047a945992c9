"""Adaptation kernels, phase preprocessing and the pass driver.

Every kernel follows the same speculative pattern: read the cavity it wants to
touch, lock all of its vertices in one ``try_lock`` call, re-validate what it
read, mutate, release. A failed lock is never waited on; the item is retried
once at the end of the pass and otherwise left for the next pass.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import _kernels as K
from .errors import DecompositionError, PayloadCorruptionError
from .mesh import TET_FACES, face_key, unique_edges
from .metric import AnalyticMetricField, exp_metric, log_metric
from .speculate import PRELOCKED, bucketize_active, unlock_activate_layers

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
_AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                 dtype=float)


class Phase(str, Enum):
    FULL = "full"  # whole mesh free; used for the coarse pre-adaptation
    INTERFACE = "interface"
    INTERIOR = "interior"


@dataclass
class Thresholds:
    accept: float = 1.0 / SQRT2
    collapse: float = 1.0 / SQRT2
    band_lo: float = 1.0 / SQRT2
    band_hi: float = SQRT2
    q_min: float = 0.2
    split: float = SQRT2  # longest edge above this is split at its metric midpoint
    centroid_insertion: bool = False
    collapse_max_edge: float = 1.6  # longest edge a collapse may create
    post_collapse_max_edge: float = SQRT2  # same after refinement, when nothing re-splits
    collapse_q_floor: float = 0.1
    flip_below: float = 0.5  # only tets under this quality seek a flip
    smooth_below: float = 0.5
    n_halvings: int = 3
    max_moves: int = 8
    ring_min: float = 0.5  # shortest edge an insertion may create
    cavity: bool = True  # metric Delaunay cavity instead of a plain edge split
    max_cavity: int = 64
    collapse_each_pass: bool = False


@dataclass
class PhaseConfig:
    phase: Phase = Phase.INTERIOR
    use_pre_collapse: bool = True
    use_post_collapse: bool = True
    n_quality_iters: int = 3
    n_smooth_iters: int = 5
    num_layers: int = 3
    max_passes: int = 20
    stall_fraction: float = 0.01
    thresholds: Thresholds = field(default_factory=Thresholds)

    def __post_init__(self):
        self.phase = Phase(self.phase)
        if self.phase is Phase.INTERFACE and self.use_post_collapse:
            raise ValueError("the interface phase cannot use post-refinement collapse")
        if self.num_layers < 0 or self.max_passes < 1:
            raise ValueError("num_layers must be >= 0 and max_passes >= 1")
        if isinstance(self.thresholds, dict):
            self.thresholds = Thresholds(**self.thresholds)

    @classmethod
    def interface(cls, **kw) -> "PhaseConfig":
        base = dict(phase=Phase.INTERFACE, use_pre_collapse=True, use_post_collapse=False,
                    n_quality_iters=1, n_smooth_iters=2, num_layers=3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def interior(cls, **kw) -> "PhaseConfig":
        base = dict(phase=Phase.INTERIOR, use_pre_collapse=True, use_post_collapse=True,
                    n_quality_iters=3, n_smooth_iters=5, num_layers=3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, **kw) -> "PhaseConfig":
        base = dict(phase=Phase.FULL, use_pre_collapse=True, use_post_collapse=True,
                    n_quality_iters=1, n_smooth_iters=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase"] = self.phase.value
        return d


@dataclass
class OpCounts:
    inserted: int = 0
    collapsed: int = 0
    flipped: int = 0
    smoothed: int = 0
    deactivated: int = 0
    lock_failures: int = 0
    insert_attempts_pseudo_inactive: int = 0

    def add(self, other: "OpCounts"):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


# --------------------------------------------------------------------------
# helpers

class _Ctx:
    """Per-pass state shared by the kernel calls of one phase."""

    def __init__(self, mesh, field, thr: Thresholds):
        self.mesh = mesh
        self.field = field if isinstance(field, AnalyticMetricField) else None
        self.thr = thr
        self.buffer: set = set()
        self.moved: list = []
        self.failed: set = set()  # tets whose insertion was rejected for geometric reasons

    def owner_of(self, sources) -> int:
        """Owner for tets replacing ``sources``: their common owner, else unassigned."""
        mesh = self.mesh
        if mesh.sid is not None:
            return mesh.sid
        owners = {mesh.owner[t] for t in sources}
        return owners.pop() if len(owners) == 1 else -1

    def metric_at(self, p, verts, weights):
        """(metric, log metric) for a new point given host vertices and weights."""
        mesh = self.mesh
        if self.field is not None:
            m = self.field.evaluate(p[None, :])[0]
            return m, log_metric(m)[0]
        lm = np.zeros(6)
        for v, w in zip(verts, weights):
            lm += w * mesh.logm[v]
        return exp_metric(lm)[0], lm

    def new_vertex(self, p, verts, weights) -> int:
        mesh = self.mesh
        m, lm = self.metric_at(p, verts, weights)
        gid = None
        if mesh.sid is not None:
            gid = (mesh.sid, mesh.new_local_id(mesh.sid))
        return mesh.add_vertex(p, m, lm, gid=gid)


def _run(items, fn, threads: int, rng=None):
    """Apply ``fn(worker, item)`` to each item; failed items (returning None) retry once."""
    items = list(items)
    if rng is not None:
        rng.shuffle(items)
    if not items:
        return []
    if threads <= 1:
        results = [fn(0, it) for it in items]
    else:
        chunks = [c.tolist() for c in np.array_split(np.array(items, dtype=object), threads)]

        def work(w):
            return [fn(w, it) for it in chunks[w]]

        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, range(threads)))
        results = [r for part in parts for r in part]
        items = [it for c in chunks for it in c]
    retry = [it for it, r in zip(items, results) if r is None]
    if retry:
        results = [r for r in results if r is not None] + [fn(0, it) for it in retry]
    return [r for r in results if r is not None]


def _pseudo_inactive_vertices(mesh) -> set:
    out = set()
    for t, tet in enumerate(mesh.tets):
        if tet is not None and not mesh.pseudo[t]:
            out.update(tet)
    return out


def _replace(tet, old, new):
    return tuple(new if v == old else v for v in tet)


def _tet_q(mesh, tet) -> float:
    return K.tet_quality(mesh.coords, mesh.logm, *tet)


def _vol6(mesh, tet) -> float:
    return K.vol6(mesh.coords, *tet)


# --------------------------------------------------------------------------
# point insertion

def _insert(ctx: _Ctx, worker: int, t: int, counts: OpCounts):
    mesh, thr = ctx.mesh, ctx.thr
    tet = mesh.tets[t]
    if tet is None or not mesh.active[t]:
        return 0
    if not mesh.pseudo[t]:
        counts.insert_attempts_pseudo_inactive += 1
        return 0
    if any(v in ctx.buffer for v in tet) or tet in ctx.failed:
        return 0
    if thr.centroid_insertion:
        r = _split_centroid(ctx, worker, t, tet, counts)
    else:
        lens = np.empty(6)
        K.tet_edge_lengths(mesh.coords, mesh.metric, *tet, lens)
        e = int(np.argmax(lens))
        if lens[e] <= thr.split:
            return 0
        i, j = _EDGES[e]
        if thr.cavity:
            r = _cavity_insert(ctx, worker, tet[i], tet[j], counts)
        else:
            r = _split_edge(ctx, worker, tet[i], tet[j], counts)
    if r == 0:
        ctx.failed.add(tet)
    return r


_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _split_point(mesh, a, b):
    pa, pb = mesh.coords[a], mesh.coords[b]
    d = pb - pa
    la = math.sqrt(K.quad6(mesh.metric[a], *d))
    lb = math.sqrt(K.quad6(mesh.metric[b], *d))
    q = lb / la
    s = 0.5 if abs(q - 1.0) < 1e-9 else math.log(0.5 * (1.0 + q)) / math.log(q)
    return pa + s * d, s


def _split_edge(ctx: _Ctx, worker: int, a: int, b: int, counts: OpCounts):
    mesh, thr = ctx.mesh, ctx.thr
    shell = list(mesh.vtets[a] & mesh.vtets[b])
    verts = set()
    for st in shell:
        verts.update(mesh.tets[st])
    if verts & ctx.buffer:
        return 0
    if not mesh.locks.try_lock(worker, verts):
        counts.lock_failures += 1
        return None
    try:
        shell2 = mesh.vtets[a] & mesh.vtets[b]
        if set(shell) != shell2:
            return 0
        if not all(mesh.pseudo[st] for st in shell):
            return 0
        p, s = _split_point(mesh, a, b)
        m, lm = ctx.metric_at(p, (a, b), (1.0 - s, s))
        ring = verts - {a, b}
        for u in ring:
            if K.point_edge_len(p, m, mesh.coords, mesh.metric, u) < thr.ring_min:
                return 0
        gid = (mesh.sid, mesh.new_local_id(mesh.sid)) if mesh.sid is not None else None
        v = mesh.add_vertex(p, m, lm, gid=gid)
        mesh.locks.cas(v, 0, worker + 1)
        for st in sorted(shell):
            tt = mesh.tets[st]
            owner = ctx.owner_of((st,))
            mesh.remove_tet(st)
            mesh.add_tet(_replace(tt, a, v), owner=owner)
            mesh.add_tet(_replace(tt, b, v), owner=owner)
        for c in ring:
            rec = mesh.bfaces.get(face_key(a, b, c))
            if rec is not None:
                face, tag = rec
                mesh.remove_bface(face)
                mesh.add_bface(_replace(face, a, v), tag)
                mesh.add_bface(_replace(face, b, v), tag)
        verts.add(v)
        counts.inserted += 1
        return 1
    finally:
        mesh.locks.release(worker, verts)


def _eligible(ctx: _Ctx, t: int) -> bool:
    mesh = ctx.mesh
    if not mesh.pseudo[t]:
        return False
    state = mesh.locks.state
    for v in mesh.tets[t]:
        if v in ctx.buffer or state[v] == PRELOCKED:
            return False
    return True


def _build_cavity(ctx: _Ctx, a: int, b: int, p, U):
    """Tets of the metric Delaunay cavity of ``p`` (on edge a-b), made star-shaped.

    Returns (cavity tets, [(outward boundary face, cavity tet holding it)]) or None.
    """
    mesh, thr = ctx.mesh, ctx.thr
    coords = mesh.coords
    shell = mesh.vtets[a] & mesh.vtets[b]
    if not all(_eligible(ctx, t) for t in shell):
        return None
    cavity = set(shell)
    order = sorted(shell)
    i = 0
    while i < len(order) and len(cavity) < thr.max_cavity:
        t = order[i]
        i += 1
        for k in range(4):
            n = mesh.face_neighbor(t, k)
            if n is None or n in cavity or not _eligible(ctx, n):
                continue
            if K.in_circumsphere(coords, *mesh.tets[n], p, U):
                cavity.add(n)
                order.append(n)
    while True:
        faces = {}
        for t in cavity:
            tet = mesh.tets[t]
            for k in range(4):
                f = tuple(tet[j] for j in TET_FACES[k])
                key = face_key(*f)
                if key in faces:
                    del faces[key]
                else:
                    faces[key] = (f, t)
        bad = None
        on_bd = set()
        for key, (f, t) in faces.items():
            on_bd.update(f)
            if a in f and b in f:
                continue
            if -K.vol6_point(coords, f[0], f[1], f[2], p) <= 0.0:
                bad = t
                break
        if bad is None:
            inner = set()
            for t in cavity:
                inner.update(mesh.tets[t])
            lost = inner - on_bd
            if lost:
                x = min(lost)
                bad = max((t for t in cavity if x in mesh.tets[t] and t not in shell),
                          default=None)
                if bad is None:
                    return None
        if bad is None:
            return cavity, list(faces.values())
        if bad in shell:
            return None
        cavity.discard(bad)


def _cavity_insert(ctx: _Ctx, worker: int, a: int, b: int, counts: OpCounts):
    mesh, thr = ctx.mesh, ctx.thr
    p, s = _split_point(mesh, a, b)
    m, lm = ctx.metric_at(p, (a, b), (1.0 - s, s))
    U = K.metric_root(m)
    built = _build_cavity(ctx, a, b, p, U)
    if built is None:
        return 0
    cavity, faces = built
    verts = set()
    for t in cavity:
        verts.update(mesh.tets[t])
    for u in verts:
        if u != a and u != b and K.point_edge_len(p, m, mesh.coords, mesh.metric, u) < thr.ring_min:
            return 0
    snapshot = {t: mesh.tets[t] for t in cavity}
    if not mesh.locks.try_lock(worker, verts):
        counts.lock_failures += 1
        return None
    try:
        if any(mesh.tets[t] != tt for t, tt in snapshot.items()):
            return 0
        gid = (mesh.sid, mesh.new_local_id(mesh.sid)) if mesh.sid is not None else None
        v = mesh.add_vertex(p, m, lm, gid=gid)
        mesh.locks.cas(v, 0, worker + 1)
        verts.add(v)
        owners = {t: ctx.owner_of((t,)) for t in cavity}
        for t in sorted(cavity):
            mesh.remove_tet(t)
        for f, src in faces:
            if a in f and b in f:
                continue
            mesh.add_tet((f[0], f[2], f[1], v), owner=owners[src])
        ring = verts - {a, b, v}
        for c in ring:
            rec = mesh.bfaces.get(face_key(a, b, c))
            if rec is not None:
                face, tag = rec
                mesh.remove_bface(face)
                mesh.add_bface(_replace(face, a, v), tag)
                mesh.add_bface(_replace(face, b, v), tag)
        counts.inserted += 1
        return 1
    finally:
        mesh.locks.release(worker, verts)


def _split_centroid(ctx: _Ctx, worker: int, t: int, tet, counts: OpCounts):
    mesh, thr = ctx.mesh, ctx.thr
    p = mesh.coords[list(tet)].mean(axis=0)
    m, lm = ctx.metric_at(p, tet, (0.25,) * 4)
    for u in tet:
        if K.point_edge_len(p, m, mesh.coords, mesh.metric, u) < thr.accept:
            return 0
    if not mesh.locks.try_lock(worker, tet):
        counts.lock_failures += 1
        return None
    try:
        if mesh.tets[t] != tet:
            return 0
        gid = (mesh.sid, mesh.new_local_id(mesh.sid)) if mesh.sid is not None else None
        v = mesh.add_vertex(p, m, lm, gid=gid)
        owner = ctx.owner_of((t,))
        mesh.remove_tet(t)
        for k in range(4):
            nt = list(tet)
            nt[k] = v
            mesh.add_tet(tuple(nt), owner=owner)
        counts.inserted += 1
        return 1
    finally:
        mesh.locks.release(worker, tet)


def point_insertion_pass(mesh, field, tets, thr: Thresholds | None = None, threads: int = 1,
                         rng=None, counts: OpCounts | None = None, failed: set | None = None) -> int:
    """Insert points in the given tets, longest metric edge first.

    ``failed`` carries tets already rejected in earlier passes of the phase;
    they are skipped until replaced by new tets.
    """
    thr = thr or Thresholds()
    counts = counts if counts is not None else OpCounts()
    ctx = _Ctx(mesh, field, thr)
    if failed is not None:
        ctx.failed = failed
    ctx.buffer = _pseudo_inactive_vertices(mesh)
    tets = list(tets)
    if not tets:
        return 0
    arr = mesh.tet_array(tets)
    length = np.empty(len(arr))
    which = np.empty(len(arr), dtype=np.int64)
    K.longest_edges(mesh.coords, mesh.metric, arr, length, which)
    if not thr.centroid_insertion:
        keep = length > thr.split
        tets = np.asarray(tets)[keep]
        length = length[keep]
    order = np.lexsort((tets, -length))
    tets = [int(t) for t in np.asarray(tets)[order]]
    mesh.reserve(mesh.n_slots + len(tets) + 8)
    before = counts.inserted
    _run(tets, lambda w, t: _insert(ctx, w, t, counts), threads, rng)
    return counts.inserted - before


# --------------------------------------------------------------------------
# edge collapse

def _collapse(ctx: _Ctx, worker: int, v: int, counts: OpCounts, max_edge: float):
    mesh, thr = ctx.mesh, ctx.thr
    if not mesh.alive[v] or mesh.locks.state[v] == PRELOCKED:
        return 0
    nbrs = mesh.vertex_neighbors(v)
    locked = nbrs | {v}
    if not mesh.locks.try_lock(worker, locked):
        counts.lock_failures += 1
        return None
    try:
        if mesh.vertex_neighbors(v) != nbrs:
            return 0
        ball = sorted(mesh.vtets[v])
        if not all(mesh.pseudo[t] for t in ball):
            return 0
        coords, metric = mesh.coords, mesh.metric
        cands = []
        for w in nbrs:
            L = K.edge_len(coords, metric, v, w)
            if L < thr.collapse:
                cands.append((L, w))
        if not cands:
            return 0
        cands.sort()
        tags_v = mesh.vertex_tags(v)
        old_q = min(_tet_q(mesh, mesh.tets[t]) for t in ball)
        for _, w in cands:
            if tags_v:
                if not tags_v <= mesh.vertex_tags(w):
                    continue
                if not any(v in f and w in f for f, _ in mesh.vertex_bfaces(v)):
                    continue
            shell = mesh.vtets[v] & mesh.vtets[w]
            new = []
            ok = True
            for t in ball:
                if t in shell:
                    continue
                nt = _replace(mesh.tets[t], v, w)
                if _vol6(mesh, nt) <= 0.0:
                    ok = False
                    break
                new.append((t, nt))
            if not ok:
                continue
            qn = min((_tet_q(mesh, nt) for _, nt in new), default=1.0)
            if qn < min(old_q, thr.collapse_q_floor):
                continue
            wn = mesh.vertex_neighbors(w)
            if any(K.edge_len(coords, metric, w, u) > max_edge
                   for u in nbrs - wn - {w}):
                continue
            _apply_collapse(ctx, v, w, shell, new)
            counts.collapsed += 1
            return 1
        return 0
    finally:
        mesh.locks.release(worker, locked)


def _short_edge_vertices(mesh, below: float) -> list:
    """Free vertices with at least one incident edge shorter than ``below``."""
    edges = unique_edges(mesh.tet_array())
    if len(edges) == 0:
        return []
    lengths = np.empty(len(edges))
    K.edge_lengths(mesh.coords, mesh.metric, edges, lengths)
    short = edges[lengths < below].ravel()
    state = mesh.locks.state
    return [int(v) for v in np.unique(short) if state[v] != PRELOCKED]


def _apply_collapse(ctx: _Ctx, v, w, shell, new):
    mesh = ctx.mesh
    faces = mesh.vertex_bfaces(v)
    for t in shell:
        mesh.remove_tet(t)
    for t, nt in new:
        owner = ctx.owner_of((t,))
        mesh.remove_tet(t)
        mesh.add_tet(nt, owner=owner)
    for face, tag in faces:
        mesh.remove_bface(face)
        if w not in face:
            mesh.add_bface(_replace(face, v, w), tag)
    mesh.remove_vertex(v)


def edge_collapse_pass(mesh, field, mode: str = "pre", thr: Thresholds | None = None,
                       threads: int = 1, rng=None, counts: OpCounts | None = None,
                       vertices=None) -> int:
    """Collapse short edges, iterating over vertices that are not prelocked.

    ``mode`` "pre" precedes refinement and may create edges up to
    ``collapse_max_edge``; "post" keeps new edges within ``post_collapse_max_edge``.
    """
    if mode not in ("pre", "post"):
        raise ValueError(f"unknown collapse mode {mode!r}")
    thr = thr or Thresholds()
    max_edge = thr.collapse_max_edge if mode == "pre" else thr.post_collapse_max_edge
    counts = counts if counts is not None else OpCounts()
    ctx = _Ctx(mesh, field, thr)
    if vertices is None:
        vertices = _short_edge_vertices(mesh, thr.collapse)
    before = counts.collapsed
    _run(vertices, lambda w, v: _collapse(ctx, w, v, counts, max_edge), threads, rng)
    return counts.collapsed - before


# --------------------------------------------------------------------------
# smoothing

def _free_directions(mesh, v) -> np.ndarray:
    faces = mesh.vertex_bfaces(v)
    if not faces:
        return _AXES
    normals = []
    for face, _ in faces:
        p = mesh.coords[list(face)]
        n = np.cross(p[1] - p[0], p[2] - p[0])
        normals.append(n / np.linalg.norm(n))
    normals = np.array(normals)
    keep = np.all(np.abs(_AXES @ normals.T) < 1e-9, axis=1)
    return np.ascontiguousarray(_AXES[keep])


def _smooth(ctx: _Ctx, worker: int, v: int, counts: OpCounts):
    mesh, thr = ctx.mesh, ctx.thr
    state = mesh.locks.state
    if not mesh.alive[v] or state[v] == PRELOCKED:
        return 0
    nbrs = mesh.vertex_neighbors(v)
    if any(state[u] == PRELOCKED for u in nbrs):
        return 0
    locked = nbrs | {v}
    if not mesh.locks.try_lock(worker, locked):
        counts.lock_failures += 1
        return None
    try:
        if mesh.vertex_neighbors(v) != nbrs:
            return 0
        ball_ids = list(mesh.vtets[v])
        if not all(mesh.pseudo[t] for t in ball_ids):
            return 0
        dirs = _free_directions(mesh, v)
        if len(dirs) == 0:
            return 0
        ball = mesh.tet_array(ball_ids)
        means = np.empty((len(ball), 6))
        sdet = np.empty(len(ball))
        K.ball_means(mesh.logm, ball, means, sdet)
        p = mesh.coords[v]
        step = min(float(np.linalg.norm(mesh.coords[u] - p)) for u in nbrs) / 3.0
        q0, q1 = K.smooth_vertex(mesh.coords, mesh.metric, v, np.array(sorted(nbrs), dtype=np.int64),
                                 ball, means, sdet, dirs, step, thr.n_halvings, thr.max_moves,
                                 thr.band_lo, thr.band_hi)
        if q1 > q0:
            counts.smoothed += 1
            ctx.moved.append(v)
            return 1
        return 0
    finally:
        mesh.locks.release(worker, locked)


def vertex_smoothing_pass(mesh, field, thr: Thresholds | None = None, threads: int = 1,
                          rng=None, counts: OpCounts | None = None, vertices=None) -> int:
    """Pattern-search smoothing of free vertices whose ball quality is below ``smooth_below``.

    The vertex metric is held fixed during the search; analytic fields are
    re-sampled at moved vertices afterwards.
    """
    thr = thr or Thresholds()
    counts = counts if counts is not None else OpCounts()
    ctx = _Ctx(mesh, field, thr)
    if vertices is None:
        vertices = _low_quality_vertices(mesh, thr.smooth_below)
    before = counts.smoothed
    _run(vertices, lambda w, v: _smooth(ctx, w, v, counts), threads, rng)
    if ctx.field is not None and ctx.moved:
        moved = np.array(sorted(ctx.moved))
        m = ctx.field.evaluate(mesh.coords[moved])
        mesh.metric[moved] = m
        mesh.logm[moved] = log_metric(m)
    return counts.smoothed - before


def _low_quality_vertices(mesh, below: float) -> list:
    ids = np.array(mesh.tet_ids(), dtype=np.int64)
    if len(ids) == 0:
        return []
    tets = mesh.tet_array(ids)
    q = np.empty(len(tets))
    K.qualities(mesh.coords, mesh.logm, tets, q)
    vq = np.full(mesh.n_slots, np.inf)
    np.minimum.at(vq, tets.ravel(), np.repeat(q, 4))
    state = mesh.locks.state
    return [int(v) for v in np.flatnonzero(vq < below) if state[v] != PRELOCKED]


# --------------------------------------------------------------------------
# flips

def _flip23(ctx: _Ctx, t: int, i: int, n: int) -> bool:
    mesh = ctx.mesh
    tet, ntet = mesh.tets[t], mesh.tets[n]
    d = tet[i]
    f = [tet[j] for j in TET_FACES[i]]
    e = next(x for x in ntet if x not in f)
    if mesh.vtets[d] & mesh.vtets[e]:
        return False  # edge d-e already exists
    # (a, b, c) faces outward from t, so (a, b, c, e) is positively oriented
    a, b, c = f
    base = (a, b, c, e)
    new = [_replace(base, x, d) for x in (a, b, c)]
    vols = [_vol6(mesh, nt) for nt in new]
    if min(vols) <= 0.0:
        return False
    old_v = _vol6(mesh, tet) + _vol6(mesh, ntet)
    if abs(sum(vols) - old_v) > 1e-10 * old_v:
        return False
    qo = min(_tet_q(mesh, tet), _tet_q(mesh, ntet))
    qn = min(_tet_q(mesh, nt) for nt in new)
    if not qn > qo:
        return False
    owner = ctx.owner_of((t, n))
    mesh.remove_tet(t)
    mesh.remove_tet(n)
    for nt in new:
        mesh.add_tet(nt, owner=owner)
    return True


def _flip32(ctx: _Ctx, a: int, b: int, held: set) -> bool:
    mesh = ctx.mesh
    shell = mesh.vtets[a] & mesh.vtets[b]
    if len(shell) != 3:
        return False
    shell = sorted(shell)
    ring = set()
    for s in shell:
        if not mesh.pseudo[s]:
            return False
        ring.update(mesh.tets[s])
    ring -= {a, b}
    if len(ring) != 3 or not ring <= held:
        return False
    c, d, e = sorted(ring)
    for x in ring:
        if face_key(a, b, x) in mesh.bfaces:
            return False
    if mesh.vtets[c] & mesh.vtets[d] & mesh.vtets[e]:
        return False
    t1 = (c, d, e, a) if _vol6(mesh, (c, d, e, a)) > 0 else (d, c, e, a)
    t2 = (c, d, e, b) if _vol6(mesh, (c, d, e, b)) > 0 else (d, c, e, b)
    v1, v2 = _vol6(mesh, t1), _vol6(mesh, t2)
    if v1 <= 0.0 or v2 <= 0.0:
        return False
    old_v = sum(_vol6(mesh, mesh.tets[s]) for s in shell)
    if abs(v1 + v2 - old_v) > 1e-10 * old_v:
        return False
    qo = min(_tet_q(mesh, mesh.tets[s]) for s in shell)
    qn = min(_tet_q(mesh, t1), _tet_q(mesh, t2))
    if not qn > qo:
        return False
    owner = ctx.owner_of(shell)
    for s in shell:
        mesh.remove_tet(s)
    mesh.add_tet(t1, owner=owner)
    mesh.add_tet(t2, owner=owner)
    return True


def _flip(ctx: _Ctx, worker: int, t: int, counts: OpCounts):
    mesh = ctx.mesh
    tet = mesh.tets[t]
    if tet is None or not mesh.pseudo[t]:
        return 0
    state = mesh.locks.state
    if any(state[v] == PRELOCKED for v in tet):
        return 0
    if _tet_q(mesh, tet) >= ctx.thr.flip_below:
        return 0
    if not mesh.locks.try_lock(worker, tet):
        counts.lock_failures += 1
        return None
    held = set(tet)
    try:
        if mesh.tets[t] != tet:
            return 0
        for i in range(4):
            n = mesh.face_neighbor(t, i)
            if n is None or not mesh.pseudo[n]:
                continue
            e = next(x for x in mesh.tets[n] if x not in tet)
            if not mesh.locks.try_lock(worker, (e,)):
                continue
            held.add(e)
            try:
                if _flip23(ctx, t, i, n):
                    counts.flipped += 1
                    return 1
                f = [tet[j] for j in TET_FACES[i]]
                for x, y in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                    if _flip32(ctx, x, y, held):
                        counts.flipped += 1
                        return 1
            finally:
                mesh.locks.release(worker, (e,))
                held.discard(e)
        return 0
    finally:
        mesh.locks.release(worker, tet)


def local_reconnection_pass(mesh, field, tets=None, thr: Thresholds | None = None,
                            threads: int = 1, rng=None, counts: OpCounts | None = None) -> int:
    """2-3 and 3-2 flips that strictly raise the minimum quality of the replaced set."""
    thr = thr or Thresholds()
    counts = counts if counts is not None else OpCounts()
    ctx = _Ctx(mesh, field, thr)
    if tets is None:
        tets = [t for t in mesh.tet_ids() if mesh.active[t]]
    before = counts.flipped
    _run(tets, lambda w, t: _flip(ctx, w, t, counts), threads, rng)
    return counts.flipped - before


# --------------------------------------------------------------------------
# deactivation

def deactivate_conforming(mesh, field=None, thr: Thresholds | None = None) -> int:
    """Mark PseudoInactive tets and conforming Active tets Inactive; returns how many changed."""
    thr = thr or Thresholds()
    ids = [t for t in mesh.tet_ids() if mesh.active[t]]
    n = 0
    check = []
    for t in ids:
        if not mesh.pseudo[t]:
            mesh.active[t] = False
            n += 1
        else:
            check.append(t)
    if check:
        tets = mesh.tet_array(check)
        ok = np.empty(len(check), dtype=np.bool_)
        K.conforming_mask(mesh.coords, mesh.metric, mesh.logm, tets, thr.band_lo, thr.band_hi,
                          thr.q_min, ok)
        for t in np.asarray(check)[ok]:
            mesh.active[int(t)] = False
        n += int(ok.sum())
    return n


def active_count(mesh) -> int:
    return sum(1 for t, tet in enumerate(mesh.tets) if tet is not None and mesh.active[t])


# --------------------------------------------------------------------------
# preprocessing

def interface_preprocess(mesh, interface_points, num_layers: int, n_subdomains: int = 2):
    """Freeze everything except a layered band around the interface points.

    Returns (prelock set, pseudo-active tet set) as they stand after unlocking.
    """
    interface_points = set(int(v) for v in interface_points)
    if not interface_points and n_subdomains > 1:
        raise DecompositionError("no interface points although the mesh has several subdomains")
    alive = [int(v) for v in mesh.vertex_ids()]
    mesh.locks.release_prelocks()
    mesh.layer_checked[:] = 0
    mesh.locks.prelock(v for v in alive if v not in interface_points)
    for t in mesh.tet_ids():
        mesh.pseudo[t] = False
        mesh.active[t] = False
    unlock_activate_layers(mesh, sorted(interface_points), num_layers)
    prelock = mesh.locks.prelocked() & set(alive)
    pseudo = {t for t in mesh.tet_ids() if mesh.pseudo[t]}
    return prelock, pseudo


def shared_face_points(mesh) -> set:
    """Vertices on faces shared by a pseudo-active and a pseudo-inactive tet."""
    out = set()
    for t in mesh.tet_ids():
        if not mesh.pseudo[t]:
            continue
        tet = mesh.tets[t]
        for i in range(4):
            n = mesh.face_neighbor(t, i)
            if n is not None and not mesh.pseudo[n]:
                out.update(tet[j] for j in TET_FACES[i])
    return out


def interior_preprocess(mesh, prelock_interface_points, pseudo_active_interior_elements,
                        num_layers: int):
    """Lock the complement of the interface-phase prelock set and activate the listed tets.

    Interface vertices stay prelocked whatever the sets say. Returns the
    unlock seeds.
    """
    alive = set(int(v) for v in mesh.vertex_ids())
    pa = set(int(t) for t in pseudo_active_interior_elements)
    n_slots = len(mesh.tets)
    for t in pa:
        if not 0 <= t < n_slots or mesh.tets[t] is None:
            raise PayloadCorruptionError("pseudo_active", f"unknown tetrahedron {t}")
    interface = {v for v in alive if mesh.interface[v]}
    keep_free = set(int(v) for v in prelock_interface_points) - interface
    mesh.locks.release_prelocks()
    mesh.layer_checked[:] = 0
    mesh.locks.prelock(sorted(alive - keep_free))
    for t in mesh.tet_ids():
        mesh.pseudo[t] = t in pa
        mesh.active[t] = t in pa
    seeds = shared_face_points(mesh)
    unlock_activate_layers(mesh, sorted(seeds), num_layers, exclude=interface)
    return seeds


def interior_preprocess_naive(mesh):
    """Baseline without prelocking or pseudo-activity: only interface points are frozen."""
    mesh.locks.release_prelocks()
    mesh.locks.prelock(int(v) for v in mesh.vertex_ids() if mesh.interface[v])
    for t in mesh.tet_ids():
        mesh.pseudo[t] = True
        mesh.active[t] = True


def release_interior(mesh):
    """Unlock non-interface vertices and activate tets that touch no interface vertex."""
    iface = mesh.interface
    pre = [v for v in mesh.locks.prelocked() if v < mesh.n_slots and not iface[v]]
    mesh.locks.unprelock(pre)
    for t in mesh.tet_ids():
        if not any(iface[v] for v in mesh.tets[t]):
            mesh.pseudo[t] = True
            mesh.active[t] = True


# --------------------------------------------------------------------------
# driver

@dataclass
class DriverStats:
    phase: str
    passes: list = field(default_factory=list)
    totals: OpCounts = field(default_factory=OpCounts)
    post_collapsed: int = 0
    quality_flipped: int = 0
    quality_smoothed: int = 0
    converged: bool = True
    warning: str = ""
    wall_time: float = 0.0
    cpu_time: float = 0.0
    quality_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def adapt_driver(mesh, field, config: PhaseConfig, threads: int = 1, seed=None) -> DriverStats:
    """Refinement passes until the Active count stalls, then collapse and quality loops."""
    thr = config.thresholds
    rng = np.random.default_rng(seed) if seed is not None else None
    stats = DriverStats(phase=config.phase.value)
    t_wall, t_cpu = time.perf_counter(), time.thread_time()
    prev = None
    failed: set = set()
    for p in range(config.max_passes):
        c = OpCounts()
        t0 = time.perf_counter()
        c.deactivated = deactivate_conforming(mesh, field, thr)
        n_active = active_count(mesh)
        t1 = time.perf_counter()
        if config.use_pre_collapse and (p == 0 or thr.collapse_each_pass):
            for _ in range(10):
                if edge_collapse_pass(mesh, field, "pre", thr, threads, rng, c) == 0:
                    break
            deactivate_conforming(mesh, field, thr)
        t2 = time.perf_counter()
        buckets = bucketize_active(mesh, threads, rng)
        work = [t for b in buckets for t in b]
        point_insertion_pass(mesh, field, work, thr, threads, None, c, failed)
        t3 = time.perf_counter()
        flips = [t for t in mesh.tet_ids() if mesh.active[t]]
        local_reconnection_pass(mesh, field, flips, thr, threads, None, c)
        t4 = time.perf_counter()
        stats.totals.add(c)
        rec = dict(pass_=p, active=n_active, **asdict(c),
                   t_deactivate=t1 - t0, t_collapse=t2 - t1, t_insert=t3 - t2, t_flip=t4 - t3)
        stats.passes.append(rec)
        log.debug("%s pass %d: %s", config.phase.value, p, rec)
        if c.inserted == 0 and c.flipped == 0 and c.collapsed == 0:
            break
        if prev is not None and abs(n_active - prev) < config.stall_fraction * max(prev, 1):
            break
        prev = n_active
    else:
        if len(stats.passes) >= 2 and stats.passes[-1]["active"] > stats.passes[-2]["active"]:
            stats.converged = False
            stats.warning = "pass budget exhausted with rising active count"
            log.warning("%s phase: %s", config.phase.value, stats.warning)

    if config.phase is Phase.INTERIOR:
        release_interior(mesh)
    c = OpCounts()
    t0 = time.perf_counter()
    if config.use_post_collapse:
        stats.post_collapsed = edge_collapse_pass(mesh, field, "post", thr, threads, rng, c)
    for _ in range(config.n_quality_iters):
        local_reconnection_pass(mesh, field, None, thr, threads, rng, c)
        for _ in range(config.n_smooth_iters):
            vertex_smoothing_pass(mesh, field, thr, threads, rng, c)
    stats.quality_time = time.perf_counter() - t0
    stats.quality_flipped = c.flipped
    stats.quality_smoothed = c.smoothed
    stats.totals.add(c)
    stats.wall_time = time.perf_counter() - t_wall
    stats.cpu_time = time.thread_time() - t_cpu
    return stats
