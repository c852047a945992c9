"""Sorting-based partitioning, interface classification, ownership of new tets and
repair of subdomains that are not face-connected.

The per-tet subdomain assignment lives in ``mesh.owner``; a :class:`Partitioning`
carries everything derived from it.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import AssignmentError, DecompositionError, RepairError

log = logging.getLogger(__name__)


@dataclass
class Partitioning:
    n_subdomains: int
    splits: tuple = (1, 1, 1)
    interface: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    vertex_owner: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    neighbors: dict = field(default_factory=dict)
    holders: dict = field(default_factory=dict)  # interface vertex -> sorted holder ids

    def interface_points(self) -> list:
        return [int(v) for v in np.flatnonzero(self.interface)]

    def interior_points(self, mesh) -> list:
        return [int(v) for v in mesh.vertex_ids() if not self.interface[v]]

    def sizes(self, mesh) -> list:
        c = Counter(mesh.owner[t] for t in mesh.tet_ids())
        return [c.get(s, 0) for s in range(self.n_subdomains)]

    def interface_counts(self) -> list:
        c = Counter()
        for hs in self.holders.values():
            for s in hs:
                c[s] += 1
        return [c.get(s, 0) for s in range(self.n_subdomains)]


def tet_centroids(mesh, ids) -> np.ndarray:
    return mesh.coords[mesh.tet_array(ids)].mean(axis=1)


def pqr_partition(mesh, nx: int, ny: int, nz: int) -> Partitioning:
    """Split tets by centroid x into nx near-equal groups, each by y into ny, each by z into nz.

    Subdomain id is the lexicographic bucket index (i * ny + j) * nz + k.
    Sorting is stable with the tet index as the tie breaker.
    """
    if min(nx, ny, nz) < 1:
        raise DecompositionError("splits must be >= 1")
    ids = np.array(mesh.tet_ids(), dtype=np.int64)
    n = nx * ny * nz
    if len(ids) == 0:
        raise DecompositionError("mesh has no tetrahedra")
    if n > len(ids):
        raise DecompositionError(f"{n} subdomains requested for {len(ids)} tetrahedra")
    cent = tet_centroids(mesh, ids)

    def split(sel, axis, parts):
        order = np.lexsort((ids[sel], cent[sel, axis]))
        return np.array_split(sel[order], parts)

    owner = np.empty(len(ids), dtype=np.int64)
    for i, sx in enumerate(split(np.arange(len(ids)), 0, nx)):
        for j, sy in enumerate(split(sx, 1, ny)):
            for k, sz in enumerate(split(sy, 2, nz)):
                owner[sz] = (i * ny + j) * nz + k
    for t, s in zip(ids, owner):
        mesh.owner[int(t)] = int(s)
    part = Partitioning(n_subdomains=n, splits=(nx, ny, nz))
    classify_interface(mesh, part)
    return part


def vertex_holders(mesh) -> dict:
    holders = {}
    for v in mesh.vertex_ids():
        holders[int(v)] = sorted({mesh.owner[t] for t in mesh.vtets[v]})
    return holders


def classify_interface(mesh, part: Partitioning) -> Partitioning:
    """A vertex is an interface point iff tets of two or more subdomains use it.

    Owner of any vertex is the lowest holder. Two subdomains are neighbours iff
    they share an interface point. Sets ``mesh.interface`` as well.
    """
    n = mesh.n_slots
    part.interface = np.zeros(n, dtype=bool)
    part.vertex_owner = np.full(n, -1, dtype=np.int64)
    part.neighbors = {s: set() for s in range(part.n_subdomains)}
    part.holders = {}
    for v, hs in vertex_holders(mesh).items():
        if not hs:
            continue
        part.vertex_owner[v] = hs[0]
        if len(hs) > 1:
            part.interface[v] = True
            part.holders[v] = tuple(hs)
            for a in hs:
                part.neighbors.setdefault(a, set()).update(h for h in hs if h != a)
    mesh.interface[:n] = part.interface
    mesh.interface[n:] = False
    return part


def _plurality(counter: Counter):
    if not counter:
        return None
    best = max(counter.values())
    return min(s for s, c in counter.items() if c == best)


def assign_new_elements(mesh, part: Partitioning | None = None, new_tets=None) -> int:
    """Give every unassigned tet the plurality subdomain of its face neighbours.

    Falls back to tets sharing a vertex; ties go to the lowest id. Tets whose
    neighbours are all unassigned wait for the next round.
    """
    pending = sorted(new_tets) if new_tets is not None else \
        [t for t in mesh.tet_ids() if mesh.owner[t] < 0]
    for t in pending:
        mesh.owner[t] = -1
    done = 0
    while pending:
        left = []
        for t in pending:
            c = Counter()
            for n in mesh.neighbors(t):
                if n is not None and mesh.owner[n] >= 0:
                    c[mesh.owner[n]] += 1
            s = _plurality(c)
            if s is None:
                for v in mesh.tets[t]:
                    for u in mesh.vtets[v]:
                        if u != t and mesh.owner[u] >= 0:
                            c[mesh.owner[u]] += 1
                s = _plurality(c)
            if s is None:
                left.append(t)
            else:
                mesh.owner[t] = s
                done += 1
        if len(left) == len(pending):
            raise AssignmentError(f"{len(left)} tetrahedra have no assigned neighbour, e.g. {left[0]}")
        pending = left
    return done


def face_components(mesh, tets) -> list:
    """Face-connected components of ``tets`` (depth-first), each sorted."""
    members = set(tets)
    seen = set()
    comps = []
    for start in sorted(members):
        if start in seen:
            continue
        stack = [start]
        seen.add(start)
        comp = []
        while stack:
            t = stack.pop()
            comp.append(t)
            for n in mesh.neighbors(t):
                if n is not None and n in members and n not in seen:
                    seen.add(n)
                    stack.append(n)
        comps.append(sorted(comp))
    return comps


def _target(mesh, comp, sid):
    inside = set(comp)
    c = Counter()
    for t in comp:
        for n in mesh.neighbors(t):
            if n is not None and n not in inside and mesh.owner[n] != sid:
                c[mesh.owner[n]] += 1
    s = _plurality(c)
    if s is not None:
        return s
    for t in comp:
        for v in mesh.tets[t]:
            for u in mesh.vtets[v]:
                if u not in inside and mesh.owner[u] != sid:
                    c[mesh.owner[u]] += 1
    return _plurality(c)


def make_simply_connected(mesh, n_subdomains: int | None = None, max_rounds: int = 100) -> int:
    """Keep the largest face-connected piece of every subdomain and hand the rest
    to the neighbouring subdomain with most face contacts. Returns tets moved.

    Equal-size pieces: the one holding the lowest tet index stays.
    """
    moved = 0
    for _ in range(max_rounds):
        by_sid: dict = {}
        for t in mesh.tet_ids():
            by_sid.setdefault(mesh.owner[t], []).append(t)
        if n_subdomains is not None:
            empty = [s for s in range(n_subdomains) if s not in by_sid]
            if empty:
                raise RepairError(f"subdomain {empty[0]} is empty")
        changed = False
        for sid in sorted(by_sid):
            # earlier moves in this round may have merged pieces into ``sid``
            members = [t for t in mesh.tet_ids() if mesh.owner[t] == sid] if changed else by_sid[sid]
            comps = face_components(mesh, members)
            if len(comps) == 1:
                continue
            comps.sort(key=lambda c: (-len(c), c[0]))
            for comp in comps[1:]:
                target = _target(mesh, comp, sid)
                if target is None:
                    raise RepairError(f"component of subdomain {sid} at tet {comp[0]} is isolated")
                for t in comp:
                    mesh.owner[t] = target
                moved += len(comp)
                changed = True
            log.debug("subdomain %d: %d extra components moved", sid, len(comps) - 1)
        if not changed:
            return moved
    raise RepairError(f"repair did not settle within {max_rounds} rounds")


def is_simply_connected(mesh) -> bool:
    by_sid: dict = {}
    for t in mesh.tet_ids():
        by_sid.setdefault(mesh.owner[t], []).append(t)
    return all(len(face_components(mesh, ts)) == 1 for ts in by_sid.values())
