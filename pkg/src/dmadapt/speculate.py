"""Vertex lock table, speculative acquire-or-rollback, layered unlocking and bucketing.

Lock words hold ``FREE`` (0), ``PRELOCKED`` (-1) or ``worker + 1`` for a vertex
held by ``worker``. Transitions go through a small set of striped mutexes that
play the role of a compare-and-swap instruction; nobody ever waits for a lock
word to change.
"""
from __future__ import annotations

import threading
from collections import deque

import numpy as np

FREE = 0
PRELOCKED = -1

_STRIPES = 64


class LockProtocolError(RuntimeError):
    """A lock operation was called in a state the protocol forbids."""


class LockTable:
    def __init__(self, n: int = 0, debug: bool = False):
        self.state: list[int] = [FREE] * n
        self._stripes = [threading.Lock() for _ in range(_STRIPES)]
        self._grow = threading.Lock()
        self.debug = debug

    def __len__(self):
        return len(self.state)

    def grow(self, n: int):
        with self._grow:
            if n > len(self.state):
                self.state.extend([FREE] * (n - len(self.state)))

    # single-word primitives ------------------------------------------------
    def cas(self, v: int, expected: int, new: int) -> bool:
        with self._stripes[v % _STRIPES]:
            if self.state[v] != expected:
                return False
            self.state[v] = new
            return True

    def owner(self, v: int) -> int | None:
        s = self.state[v]
        return s - 1 if s > 0 else None

    def is_prelocked(self, v: int) -> bool:
        return self.state[v] == PRELOCKED

    # worker protocol -------------------------------------------------------
    def try_lock(self, worker: int, points) -> bool:
        """Lock every point for ``worker`` or none of them.

        Points are taken in ascending order; the first failure releases what
        this call already acquired and returns False.
        """
        tag = worker + 1
        got = []
        for v in sorted(set(points)):
            if self.debug and self.state[v] == tag:
                self._release_list(tag, got)
                raise LockProtocolError(f"worker {worker} already holds vertex {v}")
            if not self.cas(v, FREE, tag):
                self._release_list(tag, got)
                return False
            got.append(v)
        return True

    def _release_list(self, tag: int, points):
        for v in points:
            if not self.cas(v, tag, FREE) and self.debug:
                raise LockProtocolError(f"vertex {v} not held by worker {tag - 1}")

    def release(self, worker: int, points):
        self._release_list(worker + 1, points)

    def held_by(self, worker: int) -> list[int]:
        tag = worker + 1
        return [v for v, s in enumerate(self.state) if s == tag]

    def assert_held(self, worker: int, points):
        tag = worker + 1
        for v in points:
            if self.state[v] != tag:
                raise LockProtocolError(f"vertex {v} mutated without lock by worker {worker}")

    # phase-level operations (single threaded) ------------------------------
    def prelock(self, points):
        for v in points:
            s = self.state[v]
            if s > 0:
                raise LockProtocolError(f"vertex {v} is held by worker {s - 1} during preprocessing")
            self.state[v] = PRELOCKED

    def unprelock(self, points):
        for v in points:
            if self.state[v] == PRELOCKED:
                self.state[v] = FREE

    def release_prelocks(self):
        self.state = [FREE if s == PRELOCKED else s for s in self.state]

    def prelocked(self) -> set:
        return {v for v, s in enumerate(self.state) if s == PRELOCKED}

    def all_free(self) -> bool:
        return all(s == FREE for s in self.state)


def try_lock_points(table: LockTable, worker: int, points) -> bool:
    return table.try_lock(worker, points)


def preemptive_lock(table: LockTable, points):
    table.prelock(points)


def vertex_layers(mesh, seeds, num_layers: int) -> dict:
    """Hop distance from ``seeds`` for every vertex within ``num_layers`` hops."""
    level = {}
    frontier = deque()
    for v in seeds:
        if v not in level:
            level[v] = 0
            frontier.append(v)
    while frontier:
        v = frontier.popleft()
        k = level[v]
        if k >= num_layers:
            continue
        for u in mesh.vertex_neighbors(v):
            if u not in level:
                level[u] = k + 1
                frontier.append(u)
    return level


def unlock_activate_layers(mesh, seeds, num_layers: int, exclude=None):
    """Un-prelock vertices within ``num_layers`` hops of ``seeds`` and activate their tets.

    Vertices in ``exclude`` count for the traversal but keep their lock state.
    ``layer_checked`` stores hop level + 1 (0 means not reached).
    Returns (unlocked vertices, activated tets).
    """
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    level = vertex_layers(mesh, seeds, num_layers)
    exclude = exclude if exclude is not None else ()
    unlocked = set()
    tets = set()
    for v, k in level.items():
        mesh.layer_checked[v] = k + 1
        if v not in exclude:
            unlocked.add(v)
        tets.update(mesh.vtets[v])
    mesh.locks.unprelock(unlocked)
    for t in tets:
        mesh.active[t] = True
        mesh.pseudo[t] = True
    return unlocked, tets


def bucketize_active(mesh, n_buckets: int, rng=None, skip_any_prelocked: bool = True):
    """Split the Active tets into ``n_buckets`` lists whose sizes differ by at most one.

    A tet whose vertices are all prelocked is never bucketed. With
    ``skip_any_prelocked`` a single prelocked vertex already excludes the tet,
    since every kernel would have to lock it.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    state = mesh.locks.state
    ids = []
    for t, tet in enumerate(mesh.tets):
        if tet is None or not mesh.active[t]:
            continue
        n_pre = sum(1 for v in tet if state[v] == PRELOCKED)
        if n_pre == 4 or (skip_any_prelocked and n_pre):
            continue
        ids.append(t)
    ids = np.array(ids, dtype=np.int64)
    if rng is not None:
        rng.shuffle(ids)
    return [b.tolist() for b in np.array_split(ids, n_buckets)]
