from __future__ import annotations

import random
import sys
import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dmadapt.mesh import Mesh, generate_cube_mesh
from dmadapt.speculate import LockTable

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REGULAR_TET = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.5, np.sqrt(3.0) / 2.0, 0.0],
    [0.5, np.sqrt(3.0) / 6.0, np.sqrt(2.0 / 3.0)],
])


def single_tet_mesh(points=None) -> Mesh:
    pts = REGULAR_TET if points is None else np.asarray(points, dtype=float)
    faces = [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)]
    return Mesh.from_arrays(pts, [(0, 1, 2, 3)], faces, [1, 1, 1, 1])


@pytest.fixture
def cube2():
    return generate_cube_mesh(2)


@pytest.fixture
def cube4():
    return generate_cube_mesh(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bfs_component_count(mesh, tets) -> int:
    """Independent oracle: breadth-first search over tets sharing three vertices."""
    from collections import deque

    members = set(tets)
    by_face = {}
    for t in members:
        tet = mesh.tets[t]
        for skip in range(4):
            key = tuple(sorted(v for i, v in enumerate(tet) if i != skip))
            by_face.setdefault(key, []).append(t)
    adj = {t: set() for t in members}
    for ts in by_face.values():
        for a in ts:
            adj[a].update(b for b in ts if b != a)
    seen, count = set(), 0
    for start in members:
        if start in seen:
            continue
        count += 1
        seen.add(start)
        q = deque([start])
        while q:
            for u in adj[q.popleft()]:
                if u not in seen:
                    seen.add(u)
                    q.append(u)
    return count


def random_partition(mesh, k: int, rng, noise: float = 0.15):
    """Nearest-of-k-centres assignment with a fraction of tets scattered at random."""
    ids = mesh.tet_ids()
    cent = mesh.coords[mesh.tet_array(ids)].mean(axis=1)
    centres = rng.uniform(0, 1, size=(k, 3))
    sid = np.argmin(((cent[:, None, :] - centres[None]) ** 2).sum(axis=2), axis=1)
    flip = rng.uniform(size=len(ids)) < noise
    sid[flip] = rng.integers(0, k, flip.sum())
    for t, s in zip(ids, sid):
        mesh.owner[t] = int(s)
    return sorted(set(int(s) for s in sid))


def lock_stress(n_workers: int, cycles: int, n_points: int = 64, seed: int = 0) -> dict:
    """Hammer one table from many threads; returns counters of protocol violations."""
    table = LockTable(n_points)
    holder = [-1] * n_points
    out = {"dual": 0, "leaks": 0, "fails": 0, "wins": 0}
    guard = threading.Lock()

    def run(w):
        r = random.Random(seed * 1000 + w)
        tag = w + 1
        dual = leaks = fails = wins = 0
        for _ in range(cycles):
            pts = r.sample(range(n_points), 3)
            if table.try_lock(w, pts):
                wins += 1
                for v in pts:
                    if holder[v] != -1:
                        dual += 1
                    holder[v] = w
                for v in pts:
                    if holder[v] != w:
                        dual += 1
                    holder[v] = -1
                table.release(w, pts)
            else:
                fails += 1
                if tag in table.state:
                    leaks += 1
        with guard:
            for k, x in (("dual", dual), ("leaks", leaks), ("fails", fails), ("wins", wins)):
                out[k] += x

    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-6)
    try:
        threads = [threading.Thread(target=run, args=(w,)) for w in range(n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        sys.setswitchinterval(old)
    out["all_free"] = table.all_free()
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
