from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import lock_stress
from dmadapt.mesh import generate_cube_mesh
from dmadapt.speculate import (
    FREE, PRELOCKED, LockProtocolError, LockTable, bucketize_active, preemptive_lock,
    try_lock_points, unlock_activate_layers, vertex_layers,
)


def bfs_layers(mesh, seeds, k):
    """Brute force: repeatedly add every vertex sharing a tet with the current set."""
    reached = set(seeds)
    for _ in range(k):
        grow = set(reached)
        for tet in mesh.tets:
            if tet is not None and reached & set(tet):
                grow.update(tet)
        reached = grow
    return reached


# ---------------------------------------------------------------- try_lock

def test_try_lock_all_free():
    t = LockTable(8)
    assert try_lock_points(t, 2, {1, 4, 6})
    assert t.held_by(2) == [1, 4, 6]
    assert all(t.owner(v) == 2 for v in (1, 4, 6))


def test_try_lock_rollback_on_other_owner():
    t = LockTable(8)
    assert t.try_lock(0, [5])
    assert not t.try_lock(1, [1, 2, 5, 7])
    assert t.held_by(1) == []
    assert t.state[1] == t.state[2] == t.state[7] == FREE


def test_try_lock_fails_on_prelocked():
    t = LockTable(8)
    preemptive_lock(t, {3})
    assert not t.try_lock(0, [0, 3])
    assert t.held_by(0) == []
    assert t.state[3] == PRELOCKED


def test_release_restores_free():
    t = LockTable(4)
    assert t.try_lock(1, [0, 1, 2, 3])
    t.release(1, [0, 1, 2, 3])
    assert t.all_free()


def test_debug_mode_catches_double_acquire():
    t = LockTable(4, debug=True)
    assert t.try_lock(0, [1])
    with pytest.raises(LockProtocolError):
        t.try_lock(0, [0, 1])
    assert t.held_by(0) == [1]


@given(st.lists(st.sets(st.integers(0, 15), min_size=1, max_size=5), min_size=1, max_size=20),
       st.lists(st.integers(0, 3), min_size=20, max_size=20))
def test_try_lock_all_or_nothing(requests, workers):
    t = LockTable(16)
    for pts, w in zip(requests, workers):
        before = list(t.state)
        ok = t.try_lock(w, pts)
        if ok:
            assert all(t.owner(v) == w for v in pts)
            changed = {v for v in range(16) if t.state[v] != before[v]}
            assert changed == pts
        else:
            assert t.state == before


# ---------------------------------------------------------------- prelock

def test_prelock_blocks_and_releases():
    t = LockTable(6)
    preemptive_lock(t, {1, 2})
    assert not t.try_lock(0, {1})
    assert t.prelocked() == {1, 2}
    t.release_prelocks()
    assert t.all_free()
    assert t.try_lock(0, {1})


def test_prelock_empty_is_noop():
    t = LockTable(6)
    preemptive_lock(t, set())
    assert t.all_free()


def test_prelock_of_held_vertex_is_protocol_error():
    t = LockTable(6)
    t.try_lock(3, [2])
    with pytest.raises(LockProtocolError):
        preemptive_lock(t, [2])


def test_grow_keeps_state():
    t = LockTable(2)
    preemptive_lock(t, [1])
    t.grow(10)
    assert len(t) == 10 and t.state[1] == PRELOCKED and t.state[9] == FREE


# ---------------------------------------------------------------- layers

def _prelocked_cube(n=3):
    m = generate_cube_mesh(n)
    m.locks.prelock(m.vertex_ids())
    for t in m.tet_ids():
        m.active[t] = False
        m.pseudo[t] = False
    return m


def test_layers_zero_only_seeds():
    m = _prelocked_cube()
    unlocked, tets = unlock_activate_layers(m, [0], 0)
    assert unlocked == {0}
    assert tets == m.vtets[0]
    assert m.locks.prelocked() == set(range(m.n_vertices)) - {0}
    assert {t for t in m.tet_ids() if m.active[t]} == m.vtets[0]
    assert all(m.pseudo[t] for t in tets)


@pytest.mark.parametrize("seeds", [[0], [13, 40], [21]])
def test_layers_match_bfs_and_are_monotone(seeds):
    m = generate_cube_mesh(3)
    prev = set()
    for k in range(6):
        got = set(vertex_layers(m, seeds, k))
        assert got == bfs_layers(m, seeds, k)
        assert prev <= got
        prev = got


def test_layer_levels_are_hop_distances():
    m = _prelocked_cube()
    unlock_activate_layers(m, [0], 2)
    lv = vertex_layers(m, [0], 2)
    for v, k in lv.items():
        assert m.layer_checked[v] == k + 1
        assert v in bfs_layers(m, [0], k)
        assert k == 0 or v not in bfs_layers(m, [0], k - 1)


def test_layers_idempotent():
    m = _prelocked_cube()
    a = unlock_activate_layers(m, [5, 30], 2)
    state = (list(m.locks.state), list(m.active), list(m.pseudo))
    b = unlock_activate_layers(m, [5, 30], 2)
    assert a == b
    assert state == (list(m.locks.state), list(m.active), list(m.pseudo))


def test_layers_saturate():
    m = _prelocked_cube()
    unlocked, tets = unlock_activate_layers(m, list(m.vertex_ids()), 0)
    assert m.locks.all_free()
    assert tets == set(m.tet_ids())


def test_layers_exclude_keeps_lock():
    m = _prelocked_cube()
    unlocked, _ = unlock_activate_layers(m, [0], 1, exclude={0})
    assert 0 not in unlocked and m.locks.is_prelocked(0)
    assert unlocked == bfs_layers(m, [0], 1) - {0}


def test_layers_negative_rejected():
    with pytest.raises(ValueError):
        unlock_activate_layers(generate_cube_mesh(1), [0], -1)


# ---------------------------------------------------------------- buckets

def test_bucket_sizes_4_3_3():
    m = generate_cube_mesh(2)
    for t in m.tet_ids()[10:]:
        m.active[t] = False
    sizes = [len(b) for b in bucketize_active(m, 3)]
    assert sorted(sizes, reverse=True) == [4, 3, 3]


def test_buckets_empty_when_inactive():
    m = generate_cube_mesh(2)
    for t in m.tet_ids():
        m.active[t] = False
    assert bucketize_active(m, 4) == [[], [], [], []]


def test_buckets_cover_active_once(rng):
    m = generate_cube_mesh(3)
    for t in rng.choice(m.tet_ids(), 40, replace=False):
        m.active[int(t)] = False
    buckets = bucketize_active(m, 5, rng=np.random.default_rng(1))
    flat = [t for b in buckets for t in b]
    assert sorted(flat) == [t for t in m.tet_ids() if m.active[t]]
    sizes = [len(b) for b in buckets]
    assert max(sizes) - min(sizes) <= 1


def test_buckets_never_hold_fully_prelocked(rng):
    m = generate_cube_mesh(3)
    for trial in range(10):
        m.locks.release_prelocks()
        m.locks.prelock(rng.choice(m.vertex_ids(), 40, replace=False).tolist())
        for skip_any in (True, False):
            for b in bucketize_active(m, 4, skip_any_prelocked=skip_any):
                for t in b:
                    n_pre = sum(m.locks.is_prelocked(v) for v in m.tets[t])
                    assert n_pre < 4
                    if skip_any:
                        assert n_pre == 0


def test_bucketize_rejects_zero():
    with pytest.raises(ValueError):
        bucketize_active(generate_cube_mesh(1), 0)


# ---------------------------------------------------------------- concurrency

def test_lock_stress_small():
    out = lock_stress(8, 5000)
    assert out["dual"] == 0 and out["leaks"] == 0 and out["all_free"]
    assert out["fails"] > 0 and out["wins"] > 0
