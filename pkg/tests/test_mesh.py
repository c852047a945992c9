from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np
import pytest

from conftest import REGULAR_TET, single_tet_mesh
from dmadapt.errors import MeshParseError, NonManifoldError
from dmadapt.mesh import (
    TET_FACES, Mesh, face_key, generate_cube_mesh, mesh_read, mesh_write, read_gids,
    validate_conformity, write_gids,
)


def five_tet_cube() -> Mesh:
    """Unit cube cut into one central tet and four corner tets."""
    corners = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    idx = {c: n for n, c in enumerate(corners)}
    even = [c for c in corners if sum(c) % 2 == 0]
    odd = [c for c in corners if sum(c) % 2 == 1]
    tets = [[idx[c] for c in even]]
    for c in odd:
        nb = [e for e in even if sum(abs(a - b) for a, b in zip(c, e)) == 1]
        tets.append([idx[c]] + [idx[e] for e in nb])
    coords = np.array(corners, dtype=float)
    for t in tets:
        p = coords[t]
        if np.linalg.det(p[1:] - p[0]) < 0:
            t[2], t[3] = t[3], t[2]
    count = defaultdict(list)
    for t in tets:
        for f in TET_FACES:
            face = tuple(t[j] for j in f)
            count[face_key(*face)].append(face)
    bfaces = [fs[0] for fs in count.values() if len(fs) == 1]
    return Mesh.from_arrays(coords, tets, bfaces, [1] * len(bfaces))


def brute_neighbors(mesh):
    """Face neighbours by comparing vertex sets of every tet pair."""
    ids = mesh.tet_ids()
    out = {t: set() for t in ids}
    for a, b in itertools.combinations(ids, 2):
        if len(set(mesh.tets[a]) & set(mesh.tets[b])) == 3:
            out[a].add(b)
            out[b].add(a)
    return out


# ---------------------------------------------------------------- I/O

def test_round_trip_single_tet(tmp_path):
    m = single_tet_mesh()
    m.owner[0] = 2
    mesh_write(m, tmp_path / "a.mesh")
    r = mesh_read(tmp_path / "a.mesh")
    assert np.array_equal(r.coords[:4], m.coords[:4])
    assert r.tet_array().tolist() == m.tet_array().tolist()
    assert r.bfaces == m.bfaces
    assert r.owner[0] == 2


def test_round_trip_is_byte_stable(tmp_path, cube2):
    mesh_write(cube2, tmp_path / "a.mesh")
    mesh_write(mesh_read(tmp_path / "a.mesh"), tmp_path / "b.mesh")
    assert (tmp_path / "a.mesh").read_bytes() == (tmp_path / "b.mesh").read_bytes()


def test_round_trip_global_ids(tmp_path, cube2):
    n = cube2.n_vertices
    cube2.gid[:n] = np.column_stack([np.arange(n) % 3, np.arange(n)])
    mesh_write(cube2, tmp_path / "g.mesh")
    assert (tmp_path / "g.gids").exists()
    r = mesh_read(tmp_path / "g.mesh")
    assert np.array_equal(r.gid[:n], cube2.gid[:n])
    assert r.next_local[0] == max(i for i in range(n) if i % 3 == 0) + 1


def _medit(body: str) -> str:
    return "MeshVersionFormatted 2\nDimension 3\n" + body + "\nEnd\n"


VERTS = "Vertices\n4\n0 0 0 0\n1 0 0 0\n0 1 0 0\n0 0 1 0\n"


def test_parse_rejects_vertex_zero(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text(_medit(VERTS + "Tetrahedra\n1\n0 2 3 4 1\n"))
    with pytest.raises(MeshParseError) as e:
        mesh_read(p)
    assert e.value.line == 11


def test_parse_rejects_unknown_keyword(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text(_medit(VERTS + "Hexahedra\n0\n"))
    with pytest.raises(MeshParseError, match="Hexahedra"):
        mesh_read(p)


def test_parse_rejects_zero_tet_count(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text(_medit(VERTS + "Tetrahedra\n0\n"))
    with pytest.raises(MeshParseError, match="line 10"):
        mesh_read(p)


def test_parse_keeps_inverted_unless_asked(tmp_path):
    p = tmp_path / "inv.mesh"
    p.write_text(_medit(VERTS + "Tetrahedra\n1\n1 2 4 3 1\n"))
    assert len(validate_conformity(mesh_read(p)).nonpositive_volume) == 1
    fixed = mesh_read(p, reorient=True)
    assert fixed.tet_volume(0) > 0
    assert fixed.parse_notes == ["tetrahedron 1 reoriented"]


def test_gids_sidecar_errors(tmp_path):
    p = tmp_path / "x.gids"
    write_gids([[0, 1], [2, 3]], p)
    assert read_gids(p).tolist() == [[0, 1], [2, 3]]
    with pytest.raises(MeshParseError):
        read_gids(p, expected=3)
    p.write_text("GIDS 2\n0 1\n")
    with pytest.raises(MeshParseError, match="line 3"):
        read_gids(p)


# ---------------------------------------------------------------- fixtures and generation

def test_five_tet_cube_fixture():
    m = five_tet_cube()
    assert (m.n_vertices, m.n_tets, len(m.bfaces)) == (8, 5, 12)
    assert validate_conformity(m).empty
    assert m.total_volume() == pytest.approx(1.0, abs=1e-14)


def test_cube_n1_counts():
    m = generate_cube_mesh(1)
    assert (m.n_vertices, m.n_tets) == (8, 6)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_cube_volume_and_counts(n):
    m = generate_cube_mesh(n)
    assert m.n_vertices == (n + 1) ** 3
    assert m.n_tets == 6 * n ** 3
    assert len(m.bfaces) == 12 * n * n
    assert m.total_volume() == pytest.approx(1.0, abs=1e-12)
    assert np.all(m.tet_volumes() > 0)


def test_cube4_conforms(cube4):
    assert validate_conformity(cube4).empty


def test_cube_rejects_n0():
    with pytest.raises(ValueError):
        generate_cube_mesh(0)


# ---------------------------------------------------------------- adjacency

def test_single_tet_adjacency():
    m = single_tet_mesh()
    assert all(m.vtets[v] == {0} for v in range(4))
    assert m.neighbors(0) == [None] * 4


def test_two_tets_sharing_a_face():
    pts = np.vstack([REGULAR_TET, REGULAR_TET[:3].mean(axis=0) - [0, 0, 0.8]])
    m = Mesh.from_arrays(pts, [(0, 1, 2, 3), (0, 2, 1, 4)])
    assert [n for n in m.neighbors(0) if n is not None] == [1]
    assert [n for n in m.neighbors(1) if n is not None] == [0]


@pytest.mark.parametrize("n", [1, 2])
def test_neighbors_match_brute_force(n):
    m = generate_cube_mesh(n)
    oracle = brute_neighbors(m)
    for t in m.tet_ids():
        got = {x for x in m.neighbors(t) if x is not None}
        assert got == oracle[t]
        for x in got:
            assert t in m.neighbors(x)


def test_build_adjacency_rejects_nonmanifold():
    pts = np.vstack([REGULAR_TET, [[0.5, 0.3, -0.7]], [[0.5, 0.3, 1.5]]])
    m = Mesh.from_arrays(pts, [(0, 1, 2, 3), (0, 2, 1, 4), (0, 1, 2, 5)])
    with pytest.raises(NonManifoldError):
        m.build_adjacency()


def test_build_adjacency_restores_incidence(cube2):
    saved = [set(s) for s in cube2.vtets]
    cube2.vtets = [set() for _ in cube2.vtets]
    cube2.build_adjacency()
    assert cube2.vtets == saved


# ---------------------------------------------------------------- validation

def test_validate_cube3_empty():
    assert validate_conformity(generate_cube_mesh(3)).empty


def test_validate_inverted_tet():
    m = generate_cube_mesh(2)
    a, b, c, d = m.tets[5]
    m.tets[5] = (a, b, d, c)
    rep = validate_conformity(m)
    assert rep.nonpositive_volume == [5]


def test_validate_overlapping_copies():
    m = Mesh.from_arrays(REGULAR_TET, [(0, 1, 2, 3), (0, 1, 2, 3)])
    rep = validate_conformity(m)
    assert len(rep.bad_face_multiplicity) == 4


def test_validate_orphan_and_open_faces():
    m = single_tet_mesh()
    m.remove_bface((1, 2, 3))
    rep = validate_conformity(m)
    assert rep.open_faces == [(1, 2, 3)]
    m.add_bface((1, 2, 3), 1)
    m.bfaces[(0, 1, 7)] = ((0, 1, 7), 1)
    assert validate_conformity(m).orphan_boundary_faces == [(0, 1, 7)]


def test_validate_duplicate_gids(cube2):
    cube2.gid[:cube2.n_vertices] = [[0, i] for i in range(cube2.n_vertices)]
    cube2.gid[3] = cube2.gid[1]
    assert validate_conformity(cube2).duplicate_gids == [((0, 1), 1, 3)]


def test_interface_exemption():
    m = single_tet_mesh()
    m.bfaces.clear()
    assert len(validate_conformity(m).open_faces) == 4
    m.interface[:4] = True
    assert validate_conformity(m, interface_exempt=True).empty


# ---------------------------------------------------------------- storage

def test_free_lists_do_not_leak(cube2, rng):
    tets = cube2.tet_ids()
    for t in rng.choice(tets, 10, replace=False):
        cube2.remove_tet(int(t))
    assert cube2.n_tets + len(cube2.free_tets) == len(cube2.tets)
    v = cube2.add_vertex([0.5, 0.5, 0.5])
    cube2.remove_vertex(v)
    assert cube2.n_vertices + len(cube2.free_verts) == cube2.capacity
    w = cube2.add_vertex([0.1, 0.1, 0.1])
    assert w == v
    t = cube2.add_tet((0, 1, 2, w))
    assert t in tets
    assert cube2.n_tets + len(cube2.free_tets) == len(cube2.tets)


def test_compact_preserves_geometry(cube2):
    cube2.remove_tet(0)
    out, vmap, kept = cube2.compact()
    assert out.n_tets == cube2.n_tets
    assert out.total_volume() == pytest.approx(cube2.total_volume(), abs=1e-14)
    for t_new, t_old in enumerate(kept):
        assert np.array_equal(out.coords[list(out.tets[t_new])], cube2.coords[list(cube2.tets[t_old])])
