"""Tetrahedral mesh container, adjacency, validation, structured cubes and MEDIT I/O.

Vertices and tetrahedra live in slot arrays. Deleted slots are kept on free
lists and recycled, so indices held by other structures stay valid for the
lifetime of the entity they name.
"""
from __future__ import annotations

import itertools
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import MeshParseError, NonManifoldError
from .metric import log_metric
from .speculate import LockTable

# face k of a tet is opposite local vertex k; ordered so the normal points outward
# for a positively oriented tet
TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))
TET_EDGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def face_key(a: int, b: int, c: int) -> tuple:
    return tuple(sorted((a, b, c)))


class Mesh:
    def __init__(self, capacity: int = 64):
        capacity = max(int(capacity), 8)
        self.coords = np.zeros((capacity, 3))
        self.metric = np.zeros((capacity, 6))
        self.logm = np.zeros((capacity, 6))
        self.gid = np.full((capacity, 2), -1, dtype=np.int64)
        self.alive = np.zeros(capacity, dtype=bool)
        self.interface = np.zeros(capacity, dtype=bool)
        self.layer_checked = np.zeros(capacity, dtype=np.int64)
        self.vref = np.zeros(capacity, dtype=np.int64)
        self.n_slots = 0
        self.vtets: list[set] = []
        self.free_verts: list[int] = []

        self.tets: list = []
        self.active: list[bool] = []
        self.pseudo: list[bool] = []  # True = pseudo-active
        self.owner: list[int] = []
        self.checked: list[bool] = []
        self.free_tets: list[int] = []

        self.bfaces: dict = {}  # sorted key -> (oriented face, tag)
        self.locks = LockTable(capacity)
        self.next_local: dict[int, int] = {}
        self.sid: int | None = None  # set on subdomain meshes; new entities belong to it
        self.parse_notes: list[str] = []
        self._alloc = threading.Lock()

    # ------------------------------------------------------------------ build
    @classmethod
    def from_arrays(cls, coords, tets, bfaces=(), tags=None, owners=None) -> "Mesh":
        coords = np.asarray(coords, dtype=float).reshape(-1, 3)
        mesh = cls(capacity=2 * len(coords) + 8)
        for p in coords:
            mesh.add_vertex(p)
        for i, t in enumerate(tets):
            o = -1 if owners is None else int(owners[i])
            mesh.add_tet(tuple(int(v) for v in t), owner=o)
        for i, f in enumerate(bfaces):
            tag = 0 if tags is None else int(tags[i])
            mesh.add_bface(tuple(int(v) for v in f), tag)
        return mesh

    def reserve(self, n_vertices: int):
        """Grow vertex storage to hold at least ``n_vertices`` slots."""
        cap = len(self.coords)
        if n_vertices <= cap:
            return
        new = max(n_vertices, 2 * cap)
        for name in ("coords", "metric", "logm", "gid", "alive", "interface",
                     "layer_checked", "vref"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            if name == "gid":
                arr[:] = -1
            arr[:cap] = old
            setattr(self, name, arr)
        self.locks.grow(new)

    def add_vertex(self, p, metric=None, logm=None, gid=None) -> int:
        with self._alloc:
            if self.free_verts:
                v = self.free_verts.pop()
            else:
                if self.n_slots >= len(self.coords):
                    self.reserve(self.n_slots + 1)
                v = self.n_slots
                self.n_slots += 1
                self.vtets.append(set())
            self.alive[v] = True
        self.coords[v] = p
        if metric is not None:
            self.metric[v] = metric
            self.logm[v] = log_metric(metric)[0] if logm is None else logm
        else:
            self.metric[v] = 0.0
            self.logm[v] = 0.0
        self.gid[v] = (-1, -1) if gid is None else gid
        self.interface[v] = False
        self.layer_checked[v] = 0
        self.vref[v] = 0
        self.vtets[v] = set()
        return v

    def remove_vertex(self, v: int):
        assert not self.vtets[v], "vertex still referenced"
        self.alive[v] = False
        self.gid[v] = (-1, -1)
        self.interface[v] = False
        with self._alloc:
            self.free_verts.append(v)

    def add_tet(self, tet, owner=-1, active=True, pseudo=True) -> int:
        tet = tuple(tet)
        with self._alloc:
            if self.free_tets:
                t = self.free_tets.pop()
                self.tets[t] = tet
                self.active[t] = active
                self.pseudo[t] = pseudo
                self.owner[t] = owner
                self.checked[t] = False
            else:
                t = len(self.tets)
                self.tets.append(tet)
                self.active.append(active)
                self.pseudo.append(pseudo)
                self.owner.append(owner)
                self.checked.append(False)
        for v in tet:
            self.vtets[v].add(t)
        return t

    def remove_tet(self, t: int):
        for v in self.tets[t]:
            self.vtets[v].discard(t)
        self.tets[t] = None
        self.active[t] = False
        with self._alloc:
            self.free_tets.append(t)

    def add_bface(self, face, tag: int):
        self.bfaces[face_key(*face)] = (tuple(face), int(tag))

    def remove_bface(self, face):
        return self.bfaces.pop(face_key(*face), None)

    # -------------------------------------------------------------- queries
    @property
    def n_vertices(self) -> int:
        return self.n_slots - len(self.free_verts)

    @property
    def n_tets(self) -> int:
        return len(self.tets) - len(self.free_tets)

    @property
    def capacity(self) -> int:
        return self.n_slots

    def tet_ids(self) -> list[int]:
        return [t for t, tet in enumerate(self.tets) if tet is not None]

    def tet_array(self, ids=None) -> np.ndarray:
        if ids is None:
            rows = [tet for tet in self.tets if tet is not None]
        else:
            rows = [self.tets[t] for t in ids]
        if not rows:
            return np.zeros((0, 4), dtype=np.int64)
        return np.array(rows, dtype=np.int64)

    def vertex_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive[:self.n_slots])

    def vertex_alive_mask(self) -> np.ndarray:
        return self.alive[:self.n_slots].copy()

    def tet_volume(self, t: int) -> float:
        return K.vol6(self.coords, *self.tets[t]) / 6.0

    def tet_volumes(self, tets=None) -> np.ndarray:
        tets = self.tet_array() if tets is None else tets
        if len(tets) == 0:
            return np.zeros(0)
        p = self.coords[tets]
        u, v, w = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
        return np.einsum("ij,ij->i", u, np.cross(v, w)) / 6.0

    def face_neighbor(self, t: int, i: int):
        tet = self.tets[t]
        a, b, c = (tet[j] for j in TET_FACES[i])
        common = self.vtets[a] & self.vtets[b] & self.vtets[c]
        common.discard(t)
        if not common:
            return None
        return next(iter(common))

    def neighbors(self, t: int) -> list:
        return [self.face_neighbor(t, i) for i in range(4)]

    def vertex_neighbors(self, v: int) -> set:
        out = set()
        for t in self.vtets[v]:
            out.update(self.tets[t])
        out.discard(v)
        return out

    def edge_shell(self, a: int, b: int) -> set:
        return self.vtets[a] & self.vtets[b]

    def vertex_bfaces(self, v: int) -> list:
        """Boundary faces (oriented, tag) incident to ``v``."""
        seen = []
        for t in self.vtets[v]:
            tet = self.tets[t]
            for f in TET_FACES:
                face = tuple(tet[j] for j in f)
                if v in face:
                    rec = self.bfaces.get(face_key(*face))
                    if rec is not None and rec not in seen:
                        seen.append(rec)
        return seen

    def vertex_tags(self, v: int) -> frozenset:
        return frozenset(tag for _, tag in self.vertex_bfaces(v))

    def total_volume(self) -> float:
        return float(self.tet_volumes().sum())

    # ----------------------------------------------------------- adjacency
    def build_adjacency(self):
        """Rebuild vertex->tet incidence and check face multiplicity."""
        self.vtets = [set() for _ in range(self.n_slots)]
        for t, tet in enumerate(self.tets):
            if tet is None:
                continue
            for v in tet:
                self.vtets[v].add(t)
        counts = face_counts(self)
        bad = [f for f, n in counts.items() if n > 2]
        if bad:
            raise NonManifoldError(f"{len(bad)} faces shared by more than two tets, e.g. {bad[0]}")

    def face_neighbor_table(self) -> dict:
        return {t: self.neighbors(t) for t in self.tet_ids()}

    # -------------------------------------------------------------- metric
    def set_metric(self, values):
        values = np.asarray(values, dtype=float)
        n = self.n_slots
        self.metric[:n] = values[:n]
        alive = self.alive[:n]
        self.logm[:n][alive] = log_metric(values[:n][alive])

    def sample(self, field):
        values = np.zeros((self.n_slots, 6))
        alive = self.alive[:self.n_slots]
        values[alive] = field.evaluate(self.coords[:self.n_slots][alive])
        self.set_metric(values)

    def scale_metric(self, factor: float):
        n = self.n_slots
        self.metric[:n] *= factor
        self.logm[:n, 0] += np.log(factor)
        self.logm[:n, 2] += np.log(factor)
        self.logm[:n, 5] += np.log(factor)

    # ----------------------------------------------------------------- ids
    def new_local_id(self, sid: int) -> int:
        with self._alloc:
            lid = self.next_local.get(sid, 0)
            self.next_local[sid] = lid + 1
        return lid

    def assign_missing_gids(self, sid_of_vertex) -> int:
        """Give every live vertex without a global id a fresh one; returns the count."""
        n = 0
        for v in self.vertex_ids():
            if self.gid[v, 0] < 0:
                sid = int(sid_of_vertex(v))
                self.gid[v] = (sid, self.new_local_id(sid))
                n += 1
        return n

    # ---------------------------------------------------------------- copy
    def compact(self):
        """Return (new mesh without holes, old->new vertex map, kept tet ids)."""
        vids = self.vertex_ids()
        vmap = np.full(self.n_slots, -1, dtype=np.int64)
        vmap[vids] = np.arange(len(vids))
        out = Mesh(capacity=2 * len(vids) + 8)
        n = len(vids)
        out.reserve(n)
        out.coords[:n] = self.coords[vids]
        out.metric[:n] = self.metric[vids]
        out.logm[:n] = self.logm[vids]
        out.gid[:n] = self.gid[vids]
        out.interface[:n] = self.interface[vids]
        out.vref[:n] = self.vref[vids]
        out.alive[:n] = True
        out.n_slots = n
        out.vtets = [set() for _ in range(n)]
        tids = self.tet_ids()
        for t in tids:
            nt = out.add_tet(tuple(int(vmap[v]) for v in self.tets[t]), owner=self.owner[t],
                             active=self.active[t], pseudo=self.pseudo[t])
            out.checked[nt] = self.checked[t]
        for (face, tag) in self.bfaces.values():
            out.add_bface(tuple(int(vmap[v]) for v in face), tag)
        out.next_local = dict(self.next_local)
        out.sid = self.sid
        return out, vmap, tids

    def copy(self) -> "Mesh":
        out, _, _ = self.compact()
        return out


def unique_edges(tets: np.ndarray) -> np.ndarray:
    """Sorted vertex pairs of all distinct edges of an (k,4) tet array."""
    if len(tets) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = tets[:, K.TET_EDGES].reshape(-1, 2)
    e.sort(axis=1)
    return np.unique(e, axis=0)


def face_counts(mesh) -> Counter:
    counts = Counter()
    for tet in mesh.tets:
        if tet is None:
            continue
        for f in TET_FACES:
            counts[face_key(*(tet[j] for j in f))] += 1
    return counts


# ------------------------------------------------------------------------
# structured cube

_KUHN = list(itertools.permutations(range(3)))


def generate_cube_mesh(n: int) -> Mesh:
    """Unit cube split into n^3 hexes of 6 tets each (Kuhn subdivision).

    Boundary triangles carry tags 1..6 for x=0, x=1, y=0, y=1, z=0, z=1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    coords = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    tets = []
    for i, j, k in itertools.product(range(n), repeat=3):
        for perm in _KUHN:
            corner = [i, j, k]
            path = [vid(*corner)]
            for axis in perm:
                corner[axis] += 1
                path.append(vid(*corner))
            tets.append(path)
    tets = np.array(tets, dtype=np.int64)
    vol = np.einsum("ij,ij->i", coords[tets[:, 1]] - coords[tets[:, 0]],
                    np.cross(coords[tets[:, 2]] - coords[tets[:, 0]],
                             coords[tets[:, 3]] - coords[tets[:, 0]]))
    neg = vol < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()

    mesh = Mesh.from_arrays(coords, tets)
    faces = tets[:, np.array(TET_FACES)].reshape(-1, 3)
    p = coords[faces]
    for axis in range(3):
        for side, val in ((0, 0.0), (1, 1.0)):
            on = np.all(p[:, :, axis] == val, axis=1)
            for face in faces[on].tolist():
                mesh.add_bface(tuple(face), 2 * axis + side + 1)
    return mesh


# ------------------------------------------------------------------------
# validation

@dataclass
class ConformityFindings:
    nonpositive_volume: list = field(default_factory=list)
    bad_face_multiplicity: list = field(default_factory=list)
    open_faces: list = field(default_factory=list)
    orphan_boundary_faces: list = field(default_factory=list)
    duplicate_gids: list = field(default_factory=list)

    def __bool__(self):
        return any(getattr(self, k) for k in self.__dataclass_fields__)

    @property
    def empty(self) -> bool:
        return not self

    def lines(self) -> list[str]:
        out = []
        for k in self.__dataclass_fields__:
            for item in getattr(self, k):
                out.append(f"{k}: {item}")
        return out


def _rotate_min(face) -> tuple:
    i = face.index(min(face))
    return face[i:] + face[:i]


def validate_conformity(mesh: Mesh, interface_exempt: bool = False,
                        volume_tol: float = 0.0) -> ConformityFindings:
    """Collect structural defects; an empty result means the mesh is valid.

    ``interface_exempt`` accepts unmatched faces whose three vertices are all
    flagged as interface points (subdomain meshes).
    """
    rep = ConformityFindings()
    for t, tet in enumerate(mesh.tets):
        if tet is None:
            continue
        v6 = K.vol6(mesh.coords, *tet)
        if v6 <= volume_tol:
            rep.nonpositive_volume.append(t)
    counts = Counter()
    sides: dict = {}
    for tet in mesh.tets:
        if tet is None:
            continue
        for f in TET_FACES:
            face = tuple(tet[j] for j in f)
            key = face_key(*face)
            counts[key] += 1
            # a shared face must be seen with opposite orientations from its two tets
            sides.setdefault(key, set()).add(_rotate_min(face))
    for f, n in counts.items():
        if n > 2 or (n == 2 and len(sides[f]) == 1):
            rep.bad_face_multiplicity.append((f, n))
        elif n == 1 and f not in mesh.bfaces:
            if not (interface_exempt and all(mesh.interface[v] for v in f)):
                rep.open_faces.append(f)
    for key in mesh.bfaces:
        if counts.get(key, 0) != 1:
            rep.orphan_boundary_faces.append(key)
    seen = {}
    for v in mesh.vertex_ids():
        g = tuple(int(x) for x in mesh.gid[v])
        if g[0] < 0:
            continue
        if g in seen:
            rep.duplicate_gids.append((g, seen[g], int(v)))
        else:
            seen[g] = int(v)
    return rep


# ------------------------------------------------------------------------
# MEDIT I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def mesh_write(mesh: Mesh, path, gids: bool | None = None):
    """Write MEDIT ASCII (1-based). Tet refs store owner+1. Writes ``.gids`` when ids exist."""
    m, _, _ = mesh.compact() if (mesh.free_verts or mesh.free_tets) else (mesh, None, None)
    path = Path(path)
    n = m.n_slots
    lines = ["MeshVersionFormatted 2", "", "Dimension 3", "", "Vertices", str(n)]
    for v in range(n):
        x, y, z = m.coords[v]
        lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {int(m.vref[v])}")
    tets = [(t, tet) for t, tet in enumerate(m.tets) if tet is not None]
    lines += ["", "Tetrahedra", str(len(tets))]
    for t, tet in tets:
        lines.append(" ".join(str(v + 1) for v in tet) + f" {m.owner[t] + 1}")
    faces = sorted(m.bfaces.values())
    lines += ["", "Triangles", str(len(faces))]
    for face, tag in faces:
        lines.append(" ".join(str(v + 1) for v in face) + f" {tag}")
    lines += ["", "End", ""]
    path.write_text("\n".join(lines))
    if gids is None:
        gids = bool(np.any(m.gid[:n, 0] >= 0))
    if gids:
        write_gids(m.gid[:n], path.with_suffix(".gids"))


def _tokens(path):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0]
        for tok in body.split():
            yield lineno, tok


def mesh_read(path, gids=True, reorient: bool = False) -> Mesh:
    """Parse MEDIT ASCII. With ``reorient`` negatively oriented tets are flipped
    (and noted in ``parse_notes``) instead of being kept as read."""
    tokens = list(_tokens(path))
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(tokens):
            last = tokens[-1][0] if tokens else 0
            raise MeshParseError(last, f"unexpected end of file reading {what}")
        tok = tokens[pos]
        pos += 1
        return tok

    def take_int(what):
        line, tok = take(what)
        try:
            return line, int(tok)
        except ValueError:
            raise MeshParseError(line, f"expected integer for {what}, got {tok!r}") from None

    def take_float(what):
        line, tok = take(what)
        try:
            return float(tok)
        except ValueError:
            raise MeshParseError(line, f"expected number for {what}, got {tok!r}") from None

    coords, vrefs, tets, trefs, tris, tags = [], [], [], [], [], []
    seen_version = False
    tet_lines = []
    tri_lines = []
    while pos < len(tokens):
        line, kw = take("keyword")
        if kw == "MeshVersionFormatted":
            take_int("version")
            seen_version = True
        elif kw == "Dimension":
            ln, dim = take_int("dimension")
            if dim != 3:
                raise MeshParseError(ln, f"only 3D meshes are supported, got Dimension {dim}")
        elif kw == "Vertices":
            ln, n = take_int("vertex count")
            if n < 0:
                raise MeshParseError(ln, "negative vertex count")
            for _ in range(n):
                coords.append([take_float("x"), take_float("y"), take_float("z")])
                vrefs.append(take_int("vertex ref")[1])
        elif kw == "Tetrahedra":
            ln, n = take_int("tetrahedron count")
            if n <= 0:
                raise MeshParseError(ln, "non-positive tetrahedron count")
            for _ in range(n):
                row = []
                ln0 = None
                for _k in range(4):
                    ln0, v = take_int("tet vertex")
                    row.append(v)
                tets.append(row)
                tet_lines.append(ln0)
                trefs.append(take_int("tet ref")[1])
        elif kw == "Triangles":
            ln, n = take_int("triangle count")
            if n < 0:
                raise MeshParseError(ln, "negative triangle count")
            for _ in range(n):
                row = []
                for _k in range(3):
                    ln0, v = take_int("triangle vertex")
                    row.append(v)
                tris.append(row)
                tri_lines.append(ln0)
                tags.append(take_int("triangle tag")[1])
        elif kw == "End":
            break
        else:
            raise MeshParseError(line, f"unknown keyword {kw!r}")
    if not seen_version:
        raise MeshParseError(1, "missing MeshVersionFormatted")
    if not tets:
        raise MeshParseError(tokens[-1][0] if tokens else 1, "no Tetrahedra section")
    nv = len(coords)
    for row, ln in zip(tets, tet_lines):
        for v in row:
            if not 1 <= v <= nv:
                raise MeshParseError(ln, f"tetrahedron vertex {v} out of range 1..{nv}")
    for row, ln in zip(tris, tri_lines):
        for v in row:
            if not 1 <= v <= nv:
                raise MeshParseError(ln, f"triangle vertex {v} out of range 1..{nv}")

    coords = np.array(coords, dtype=float).reshape(-1, 3)
    tets = np.array(tets, dtype=np.int64) - 1
    notes = []
    for i, row in enumerate(tets if reorient else ()):
        if K.vol6(coords, *row) < 0:
            row[2], row[3] = row[3], row[2]
            notes.append(f"tetrahedron {i + 1} reoriented")
    mesh = Mesh.from_arrays(coords, tets, np.array(tris, dtype=np.int64).reshape(-1, 3) - 1,
                            tags, owners=[r - 1 for r in trefs])
    mesh.vref[:nv] = vrefs
    mesh.parse_notes = notes
    gpath = Path(path).with_suffix(".gids")
    if gids and gpath.exists():
        mesh.gid[:nv] = read_gids(gpath, nv)
        for sid, lid in mesh.gid[:nv]:
            if sid >= 0:
                mesh.next_local[int(sid)] = max(mesh.next_local.get(int(sid), 0), int(lid) + 1)
    return mesh


def write_gids(gids, path):
    gids = np.asarray(gids)
    lines = [f"GIDS {len(gids)}"] + [f"{int(s)} {int(l)}" for s, l in gids] + [""]
    Path(path).write_text("\n".join(lines))


def read_gids(path, expected: int | None = None) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("GIDS"):
        raise MeshParseError(1, "missing GIDS header")
    try:
        n = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise MeshParseError(1, "bad GIDS header") from None
    if expected is not None and n != expected:
        raise MeshParseError(1, f"GIDS count {n} does not match {expected} vertices")
    out = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        ln = i + 2
        if ln - 1 >= len(lines):
            raise MeshParseError(ln, "truncated GIDS section")
        parts = lines[ln - 1].split()
        if len(parts) != 2:
            raise MeshParseError(ln, "expected '<subdomain_id> <local_id>'")
        try:
            out[i] = (int(parts[0]), int(parts[1]))
        except ValueError:
            raise MeshParseError(ln, "non-integer global id") from None
    return out


def boundary_vertex_tags(mesh: Mesh) -> dict:
    tags = defaultdict(set)
    for face, tag in mesh.bfaces.values():
        for v in face:
            tags[v].add(tag)
    return tags
