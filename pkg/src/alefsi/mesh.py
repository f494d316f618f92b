"""Hierarchical interface-resolving quad/hex meshes for the benchmark channels.

A mesh level stores bilinear cell connectivity plus the derived biquadratic
node set (vertices, edge midpoints, face centers, cell centers).  Uniform
refinement promotes every node of level l to a vertex of level l+1, so the
first ``n_nodes(l)`` node ids of the fine level coincide with the coarse
node ids; state transfer between levels is plain slicing.

New boundary vertices on curved facets (the cylinder) are projected onto
the exact surface, and the projected positions feed the isoparametric cell
maps through the mid-edge nodes.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

FLUID = 0
SOLID = 1

INFLOW = "inflow"
OUTFLOW = "outflow"
WALL = "wall"
CYLINDER = "cylinder"
SOLID_DIRICHLET = "solid_dirichlet"

NODE_FLUID = 0
NODE_INTERFACE = 1
NODE_SOLID = 2

MAX_LEVEL = {2: 6, 3: 3}

# local edges / faces of the reference cell, vertex order
# 2d: v0=(0,0) v1=(1,0) v2=(1,1) v3=(0,1); 3d adds v4..v7 at z=1.
_EDGES_2D = [(0, 1), (1, 2), (2, 3), (3, 0)]
_EDGES_3D = [(0, 1), (1, 2), (2, 3), (3, 0),
             (4, 5), (5, 6), (6, 7), (7, 4),
             (0, 4), (1, 5), (2, 6), (3, 7)]
_FACES_3D = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
             (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]


class MeshError(Exception):
    pass


class MeshCapacityError(MeshError):
    pass


class MeshIntegrityError(MeshError):
    pass


@dataclass(frozen=True)
class CircleProjector:
    """Radial projection onto a circle (2d) or a z-aligned cylinder (3d)."""

    cx: float
    cy: float
    radius: float

    def __call__(self, points):
        points = np.array(points, dtype=float, copy=True)
        d = points[:, :2] - np.array([self.cx, self.cy])
        norm = np.linalg.norm(d, axis=1)
        points[:, :2] = np.array([self.cx, self.cy]) + self.radius * d / norm[:, None]
        return points


def _entity_index(conn_tuples):
    """Map canonical vertex tuples to contiguous ids; returns (ids, inverse)."""
    arr = np.sort(np.asarray(conn_tuples, dtype=np.int64), axis=1)
    uniq, inverse = np.unique(arr, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


class MeshLevel:
    """One level of the hierarchy: cells, subdomains, facets and Q2 nodes."""

    def __init__(self, dim, vertices, cells, cell_subdomain, facets,
                 projectors=None, parent_cell=None, level=0):
        self.dim = int(dim)
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.cell_subdomain = np.asarray(cell_subdomain, dtype=np.int8)
        self.facets = {label: np.asarray(f, dtype=np.int64).reshape(-1, 2 ** (dim - 1))
                       for label, f in facets.items() if len(f)}
        self.projectors = dict(projectors or {})
        self.parent_cell = (np.asarray(parent_cell, dtype=np.int64)
                            if parent_cell is not None
                            else np.full(len(self.cells), -1, dtype=np.int64))
        self.level = level
        self._build_entities()
        self._build_nodes()
        self._index_facets()

    # -- entity construction -------------------------------------------------

    def _build_entities(self):
        cells = self.cells
        edges_local = _EDGES_2D if self.dim == 2 else _EDGES_3D
        conn = np.concatenate([cells[:, e] for e in edges_local], axis=0)
        self.edges, inv = _entity_index(conn)
        self.cell_edges = inv.reshape(len(edges_local), -1).T
        if self.dim == 3:
            conn = np.concatenate([cells[:, f] for f in _FACES_3D], axis=0)
            self.faces, inv = _entity_index(conn)
            self.cell_faces = inv.reshape(len(_FACES_3D), -1).T
        else:
            self.faces = np.zeros((0, 4), dtype=np.int64)
            self.cell_faces = np.zeros((len(cells), 0), dtype=np.int64)

    def _lattice(self):
        """Node ids of every cell arranged on the 3^d lattice (x fastest)."""
        nv, ne, nf = len(self.vertices), len(self.edges), len(self.faces)
        c = self.cells
        e = self.cell_edges + nv
        nc = np.arange(len(c)) + nv + ne + nf
        if self.dim == 2:
            lat = np.stack([c[:, 0], e[:, 0], c[:, 1],
                            e[:, 3], nc, e[:, 1],
                            c[:, 3], e[:, 2], c[:, 2]], axis=1)
        else:
            f = self.cell_faces + nv + ne
            lat = np.stack([
                c[:, 0], e[:, 0], c[:, 1], e[:, 3], f[:, 0], e[:, 1],
                c[:, 3], e[:, 2], c[:, 2],
                e[:, 8], f[:, 2], e[:, 9], f[:, 5], nc, f[:, 3],
                e[:, 11], f[:, 4], e[:, 10],
                c[:, 4], e[:, 4], c[:, 5], e[:, 7], f[:, 1], e[:, 5],
                c[:, 7], e[:, 6], c[:, 6]], axis=1)
        return lat

    def _build_nodes(self):
        nv = len(self.vertices)
        mids = self.vertices[self.edges].mean(axis=1)
        parts = [self.vertices, mids]
        if self.dim == 3:
            parts.append(self.vertices[self.faces].mean(axis=1))
        parts.append(self.vertices[self.cells].mean(axis=1))
        nodes = np.concatenate(parts, axis=0)

        # project midside nodes that sit on curved boundary facets
        for label, proj in self.projectors.items():
            if label not in self.facets:
                continue
            ids = self._curved_node_ids(self.facets[label])
            if len(ids):
                nodes[ids] = proj(nodes[ids])
        self.nodes = nodes
        self.cell_nodes = self._lattice()
        self.n_nodes = len(nodes)

    def _curved_node_ids(self, facets):
        """Edge/face node ids generated on the given boundary facets."""
        nv, ne = len(self.vertices), len(self.edges)
        ids = []
        if self.dim == 2:
            ids.append(nv + self._edge_ids(facets))
        else:
            quad_edges = [(0, 1), (1, 2), (2, 3), (3, 0)]
            for a, b in quad_edges:
                ids.append(nv + self._edge_ids(facets[:, [a, b]]))
            ids.append(nv + ne + self._face_ids(facets))
        return np.unique(np.concatenate(ids))

    def _edge_ids(self, pairs):
        if not hasattr(self, "_edge_lut"):
            self._edge_lut = {tuple(e): i for i, e in enumerate(self.edges)}
        key = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        return np.array([self._edge_lut[tuple(k)] for k in key], dtype=np.int64)

    def _face_ids(self, quads):
        if not hasattr(self, "_face_lut"):
            self._face_lut = {tuple(f): i for i, f in enumerate(self.faces)}
        key = np.sort(np.asarray(quads, dtype=np.int64).reshape(-1, 4), axis=1)
        return np.array([self._face_lut[tuple(k)] for k in key], dtype=np.int64)

    def _index_facets(self):
        """Attach (cell, local facet) info and per-label node sets."""
        nv, ne = len(self.vertices), len(self.edges)
        if self.dim == 2:
            owner = {}
            for loc, _ in enumerate(_EDGES_2D):
                for c, e in enumerate(self.cell_edges[:, loc]):
                    owner.setdefault(e, (c, loc))
            self.facet_cells = {}
            for label, f in self.facets.items():
                eids = self._edge_ids(f)
                self.facet_cells[label] = np.array([owner[e] for e in eids],
                                                   dtype=np.int64)
        else:
            owner = {}
            for loc, _ in enumerate(_FACES_3D):
                for c, fid in enumerate(self.cell_faces[:, loc]):
                    owner.setdefault(fid, (c, loc))
            self.facet_cells = {}
            for label, f in self.facets.items():
                fids = self._face_ids(f)
                self.facet_cells[label] = np.array([owner[fid] for fid in fids],
                                                   dtype=np.int64)

        self.boundary_nodes = {}
        for label, f in self.facets.items():
            ids = [f.reshape(-1)]
            if self.dim == 2:
                ids.append(nv + self._edge_ids(f))
            else:
                for a, b in [(0, 1), (1, 2), (2, 3), (3, 0)]:
                    ids.append(nv + self._edge_ids(f[:, [a, b]]))
                ids.append(nv + ne + self._face_ids(f))
            self.boundary_nodes[label] = np.unique(np.concatenate(ids))

    # -- geometry helpers ----------------------------------------------------

    def cell_volumes(self):
        corners = self.vertices[self.cells]
        if self.dim == 2:
            x, y = corners[..., 0], corners[..., 1]
            return 0.5 * np.abs(
                np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1))
        from .fem import cell_geometry, gauss_rule, ShapeTable
        pts, w = gauss_rule(3, self.dim)
        table = ShapeTable(self.dim, pts)
        _, wdet = cell_geometry(self, table, w)
        return wdet.sum(axis=1)

    def nodes_of_label(self, *labels):
        parts = [self.boundary_nodes[l] for l in labels if l in self.boundary_nodes]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def macro_groups(self):
        """Cells grouped by parent; coarse level falls back to single cells."""
        if self.parent_cell[0] < 0:
            return np.arange(len(self.cells), dtype=np.int64)[:, None]
        order = np.argsort(self.parent_cell, kind="stable")
        return order.reshape(-1, 2 ** self.dim)


def refine(mesh: MeshLevel) -> MeshLevel:
    """Uniform quadtree/octree refinement; Q2 nodes become fine vertices."""
    lat = mesh._lattice()
    if mesh.dim == 2:
        l3 = lat.reshape(-1, 3, 3)
        children = []
        for b in (0, 1):
            for a in (0, 1):
                children.append(np.stack([l3[:, b, a], l3[:, b, a + 1],
                                          l3[:, b + 1, a + 1], l3[:, b + 1, a]], axis=1))
        kids_per = 4
    else:
        l3 = lat.reshape(-1, 3, 3, 3)
        children = []
        for c in (0, 1):
            for b in (0, 1):
                for a in (0, 1):
                    children.append(np.stack(
                        [l3[:, c, b, a], l3[:, c, b, a + 1],
                         l3[:, c, b + 1, a + 1], l3[:, c, b + 1, a],
                         l3[:, c + 1, b, a], l3[:, c + 1, b, a + 1],
                         l3[:, c + 1, b + 1, a + 1], l3[:, c + 1, b + 1, a]], axis=1))
        kids_per = 8
    # interleave so that children of one parent are contiguous
    new_cells = np.stack(children, axis=1).reshape(len(mesh.cells) * kids_per, -1)
    parent = np.repeat(np.arange(len(mesh.cells), dtype=np.int64), kids_per)
    subdomain = np.repeat(mesh.cell_subdomain, kids_per)

    nv, ne = len(mesh.vertices), len(mesh.edges)
    new_facets = {}
    for label, f in mesh.facets.items():
        if mesh.dim == 2:
            m = nv + mesh._edge_ids(f)
            new_facets[label] = np.concatenate(
                [np.stack([f[:, 0], m], axis=1), np.stack([m, f[:, 1]], axis=1)])
        else:
            e01 = nv + mesh._edge_ids(f[:, [0, 1]])
            e12 = nv + mesh._edge_ids(f[:, [1, 2]])
            e23 = nv + mesh._edge_ids(f[:, [2, 3]])
            e30 = nv + mesh._edge_ids(f[:, [3, 0]])
            fc = nv + ne + mesh._face_ids(f)
            new_facets[label] = np.concatenate([
                np.stack([f[:, 0], e01, fc, e30], axis=1),
                np.stack([e01, f[:, 1], e12, fc], axis=1),
                np.stack([fc, e12, f[:, 2], e23], axis=1),
                np.stack([e30, fc, e23, f[:, 3]], axis=1)])
    return MeshLevel(mesh.dim, mesh.nodes, new_cells, subdomain, new_facets,
                     projectors=mesh.projectors, parent_cell=parent,
                     level=mesh.level + 1)


@dataclass
class MeshHierarchy:
    levels: list

    @property
    def dim(self):
        return self.levels[0].dim

    @property
    def finest(self):
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    def restrict_nodal(self, values, fine_level, coarse_level):
        """Injection of nodal data: coarse node ids are a prefix of fine ids."""
        out = values
        for l in range(fine_level, coarse_level, -1):
            out = out[: self.levels[l - 1].n_nodes]
        return out


# -- geometry files ----------------------------------------------------------

def parse_geometry(text) -> MeshLevel:
    tokens = [l.split() for l in text.splitlines()
              if l.strip() and not l.startswith("#")]
    it = iter(tokens)
    head = next(it)
    if head[0] != "format" or head[1] != "1":
        raise MeshError(f"unsupported geometry format: {head}")
    dim = int(next(it)[1])
    n = int(next(it)[1])
    vertices = np.array([[float(x) for x in next(it)] for _ in range(n)])
    n = int(next(it)[1])
    rows = [next(it) for _ in range(n)]
    cells = np.array([[int(x) for x in r[1:]] for r in rows], dtype=np.int64)
    sub = np.array([FLUID if r[0] == "fluid" else SOLID for r in rows], dtype=np.int8)
    n = int(next(it)[1])
    facets = {}
    for _ in range(n):
        r = next(it)
        facets.setdefault(r[0], []).append([int(x) for x in r[1:]])
    n = int(next(it)[1])
    projectors = {}
    for _ in range(n):
        r = next(it)
        if r[1] in ("circle", "cylinder_z"):
            projectors[r[0]] = CircleProjector(float(r[2]), float(r[3]), float(r[4]))
        else:
            raise MeshError(f"unknown curve kind {r[1]}")
    return MeshLevel(dim, vertices, cells, sub, facets, projectors=projectors)


def _load_packaged(name) -> MeshLevel:
    text = importlib.resources.files("alefsi.geodata").joinpath(name).read_text()
    return parse_geometry(text)


def build_hierarchy(coarse: MeshLevel, level: int) -> MeshHierarchy:
    levels = [coarse]
    for _ in range(level):
        levels.append(refine(levels[-1]))
    return MeshHierarchy(levels)


def build_benchmark_mesh_2d(level: int) -> MeshHierarchy:
    """Nested meshes for the 2d channel-cylinder-flag configuration."""
    if level < 0 or level > MAX_LEVEL[2]:
        raise MeshCapacityError(f"2d benchmark supports levels 0..{MAX_LEVEL[2]}")
    return build_hierarchy(_load_packaged("fsi3_2d.txt"), level)


def build_benchmark_mesh_3d(level: int) -> MeshHierarchy:
    """Nested hexahedral meshes for the 3d channel-cylinder-beam configuration."""
    if level < 0 or level > MAX_LEVEL[3]:
        raise MeshCapacityError(f"3d benchmark supports levels 0..{MAX_LEVEL[3]}")
    return build_hierarchy(_load_packaged("fsi_3d.txt"), level)


def rectangle_mesh(nx, ny, lx=1.0, ly=1.0, solid_cols=0) -> MeshLevel:
    """Structured quad mesh of [0,lx] x [0,ly] for tests.

    Columns with index >= nx - solid_cols are tagged solid, which gives a
    simple fluid/solid strip with a vertical interface.
    """
    x = np.linspace(0, lx, nx + 1)
    y = np.linspace(0, ly, ny + 1)
    xx, yy = np.meshgrid(x, y, indexing="xy")
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells, sub = [], []
    for j in range(ny):
        for i in range(nx):
            cells.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])
            sub.append(SOLID if i >= nx - solid_cols else FLUID)
    facets = {INFLOW: [], OUTFLOW: [], WALL: []}
    for j in range(ny):
        facets[INFLOW].append([vid(0, j + 1), vid(0, j)])
        facets[OUTFLOW].append([vid(nx, j), vid(nx, j + 1)])
    for i in range(nx):
        facets[WALL].append([vid(i, 0), vid(i + 1, 0)])
        facets[WALL].append([vid(i + 1, ny), vid(i, ny)])
    return MeshLevel(2, verts, cells, sub, facets)


# -- dof classification ------------------------------------------------------

@dataclass
class DofClassification:
    node_class: np.ndarray        # NODE_FLUID / NODE_INTERFACE / NODE_SOLID
    pressure_active: np.ndarray   # bool per node

    def count(self, kind):
        return int(np.sum(self.node_class == kind))


def classify_dofs(mesh: MeshLevel) -> DofClassification:
    """Label nodes fluid/interface/solid from cell-subdomain adjacency."""
    fluid_adj = np.zeros(mesh.n_nodes, dtype=bool)
    solid_adj = np.zeros(mesh.n_nodes, dtype=bool)
    fc = mesh.cell_nodes[mesh.cell_subdomain == FLUID]
    sc = mesh.cell_nodes[mesh.cell_subdomain == SOLID]
    fluid_adj[fc.reshape(-1)] = True
    solid_adj[sc.reshape(-1)] = True
    if not np.all(fluid_adj | solid_adj):
        raise MeshIntegrityError("orphan nodes without cell adjacency")
    node_class = np.where(fluid_adj & solid_adj, NODE_INTERFACE,
                          np.where(solid_adj, NODE_SOLID, NODE_FLUID)).astype(np.int8)

    # cell-center nodes may never sit on the interface; that would mean a
    # cell intersects both subdomains
    centers = mesh.cell_nodes[:, mesh.cell_nodes.shape[1] // 2]
    if np.any(node_class[centers] == NODE_INTERFACE):
        raise MeshIntegrityError("interface cuts through a cell interior")
    pressure_active = node_class != NODE_SOLID
    return DofClassification(node_class, pressure_active)


# -- Vanka patches and coloring ----------------------------------------------

ONE_ELEMENT = "one"
MULTI_ELEMENT = "multi"     # 4 elements in 2d, 8 in 3d


@dataclass
class PatchSet:
    """Dof-index patches for the block smoother.

    ``groups`` holds (node_array, subdomain) pairs with homogeneous patch
    size per group; ``n_comp`` components per node expand nodes to dofs.
    """

    n_comp: int
    groups: list = field(default_factory=list)

    def add(self, nodes, subdomain):
        if len(nodes):
            self.groups.append((np.asarray(nodes, dtype=np.int64), int(subdomain)))

    @property
    def n_patches(self):
        return sum(len(g) for g, _ in self.groups)

    def patch_nodes(self):
        for g, _ in self.groups:
            for row in g:
                yield row

    def dof_groups(self):
        """Per group: (n_patches, patch_size) dof indices."""
        out = []
        for g, sub in self.groups:
            dofs = (g[:, :, None] * self.n_comp
                    + np.arange(self.n_comp)).reshape(len(g), -1)
            out.append((dofs, sub))
        return out

    def sizes(self):
        return [g.shape[1] * self.n_comp for g, _ in self.groups]


def build_patches(mesh: MeshLevel, strategy, n_comp, per_subdomain=None) -> PatchSet:
    """Element or multi-element dof patches for one blocked subsystem.

    ``strategy`` is ONE_ELEMENT or MULTI_ELEMENT; ``per_subdomain`` may map
    FLUID/SOLID to different strategies (large solid blocks, small fluid
    blocks).  Multi-element patches combine the children of one parent cell;
    on the coarsest level they degenerate to single cells.
    """
    per_subdomain = per_subdomain or {FLUID: strategy, SOLID: strategy}
    patches = PatchSet(n_comp=n_comp)
    for sub in (FLUID, SOLID):
        strat = per_subdomain.get(sub, strategy)
        cells = np.flatnonzero(mesh.cell_subdomain == sub)
        if len(cells) == 0:
            continue
        if strat == ONE_ELEMENT or mesh.parent_cell[0] < 0:
            patches.add(mesh.cell_nodes[cells], sub)
        elif strat == MULTI_ELEMENT:
            groups = mesh.macro_groups()
            keep = np.isin(groups[:, 0], cells)
            nodes = mesh.cell_nodes[groups[keep]].reshape(len(groups[keep]), -1)
            nodes = np.sort(nodes, axis=1)
            # unique per row: lattice nodes shared between siblings
            uniq = np.array([np.unique(r) for r in nodes])
            patches.add(uniq, sub)
        else:
            raise ValueError(f"unknown patch strategy {strat!r}")
    return patches


@dataclass
class Coloring:
    color: np.ndarray
    n_colors: int

    def patches_of_color(self, c):
        return np.flatnonzero(self.color == c)


def color_patches(patchset: PatchSet) -> Coloring:
    """Greedy first-fit coloring; same-color patches never share a dof.

    Patches are visited in their stored order.  An unlabeled, unblocked
    patch receives the current color and blocks every patch sharing one of
    its dofs.  A color only ever holds patches of one size, so differing
    fluid/solid blockings never mix within a color.
    """
    flat_nodes = [row for row in patchset.patch_nodes()]
    sizes = np.array([len(r) * patchset.n_comp for r in flat_nodes])
    n = len(flat_nodes)
    n_nodes = 1 + max((int(r.max()) for r in flat_nodes), default=0)
    node_patches = [[] for _ in range(n_nodes)]
    for i, row in enumerate(flat_nodes):
        for nd in row:
            node_patches[nd].append(i)

    color = np.full(n, -1, dtype=np.int64)
    c = 0
    while np.any(color < 0):
        blocked = np.zeros(n, dtype=bool)
        size_of_color = None
        for i in range(n):
            if color[i] >= 0 or blocked[i]:
                continue
            if size_of_color is None:
                size_of_color = sizes[i]
            if sizes[i] != size_of_color:
                continue
            color[i] = c
            for nd in flat_nodes[i]:
                for j in node_patches[nd]:
                    blocked[j] = True
        c += 1
    return Coloring(color=color, n_colors=c)


# -- export -------------------------------------------------------------------

def write_vtk(mesh: MeshLevel, path, point_fields=None):
    """Legacy ASCII VTK dump (linear cells) for visual inspection."""
    pts = mesh.vertices
    if mesh.dim == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    cell_type = 9 if mesh.dim == 2 else 12
    nper = mesh.cells.shape[1]
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\nalefsi mesh\nASCII\n"
                "DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(pts)} double\n")
        for p in pts:
            f.write(" ".join(repr(float(x)) for x in p) + "\n")
        f.write(f"CELLS {len(mesh.cells)} {len(mesh.cells) * (nper + 1)}\n")
        for c in mesh.cells:
            f.write(f"{nper} " + " ".join(str(i) for i in c) + "\n")
        f.write(f"CELL_TYPES {len(mesh.cells)}\n")
        for _ in mesh.cells:
            f.write(f"{cell_type}\n")
        f.write(f"CELL_DATA {len(mesh.cells)}\nSCALARS subdomain int 1\n"
                "LOOKUP_TABLE default\n")
        for s in mesh.cell_subdomain:
            f.write(f"{int(s)}\n")
        if point_fields:
            f.write(f"POINT_DATA {len(pts)}\n")
            for name, vals in point_fields.items():
                vals = np.asarray(vals)[: len(pts)]
                if vals.ndim == 1:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in vals:
                        f.write(f"{v!r}\n")
                else:
                    f.write(f"VECTORS {name} double\n")
                    for v in vals:
                        row = list(v) + [0.0] * (3 - len(v))
                        f.write(" ".join(repr(float(x)) for x in row) + "\n")
