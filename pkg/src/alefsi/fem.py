"""Q2 finite element machinery on quad/hex meshes.

Everything is vectorized over cells: reference shape tables are evaluated
once, per-cell isoparametric geometry (physical gradients, weighted
Jacobians) is cached per mesh level, and element matrices are scattered
into block-CSR storage through precomputed slot arrays.

All fields share one blocked layout: a vector with ``n_comp`` components
per node is an ``(n_nodes, n_comp)`` array, flattened node-major.  Inactive
components (pressure at solid nodes, Dirichlet rows) stay in the block and
are pinned by identity rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import mesh as meshmod


class GeometryError(Exception):
    pass


class ConstraintError(Exception):
    pass


# -- quadrature and shape functions -------------------------------------------

def gauss_rule(n, dim):
    """Tensor Gauss rule on the unit cell [0,1]^dim; weights sum to one."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    # x varies fastest to match the lexicographic node ordering
    pts = np.stack([g.reshape(-1) for g in reversed(grids)], axis=1)
    ws = np.ones(len(pts))
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        ws = ws * g.reshape(-1)
    return pts, ws


def _q2_1d(x):
    x = np.asarray(x)
    vals = np.stack([2.0 * (x - 0.5) * (x - 1.0),
                     4.0 * x * (1.0 - x),
                     2.0 * x * (x - 0.5)], axis=-1)
    ders = np.stack([4.0 * x - 3.0,
                     4.0 - 8.0 * x,
                     4.0 * x - 1.0], axis=-1)
    return vals, ders


class ShapeTable:
    """Q2 Lagrange basis values/gradients at a fixed reference point set."""

    def __init__(self, dim, points):
        points = np.atleast_2d(points)
        self.dim = dim
        vals = []
        ders = []
        for d in range(dim):
            v, g = _q2_1d(points[:, d])
            vals.append(v)
            ders.append(g)
        if dim == 2:
            self.N = np.einsum("qi,qj->qji", vals[0], vals[1]).reshape(len(points), 9)
            dx = np.einsum("qi,qj->qji", ders[0], vals[1]).reshape(len(points), 9)
            dy = np.einsum("qi,qj->qji", vals[0], ders[1]).reshape(len(points), 9)
            self.dN = np.stack([dx, dy], axis=2)
        else:
            self.N = np.einsum("qi,qj,qk->qkji", vals[0], vals[1], vals[2]).reshape(len(points), 27)
            dx = np.einsum("qi,qj,qk->qkji", ders[0], vals[1], vals[2]).reshape(len(points), 27)
            dy = np.einsum("qi,qj,qk->qkji", vals[0], ders[1], vals[2]).reshape(len(points), 27)
            dz = np.einsum("qi,qj,qk->qkji", vals[0], vals[1], ders[2]).reshape(len(points), 27)
            self.dN = np.stack([dx, dy, dz], axis=2)

    @property
    def n_basis(self):
        return self.N.shape[1]


def cell_geometry(mesh, table, weights, cells=None):
    """Physical basis gradients and quadrature weights per cell.

    Returns ``G`` of shape (nc, nq, nb, d) with gradients in physical
    coordinates and ``wdet`` of shape (nc, nq).  Raises on inverted cells.
    """
    conn = mesh.cell_nodes if cells is None else mesh.cell_nodes[cells]
    X = mesh.nodes[conn]                                   # (nc, nb, d)
    # J[c,q,i,j] = d x_i / d xi_j
    J = np.einsum("qbj,cbi->cqij", table.dN, X)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise GeometryError("non-positive cell map determinant")
    Jinv = np.linalg.inv(J)
    G = np.einsum("qbj,cqji->cqbi", table.dN, Jinv)
    return G, det * weights[None, :]


def shape_eval(mesh, cell, ref_points):
    """Basis values, physical gradients and map determinant at given points."""
    table = ShapeTable(mesh.dim, ref_points)
    G, wdet = cell_geometry(mesh, table, np.ones(len(np.atleast_2d(ref_points))),
                            cells=np.array([cell]))
    return table.N, G[0], wdet[0]


# -- block sparsity -----------------------------------------------------------

class BlockPattern:
    """Node-pair sparsity with scatter slots for cell and macro stencils."""

    def __init__(self, n_nodes, node_groups):
        self.n_nodes = n_nodes
        keys = []
        for g in node_groups:
            g = np.asarray(g, dtype=np.int64)
            rows = np.repeat(g, g.shape[1], axis=1)
            cols = np.tile(g, (1, g.shape[1]))
            keys.append((rows * n_nodes + cols).reshape(-1))
        allkeys = np.unique(np.concatenate(keys))
        self.rows = (allkeys // n_nodes).astype(np.int64)
        self.cols = (allkeys % n_nodes).astype(np.int64)
        self.indptr = np.searchsorted(self.rows, np.arange(n_nodes + 1))
        self.indices = self.cols.astype(np.int32)
        self.nnzb = len(allkeys)
        self._keys = allkeys
        self.group_slots = [np.searchsorted(allkeys, k).astype(np.int64) for k in keys]
        diag_keys = np.arange(n_nodes, dtype=np.int64) * n_nodes + np.arange(n_nodes)
        self.diag_slot = np.searchsorted(allkeys, diag_keys).astype(np.int64)

    def slots_for(self, node_group):
        g = np.asarray(node_group, dtype=np.int64)
        rows = np.repeat(g, g.shape[1], axis=1)
        cols = np.tile(g, (1, g.shape[1]))
        keys = (rows * self.n_nodes + cols).reshape(-1)
        slot = np.searchsorted(self._keys, keys)
        missing = (slot >= self.nnzb) | (self._keys[np.minimum(slot, self.nnzb - 1)] != keys)
        slot[missing] = self.nnzb          # sentinel: extra zero block
        return slot.reshape(g.shape[0], g.shape[1], g.shape[1])

    def zeros(self, n_comp):
        return np.zeros((self.nnzb, n_comp, n_comp))

    def scatter(self, data, group_index, local):
        """Accumulate (ncells, nb, nb, nc, nc) element blocks into data."""
        nb2 = local.shape[1] * local.shape[2]
        np.add.at(data, self.group_slots[group_index].reshape(-1),
                  local.reshape(-1, local.shape[3], local.shape[4]))

    def to_bsr(self, data, n_comp):
        return sp.bsr_matrix((data, self.indices, self.indptr),
                             shape=(self.n_nodes * n_comp, self.n_nodes * n_comp))

    def to_csr_scalar(self, data):
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.n_nodes, self.n_nodes))


def scatter_subset(data, slots, cells, local):
    """Accumulate blocks for a cell subset given precomputed slot arrays."""
    np.add.at(data, slots[cells].reshape(-1),
              local.reshape(-1, local.shape[-2], local.shape[-1]))


def apply_dirichlet_rows(pattern, data, mask):
    """Replace constrained (node, comp) rows by identity rows in-place."""
    n_comp = data.shape[1]
    for c in range(n_comp):
        nodes = np.flatnonzero(mask[:, c])
        if len(nodes) == 0:
            continue
        counts = pattern.indptr[nodes + 1] - pattern.indptr[nodes]
        slots = np.repeat(pattern.indptr[nodes], counts) + _ranges(counts)
        data[slots, c, :] = 0.0
        data[pattern.diag_slot[nodes], c, c] = 1.0


def eliminate_dirichlet_columns(pattern, data, mask):
    """Zero constrained columns (homogeneous constraints), keep diagonal 1."""
    n_comp = data.shape[1]
    for c in range(n_comp):
        nodes = np.flatnonzero(mask[:, c])
        if len(nodes) == 0:
            continue
        hit = np.isin(pattern.indices, nodes.astype(pattern.indices.dtype))
        data[hit, :, c] = 0.0
        data[pattern.diag_slot[nodes], c, c] = 1.0


def _ranges(counts):
    out = np.ones(int(counts.sum()), dtype=np.int64)
    out[0] = 0
    starts = np.cumsum(counts)[:-1]
    out[starts] -= counts[:-1]
    return np.cumsum(out)


# -- facet quadrature ----------------------------------------------------------

_EDGE_PARAM_2D = {
    0: (lambda s: np.stack([s, 0 * s], axis=1), np.array([0.0, -1.0])),
    1: (lambda s: np.stack([0 * s + 1.0, s], axis=1), np.array([1.0, 0.0])),
    2: (lambda s: np.stack([s, 0 * s + 1.0], axis=1), np.array([0.0, 1.0])),
    3: (lambda s: np.stack([0 * s, s], axis=1), np.array([-1.0, 0.0])),
}

_FACE_PARAM_3D = {
    0: (lambda s, t: np.stack([s, t, 0 * s], axis=1), np.array([0.0, 0.0, -1.0])),
    1: (lambda s, t: np.stack([s, t, 0 * s + 1.0], axis=1), np.array([0.0, 0.0, 1.0])),
    2: (lambda s, t: np.stack([s, 0 * s, t], axis=1), np.array([0.0, -1.0, 0.0])),
    3: (lambda s, t: np.stack([0 * s + 1.0, s, t], axis=1), np.array([1.0, 0.0, 0.0])),
    4: (lambda s, t: np.stack([s, 0 * s + 1.0, t], axis=1), np.array([0.0, 1.0, 0.0])),
    5: (lambda s, t: np.stack([0 * s, s, t], axis=1), np.array([-1.0, 0.0, 0.0])),
}


class FacetQuadrature:
    """Boundary-facet quadrature with parent-cell trace evaluation."""

    def __init__(self, mesh, label, n1d=3):
        self.mesh = mesh
        dim = mesh.dim
        fc = mesh.facet_cells[label]
        self.cells = fc[:, 0]
        locs = fc[:, 1]
        x1, w1 = np.polynomial.legendre.leggauss(n1d)
        x1 = 0.5 * (x1 + 1)
        w1 = 0.5 * w1
        if dim == 2:
            s = x1
            wq = w1
        else:
            ss, tt = np.meshgrid(x1, x1, indexing="ij")
            s, t = ss.reshape(-1), tt.reshape(-1)
            wq = np.outer(w1, w1).reshape(-1)
        self.w = wq

        N_parts, G_parts, dS_parts, n_parts, x_parts = [], [], [], [], []
        order = np.argsort(locs, kind="stable")
        self._order = order
        for loc in np.unique(locs):
            sel = order[locs[order] == loc]
            if dim == 2:
                ref, nref = _EDGE_PARAM_2D[loc]
                pts = ref(s)
            else:
                ref, nref = _FACE_PARAM_3D[loc]
                pts = ref(s, t)
            table = ShapeTable(dim, pts)
            conn = mesh.cell_nodes[self.cells[sel]]
            X = mesh.nodes[conn]
            J = np.einsum("qbj,cbi->cqij", table.dN, X)
            det = np.linalg.det(J)
            Jinv = np.linalg.inv(J)
            G = np.einsum("qbj,cqji->cqbi", table.dN, Jinv)
            cof_n = det[..., None] * np.einsum("cqji,j->cqi", Jinv, nref)
            mag = np.linalg.norm(cof_n, axis=-1)
            N_parts.append(np.broadcast_to(table.N, (len(sel),) + table.N.shape))
            G_parts.append(G)
            dS_parts.append(mag * wq[None, :])
            n_parts.append(cof_n / mag[..., None])
            x_parts.append(np.einsum("qb,cbi->cqi", table.N, X))
        self.cells = self.cells[order]
        self.conn = mesh.cell_nodes[self.cells]
        self.N = np.concatenate(N_parts, axis=0)
        self.G = np.concatenate(G_parts, axis=0)
        self.dS = np.concatenate(dS_parts, axis=0)
        self.normal = np.concatenate(n_parts, axis=0)
        self.x = np.concatenate(x_parts, axis=0)

    @property
    def area(self):
        return float(self.dS.sum())

    def eval(self, nodal):
        """Trace values of a nodal field at the facet quadrature points."""
        vals = np.asarray(nodal)[self.conn]
        return np.einsum("cqb,cb...->cq...", self.N, vals)

    def eval_grad(self, nodal):
        vals = np.asarray(nodal)[self.conn]
        return np.einsum("cqbj,cb...->cq...j", self.G, vals)

    def integrate(self, values):
        """Integrate pointwise values (nf, nq, ...) over the facets."""
        return np.einsum("cq,cq...->...", self.dS, values)


# -- local projection stabilization --------------------------------------------

def _q1_basis(points, dim):
    points = np.atleast_2d(points)
    one_d = [np.stack([1.0 - points[:, d], points[:, d]], axis=1) for d in range(dim)]
    if dim == 2:
        return np.einsum("qi,qj->qji", one_d[0], one_d[1]).reshape(len(points), 4)
    return np.einsum("qi,qj,qk->qkji", one_d[0], one_d[1], one_d[2]).reshape(len(points), 8)


def lps_pressure_blocks(mesh, table, qpoints, G, wdet, delta_cell, fluid_mask):
    """Pressure-gradient fluctuation penalty on 2^d-cell macro patches.

    For each fluid macro (the children of one parent cell, or single cells
    on the coarsest level) the gradient of the Q2 pressure is projected onto
    Q1 over the macro; the penalty couples the fluctuation against itself
    with the per-cell weight ``delta_cell``.  Returns (macro_nodes, local)
    with local matrices of shape (n_macros, nodes_per_macro, nodes_per_macro).
    """
    dim = mesh.dim
    groups = mesh.macro_groups()
    keep = fluid_mask[groups[:, 0]]
    groups = groups[keep]
    if len(groups) == 0:
        nb = table.n_basis
        return np.zeros((0, nb), dtype=np.int64), np.zeros((0, nb, nb))
    nch = groups.shape[1]
    nm = len(groups)
    nb = table.n_basis

    child_nodes = mesh.cell_nodes[groups]                  # (nm, nch, nb)
    macro_nodes = np.array([np.unique(g.reshape(-1)) for g in child_nodes])
    nmn = macro_nodes.shape[1]
    loc = np.empty((nm, nch, nb), dtype=np.int64)
    for i in range(nm):
        loc[i] = np.searchsorted(macro_nodes[i], child_nodes[i])

    # Q1 basis of the parent cell evaluated at each child's quadrature points;
    # on the coarsest level (single-cell macros) project onto constants, since
    # a one-cell Q1 projection leaves the pressure insufficiently controlled
    nq = len(qpoints)
    if nch == 1:
        q1 = np.ones((1, nq, 1))
    else:
        q1 = np.empty((nch, nq, 2 ** dim))
        for j in range(nch):
            off = np.array([(j >> d) & 1 for d in range(dim)], dtype=float)
            q1[j] = _q1_basis(0.5 * (qpoints + off), dim)

    Gm = np.zeros((nm, nch, nq, nmn, dim))
    idx = np.broadcast_to(loc[:, :, None, :], (nm, nch, nq, nb))
    for d in range(dim):
        np.put_along_axis(Gm[..., d], idx, G[groups][..., d], axis=3)
    wq = wdet[groups]                                      # (nm, nch, nq)
    dq = delta_cell[groups][:, :, None] * wq               # delta-weighted

    M = np.einsum("mjq,jqi,jql->mil", wq, q1, q1)
    rhs = np.einsum("mjq,jqi,mjqad->miad", wq, q1, Gm)
    coef = np.linalg.solve(M, rhs.reshape(nm, M.shape[1], -1)).reshape(rhs.shape)
    pg = np.einsum("jqi,miad->mjqad", q1, coef)
    fluct = Gm - pg
    local = np.einsum("mjq,mjqad,mjqbd->mab", dq, fluct, fluct)
    return macro_nodes, local
