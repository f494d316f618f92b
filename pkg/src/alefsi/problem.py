"""Per-level discretization data and boundary-condition bookkeeping.

``FsiProblem`` owns a mesh hierarchy plus, for every level, the cached
geometry tables, the block sparsity pattern (cell stencils and the macro
stencils of the pressure stabilization), dof classification, Dirichlet
masks and the state-independent operators (stabilization, solid mass,
mesh extension).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem, mesh as meshmod
from .mesh import FLUID, SOLID, NODE_FLUID, NODE_INTERFACE, NODE_SOLID


@dataclass
class FsiFlags:
    """Discretization options that are not material parameters."""

    extension_model: str = "linear_elasticity"   # or "harmonic"
    ext_mu: float = 1.0
    ext_lam: float = 0.0
    ext_volume_scaling: bool = False
    alpha_p: float = 0.2                         # pressure stabilization
    lps_dt: float = 0.0                          # blend h^2/mu with the step size
    transport_stabilization: bool = False
    alpha_v: float = 0.0
    quad_points: int = 3
    do_nothing_correction: bool = True
    drag_indicator: str = "cylinder+interface"   # or "cylinder"

    def lps_delta(self, h2, mats):
        """Stabilization weight; the k-blend keeps the pressure block of the
        time-step system commensurate with its Schur complement."""
        denom = mats.mu_f
        if self.lps_dt > 0:
            denom = denom + mats.rho_f * h2 / self.lps_dt
        return self.alpha_p * h2 / denom


class LevelData:
    """Everything the kernels need on one mesh level."""

    def __init__(self, mesh, flags, mats, v_dirichlet_labels, u_dirichlet_labels,
                 outflow_label):
        self.mesh = mesh
        self.dim = d = mesh.dim
        self.n_nodes = mesh.n_nodes
        self.cls = meshmod.classify_dofs(mesh)

        pts, w = fem.gauss_rule(flags.quad_points, d)
        self.qpoints = pts
        self.table = fem.ShapeTable(d, pts)
        self.G, self.wdet = fem.cell_geometry(mesh, self.table, w)
        vol = self.wdet.sum(axis=1)
        self.inv_cell_volume = 1.0 / vol
        self.h2 = vol ** (2.0 / d)

        self.fluid_cells = np.flatnonzero(mesh.cell_subdomain == FLUID)
        self.solid_cells = np.flatnonzero(mesh.cell_subdomain == SOLID)

        # sparsity: fluid cells, solid cells, stabilization macros
        fluid_mask = mesh.cell_subdomain == FLUID
        delta = np.where(fluid_mask, flags.lps_delta(self.h2, mats), 0.0)
        macro_nodes, lps_local = fem.lps_pressure_blocks(
            mesh, self.table, pts, self.G, self.wdet, delta, fluid_mask)
        groups = [mesh.cell_nodes[self.fluid_cells],
                  mesh.cell_nodes[self.solid_cells]]
        if len(macro_nodes):
            groups.append(macro_nodes)
        self.pattern = fem.BlockPattern(mesh.n_nodes, [g for g in groups if len(g)])
        self.fluid_group = 0
        self.solid_group = 1 if len(self.solid_cells) else None

        # scalar stabilization operator and its slots in the block pattern
        if len(macro_nodes):
            sd = np.zeros(self.pattern.nnzb)
            slots = self.pattern.slots_for(macro_nodes).reshape(-1)
            np.add.at(sd, slots, lps_local.reshape(-1))
            self.lps_slots = np.flatnonzero(sd)
            self.lps_vals = sd[self.lps_slots]
            self.lps_csr = self.pattern.to_csr_scalar(sd)
        else:
            self.lps_slots = np.zeros(0, dtype=np.int64)
            self.lps_vals = np.zeros(0)
            self.lps_csr = self.pattern.to_csr_scalar(np.zeros(self.pattern.nnzb))

        # solid mass (scalar) for the velocity-deformation relation rows
        md = np.zeros(self.pattern.nnzb)
        if len(self.solid_cells):
            cells = self.solid_cells
            local = np.einsum("cq,qa,qb->cab", self.wdet[cells],
                              self.table.N, self.table.N)
            np.add.at(md, self.pattern.group_slots[self.solid_group].reshape(-1),
                      local.reshape(-1))
        self.solid_mass = self.pattern.to_csr_scalar(md)

        # boundary sets
        self.v_dirichlet_nodes = mesh.nodes_of_label(*v_dirichlet_labels)
        self.u_dirichlet_nodes = mesh.nodes_of_label(
            *(set(v_dirichlet_labels) | set(u_dirichlet_labels)))
        self.interface_nodes = np.flatnonzero(self.cls.node_class == NODE_INTERFACE)
        solid_like = np.flatnonzero(self.cls.node_class != NODE_FLUID)
        self.relation_nodes = np.setdiff1d(solid_like, self.u_dirichlet_nodes)

        self.momentum_dirichlet = np.zeros((mesh.n_nodes, d + 1), dtype=bool)
        self.momentum_dirichlet[self.cls.node_class == NODE_SOLID, 0] = True
        self.momentum_dirichlet[self.v_dirichlet_nodes, 1:] = True

        fluid_interior = ((self.cls.node_class == NODE_FLUID)
                          & ~np.isin(np.arange(mesh.n_nodes), self.u_dirichlet_nodes))
        self.fluid_interior_nodes = np.flatnonzero(fluid_interior)
        self.ext_dirichlet = np.ones((mesh.n_nodes, d), dtype=bool)
        self.ext_dirichlet[self.fluid_interior_nodes] = False

        self.residual_zero_mask = np.zeros((mesh.n_nodes, 1 + 2 * d), dtype=bool)
        self.residual_zero_mask[:, 0] = self.momentum_dirichlet[:, 0]
        self.residual_zero_mask[self.v_dirichlet_nodes, 1:1 + d] = True
        self.residual_zero_mask[self.u_dirichlet_nodes, 1 + d:] = True

        self.outflow = None
        if (flags.do_nothing_correction and outflow_label
                and outflow_label in mesh.facets):
            self.outflow = fem.FacetQuadrature(mesh, outflow_label, flags.quad_points)


class FsiProblem:
    """Discretized problem on a mesh hierarchy with boundary data."""

    def __init__(self, hierarchy, mats, flags=None,
                 v_dirichlet_labels=(meshmod.INFLOW, meshmod.WALL, meshmod.CYLINDER,
                                     meshmod.SOLID_DIRICHLET),
                 u_dirichlet_labels=(meshmod.OUTFLOW,),
                 inflow_label=meshmod.INFLOW,
                 outflow_label=meshmod.OUTFLOW,
                 inflow_fn=None):
        self.hierarchy = hierarchy
        self.mats = mats
        self.flags = flags or FsiFlags()
        self.inflow_label = inflow_label
        self.inflow_fn = inflow_fn
        self.levels = [LevelData(m, self.flags, mats, v_dirichlet_labels,
                                 u_dirichlet_labels, outflow_label)
                       for m in hierarchy.levels]
        self._extension = {}

    @property
    def dim(self):
        return self.hierarchy.dim

    @property
    def fine(self):
        return self.levels[-1]

    def zero_state(self, level=-1):
        lvl = self.levels[level]
        return np.zeros((lvl.n_nodes, 1 + 2 * lvl.dim))

    def restrict_state(self, U, to_level):
        """Nodal injection to a coarser level (coarse ids prefix fine ids)."""
        return U[: self.levels[to_level].n_nodes]

    def impose_boundary_values(self, U, t, level=-1):
        lvl = self.levels[level]
        d = lvl.dim
        U[lvl.v_dirichlet_nodes, 1:1 + d] = 0.0
        if self.inflow_fn is not None and self.inflow_label in lvl.mesh.boundary_nodes:
            nodes = lvl.mesh.boundary_nodes[self.inflow_label]
            U[nodes, 1:1 + d] = self.inflow_fn(lvl.mesh.nodes[nodes], t)
        U[lvl.u_dirichlet_nodes, 1 + d:] = 0.0
        return U

    def extension_blocks(self, level):
        """Raw and row-constrained extension operator data (cached)."""
        key = int(level) % len(self.levels)
        if key not in self._extension:
            from .model import extension_data
            lvl = self.levels[key]
            raw = extension_data(lvl, self.flags)
            bc = raw.copy()
            fem.apply_dirichlet_rows(lvl.pattern, bc, lvl.ext_dirichlet)
            self._extension[key] = {
                "raw": lvl.pattern.to_bsr(raw, lvl.dim).tocsr(),
                "bc_data": bc,
                "bc": lvl.pattern.to_bsr(bc, lvl.dim).tocsr(),
            }
        return self._extension[key]
