"""Krylov/multigrid machinery: GMRES, V-cycle, colored Vanka smoothing.

The smoother is a damped additive block iteration: one global defect per
sweep, exact dense solves on every patch, corrections summed with damping.
Patch corrections are computed with batched inverses grouped by patch size;
the coloring partitions the batched solves for conflict-free threading
while the accumulation order stays fixed, so results do not depend on the
thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _parallel
from .fem import ShapeTable
from .mesh import build_patches, color_patches, ONE_ELEMENT, MULTI_ELEMENT


class SolverError(Exception):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


@dataclass
class KrylovStats:
    iterations: int = 0
    initial_residual: float = 0.0
    final_residual: float = 0.0
    elapsed: float = 0.0
    converged: bool = True
    residuals: list = field(default_factory=list)


def gmres(operator, b, preconditioner=None, rel_tol=1e-4, abs_tol=0.0,
          max_iter=200, reorth_threshold=1e-8):
    """Right-preconditioned GMRES without restart.

    ``operator`` and ``preconditioner`` are callables (or sparse matrices);
    the returned residual history is the true residual norm, which is
    monotone for right preconditioning.  Raises SolverError if ``max_iter``
    is exceeded.
    """
    t0 = time.perf_counter()
    A = operator.dot if hasattr(operator, "dot") else operator
    M = (preconditioner.dot if hasattr(preconditioner, "dot") else preconditioner) \
        if preconditioner is not None else (lambda x: x)

    b = np.asarray(b, dtype=float).ravel()
    beta = np.linalg.norm(b)
    stats = KrylovStats(initial_residual=beta, residuals=[beta])
    tol = max(rel_tol * beta, abs_tol)
    if beta == 0.0 or beta <= tol:
        stats.final_residual = beta
        stats.elapsed = time.perf_counter() - t0
        return np.zeros_like(b), stats

    H = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = beta

    k = 0
    Vm = np.empty((max_iter + 1, len(b)))
    Vm[0] = b / beta
    for k in range(max_iter):
        w = A(M(Vm[k]))
        norm_before = np.linalg.norm(w)
        h = Vm[:k + 1] @ w
        w -= Vm[:k + 1].T @ h
        H[:k + 1, k] = h
        # Kahan test: a large cancellation signals orthogonality loss
        if np.linalg.norm(w) < 0.7071 * norm_before:
            h2 = Vm[:k + 1] @ w
            w -= Vm[:k + 1].T @ h2
            H[:k + 1, k] += h2
        H[k + 1, k] = np.linalg.norm(w)
        if H[k + 1, k] > 0:
            Vm[k + 1] = w / H[k + 1, k]

        # apply accumulated Givens rotations, then the new one
        for i in range(k):
            t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = t
        r = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / r, H[k + 1, k] / r
        H[k, k] = r
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]

        res = abs(g[k + 1])
        stats.residuals.append(res)
        if res <= tol:
            break

    stats.iterations = k + 1
    stats.final_residual = stats.residuals[-1]
    y = np.linalg.solve(np.triu(H[:k + 1, :k + 1]), g[:k + 1])
    x = M(Vm[:k + 1].T @ y)
    stats.elapsed = time.perf_counter() - t0
    if stats.final_residual > tol:
        stats.converged = False
        raise SolverError(
            f"GMRES stalled at {stats.final_residual:.3e} (tol {tol:.3e}) "
            f"after {stats.iterations} iterations", stats)
    return x, stats


# -- Vanka smoother -------------------------------------------------------------

def patch_factorize(pattern, data, dof_groups, node_groups):
    """Exact inverses of every patch matrix R_i A R_i^T, grouped by size."""
    data_ext = np.concatenate([data, np.zeros((1,) + data.shape[1:])])
    nc = data.shape[1]
    inverses = []
    for nodes, _ in node_groups:
        slots = pattern.slots_for(nodes)
        blocks = data_ext[slots]                           # (np, pn, pn, nc, nc)
        n, pn = blocks.shape[0], blocks.shape[1]
        dense = blocks.transpose(0, 1, 3, 2, 4).reshape(n, pn * nc, pn * nc)
        try:
            inverses.append(np.linalg.inv(dense))
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Vanka patch block: {exc}") from exc
    return inverses


class VankaSmoother:
    """Damped additive patch iteration with exact local solves.

    Corrections of dofs shared by several patches are averaged by the
    patch multiplicity before summation; without this weighting the
    additive operator has eigenvalues up to the overlap multiplicity
    (about 4 in 2d, 8 in 3d) and the iteration diverges for any useful
    damping value.
    """

    def __init__(self, patchset, coloring, omega=0.8):
        self.patchset = patchset
        self.coloring = coloring
        self.omega = omega
        self.dofs = [dofs for dofs, _ in patchset.dof_groups()]
        self.node_groups = patchset.groups
        self.inverses = None
        # fixed chunking per group for deterministic threaded execution
        self._chunks = [_parallel.fixed_chunks(len(d)) for d in self.dofs]
        n = 1 + max((int(d.max()) for d in self.dofs if d.size), default=0)
        mult = np.zeros(n)
        for dofs in self.dofs:
            np.add.at(mult, dofs.reshape(-1), 1.0)
        mult[mult == 0] = 1.0
        self.weights = [1.0 / mult[d] for d in self.dofs]

    def factorize(self, pattern, data):
        self.inverses = patch_factorize(pattern, data,
                                        self.dofs, self.patchset.groups)

    def sweep(self, A, x, b):
        """One damped Jacobi-type sweep: x + omega * sum_i R_i^T A_i^-1 R_i d."""
        d = b - A @ x
        upd = np.zeros_like(x)
        for dofs, inv, wts, chunks in zip(self.dofs, self.inverses,
                                          self.weights, self._chunks):
            def solve_chunk(sl, dofs=dofs, inv=inv, wts=wts):
                return wts[sl] * np.einsum("pij,pj->pi", inv[sl], d[dofs[sl]])
            results = _parallel.map_ordered(solve_chunk, chunks)
            for sl, y in zip(chunks, results):
                np.add.at(upd, dofs[sl].reshape(-1), y.reshape(-1))
        return x + self.omega * upd


# -- grid transfer ---------------------------------------------------------------

def prolongation(coarse, fine):
    """Scalar Q2 interpolation matrix from coarse nodes to fine nodes."""
    dim = coarse.dim
    kids = 2 ** dim
    # reference lattice of Q2 nodes, x fastest
    ticks = [0.0, 0.5, 1.0]
    if dim == 2:
        ref = np.array([[x, y] for y in ticks for x in ticks])
    else:
        ref = np.array([[x, y, z] for z in ticks for y in ticks for x in ticks])

    owner = np.full(fine.n_nodes, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(owner, fine.cell_nodes.reshape(-1),
                  np.repeat(np.arange(len(fine.cells)), fine.cell_nodes.shape[1]))

    rows, cols, vals = [], [], []
    for j in range(kids):
        off = np.array([(j >> d) & 1 for d in range(dim)], dtype=float)
        W = ShapeTable(dim, 0.5 * (ref + off)).N            # (9, 9) weights
        fine_cells = np.arange(len(coarse.cells)) * kids + j
        fnodes = fine.cell_nodes[fine_cells]                # (ncc, nb)
        cnodes = coarse.cell_nodes                          # (ncc, nb)
        keep = owner[fnodes] == fine_cells[:, None]
        c_idx, f_idx = np.nonzero(keep)
        for fi, ci in zip(*np.nonzero(np.abs(W) > 1e-14)):
            sel = f_idx == fi
            rows.append(fnodes[c_idx[sel], fi])
            cols.append(cnodes[c_idx[sel], ci])
            vals.append(np.full(sel.sum(), W[fi, ci]))
    P = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(fine.n_nodes, coarse.n_nodes))
    P.sum_duplicates()
    return P


# -- geometric multigrid ----------------------------------------------------------

@dataclass
class MgLevel:
    matrix: object = None            # block CSR on this level
    smoother: VankaSmoother = None
    P: object = None                 # prolongation from the next coarser level
    constrained: np.ndarray = None   # flat dof mask where corrections vanish


class MgSolver:
    """V-cycle over assembled per-level matrices; level 0 is solved directly."""

    def __init__(self, levels, nu_pre=2, nu_post=2):
        self.levels = levels
        self.nu_pre = nu_pre
        self.nu_post = nu_post
        self.coarse_lu = spla.splu(sp.csc_matrix(levels[0].matrix))

    def dot(self, b):
        return self._cycle(len(self.levels) - 1, np.asarray(b, dtype=float))

    __call__ = dot

    def _cycle(self, l, b):
        lvl = self.levels[l]
        if l == 0:
            return self.coarse_lu.solve(b)
        x = np.zeros_like(b)
        for _ in range(self.nu_pre):
            x = lvl.smoother.sweep(lvl.matrix, x, b)
        r = b - lvl.matrix @ x
        zc = self._cycle(l - 1, self._restrict(l, r))
        x += self._prolong(l, zc)
        for _ in range(self.nu_post):
            x = lvl.smoother.sweep(lvl.matrix, x, b)
        return x

    def _nc(self, l):
        return self.levels[l].matrix.shape[0] // self.levels[l].P.shape[0]

    def _restrict(self, l, r):
        nc = self._nc(l)
        rc = (self.levels[l].P.T @ r.reshape(-1, nc)).reshape(-1)
        rc[self.levels[l - 1].constrained] = 0.0
        return rc

    def _prolong(self, l, zc):
        nc = self._nc(l)
        zf = (self.levels[l].P @ zc.reshape(-1, nc)).reshape(-1)
        zf[self.levels[l].constrained] = 0.0
        return zf


def build_momentum_patches(mesh, dim, strategy_fluid, strategy_solid):
    ps = build_patches(mesh, strategy_fluid, n_comp=dim + 1,
                       per_subdomain={0: strategy_fluid, 1: strategy_solid})
    return ps, color_patches(ps)


def build_extension_patches(mesh, dim, strategy):
    ps = build_patches(mesh, strategy, n_comp=dim)
    return ps, color_patches(ps)
