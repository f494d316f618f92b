"""Time stepping and the approximated Newton iteration.

Every Newton update solves the reduced linear system in three exact stages:
a coupled pressure-velocity problem (GMRES + geometric multigrid with Vanka
smoothing), a pure vector update for the solid/interface deformation, and a
mesh-extension solve for the fluid deformation.  The momentum Jacobian is
reassembled only when the observed nonlinear rate exceeds the threshold
``gamma``; the extension operator is assembled once per run.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp

from . import linsolve, model
from .linsolve import (MgLevel, MgSolver, VankaSmoother, gmres, prolongation,
                       SolverError)
from .mesh import ONE_ELEMENT, MULTI_ELEMENT, FLUID, SOLID


class StepFailure(Exception):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


@dataclass
class NewtonConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-8
    max_steps: int = 30
    gamma: float = 0.05          # reassembly threshold on the Newton rate
    max_halvings: int = 4


@dataclass
class LinearConfig:
    momentum_rel_tol: float = 1e-4
    extension_rel_tol: float = 1e-8
    max_iter: int = 250
    nu_pre: int = 2
    nu_post: int = 2
    omega: float = 0.8
    fluid_patches: str = ""      # defaults chosen per dimension
    solid_patches: str = ""

    def patch_strategies(self, dim):
        fluid = self.fluid_patches or (MULTI_ELEMENT if dim == 2 else ONE_ELEMENT)
        solid = self.solid_patches or MULTI_ELEMENT
        return fluid, solid


@dataclass
class TimeLoopConfig:
    k: float = 0.004
    theta_rule: str = "shifted_cn"   # "shifted_cn", "backward_euler" or a number
    t_start: float = 0.0
    t_end: float = 1.0
    checkpoint_times: tuple = ()
    checkpoint_path: str = ""


def theta_for(rule, k):
    if rule == "shifted_cn":
        return 0.5 + 2.0 * k
    if rule == "backward_euler":
        return 1.0
    return float(rule)


@dataclass
class NewtonStats:
    steps: int = 0
    assemblies: int = 0
    rates: list = field(default_factory=list)
    momentum_iters: list = field(default_factory=list)
    extension_iters: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    assemble_time: float = 0.0
    solve_time: float = 0.0
    residual_time: float = 0.0
    converged: bool = False


class LinearStack:
    """Per-level matrices, smoothers and transfers for both subsystems."""

    def __init__(self, problem, lin_cfg: LinearConfig):
        self.problem = problem
        self.cfg = lin_cfg
        levels = problem.levels
        d = problem.dim
        self.transfers = [None] + [
            prolongation(levels[l - 1].mesh, levels[l].mesh)
            for l in range(1, len(levels))]

        fluid_strategy, solid_strategy = lin_cfg.patch_strategies(d)
        self.mom_smoothers = [None]
        self.ext_smoothers = [None]
        for l in range(1, len(levels)):
            ps, col = linsolve.build_momentum_patches(
                levels[l].mesh, d, fluid_strategy, solid_strategy)
            self.mom_smoothers.append(VankaSmoother(ps, col, lin_cfg.omega))
            pse, cole = linsolve.build_extension_patches(
                levels[l].mesh, d, ONE_ELEMENT)
            self.ext_smoothers.append(VankaSmoother(pse, cole, lin_cfg.omega))

        self.mom_mg = None
        self.ext_mg = None
        self.last_rate = np.inf

    # extension stack: state independent, assembled once
    def _build_extension(self):
        levels = self.problem.levels
        mg_levels = []
        for l, lvl in enumerate(levels):
            blocks = self.problem.extension_blocks(l)
            A = blocks["bc"]
            entry = MgLevel(matrix=A, P=self.transfers[l],
                            constrained=lvl.ext_dirichlet.reshape(-1))
            if l > 0:
                sm = self.ext_smoothers[l]
                sm.factorize(lvl.pattern, blocks["bc_data"])
                entry.smoother = sm
            mg_levels.append(entry)
        self.ext_mg = MgSolver(mg_levels, self.cfg.nu_pre, self.cfg.nu_post)

    def build_momentum(self, U, U_prev, k, theta):
        """Assemble the reduced momentum Jacobian on every level."""
        problem = self.problem
        mg_levels = []
        for l, lvl in enumerate(problem.levels):
            Ul = problem.restrict_state(U, l)
            Upl = problem.restrict_state(U_prev, l)
            data = model.momentum_jacobian_data(lvl, problem.mats, problem.flags,
                                                k, theta, Ul, Upl)
            A = lvl.pattern.to_bsr(data, lvl.dim + 1).tocsr()
            entry = MgLevel(matrix=A, P=self.transfers[l],
                            constrained=lvl.momentum_dirichlet.reshape(-1))
            if l > 0:
                sm = self.mom_smoothers[l]
                sm.factorize(lvl.pattern, data)
                entry.smoother = sm
            mg_levels.append(entry)
        self.mom_mg = MgSolver(mg_levels, self.cfg.nu_pre, self.cfg.nu_post)

    def solve_momentum(self, b):
        if len(self.problem.levels) == 1:
            return self.mom_mg.coarse_lu.solve(b), linsolve.KrylovStats(iterations=0)
        return gmres(self.mom_mg.levels[-1].matrix, b, self.mom_mg,
                     rel_tol=self.cfg.momentum_rel_tol, max_iter=self.cfg.max_iter)

    def solve_extension(self, b):
        if self.ext_mg is None:
            self._build_extension()
        if len(self.problem.levels) == 1:
            return self.ext_mg.coarse_lu.solve(b), linsolve.KrylovStats(iterations=0)
        return gmres(self.ext_mg.levels[-1].matrix, b, self.ext_mg,
                     rel_tol=self.cfg.extension_rel_tol, max_iter=self.cfg.max_iter)


def solve_reduced_linear(problem, stack, R, U, U_prev, k, theta):
    """Three-stage exact solve of the reduced system for the update W."""
    lvl = problem.fine
    d = lvl.dim
    n = lvl.n_nodes

    # stage 1: coupled momentum system in (p, v)
    b = -R[:, :d + 1].reshape(-1)
    x, mom_stats = stack.solve_momentum(b)
    dpv = x.reshape(n, d + 1)

    # stage 2: deformation update on solid and interface nodes (no solver)
    rel = lvl.relation_nodes
    deficit = (U[:, 1 + d:] - U_prev[:, 1 + d:]
               - k * theta * U[:, 1:1 + d]
               - k * (1.0 - theta) * U_prev[:, 1:1 + d])
    du = np.zeros((n, d))
    du[rel] = k * theta * dpv[rel, 1:] - deficit[rel]

    # stage 3: mesh extension with interface values from stage 2
    blocks = problem.extension_blocks(len(problem.levels) - 1)
    g = np.zeros((n, d))
    g[lvl.interface_nodes] = du[lvl.interface_nodes]
    rhs = -R[:, 1 + d:] / k - (blocks["raw"] @ g.reshape(-1)).reshape(n, d)
    rhs[lvl.ext_dirichlet] = 0.0
    z, ext_stats = stack.solve_extension(rhs.reshape(-1))

    W = np.zeros_like(U)
    W[:, :d + 1] = dpv
    W[:, 1 + d:] = z.reshape(n, d)
    W[lvl.interface_nodes, 1 + d:] = du[lvl.interface_nodes]
    W[rel, 1 + d:] = du[rel]
    W[lvl.u_dirichlet_nodes, 1 + d:] = 0.0
    return W, mom_stats, ext_stats


def line_search(residual_of, U, W, res_norm, max_halvings=4):
    """Backtracking by halving on the residual sup-norm.

    ``residual_of(U_try)`` returns (payload, norm); the first trial with a
    non-increasing norm is accepted as (omega, payload, norm).
    """
    omega = 1.0
    for _ in range(max_halvings + 1):
        payload, res_try = residual_of(U + omega * W)
        if res_try <= res_norm:
            return omega, payload, res_try
        omega *= 0.5
    raise StepFailure("line search exhausted: residual would increase")


def newton_solve(problem, stack, U_guess, U_prev, k, theta, cfg: NewtonConfig):
    """Approximated Newton iteration for one time step."""
    lvl = problem.fine
    stats = NewtonStats()
    explicit_cache = [None]

    def residual_of(Ut):
        Ut = Ut.copy()
        model.deformation_update(Ut, U_prev, k, theta, lvl.relation_nodes)
        t0 = time.perf_counter()
        R, explicit_cache[0] = model.theta_residual(
            lvl, problem.mats, problem.flags, k, theta, Ut, U_prev,
            explicit_cache[0])
        stats.residual_time += time.perf_counter() - t0
        return (Ut, R), float(np.abs(R).max())

    (U, R), res = residual_of(U_guess)
    res0 = res
    stats.residuals.append(res)
    tol = max(cfg.abs_tol, cfg.rel_tol * res0)

    while res > tol:
        if stats.steps >= cfg.max_steps:
            raise StepFailure(f"Newton did not converge in {cfg.max_steps} steps "
                              f"(residual {res:.3e})", stats)
        if stack.mom_mg is None or stack.last_rate > cfg.gamma:
            t0 = time.perf_counter()
            stack.build_momentum(U, U_prev, k, theta)
            stats.assemble_time += time.perf_counter() - t0
            stats.assemblies += 1
        t0 = time.perf_counter()
        try:
            W, mom_stats, ext_stats = solve_reduced_linear(
                problem, stack, R, U, U_prev, k, theta)
        except SolverError as exc:
            raise StepFailure(f"linear solve failed: {exc}", stats) from exc
        stats.solve_time += time.perf_counter() - t0
        stats.momentum_iters.append(mom_stats.iterations)
        stats.extension_iters.append(ext_stats.iterations)

        try:
            _, (U, R), res_new = line_search(residual_of, U, W, res,
                                             cfg.max_halvings)
        except StepFailure as exc:
            exc.stats = stats
            raise
        rate = res_new / res if res > 0 else 0.0
        stack.last_rate = rate
        stats.rates.append(rate)
        stats.residuals.append(res_new)
        stats.steps += 1
        res = res_new

    stats.converged = True
    return U, stats


# -- time loop -------------------------------------------------------------------

@dataclass
class RunState:
    t: float
    U: np.ndarray
    U_prev: np.ndarray


def checkpoint_write(path, state: RunState, meta=None):
    np.savez_compressed(path, t=state.t, U=state.U, U_prev=state.U_prev,
                        meta=json.dumps(meta or {}))


def checkpoint_read(path) -> tuple:
    with np.load(path, allow_pickle=False) as f:
        state = RunState(t=float(f["t"]), U=f["U"].copy(), U_prev=f["U_prev"].copy())
        meta = json.loads(str(f["meta"]))
    return state, meta


def config_digest(*cfgs):
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c
                       for c in cfgs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_time_loop(problem, tl: TimeLoopConfig, newton_cfg: NewtonConfig,
                  lin_cfg: LinearConfig, state: RunState = None,
                  stack: LinearStack = None, on_step=None):
    """Advance from t_start (or a restart state) to t_end.

    ``on_step(t, U, U_prev, k, theta, stats)`` is invoked after every
    accepted step.  A failing step is retried once with two half steps; a
    second failure aborts with a checkpoint if a path is configured.
    """
    stack = stack or LinearStack(problem, lin_cfg)
    if state is None:
        U = problem.zero_state()
        problem.impose_boundary_values(U, tl.t_start)
        state = RunState(t=tl.t_start, U=U, U_prev=U.copy())

    checkpoint_due = sorted(tl.checkpoint_times)
    step_stats = []
    t = state.t
    U_prev = state.U
    while t < tl.t_end - 1e-12:
        k = min(tl.k, tl.t_end - t)
        try:
            U_n, stats_list = _advance(problem, stack, U_prev, t, k, tl,
                                       newton_cfg, allow_halving=True)
        except StepFailure:
            if tl.checkpoint_path:
                checkpoint_write(tl.checkpoint_path + ".failed",
                                 RunState(t=t, U=U_prev, U_prev=U_prev))
            raise
        t = t + k
        if on_step is not None:
            theta = theta_for(tl.theta_rule, k)
            on_step(t, U_n, U_prev, k, theta, stats_list)
        step_stats.append(stats_list)
        U_prev = U_n
        while checkpoint_due and t >= checkpoint_due[0] - 1e-12:
            checkpoint_due.pop(0)
            if tl.checkpoint_path:
                checkpoint_write(f"{tl.checkpoint_path}_t{t:.4f}.npz",
                                 RunState(t=t, U=U_n, U_prev=U_prev))
    return RunState(t=t, U=U_prev, U_prev=U_prev), step_stats


def _advance(problem, stack, U_prev, t, k, tl, newton_cfg, allow_halving):
    theta = theta_for(tl.theta_rule, k)
    guess = U_prev.copy()
    problem.impose_boundary_values(guess, t + k)
    try:
        U_n, stats = newton_solve(problem, stack, guess, U_prev, k, theta,
                                  newton_cfg)
        return U_n, [stats]
    except StepFailure:
        stack.last_rate = np.inf       # force reassembly on the retry
        if not allow_halving:
            raise
        # retry the step as two half steps
        half = k / 2.0
        U_mid, s1 = _advance(problem, stack, U_prev, t, half, tl, newton_cfg,
                             allow_halving=False)
        U_n, s2 = _advance(problem, stack, U_mid, t + half, half, tl,
                           newton_cfg, allow_halving=False)
        return U_n, s1 + s2


# -- dense verification of the splitting -------------------------------------------

def dense_reduced_solve(problem, U, U_prev, k, theta, level=-1):
    """Assemble the reduced linear system monolithically and solve it densely.

    Verification oracle for the three-stage splitting on small meshes: the
    staged solve must reproduce this solution up to the stage tolerances.
    """
    lvl = problem.levels[level]
    d = lvl.dim
    n = lvl.n_nodes
    nf = 1 + 2 * d
    Ul = problem.restrict_state(U, level)
    Upl = problem.restrict_state(U_prev, level)

    data = model.momentum_jacobian_data(lvl, problem.mats, problem.flags,
                                        k, theta, Ul, Upl)
    Amom = lvl.pattern.to_bsr(data, d + 1).toarray()

    A = np.zeros((n * nf, n * nf))
    idx_mom = (np.arange(n)[:, None] * nf + np.arange(d + 1)).reshape(-1)
    A[np.ix_(idx_mom, idx_mom)] = Amom

    blocks = problem.extension_blocks(level % len(problem.levels))
    Eraw = blocks["raw"].toarray()
    idx_u = (np.arange(n)[:, None] * nf + (1 + d) + np.arange(d)).reshape(-1)
    interior = np.zeros((n, d), dtype=bool)
    interior[lvl.fluid_interior_nodes] = True
    Erows = k * Eraw
    Erows[~interior.reshape(-1)] = 0.0
    A[np.ix_(idx_u, idx_u)] = Erows

    Ms = lvl.solid_mass.toarray()
    rel_mask = np.zeros(n, dtype=bool)
    rel_mask[lvl.relation_nodes] = True
    for comp in range(d):
        rows = np.arange(n)[rel_mask] * nf + 1 + d + comp
        cols_u = np.arange(n) * nf + 1 + d + comp
        cols_v = np.arange(n) * nf + 1 + comp
        A[np.ix_(rows, cols_u)] = Ms[rel_mask]
        A[np.ix_(rows, cols_v)] = -k * theta * Ms[rel_mask]

    for node in lvl.u_dirichlet_nodes:
        for comp in range(d):
            r = node * nf + 1 + d + comp
            A[r, :] = 0.0
            A[r, r] = 1.0

    R, _ = model.theta_residual(lvl, problem.mats, problem.flags, k, theta,
                                Ul, Upl)
    W = np.linalg.solve(A, -R.reshape(-1))
    return W.reshape(n, nf)
