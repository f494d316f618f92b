"""Continuum kinematics and the discrete residual/Jacobian kernels.

State layout per node: (p, v_1..v_d, u_1..u_d).  The time step couples the
implicit pressure/divergence/extension parts with a theta-weighted split of
fluid and solid stresses; inside the solid the deformation gradient is
condensed onto the velocity through the discrete relation
u_n = u_{n-1} + k*theta*v_n + k*(1-theta)*v_{n-1}.

The momentum Jacobian keeps only derivatives with respect to pressure and
velocity; the fluid-domain deformation enters as a frozen coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import apply_dirichlet_rows


class InvertedElementError(Exception):
    pass


@dataclass
class MaterialParams:
    rho_f: float = 1.0e3
    nu_f: float = 1.0e-3
    rho_s: float = 1.0e3
    mu_s: float = 2.0e6
    lam_s: float = 8.0e6
    body_force: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("rho_f", "nu_f", "rho_s", "mu_s", "lam_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def mu_f(self):
        return self.rho_f * self.nu_f

    def density_scaled(self):
        """Same problem in kinematic units (divided by rho_f).

        Velocities and deformations are unchanged; pressure and forces come
        out divided by rho_f.  This keeps all blocks of the time-step system
        commensurate, which the smoother and the Krylov metric rely on.
        """
        r = self.rho_f
        return MaterialParams(rho_f=1.0, nu_f=self.nu_f, rho_s=self.rho_s / r,
                              mu_s=self.mu_s / r, lam_s=self.lam_s / r,
                              body_force=self.body_force), r


@dataclass
class Kinematics:
    F: np.ndarray
    J: np.ndarray
    Finv: np.ndarray
    E: np.ndarray


def kinematics(grad_u) -> Kinematics:
    """Deformation gradient, determinant, inverse and Green-Lagrange strain."""
    grad_u = np.asarray(grad_u, dtype=float)
    d = grad_u.shape[-1]
    F = grad_u + np.eye(d)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InvertedElementError(f"min det(F) = {np.min(J):g}")
    Finv = np.linalg.inv(F)
    E = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(d))
    return Kinematics(F=F, J=J, Finv=Finv, E=E)


def condensed_deformation_gradient(grad_u_prev, grad_v_prev, grad_v_new,
                                   k, theta) -> Kinematics:
    """Solid deformation gradient expressed through the new velocity."""
    g = (np.asarray(grad_u_prev, dtype=float)
         + k * theta * np.asarray(grad_v_new)
         + k * (1.0 - theta) * np.asarray(grad_v_prev))
    return kinematics(g)


def fluid_cauchy_stress(grad_v, p, kin: Kinematics, mats: MaterialParams):
    """ALE Cauchy stress -p I + rho_f nu_f (grad(v) F^-1 + F^-T grad(v)^T)."""
    d = kin.F.shape[-1]
    gvF = np.asarray(grad_v) @ kin.Finv
    sym = gvF + np.swapaxes(gvF, -1, -2)
    return -np.asarray(p)[..., None, None] * np.eye(d) + mats.mu_f * sym


def fluid_momentum_stress(grad_v, p, kin: Kinematics, mats: MaterialParams):
    """The quantity J sigma_f F^-T entering the momentum form."""
    sigma = fluid_cauchy_stress(grad_v, p, kin, mats)
    return kin.J[..., None, None] * sigma @ np.swapaxes(kin.Finv, -1, -2)


def solid_pk_stress(kin: Kinematics, mats: MaterialParams):
    """St. Venant-Kirchhoff stress; returns (F Sigma, Sigma)."""
    d = kin.F.shape[-1]
    tr = np.trace(kin.E, axis1=-2, axis2=-1)
    Sigma = 2.0 * mats.mu_s * kin.E + mats.lam_s * tr[..., None, None] * np.eye(d)
    return kin.F @ Sigma, Sigma


def deformation_update(U, U_prev, k, theta, nodes):
    """Impose u_n = u_{n-1} + k theta v_n + k(1-theta) v_{n-1} on given nodes."""
    d = (U.shape[1] - 1) // 2
    U[nodes, 1 + d:] = (U_prev[nodes, 1 + d:]
                        + k * theta * U[nodes, 1:1 + d]
                        + k * (1.0 - theta) * U_prev[nodes, 1:1 + d])


# -- quadrature-point field evaluation ----------------------------------------

class _Fields:
    """Pressure/velocity/deformation values and gradients at cell qpoints."""

    def __init__(self, lvl, cells, U):
        d = lvl.dim
        conn = lvl.mesh.cell_nodes[cells]
        N, G = lvl.table.N, lvl.G[cells]
        Uc = U[conn]
        self.p = np.einsum("qb,cb->cq", N, Uc[:, :, 0])
        self.v = np.einsum("qb,cbi->cqi", N, Uc[:, :, 1:1 + d])
        self.u = np.einsum("qb,cbi->cqi", N, Uc[:, :, 1 + d:])
        self.gv = np.einsum("cqbj,cbi->cqij", G, Uc[:, :, 1:1 + d])
        self.gu = np.einsum("cqbj,cbi->cqij", G, Uc[:, :, 1 + d:])


def _fluid_kin(gu):
    d = gu.shape[-1]
    F = gu + np.eye(d)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InvertedElementError(f"fluid cell inverted, min J = {np.min(J):g}")
    return F, J, np.linalg.inv(F)


def _scatter(R, conn, local):
    np.add.at(R, conn, local)


def _test_contributions(wdet, N, G, val, grad):
    """Integrate value- and gradient-tested integrands against all basis."""
    out = 0.0
    if val is not None:
        out = out + np.einsum("cq,qb,cqi->cbi", wdet, N, val)
    if grad is not None:
        out = out + np.einsum("cq,cqbj,cqij->cbi", wdet, G, grad)
    return out


# -- residual ------------------------------------------------------------------

def explicit_forces(lvl, mats, flags, U_prev):
    """A_F + A_S of the previous state, tested with the momentum basis.

    Pure function of U_{n-1}; cached once per time step and weighted by
    k(1-theta) in the residual.
    """
    d = lvl.dim
    X = np.zeros((lvl.n_nodes, d))
    fq = _Fields(lvl, lvl.fluid_cells, U_prev)
    F, J, Fi = _fluid_kin(fq.gu)
    gvFi = fq.gv @ Fi
    conv = mats.rho_f * J[..., None] * np.einsum("cqij,cqj->cqi", gvFi, fq.v)
    f = np.asarray(mats.body_force)
    conv -= mats.rho_f * J[..., None] * f
    visc = mats.mu_f * J[..., None, None] * (
        (gvFi + np.swapaxes(gvFi, -1, -2)) @ np.swapaxes(Fi, -1, -2))
    local = _test_contributions(lvl.wdet[lvl.fluid_cells], lvl.table.N,
                                lvl.G[lvl.fluid_cells], conv, visc)
    _scatter(X, lvl.mesh.cell_nodes[lvl.fluid_cells], local)

    sq = _Fields(lvl, lvl.solid_cells, U_prev)
    kin = kinematics(sq.gu)
    P, _ = solid_pk_stress(kin, mats)
    sval = -mats.rho_s * np.broadcast_to(f, sq.v.shape)
    local = _test_contributions(lvl.wdet[lvl.solid_cells], lvl.table.N,
                                lvl.G[lvl.solid_cells], sval, P)
    _scatter(X, lvl.mesh.cell_nodes[lvl.solid_cells], local)

    _outflow_correction(lvl, mats, U_prev, X)
    return X


def _outflow_correction(lvl, mats, U, X, scale=1.0):
    """Do-nothing correction -(rho nu J F^-T grad(v)^T F^-T n, phi) on outflow."""
    fq = lvl.outflow
    if fq is None:
        return
    d = lvl.dim
    gv = fq.eval_grad(U[:, 1:1 + d])
    gu = fq.eval_grad(U[:, 1 + d:])
    F, J, Fi = _fluid_kin(gu)
    FiT = np.swapaxes(Fi, -1, -2)
    B = FiT @ np.swapaxes(gv, -1, -2) @ FiT
    t = np.einsum("cqij,cqj->cqi", B, fq.normal)
    vals = -scale * mats.mu_f * J[..., None] * t
    local = np.einsum("cq,cqb,cqi->cbi", fq.dS, fq.N, vals)
    np.add.at(X, fq.conn, local)


def theta_residual(lvl, mats, flags, k, theta, U, U_prev, explicit=None):
    """Residual of one theta step; constrained rows are zeroed.

    Returns (R, explicit) where ``explicit`` caches the previous-state force
    terms for reuse across Newton iterations of the same step.
    """
    d = lvl.dim
    n = lvl.n_nodes
    if explicit is None:
        explicit = explicit_forces(lvl, mats, flags, U_prev)
    R = np.zeros((n, 1 + 2 * d))

    # fluid cells: time derivative, mesh convection, implicit A_p/A_F/A_div
    cells = lvl.fluid_cells
    conn = lvl.mesh.cell_nodes[cells]
    wdet, N, G = lvl.wdet[cells], lvl.table.N, lvl.G[cells]
    fq = _Fields(lvl, cells, U)
    pq = _Fields(lvl, cells, U_prev)
    F, J, Fi = _fluid_kin(fq.gu)
    Fp, Jp, Fip = _fluid_kin(pq.gu)
    Fbar = 0.5 * (F + Fp)
    Jbar = 0.5 * (J + Jp)
    Fibar = np.linalg.inv(Fbar)
    vbar_g = 0.5 * (fq.gv + pq.gv)
    du = fq.u - pq.u
    w = np.einsum("cqij,cqj->cqi", Fibar, du)

    gvFi = fq.gv @ Fi
    f = np.asarray(mats.body_force)
    mom_val = (mats.rho_f * Jbar[..., None] * (fq.v - pq.v)
               - mats.rho_f * Jbar[..., None] * np.einsum("cqij,cqj->cqi", vbar_g, w)
               + k * theta * mats.rho_f * J[..., None]
               * (np.einsum("cqij,cqj->cqi", gvFi, fq.v) - f))
    FiT = np.swapaxes(Fi, -1, -2)
    mom_grad = (k * theta * mats.mu_f * J[..., None, None]
                * (gvFi + np.swapaxes(gvFi, -1, -2)) @ FiT
                - k * (J * fq.p)[..., None, None] * FiT)
    div_val = k * (J * np.einsum("cqij,cqji->cq", fq.gv, Fi))[..., None]

    if flags.extension_model == "harmonic":
        ext_grad = k * fq.gu
    else:
        eps = 0.5 * (fq.gu + np.swapaxes(fq.gu, -1, -2))
        trace = np.einsum("cqii->cq", eps)
        ext_grad = k * (2.0 * flags.ext_mu * eps
                        + flags.ext_lam * trace[..., None, None] * np.eye(d))
        if flags.ext_volume_scaling:
            ext_grad = ext_grad * lvl.inv_cell_volume[cells][:, None, None, None]

    local = np.zeros((len(cells), lvl.table.n_basis, 1 + 2 * d))
    local[:, :, 0] = np.einsum("cq,qb,cqi->cbi", wdet, N, div_val)[..., 0]
    local[:, :, 1:1 + d] = _test_contributions(wdet, N, G, mom_val, mom_grad)
    local[:, :, 1 + d:] = _test_contributions(wdet, N, G, None, ext_grad)
    _scatter(R, conn, local)

    # solid cells: time derivative and condensed stress
    cells = lvl.solid_cells
    conn = lvl.mesh.cell_nodes[cells]
    wdet, G = lvl.wdet[cells], lvl.G[cells]
    sq = _Fields(lvl, cells, U)
    sp = _Fields(lvl, cells, U_prev)
    kin = condensed_deformation_gradient(sp.gu, sp.gv, sq.gv, k, theta)
    P, _ = solid_pk_stress(kin, mats)
    sval = mats.rho_s * (sq.v - sp.v) - k * theta * mats.rho_s * f
    local = np.zeros((len(cells), lvl.table.n_basis, 1 + 2 * d))
    local[:, :, 1:1 + d] = _test_contributions(wdet, lvl.table.N, G,
                                               sval, k * theta * P)
    _scatter(R, conn, local)

    # explicit theta part, outflow correction, pressure stabilization
    R[:, 1:1 + d] += k * (1.0 - theta) * explicit
    Xc = np.zeros((n, d))
    _outflow_correction(lvl, mats, U, Xc, scale=k * theta)
    R[:, 1:1 + d] += Xc
    R[:, 0] += k * (lvl.lps_csr @ U[:, 0])

    # velocity-deformation relation replaces extension rows on solid+interface
    deficit = (U[:, 1 + d:] - U_prev[:, 1 + d:]
               - k * theta * U[:, 1:1 + d]
               - k * (1.0 - theta) * U_prev[:, 1:1 + d])
    rel = lvl.solid_mass @ deficit
    R[lvl.relation_nodes, 1 + d:] = rel[lvl.relation_nodes]

    R[lvl.residual_zero_mask] = 0.0
    return R, explicit


# -- momentum Jacobian ----------------------------------------------------------

def momentum_jacobian_data(lvl, mats, flags, k, theta, U, U_prev):
    """Block data of the (p, v) system with deformation derivatives dropped."""
    d = lvl.dim
    nc = d + 1
    data = lvl.pattern.zeros(nc)

    cells = lvl.fluid_cells
    wdet, N, G = lvl.wdet[cells], lvl.table.N, lvl.G[cells]
    fq = _Fields(lvl, cells, U)
    pq = _Fields(lvl, cells, U_prev)
    F, J, Fi = _fluid_kin(fq.gu)
    Fp, Jp, _ = _fluid_kin(pq.gu)
    Jbar = 0.5 * (J + Jp)
    Fibar = np.linalg.inv(0.5 * (F + Fp))
    w = np.einsum("cqij,cqj->cqi", Fibar, fq.u - pq.u)

    Fiv = np.einsum("cqij,cqj->cqi", Fi, fq.v)
    FiTG = np.einsum("cqmi,cqam->cqai", Fi, G)               # (F^-T G_a)_i
    K = Fi @ np.swapaxes(Fi, -1, -2)
    gvFi = fq.gv @ Fi
    eye = np.eye(d)

    local = np.zeros((len(cells), lvl.table.n_basis, lvl.table.n_basis, nc, nc))
    # delta_ij parts: time term, mesh convection, velocity-gradient convection,
    # and the first viscous piece
    coef_a = (-0.5 * mats.rho_f * Jbar)[..., None] * np.einsum("cqam,cqm->cqa", G, w) \
        + (k * theta * mats.rho_f * J)[..., None] * np.einsum("cqam,cqm->cqa", G, Fiv)
    diag = np.einsum("cq,qb,cqa->cba", wdet, N, coef_a) \
        + np.einsum("cq,qb,qa->cba", wdet * mats.rho_f * Jbar, N, N) \
        + np.einsum("cq,cqbl,cqlm,cqam->cba", wdet * (k * theta * mats.mu_f) * J, G, K, G)
    local[:, :, :, 1:, 1:] += diag[..., None, None] * eye
    # full (i,j) blocks: transported-gradient convection and second viscous piece
    local[:, :, :, 1:, 1:] += np.einsum("cq,qb,qa,cqij->cbaij",
                                        wdet * (k * theta * mats.rho_f) * J, N, N, gvFi)
    local[:, :, :, 1:, 1:] += np.einsum("cq,cqai,cqbj->cbaij",
                                        wdet * (k * theta * mats.mu_f) * J, FiTG, FiTG)
    # pressure column and divergence row
    local[:, :, :, 1:, 0] += np.einsum("cq,qa,cqbi->cbai", wdet * (-k) * J, N, FiTG)
    local[:, :, :, 0, 1:] += np.einsum("cq,qb,cqaj->cbaj", wdet * k * J, N, FiTG)

    lvl.pattern.scatter(data, lvl.fluid_group, local)

    # solid cells: mass + condensed stress tangent (chain factor k*theta)
    cells = lvl.solid_cells
    if len(cells):
        wdet, G = lvl.wdet[cells], lvl.G[cells]
        sq = _Fields(lvl, cells, U)
        sprev = _Fields(lvl, cells, U_prev)
        kin = condensed_deformation_gradient(sprev.gu, sprev.gv, sq.gv, k, theta)
        _, Sig = solid_pk_stress(kin, mats)
        Fc = kin.F
        kt2 = (k * theta) ** 2

        local = np.zeros((len(cells), lvl.table.n_basis, lvl.table.n_basis, nc, nc))
        mass = np.einsum("cq,qb,qa->cba", wdet * mats.rho_s, lvl.table.N, lvl.table.N)
        local[:, :, :, 1:, 1:] += mass[..., None, None] * eye
        FG = np.einsum("cqim,cqam->cqai", Fc, G)
        FFt = Fc @ np.swapaxes(Fc, -1, -2)
        sA = np.einsum("cq,cqas,cqsm,cqbm->cba", wdet * kt2, G, Sig, G)
        local[:, :, :, 1:, 1:] += sA[..., None, None] * eye
        sB = np.einsum("cq,cqai,cqbj->cbaij", wdet * kt2 * mats.mu_s, FG, FG)
        sC = np.einsum("cq,cqij,cqam,cqbm->cbaij", wdet * kt2 * mats.mu_s, FFt, G, G)
        sD = np.einsum("cq,cqbi,cqaj->cbaij", wdet * kt2 * mats.lam_s, FG, FG)
        local[:, :, :, 1:, 1:] += sB + sC + sD
        lvl.pattern.scatter(data, lvl.solid_group, local)

    # outflow do-nothing correction, implicit part
    fqf = lvl.outflow
    if fqf is not None:
        gu = fqf.eval_grad(U[:, 1 + d:])
        F, J, Fi = _fluid_kin(gu)
        FiTGf = np.einsum("cqmi,cqam->cqai", Fi, fqf.G)
        Fin = np.einsum("cqmi,cqm->cqi", Fi, fqf.normal)
        coef = -k * theta * mats.mu_f * J * fqf.dS
        locf = np.zeros((len(fqf.cells), lvl.table.n_basis, lvl.table.n_basis, nc, nc))
        locf[:, :, :, 1:, 1:] += np.einsum("cq,cqb,cqai,cqj->cbaij",
                                           coef, fqf.N, FiTGf, Fin)
        slots = lvl.pattern.slots_for(fqf.conn)
        np.add.at(data, slots.reshape(-1), locf.reshape(-1, nc, nc))

    # pressure stabilization into the (p, p) entries
    data[lvl.lps_slots, 0, 0] += k * lvl.lps_vals

    apply_dirichlet_rows(lvl.pattern, data, lvl.momentum_dirichlet)
    return data


def momentum_terms(lvl, mats, flags, k, theta, U, U_prev):
    """Fluid and solid momentum contributions of one step, kept separate.

    Returns (T_fluid, T_solid), each (n_nodes, d), without any boundary-row
    zeroing.  Testing these with a boundary indicator function gives the
    residual representation of the interface forces; the k-scaled sum over
    the interval equals k times the mean force.
    """
    d = lvl.dim
    Tf = np.zeros((lvl.n_nodes, d))
    Ts = np.zeros((lvl.n_nodes, d))

    cells = lvl.fluid_cells
    conn = lvl.mesh.cell_nodes[cells]
    wdet, N, G = lvl.wdet[cells], lvl.table.N, lvl.G[cells]
    fq = _Fields(lvl, cells, U)
    pq = _Fields(lvl, cells, U_prev)
    F, J, Fi = _fluid_kin(fq.gu)
    Fp, Jp, Fip = _fluid_kin(pq.gu)
    Jbar = 0.5 * (J + Jp)
    Fibar = np.linalg.inv(0.5 * (F + Fp))
    vbar_g = 0.5 * (fq.gv + pq.gv)
    w = np.einsum("cqij,cqj->cqi", Fibar, fq.u - pq.u)
    f = np.asarray(mats.body_force)

    gvFi = fq.gv @ Fi
    gvFip = pq.gv @ Fip
    val = (mats.rho_f * Jbar[..., None] * (fq.v - pq.v)
           - mats.rho_f * Jbar[..., None] * np.einsum("cqij,cqj->cqi", vbar_g, w)
           + k * theta * mats.rho_f * J[..., None]
           * (np.einsum("cqij,cqj->cqi", gvFi, fq.v) - f)
           + k * (1.0 - theta) * mats.rho_f * Jp[..., None]
           * (np.einsum("cqij,cqj->cqi", gvFip, pq.v) - f))
    FiT = np.swapaxes(Fi, -1, -2)
    FipT = np.swapaxes(Fip, -1, -2)
    grad = (k * theta * mats.mu_f * J[..., None, None]
            * (gvFi + np.swapaxes(gvFi, -1, -2)) @ FiT
            + k * (1.0 - theta) * mats.mu_f * Jp[..., None, None]
            * (gvFip + np.swapaxes(gvFip, -1, -2)) @ FipT
            - k * (J * fq.p)[..., None, None] * FiT)
    _scatter(Tf, conn, _test_contributions(wdet, N, G, val, grad))
    _outflow_correction(lvl, mats, U, Tf, scale=k * theta)
    _outflow_correction(lvl, mats, U_prev, Tf, scale=k * (1.0 - theta))

    cells = lvl.solid_cells
    if len(cells):
        conn = lvl.mesh.cell_nodes[cells]
        wdet, G = lvl.wdet[cells], lvl.G[cells]
        sq = _Fields(lvl, cells, U)
        sprev = _Fields(lvl, cells, U_prev)
        P, _ = solid_pk_stress(kinematics(sq.gu), mats)
        Pp, _ = solid_pk_stress(kinematics(sprev.gu), mats)
        val = -k * mats.rho_s * np.broadcast_to(f, sq.v.shape)
        grad = k * theta * P + k * (1.0 - theta) * Pp
        _scatter(Ts, conn, _test_contributions(wdet, lvl.table.N, G, val, grad))
    return Tf, Ts


def extension_data(lvl, flags):
    """State-independent mesh-extension operator on the fluid cells."""
    d = lvl.dim
    data = lvl.pattern.zeros(d)
    cells = lvl.fluid_cells
    wdet, G = lvl.wdet[cells], lvl.G[cells]
    local = np.zeros((len(cells), lvl.table.n_basis, lvl.table.n_basis, d, d))
    if flags.extension_model == "harmonic":
        gg = np.einsum("cq,cqam,cqbm->cba", wdet, G, G)
        local += gg[..., None, None] * np.eye(d)
    else:
        scale = (lvl.inv_cell_volume[cells] if flags.ext_volume_scaling
                 else np.ones(len(cells)))
        w = wdet * scale[:, None]
        gg = np.einsum("cq,cqam,cqbm->cba", w, G, G)
        local += flags.ext_mu * gg[..., None, None] * np.eye(d)
        local += flags.ext_mu * np.einsum("cq,cqai,cqbj->cbaij", w, G, G)
        local += flags.ext_lam * np.einsum("cq,cqaj,cqbi->cbaij", w, G, G)
    lvl.pattern.scatter(data, lvl.fluid_group, local)
    return data
