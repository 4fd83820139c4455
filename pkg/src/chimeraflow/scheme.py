"""One full minimizing-movement step: two linear proximal solves and one
Wasserstein proximal solve, with the diagnostics that certify each step.

Sub-step order is fixed: the w solve consumes the previous density, the v
solve consumes the fresh w, and the density solve consumes the fresh v.
The density sub-problem is solved in entropic form by alternating the row
marginal constraint with a pointwise first-order condition; the latter has
a closed form through the Lambert W function since the internal energy's
derivative is a strictly increasing power.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import lambertw

from . import energy
from .grid import DensityView, Field, GridSpec, gradient, inner
from .params import InnerSolveConfig, ModelParams
from .transport import (
    OtConfig,
    TransportResult,
    _make_kernel_apply,
    _symmetric_potential,
    plan_pairing_integral,
    sinkhorn,
)


class SchemeError(RuntimeError):
    """Raised when a step violates its invariants."""


class InnerConvergenceError(SchemeError):
    """Inner proximal solver ran out of sweeps; carries the last residuals."""

    def __init__(self, sweeps: int, update_change: float, marginal_err: float):
        self.sweeps = sweeps
        self.update_change = update_change
        self.marginal_err = marginal_err
        super().__init__(
            f"inner solver not converged after {sweeps} sweeps "
            f"(update change {update_change:.3e}, marginal {marginal_err:.3e})")


@dataclass(frozen=True)
class State:
    """The triple of unknowns at step k."""

    u: DensityView
    v: Field
    w: Field
    k: int
    time: float


@dataclass(frozen=True)
class SlopeDiagnostic:
    """Velocity bound check: weighted flux norm against the metric speed."""

    lhs: float
    rhs: float
    ratio: float


@dataclass(frozen=True)
class DeGiorgiPoint:
    """Variational interpolation at a sub-step sigma in (0, tau]."""

    sigma: float
    U: DensityView
    w2_from_prev: float
    slope_lhs: float


# ---------------------------------------------------------------------------
# linear sub-steps
# ---------------------------------------------------------------------------


def w_step(prev: State, p: ModelParams) -> Field:
    """Closed-form minimizer of the w sub-problem via one Helmholtz solve."""
    from .grid import helmholtz_solve

    rhs = Field(prev.w.grid, (p.eps2 / p.tau) * prev.w.values + prev.u.values)
    return helmholtz_solve(p.eps2 / p.tau + p.gam2, p.kap2, rhs)


def v_step(prev_v: Field, w_new: Field, p: ModelParams) -> Field:
    """Closed-form minimizer of the v sub-problem via one Helmholtz solve."""
    from .grid import helmholtz_solve

    rhs = Field(prev_v.grid, (p.eps1 / p.tau) * prev_v.values + w_new.values)
    return helmholtz_solve(p.eps1 / p.tau + p.gam1, p.kap1, rhs)


def w_objective(w: Field, prev: State, p: ModelParams) -> float:
    return energy.eval_G(w, prev.u, p) + (p.eps2 / (2 * p.tau)) * _l2_sq(w, prev.w)


def v_objective(v: Field, prev_v: Field, w_new: Field, p: ModelParams) -> float:
    return energy.eval_F(v, w_new, p) + (p.eps1 / (2 * p.tau)) * _l2_sq(v, prev_v)


def _l2_sq(a: Field, b: Field) -> float:
    diff = a.values - b.values
    return float((diff * diff).sum()) * a.grid.cell_volume


# ---------------------------------------------------------------------------
# Wasserstein proximal sub-step
# ---------------------------------------------------------------------------


def _lambertw_exp(u: np.ndarray) -> np.ndarray:
    """Solve w * e^w = e^u elementwise (principal branch, w >= 0 side).

    For moderate u the scipy evaluation is used directly; for large u the
    argument overflows, so w + log(w) = u is solved by Newton instead.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = u <= 50.0
    if small.any():
        out[small] = np.real(lambertw(np.exp(u[small])))
    big = ~small
    if big.any():
        ub = u[big]
        w = ub - np.log(ub)
        for _ in range(8):
            w = w - (w + np.log(w) - ub) * w / (w + 1.0)
        out[big] = w
    return out


def _prox_sweeps(lm, masses, v_arr, grid, p, eps, tol_update, marginal_tol,
                 max_sweeps, beta, n_prev, total_mass):
    """Alternating sweeps of the proximal system at one regularization level.

    Row dual from the fixed-marginal constraint, column dual from the
    pointwise first-order condition (Lambert W closed form).
    """
    tau = p.tau
    mexp = p.m
    c = mexp - 1.0
    hv = grid.cell_volume
    apply = _make_kernel_apply(grid, eps)
    log_ac = np.log(2.0 * tau * mexp / eps)
    change = np.inf
    marg_err = np.inf
    prev_err = np.inf
    theta = 1.8
    s_beta = apply(beta)
    alpha = lm - s_beta
    used = 0
    for _ in range(max_sweeps):
        used += 1
        alpha = lm - s_beta
        lbar = apply(alpha)
        b_over_eps = (2.0 * tau * v_arr) / eps + lbar - np.log(hv)
        y_w = _lambertw_exp(log_ac + c * b_over_eps)
        y = b_over_eps - y_w / c + np.log(hv)
        n = np.exp(y)
        # overrelax the dual unless the defect grew on the previous sweep
        step = theta if marg_err <= prev_err else 1.0
        beta = beta + step * ((y - lbar) - beta)
        s_beta = apply(beta)
        prev_err = marg_err
        marg_err = float(np.abs(np.exp(alpha + s_beta) - masses).sum()) / total_mass
        change = float(np.abs(n - n_prev).sum()) / total_mass
        n_prev = n
        if change <= tol_update and marg_err <= marginal_tol:
            break
    # one plain sweep so the returned marginal satisfies the prox condition
    alpha = lm - s_beta
    lbar = apply(alpha)
    b_over_eps = (2.0 * tau * v_arr) / eps + lbar - np.log(hv)
    y_w = _lambertw_exp(log_ac + c * b_over_eps)
    y = b_over_eps - y_w / c + np.log(hv)
    n = np.exp(y)
    beta = y - lbar
    marg_err = float(np.abs(np.exp(alpha + apply(beta)) - masses).sum()) / total_mass
    return alpha, beta, n, change, marg_err, used


def u_step(prev_u: DensityView, v_new: Field, p: ModelParams,
           ot: OtConfig, inner_cfg: InnerSolveConfig) -> tuple[DensityView, TransportResult]:
    """Entropic Wasserstein proximal step for the density.

    Alternates the row-marginal dual update with the pointwise proximal
    condition for the free marginal, solved per cell in closed form, with
    the regularization annealed down to the target value.  The returned
    density has the previous mass exactly; the companion transport result
    (debiased distance, duals) is recomputed in the standard probability
    convention for the ledger.
    """
    from .transport import epsilon_ladder

    grid = prev_u.grid
    eps = ot.epsilon
    tau = p.tau
    c = p.m - 1.0
    hv = grid.cell_volume
    masses = (prev_u.clamped() * hv).reshape(grid.shape)
    with np.errstate(divide="ignore"):
        lm = np.log(masses)
    v_arr = v_new.array

    ladder = epsilon_ladder(grid, eps)
    # warm start the free-marginal dual from the previous density
    phi_prev = np.maximum(prev_u.clamped(), 1e-300).reshape(grid.shape)
    e_prime = (p.m / c) * phi_prev ** c - v_arr
    beta = -2.0 * tau * e_prime / ladder[0]

    n_prev = masses.copy()
    sweeps_left = inner_cfg.max_outer
    for lvl, lvl_next in zip(ladder[:-1], ladder[1:]):
        _, beta, n_prev, _, _, used = _prox_sweeps(
            lm, masses, v_arr, grid, p, lvl, 1e-5, 1e-5,
            min(200, sweeps_left), beta, n_prev, prev_u.mass)
        sweeps_left = max(sweeps_left - used, 1)
        beta = beta * (lvl / lvl_next)
    alpha, beta, n, change, marg_err, _ = _prox_sweeps(
        lm, masses, v_arr, grid, p, eps, inner_cfg.tol_update,
        ot.marginal_tol, sweeps_left, beta, n_prev, prev_u.mass)
    if not (change <= inner_cfg.tol_update and marg_err <= ot.marginal_tol):
        raise InnerConvergenceError(inner_cfg.max_outer, change, marg_err)
    apply = _make_kernel_apply(grid, eps)

    u_vals = (n / hv).reshape(-1)
    u_new = DensityView(Field(grid, u_vals)).renormalized(prev_u.mass)

    # descent audit in the same regularized-cost convention as the solve
    w_in = eps * (float((alpha[masses > 0] * masses[masses > 0]).sum())
                  + float((beta * n).sum()) - float(n.sum()))
    obj_new = energy.eval_E(u_new, v_new, p) + w_in / (2.0 * tau)
    pot_self = _symmetric_potential(lm, grid, eps, ot.max_iter, ot.marginal_tol)
    total_self = float(np.exp(pot_self + apply(pot_self)).sum())
    w_self = eps * (2.0 * float((pot_self[masses > 0] * masses[masses > 0]).sum())
                    - total_self)
    obj_prev = energy.eval_E(prev_u, v_new, p) + w_self / (2.0 * tau)
    tol_obj = inner_cfg.tol_obj_rel * (1.0 + abs(obj_prev))
    if obj_new > obj_prev + tol_obj:
        raise SchemeError(
            f"proximal step increased its objective: {obj_new!r} > {obj_prev!r}")

    tr = sinkhorn(prev_u, u_new, ot)
    return u_new, tr


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def u_floor_value(p: ModelParams, grid: GridSpec) -> float:
    return 1e-12 * p.M / grid.box_length ** grid.d


def fisher_quantity(u: DensityView, v: Field, p: ModelParams) -> float:
    """Square root of the u-weighted squared flux integral.

    The quotient is evaluated only where the density exceeds the floor;
    dead regions contribute nothing.
    """
    grid = u.grid
    uc = u.clamped()
    floor = u_floor_value(p, grid)
    mask = uc > floor
    um = Field(grid, uc ** p.m)
    grad_um = gradient(um)
    grad_v = gradient(v)
    total = 0.0
    for gm, gv in zip(grad_um, grad_v):
        flux = gm.values - uc * gv.values
        total += float((flux[mask] ** 2 / uc[mask]).sum())
    return float(np.sqrt(total * grid.cell_volume))


def slope_check(prev_u: DensityView, state: State, tr: TransportResult,
                p: ModelParams) -> SlopeDiagnostic:
    """Check the discrete velocity bound for an accepted step."""
    lhs = fisher_quantity(state.u, state.v, p)
    rhs = tr.w2 / p.tau
    tiny = 1e-14 * (1.0 + abs(lhs))
    ratio = 0.0 if rhs <= tiny else lhs / rhs
    return SlopeDiagnostic(lhs=lhs, rhs=rhs, ratio=ratio)


def default_test_fields(grid: GridSpec, modes: int = 2) -> list[list[Field]]:
    """Low-frequency vector test fields, one axis-aligned component each."""
    out = []
    x = grid.axis_coords()
    L = grid.box_length
    for axis in range(grid.d):
        for j in range(1, modes + 1):
            for trig in (np.sin, np.cos):
                prof = trig(2.0 * np.pi * j * x / L)
                shape = [1] * grid.d
                shape[axis] = grid.n
                comp = np.broadcast_to(prof.reshape(shape), grid.shape)
                vec = [Field.zeros(grid) for _ in range(grid.d)]
                vec[axis] = Field(grid, comp.reshape(-1).copy())
                out.append(vec)
    return out


def el_residual_u(prev_u: DensityView, state: State, tr: TransportResult,
                  test_fields: list[list[Field]], p: ModelParams) -> list[float]:
    """First-order condition defect of the density step, per test field.

    Each value is |plan pairing + tau * flux pairing| normalized by
    tau * sup|xi| * mass.
    """
    grid = state.u.grid
    uc = state.u.clamped()
    um = Field(grid, uc ** p.m)
    grad_um = gradient(um)
    grad_v = gradient(state.v)
    out = []
    for xi in test_fields:
        pairing = plan_pairing_integral(tr, prev_u, state.u, xi)
        flux_pair = 0.0
        mag_sq = np.zeros(grid.num_cells)
        for gm, gv, comp in zip(grad_um, grad_v, xi):
            flux_pair += float(((gm.values - uc * gv.values) * comp.values).sum())
            mag_sq += comp.values ** 2
        flux_pair *= grid.cell_volume
        sup = float(np.sqrt(mag_sq.max(initial=0.0)))
        denom = p.tau * sup * prev_u.mass
        out.append(abs(pairing + p.tau * flux_pair) / denom if denom > 0 else 0.0)
    return out


def de_giorgi_interpolate(prev: State, v_new: Field, sigmas: list[float],
                          p: ModelParams, ot: OtConfig,
                          inner_cfg: InnerSolveConfig) -> list[DeGiorgiPoint]:
    """Re-solve the density sub-problem at sub-steps sigma in (0, tau]."""
    if any(s <= 0.0 or s > p.tau for s in sigmas):
        raise SchemeError("sub-steps must lie in (0, tau]")
    if sorted(sigmas) != list(sigmas):
        raise SchemeError("sub-steps must be sorted ascending")
    points = []
    for sigma in sigmas:
        p_sigma = dataclasses.replace(p, tau=sigma)
        U, tr = u_step(prev.u, v_new, p_sigma, ot, inner_cfg)
        points.append(DeGiorgiPoint(
            sigma=sigma, U=U, w2_from_prev=tr.w2,
            slope_lhs=fisher_quantity(U, v_new, p)))
    return points


# ---------------------------------------------------------------------------
# step composition
# ---------------------------------------------------------------------------


def v_minus_one(v0: Field, w0: Field, p: ModelParams) -> Field:
    """Backward extension of the relaxation field so the dissipation term is
    defined at the first step."""
    resid = energy.field_residual(v0, w0, p)
    return Field(v0.grid, v0.values - p.tau * resid.values / p.eps1)


def _check_sign(f: Field, label: str) -> None:
    vmax = float(np.abs(f.values).max(initial=0.0))
    vmin = float(f.values.min(initial=0.0))
    if vmin < -1e-9 * max(vmax, 1e-300):
        raise SchemeError(f"{label} dipped negative beyond tolerance: min {vmin:.3e}")


def full_step(prev: State, p: ModelParams, ot: OtConfig,
              inner_cfg: InnerSolveConfig,
              v_prev_prev: Field | None = None) -> tuple[State, energy.StepRecord]:
    """Advance one step and assemble its ledger record.

    ``v_prev_prev`` is the relaxation field two steps back; omit it at the
    first step and the backward extension is used.
    """
    w_new = w_step(prev, p)
    v_new = v_step(prev.v, w_new, p)
    u_new, tr = u_step(prev.u, v_new, p, ot, inner_cfg)

    if abs(u_new.mass - p.M) > 1e-10 * p.M:
        raise SchemeError(f"mass drifted: {u_new.mass!r} vs {p.M!r}")
    _check_sign(v_new, "v")
    _check_sign(w_new, "w")

    state = State(u=u_new, v=v_new, w=w_new, k=prev.k + 1,
                  time=(prev.k + 1) * p.tau)

    if v_prev_prev is None:
        v_prev_prev = v_minus_one(prev.v, prev.w, p)
    L_before = energy.eval_L(prev.u, prev.v, prev.w, p).L
    L_after = energy.eval_L(u_new, v_new, w_new, p).L
    slope = slope_check(prev.u, state, tr, p)
    resid = energy.field_residual(v_new, w_new, p)
    resid_grad_sq = sum(inner(gi, gi) for gi in gradient(resid))
    rec = energy.StepRecord(
        k=state.k,
        time=state.time,
        w2_sq_over_2tau=tr.w2 ** 2 / (2.0 * p.tau),
        D=energy.eval_D(v_new, prev.v, v_prev_prev, p),
        L_before=L_before,
        L_after=L_after,
        slope_lhs=slope.lhs,
        slope_rhs=slope.rhs,
        dH1_sq=energy.h1_increment_sq(v_new, prev.v, p),
        norms=energy.norm_bundle(u_new, v_new, w_new, p),
        resid_l2_sq=inner(resid, resid),
        resid_grad_sq=resid_grad_sq,
    )
    return state, rec


def initial_energy_gate(u_raw: DensityView, u_mollified: DensityView,
                        v0: Field, w0: Field, p: ModelParams) -> dict:
    """Mollification admissibility: the smoothed start may cost at most one
    unit of Lyapunov value over the raw start."""
    l_raw = energy.eval_L(u_raw, v0, w0, p).L
    l_moll = energy.eval_L(u_mollified, v0, w0, p).L
    return {"L_raw": l_raw, "L_mollified": l_moll,
            "pass": l_moll <= l_raw + 1.0}


def steady_uniform_state(grid: GridSpec, p: ModelParams) -> State:
    """Spatially uniform stationary triple; needs both decay rates positive."""
    if p.gam1 <= 0.0 or p.gam2 <= 0.0:
        raise SchemeError("uniform steady state needs positive decay rates")
    u_bar = p.M / grid.box_length ** grid.d
    u = DensityView(Field.constant(grid, u_bar))
    w = Field.constant(grid, u_bar / p.gam2)
    v = Field.constant(grid, u_bar / (p.gam1 * p.gam2))
    return State(u=u, v=v, w=w, k=0, time=0.0)
