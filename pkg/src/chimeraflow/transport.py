"""Quadratic Wasserstein machinery on the periodic grid.

Entropic optimal transport between equal-mass densities, solved by Sinkhorn
iterations with the quadratic torus cost.  The Gibbs kernel is never
materialized over cell pairs: the cost is separable across axes, so every
kernel application is a sequence of per-axis (n x n) log-sum-exp contractions.
Distances are reported debiased (Sinkhorn divergence) while the raw entropic
cost is kept for proximal objectives.  Small instances can be solved exactly
by linear programming for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .grid import DensityView, Field, GridSpec, _wrap_displacement

_MASS_MATCH_RTOL = 1e-8
_LSE_BLOCK = 1 << 22  # cap on scratch doubles per axis contraction


class TransportError(ValueError):
    """Raised on invalid transport inputs (mass mismatch, size caps, ...)."""


@dataclass(frozen=True)
class OtConfig:
    """Entropic OT solver settings.

    epsilon has units of squared length; the default choice elsewhere is the
    squared grid spacing.  With ``debias`` on, distance values are Sinkhorn
    divergences; with it off, the square root of the plan cost is reported.
    """

    epsilon: float
    max_iter: int = 20000
    marginal_tol: float = 1e-9
    log_domain: bool = True
    debias: bool = True

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise TransportError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iter < 1:
            raise TransportError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class TransportResult:
    """Converged (or best-effort) entropic transport between two densities.

    ``cost`` is the mass-weighted plan cost sum(P * C); ``w2`` the debiased
    distance estimate sqrt(max(0, divergence)).  ``potentials`` are the
    log-domain duals of the cross problem, stored as fields.
    """

    cost: float
    w2: float
    potentials: tuple[Field, Field]
    converged: bool
    marginal_err: float
    epsilon: float
    mass: float

    @property
    def grid(self) -> GridSpec:
        return self.potentials[0].grid


@dataclass(frozen=True)
class ExactPlan:
    """Sparse optimal plan from the exact LP, masses in absolute units.

    ``src_support``/``dst_support`` hold the flat grid indices of the LP's
    row/column cells; the dual potentials are aligned with them.
    """

    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray
    cost: float
    src_support: np.ndarray | None = None
    dst_support: np.ndarray | None = None
    src_potential: np.ndarray | None = None
    dst_potential: np.ndarray | None = None


# ---------------------------------------------------------------------------
# separable kernel contractions
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _axis_tables(n: int, box_length: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis wrapped displacement and squared distance, indexed [out, in]."""
    x = (box_length / n) * np.arange(n)
    disp = _wrap_displacement(x[:, None] - x[None, :], box_length)
    return disp, disp ** 2


def _axis_log_kernel(grid: GridSpec, epsilon: float) -> np.ndarray:
    _, dsq = _axis_tables(grid.n, grid.box_length)
    return -dsq / epsilon


def _lse_contract(z: np.ndarray, logm: np.ndarray, axis: int) -> np.ndarray:
    """out[..., o, ...] = logsumexp_j(z[..., j, ...] + logm[o, j]) along axis."""
    moved = np.moveaxis(z, axis, -1)
    lead = moved.shape[:-1]
    n = moved.shape[-1]
    flat = moved.reshape(-1, n)
    out = np.empty_like(flat)
    block = max(1, _LSE_BLOCK // (n * n))
    for start in range(0, flat.shape[0], block):
        chunk = flat[start:start + block]
        out[start:start + block] = logsumexp(
            chunk[:, None, :] + logm[None, :, :], axis=-1
        )
    return np.moveaxis(out.reshape(*lead, n), -1, axis)


def _kernel_lse(z: np.ndarray, logk: np.ndarray, d: int) -> np.ndarray:
    """Full separable kernel in log domain: all axes contracted with logk."""
    out = z
    for axis in range(d):
        out = _lse_contract(out, logk, axis)
    return out


_DENSE_CELL_CAP = 300


@lru_cache(maxsize=16)
def _dense_cost(d: int, n: int, box_length: float) -> np.ndarray:
    """Full torus squared-distance matrix over cells, for small grids only."""
    _, dsq = _axis_tables(n, box_length)
    idx = np.stack(np.unravel_index(np.arange(n ** d), (n,) * d), axis=1)
    total = np.zeros((n ** d, n ** d))
    for axis in range(d):
        total += dsq[idx[:, axis][:, None], idx[:, axis][None, :]]
    return total


def _make_kernel_apply(grid: GridSpec, epsilon: float):
    """Return S(z)_i = logsumexp_j(z_j - C_ij/eps) as a closure.

    Small instances get a dense matrix path (cheap per iteration); larger
    ones use the separable per-axis contractions.
    """
    if grid.num_cells <= _DENSE_CELL_CAP:
        logm = -_dense_cost(grid.d, grid.n, grid.box_length) / epsilon
        shape = grid.shape

        def apply(z: np.ndarray) -> np.ndarray:
            m = z.reshape(-1)[None, :] + logm
            mx = m.max(axis=1)
            with np.errstate(invalid="ignore"):
                out = mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))
            return out.reshape(shape)

        return apply
    logk = _axis_log_kernel(grid, epsilon)
    return lambda z: _kernel_lse(z, logk, grid.d)


def _weighted_plan_sum(phi: np.ndarray, psi: np.ndarray, logk: np.ndarray,
                       d: int, axis: int, logw: np.ndarray) -> np.ndarray:
    """sum_i exp(phi_i + psi_j + log K_ij) * w(axis) for a separable,
    nonnegative per-axis weight w given as logw[out, in]; returns values
    indexed by j (the psi side)."""
    out = phi
    for a in range(d):
        mat = logk + logw if a == axis else logk
        out = _lse_contract(out, mat, a)
    return np.exp(psi + out)


def _signed_axis_moment(phi: np.ndarray, psi: np.ndarray, logk: np.ndarray,
                        d: int, axis: int, disp: np.ndarray) -> np.ndarray:
    """sum_i exp(phi_i + psi_j + log K_ij) * disp[j_axis, i_axis], signed.

    disp is indexed [out, in]; the result lives on the psi side.
    """
    with np.errstate(divide="ignore"):
        logw_pos = np.where(disp > 0, np.log(np.where(disp > 0, disp, 1.0)), -np.inf)
        logw_neg = np.where(disp < 0, np.log(np.where(disp < 0, -disp, 1.0)), -np.inf)
    pos = phi
    neg = np.full_like(phi, -np.inf)
    for a in range(d):
        if a == axis:
            new_pos_a = _lse_contract(pos, logk + logw_pos, a)
            new_pos_b = _lse_contract(neg, logk + logw_neg, a)
            new_neg_a = _lse_contract(neg, logk + logw_pos, a)
            new_neg_b = _lse_contract(pos, logk + logw_neg, a)
            pos = np.logaddexp(new_pos_a, new_pos_b)
            neg = np.logaddexp(new_neg_a, new_neg_b)
        else:
            pos = _lse_contract(pos, logk, a)
            neg = _lse_contract(neg, logk, a)
    return np.exp(psi + pos) - np.exp(psi + neg)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def _log_weights(dens: DensityView) -> np.ndarray:
    """log of the probability weights of a density, -inf on empty cells."""
    w = dens.clamped() * dens.grid.cell_volume / dens.mass
    with np.errstate(divide="ignore"):
        return np.log(w).reshape(dens.grid.shape)


def _masked_dot(pot: np.ndarray, logw: np.ndarray) -> float:
    mask = logw > -np.inf
    return float((pot[mask] * np.exp(logw[mask])).sum())


def _sinkhorn_log_fixed_eps(lmu, lnu, apply, max_iter, tol, phi, psi):
    """Alternating dual updates at fixed epsilon.

    Two kernel applications per iteration; the row-marginal defect is a free
    byproduct, so convergence is checked every iteration.
    """
    err = np.inf
    iters = 0
    mu_w = np.exp(lmu)
    s_psi = apply(psi)
    while iters < max_iter:
        phi = lmu - s_psi
        psi = lnu - apply(phi)
        s_psi = apply(psi)
        iters += 1
        err = float(np.abs(np.exp(phi + s_psi) - mu_w).sum())
        if err <= tol:
            break
    return phi, psi, err, iters


def epsilon_ladder(grid: GridSpec, epsilon: float, factor: float = 4.0) -> list[float]:
    """Annealing schedule from a coarse regularization down to the target."""
    coarse = (grid.box_length / 4.0) ** 2
    out = [epsilon]
    while out[-1] * factor < coarse:
        out.append(out[-1] * factor)
    return out[::-1]


def _sinkhorn_log(lmu, lnu, grid, epsilon, max_iter, tol):
    """Log-domain Sinkhorn with epsilon annealing and warm-started duals.

    Scaled duals phi = f/eps are carried down the ladder, rescaled so the
    physical potential f is continuous across levels.
    """
    d = grid.d
    phi = np.where(lmu > -np.inf, 0.0, -np.inf)
    psi = np.where(lnu > -np.inf, 0.0, -np.inf)
    iters_left = max_iter
    ladder = epsilon_ladder(grid, epsilon)
    for eps, eps_next in zip(ladder[:-1], ladder[1:]):
        phi, psi, _, used = _sinkhorn_log_fixed_eps(
            lmu, lnu, _make_kernel_apply(grid, eps),
            min(200, iters_left), 1e-4, phi, psi)
        iters_left = max(iters_left - used, 1)
        scale = eps / eps_next
        phi = np.where(np.isfinite(phi), phi * scale, phi)
        psi = np.where(np.isfinite(psi), psi * scale, psi)
    return _sinkhorn_log_fixed_eps(
        lmu, lnu, _make_kernel_apply(grid, epsilon), iters_left, tol, phi, psi)


def _sinkhorn_plain(lmu, lnu, logk, d, max_iter, tol):
    """Plain-scaling iterations, kept as a cross-check for moderate epsilon."""
    K = np.exp(logk)
    mu = np.exp(lmu)
    nu = np.exp(lnu)

    def kernel(z):
        out = z
        for axis in range(d):
            out = np.moveaxis(
                np.moveaxis(out, axis, -1) @ K.T, -1, axis)
        return out

    u = np.ones_like(mu)
    v = np.ones_like(nu)
    err = np.inf
    iters = 0
    tiny = np.finfo(float).tiny
    while iters < max_iter:
        u = mu / np.maximum(kernel(v), tiny)
        v = nu / np.maximum(kernel(u), tiny)
        iters += 1
        if iters % 5 == 0 or iters == max_iter:
            err = float(np.abs(u * kernel(v) - mu).sum())
            if err <= tol:
                break
    with np.errstate(divide="ignore"):
        return np.log(u), np.log(v), err, iters


def _symmetric_potential(lw, grid, epsilon, max_iter, tol):
    """Self-transport dual for debiasing, by the averaged fixed point."""
    apply = _make_kernel_apply(grid, epsilon)
    phi = np.where(lw > -np.inf, 0.0, -np.inf)
    mask = lw > -np.inf
    for _ in range(max_iter):
        new = 0.5 * (phi + lw - apply(phi))
        gap = float(np.abs(new[mask] - phi[mask]).max(initial=0.0))
        phi = new
        if gap <= 0.1 * tol:
            break
    return phi


def _ot_value(phi, psi, lmu, lnu, logk, d, epsilon) -> float:
    """Regularized primal value epsilon*(<phi,mu> + <psi,nu> - sum(P))."""
    total = float(np.exp(psi + _kernel_lse(phi, logk, d)).sum())
    return epsilon * (_masked_dot(phi, lmu) + _masked_dot(psi, lnu) - total)


def _plan_cost(phi, psi, grid: GridSpec, epsilon: float) -> float:
    """Sharp cost sum(P * C) of the current plan, probability mass units."""
    logk = _axis_log_kernel(grid, epsilon)
    _, dsq = _axis_tables(grid.n, grid.box_length)
    with np.errstate(divide="ignore"):
        logc = np.where(dsq > 0, np.log(np.where(dsq > 0, dsq, 1.0)), -np.inf)
    total = 0.0
    for axis in range(grid.d):
        total += float(
            _weighted_plan_sum(phi, psi, logk, grid.d, axis, logc).sum())
    return total


def sinkhorn(mu: DensityView, nu: DensityView, cfg: OtConfig) -> TransportResult:
    """Entropic OT between two equal-mass densities.

    Marginals are normalized internally; reported values follow the sqrt(M)
    mass convention, i.e. w2(mu, nu) = sqrt(M) * w2(mu/M, nu/M).
    """
    if mu.grid != nu.grid:
        raise TransportError("marginals live on different grids")
    if not np.isclose(mu.mass, nu.mass, rtol=_MASS_MATCH_RTOL, atol=0.0):
        raise TransportError(
            f"mass mismatch: {mu.mass!r} vs {nu.mass!r} (rtol {_MASS_MATCH_RTOL})")
    grid = mu.grid
    mass = mu.mass
    lmu = _log_weights(mu)
    lnu = _log_weights(nu)
    logk = _axis_log_kernel(grid, cfg.epsilon)

    if cfg.log_domain:
        phi, psi, err, _ = _sinkhorn_log(lmu, lnu, grid, cfg.epsilon,
                                         cfg.max_iter, cfg.marginal_tol)
    else:
        phi, psi, err, _ = _sinkhorn_plain(lmu, lnu, logk, grid.d,
                                           cfg.max_iter, cfg.marginal_tol)
    converged = err <= cfg.marginal_tol

    cost = mass * _plan_cost(phi, psi, grid, cfg.epsilon)
    if cfg.debias:
        cross = _ot_value(phi, psi, lmu, lnu, logk, grid.d, cfg.epsilon)
        div = cross
        for lw in (lmu, lnu):
            pot = _symmetric_potential(lw, grid, cfg.epsilon,
                                       cfg.max_iter, cfg.marginal_tol)
            div -= 0.5 * _ot_value(pot, pot, lw, lw, logk, grid.d, cfg.epsilon)
        w2 = float(np.sqrt(mass * max(0.0, div)))
    else:
        w2 = float(np.sqrt(max(0.0, cost)))

    f = Field(grid, (cfg.epsilon * np.where(np.isfinite(phi), phi, 0.0)).reshape(-1))
    g = Field(grid, (cfg.epsilon * np.where(np.isfinite(psi), psi, 0.0)).reshape(-1))
    return TransportResult(cost=cost, w2=w2, potentials=(f, g),
                           converged=converged, marginal_err=err,
                           epsilon=cfg.epsilon, mass=mass)


def _result_logpot(result: TransportResult, mu: DensityView,
                   nu: DensityView) -> tuple[np.ndarray, np.ndarray]:
    grid = result.grid
    lmu = _log_weights(mu)
    lnu = _log_weights(nu)
    phi = np.where(lmu > -np.inf,
                   result.potentials[0].array / result.epsilon, -np.inf)
    psi = np.where(lnu > -np.inf,
                   result.potentials[1].array / result.epsilon, -np.inf)
    return phi, psi


def barycentric_map(result: TransportResult, mu: DensityView,
                    nu: DensityView) -> list[Field]:
    """Displacement T(x) - x of the entropic barycentric projection, per axis.

    T(x) = E[y | x] under the plan, with displacements taken in the minimal
    image; cells carrying no mass of mu get displacement zero.
    """
    if not result.converged:
        raise TransportError("barycentric_map requires a converged transport")
    grid = result.grid
    phi, psi = _result_logpot(result, mu, nu)
    logk = _axis_log_kernel(grid, result.epsilon)
    disp, _ = _axis_tables(grid.n, grid.box_length)
    rowmass = np.exp(_log_weights(mu))
    out = []
    for axis in range(grid.d):
        # displacement from the mu point (out index) to the nu point (in index)
        num = _signed_axis_moment(psi, phi, logk, grid.d, axis, -disp)
        vals = np.where(rowmass > 0, num / np.maximum(rowmass, 1e-300), 0.0)
        out.append(Field(grid, vals.reshape(-1)))
    return out


def plan_pairing_integral(result: TransportResult, mu: DensityView,
                          nu: DensityView, xi: list[Field]) -> float:
    """Pairing integral of <y - x, xi(y)> against the mass-M entropic plan.

    Evaluated with per-axis moment-weighted kernel applications; the plan is
    never materialized.
    """
    if not result.converged:
        raise TransportError("plan_pairing_integral requires a converged transport")
    grid = result.grid
    if len(xi) != grid.d:
        raise TransportError(f"expected {grid.d} test-field components, got {len(xi)}")
    phi, psi = _result_logpot(result, mu, nu)
    logk = _axis_log_kernel(grid, result.epsilon)
    disp, _ = _axis_tables(grid.n, grid.box_length)
    total = 0.0
    for axis in range(grid.d):
        col = _signed_axis_moment(phi, psi, logk, grid.d, axis, disp)
        total += float((col * xi[axis].array).sum())
    return result.mass * total


# ---------------------------------------------------------------------------
# exact solvers and 1D oracles
# ---------------------------------------------------------------------------


def _support_points(dens: DensityView) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grid = dens.grid
    masses = dens.clamped() * grid.cell_volume
    idx = np.nonzero(masses > 0)[0]
    coords = np.stack(np.unravel_index(idx, grid.shape), axis=1)
    pts = grid.origin_offset + grid.spacing * coords.astype(float)
    return idx, pts, masses[idx]


def _pairwise_torus_cost(pa: np.ndarray, pb: np.ndarray, period: float) -> np.ndarray:
    diff = pa[:, None, :] - pb[None, :, :]
    return (_wrap_displacement(diff, period) ** 2).sum(axis=2)


def lp_exact_w2(mu: DensityView, nu: DensityView, cell_cap: int = 4096) -> ExactPlan:
    """Exact quadratic-cost optimal transport by linear programming.

    Only viable for small instances; the plan is returned sparsely with
    absolute masses, and ``cost`` equals the squared mass-convention W2.
    """
    if mu.grid.num_cells > cell_cap or nu.grid.num_cells > cell_cap:
        raise TransportError(
            f"instance too large for exact LP (cap {cell_cap} cells)")
    if not np.isclose(mu.mass, nu.mass, rtol=_MASS_MATCH_RTOL, atol=0.0):
        raise TransportError(f"mass mismatch: {mu.mass!r} vs {nu.mass!r}")
    ia, pa, ma = _support_points(mu)
    ib, pb, mb = _support_points(nu)
    mb = mb * (ma.sum() / mb.sum())
    cost_mat = _pairwise_torus_cost(pa, pb, mu.grid.box_length)
    R, C = cost_mat.shape

    rows_r = np.repeat(np.arange(R), C)
    rows_c = R + np.tile(np.arange(C), R)
    cols = np.arange(R * C)
    A = sparse.csr_matrix(
        (np.ones(2 * R * C),
         (np.concatenate([rows_r, rows_c]), np.concatenate([cols, cols]))),
        shape=(R + C, R * C),
    )
    b = np.concatenate([ma, mb])
    res = linprog(cost_mat.reshape(-1), A_eq=A, b_eq=b,
                  bounds=(0, None), method="highs")
    if not res.success:
        raise TransportError(f"exact LP failed: {res.message}")
    plan = res.x.reshape(R, C)
    keep = plan > 1e-15 * mu.mass
    rr, cc = np.nonzero(keep)
    duals = res.eqlin.marginals
    return ExactPlan(
        src=ia[rr], dst=ib[cc], mass=plan[rr, cc],
        cost=float((plan * cost_mat).sum()),
        src_support=ia, dst_support=ib,
        src_potential=duals[:R], dst_potential=duals[R:],
    )


def quantile_w2_1d(mu: DensityView, nu: DensityView) -> float:
    """Squared W2 between 1D densities on the line by CDF inversion.

    Uses unwrapped coordinates, so it is the torus answer only when no mass
    needs to cross the periodic seam.  Mass convention included.
    """
    if mu.grid.d != 1:
        raise TransportError("quantile oracle is one-dimensional")
    x = mu.grid.axis_coords()
    wa = mu.clamped() * mu.grid.cell_volume / mu.mass
    wb = nu.clamped() * nu.grid.cell_volume / nu.mass
    ia = np.nonzero(wa > 0)[0]
    ib = np.nonzero(wb > 0)[0]
    ca = np.cumsum(wa[ia])
    cb = np.cumsum(wb[ib])
    levels = np.unique(np.concatenate([ca, cb, [1.0]]))
    total = 0.0
    prev = 0.0
    for q in levels:
        da = x[ia[min(np.searchsorted(ca, prev + 1e-15), len(ia) - 1)]]
        db = x[ib[min(np.searchsorted(cb, prev + 1e-15), len(ib) - 1)]]
        total += (q - prev) * (da - db) ** 2
        prev = q
    return mu.mass * total


def quantile_map_1d(mu: DensityView, nu: DensityView) -> np.ndarray:
    """Conditional mean E[y|x] of the monotone 1D coupling on mu's support."""
    if mu.grid.d != 1:
        raise TransportError("quantile oracle is one-dimensional")
    x = mu.grid.axis_coords()
    wa = mu.clamped() * mu.grid.cell_volume / mu.mass
    wb = nu.clamped() * nu.grid.cell_volume / nu.mass
    out = np.array(x, dtype=float)
    ib = np.nonzero(wb > 0)[0]
    cb = np.cumsum(wb[ib])
    lo = 0.0
    for i in np.nonzero(wa > 0)[0]:
        hi = lo + wa[i]
        # integrate the nu quantile function over [lo, hi]
        acc = 0.0
        q = lo
        j = np.searchsorted(cb, lo + 1e-15)
        while q < hi - 1e-15 and j < len(ib):
            upto = min(hi, cb[j])
            acc += (upto - q) * x[ib[j]]
            q = upto
            j += 1
        out[i] = acc / wa[i]
        lo = hi
    return out
