"""Exponent calculus and the numerical critical-mass estimator.

The exponent bookkeeping is exact rational arithmetic; the sharp-constant
estimator is an alternating block maximization of a Rayleigh-type quotient
whose v-block has a closed form through the inverse bilaplacian and whose
u-block is a one-parameter thresholded power family.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .grid import (
    DensityView,
    Field,
    GridSpec,
    biharmonic_inverse,
    inner,
    laplacian,
    lp_norm,
)
from .params import ModelParams


class CriticalError(ValueError):
    """Raised for inadmissible exponent or estimator inputs."""


RationalLike = Fraction | int | str | tuple


def _as_fraction(m: RationalLike | float) -> Fraction:
    if isinstance(m, tuple):
        return Fraction(*m)
    return Fraction(m)


@dataclass(frozen=True)
class CriticalExponents:
    """Exact rational exponent bundle for a given (m, d)."""

    m: Fraction
    d: int
    theta: Fraction
    one_minus_theta: Fraction
    p_star: Fraction
    q_star: Fraction
    regime: str
    uniform_L2_ok: bool
    relation_checks: tuple[bool, bool]


def exponents(m: RationalLike | float, d: int) -> CriticalExponents:
    """Evaluate the interpolation exponent, the time-integrability exponent
    and the regime classification, exactly.

    ``m`` may be a Fraction, int, string like "4/3", numerator/denominator
    tuple, or float (converted exactly from its binary value, so prefer
    rationals when exact classification matters).
    """
    if d <= 4:
        raise CriticalError(
            f"the exponent calculus needs dimension at least 5, got d={d}")
    mf = _as_fraction(m)
    if mf <= 1:
        raise CriticalError(f"m must exceed 1, got {mf}")
    theta = mf * (d - 4) / (2 * d * (mf - 1))
    one_minus_theta = 1 - theta
    if mf < 2:
        p_star = Fraction(2 * (d - 2 * mf), d * (2 - mf))
    else:
        p_star = Fraction(2)
    q_star = min(Fraction(2), p_star)
    crit = Fraction(2) - Fraction(4, d)
    if mf > crit:
        regime = "subcritical"
    elif mf == crit:
        regime = "critical"
    else:
        regime = "supercritical"
    if mf >= 2:
        uniform_l2 = True
    else:
        uniform_l2 = (4 * mf + 2 * (mf - 1) * d) / (d * (2 - mf)) >= 2
    # consistency relations, meaningful on the 1 < m < 2 branch
    if mf < 2:
        check1 = (mf < crit) or (4 * mf / (d * (2 - mf)) > 1)
        check2 = ((4 * mf - 2 * (mf - 1) * d) / (2 * d * (2 - mf)) < 1) == (mf < Fraction(d, 2))
    else:
        check1 = True
        check2 = True
    return CriticalExponents(
        m=mf, d=d, theta=theta, one_minus_theta=one_minus_theta,
        p_star=p_star, q_star=q_star, regime=regime,
        uniform_L2_ok=uniform_l2, relation_checks=(check1, check2))


# ---------------------------------------------------------------------------
# reduced functional and the scaling family
# ---------------------------------------------------------------------------


def eval_L0(u: DensityView, v: Field, w: Field, p: ModelParams) -> float:
    """Lyapunov value with the decay-rate terms dropped."""
    uc = u.clamped()
    hw = u.grid.cell_volume
    internal = float((uc ** p.m).sum() * hw) / (p.m - 1.0)
    lap_v = laplacian(v)
    resid = Field(v.grid, p.kap1 * lap_v.values + w.values)
    return (internal - inner(u.field, v)
            + 0.5 * p.kap1 * p.kap2 * inner(lap_v, lap_v)
            + 0.5 * (p.eps2 / p.eps1) * inner(resid, resid))


def _spectral_resample(f: Field, lam: float) -> np.ndarray:
    """Evaluate the trigonometric interpolant of f at the points lam*x."""
    g = f.grid
    fhat = np.fft.fftn(f.array)
    x = g.axis_coords()
    k = g.wavenumbers()
    # E[i, k] = exp(i k (lam*x_i - offset)) / n
    phase = np.exp(1j * np.outer(lam * x - g.origin_offset, k)) / g.n
    out = fhat
    for axis in range(g.d):
        out = np.moveaxis(np.tensordot(phase, out, axes=(1, axis)), 0, axis)
    return np.real(out)


def _support_extent(f: Field, rel_floor: float = 1e-9) -> float:
    """Largest per-axis centered coordinate carrying non-negligible values."""
    g = f.grid
    mags = np.abs(f.array)
    floor = rel_floor * float(mags.max(initial=0.0))
    x = np.abs(g.centered_axis_coords())
    extent = 0.0
    for axis in range(g.d):
        profile = np.moveaxis(mags, axis, 0).reshape(g.n, -1).max(axis=1)
        hit = profile > floor
        if hit.any():
            extent = max(extent, float(x[hit].max()))
    return extent


def _genuine_mask(g: GridSpec, lam: float) -> np.ndarray:
    """Cells whose rescaled evaluation point stays within one period.

    Evaluating a periodic interpolant at lam*x folds points with
    |lam*x| > L/2 into neighboring periods, producing spurious copies of a
    compactly supported profile; those cells are zeroed.
    """
    keep1d = np.abs(lam * g.centered_axis_coords()) < 0.5 * g.box_length
    mask = np.ones(g.shape, dtype=bool)
    for axis in range(g.d):
        shape = [1] * g.d
        shape[axis] = g.n
        mask &= keep1d.reshape(shape)
    return mask


def scaling_family(U: Field, V: Field, W: Field,
                   lam: float) -> tuple[Field, Field, Field]:
    """Rescale a compactly supported triple by the blow-up family.

    Component powers are (d, d-4, d-2); the fields are evaluated at lam*x
    by spectral interpolation, and cells whose evaluation point leaves the
    fundamental period are zeroed so no periodic copy survives.  Raises if
    the supports are too wide for the requested scale.
    """
    if not lam > 0.0:
        raise CriticalError(f"scale factor must be positive, got {lam}")
    g = U.grid
    d = g.d
    extent = max(_support_extent(U), _support_extent(V), _support_extent(W))
    if 2.0 * extent * max(1.0, 1.0 / lam) > g.box_length:
        raise CriticalError(
            f"rescaled support would wrap: diameter {2 * extent:.3g}, "
            f"scale {lam}, box {g.box_length}")
    if lam == 1.0:
        return U, V, W
    mask = _genuine_mask(g, lam) if lam > 1.0 else 1.0
    u_l = lam ** d * _spectral_resample(U, lam) * mask
    v_l = lam ** (d - 4) * _spectral_resample(V, lam) * mask
    w_l = lam ** (d - 2) * _spectral_resample(W, lam) * mask
    return (Field(g, u_l.reshape(-1)), Field(g, v_l.reshape(-1)),
            Field(g, w_l.reshape(-1)))


# ---------------------------------------------------------------------------
# sharp-constant estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CriticalMassEstimate:
    """Converged (or best) estimate of the sharp constant and mass threshold."""

    C_star_sq: float
    M_star: float
    iterations: int
    fixed_point_residual: float
    grid: GridSpec
    converged: bool
    interpretation: str
    ratio_history: tuple[float, ...] = ()


def mass_threshold_from_constant(c_star_sq: float, d: int,
                                 kap1: float, kap2: float) -> float:
    """Threshold mass from the sharp constant; the estimator and any
    recomputation must route through this single expression."""
    return ((2.0 * d / (d - 4.0)) * kap1 * kap2 / c_star_sq) ** (d / 4.0)


def _denominator_exponents(m: float, d: int) -> tuple[float, float]:
    """Exponents (on the L1 and Lm norms) of the quotient denominator.

    These are twice the interpolation split, so they sum to 2 and the
    quotient is invariant under density rescaling.
    """
    two_theta = m * (d - 4.0) / (d * (m - 1.0))
    return 2.0 - two_theta, two_theta


def ratio_value(u: DensityView, m: float) -> float:
    """Quotient value at a density, with the optimal dual field folded in.

    The numerator pairs the mean-free part of u against its inverse
    bilaplacian; constants are annihilated by that pairing.
    """
    g = u.grid
    if g.d <= 4:
        raise CriticalError("the quotient needs dimension at least 5")
    centered = Field(g, u.values - float(u.values.mean()))
    v = biharmonic_inverse(centered)
    num = inner(u.field, v)
    e1, em = _denominator_exponents(m, g.d)
    return num / (lp_norm(u.field, 1.0) ** e1 * lp_norm(u.field, m) ** em)


def _ratio_given_v(vals: np.ndarray, v: np.ndarray, hw: float, m: float,
                   e1: float, em: float, dvsq: float) -> float:
    """Quotient at fixed dual field: (uv-pairing)^2 over norms and |Lap v|^2."""
    num = float((vals * v).sum()) * hw
    if num <= 0.0:
        return -np.inf
    l1 = float(vals.sum()) * hw
    lm = (float((vals ** m).sum()) * hw) ** (1.0 / m)
    return num ** 2 / (l1 ** e1 * lm ** em * dvsq)


def _family_member(v: np.ndarray, lam: float, m: float, mass: float,
                   hw: float) -> np.ndarray | None:
    pos = np.maximum(v - lam, 0.0)
    if not (pos > 0.0).any():
        return None
    vals = pos ** (1.0 / (m - 1.0))
    total = vals.sum() * hw
    if not np.isfinite(total) or total <= 0.0:
        return None
    return vals * (mass / total)


def estimate_C_star(grid: GridSpec, p: ModelParams, init_u: DensityView,
                    max_outer: int = 200, tol: float = 1e-6) -> CriticalMassEstimate:
    """Alternating maximization of the sharp-constant quotient.

    v-block: exact inverse-bilaplacian optimum for the current density.
    u-block: exact line search over the thresholded power family delivered
    by the first-order condition, restricted to nonnegative mass-M fields.
    The achieved quotient is therefore nondecreasing across iterations.

    Uniform initial densities are degenerate (their centered part vanishes),
    so they are perturbed by a single low-frequency mode before iterating.
    """
    d = grid.d
    if d <= 4:
        raise CriticalError(f"estimator needs dimension at least 5, got d={d}")
    m = p.m
    e1, em = _denominator_exponents(m, d)
    hw = grid.cell_volume
    mass = p.M

    vals = init_u.clamped()
    vals = vals * (mass / (vals.sum() * hw))
    spread = vals.max() - vals.min()
    if spread <= 1e-12 * max(vals.max(), 1e-300):
        x = grid.axis_coords()
        shape = [1] * d
        shape[0] = grid.n
        mode = 1.0 + 0.1 * np.cos(2.0 * np.pi * x / grid.box_length).reshape(shape)
        vals = (vals.reshape(grid.shape) * mode).reshape(-1)
        vals = vals * (mass / (vals.sum() * hw))

    best_ratio = -np.inf
    residual = np.inf
    history: list[float] = []
    iterations = 0
    converged = False
    for it in range(1, max_outer + 1):
        iterations = it
        centered = Field(grid, vals - vals.mean())
        v_field = biharmonic_inverse(centered)
        v = v_field.values
        dvsq = inner(centered, v_field)  # equals |Lap v|^2 by construction
        if dvsq <= 0.0:
            raise CriticalError("degenerate iterate: centered density vanished")

        # exact 1D search over the thresholded family
        lo = float(v.min()) - (float(v.max()) - float(v.min()))
        hi = float(v.max())
        cands = np.linspace(lo, hi, 80, endpoint=False)
        scores = []
        for lam in cands:
            member = _family_member(v, lam, m, mass, hw)
            scores.append(-np.inf if member is None
                          else _ratio_given_v(member, v, hw, m, e1, em, dvsq))
        j = int(np.argmax(scores))
        a = cands[max(j - 1, 0)]
        b = cands[min(j + 1, len(cands) - 1)]
        gr = (np.sqrt(5.0) - 1.0) / 2.0
        x1 = b - gr * (b - a)
        x2 = a + gr * (b - a)
        for _ in range(40):
            m1 = _family_member(v, x1, m, mass, hw)
            m2 = _family_member(v, x2, m, mass, hw)
            s1 = -np.inf if m1 is None else _ratio_given_v(m1, v, hw, m, e1, em, dvsq)
            s2 = -np.inf if m2 is None else _ratio_given_v(m2, v, hw, m, e1, em, dvsq)
            if s1 < s2:
                a = x1
                x1, x2 = x2, a + gr * (b - a)
            else:
                b = x2
                x2, x1 = x1, b - gr * (b - a)
        lam_best = 0.5 * (a + b)
        member = _family_member(v, lam_best, m, mass, hw)
        cand_score = (-np.inf if member is None
                      else _ratio_given_v(member, v, hw, m, e1, em, dvsq))
        cur_score = _ratio_given_v(vals, v, hw, m, e1, em, dvsq)
        new_vals = member if cand_score >= cur_score else vals

        # defect of the stationarity relation, with the previous iterate's
        # centered density standing in for the bilaplacian image of v
        scale = dvsq / (float((new_vals * v).sum()) * hw)
        lhs = scale * (new_vals - new_vals.mean())
        rhs = vals - vals.mean()
        residual = float(np.sqrt(((lhs - rhs) ** 2).sum()
                                 / max((rhs ** 2).sum(), 1e-300)))
        vals = new_vals
        best_ratio = max(best_ratio, ratio_value(
            DensityView(Field(grid, vals)), m))
        history.append(best_ratio)
        if residual <= tol:
            converged = True
            break

    c_star_sq = best_ratio
    interp = "critical-mass" if p.regime == "critical" else "ratio-only"
    return CriticalMassEstimate(
        C_star_sq=c_star_sq,
        M_star=mass_threshold_from_constant(c_star_sq, d, p.kap1, p.kap2),
        iterations=iterations,
        fixed_point_residual=residual,
        grid=grid,
        converged=converged,
        interpretation=interp,
        ratio_history=tuple(history),
    )
