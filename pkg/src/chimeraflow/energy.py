"""Functionals, dissipation terms and the per-run energy ledger.

The three sub-step energies, the composite Lyapunov value with its term
breakdown, the discrete time-difference operators, the per-step dissipation
D, and the two audits (per-step telescoping and the time-integrated
inequality) all live here.  Ledgers serialize to CSV with a frozen column
order so downstream plotting never breaks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .grid import (
    DensityView,
    Field,
    gradient,
    inner,
    integrate,
    laplacian,
    lp_norm,
    second_moment,
    sobolev_norms,
    vector_lp_norm,
)
from .params import ModelParams


class EnergyError(ValueError):
    """Raised on ledger misuse (grid mismatch, empty audits, bad CSV)."""


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------


def _power_integral(u: DensityView, m: float) -> float:
    vals = u.clamped()
    w = u.grid.cell_volume
    return float((vals ** m).sum() * w)


def eval_E(u: DensityView, v: Field, p: ModelParams) -> float:
    """Internal plus potential energy of the density sub-step."""
    return _power_integral(u, p.m) / (p.m - 1.0) - inner(u.field, v)


def eval_F(v: Field, w: Field, p: ModelParams) -> float:
    grad_sq = sum(inner(gi, gi) for gi in gradient(v))
    return 0.5 * (p.kap1 * grad_sq + p.gam1 * inner(v, v)) - inner(v, w)


def eval_G(w: Field, u: DensityView, p: ModelParams) -> float:
    grad_sq = sum(inner(gi, gi) for gi in gradient(w))
    return 0.5 * (p.kap2 * grad_sq + p.gam2 * inner(w, w)) - inner(u.field, w)


@dataclass(frozen=True)
class EnergyReport:
    """Composite Lyapunov value together with its six-term breakdown."""

    E: float
    F: float
    G: float
    internal: float
    potential: float
    biharmonic: float
    gradient: float
    l2: float
    residual_sq: float

    @property
    def L(self) -> float:
        return (self.internal + self.potential + self.biharmonic
                + self.gradient + self.l2 + self.residual_sq)


def field_residual(v: Field, w: Field, p: ModelParams) -> Field:
    """kap1*Lap(v) - gam1*v + w, the quantity whose square enters L."""
    lap = laplacian(v)
    return Field(v.grid, p.kap1 * lap.values - p.gam1 * v.values + w.values)


def eval_L(u: DensityView, v: Field, w: Field, p: ModelParams) -> EnergyReport:
    lap_v = laplacian(v)
    grad_v_sq = sum(inner(gi, gi) for gi in gradient(v))
    resid = field_residual(v, w, p)
    return EnergyReport(
        E=eval_E(u, v, p),
        F=eval_F(v, w, p),
        G=eval_G(w, u, p),
        internal=_power_integral(u, p.m) / (p.m - 1.0),
        potential=-inner(u.field, v),
        biharmonic=0.5 * p.kap1 * p.kap2 * inner(lap_v, lap_v),
        gradient=0.5 * (p.gam1 * p.kap2 + p.gam2 * p.kap1) * grad_v_sq,
        l2=0.5 * p.gam1 * p.gam2 * inner(v, v),
        residual_sq=0.5 * (p.eps2 / p.eps1) * inner(resid, resid),
    )


# ---------------------------------------------------------------------------
# discrete time-difference operators and the dissipation term
# ---------------------------------------------------------------------------


def _require_same_grid(a: Field, b: Field) -> None:
    if a.grid != b.grid:
        raise EnergyError("fields live on different grids")


def discrete_dt(z_now: Field, z_prev: Field, tau: float) -> Field:
    """(z_now - z_prev)/tau."""
    _require_same_grid(z_now, z_prev)
    return Field(z_now.grid, (z_now.values - z_prev.values) / tau)


def discrete_dt_bar(z_now: Field, z_prev: Field, tau: float) -> Field:
    """(z_now + z_prev)/tau."""
    _require_same_grid(z_now, z_prev)
    return Field(z_now.grid, (z_now.values + z_prev.values) / tau)


def eval_D(v_now: Field, v_prev: Field, v_prev2: Field, p: ModelParams) -> float:
    """Per-step dissipation: four squared-norm terms with nonnegative weights.

    v_prev2 is the state two steps back; at the first step it is the backward
    extension supplied by the scheme module.
    """
    tau = p.tau
    dt_now = discrete_dt(v_now, v_prev, tau)
    dt_prev = discrete_dt(v_prev, v_prev2, tau)
    dt2 = discrete_dt(dt_now, dt_prev, tau)
    grad_dt_sq = sum(inner(gi, gi) for gi in gradient(dt_now))
    lap_dt = laplacian(dt_now)
    return (
        0.5 * p.eps1 * p.eps2 * tau ** 2 * inner(dt2, dt2)
        + 0.5 * p.kap1 * p.kap2 * tau ** 2 * inner(lap_dt, lap_dt)
        + 0.5 * tau ** 2 * (2.0 * (p.eps1 * p.kap2 + p.eps2 * p.kap1) / tau
                            + (p.gam1 * p.kap2 + p.gam2 * p.kap1)) * grad_dt_sq
        + 0.5 * tau ** 2 * (2.0 * (p.gam1 * p.eps2 + p.gam2 * p.eps1) / tau
                            + p.gam1 * p.gam2) * inner(dt_now, dt_now)
    )


def h1_increment_sq(v_now: Field, v_prev: Field, p: ModelParams) -> float:
    """Squared mixed-H1 increment of the relaxation field between steps."""
    diff = Field(v_now.grid, v_now.values - v_prev.values)
    grad_sq = sum(inner(gi, gi) for gi in gradient(diff))
    return ((p.eps1 * p.kap2 + p.eps2 * p.kap1) * grad_sq
            + (p.gam1 * p.eps2 + p.gam2 * p.eps1 + p.eps1 * p.eps2)
            * inner(diff, diff))


# ---------------------------------------------------------------------------
# per-step records and the ledger
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "k", "time", "w2_sq_over_2tau", "D", "L_before", "L_after",
    "slope_lhs", "slope_rhs", "dH1_sq",
    "u_L1", "u_Lm", "u_L2", "grad_um_norm",
    "v_W22", "v_W32", "w_H1", "w_W22", "second_moment",
)


@dataclass(frozen=True)
class StepRecord:
    """One accepted step of the scheme with its energy bookkeeping.

    ``resid_l2_sq`` and ``resid_grad_sq`` feed the time-integrated audit and
    are not serialized; everything else maps onto the CSV columns.
    """

    k: int
    time: float
    w2_sq_over_2tau: float
    D: float
    L_before: float
    L_after: float
    slope_lhs: float
    slope_rhs: float
    dH1_sq: float
    norms: dict[str, float]
    resid_l2_sq: float = 0.0
    resid_grad_sq: float = 0.0
    dgvi_fisher_integral: float | None = None

    def csv_row(self) -> list[str]:
        vals = [self.k, self.time, self.w2_sq_over_2tau, self.D,
                self.L_before, self.L_after, self.slope_lhs, self.slope_rhs,
                self.dH1_sq]
        vals += [self.norms[key] for key in CSV_COLUMNS[9:]]
        return [format(v, ".17g") if not isinstance(v, int) else str(v)
                for v in vals]


def norm_bundle(u: DensityView, v: Field, w: Field, p: ModelParams) -> dict[str, float]:
    """The diagnostic norm collection logged each step."""
    um = Field(u.grid, u.clamped() ** p.m)
    grad_um = gradient(um)
    if p.d > 1:
        grad_norm = vector_lp_norm(grad_um, p.d / (p.d - 1.0))
    else:
        grad_norm = float(max(np.abs(g.values).max(initial=0.0) for g in grad_um))
    v_norms = sobolev_norms(v)
    w_norms = sobolev_norms(w)
    return {
        "u_L1": lp_norm(u.field, 1.0),
        "u_Lm": lp_norm(u.field, p.m),
        "u_L2": lp_norm(u.field, 2.0),
        "grad_um_norm": grad_norm,
        "v_W22": v_norms["W22"],
        "v_W32": v_norms["W32"],
        "w_H1": w_norms["H1"],
        "w_W22": w_norms["W22"],
        "second_moment": second_moment(u),
    }


@dataclass
class EnergyLedger:
    """Ordered step records plus the initial energy report.

    Appending enforces the chaining invariant: each record's L_before must
    equal the previous record's L_after bitwise.
    """

    initial: EnergyReport
    records: list[StepRecord] = dc_field(default_factory=list)
    meta: dict[str, str] = dc_field(default_factory=dict)

    def append(self, rec: StepRecord) -> None:
        if self.records:
            prev = self.records[-1]
            if rec.L_before != prev.L_after:
                raise EnergyError(
                    f"ledger chaining broken at k={rec.k}: "
                    f"{rec.L_before!r} != {prev.L_after!r}")
        elif rec.L_before != self.initial.L:
            raise EnergyError("first record does not chain to the initial energy")
        self.records.append(rec)


def write_ledger_csv(ledger: EnergyLedger, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key, val in ledger.meta.items():
            fh.write(f"# {key}={val}\n")
        fh.write(f"# L_initial={ledger.initial.L:.17g}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in ledger.records:
            writer.writerow(rec.csv_row())


def read_ledger_csv(path: str | Path) -> tuple[list[dict[str, float]], dict[str, str]]:
    """Parse a ledger CSV back into per-step dicts plus the '#' metadata."""
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[dict[str, float]] = []
    with path.open() as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition("=")
            meta[key.strip()] = val
        else:
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None:
        raise EnergyError("ledger CSV has no header row")
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise EnergyError(f"ledger CSV missing columns: {missing}")
    for row in reader:
        rec = {name: float(val) for name, val in zip(header, row)}
        rows.append(rec)
    return rows, meta


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------


def default_tol_audit(l_initial: float) -> float:
    return 1e-3 * abs(l_initial)


def audit_prop_ED(ledger: EnergyLedger, tol_audit: float | None = None) -> dict:
    """Telescoping audit: sum of Wasserstein increments and dissipation
    against the total Lyapunov drop.  Raw numbers are always reported;
    the tolerance only enters the pass flag."""
    if not ledger.records:
        raise EnergyError("cannot audit an empty ledger")
    lhs = sum(r.w2_sq_over_2tau + r.D for r in ledger.records)
    rhs = ledger.records[0].L_before - ledger.records[-1].L_after
    if tol_audit is None:
        tol_audit = default_tol_audit(ledger.records[0].L_before)
    gap = rhs - lhs
    return {"lhs": lhs, "rhs": rhs, "gap": gap, "tol": tol_audit,
            "pass": lhs <= rhs + tol_audit}


def _dgvi_quadrature(points: list, tau: float) -> float:
    """Integrate slope_lhs^2 over sigma in (0, tau] from sampled sub-steps.

    Trapezoid between samples; the unsampled left end is filled with the
    smallest-sigma value.
    """
    if not points:
        return 0.0
    pts = sorted(points, key=lambda q: q.sigma)
    sig = [q.sigma for q in pts]
    val = [q.slope_lhs ** 2 for q in pts]
    total = sig[0] * val[0]
    for i in range(1, len(pts)):
        total += 0.5 * (val[i - 1] + val[i]) * (sig[i] - sig[i - 1])
    if sig[-1] < tau:
        total += (tau - sig[-1]) * val[-1]
    return total


def audit_energy_inequality(ledger: EnergyLedger, dgvi_points: dict[int, list],
                            p: ModelParams,
                            tol_audit: float | None = None) -> dict:
    """Time-integrated inequality audit.

    Evaluates the slope integrals (both the half-weighted pair and the
    unit-coefficient single-integral variant) plus the two residual
    integrals, and compares against the total Lyapunov drop.  Steps with no
    interpolation samples contribute zero to the interpolated integral,
    which only weakens the left side.
    """
    if not ledger.records:
        raise EnergyError("cannot audit an empty ledger")
    tau = p.tau
    fisher = sum(tau * r.slope_lhs ** 2 for r in ledger.records)
    dgvi = sum(_dgvi_quadrature(dgvi_points.get(r.k, []), tau)
               for r in ledger.records)
    grad_term = ((p.eps1 * p.kap2 + p.eps2 * p.kap1) / p.eps1 ** 2
                 * sum(tau * r.resid_grad_sq for r in ledger.records))
    l2_term = ((p.gam1 * p.eps2 + p.gam2 * p.eps1) / p.eps1 ** 2
               * sum(tau * r.resid_l2_sq for r in ledger.records))
    rhs = ledger.records[0].L_before - ledger.records[-1].L_after
    lhs_half = 0.5 * fisher + 0.5 * dgvi + grad_term + l2_term
    lhs_unit = fisher + grad_term + l2_term
    if tol_audit is None:
        tol_audit = default_tol_audit(ledger.records[0].L_before)
    return {
        "fisher_integral": fisher,
        "dgvi_integral": dgvi,
        "grad_residual_integral": grad_term,
        "l2_residual_integral": l2_term,
        "lhs_half_weighted": lhs_half,
        "lhs_unit_coefficient": lhs_unit,
        "rhs": rhs,
        "tol": tol_audit,
        "pass": lhs_half <= rhs + tol_audit,
    }


def check_lyapunov_monotone(rec: StepRecord, tol_step: float | None = None) -> bool:
    """Per-step monotonicity check of the Lyapunov value."""
    if tol_step is None:
        tol_step = 1e-6 * (1.0 + abs(rec.L_before))
    return rec.L_after <= rec.L_before + tol_step


def audit_from_rows(rows: list[dict[str, float]],
                    tol_audit: float | None = None,
                    tol_step: float | None = None) -> dict:
    """Re-run the ledger audits on parsed CSV rows (persisted artifacts)."""
    if not rows:
        raise EnergyError("cannot audit an empty ledger")
    for prev, cur in zip(rows[:-1], rows[1:]):
        if not math.isclose(cur["L_before"], prev["L_after"],
                            rel_tol=0.0, abs_tol=0.0):
            return {"pass": False,
                    "reason": f"chaining broken at k={int(cur['k'])}"}
    l0 = rows[0]["L_before"]
    if tol_audit is None:
        tol_audit = default_tol_audit(l0)
    for row in rows:
        ts = tol_step if tol_step is not None else 1e-6 * (1.0 + abs(row["L_before"]))
        if row["L_after"] > row["L_before"] + ts:
            return {"pass": False,
                    "reason": f"Lyapunov increase at k={int(row['k'])}"}
    lhs = sum(r["w2_sq_over_2tau"] + r["D"] for r in rows)
    rhs = l0 - rows[-1]["L_after"]
    return {"lhs": lhs, "rhs": rhs, "gap": rhs - lhs, "tol": tol_audit,
            "pass": lhs <= rhs + tol_audit, "reason": ""}
