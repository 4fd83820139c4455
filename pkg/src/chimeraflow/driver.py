"""Command-line driver: configured runs, the critical-mass estimator,
self-tests against independent oracles, and offline ledger audits.

Config files are flat key=value text with bracketed section headers.  All
numeric output is written with 17 significant digits so identical runs
produce bitwise-identical artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import critical, energy, oracles, scheme, transport
from .grid import (
    DensityView,
    Field,
    GridSpec,
    GridError,
    laplacian,
    mollify_initial,
    read_snapshot,
    write_snapshot,
)
from .params import InnerSolveConfig, ModelParams, ParamError
from .transport import OtConfig

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Raised when a run configuration cannot be parsed or validated."""


@dataclass(frozen=True)
class InitialCondition:
    kind: str
    center: tuple[float, ...] = (0.0,)
    width: float = 0.1
    center2: tuple[float, ...] = (0.2,)
    width2: float = 0.1
    weight2: float = 0.5
    path: str = ""


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    grid: GridSpec
    ot: OtConfig
    inner: InnerSolveConfig
    horizon_T: float
    snapshot_every: int
    output_dir: Path
    initial: InitialCondition
    v0_mode: str
    w0_mode: str
    seed: int
    mollify: bool
    dgvi_every: int
    dgvi_sigma_fractions: tuple[float, ...]
    estimate_max_outer: int
    estimate_tol: float

    @property
    def num_steps(self) -> int:
        return math.ceil(self.horizon_T / self.model.tau)


def _get(section, key, cast, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing required key '{key}'")
        return default
    raw = section[key].strip()
    if cast is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from '{raw}' for key '{key}'")
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse key '{key}' from '{raw}': {exc}") from exc


def _tuple_of_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def parse_config(path: str | Path) -> RunConfig:
    """Read the flat key=value config file into a validated RunConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    for sect in ("grid", "model", "run"):
        if sect not in cp:
            raise ConfigError(f"missing [{sect}] section")
    gsec, msec, rsec = cp["grid"], cp["model"], cp["run"]
    osec = cp["ot"] if "ot" in cp else {}
    isec = cp["inner"] if "inner" in cp else {}
    esec = cp["estimate"] if "estimate" in cp else {}

    try:
        grid = GridSpec(
            d=_get(gsec, "d", int, required=True),
            n=_get(gsec, "n", int, required=True),
            box_length=_get(gsec, "box_length", float, required=True),
        )
        model = ModelParams(
            m=_get(msec, "m", float, required=True),
            eps1=_get(msec, "eps1", float, 1.0),
            eps2=_get(msec, "eps2", float, 1.0),
            kap1=_get(msec, "kap1", float, 1.0),
            kap2=_get(msec, "kap2", float, 1.0),
            gam1=_get(msec, "gam1", float, 0.0),
            gam2=_get(msec, "gam2", float, 0.0),
            tau=_get(msec, "tau", float, required=True),
            M=_get(msec, "mass", float, 1.0),
            d=_get(gsec, "d", int, required=True),
        )
        eps_raw = osec.get("epsilon", "auto") if osec else "auto"
        epsilon = grid.spacing ** 2 if str(eps_raw).strip() == "auto" else float(eps_raw)
        ot = OtConfig(
            epsilon=epsilon,
            max_iter=_get(osec, "max_iter", int, 20000),
            marginal_tol=_get(osec, "marginal_tol", float, 1e-9),
            log_domain=_get(osec, "log_domain", bool, True),
            debias=_get(osec, "debias", bool, True),
        )
        inner = InnerSolveConfig(
            max_outer=_get(isec, "max_outer", int, 20000),
            tol_update=_get(isec, "tol_update", float, 1e-8),
            tol_obj_rel=_get(isec, "tol_obj_rel", float, 1e-8),
        )
    except (ParamError, GridError, transport.TransportError) as exc:
        raise ConfigError(str(exc)) from exc

    horizon = _get(rsec, "horizon_T", float, required=True)
    if not horizon > 0.0:
        raise ConfigError(f"horizon_T must be positive, got {horizon}")
    initial = InitialCondition(
        kind=_get(rsec, "initial_condition", str, "gaussian_bump"),
        center=_tuple_of_floats(rsec.get("ic_center", "0.0")),
        width=_get(rsec, "ic_width", float, 0.1),
        center2=_tuple_of_floats(rsec.get("ic_center2", "0.2")),
        width2=_get(rsec, "ic_width2", float, 0.1),
        weight2=_get(rsec, "ic_weight2", float, 0.5),
        path=_get(rsec, "ic_path", str, ""),
    )
    if initial.kind not in ("gaussian_bump", "two_bumps", "uniform", "from_file"):
        raise ConfigError(f"unknown initial_condition '{initial.kind}'")
    sig_raw = rsec.get("dgvi_sigmas", "0.25, 0.5, 1.0")
    return RunConfig(
        model=model, grid=grid, ot=ot, inner=inner,
        horizon_T=horizon,
        snapshot_every=_get(rsec, "snapshot_every", int, 0),
        output_dir=Path(rsec.get("output_dir", "out")),
        initial=initial,
        v0_mode=_get(rsec, "v0_mode", str, "zero"),
        w0_mode=_get(rsec, "w0_mode", str, "zero"),
        seed=_get(rsec, "seed", int, 0),
        mollify=_get(rsec, "mollify", bool, True),
        dgvi_every=_get(rsec, "dgvi_every", int, 0),
        dgvi_sigma_fractions=_tuple_of_floats(sig_raw),
        estimate_max_outer=_get(esec, "max_outer", int, 200),
        estimate_tol=_get(esec, "tol", float, 1e-6),
    )


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def _radial_sq(grid: GridSpec, center: tuple[float, ...]) -> np.ndarray:
    from .grid import _wrap_displacement

    if len(center) == 1 and grid.d > 1:
        center = center * grid.d
    if len(center) != grid.d:
        raise ConfigError(f"center needs {grid.d} coordinates, got {len(center)}")
    x = grid.axis_coords()
    total = np.zeros(grid.shape)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.n
        dx = _wrap_displacement(x - center[axis], grid.box_length)
        total = total + (dx ** 2).reshape(shape)
    return total


def make_initial_density(grid: GridSpec, initial: InitialCondition,
                         mass: float) -> DensityView:
    if initial.kind == "uniform":
        vals = np.ones(grid.num_cells)
    elif initial.kind == "gaussian_bump":
        vals = np.exp(-_radial_sq(grid, initial.center)
                      / (2.0 * initial.width ** 2)).reshape(-1)
    elif initial.kind == "two_bumps":
        vals = (np.exp(-_radial_sq(grid, initial.center)
                       / (2.0 * initial.width ** 2))
                + initial.weight2
                * np.exp(-_radial_sq(grid, initial.center2)
                         / (2.0 * initial.width2 ** 2))).reshape(-1)
    elif initial.kind == "from_file":
        field, _ = read_snapshot(initial.path)
        if field.grid != grid:
            raise ConfigError("initial-condition snapshot grid mismatch")
        vals = np.maximum(field.values, 0.0)
    else:
        raise ConfigError(f"unknown initial condition '{initial.kind}'")
    return DensityView(Field(grid, vals)).renormalized(mass)


def make_companion_field(grid: GridSpec, mode: str, u0: DensityView,
                         p: ModelParams, which: str, path: str = "") -> Field:
    if mode == "zero":
        return Field.zeros(grid)
    if mode == "steady":
        if p.gam1 <= 0 or p.gam2 <= 0:
            raise ConfigError("steady companion fields need positive decay rates")
        ubar = p.M / grid.box_length ** grid.d
        val = ubar / p.gam2 if which == "w" else ubar / (p.gam1 * p.gam2)
        return Field.constant(grid, val)
    if mode == "from_file":
        field, _ = read_snapshot(path)
        return field
    raise ConfigError(f"unknown companion field mode '{mode}'")


# ---------------------------------------------------------------------------
# run command
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _write_report(path: Path, entries: dict) -> None:
    lines = []
    for key, val in entries.items():
        if isinstance(val, float):
            lines.append(f"{key}={_fmt(val)}")
        else:
            lines.append(f"{key}={val}")
    path.write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def _dump_failure(outdir: Path, state: scheme.State, ledger: energy.EnergyLedger,
                  message: str) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    write_snapshot(state.u.field, outdir / f"abort_k{state.k:06d}_u",
                   time=state.time, mass=state.u.mass)
    write_snapshot(state.v, outdir / f"abort_k{state.k:06d}_v", time=state.time)
    write_snapshot(state.w, outdir / f"abort_k{state.k:06d}_w", time=state.time)
    if ledger.records:
        energy.write_ledger_csv(ledger, outdir / "ledger_partial.csv")
    (outdir / "abort.txt").write_text(message + "\n")


def cmd_run(cfg: RunConfig, quiet: bool = False) -> int:
    """Integrate the scheme over the horizon, writing ledger, snapshots and
    audit summaries.  Exit status 0 means every hard invariant held."""
    def say(msg: str) -> None:
        if not quiet:
            print(msg)

    p = cfg.model
    grid = cfg.grid
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)

    u_raw = make_initial_density(grid, cfg.initial, p.M)
    v0 = make_companion_field(grid, cfg.v0_mode, u_raw, p, "v")
    w0 = make_companion_field(grid, cfg.w0_mode, u_raw, p, "w")
    u0 = mollify_initial(u_raw, p.tau) if cfg.mollify else u_raw
    gate = scheme.initial_energy_gate(u_raw, u0, v0, w0, p)
    if not gate["pass"]:
        print(f"refusing to run: mollified initial energy {gate['L_mollified']!r} "
              f"exceeds raw {gate['L_raw']!r} + 1; shrink tau", file=sys.stderr)
        return EXIT_CONFIG

    state = scheme.State(u=u0, v=v0, w=w0, k=0, time=0.0)
    initial_report = energy.eval_L(u0, v0, w0, p)
    label = ("within-theorem-hypotheses" if p.d >= 5
             else "outside-theorem-hypotheses-engineering-surrogate")
    ledger = energy.EnergyLedger(initial=initial_report, meta={
        "label": label,
        "regime": p.regime,
        "model": (f"m={_fmt(p.m)} eps1={_fmt(p.eps1)} eps2={_fmt(p.eps2)} "
                  f"kap1={_fmt(p.kap1)} kap2={_fmt(p.kap2)} gam1={_fmt(p.gam1)} "
                  f"gam2={_fmt(p.gam2)} tau={_fmt(p.tau)} mass={_fmt(p.M)}"),
        "grid": f"d={grid.d} n={grid.n} L={_fmt(grid.box_length)}",
        "ot": f"epsilon={_fmt(cfg.ot.epsilon)} debias={cfg.ot.debias}",
        "seed": str(cfg.seed),
    })

    n_steps = cfg.num_steps
    say(f"running {n_steps} steps on d={grid.d} n={grid.n} ({label})")
    if cfg.snapshot_every > 0:
        write_snapshot(state.u.field, outdir / "snap_k000000_u", 0.0, state.u.mass)
        write_snapshot(state.v, outdir / "snap_k000000_v", 0.0)
        write_snapshot(state.w, outdir / "snap_k000000_w", 0.0)

    dgvi_points: dict[int, list] = {}
    v_prev_prev = None
    t_start = time.time()
    for k in range(1, n_steps + 1):
        try:
            new_state, rec = scheme.full_step(state, p, cfg.ot, cfg.inner,
                                              v_prev_prev)
        except scheme.SchemeError as exc:
            _dump_failure(outdir, state, ledger, f"step {k} failed: {exc}")
            print(f"abort at step {k}: {exc}", file=sys.stderr)
            return EXIT_INVARIANT
        if not energy.check_lyapunov_monotone(rec):
            _dump_failure(outdir, new_state, ledger,
                          f"Lyapunov increased at step {k}: "
                          f"{rec.L_before!r} -> {rec.L_after!r}")
            print(f"abort at step {k}: Lyapunov increase", file=sys.stderr)
            return EXIT_INVARIANT
        if cfg.dgvi_every > 0 and k % cfg.dgvi_every == 0:
            sigmas = [f * p.tau for f in cfg.dgvi_sigma_fractions]
            v_new = new_state.v
            dgvi_points[k] = scheme.de_giorgi_interpolate(
                state, v_new, sigmas, p, cfg.ot, cfg.inner)
            rec = replace(rec, dgvi_fisher_integral=energy._dgvi_quadrature(
                dgvi_points[k], p.tau))
        ledger.append(rec)
        v_prev_prev = state.v
        state = new_state
        if cfg.snapshot_every > 0 and k % cfg.snapshot_every == 0:
            write_snapshot(state.u.field, outdir / f"snap_k{k:06d}_u",
                           state.time, state.u.mass)
            write_snapshot(state.v, outdir / f"snap_k{k:06d}_v", state.time)
            write_snapshot(state.w, outdir / f"snap_k{k:06d}_w", state.time)
    say(f"integration finished in {time.time() - t_start:.1f}s")

    energy.write_ledger_csv(ledger, outdir / "ledger.csv")
    ed = energy.audit_prop_ED(ledger)
    ei = energy.audit_energy_inequality(ledger, dgvi_points, p)
    _write_report(outdir / "audit.txt", {
        "prop_ED_lhs": ed["lhs"], "prop_ED_rhs": ed["rhs"],
        "prop_ED_gap": ed["gap"], "prop_ED_pass": ed["pass"],
        "energy_inequality_lhs_half": ei["lhs_half_weighted"],
        "energy_inequality_lhs_unit": ei["lhs_unit_coefficient"],
        "energy_inequality_rhs": ei["rhs"],
        "energy_inequality_pass": ei["pass"],
        "fisher_integral": ei["fisher_integral"],
        "dgvi_integral": ei["dgvi_integral"],
    })
    write_snapshot(state.u.field, outdir / "final_u", state.time, state.u.mass)
    write_snapshot(state.v, outdir / "final_v", state.time)
    write_snapshot(state.w, outdir / "final_w", state.time)
    ok = ed["pass"] and ei["pass"]
    say(f"audits: telescoping={'pass' if ed['pass'] else 'FAIL'} "
        f"integrated={'pass' if ei['pass'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# estimator command
# ---------------------------------------------------------------------------


def cmd_estimate_critical_mass(cfg: RunConfig, quiet: bool = False) -> int:
    grid = cfg.grid
    p = cfg.model
    if grid.d <= 4:
        print(f"critical-mass estimation needs d >= 5, got d={grid.d}",
              file=sys.stderr)
        return EXIT_CONFIG
    init = make_initial_density(grid, cfg.initial, p.M)
    try:
        est = critical.estimate_C_star(grid, p, init,
                                       max_outer=cfg.estimate_max_outer,
                                       tol=cfg.estimate_tol)
    except critical.CriticalError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report = cfg.output_dir / "critical_mass_report.txt"
    _write_report(report, {
        "C_star_sq": est.C_star_sq,
        "M_star": est.M_star,
        "residual": est.fixed_point_residual,
        "iterations": est.iterations,
        "converged": est.converged,
        "interpretation": est.interpretation,
        "grid": f"d={grid.d} n={grid.n} L={_fmt(grid.box_length)}",
        "m": _fmt(p.m), "kap1": _fmt(p.kap1), "kap2": _fmt(p.kap2),
    })
    if not quiet:
        print(f"C*^2 = {est.C_star_sq:.6g}  M* = {est.M_star:.6g}  "
              f"residual = {est.fixed_point_residual:.2e} "
              f"({'converged' if est.converged else 'NOT converged'})")
    return EXIT_OK if est.converged else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# selftest command
# ---------------------------------------------------------------------------


def _selftest_checks(seed: int, corrupt: str | None = None):
    """Yield (name, pass, detail) tuples for the oracle suite."""
    rng = np.random.default_rng(seed)

    g2 = GridSpec(d=2, n=8, box_length=1.0)
    f = Field(g2, rng.standard_normal(g2.num_cells))
    from .grid import gradient as spectral_gradient
    from .grid import helmholtz_solve, biharmonic_inverse

    lap_dense = oracles.dense_laplacian_matrix(g2) @ f.values
    lap_spec = laplacian(f).values
    err = np.abs(lap_dense - lap_spec).max() / np.abs(lap_dense).max()
    yield ("laplacian-vs-dense", err < 1e-10, f"rel {err:.2e}")

    sol = helmholtz_solve(1.3, 0.7, f)
    sol_dense = oracles.dense_helmholtz_solve(1.3, 0.7, f)
    err = np.abs(sol.values - sol_dense).max() / np.abs(sol_dense).max()
    yield ("helmholtz-vs-dense", err < 1e-10, f"rel {err:.2e}")

    f0 = Field(g2, f.values - f.values.mean())
    bi = biharmonic_inverse(f0)
    bi_dense = oracles.dense_biharmonic_solve(f0)
    err = np.abs(bi.values - bi_dense).max() / max(np.abs(bi_dense).max(), 1e-300)
    yield ("biharmonic-vs-dense", err < 1e-9, f"rel {err:.2e}")

    g16 = GridSpec(d=2, n=16, box_length=1.0)
    kx = 2.0 * np.pi / g16.box_length
    x = g16.axis_coords()
    smooth = Field(g16, np.add.outer(np.sin(kx * x), 0.5 * np.cos(kx * x)).reshape(-1))
    gs = spectral_gradient(smooth)[0].values
    gd = oracles.centered_difference_gradient(smooth, 0).reshape(-1)
    err = np.abs(gs - gd).max() / np.abs(gs).max()
    yield ("gradient-vs-centered-diff", err < 1e-2, f"rel {err:.2e}")

    g1 = GridSpec(d=1, n=48, box_length=1.0)
    x1 = g1.axis_coords()
    a = np.where(np.abs(x1 + 0.12) < 0.1, np.cos(np.pi * (x1 + 0.12) / 0.2) ** 2, 0.0)
    b = np.where(np.abs(x1 - 0.1) < 0.13, np.cos(np.pi * (x1 - 0.1) / 0.26) ** 2, 0.0)
    mu = DensityView(Field(g1, a + 1e-9))
    nu = DensityView(Field(g1, b + 1e-9)).renormalized(mu.mass)
    eps = g1.spacing ** 2 / 4
    if corrupt == "transport-kernel":
        eps = eps * 37.0
    res = transport.sinkhorn(mu, nu, OtConfig(epsilon=eps, max_iter=60000))
    wq = math.sqrt(transport.quantile_w2_1d(mu, nu))
    err = abs(res.w2 - wq) / wq
    yield ("sinkhorn-vs-quantile", err < 1e-3, f"rel {err:.2e}")

    lp = transport.lp_exact_w2(mu, nu)
    err = abs(res.w2 ** 2 - lp.cost) / lp.cost
    yield ("sinkhorn-vs-lp", err < 1e-2, f"rel {err:.2e}")

    g8 = GridSpec(d=1, n=8, box_length=1.0)
    prev = DensityView(Field(g8, rng.random(8) + 0.2)).renormalized(1.0)
    p8 = ModelParams(m=2.0, eps1=1.0, eps2=1.0, kap1=1.0, kap2=1.0,
                     gam1=0.1, gam2=0.1, tau=0.3, M=1.0, d=1)
    u_new, _ = scheme.u_step(prev, Field.zeros(g8),
                             p8, OtConfig(epsilon=g8.spacing ** 2 / 4,
                                          max_iter=60000), InnerSolveConfig())
    brute = oracles.jko_bruteforce(prev, Field.zeros(g8), p8, iters=200)
    f_ours = oracles.jko_objective_exact(u_new, prev, Field.zeros(g8), p8)
    f_orac = oracles.jko_objective_exact(brute, prev, Field.zeros(g8), p8)
    from .energy import eval_E
    gap = (f_ours - f_orac) / abs(eval_E(brute, Field.zeros(g8), p8))
    yield ("proximal-vs-bruteforce", gap < 1e-4, f"gap {gap:.2e}")

    za = Field(g2, rng.standard_normal(g2.num_cells))
    zb = Field(g2, rng.standard_normal(g2.num_cells))
    tau = 0.37
    dt = energy.discrete_dt(za, zb, tau)
    dtb = energy.discrete_dt_bar(za, zb, tau)
    from .grid import inner as field_inner
    lhs = field_inner(dt, dtb)
    rhs = (field_inner(za, za) - field_inner(zb, zb)) / tau ** 2
    err = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    yield ("difference-operator-identity", err < 1e-12, f"rel {err:.2e}")

    p2 = ModelParams(m=2.0, eps1=0.7, eps2=1.3, kap1=0.9, kap2=1.1,
                     gam1=0.2, gam2=0.4, tau=tau, M=1.0, d=2)
    zc = Field(g2, rng.standard_normal(g2.num_cells))
    d_val = energy.eval_D(za, zb, zc, p2)
    yield ("dissipation-nonnegative", d_val >= 0.0, f"D {d_val:.3e}")

    g6 = GridSpec(d=6, n=8, box_length=1.0)
    xx = g6.axis_coords()
    prof = np.cos(np.pi * xx / g6.box_length) ** 4
    cube = np.ones(g6.shape)
    for axis in range(6):
        shp = [1] * 6
        shp[axis] = g6.n
        cube = cube * prof.reshape(shp)
    U = Field(g6, cube.reshape(-1))
    lam = 1.5
    Ul, _, _ = critical.scaling_family(U, U, U, lam)
    from .grid import lp_norm
    mass_ratio = lp_norm(Ul, 1.0) / lp_norm(U, 1.0)
    yield ("scaling-mass-preserved", abs(mass_ratio - 1.0) < 0.01,
           f"ratio {mass_ratio:.5f}")


def cmd_selftest(seed: int = 0, quiet: bool = False,
                 corrupt: str | None = None) -> int:
    t0 = time.time()
    all_ok = True
    rows = []
    for name, ok, detail in _selftest_checks(seed, corrupt):
        rows.append((name, ok, detail))
        all_ok &= ok
    width = max(len(r[0]) for r in rows)
    if not quiet:
        for name, ok, detail in rows:
            print(f"{name:<{width}}  {'pass' if ok else 'FAIL'}  {detail}")
        print(f"selftest {'passed' if all_ok else 'FAILED'} "
              f"in {time.time() - t0:.1f}s")
    return EXIT_OK if all_ok else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# audit command
# ---------------------------------------------------------------------------


def cmd_audit(target: str | Path, quiet: bool = False) -> int:
    target = Path(target)
    ledger_path = target if target.is_file() else target / "ledger.csv"
    if not ledger_path.exists():
        print(f"no ledger found at {ledger_path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows, meta = energy.read_ledger_csv(ledger_path)
        result = energy.audit_from_rows(rows)
    except energy.EnergyError as exc:
        print(f"audit parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    snaps = sorted(ledger_path.parent.glob("*.hdr"))
    for snap in snaps:
        read_snapshot(snap.with_suffix(""))
    if not quiet:
        if result.get("reason"):
            print(f"audit FAILED: {result['reason']}")
        else:
            print(f"audit lhs={result['lhs']:.6g} rhs={result['rhs']:.6g} "
                  f"gap={result['gap']:.3g} -> "
                  f"{'pass' if result['pass'] else 'FAIL'} "
                  f"({len(snaps)} snapshots verified)")
    return EXIT_OK if result["pass"] else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chimeraflow",
        description="three-component coupled proximal flow: run, estimate, audit")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="integrate a configured run")
    run_p.add_argument("config")
    run_p.add_argument("--output-dir", default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--snapshot-every", type=int, default=None)

    est_p = sub.add_parser("estimate-critical-mass",
                           help="run the sharp-constant estimator")
    est_p.add_argument("config")
    est_p.add_argument("--output-dir", default=None)
    est_p.add_argument("--seed", type=int, default=None)

    sub.add_parser("selftest", help="run the oracle cross-check suite")

    audit_p = sub.add_parser("audit", help="re-audit persisted artifacts")
    audit_p.add_argument("target")

    args = parser.parse_args(argv)
    try:
        if args.command == "run" or args.command == "estimate-critical-mass":
            cfg = parse_config(args.config)
            if args.output_dir is not None:
                cfg = replace(cfg, output_dir=Path(args.output_dir))
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            if args.command == "run":
                if args.snapshot_every is not None:
                    cfg = replace(cfg, snapshot_every=args.snapshot_every)
                return cmd_run(cfg, quiet=args.quiet)
            return cmd_estimate_critical_mass(cfg, quiet=args.quiet)
        if args.command == "selftest":
            return cmd_selftest(quiet=args.quiet)
        if args.command == "audit":
            return cmd_audit(args.target, quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
