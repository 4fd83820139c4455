"""Periodic tensor grids, scalar fields and spectral operators.

Everything downstream (transport, the proximal scheme, the energy ledger)
computes on a d-dimensional torus of side ``box_length`` sampled on ``n``
points per axis.  Differential operators are Fourier-collocation, so they
are exact on band-limited fields and solves like ``helmholtz_solve`` are
exact per mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

# Largest admissible total cell count.  Beyond this the flat index no longer
# fits comfortably in a signed 64-bit int and nothing here is tractable anyway.
_MAX_CELLS = 2**62

# Relative tolerance for the "slightly negative density" allowance.
NEG_TOL_REL = 1e-12


class GridError(ValueError):
    """Raised for invalid grid construction or operator preconditions."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on [offset, offset + L)^d.

    ``spacing`` is always derived as L/n; it is never set independently so
    h * n == L holds exactly.
    """

    d: int
    n: int
    box_length: float
    origin_offset: float | None = None

    def __post_init__(self):
        if self.d < 1:
            raise GridError(f"dimension must be positive, got {self.d}")
        if self.n < 1:
            raise GridError(f"points per axis must be positive, got {self.n}")
        if not (self.box_length > 0.0 and math.isfinite(self.box_length)):
            raise GridError(f"box length must be positive, got {self.box_length}")
        if self.n ** self.d > _MAX_CELLS:
            raise GridError(f"grid with {self.n}^{self.d} cells exceeds index range")
        if self.origin_offset is None:
            object.__setattr__(self, "origin_offset", -self.box_length / 2.0)

    @property
    def spacing(self) -> float:
        return self.box_length / self.n

    @property
    def num_cells(self) -> int:
        return self.n ** self.d

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    def axis_coords(self) -> np.ndarray:
        """Physical coordinates along one axis (all axes are identical)."""
        return self.origin_offset + self.spacing * np.arange(self.n)

    def centered_axis_coords(self) -> np.ndarray:
        """Minimal-image displacement of each grid point from the box center."""
        x = self.axis_coords() - (self.origin_offset + self.box_length / 2.0)
        return _wrap_displacement(x, self.box_length)

    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers 2*pi*k/L along one axis, FFT ordering."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)


def _wrap_displacement(dx: np.ndarray, period: float) -> np.ndarray:
    """Map displacements into the minimal image (-period/2, period/2]."""
    out = np.remainder(dx + period / 2.0, period) - period / 2.0
    # remainder can land exactly on -period/2; fold it to +period/2
    out = np.where(out == -period / 2.0, period / 2.0, out)
    return out


@lru_cache(maxsize=32)
def _ksq_nd(d: int, n: int, box_length: float) -> np.ndarray:
    """|k|^2 on the full FFT grid, shape (n,)*d."""
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=box_length / n)
    total = np.zeros((n,) * d)
    for axis in range(d):
        shape = [1] * d
        shape[axis] = n
        total = total + (k ** 2).reshape(shape)
    return total


@dataclass(frozen=True)
class Field:
    """Scalar field sampled on a grid; values stored flat in row-major order."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            vals = vals.reshape(-1)
        if vals.size != self.grid.num_cells:
            raise GridError(
                f"field has {vals.size} values, grid has {self.grid.num_cells} cells"
            )
        if not np.all(np.isfinite(vals)):
            raise GridError("field contains non-finite values")
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def array(self) -> np.ndarray:
        """Read-only view shaped (n,)*d."""
        return self.values.reshape(self.grid.shape)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values)

    @staticmethod
    def constant(grid: GridSpec, c: float) -> "Field":
        return Field(grid, np.full(grid.num_cells, float(c)))

    @staticmethod
    def zeros(grid: GridSpec) -> "Field":
        return Field.constant(grid, 0.0)


@dataclass(frozen=True)
class DensityView:
    """A field regarded as a nonnegative density with its discrete mass.

    Small negative dips (spectral ringing, FFT round-off) are tolerated up to
    ``NEG_TOL_REL * max``; anything worse is rejected.  ``clamped`` hands out
    the nonnegative copy used in quotients; the raw field keeps the solver
    output untouched.
    """

    field: Field
    mass: float = field(init=False, default=0.0)

    def __post_init__(self):
        vals = self.field.values
        vmax = float(vals.max(initial=0.0))
        tol = NEG_TOL_REL * max(vmax, 1.0)
        vmin = float(vals.min(initial=0.0))
        if vmin < -tol:
            raise GridError(
                f"density has negative values (min {vmin:.3e}, tolerance {-tol:.3e})"
            )
        m = float(vals.sum()) * self.field.grid.cell_volume
        if not m > 0.0:
            raise GridError(f"density mass must be positive, got {m}")
        object.__setattr__(self, "mass", m)

    @property
    def grid(self) -> GridSpec:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def clamped(self) -> np.ndarray:
        """Nonnegative copy of the values."""
        return np.maximum(self.field.values, 0.0)

    def renormalized(self, mass: float) -> "DensityView":
        """Clamp to nonnegative and rescale to the requested mass exactly."""
        vals = self.clamped()
        total = vals.sum() * self.grid.cell_volume
        return DensityView(Field(self.grid, vals * (mass / total)))


def density_from_values(grid: GridSpec, values: np.ndarray) -> DensityView:
    return DensityView(Field(grid, values))


# ---------------------------------------------------------------------------
# spectral operators
# ---------------------------------------------------------------------------


def _fftn(f: Field) -> np.ndarray:
    return np.fft.fftn(f.array)


def gradient(f: Field) -> list[Field]:
    """Spectral partial derivatives of ``f`` along each axis.

    The Nyquist mode is dropped from each derivative (the usual convention
    for even real transforms); band-limited fields are differentiated to
    machine precision.
    """
    g = f.grid
    fhat = _fftn(f)
    k = g.wavenumbers()
    ik = 1j * k
    if g.n % 2 == 0:
        ik = ik.copy()
        ik[g.n // 2] = 0.0
    out = []
    for axis in range(g.d):
        shape = [1] * g.d
        shape[axis] = g.n
        dhat = fhat * ik.reshape(shape)
        out.append(Field(g, np.real(np.fft.ifftn(dhat)).reshape(-1)))
    return out


def laplacian(f: Field) -> Field:
    g = f.grid
    fhat = _fftn(f)
    ksq = _ksq_nd(g.d, g.n, g.box_length)
    return Field(g, np.real(np.fft.ifftn(-ksq * fhat)).reshape(-1))


def helmholtz_solve(alpha: float, kappa: float, rhs: Field) -> Field:
    """Solve (alpha - kappa*Laplacian) f = rhs on the torus.

    alpha > 0 keeps the zero mode invertible; each Fourier mode is divided
    by alpha + kappa|k|^2.
    """
    if not alpha > 0.0:
        raise GridError(f"helmholtz_solve requires alpha > 0, got {alpha}")
    if not kappa > 0.0:
        raise GridError(f"helmholtz_solve requires kappa > 0, got {kappa}")
    g = rhs.grid
    ksq = _ksq_nd(g.d, g.n, g.box_length)
    fhat = _fftn(rhs) / (alpha + kappa * ksq)
    return Field(g, np.real(np.fft.ifftn(fhat)).reshape(-1))


def biharmonic_inverse(rhs: Field) -> Field:
    """Solve (-Laplacian)^2 f = rhs with mean(f) = 0.

    The zero mode of the bilaplacian is singular on the torus, so the right
    hand side must have zero mean.
    """
    g = rhs.grid
    mean = float(rhs.values.mean())
    scale = float(np.abs(rhs.values).max(initial=0.0))
    if abs(mean) > 1e-12 * max(1.0, scale):
        raise GridError(f"biharmonic_inverse needs zero-mean input, mean={mean:.3e}")
    ksq = _ksq_nd(g.d, g.n, g.box_length)
    k4 = ksq ** 2
    fhat = _fftn(rhs)
    flat = k4.reshape(-1).copy()
    flat[0] = 1.0
    out = fhat.reshape(-1) / flat
    out[0] = 0.0
    return Field(g, np.real(np.fft.ifftn(out.reshape(g.shape))).reshape(-1))


# ---------------------------------------------------------------------------
# norms and moments
# ---------------------------------------------------------------------------


def lp_norm(f: Field, p: float) -> float:
    """h^d-weighted discrete L^p norm, p >= 1."""
    if p < 1.0:
        raise GridError(f"lp_norm requires p >= 1, got {p}")
    w = f.grid.cell_volume
    return float((np.abs(f.values) ** p).sum() * w) ** (1.0 / p)


def vector_lp_norm(fs: list[Field], p: float) -> float:
    """L^p norm of the pointwise Euclidean magnitude of a vector field."""
    if p < 1.0:
        raise GridError(f"vector_lp_norm requires p >= 1, got {p}")
    mag_sq = np.zeros_like(fs[0].values)
    for f in fs:
        mag_sq = mag_sq + f.values ** 2
    w = fs[0].grid.cell_volume
    return float((mag_sq ** (p / 2.0)).sum() * w) ** (1.0 / p)


def integrate(f: Field) -> float:
    return float(f.values.sum()) * f.grid.cell_volume


def inner(f: Field, g: Field) -> float:
    return float((f.values * g.values).sum()) * f.grid.cell_volume


def sobolev_norms(f: Field) -> dict[str, float]:
    """L2 / H1 / W22 / W32 diagnostics, Bessel form (1+|k|^2)^s in Fourier."""
    g = f.grid
    fhat = _fftn(f)
    ksq = _ksq_nd(g.d, g.n, g.box_length)
    power = np.abs(fhat) ** 2 * (g.cell_volume / g.num_cells)
    out = {}
    for name, s in (("L2", 0), ("H1", 1), ("W22", 2), ("W32", 3)):
        out[name] = float(np.sqrt(((1.0 + ksq) ** s * power).sum()))
    return out


def second_moment(u: DensityView) -> float:
    """h^d * sum |x|^2 u with minimal-image coordinates about the box center."""
    g = u.grid
    x = g.centered_axis_coords()
    xsq = x ** 2
    vals = u.values.reshape(g.shape)
    total = 0.0
    for axis in range(g.d):
        shape = [1] * g.d
        shape[axis] = g.n
        total += float((vals * xsq.reshape(shape)).sum())
    return total * g.cell_volume


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------


def _bump_kernel(grid: GridSpec, radius: float) -> np.ndarray:
    """Compactly supported smooth bump of the given radius, unit discrete mass."""
    x = grid.centered_axis_coords()
    rsq = np.zeros(grid.shape)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.n
        rsq = rsq + (x ** 2).reshape(shape)
    s = rsq / radius ** 2
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        vals = np.where(s < 1.0, np.exp(-1.0 / np.maximum(1.0 - s, 1e-300)), 0.0)
    if vals.sum() == 0.0:
        # radius below grid resolution: fall back to a single-cell kernel
        vals = np.zeros(grid.shape)
        vals[(grid.n // 2,) * grid.d] = 1.0
    vals = vals / (vals.sum() * grid.cell_volume)
    # recenter so index 0 carries the bump peak (convolution expects that)
    return np.roll(vals, shift=(-(grid.n // 2),) * grid.d, axis=tuple(range(grid.d)))


def mollify_initial(u0: DensityView, tau: float) -> DensityView:
    """Smooth initial data by circular convolution with a bump of bandwidth
    tau^(1/(2d)), then renormalize to the original mass."""
    if not tau > 0.0:
        raise GridError(f"mollify_initial requires tau > 0, got {tau}")
    g = u0.grid
    radius = tau ** (1.0 / (2.0 * g.d))
    kern = _bump_kernel(g, radius)
    conv = np.fft.irfftn(
        np.fft.rfftn(u0.clamped().reshape(g.shape))
        * np.fft.rfftn(kern) * g.cell_volume,
        s=g.shape,
    )
    conv = np.maximum(conv, 0.0)
    out = DensityView(Field(g, conv.reshape(-1)))
    return out.renormalized(u0.mass)


# ---------------------------------------------------------------------------
# snapshot format: <base>.hdr (text) + <base>.f64 (raw little-endian doubles)
# ---------------------------------------------------------------------------


def write_snapshot(f: Field, base: str | Path, time: float = 0.0,
                   mass: float | None = None) -> None:
    base = Path(base)
    g = f.grid
    if mass is None:
        mass = integrate(f)
    header = (
        f"dims={g.d} n={g.n} L={g.box_length!r} time={time!r} mass={mass!r}\n"
    )
    base.with_suffix(".hdr").write_text(header)
    f.values.astype("<f8").tofile(base.with_suffix(".f64"))


def read_snapshot(base: str | Path) -> tuple[Field, dict[str, float]]:
    base = Path(base)
    text = base.with_suffix(".hdr").read_text().strip()
    meta: dict[str, float] = {}
    for token in text.split():
        key, _, val = token.partition("=")
        meta[key] = float(val)
    grid = GridSpec(d=int(meta["dims"]), n=int(meta["n"]), box_length=meta["L"])
    raw = np.fromfile(base.with_suffix(".f64"), dtype="<f8")
    return Field(grid, raw), meta
