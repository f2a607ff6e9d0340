"""Velocity distribution profiles and the kernel parameter bundle.

Profiles are immutable value objects: an evaluation closure plus decay
metadata. All evaluation closures are numpy-vectorized over a trailing
velocity axis, i.e. they accept arrays of shape (..., d) and return (...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "KernelParams",
    "HydroBounds",
    "VelocityProfile",
    "evaluate",
    "maxwellian",
    "make_power_tail",
    "grid_profile",
    "zero_profile",
    "superpose",
    "save_grid_file",
    "load_grid_file",
]


@dataclass(frozen=True)
class KernelParams:
    """Collision kernel parameters: dimension and the exponents gamma, s.

    c_ds is the constant multiplying the Q2 convolution; left unset it is
    resolved from the angular kernel (see collision.default_cds) or by
    calibration against the direct sigma-representation.
    """

    d: int
    gamma: float
    s: float
    c_ds: Optional[float] = None
    b_norm: float = 1.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if not (0.0 < self.gamma < 2.0):
            raise ValueError(f"gamma must lie in (0,2), got {self.gamma}")
        if not (0.0 < self.s < 1.0):
            raise ValueError(f"s must lie in (0,1), got {self.s}")
        if self.gamma + 2.0 * self.s <= 0.0:
            raise ValueError("gamma + 2s must be positive")
        if self.b_norm <= 0.0:
            raise ValueError("b_norm must be positive")
        if self.c_ds is not None and self.c_ds <= 0.0:
            raise ValueError("c_ds must be positive when given")

    @property
    def gamma_2s(self) -> float:
        return self.gamma + 2.0 * self.s

    def require_hard_potentials(self) -> None:
        """Barrier-side operations need gamma + 2s > 2."""
        if self.gamma_2s <= 2.0:
            raise ValueError(
                f"hard-potentials regime requires gamma + 2s > 2, got {self.gamma_2s}"
            )

    def with_cds(self, c_ds: float) -> "KernelParams":
        return replace(self, c_ds=c_ds)


@dataclass(frozen=True)
class HydroBounds:
    """Mass/energy/entropy bounds (or measurements) for a profile slice."""

    m0: float
    M0: float
    E0: float
    H0: float
    K0: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.m0 <= self.M0):
            raise ValueError("need 0 < m0 <= M0")
        for name in ("M0", "E0"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be finite and positive")
        if not math.isfinite(self.H0):
            raise ValueError("H0 must be finite")


@dataclass(frozen=True)
class VelocityProfile:
    """A nonnegative velocity distribution f(v) with decay metadata.

    decay_order q0 is a hint that f(v) = O(|v|^-q0) (inf for Gaussian-type
    decay); cutoff_radius is the scale beyond which f is its analytic tail;
    width is the characteristic core scale used to grade quadratures;
    radial_kinks lists radii where f is only Lipschitz (quadratures align
    panel edges there).
    """

    kind: str
    d: int
    fn: Callable[[np.ndarray], np.ndarray]
    decay_order: float
    cutoff_radius: float
    width: float
    radial_kinks: tuple[float, ...] = field(default=())

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(v, dtype=float))


def evaluate(profile: VelocityProfile, v) -> np.ndarray | float:
    """Evaluate f at one velocity (d,) or a batch (..., d)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != profile.d:
        raise ValueError(f"velocity has dim {v.shape[-1]}, profile is d={profile.d}")
    out = profile.fn(v)
    if v.ndim == 1:
        return float(out)
    return out


def maxwellian(rho: float, u: Sequence[float] | np.ndarray, T: float, d: int) -> VelocityProfile:
    """Maxwellian with mass rho, bulk velocity u and temperature T.

    Normalized so that the mass integral is rho and the centered second
    moment is d*rho*T.
    """
    if rho <= 0 or T <= 0:
        raise ValueError("rho and T must be positive")
    u = np.asarray(u, dtype=float).reshape(d)
    norm = rho / (2.0 * np.pi * T) ** (d / 2.0)

    def fn(v: np.ndarray) -> np.ndarray:
        dv = v - u
        return norm * np.exp(-0.5 * np.einsum("...i,...i->...", dv, dv) / T)

    w = math.sqrt(T)
    return VelocityProfile(
        kind="maxwellian",
        d=d,
        fn=fn,
        decay_order=math.inf,
        cutoff_radius=float(np.linalg.norm(u) + 10.0 * w),
        width=w,
    )


def make_power_tail(q0: float, scale: float, core_radius: float, d: int) -> VelocityProfile:
    """Profile f(v) = scale * (1 + |v|/core_radius)^(-q0).

    Requires q0 > d + 2 so that mass and energy are finite.
    """
    if q0 <= d + 2:
        raise ValueError(f"q0 must exceed d+2={d + 2} for finite energy, got {q0}")
    if scale <= 0 or core_radius <= 0:
        raise ValueError("scale and core_radius must be positive")

    def fn(v: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(v, axis=-1)
        return scale * (1.0 + r / core_radius) ** (-q0)

    return VelocityProfile(
        kind="power-tail",
        d=d,
        fn=fn,
        decay_order=q0,
        cutoff_radius=4.0 * core_radius,
        width=core_radius,
    )


def zero_profile(d: int) -> VelocityProfile:
    def fn(v: np.ndarray) -> np.ndarray:
        return np.zeros(v.shape[:-1])

    return VelocityProfile(kind="zero", d=d, fn=fn, decay_order=math.inf,
                           cutoff_radius=1.0, width=1.0)


def superpose(*profiles: VelocityProfile) -> VelocityProfile:
    """Pointwise sum of profiles (used to build multi-scale fixtures)."""
    if not profiles:
        raise ValueError("need at least one profile")
    d = profiles[0].d
    if any(p.d != d for p in profiles):
        raise ValueError("all profiles must share the dimension")
    parts = tuple(profiles)

    def fn(v: np.ndarray) -> np.ndarray:
        out = parts[0].fn(v)
        for p in parts[1:]:
            out = out + p.fn(v)
        return out

    kinks: tuple[float, ...] = ()
    for p in parts:
        kinks = kinks + p.radial_kinks
    return VelocityProfile(
        kind="sum",
        d=d,
        fn=fn,
        decay_order=min(p.decay_order for p in parts),
        cutoff_radius=max(p.cutoff_radius for p in parts),
        width=max(p.width for p in parts),
        radial_kinks=tuple(sorted(set(kinks))),
    )


def grid_profile(values: np.ndarray, v_max: float, decay_order: float,
                 width: Optional[float] = None) -> VelocityProfile:
    """Tensor-grid profile on the box [-v_max, v_max]^d with multilinear
    interpolation inside and a continuous power-law extension outside.

    Outside the box, the point is pulled back to the box surface along its
    ray and the surface value is scaled by lambda^(-decay_order), where
    lambda = max_i |v_i| / v_max. This keeps f continuous across the surface
    and lets tail integrals extend to all of R^d.
    """
    values = np.asarray(values, dtype=float)
    d = values.ndim
    if d not in (2, 3):
        raise ValueError("grid profiles support d=2 or d=3")
    if np.any(values < 0):
        raise ValueError("grid values must be nonnegative")
    if not math.isfinite(decay_order) or decay_order <= 0:
        raise ValueError("grid profiles need a finite positive decay_order")
    n = values.shape[0]
    if any(s != n for s in values.shape):
        raise ValueError("grid must have equal extent per axis")
    step = 2.0 * v_max / (n - 1)

    def _interp_inside(pts: np.ndarray) -> np.ndarray:
        # multilinear gather; pts must already lie in the closed box
        x = (pts + v_max) / step
        x = np.clip(x, 0.0, n - 1 - 1e-12)
        i0 = x.astype(np.intp)
        fr = x - i0
        if d == 2:
            ix, iy = i0[:, 0], i0[:, 1]
            fx, fy = fr[:, 0], fr[:, 1]
            return ((values[ix, iy] * (1 - fx) + values[ix + 1, iy] * fx) * (1 - fy)
                    + (values[ix, iy + 1] * (1 - fx) + values[ix + 1, iy + 1] * fx) * fy)
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
        c00 = values[ix, iy, iz] * (1 - fx) + values[ix + 1, iy, iz] * fx
        c10 = values[ix, iy + 1, iz] * (1 - fx) + values[ix + 1, iy + 1, iz] * fx
        c01 = values[ix, iy, iz + 1] * (1 - fx) + values[ix + 1, iy, iz + 1] * fx
        c11 = values[ix, iy + 1, iz + 1] * (1 - fx) + values[ix + 1, iy + 1, iz + 1] * fx
        return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz

    def fn(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, d)
        lam = np.max(np.abs(flat), axis=1) / v_max
        out = np.empty(flat.shape[0])
        inside = lam <= 1.0
        if np.any(inside):
            out[inside] = _interp_inside(flat[inside])
        if np.any(~inside):
            lam_o = lam[~inside]
            surf = flat[~inside] / lam_o[:, None]
            out[~inside] = _interp_inside(surf) * lam_o ** (-decay_order)
        return out.reshape(v.shape[:-1])

    return VelocityProfile(
        kind="grid",
        d=d,
        fn=fn,
        decay_order=decay_order,
        cutoff_radius=v_max,
        width=width if width is not None else v_max / 8.0,
    )


def save_grid_file(path, values: np.ndarray, v_max: float) -> None:
    """Binary grid file: ASCII header 'd nx ny nz vmin vmax', then row-major
    float64 values. nz is written as 1 for d=2."""
    values = np.asarray(values, dtype=np.float64)
    d = values.ndim
    n = values.shape[0]
    nz = n if d == 3 else 1
    with open(path, "wb") as fh:
        fh.write(f"{d} {n} {n} {nz} {-v_max!r} {v_max!r}\n".encode())
        fh.write(values.astype("<f8").tobytes(order="C"))


def load_grid_file(path, decay_order: float) -> VelocityProfile:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        d, nx, ny, nz = (int(x) for x in header[:4])
        vmin, vmax = float(header[4]), float(header[5])
        count = nx * ny * (nz if d == 3 else 1)
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    if abs(vmin + vmax) > 1e-12 * abs(vmax):
        raise ValueError("grid file must use a symmetric box")
    shape = (nx, ny, nz) if d == 3 else (nx, ny)
    return grid_profile(data.reshape(shape).copy(), vmax, decay_order)
