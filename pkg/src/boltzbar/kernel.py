"""Angular kernel, the exact A(|h|,|w|) factor, and the Carleman kernel K_f.

Convention: the angular kernel b(cos theta) = b_norm * |sin(theta/2)|^(-(d-1)-2s)
is taken on the grazing sector theta in (0, pi/2]. In Carleman variables
(h = v'-v, w = v_*'-v, w perpendicular to h, sin(theta/2) = |h|/sqrt(|h|^2+|w|^2))
the sector is exactly {|w| >= |h|}, so the hyperplane integral in K_f runs over
|w| >= |h|. On that domain the product |w|^(gamma+2s+1) * A(|h|,|w|) collapses
algebraically to 2^(d-1) * b_norm * (|h|^2+|w|^2)^((gamma+2s+1)/2), which is what
the quadrature evaluates (no 0 * inf at the axis, and A stays within the bounded
band the representation requires). Without the sector restriction the loss part
of the h-integral would diverge for any f with f(v) > 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .profiles import KernelParams, VelocityProfile
from .quadrature import plane_basis, radial_rule

__all__ = [
    "HyperplaneQuadrature",
    "angular_b",
    "a_factor",
    "kernel_weight",
    "carleman_kernel",
    "tail_radius",
]


@dataclass(frozen=True)
class HyperplaneQuadrature:
    """Node-count and truncation settings for all collision quadratures.

    n_radial / n_angular control the hyperplane integral in K_f (n_radial is a
    resolution target: panels are graded geometrically, finer for larger
    n_radial); r_max overrides the automatic tail truncation. The remaining
    fields drive the outer h/w integrals and the sigma-representation oracle.
    """

    n_radial: int = 48
    n_angular: int = 12
    r_max: Optional[float] = None
    n_per_panel: int = 4
    ratio: float = 1.6
    outer_radial: int = 48
    outer_dirs_2d: int = 32
    outer_polar_3d: int = 8
    outer_azimuth_3d: int = 16
    sigma_theta_per_panel: int = 6
    sigma_phi: int = 12
    sigma_radial: int = 40
    sigma_dirs_2d: int = 24
    sigma_polar_3d: int = 6
    sigma_azimuth_3d: int = 12
    eps_angles: tuple[float, float, float] = (0.3, 0.15, 0.075)
    h_min_factor: float = 1e-4
    tail_tol: float = 1e-7
    label: str = "med"

    def __post_init__(self):
        if self.n_radial < 16:
            raise ValueError("n_radial must be at least 16")
        if self.n_angular < 4:
            raise ValueError("n_angular must be at least 4")
        if self.r_max is not None and self.r_max <= 0:
            raise ValueError("r_max must be positive when given")

    @classmethod
    def level(cls, name: str) -> "HyperplaneQuadrature":
        if name == "low":
            return cls(n_radial=28, n_angular=8, outer_radial=28,
                       outer_dirs_2d=20, outer_polar_3d=6, outer_azimuth_3d=12,
                       sigma_theta_per_panel=4, sigma_phi=8, sigma_radial=24,
                       sigma_dirs_2d=16, sigma_polar_3d=5, sigma_azimuth_3d=10,
                       label="low")
        if name == "med":
            return cls(label="med")
        if name == "high":
            return cls(n_radial=72, n_angular=16, outer_radial=72,
                       outer_dirs_2d=48, outer_polar_3d=12, outer_azimuth_3d=24,
                       sigma_theta_per_panel=8, sigma_phi=16, sigma_radial=56,
                       sigma_dirs_2d=32, sigma_polar_3d=8, sigma_azimuth_3d=16,
                       label="high")
        if name == "solver":
            return cls(n_radial=20, n_angular=8, outer_radial=24,
                       outer_dirs_2d=16, outer_polar_3d=6, outer_azimuth_3d=12,
                       sigma_theta_per_panel=4, sigma_phi=8, sigma_radial=20,
                       sigma_dirs_2d=12, sigma_polar_3d=4, sigma_azimuth_3d=8,
                       label="solver")
        raise ValueError(f"unknown quadrature level {name!r}")

    def with_rmax(self, r_max: float) -> "HyperplaneQuadrature":
        return replace(self, r_max=r_max)


def angular_b(cos_theta, params: KernelParams):
    """b(cos theta) = b_norm * |sin(theta/2)|^(-(d-1)-2s).

    Diverges as cos_theta -> 1 (grazing); the Carleman form never evaluates
    there. cos_theta = -1 is rejected.
    """
    ct = np.asarray(cos_theta, dtype=float)
    if np.any(ct <= -1.0):
        raise ValueError("cos_theta = -1 (theta = pi) is outside the kernel domain")
    sin_half = np.sqrt((1.0 - ct) / 2.0)
    expo = -(params.d - 1) - 2.0 * params.s
    with np.errstate(divide="ignore"):
        out = params.b_norm * sin_half**expo
    if np.ndim(cos_theta) == 0:
        return float(out)
    return out


def a_factor(h_len, w_len, params: KernelParams):
    """Exact Carleman prefactor A(|h|,|w|).

    2^(d-1) (|h|^2+|w|^2)^((-d+2+gamma)/2) |h|^(d+2s-1) |w|^-(gamma+2s+1) b(cos theta)
    with cos(theta/2) = |w| / sqrt(|h|^2+|w|^2). Homogeneous of degree zero.
    """
    h = np.asarray(h_len, dtype=float)
    w = np.asarray(w_len, dtype=float)
    if np.any(h <= 0) or np.any(w <= 0):
        raise ValueError("a_factor needs positive lengths")
    d, g, s = params.d, params.gamma, params.s
    ss = h * h + w * w
    cos_theta = 2.0 * (w * w / ss) - 1.0
    out = (2.0 ** (d - 1) * ss ** ((-d + 2.0 + g) / 2.0) * h ** (d + 2.0 * s - 1.0)
           * w ** (-(g + 2.0 * s + 1.0)) * angular_b(cos_theta, params))
    if np.ndim(h_len) == 0 and np.ndim(w_len) == 0:
        return float(out)
    return out


def kernel_weight(h_len, w_len, params: KernelParams):
    """|w|^(gamma+2s+1) * A(|h|,|w|), reduced to its stable closed form."""
    h = np.asarray(h_len, dtype=float)
    w = np.asarray(w_len, dtype=float)
    expo = (params.gamma + 2.0 * params.s + 1.0) / 2.0
    return (2.0 ** (params.d - 1)) * params.b_norm * (h * h + w * w) ** expo


def tail_radius(profile: VelocityProfile, weight_power: float, dim: int,
                tol: float) -> float:
    """Radius beyond which the weighted tail integral of the profile is
    below tol relative to its bulk: remainder ~ (R/R0)^-(q0 - weight - dim)."""
    q0 = profile.decay_order
    base = max(profile.cutoff_radius, profile.width)
    if math.isinf(q0):
        return base + 2.0 * profile.width
    margin = q0 - weight_power - dim
    if margin <= 0:
        raise ValueError(
            f"profile decay_order {q0} too small for weight |v|^{weight_power} "
            f"integral in dimension {dim}")
    return base * tol ** (-1.0 / margin)


def _plane_rule(profile: VelocityProfile, v: np.ndarray, h_len: float,
                quad: HyperplaneQuadrature, params: KernelParams,
                p_dist: float, vperp_norm: float):
    """Radial rule for the hyperplane integral, starting at |w| = h_len."""
    if quad.r_max is not None:
        r_hi = quad.r_max
    else:
        r_tail = tail_radius(profile, params.gamma_2s + 1.0, params.d - 1,
                             quad.tail_tol)
        r_hi = vperp_norm + r_tail
    if r_hi <= h_len * (1.0 + 1e-12):
        return None, None
    # align panel edges with radii where the plane crosses profile features
    feat = list(profile.radial_kinks) + [4.0 * profile.width]
    breaks = []
    for R in feat:
        if R > p_dist:
            half = math.sqrt(R * R - p_dist * p_dist)
            breaks.append(abs(half - vperp_norm))
            breaks.append(half + vperp_norm)
    scale = profile.width * 8.0 / quad.n_radial
    return radial_rule(h_len, r_hi, scale, n_per=quad.n_per_panel,
                       ratio=quad.ratio, breaks=tuple(breaks))


def carleman_kernel(profile: VelocityProfile, v, h, quad: HyperplaneQuadrature,
                    params: KernelParams) -> float:
    """K_f(v,h) = |h|^(-d-2s) * integral over {w perp h, |w| >= |h|} of
    f(v+w) |w|^(gamma+2s+1) A(|h|,|w|) dw."""
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    hn = float(np.linalg.norm(h))
    if hn == 0.0:
        raise ValueError("h must be nonzero")
    d = params.d
    hat = h / hn
    p_dist = abs(float(np.dot(v, hat)))
    vperp = v - np.dot(v, hat) * hat
    vperp_norm = float(np.linalg.norm(vperp))
    r, wr = _plane_rule(profile, v, hn, quad, params, p_dist, vperp_norm)
    if r is None:
        return 0.0
    basis = plane_basis(h)
    wgt = kernel_weight(hn, r, params)
    if d == 2:
        e1 = basis[0]
        vals = profile.fn(v[None, :] + r[:, None] * e1[None, :])
        vals = vals + profile.fn(v[None, :] - r[:, None] * e1[None, :])
        integral = float(np.dot(wr * wgt, vals))
    else:
        e1, e2 = basis
        nphi = quad.n_angular
        phi = (np.arange(nphi) + 0.5) * (2.0 * np.pi / nphi)
        ring = (np.cos(phi)[:, None] * e1[None, :]
                + np.sin(phi)[:, None] * e2[None, :])   # (nphi, 3)
        pts = v[None, None, :] + r[:, None, None] * ring[None, :, :]
        vals = profile.fn(pts)                          # (nr, nphi)
        ring_sum = vals.sum(axis=1) * (2.0 * np.pi / nphi)
        integral = float(np.dot(wr * wgt * r, ring_sum))
    return hn ** (-d - 2.0 * params.s) * integral
