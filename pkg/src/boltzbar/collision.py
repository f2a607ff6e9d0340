"""Collision operator evaluation: Q1/Q2 in Carleman form, the direct
sigma-representation oracle, c_ds resolution, and the five-term region
decomposition of Q1.

Q1 is evaluated in symmetrized form, 0.5*(f(v+h)+f(v-h)-2f(v)) K_f(v,h),
valid because K_f(v,h) = K_f(v,-h). For velocities far from the bulk of f
the h-integral is split: a symmetrized polar rule around h = 0 (the bulk is
never crossed there) plus a change of variables z = v + h on the remainder,
so the bulk is resolved by the radial grading of a rule centered at the
origin instead of by angular resolution at distance |v|.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .kernel import HyperplaneQuadrature, carleman_kernel, kernel_weight, tail_radius
from .profiles import (KernelParams, VelocityProfile, evaluate, make_power_tail,
                       maxwellian, superpose)
from .quadrature import gauss_panels, graded_edges, plane_basis, radial_rule, unit_directions

logger = logging.getLogger(__name__)

__all__ = [
    "default_cds",
    "convolution_moment",
    "q2_convolution",
    "q1_carleman",
    "q_total",
    "q_sigma_oracle",
    "SigmaOracleResult",
    "calibrate_cds",
    "CdsCalibration",
    "default_panel",
    "decompose_q1",
    "DecompositionReport",
    "q_batch",
]


# ---------------------------------------------------------------------------
# Q2: lower-order convolution term
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _cds_closed_form(d: int, gamma: float, s: float, b_norm: float) -> float:
    """Cancellation constant for the grazing-sector kernel.

    The v_* -> v_*' change of variables in polar form around the deviation
    direction gives, with psi = theta/2 in (0, pi/4],

        c = |S^(d-2)| 2^(d-1) b_norm *
            int_0^(pi/4) sin(psi)^(-1-2s) (cos(psi)^-(gamma+2) - cos(psi)^(d-2)) dpsi

    The integrand behaves like psi^(1-2s) near zero, so the integral is
    finite for s < 1. Calibration against the sigma oracle reproduces this.
    """
    from scipy.integrate import quad as scipy_quad

    def integrand(psi: float) -> float:
        return math.sin(psi) ** (-1.0 - 2.0 * s) * (
            math.cos(psi) ** (-(gamma + 2.0)) - math.cos(psi) ** (d - 2))

    val, err = scipy_quad(integrand, 0.0, math.pi / 4.0, epsabs=1e-13, epsrel=1e-12)
    surf = 2.0 if d == 2 else 2.0 * math.pi
    out = surf * 2.0 ** (d - 1) * b_norm * val
    logger.debug("closed-form c_ds(d=%d, gamma=%g, s=%g) = %.12g (quad err %.1e)",
                 d, gamma, s, out, err)
    return out


def default_cds(params: KernelParams) -> float:
    """c_ds in use: the explicit override if set, else the closed form."""
    if params.c_ds is not None:
        return params.c_ds
    return _cds_closed_form(params.d, params.gamma, params.s, params.b_norm)


def _outer_rule(profile: VelocityProfile, v: np.ndarray, quad: HyperplaneQuadrature,
                params: KernelParams, weight_power: float,
                breaks: Sequence[float] = (), r_hi: Optional[float] = None):
    """Full-space polar rule around the origin: nodes (N,d) and weights
    including the r^(d-1) Jacobian."""
    d = params.d
    vn = float(np.linalg.norm(v))
    if r_hi is None:
        r_hi = vn + tail_radius(profile, weight_power, d, quad.tail_tol)
    dirs, wd = unit_directions(d, quad.outer_polar_3d,
                               quad.outer_dirs_2d if d == 2 else quad.outer_azimuth_3d)
    brk = tuple(breaks) + profile.radial_kinks + (4.0 * profile.width,)
    scale = profile.width * 8.0 / quad.outer_radial
    r, wr = radial_rule(0.0, r_hi, scale, n_per=quad.n_per_panel,
                        ratio=quad.ratio, breaks=brk)
    z = r[:, None, None] * dirs[None, :, :]
    w = (wr * r ** (d - 1))[:, None] * wd[None, :]
    return z.reshape(-1, d), w.ravel()


def convolution_moment(profile: VelocityProfile, v, params: KernelParams,
                       quad: Optional[HyperplaneQuadrature] = None) -> float:
    """integral of f(v+w)|w|^gamma dw, by polar quadrature around the bulk."""
    quad = quad or HyperplaneQuadrature.level("med")
    v = np.asarray(v, dtype=float)
    vn = float(np.linalg.norm(v))
    z, wz = _outer_rule(profile, v, quad, params, weight_power=params.gamma,
                        breaks=(vn,))
    fz = profile.fn(z)
    wlen = np.linalg.norm(z - v[None, :], axis=1)
    return float(np.dot(wz, fz * wlen ** params.gamma))


def q2_convolution(profile: VelocityProfile, v, params: KernelParams,
                   quad: Optional[HyperplaneQuadrature] = None) -> float:
    """Q2(f,f)(v) = c_ds f(v) (f * |.|^gamma)(v). Requires gamma > 0."""
    if params.gamma <= 0:
        raise ValueError("Q2 bound requires hard potentials (gamma > 0)")
    fv = evaluate(profile, v)
    if fv == 0.0:
        return 0.0
    return default_cds(params) * fv * convolution_moment(profile, v, params, quad)


# ---------------------------------------------------------------------------
# Q1 in Carleman form
# ---------------------------------------------------------------------------

def _check_q1_decay(profile: VelocityProfile, params: KernelParams) -> None:
    need = params.gamma_2s + params.d
    if profile.decay_order <= need:
        raise ValueError(
            f"Q1 needs decay_order > gamma+2s+d = {need}, profile has "
            f"{profile.decay_order}")


def q1_carleman(profile: VelocityProfile, v, quad: HyperplaneQuadrature,
                params: KernelParams) -> float:
    """Q1(f,f)(v) = 0.5 * integral of (f(v+h)+f(v-h)-2f(v)) K_f(v,h) dh."""
    _check_q1_decay(profile, params)
    v = np.asarray(v, dtype=float)
    vn = float(np.linalg.norm(v))
    fv = float(profile.fn(v))
    h_rmax = vn + tail_radius(profile, params.gamma, params.d, quad.tail_tol)
    split = 0.5 * vn if vn > 4.0 * profile.width else h_rmax
    total = _q1_hball(profile, v, fv, min(split, h_rmax), quad, params)
    if split < h_rmax:
        total += _q1_zfar(profile, v, fv, split, quad, params)
    return total


def _q1_hball(profile: VelocityProfile, v: np.ndarray, fv: float, rho_max: float,
              quad: HyperplaneQuadrature, params: KernelParams) -> float:
    """Symmetrized h-polar piece over h_min <= |h| <= rho_max."""
    d = params.d
    vn = float(np.linalg.norm(v))
    h_min = quad.h_min_factor * max(vn, profile.width)
    if rho_max <= h_min * (1 + 1e-12):
        return 0.0
    dirs, wd = unit_directions(d, quad.outer_polar_3d,
                               quad.outer_dirs_2d if d == 2 else quad.outer_azimuth_3d)
    half = dirs.shape[0] // 2
    dirs, wd = dirs[:half], wd[:half] * 2.0
    rho, wrho = radial_rule(h_min, rho_max, h_min, n_per=quad.n_per_panel,
                            ratio=2.0, breaks=(vn / 8.0, profile.width))
    total = 0.0
    for u, wu in zip(dirs, wd):
        fp = profile.fn(v[None, :] + rho[:, None] * u[None, :])
        fm = profile.fn(v[None, :] - rho[:, None] * u[None, :])
        d2 = fp + fm - 2.0 * fv
        ks = np.array([carleman_kernel(profile, v, r * u, quad, params) for r in rho])
        total += wu * float(np.dot(wrho * rho ** (d - 1), 0.5 * d2 * ks))
    return total


def _q1_zfar(profile: VelocityProfile, v: np.ndarray, fv: float, split: float,
             quad: HyperplaneQuadrature, params: KernelParams) -> float:
    """Remaining |h| > split region via z = v + h, resolved around the origin."""
    vn = float(np.linalg.norm(v))
    z, wz = _outer_rule(profile, v, quad, params, weight_power=params.gamma_2s,
                        breaks=(vn - split, vn + split, vn))
    hvec = z - v[None, :]
    hn = np.linalg.norm(hvec, axis=1)
    keep = hn > split
    fz = profile.fn(z[keep])
    total = 0.0
    for x, wx, fx, h in zip(z[keep], wz[keep], fz, hvec[keep]):
        k = carleman_kernel(profile, v, h, quad, params)
        total += wx * (fx - fv) * k
    return total


def q_total(profile: VelocityProfile, v, quad: HyperplaneQuadrature,
            params: KernelParams) -> float:
    """Q(f,f)(v) = Q1 + Q2 in Carleman form."""
    return (q1_carleman(profile, v, quad, params)
            + q2_convolution(profile, v, params, quad))


# ---------------------------------------------------------------------------
# sigma-representation oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SigmaOracleResult:
    """Extrapolated sigma-representation value with an error estimate."""

    value: float
    error: float
    levels: tuple[tuple[float, float], ...]
    converged: bool


def _sigma_angular_rule(eps_levels: Sequence[float], quad: HyperplaneQuadrature):
    """Theta rule on [min_eps, pi/2] with panel edges at every cutoff level."""
    edges = sorted(eps_levels)
    width = edges[-1]
    while edges[-1] + width < math.pi / 2.0:
        edges.append(edges[-1] + width)
        width *= 1.8
    edges.append(math.pi / 2.0)
    return gauss_panels(np.asarray(edges), quad.sigma_theta_per_panel)


def q_sigma_oracle(profile: VelocityProfile, v, eps_angle: float,
                   quad: HyperplaneQuadrature, params: KernelParams) -> SigmaOracleResult:
    """Direct sigma-representation of Q(f,f)(v) with the grazing cone
    theta < eps removed, Richardson-extrapolated across eps, eps/2, eps/4.

    The angular kernel lives on the grazing sector theta <= pi/2, matching
    the Carleman-form convention.
    """
    if eps_angle <= 0:
        raise ValueError("eps_angle must be positive")
    v = np.asarray(v, dtype=float)
    d = params.d
    s = params.s
    fv = float(profile.fn(v))
    levels = (eps_angle, eps_angle / 2.0, eps_angle / 4.0)

    theta, wt = _sigma_angular_rule(levels, quad)
    b_vals = params.b_norm * np.sin(theta / 2.0) ** (-(d - 1) - 2.0 * s)
    if d == 2:
        th_nodes = np.concatenate([theta, -theta])
        th_w = np.concatenate([wt * b_vals, wt * b_vals])
        th_abs = np.abs(th_nodes)
        phi_nodes = None
    else:
        nphi = quad.sigma_phi
        phi = (np.arange(nphi) + 0.5) * (2.0 * np.pi / nphi)
        th_nodes = np.repeat(theta, nphi)
        th_abs = th_nodes
        th_w = np.repeat(wt * b_vals * np.sin(theta), nphi) * (2.0 * np.pi / nphi)
        phi_nodes = np.tile(phi, theta.size)

    vn = float(np.linalg.norm(v))
    dirs, wd = unit_directions(d, quad.sigma_polar_3d,
                               quad.sigma_dirs_2d if d == 2 else quad.sigma_azimuth_3d)
    r_hi = vn + tail_radius(profile, params.gamma, d, quad.tail_tol)
    scale = profile.width * 8.0 / quad.sigma_radial
    r, wr = radial_rule(0.0, r_hi, scale, n_per=quad.n_per_panel,
                        ratio=quad.ratio, breaks=(vn,) + profile.radial_kinks)
    vstar = (r[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    wstar = ((wr * r ** (d - 1))[:, None] * wd[None, :]).ravel()
    fstar = profile.fn(vstar)

    sums = np.zeros(len(levels))
    n_sigma = th_nodes.size
    chunk = max(1, int(2.5e5 / max(n_sigma, 1)))
    for lo in range(0, vstar.shape[0], chunk):
        vs = vstar[lo:lo + chunk]
        ws = wstar[lo:lo + chunk]
        fs = fstar[lo:lo + chunk]
        u = v[None, :] - vs
        L = np.linalg.norm(u, axis=1)
        ok = L > 1e-14
        vs, ws, fs, u, L = vs[ok], ws[ok], fs[ok], u[ok], L[ok]
        if vs.shape[0] == 0:
            continue
        uhat = u / L[:, None]
        if d == 2:
            e1 = np.stack([-uhat[:, 1], uhat[:, 0]], axis=1)
            sigma = (np.cos(th_nodes)[None, :, None] * uhat[:, None, :]
                     + np.sin(th_nodes)[None, :, None] * e1[:, None, :])
        else:
            # any orthonormal completion works; build it in bulk
            a = np.zeros_like(uhat)
            a[np.arange(uhat.shape[0]), np.argmin(np.abs(uhat), axis=1)] = 1.0
            e1 = a - np.einsum("ij,ij->i", a, uhat)[:, None] * uhat
            e1 /= np.linalg.norm(e1, axis=1)[:, None]
            e2 = np.cross(uhat, e1)
            ring = (np.cos(phi_nodes)[None, :, None] * e1[:, None, :]
                    + np.sin(phi_nodes)[None, :, None] * e2[:, None, :])
            sigma = (np.cos(th_nodes)[None, :, None] * uhat[:, None, :]
                     + np.sin(th_nodes)[None, :, None] * ring)
        mid = 0.5 * (v[None, :] + vs)[:, None, :]
        rad = 0.5 * L[:, None, None] * sigma
        fprime = profile.fn(mid + rad)
        fsprime = profile.fn(mid - rad)
        gain_loss = fprime * fsprime - fv * fs[:, None]
        base = gain_loss * (L ** params.gamma)[:, None] * th_w[None, :]
        for j, eps in enumerate(levels):
            mask = th_abs >= eps
            sums[j] += float(np.dot(ws, base[:, mask].sum(axis=1)))

    p1 = 2.0 - 2.0 * s
    rfac = 2.0 ** (-p1)
    r12 = (sums[1] - rfac * sums[0]) / (1.0 - rfac)
    r23 = (sums[2] - rfac * sums[1]) / (1.0 - rfac)
    p2 = 4.0 - 2.0 * s
    rho = 2.0 ** (-p2)
    final = (r23 - rho * r12) / (1.0 - rho)
    scale_ref = max(abs(final), abs(sums[2]), 1e-300)
    err = abs(final - r23) + 0.25 * abs(r23 - r12)
    converged = (abs(r23 - r12)
                 <= 0.5 * (abs(sums[1] - sums[0]) + abs(sums[2] - sums[1]))
                 + 1e-12 * scale_ref)
    if not converged:
        logger.warning("sigma oracle extrapolation did not tighten (levels %s)",
                       list(zip(levels, sums)))
    return SigmaOracleResult(value=float(final), error=float(err),
                             levels=tuple(zip(levels, map(float, sums))),
                             converged=bool(converged))


# ---------------------------------------------------------------------------
# c_ds calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CdsCalibration:
    c_ds: float
    residual_max: float
    residual_rms: float
    n_points: int
    closed_form: float

    def params(self, base: KernelParams) -> KernelParams:
        return base.with_cds(self.c_ds)


def default_panel(params: KernelParams):
    """Smooth rapidly-decaying profiles + evaluation points for calibration."""
    d = params.d
    e1 = np.zeros(d)
    e1[0] = 1.0
    diag = np.ones(d) / math.sqrt(d)
    mix = superpose(maxwellian(0.7, np.zeros(d), 1.0, d),
                    maxwellian(0.5, 1.2 * e1, 0.7, d))
    tail = make_power_tail(d + 6.0, 1.0, 1.0, d)
    return [
        (maxwellian(1.0, np.zeros(d), 1.0, d), [0.7 * e1, 1.6 * diag]),
        (mix, [0.5 * e1, 1.4 * diag]),
        (tail, [0.8 * e1, 1.8 * diag]),
    ]


def calibrate_cds(params: KernelParams, quad: HyperplaneQuadrature,
                  panel=None, threshold: float = 0.02) -> CdsCalibration:
    """Least-squares fit of c_ds so q1 + c_ds*(f(v) conv) matches the sigma
    oracle over the panel; rejected if any relative residual exceeds
    `threshold`."""
    panel = panel if panel is not None else default_panel(params)
    q1s, convs, sigmas = [], [], []
    for profile, points in panel:
        for v in points:
            q1s.append(q1_carleman(profile, v, quad, params))
            convs.append(evaluate(profile, v)
                         * convolution_moment(profile, v, params, quad))
            sigmas.append(q_sigma_oracle(profile, v, quad.eps_angles[0],
                                         quad, params).value)
    q1a, conva, siga = map(np.asarray, (q1s, convs, sigmas))
    c = float(np.dot(conva, siga - q1a) / np.dot(conva, conva))
    if c <= 0:
        raise ValueError(f"calibration produced non-positive c_ds = {c}")
    resid = (q1a + c * conva - siga) / np.maximum(np.abs(siga), 1e-300)
    res_max = float(np.max(np.abs(resid)))
    res_rms = float(np.sqrt(np.mean(resid ** 2)))
    if res_max > threshold:
        raise ValueError(
            f"calibration rejected: max relative residual {res_max:.3%} "
            f"exceeds {threshold:.1%}")
    closed = _cds_closed_form(params.d, params.gamma, params.s, params.b_norm)
    logger.info("calibrated c_ds = %.6g (closed form %.6g, max resid %.2e)",
                c, closed, res_max)
    return CdsCalibration(c_ds=c, residual_max=res_max, residual_rms=res_rms,
                          n_points=int(q1a.size), closed_form=closed)


# ---------------------------------------------------------------------------
# region decomposition of Q1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecompositionReport:
    """Values of the five Q1 regions, Q2, the independently computed Q1,
    and the partition residual at one velocity."""

    v: tuple[float, ...]
    G: float
    E1: float
    E2: float
    E3: float
    E4: float
    Q2: float
    q1_direct: float
    residual: float
    q_barrier: float

    @property
    def largest_term(self) -> float:
        return max(abs(self.G), abs(self.E1), abs(self.E2), abs(self.E3),
                   abs(self.E4), abs(self.q1_direct))

    @property
    def q1_sum(self) -> float:
        return self.G + self.E1 + self.E2 + self.E3 + self.E4

    def to_json_line(self, **extra) -> str:
        rec = asdict(self)
        rec["v"] = list(self.v)
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


def _feature_break_radii(p_dist: float, vperp_norm: float,
                         radii: Sequence[float]) -> list[float]:
    """Polar radii at which a hyperplane at distance p from the origin
    crosses the spheres |x| = R (envelope over the angular variable)."""
    out = []
    for R in radii:
        if R > p_dist:
            half = math.sqrt(R * R - p_dist * p_dist)
            out.append(abs(half - vperp_norm))
            out.append(half + vperp_norm)
    return out


def _inner_h_parts(profile: VelocityProfile, v: np.ndarray, fv: float,
                   w_dir: np.ndarray, w_len: float, c_thresh: float,
                   quad: HyperplaneQuadrature, params: KernelParams,
                   need_far: bool):
    """Symmetrized inner integral over {h perp w, |h| <= |w|} of
    (f(v+h)-f(v)) A(|h|,|w|) |h|^(1-d-2s) dh, split at |h| = c.

    Returns (I_le_c, I_gt_c). Evenness of domain and weight lets the
    unsymmetrized integrand be evaluated as paired second differences,
    which keeps every node's contribution nonpositive at a touching point
    inside the concavity cone.
    """
    d = params.d
    vn = float(np.linalg.norm(v))
    lo = quad.h_min_factor * max(vn, profile.width)
    hi = w_len if need_far else min(c_thresh, w_len)
    if hi <= lo * 4.0:
        return 0.0, 0.0
    p_dist = abs(float(np.dot(v, w_dir)))
    vperp = v - float(np.dot(v, w_dir)) * w_dir
    vperp_norm = float(np.linalg.norm(vperp))
    feats = list(profile.radial_kinks) + [4.0 * profile.width]
    breaks = _feature_break_radii(p_dist, vperp_norm, feats) + [c_thresh]
    r, wr = radial_rule(lo, hi, lo, n_per=quad.n_per_panel, ratio=2.0,
                        breaks=tuple(breaks))
    a_vals = kernel_weight(r, w_len, params) * w_len ** (-(params.gamma_2s + 1.0))
    radial_w = wr * a_vals * r ** (-1.0 - 2.0 * params.s)
    basis = plane_basis(w_dir)
    if d == 2:
        e1 = basis[0]
        pts = r[:, None] * e1[None, :]
        d2 = profile.fn(v[None, :] + pts) + profile.fn(v[None, :] - pts) - 2.0 * fv
        vals = d2
    else:
        e1, e2 = basis
        nphi = quad.n_angular
        half_phi = nphi // 2
        phi = (np.arange(half_phi) + 0.5) * (2.0 * np.pi / nphi)
        ring = (np.cos(phi)[:, None] * e1[None, :]
                + np.sin(phi)[:, None] * e2[None, :])
        pts = r[:, None, None] * ring[None, :, :]
        d2 = (profile.fn(v[None, None, :] + pts)
              + profile.fn(v[None, None, :] - pts) - 2.0 * fv)
        vals = d2.sum(axis=1) * (2.0 * np.pi / nphi)
    contrib = radial_w * vals
    near = r <= c_thresh
    return float(contrib[near].sum()), float(contrib[~near].sum())


def _plane_pair(profile: VelocityProfile, v: np.ndarray, hvec: np.ndarray,
                b_thresh: float, quad: HyperplaneQuadrature, params: KernelParams):
    """(K_f(v,h), variant restricted to |v+w| > b_thresh on the hyperplane),
    both including the |h|^(-d-2s) prefactor."""
    d = params.d
    hn = float(np.linalg.norm(hvec))
    hat = hvec / hn
    p_dist = abs(float(np.dot(v, hat)))
    vperp = v - float(np.dot(v, hat)) * hat
    vperp_norm = float(np.linalg.norm(vperp))
    r_tail = tail_radius(profile, params.gamma_2s + 1.0, d - 1, quad.tail_tol)
    r_hi = vperp_norm + r_tail
    if r_hi <= hn * (1.0 + 1e-12):
        return 0.0, 0.0
    feats = list(profile.radial_kinks) + [4.0 * profile.width, b_thresh]
    breaks = tuple(_feature_break_radii(p_dist, vperp_norm, feats))
    scale = profile.width * 8.0 / quad.n_radial
    r, wr = radial_rule(hn, r_hi, scale, n_per=quad.n_per_panel,
                        ratio=quad.ratio, breaks=breaks)
    wgt = kernel_weight(hn, r, params)
    basis = plane_basis(hat)
    if d == 2:
        e1 = basis[0]
        ptsp = v[None, :] + r[:, None] * e1[None, :]
        ptsm = v[None, :] - r[:, None] * e1[None, :]
        vp = profile.fn(ptsp)
        vm = profile.fn(ptsm)
        mp = np.linalg.norm(ptsp, axis=1) > b_thresh
        mm = np.linalg.norm(ptsm, axis=1) > b_thresh
        full = float(np.dot(wr * wgt, vp + vm))
        masked = float(np.dot(wr * wgt, vp * mp + vm * mm))
    else:
        e1, e2 = basis
        nphi = quad.n_angular
        phi = (np.arange(nphi) + 0.5) * (2.0 * np.pi / nphi)
        ring = (np.cos(phi)[:, None] * e1[None, :]
                + np.sin(phi)[:, None] * e2[None, :])
        pts = v[None, None, :] + r[:, None, None] * ring[None, :, :]
        vals = profile.fn(pts)
        mask = np.linalg.norm(pts, axis=2) > b_thresh
        wphi = 2.0 * np.pi / nphi
        full = float(np.dot(wr * wgt * r, vals.sum(axis=1) * wphi))
        masked = float(np.dot(wr * wgt * r, (vals * mask).sum(axis=1) * wphi))
    pref = hn ** (-d - 2.0 * params.s)
    return pref * full, pref * masked


def decompose_q1(profile: VelocityProfile, v, q: float,
                 quad: HyperplaneQuadrature, params: KernelParams) -> DecompositionReport:
    """Split Q1(f,f)(v) into the coercive term and the four error terms.

    Region thresholds (z = v+w for the outer-w terms):
      G : |z| <= |v|/sqrt(2q+4), all h perp w
      E1: |z| >  |v|/sqrt(2q+4), |h| <= |v|/q
      E2: |v|/sqrt(2q+4) < |z| <= |v|/sqrt(2), |h| > |v|/q
      E3: |h| >= |v|/q and |v+h| > |v|/q, hyperplane cut |v+w| > |v|/sqrt(2)
      E4: |v+h| <= |v|/q, same hyperplane cut
    G, E1, E2 are integrated outer-w/inner-h; E3, E4 outer-h/inner-w,
    and q1_direct re-evaluates Q1 with no region splitting.
    """
    _check_q1_decay(profile, params)
    v = np.asarray(v, dtype=float)
    vn = float(np.linalg.norm(v))
    if vn == 0.0:
        raise ValueError("decomposition regions degenerate at v = 0")
    if q <= params.d + params.gamma_2s + 1.0:
        raise ValueError(
            f"q must exceed d+gamma+2s+1 = {params.d + params.gamma_2s + 1.0}")
    d = params.d
    fv = float(profile.fn(v))
    a_thr = vn / math.sqrt(2.0 * q + 4.0)
    b_thr = vn / math.sqrt(2.0)
    c_thr = vn / q
    eta = 0.5

    # shared z-rule: outer-w terms plus the far part of the h-outer route
    z, wz = _outer_rule(profile, v, quad, params, weight_power=params.gamma_2s,
                        breaks=(a_thr, b_thr, c_thr, (1.0 - eta) * vn,
                                (1.0 + eta) * vn, vn))
    fz = profile.fn(z)
    zn = np.linalg.norm(z, axis=1)
    wvec = z - v[None, :]
    wn = np.linalg.norm(wvec, axis=1)

    G = E1 = E2 = E3 = E4 = 0.0
    q1_direct = 0.0
    g2s = params.gamma_2s
    for i in range(z.shape[0]):
        if wn[i] < 1e-14:
            continue
        w_dir = wvec[i] / wn[i]
        outer_w = wz[i] * fz[i] * wn[i] ** g2s
        if outer_w != 0.0:
            need_far = zn[i] <= b_thr
            near, far = _inner_h_parts(profile, v, fv, w_dir, wn[i], c_thr,
                                       quad, params, need_far)
            if zn[i] <= a_thr:
                G += outer_w * (near + far)
            else:
                E1 += outer_w * near
                if zn[i] <= b_thr:
                    E2 += outer_w * far
        if wn[i] > eta * vn:
            k_full, k_b = _plane_pair(profile, v, wvec[i], b_thr, quad, params)
            diff = wz[i] * (fz[i] - fv)
            q1_direct += diff * k_full
            if zn[i] > c_thr:
                E3 += diff * k_b

    # symmetrized h-ball parts of q1_direct and E3 over |h| <= eta |v|
    dirs, wd = unit_directions(d, quad.outer_polar_3d,
                               quad.outer_dirs_2d if d == 2 else quad.outer_azimuth_3d)
    half = dirs.shape[0] // 2
    dirs, wd = dirs[:half], wd[:half] * 2.0
    h_min = quad.h_min_factor * vn
    rho, wrho = radial_rule(h_min, eta * vn, h_min, n_per=quad.n_per_panel,
                            ratio=2.0, breaks=(c_thr,))
    for u, wu in zip(dirs, wd):
        fp = profile.fn(v[None, :] + rho[:, None] * u[None, :])
        fm = profile.fn(v[None, :] - rho[:, None] * u[None, :])
        d2 = 0.5 * (fp + fm - 2.0 * fv)
        pairs = [_plane_pair(profile, v, rr * u, b_thr, quad, params) for rr in rho]
        k_full = np.array([p[0] for p in pairs])
        k_b = np.array([p[1] for p in pairs])
        meas = wu * wrho * rho ** (d - 1)
        q1_direct += float(np.dot(meas, d2 * k_full))
        far_mask = rho > c_thr
        E3 += float(np.dot(meas[far_mask], (d2 * k_b)[far_mask]))

    # E4: ball |v+h| <= |v|/q, resolved around the origin in z = v+h
    dirs4, wd4 = unit_directions(d, max(4, quad.outer_polar_3d // 2),
                                 max(8, (quad.outer_dirs_2d if d == 2
                                         else quad.outer_azimuth_3d) // 2))
    scale4 = min(profile.width, c_thr) / 4.0
    r4, wr4 = radial_rule(0.0, c_thr, scale4, n_per=quad.n_per_panel, ratio=1.6,
                          breaks=profile.radial_kinks)
    for u, wu in zip(dirs4, wd4):
        zpts = r4[:, None] * u[None, :]
        fz4 = profile.fn(zpts)
        for rr, wrr, fzz in zip(r4, wr4, fz4):
            hvec = rr * u - v
            _, k_b = _plane_pair(profile, v, hvec, b_thr, quad, params)
            E4 += wu * wrr * rr ** (d - 1) * (fzz - fv) * k_b

    Q2 = q2_convolution(profile, v, params, quad)
    total = G + E1 + E2 + E3 + E4
    report = DecompositionReport(
        v=tuple(float(x) for x in v), G=G, E1=E1, E2=E2, E3=E3, E4=E4, Q2=Q2,
        q1_direct=q1_direct, residual=total - q1_direct, q_barrier=float(q))
    if report.largest_term > 0:
        rel = abs(report.residual) / report.largest_term
        if rel > 0.01:
            logger.warning("decomposition residual %.2e relative to largest term", rel)
    return report


# ---------------------------------------------------------------------------
# batched evaluation for the time stepper
# ---------------------------------------------------------------------------

def q_batch(profile: VelocityProfile, vs: np.ndarray, quad: HyperplaneQuadrature,
            params: KernelParams) -> np.ndarray:
    """Q1 + Q2 at a batch of velocities, sharing quadrature geometry.

    The hyperplane samples for K_f do not depend on |h|, so per direction
    they are evaluated once on a panel ladder whose edges contain the
    |h|-ladder edges; K_f(v, rho u) then reduces to a weighted sum over the
    shared samples plus an exact small rule on the partial panel
    [rho, next edge).
    """
    _check_q1_decay(profile, params)
    vs = np.asarray(vs, dtype=float)
    d = params.d
    n = vs.shape[0]
    f0 = profile.fn(vs)
    cds = default_cds(params)
    width = profile.width
    vmax = float(np.max(np.linalg.norm(vs, axis=1)))

    # --- Q2: one offset grid shared by every node
    r_conv = vmax + tail_radius(profile, params.gamma, d, quad.tail_tol)
    dirs, wd = unit_directions(d, quad.outer_polar_3d,
                               quad.outer_dirs_2d if d == 2 else quad.outer_azimuth_3d)
    scale = width * 8.0 / quad.outer_radial
    r, wr = radial_rule(0.0, r_conv, scale, n_per=quad.n_per_panel, ratio=quad.ratio)
    conv = np.zeros(n)
    for u, wu in zip(dirs, wd):
        offs = r[:, None] * u[None, :]
        vals = profile.fn(vs[None, :, :] + offs[:, None, :])
        conv += wu * np.dot(wr * r ** (d - 1) * r ** params.gamma, vals)
    q2 = cds * f0 * conv

    # --- Q1 symmetrized with shared hyperplane ladders
    h_min = quad.h_min_factor * width
    h_max = vmax + tail_radius(profile, params.gamma, d, quad.tail_tol)
    edges = graded_edges(h_min, h_max, h_min, ratio=1.9)
    rho, wrho = gauss_panels(edges, 2)
    rho_top = edges[np.searchsorted(edges, rho)]          # upper edge of rho's panel
    w_hi = vmax + tail_radius(profile, params.gamma_2s + 1.0, d - 1, quad.tail_tol)
    half = dirs.shape[0] // 2
    q1 = np.zeros(n)
    gl2x, gl2w = np.polynomial.legendre.leggauss(2)

    if d == 3:
        nphi = quad.n_angular
        phis = (np.arange(nphi) + 0.5) * (2.0 * np.pi / nphi)

    for u, wu in zip(dirs[:half], wd[:half] * 2.0):
        basis = plane_basis(u)
        rw, ww = radial_rule(h_min, w_hi, width * 8.0 / quad.n_radial,
                             n_per=quad.n_per_panel, ratio=quad.ratio,
                             breaks=tuple(edges[edges < w_hi]))
        if d == 2:
            e1 = basis[0]

            def plane_samples(rr):
                offs = rr[:, None] * e1[None, :]
                return (profile.fn(vs[None, :, :] + offs[:, None, :])
                        + profile.fn(vs[None, :, :] - offs[:, None, :]))

            jac = np.ones_like
        else:
            e1, e2 = basis
            ring = (np.cos(phis)[:, None] * e1[None, :]
                    + np.sin(phis)[:, None] * e2[None, :])

            def plane_samples(rr):
                acc = np.zeros((rr.size, n))
                for j in range(ring.shape[0]):
                    offs = rr[:, None] * ring[j][None, :]
                    acc += profile.fn(vs[None, :, :] + offs[:, None, :])
                return acc * (2.0 * np.pi / ring.shape[0])

            jac = lambda rr: rr  # noqa: E731

        F = plane_samples(rw)                              # (nw, n)
        jw = np.ones_like(rw) if d == 2 else rw
        wgt = kernel_weight(rho[:, None], rw[None, :], params)
        keep = rw[None, :] >= rho_top[:, None] * (1.0 - 1e-12)
        K = ((wgt * keep) * (ww * jw)[None, :]) @ F        # (nrho, n)
        # exact partial panel [rho, rho_top]
        seg_half = 0.5 * (rho_top - rho)
        seg_mid = 0.5 * (rho_top + rho)
        for k in range(rho.size):
            if seg_half[k] <= 0.0:
                continue
            rr = seg_mid[k] + seg_half[k] * gl2x
            Fp = plane_samples(rr)
            jp = np.ones_like(rr) if d == 2 else rr
            wk = seg_half[k] * gl2w * kernel_weight(rho[k], rr, params) * jp
            K[k] += wk @ Fp
        K *= (rho ** (-d - 2.0 * params.s))[:, None]
        fp = profile.fn(vs[None, :, :] + (rho[:, None] * u[None, :])[:, None, :])
        fm = profile.fn(vs[None, :, :] - (rho[:, None] * u[None, :])[:, None, :])
        d2 = 0.5 * (fp + fm - 2.0 * f0[None, :])
        q1 += wu * np.dot(wrho * rho ** (d - 1), d2 * K)
    return q1 + q2
