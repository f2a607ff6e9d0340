"""Low-level quadrature building blocks shared by the integral operators.

Everything here is deterministic: node sets depend only on the numeric
arguments, never on global state, so repeated runs produce identical
results bit-for-bit (up to floating summation order, which is also fixed).
"""

from __future__ import annotations

import numpy as np

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def gauss_panels(edges: np.ndarray, n_per: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on consecutive panels [e0,e1], [e1,e2], ...

    Returns flat node and weight arrays, ordered panel by panel.
    """
    edges = np.asarray(edges, dtype=float)
    x, w = _gl(n_per)
    lo = edges[:-1]
    hi = edges[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def graded_edges(lo: float, hi: float, first_width: float, ratio: float = 1.7,
                 breaks: tuple[float, ...] = ()) -> np.ndarray:
    """Panel edges from lo to hi, widths growing geometrically from first_width.

    Any finite values in `breaks` that fall strictly inside (lo, hi) are
    inserted as exact edges, so region boundaries and profile kinks can be
    aligned with panel boundaries.
    """
    if hi <= lo:
        raise ValueError(f"empty panel range [{lo}, {hi}]")
    edges = [lo]
    width = first_width
    while edges[-1] + width < hi:
        edges.append(edges[-1] + width)
        width *= ratio
        if len(edges) > 400:
            raise RuntimeError("panel ladder did not reach hi; bad first_width?")
    edges.append(hi)
    pts = [b for b in breaks if np.isfinite(b) and lo < b < hi]
    if pts:
        edges = sorted(set(edges) | set(float(b) for b in pts))
        # drop near-duplicate edges created by a break landing on a ladder edge
        out = [edges[0]]
        for e in edges[1:]:
            if e - out[-1] > 1e-12 * max(1.0, abs(e)):
                out.append(e)
        edges = out
    return np.asarray(edges, dtype=float)


def radial_rule(lo: float, hi: float, scale: float, n_per: int = 4,
                ratio: float = 1.7, breaks: tuple[float, ...] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Radial nodes/weights on [lo, hi], graded toward lo with panel scale `scale`.

    The weights do NOT include a Jacobian factor; callers multiply r**(k) as
    needed.
    """
    first = max(scale, (hi - lo) * 1e-12)
    edges = graded_edges(lo, hi, first, ratio=ratio, breaks=breaks)
    return gauss_panels(edges, n_per)


def circle_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint rule on the unit circle: (n,2) unit vectors and weights 2*pi/n.

    For even n the node set is antipodally symmetric, which the collision
    quadratures rely on for exact +/-h pairing.
    """
    phi = (np.arange(n) + 0.5) * (2.0 * np.pi / n)
    pts = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    w = np.full(n, 2.0 * np.pi / n)
    return pts, w


def sphere_nodes(n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
    """Product Gauss(cos theta) x midpoint(phi) rule on S^2.

    Antipodally symmetric for even n_azimuth (GL nodes in cos(theta) are
    symmetric about zero).
    """
    mu, wmu = _gl(n_polar)
    phi = (np.arange(n_azimuth) + 0.5) * (2.0 * np.pi / n_azimuth)
    st = np.sqrt(1.0 - mu**2)
    x = st[:, None] * np.cos(phi)[None, :]
    y = st[:, None] * np.sin(phi)[None, :]
    z = np.broadcast_to(mu[:, None], x.shape)
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    w = (wmu[:, None] * np.full(n_azimuth, 2.0 * np.pi / n_azimuth)[None, :]).ravel()
    return pts, w


def unit_directions(d: int, n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on S^{d-1}: circle for d=2, product rule for d=3."""
    if d == 2:
        return circle_nodes(n_azimuth)
    if d == 3:
        return sphere_nodes(n_polar, n_azimuth)
    raise ValueError(f"unsupported dimension {d}")


def sphere_area(d: int) -> float:
    """Surface measure of S^{d-1}."""
    if d == 2:
        return 2.0 * np.pi
    if d == 3:
        return 4.0 * np.pi
    raise ValueError(f"unsupported dimension {d}")


def plane_basis(u: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the hyperplane orthogonal to u.

    Returns shape (d-1, d). Built by Gram-Schmidt against the coordinate
    axis least aligned with u; the first basis vector is invariant under
    u -> -u, so node sets built on it pair up exactly for +/-u.
    """
    u = np.asarray(u, dtype=float)
    d = u.shape[0]
    n = u / np.linalg.norm(u)
    axis = np.zeros(d)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    e1 = axis - np.dot(axis, n) * n
    e1 /= np.linalg.norm(e1)
    if d == 2:
        return e1[None, :]
    e2 = np.cross(n, e1)
    return np.stack([e1, e2])


def fit_loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of log|y| vs log x, with the slope's standard error."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.abs(np.asarray(y, dtype=float)))
    n = lx.size
    A = np.stack([lx, np.ones(n)], axis=1)
    coef, res, _, _ = np.linalg.lstsq(A, ly, rcond=None)
    slope = float(coef[0])
    if n > 2:
        ssr = float(res[0]) if res.size else float(np.sum((A @ coef - ly) ** 2))
        var = ssr / (n - 2) / float(np.sum((lx - lx.mean()) ** 2))
        err = float(np.sqrt(var))
    else:
        err = float("nan")
    return slope, err
