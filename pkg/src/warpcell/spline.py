"""Polyharmonic spline interpolation and control-point image warping.

A displacement is attached to every control point; two polyharmonic
interpolants (one per axis) turn those sparse displacements into a dense
flow field, and the map is backward-warped through that flow with
zero-filled bilinear sampling.

Points are ``(x, y)`` pairs, displacements ``(dx, dy)``. Dense flow
fields follow the array convention ``[H, W, 2]`` holding ``(dy, dx)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, as_tensor, bilinear_sample, bilinear_sample_vjp

DEFAULT_ORDER = 2
DEFAULT_REGULARIZATION = 1e-10


class InterpolationError(ValueError):
    """Raised when the interpolation system cannot be solved."""


# ---------------------------------------------------------------------------
# radial basis


def rbf(r, order: int):
    """``phi_1(r) = r`` or ``phi_2(r) = r^2 log r`` (with ``phi_2(0) = 0``)."""
    r = np.asarray(r, dtype=DTYPE)
    out = _rbf_sq(r * r, order)
    return out if r.ndim else float(out)


def _rbf_sq(r2: np.ndarray, order: int) -> np.ndarray:
    # phi as a function of the squared radius; phi_2 = 0.5 r^2 log(r^2)
    if order == 1:
        return np.sqrt(r2)
    if order == 2:
        pos = r2 > 0
        return np.where(pos, 0.5 * r2 * np.log(np.where(pos, r2, 1.0)), 0.0)
    raise ValueError(f"unsupported rbf order {order}; expected 1 or 2")


def _rbf_slope_over_r(r2: np.ndarray, order: int) -> np.ndarray:
    # phi'(r) / r from the squared radius, 0 at r = 0 where it multiplies a zero offset
    pos = r2 > 0
    safe = np.where(pos, r2, 1.0)
    if order == 1:
        return np.where(pos, 1.0 / np.sqrt(safe), 0.0)
    if order == 2:
        return np.where(pos, np.log(safe) + 1.0, 0.0)
    raise ValueError(f"unsupported rbf order {order}; expected 1 or 2")


# ---------------------------------------------------------------------------
# interpolant


@dataclass
class SplineInterpolant:
    """``s(x, y) = sum_i w_i phi(|(x, y) - site_i|) + v1 x + v2 y + v3``."""

    sites: np.ndarray  # [n, 2]
    weights: np.ndarray  # [n]
    affine: np.ndarray  # [3] = (v1, v2, v3)
    order: int = DEFAULT_ORDER

    def __call__(self, queries) -> np.ndarray:
        return eval_interpolant(self, queries)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``[..., len(a), len(b)]`` between point sets ``[..., n, 2]``."""
    dx = a[..., :, None, 0] - b[..., None, :, 0]
    dy = a[..., :, None, 1] - b[..., None, :, 1]
    return dx * dx + dy * dy


def _offset_sum(coef: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[k] = sum_j coef[k, j] (a_k - b_j)`` without forming the offsets."""
    return coef.sum(-1)[..., None] * a - coef @ b


def _system(sites: np.ndarray, order: int, regularization: float) -> np.ndarray:
    """Block matrix ``[[A + reg I, P], [P^T, 0]]`` for sites ``[..., n, 2]``."""
    n = sites.shape[-2]
    lead = sites.shape[:-2]
    M = np.zeros(lead + (n + 3, n + 3), dtype=DTYPE)
    M[..., :n, :n] = _rbf_sq(_sqdist(sites, sites), order) + regularization * np.eye(n)
    P = np.concatenate([sites, np.ones(lead + (n, 1))], axis=-1)
    M[..., :n, n:] = P
    M[..., n:, :n] = np.swapaxes(P, -1, -2)
    return M


def _solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # LAPACK gesv: LU with partial pivoting
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise InterpolationError("singular interpolation system") from exc


def _evaluation_matrix(queries: np.ndarray, sites: np.ndarray, order: int, r2=None) -> np.ndarray:
    """Rows ``[phi(|q - s_1|), ..., phi(|q - s_n|), x, y, 1]`` per query."""
    if r2 is None:
        r2 = _sqdist(queries, sites)
    lead = np.broadcast_shapes(queries.shape[:-2], sites.shape[:-2])
    q = np.broadcast_to(queries, lead + queries.shape[-2:])
    ones = np.ones(lead + (queries.shape[-2], 1))
    return np.concatenate([_rbf_sq(r2, order), q, ones], axis=-1)


def _validate_sites(sites: np.ndarray, regularization: float):
    n = sites.shape[0]
    if sites.ndim != 2 or sites.shape[1] != 2:
        raise InterpolationError(f"sites must be [n, 2], got {sites.shape}")
    if n < 3:
        raise InterpolationError(f"need at least 3 sites, got {n}")
    if not np.all(np.isfinite(sites)):
        raise InterpolationError("sites contain non-finite coordinates")
    if regularization == 0:
        r = _sqdist(sites, sites) + np.eye(n)
        i, j = np.nonzero(r == 0)
        if i.size:
            raise InterpolationError(f"duplicate sites {int(i[0])} and {int(j[0])} at {tuple(sites[i[0]])}")
    P = np.concatenate([sites, np.ones((n, 1))], axis=1)
    if np.linalg.matrix_rank(P) < 3:
        raise InterpolationError("sites are collinear; the affine block is rank-deficient")


def solve_interpolant(sites, values, order: int = DEFAULT_ORDER, regularization: float = 0.0) -> SplineInterpolant:
    """Fit the polyharmonic interpolant through ``values`` at ``sites``.

    With ``regularization == 0`` the interpolant passes through every data
    value exactly; a positive value relaxes that in exchange for conditioning.
    """
    sites = as_tensor(sites)
    values = as_tensor(values)
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    rbf(0.0, order)
    _validate_sites(sites, regularization)
    n = sites.shape[0]
    if values.shape != (n,):
        raise InterpolationError(f"expected {n} values, got shape {values.shape}")
    M = _system(sites, order, regularization)
    rhs = np.concatenate([values, np.zeros(3)])
    theta = _solve(M, rhs)
    return SplineInterpolant(sites.copy(), theta[:n], theta[n:], order)


def eval_interpolant(interp: SplineInterpolant, queries) -> np.ndarray:
    queries = as_tensor(queries).reshape(-1, 2)
    E = _evaluation_matrix(queries, interp.sites, interp.order)
    return E @ np.concatenate([interp.weights, interp.affine])


def interpolate(sites, values, queries, order: int = DEFAULT_ORDER, regularization: float = 0.0) -> np.ndarray:
    """Fit and evaluate in one go; ``values`` may be ``[n]`` or ``[n, k]``."""
    sites, values, queries = as_tensor(sites), as_tensor(values), as_tensor(queries)
    out, _ = _interp_forward(sites, values, queries, order, regularization)
    return out


def _interp_forward(sites, values, queries, order, regularization):
    n = sites.shape[-2]
    vec = values.ndim == sites.ndim - 1
    vals = values[..., None] if vec else values
    M = _system(sites, order, regularization)
    rhs = np.concatenate([vals, np.zeros(vals.shape[:-2] + (3, vals.shape[-1]))], axis=-2)
    theta = _solve(M, rhs)
    r2 = _sqdist(queries, sites)
    E = _evaluation_matrix(queries, sites, order, r2)
    out = E @ theta
    cache = (sites, queries, M, theta, E, r2, order, n, vec)
    return (out[..., 0] if vec else out), cache


def _interp_backward(cache, g, need_sites: bool = True, need_queries: bool = False):
    """Cotangents of ``E(queries, sites) @ solve(M(sites), [values; 0])``."""
    sites, queries, M, theta, E, r2, order, n, vec = cache
    g = g[..., None] if vec else g
    gtheta = np.swapaxes(E, -1, -2) @ g
    adj = _solve(np.swapaxes(M, -1, -2), gtheta)
    gvals = adj[..., :n, :]
    gsites = qgrad = None
    if need_sites or need_queries:
        gE = g @ np.swapaxes(theta, -1, -2)  # [..., Q, n+3]
        coef_q = gE[..., :n] * _rbf_slope_over_r(r2, order)
        if need_queries:
            qgrad = _offset_sum(coef_q, queries, sites) + gE[..., n:n + 2]
    if need_sites:
        gM = -adj @ np.swapaxes(theta, -1, -2)
        gA = gM[..., :n, :n]
        gP = gM[..., :n, n:] + np.swapaxes(gM[..., n:, :n], -1, -2)
        coef_s = (gA + np.swapaxes(gA, -1, -2)) * _rbf_slope_over_r(_sqdist(sites, sites), order)
        gsites = _offset_sum(coef_s, sites, sites) + gP[..., :2]
        # d/ds of phi(|q - s|) mirrors the d/dq term, summed over queries
        gsites = gsites + _offset_sum(np.swapaxes(coef_q, -1, -2), sites, queries)
    if vec:
        gvals = gvals[..., 0]
    return gsites, gvals, qgrad


def interpolate_vjp(g, sites, values, queries, order: int = DEFAULT_ORDER, regularization: float = 0.0):
    """Cotangents ``(dsites, dvalues, dqueries)`` of :func:`interpolate`."""
    sites, values, queries = as_tensor(sites), as_tensor(values), as_tensor(queries)
    _, cache = _interp_forward(sites, values, queries, order, regularization)
    return _interp_backward(cache, as_tensor(g), need_sites=True, need_queries=True)


# ---------------------------------------------------------------------------
# control points


def grid_control_points(H: int, W: int, lines_y: int = 3, lines_x: int = 3) -> np.ndarray:
    """Intersections of evenly spaced horizontal and vertical lines.

    A 20x20 map with 3+3 lines gives the nine points {5, 10, 15}^2.
    Returned as ``(x, y)`` rows, y-major.
    """
    if lines_y < 1 or lines_x < 1:
        raise ValueError("control grid needs at least one line per axis")
    if lines_y >= H or lines_x >= W:
        raise ValueError(f"{lines_y}x{lines_x} grid lines do not fit a {H}x{W} map")
    ys = [(k * H) // (lines_y + 1) for k in range(1, lines_y + 1)]
    xs = [(k * W) // (lines_x + 1) for k in range(1, lines_x + 1)]
    return np.array([(x, y) for y in ys for x in xs], dtype=DTYPE)


def boundary_points(H: int, W: int) -> np.ndarray:
    """Four corners and four edge midpoints as ``(x, y)`` rows."""
    xs = (0.0, (W - 1) / 2.0, W - 1.0)
    ys = (0.0, (H - 1) / 2.0, H - 1.0)
    pts = [(x, y) for y in ys for x in xs if not (x == xs[1] and y == ys[1])]
    return np.array(pts, dtype=DTYPE)


@dataclass
class ControlPointSet:
    interior: np.ndarray  # [n, 2] (x, y)
    displacements: np.ndarray  # [n, 2] (dx, dy)
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # [m, 2], pinned

    def __post_init__(self):
        self.interior = as_tensor(self.interior).reshape(-1, 2)
        self.displacements = as_tensor(self.displacements).reshape(-1, 2)
        self.boundary = as_tensor(self.boundary).reshape(-1, 2)
        if len(self.displacements) != len(self.interior):
            raise ValueError(f"{len(self.displacements)} displacements for {len(self.interior)} interior points")

    def validate(self) -> None:
        pts = np.concatenate([self.interior, self.boundary])
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("control points must be pairwise distinct")

    @property
    def destinations(self) -> np.ndarray:
        return self.interior + self.displacements

    def to_text(self) -> str:
        lines = [f"{x!r} {y!r} {dx!r} {dy!r} interior"
                 for (x, y), (dx, dy) in zip(self.interior.tolist(), self.displacements.tolist())]
        lines += [f"{x!r} {y!r} 0.0 0.0 boundary" for x, y in self.boundary.tolist()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ControlPointSet":
        interior, disp, boundary = [], [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"line {lineno}: expected 'x y dx dy kind', got {line!r}")
            x, y, dx, dy = map(float, parts[:4])
            if parts[4] == "interior":
                interior.append((x, y))
                disp.append((dx, dy))
            elif parts[4] == "boundary":
                if dx != 0 or dy != 0:
                    raise ValueError(f"line {lineno}: boundary points carry zero displacement")
                boundary.append((x, y))
            else:
                raise ValueError(f"line {lineno}: unknown point kind {parts[4]!r}")
        return cls(np.array(interior).reshape(-1, 2), np.array(disp).reshape(-1, 2),
                   np.array(boundary).reshape(-1, 2))


# ---------------------------------------------------------------------------
# dense flow and warping


def _pixel_grid(H: int, W: int) -> np.ndarray:
    gy, gx = np.meshgrid(np.arange(H, dtype=DTYPE), np.arange(W, dtype=DTYPE), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)  # (x, y)


def _flow_sites(interior, boundary, displacements, fixed_sites):
    lead = displacements.shape[:-2]
    src = np.broadcast_to(interior, lead + interior.shape)
    moving = src if fixed_sites else src + displacements
    bnd = np.broadcast_to(boundary, lead + boundary.shape)
    sites = np.concatenate([moving, bnd], axis=-2)
    values = np.concatenate([displacements, np.zeros(lead + boundary.shape)], axis=-2)
    return sites, values


def _flow_forward(interior, boundary, displacements, H, W, order, regularization, fixed_sites):
    sites, values = _flow_sites(interior, boundary, displacements, fixed_sites)
    flow_xy, cache = _interp_forward(sites, values, _pixel_grid(H, W), order, regularization)
    return flow_xy, cache  # [..., H*W, 2] as (dx, dy)


def dense_flow(cps: ControlPointSet, H: int, W: int, order: int = DEFAULT_ORDER,
               regularization: float = DEFAULT_REGULARIZATION, fixed_sites: bool = False) -> np.ndarray:
    """Interpolate control-point displacements over every pixel.

    Data sites sit at the destinations ``point + displacement`` (or at the
    source points when ``fixed_sites``); boundary points pin the flow to 0.
    Returns ``[H, W, 2]`` as ``(dy, dx)``.
    """
    flow_xy, _ = _flow_forward(cps.interior, cps.boundary, cps.displacements, H, W,
                               order, regularization, fixed_sites)
    return flow_xy[..., ::-1].reshape(H, W, 2).copy()


@dataclass
class _WarpCache:
    map: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    interp: tuple
    fixed_sites: bool
    n_interior: int


def warp_forward(map_, interior, boundary, displacements, order=DEFAULT_ORDER,
                 regularization=DEFAULT_REGULARIZATION, fixed_sites=False):
    """Batched sparse warp. ``map_`` is ``[..., H, W, C]``, ``displacements`` ``[..., n, 2]``.

    Returns ``(warped, flow, cache)``; ``flow`` is ``[..., H, W, 2]`` in ``(dy, dx)``.
    """
    map_ = as_tensor(map_)
    H, W = map_.shape[-3:-1]
    flow_xy, icache = _flow_forward(as_tensor(interior), as_tensor(boundary), as_tensor(displacements),
                                    H, W, order, regularization, fixed_sites)
    grid = _pixel_grid(H, W)
    xs = grid[:, 0] - flow_xy[..., 0]
    ys = grid[:, 1] - flow_xy[..., 1]
    out = bilinear_sample(map_, ys, xs).reshape(map_.shape)
    flow = flow_xy[..., ::-1].reshape(map_.shape[:-1] + (2,))
    cache = _WarpCache(map_, ys, xs, icache, fixed_sites, len(interior))
    return out, flow, cache


def warp_backward(cache: _WarpCache, g):
    """Cotangents ``(dmap, ddisplacements)`` for :func:`warp_forward`."""
    g = as_tensor(g)
    C = cache.map.shape[-1]
    dmap, dys, dxs = bilinear_sample_vjp(g.reshape(cache.ys.shape + (C,)), cache.map, cache.ys, cache.xs)
    gflow = -np.stack([dxs, dys], axis=-1)  # (dx, dy) per pixel
    gsites, gvals, _ = _interp_backward(cache.interp, gflow, need_sites=not cache.fixed_sites)
    n = cache.n_interior
    ddisp = gvals[..., :n, :]
    if gsites is not None:
        ddisp = ddisp + gsites[..., :n, :]
    return dmap, ddisp


def sparse_warp(map_, cps: ControlPointSet, order: int = DEFAULT_ORDER,
                regularization: float = DEFAULT_REGULARIZATION, fixed_sites: bool = False) -> np.ndarray:
    """Warp ``map_`` so content at each control point lands at its destination.

    ``out[y, x] = map_[(y, x) - flow(y, x)]`` with zero fill outside the map.
    """
    if not np.all(np.isfinite(cps.destinations)):
        raise ValueError("control point destinations must be finite")
    out, _, _ = warp_forward(map_, cps.interior, cps.boundary, cps.displacements,
                             order, regularization, fixed_sites)
    return out


def sparse_warp_vjp(g, map_, cps: ControlPointSet, order: int = DEFAULT_ORDER,
                    regularization: float = DEFAULT_REGULARIZATION, fixed_sites: bool = False):
    _, _, cache = warp_forward(map_, cps.interior, cps.boundary, cps.displacements,
                               order, regularization, fixed_sites)
    return warp_backward(cache, g)
