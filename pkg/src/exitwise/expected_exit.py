"""Expected exit times E tau^x for a single region.

v(x) = E tau^x solves the Dirichlet problem L v = -1 with v = 0 on the
boundary, where L = sum_k f_k d_k + (1/2) sum_kl b_kl d_k d_l and
b = beta beta^T.  In one dimension the solver discretizes with central
differences on a uniform grid and does a banded solve; in any dimension the
Monte Carlo estimator reruns the coupled-exit kernel with both clocks on the
same region and reads the first clock.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .model import Ball, Box, ConfigurationError, DiffusionModel, Interval, Region, \
    as_point, boundary_intersection_points, _bounds_1d
from .exit_sim import MCEstimate, ROLE_MFPT, ROLE_SUP, SimConfig, _mc_mean_reduce

__all__ = [
    "ExpectedExitField",
    "SupEstimate",
    "closed_form_interval_bm",
    "solve_dirichlet_fd_1d",
    "estimate_expected_exit_mc",
    "sup_expected_exit",
]


def closed_form_interval_bm(x, lo: float, hi: float, sigma: float = 1.0):
    """E tau^x = (x - lo)(hi - x) / sigma^2 for scaled Brownian motion."""
    lo, hi, sigma = float(lo), float(hi), float(sigma)
    if not lo < hi:
        raise ConfigurationError(f"need lo < hi, got ({lo}, {hi})")
    if not sigma > 0.0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa < lo) or np.any(xa > hi):
        raise ConfigurationError(f"x={x!r} outside [{lo}, {hi}]")
    v = (xa - lo) * (hi - xa) / sigma**2
    return float(v) if v.ndim == 0 else v


@dataclass(frozen=True, eq=False)
class ExpectedExitField:
    """Grid solution of the expected-exit Dirichlet problem on an interval.

    Evaluation interpolates linearly; outside the interval it clamps to the
    boundary values, which are exactly zero.
    """

    region: Region
    grid: np.ndarray
    values: np.ndarray

    def evaluate(self, x):
        xa = np.asarray(x, dtype=np.float64)
        v = np.interp(xa, self.grid, self.values)
        return float(v) if v.ndim == 0 else v

    __call__ = evaluate

    @property
    def max_value(self) -> float:
        return float(self.values.max())


def solve_dirichlet_fd_1d(model: DiffusionModel, region: Region, m: int = 1001) -> ExpectedExitField:
    """Solve f v' + (b/2) v'' = -1, v(lo) = v(hi) = 0 on m grid nodes.

    m counts every node including both boundary nodes.  Central differences
    keep second-order accuracy but require the mesh Peclet number
    h |f| / b <= 1 everywhere; violations raise with a workable node count.
    """
    if model.n != 1:
        raise ConfigurationError(f"finite differences need a 1-D model, got n={model.n}")
    if region.dim != 1:
        raise ConfigurationError(f"finite differences need a 1-D region, got dim={region.dim}")
    if not isinstance(m, int) or m < 3:
        raise ConfigurationError(f"need at least 3 grid nodes, got {m!r}")
    lo, hi = _bounds_1d(region)
    grid = np.linspace(lo, hi, m)
    h = (hi - lo) / (m - 1)
    x_int = grid[1:-1].reshape(-1, 1)
    f = model.drift_at(x_int)[:, 0]
    beta = model.diffusion_at(x_int)
    b = np.einsum("ijk,ijk->i", beta, beta)  # beta beta^T, scalar in 1-D
    peclet = h * np.abs(f) / b
    worst = float(peclet.max())
    if worst > 1.0 + 1e-12:
        m_need = int(math.ceil((hi - lo) * float(np.max(np.abs(f) / b)))) + 2
        raise ConfigurationError(
            f"mesh Peclet number {worst:.3g} exceeds 1; use at least {m_need} nodes "
            f"for this drift/diffusion ratio")

    lower = b / (2.0 * h * h) - f / (2.0 * h)
    diag = -b / (h * h)
    upper = b / (2.0 * h * h) + f / (2.0 * h)
    ab = np.zeros((3, m - 2))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    sol = solve_banded((1, 1), ab, np.full(m - 2, -1.0))

    scale = float(np.abs(sol).max()) or 1.0
    if sol.min() < -1e-12 * scale:
        raise ConfigurationError(
            "expected-exit solve produced negative values; the problem is "
            "outside the solver's assumptions")
    values = np.concatenate([[0.0], np.maximum(sol, 0.0), [0.0]])
    return ExpectedExitField(region=region, grid=grid, values=values)


def estimate_expected_exit_mc(model: DiffusionModel, x, region: Region,
                              cfg: SimConfig, n: int, workers: int = 1,
                              role_tags: tuple[int, ...] = (ROLE_MFPT,)) -> MCEstimate:
    """Monte Carlo E tau^x: the coupled kernel with both clocks on ``region``."""
    point = as_point(x, model.n)
    return _mc_mean_reduce(model, point, region, region, cfg, n, workers,
                           role_tags, "tau1")


@dataclass(frozen=True, eq=False)
class SupEstimate:
    """sup of E tau over a sampled point set, with the maximizing point."""

    value: float
    argmax: np.ndarray | None
    method: str
    n_points: int
    stderr: float | None = None
    flags: tuple[str, ...] = ()


def sup_expected_exit(model: DiffusionModel, inner: Region, outer: Region,
                      method: str, cfg: SimConfig, m: int,
                      nodes: int = 1001, n_paths: int = 20000,
                      workers: int = 1) -> SupEstimate:
    """sup over (outer's boundary inside inner) of the inner expected exit time.

    method "fd" solves the 1-D Dirichlet problem once and reads it at every
    point; "mc" estimates each point separately on its own seeded substream
    (derived from the inner region's fingerprint, so swapping the roles of
    the two regions in a bound evaluation reuses identical streams).
    An empty intersection gives sup = 0 with no argmax.
    """
    if method not in ("fd", "mc"):
        raise ConfigurationError(f"sup method must be 'fd' or 'mc', got {method!r}")
    points = boundary_intersection_points(inner, outer, m)
    if points.shape[0] == 0:
        return SupEstimate(value=0.0, argmax=None, method=method, n_points=0)
    if method == "fd":
        field = solve_dirichlet_fd_1d(model, inner, nodes)
        vals = field.evaluate(points[:, 0])
        j = int(np.argmax(vals))
        return SupEstimate(value=float(vals[j]), argmax=points[j].copy(),
                           method="fd", n_points=points.shape[0])
    fp = inner.fingerprint()
    best_j, best, best_err = 0, -np.inf, 0.0
    flags: tuple[str, ...] = ()
    for j in range(points.shape[0]):
        est = estimate_expected_exit_mc(model, points[j], inner, cfg, n_paths,
                                        workers=workers,
                                        role_tags=(ROLE_SUP, *fp, j))
        flags = tuple(sorted(set(flags) | set(est.flags)))
        if est.mean > best:
            best_j, best, best_err = j, est.mean, est.stderr
    return SupEstimate(value=float(best), argmax=points[best_j].copy(),
                       method="mc", n_points=points.shape[0],
                       stderr=best_err, flags=flags)
