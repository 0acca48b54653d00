"""Diffusion models, regions, and initial conditions.

The process is dy = f(y) dt + beta(y) dw on R^n, driven by a d-dimensional
Wiener process.  Regions are bounded open sets queried through signed boundary
distances (positive inside, negative outside); everything downstream (exit
clocks, expected-exit solvers, the bound harness) builds on these primitives.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "POSITION_TOL",
    "Region",
    "Interval",
    "Box",
    "Ball",
    "DiffusionModel",
    "InitialCondition",
    "brownian_motion",
    "drifted_brownian_motion",
    "constant_coefficient_model",
    "boundary_intersection_points",
    "closure_nested",
]

# Absolute slack for "point lies in the closure" checks.
POSITION_TOL = 1e-9

# Fixed entropy for the deterministic direction sets used to sample sphere
# boundaries in dimension >= 4.  A constant keeps geometry free of run seeds.
_BOUNDARY_SEED = 0x5EEDB0DD


class ConfigurationError(ValueError):
    """Invalid model, region, or run configuration."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigurationError(message)


def as_point(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to a float64 point of shape (dim,)."""
    p = np.asarray(x, dtype=np.float64).reshape(-1)
    _require(p.shape == (dim,), f"expected a point of dimension {dim}, got shape {np.shape(x)}")
    _require(bool(np.all(np.isfinite(p))), "point coordinates must be finite")
    return p


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to a (k, dim) batch; returns (batch, was_single_point).

    For dim == 1 a 1-D array of length k is read as k scalar points.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        _require(dim == 1, f"scalar point given for dimension {dim}")
        return a.reshape(1, 1), True
    if a.ndim == 1:
        if dim == 1:
            return a.reshape(-1, 1), a.shape[0] == 1
        _require(a.shape[0] == dim, f"expected point of dimension {dim}, got shape {a.shape}")
        return a.reshape(1, dim), True
    _require(a.ndim == 2 and a.shape[1] == dim,
             f"expected points of shape (k, {dim}), got {a.shape}")
    return a, False


class Region:
    """Bounded open region.  Membership is strict: the boundary is excluded.

    Subclasses implement the raw batch methods (leading underscore); the
    public wrappers accept single points or (k, n) batches.
    """

    @property
    def dim(self) -> int:
        raise NotImplementedError

    # -- raw batch API (P has shape (k, dim)) --------------------------------

    def _boundary_distance(self, P: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def segment_exit(self, x0: np.ndarray, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First boundary crossing along segments x0 -> x1.

        Both arguments are (k, dim) with x0 strictly inside and x1 outside or
        on the boundary.  Returns (s, points): crossing fractions in (0, 1]
        and the crossing points snapped exactly onto the boundary.
        """
        raise NotImplementedError

    # -- public API ----------------------------------------------------------

    def boundary_distance(self, x):
        """Signed distance to the boundary: positive inside, negative outside."""
        P, single = _as_batch(x, self.dim)
        bd = self._boundary_distance(P)
        return float(bd[0]) if single else bd

    def contains(self, x):
        """Strict interior membership, consistent with boundary_distance > 0."""
        P, single = _as_batch(x, self.dim)
        inside = self._boundary_distance(P) > 0.0
        return bool(inside[0]) if single else inside

    def diameter(self) -> float:
        raise NotImplementedError

    def finite_boundary(self) -> np.ndarray | None:
        """The boundary as an exact finite point set, or None if continuous."""
        return None

    def boundary_candidates(self, budget: int) -> np.ndarray:
        """Deterministic points on the boundary, roughly ``budget`` of them."""
        raise NotImplementedError

    def sample_interior(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform draws from the region, shape (size, dim)."""
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> tuple[int, ...]:
        """Stable integer tuple identifying shape and coordinates exactly."""
        kind, values = self._fingerprint_parts()
        bits = np.asarray(values, dtype=np.float64).view(np.uint64)
        return (kind, *(int(b) for b in bits))

    def _fingerprint_parts(self) -> tuple[int, np.ndarray]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Interval(Region):
    """Open interval (lo, hi) on the line."""

    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        _require(math.isfinite(self.lo) and math.isfinite(self.hi),
                 "interval endpoints must be finite")
        _require(self.lo < self.hi, f"interval needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def dim(self) -> int:
        return 1

    def _boundary_distance(self, P):
        x = P[:, 0]
        return np.minimum(x - self.lo, self.hi - x)

    def segment_exit(self, x0, x1):
        a, b = x0[:, 0], x1[:, 0]
        low = b <= self.lo
        barrier = np.where(low, self.lo, self.hi)
        s = (barrier - a) / (b - a)
        return s, barrier.reshape(-1, 1)

    def diameter(self) -> float:
        return self.hi - self.lo

    def finite_boundary(self):
        return np.array([[self.lo], [self.hi]])

    def boundary_candidates(self, budget):
        return self.finite_boundary()

    def sample_interior(self, rng, size):
        return (self.lo + (self.hi - self.lo) * rng.random(size)).reshape(-1, 1)

    def describe(self) -> dict:
        return {"kind": "interval", "lo": self.lo, "hi": self.hi}

    def _fingerprint_parts(self):
        return 1, np.array([self.lo, self.hi])


@dataclass(frozen=True, eq=False)
class Box(Region):
    """Open axis-aligned box, the product of open intervals (lo_k, hi_k).

    boundary_distance is the signed L-infinity style quantity
    min_k min(x_k - lo_k, hi_k - x_k); for exterior points its magnitude is
    the largest per-axis violation, not the Euclidean distance.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        _require(lo.size >= 1 and lo.shape == hi.shape, "box needs matching lo/hi vectors")
        _require(bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))),
                 "box bounds must be finite")
        _require(bool(np.all(lo < hi)), "box needs lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def _boundary_distance(self, P):
        return np.minimum(P - self.lo, self.hi - P).min(axis=1)

    def segment_exit(self, x0, x1):
        d = x1 - x0
        with np.errstate(divide="ignore", invalid="ignore"):
            s_lo = np.where(x1 <= self.lo, (self.lo - x0) / d, np.inf)
            s_hi = np.where(x1 >= self.hi, (self.hi - x0) / d, np.inf)
        s_axis = np.minimum(s_lo, s_hi)
        axis = np.argmin(s_axis, axis=1)
        rows = np.arange(x0.shape[0])
        s = s_axis[rows, axis]
        pts = x0 + s[:, None] * d
        # Pin the crossed coordinate to its face and keep the rest in range.
        face_lo = s_lo[rows, axis] <= s_hi[rows, axis]
        pts[rows, axis] = np.where(face_lo, self.lo[axis], self.hi[axis])
        other = np.ones_like(pts, dtype=bool)
        other[rows, axis] = False
        pts = np.where(other, np.clip(pts, self.lo, self.hi), pts)
        return s, pts

    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def finite_boundary(self):
        if self.dim == 1:
            return np.array([[self.lo[0]], [self.hi[0]]])
        return None

    def boundary_candidates(self, budget):
        fb = self.finite_boundary()
        if fb is not None:
            return fb
        n = self.dim
        per_face = max(1, -(-budget // (2 * n)))
        g = max(1, math.ceil(per_face ** (1.0 / (n - 1))))
        mids = [self.lo[k] + (np.arange(g) + 0.5) * (self.hi[k] - self.lo[k]) / g
                for k in range(n)]
        pts = []
        for k in range(n):
            grids = [mids[j] for j in range(n) if j != k]
            mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, n - 1)
            for val in (self.lo[k], self.hi[k]):
                face = np.empty((mesh.shape[0], n))
                face[:, k] = val
                face[:, [j for j in range(n) if j != k]] = mesh
                pts.append(face)
        return np.concatenate(pts, axis=0)

    def sample_interior(self, rng, size):
        return self.lo + (self.hi - self.lo) * rng.random((size, self.dim))

    def describe(self) -> dict:
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def _fingerprint_parts(self):
        return 2, np.concatenate([self.lo, self.hi])


@dataclass(frozen=True, eq=False)
class Ball(Region):
    """Open Euclidean ball."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        _require(c.size >= 1 and bool(np.all(np.isfinite(c))), "ball center must be finite")
        r = float(self.radius)
        _require(math.isfinite(r) and r > 0.0, f"ball radius must be positive, got {r}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return self.center.size

    def _boundary_distance(self, P):
        return self.radius - np.linalg.norm(P - self.center, axis=1)

    def segment_exit(self, x0, x1):
        # |x0 + s*d - c|^2 = r^2, take the root in (0, 1].
        d = x1 - x0
        v = x0 - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", d, v)
        c0 = np.einsum("ij,ij->i", v, v) - self.radius**2
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c0, 0.0))
        s = (-b + disc) / (2.0 * a)
        q = x0 + s[:, None] * d
        rel = q - self.center
        nrm = np.linalg.norm(rel, axis=1, keepdims=True)
        pts = self.center + self.radius * rel / nrm
        return s, pts

    def diameter(self) -> float:
        return 2.0 * self.radius

    def finite_boundary(self):
        if self.dim == 1:
            c, r = self.center[0], self.radius
            return np.array([[c - r], [c + r]])
        return None

    def boundary_candidates(self, budget):
        fb = self.finite_boundary()
        if fb is not None:
            return fb
        n = self.dim
        if n == 2:
            theta = 2.0 * np.pi * (np.arange(budget) + 0.5) / budget
            dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        elif n == 3:
            # Fibonacci sphere: near-uniform, fully deterministic.
            i = np.arange(budget) + 0.5
            phi = np.pi * (3.0 - np.sqrt(5.0)) * i
            z = 1.0 - 2.0 * i / budget
            rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
            dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([_BOUNDARY_SEED, n, budget]))
            g = rng.standard_normal((budget, n))
            dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
        return self.center + self.radius * dirs

    def sample_interior(self, rng, size):
        g = rng.standard_normal((size, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        u = rng.random(size) ** (1.0 / self.dim)
        return self.center + self.radius * u[:, None] * g

    def describe(self) -> dict:
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}

    def _fingerprint_parts(self):
        return 3, np.concatenate([self.center, [self.radius]])


def boundary_intersection_points(inner: Region, outer: Region, m: int) -> np.ndarray:
    """Points of ``outer``'s boundary lying strictly inside ``inner``.

    Returns an array of shape (k, n).  When the outer boundary is an exact
    finite set (any 1-D region) the full intersection is returned regardless
    of ``m``; otherwise deterministic candidates are generated and thinned to
    at most ``m`` points.  k may be 0 (empty intersection).
    """
    _require(inner.dim == outer.dim,
             f"region dimensions differ: {inner.dim} vs {outer.dim}")
    _require(m >= 1, f"need m >= 1 boundary points, got {m}")
    fb = outer.finite_boundary()
    if fb is not None:
        keep = fb[inner.contains(fb)]
        return keep
    cand = outer.boundary_candidates(max(64, 8 * m))
    keep = cand[inner.contains(cand)]
    if keep.shape[0] > m:
        idx = np.unique(np.round(np.linspace(0, keep.shape[0] - 1, m)).astype(int))
        keep = keep[idx]
    return keep


def _bounds_1d(region: Region) -> tuple[float, float]:
    if isinstance(region, Interval):
        return region.lo, region.hi
    if isinstance(region, Box):
        return float(region.lo[0]), float(region.hi[0])
    if isinstance(region, Ball):
        return region.center[0] - region.radius, region.center[0] + region.radius
    raise NotImplementedError(type(region).__name__)


def closure_nested(inner: Region, outer: Region) -> bool:
    """True when closure(inner) is strictly contained in ``outer``.

    Exact for every pairing of the shipped shapes; used for report flags and
    for ordering checks, never for the simulation itself.
    """
    if inner.dim != outer.dim:
        return False
    if inner.dim == 1:
        ilo, ihi = _bounds_1d(inner)
        olo, ohi = _bounds_1d(outer)
        return olo < ilo and ihi < ohi
    if isinstance(inner, Ball) and isinstance(outer, Ball):
        gap = np.linalg.norm(inner.center - outer.center) + inner.radius
        return bool(gap < outer.radius)
    if isinstance(inner, Box) and isinstance(outer, Box):
        return bool(np.all(outer.lo < inner.lo) and np.all(inner.hi < outer.hi))
    if isinstance(inner, Ball) and isinstance(outer, Box):
        return bool(np.all(outer.lo < inner.center - inner.radius)
                    and np.all(inner.center + inner.radius < outer.hi))
    if isinstance(inner, Box) and isinstance(outer, Ball):
        corners = np.array(list(itertools.product(*zip(inner.lo, inner.hi))))
        dist = np.linalg.norm(corners - outer.center, axis=1)
        return bool(np.max(dist) < outer.radius)
    return False


class _ConstantDrift:
    """Constant drift vector; a class so worker processes can pickle it."""

    def __init__(self, vec: np.ndarray):
        self.vec = np.asarray(vec, dtype=np.float64).reshape(-1)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.vec, y.shape)


class _ConstantDiffusion:
    def __init__(self, mat: np.ndarray):
        self.mat = np.asarray(mat, dtype=np.float64)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.mat, (y.shape[0],) + self.mat.shape)


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Time-homogeneous diffusion dy = f(y) dt + beta(y) dw.

    ``drift`` maps a (k, n) state batch to (k, n); ``diffusion`` maps it to
    (k, n, d).  ``ellipticity_floor`` is the claimed uniform lower bound c > 0
    on the eigenvalues of b = beta beta^T over the domain of interest; it is
    spot-checked, not proven.
    """

    n: int
    d: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    ellipticity_floor: float

    def __post_init__(self):
        _require(isinstance(self.n, int) and self.n >= 1, f"state dimension n must be >= 1, got {self.n}")
        _require(isinstance(self.d, int) and self.d >= 1, f"noise dimension d must be >= 1, got {self.d}")
        _require(callable(self.drift) and callable(self.diffusion),
                 "drift and diffusion must be callables")
        _require(math.isfinite(self.ellipticity_floor) and self.ellipticity_floor > 0.0,
                 f"ellipticity floor must be positive, got {self.ellipticity_floor}")

    def drift_at(self, y: np.ndarray) -> np.ndarray:
        out = np.asarray(self.drift(y), dtype=np.float64)
        _require(out.shape == y.shape, f"drift returned shape {out.shape}, expected {y.shape}")
        return out

    def diffusion_at(self, y: np.ndarray) -> np.ndarray:
        out = np.asarray(self.diffusion(y), dtype=np.float64)
        want = (y.shape[0], self.n, self.d)
        _require(out.shape == want, f"diffusion returned shape {out.shape}, expected {want}")
        return out

    def ellipticity_margin(self, points: np.ndarray) -> float:
        """min over points of (smallest eigenvalue of beta beta^T) - floor."""
        P, _ = _as_batch(points, self.n)
        beta = self.diffusion_at(P)
        b = beta @ np.transpose(beta, (0, 2, 1))
        eig = np.linalg.eigvalsh(b)[:, 0]
        return float(np.min(eig) - self.ellipticity_floor)

    def assert_elliptic(self, points: np.ndarray, tol: float = 1e-10) -> None:
        margin = self.ellipticity_margin(points)
        if margin < -tol * max(1.0, self.ellipticity_floor):
            raise ConfigurationError(
                "ellipticity floor violated: smallest diffusion eigenvalue falls "
                f"{-margin:.3e} below the declared floor {self.ellipticity_floor}")


def brownian_motion(sigma: float = 1.0, dim: int = 1) -> DiffusionModel:
    """Standard Brownian motion scaled by sigma, b = sigma^2 I."""
    sigma = float(sigma)
    _require(sigma > 0.0, f"sigma must be positive, got {sigma}")
    return DiffusionModel(
        n=dim, d=dim,
        drift=_ConstantDrift(np.zeros(dim)),
        diffusion=_ConstantDiffusion(sigma * np.eye(dim)),
        ellipticity_floor=sigma**2,
    )


def drifted_brownian_motion(mu, sigma: float = 1.0, dim: int = 1) -> DiffusionModel:
    """Brownian motion with constant drift mu (scalar broadcasts)."""
    sigma = float(sigma)
    _require(sigma > 0.0, f"sigma must be positive, got {sigma}")
    vec = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,)).copy()
    return DiffusionModel(
        n=dim, d=dim,
        drift=_ConstantDrift(vec),
        diffusion=_ConstantDiffusion(sigma * np.eye(dim)),
        ellipticity_floor=sigma**2,
    )


def constant_coefficient_model(drift, diffusion) -> DiffusionModel:
    """Arbitrary constant drift vector and diffusion matrix (n x d)."""
    vec = np.asarray(drift, dtype=np.float64).reshape(-1)
    mat = np.asarray(diffusion, dtype=np.float64)
    _require(mat.ndim == 2 and mat.shape[0] == vec.size,
             f"diffusion must be a matrix with {vec.size} rows, got shape {mat.shape}")
    b = mat @ mat.T
    floor = float(np.linalg.eigvalsh(b)[0])
    _require(floor > 0.0, "diffusion matrix is degenerate (beta beta^T not positive definite)")
    return DiffusionModel(
        n=vec.size, d=mat.shape[1],
        drift=_ConstantDrift(vec),
        diffusion=_ConstantDiffusion(mat),
        ellipticity_floor=floor,
    )


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Start distribution: a finite weighted mixture of points.

    ``points`` has shape (k, n); ``weights`` is positive and sums to 1.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        _require(pts.ndim == 2 and pts.shape[0] >= 1, "initial condition needs at least one point")
        _require(bool(np.all(np.isfinite(pts))), "initial points must be finite")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        _require(w.shape == (pts.shape[0],), "one weight per initial point required")
        _require(bool(np.all(w > 0.0)), "initial weights must be positive")
        total = float(w.sum())
        _require(math.isfinite(total) and abs(total - 1.0) <= 1e-9,
                 f"initial weights must sum to 1, got {total}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / total)

    @classmethod
    def fixed(cls, point) -> "InitialCondition":
        pts = np.asarray(point, dtype=np.float64).reshape(1, -1)
        return cls(points=pts, weights=np.array([1.0]))

    @classmethod
    def mixture(cls, points, weights) -> "InitialCondition":
        return cls(points=np.asarray(points, dtype=np.float64), weights=weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Sample starts; a single fixed point consumes no randomness."""
        if self.points.shape[0] == 1:
            return np.broadcast_to(self.points[0], (size, self.dim)).copy()
        idx = rng.choice(self.points.shape[0], size=size, p=self.weights)
        return self.points[idx]

    def require_in_closure(self, *regions: Region, tol: float = POSITION_TOL) -> None:
        for r in regions:
            bd = r.boundary_distance(self.points)
            bd = np.atleast_1d(bd)
            worst = float(bd.min())
            if worst < -tol:
                raise ConfigurationError(
                    "initial condition lies outside the closure of region "
                    f"{r.describe()} by {-worst:.3e} (tolerance {tol})")

    def describe(self) -> dict:
        if self.points.shape[0] == 1:
            return {"point": self.points[0].tolist()}
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}
