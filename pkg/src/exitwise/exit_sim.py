"""Coupled first-exit-time simulation.

One Euler path per sample, two exit clocks reading it: the path advances with
drift and diffusion frozen at each step start, both regions watch the same
trajectory (and the same Wiener increments), and the path keeps going after
the first region is left until the second clock fires or t_max censors it.

Exit detection per step, per still-active clock:
- if the step endpoint has left the region, the exit is "discrete": the time
  is t + s*dt with s the exact segment/boundary crossing fraction, and the
  exit point is snapped onto the boundary;
- otherwise a Brownian-bridge test fires with probability
  p = exp(-2*d0*d1 / (sigma_eff^2 * dt)) (exact two-barrier form for
  intervals, per-face sums capped at 1 for boxes, tangent-plane approximation
  for balls), the time is t + dt, and the exit point is the nearest boundary
  point.  Both clocks compare their probabilities against ONE shared uniform
  per (path, step), so a region nested inside another can never be credited
  with the later exit on any individual sample, and identical regions get
  bitwise-identical clocks.

Determinism: work is cut into fixed-size shards; shard i draws from
default_rng(SeedSequence([seed, role, i])) in a fixed order (initial points,
then per step: the Gaussian block, near-boundary subdivision Gaussians, the
uniform block, extra sub-step uniforms), and reductions accumulate per-shard
sums in ascending shard order.  Worker processes only redistribute shards, so
results are byte-identical for any worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .model import (
    Ball,
    Box,
    ConfigurationError,
    DiffusionModel,
    InitialCondition,
    Interval,
    POSITION_TOL,
    Region,
    as_point,
)

__all__ = [
    "SimConfig",
    "CoupledExitSample",
    "CoupledExitBatch",
    "MCEstimate",
    "bridge_crossing_probability",
    "simulate_coupled_exit",
    "sample_coupled_exits",
    "estimate_mean_abs_gap",
    "default_t_max",
]

# Stream roles keep independent estimators on independent substreams.
ROLE_SINGLE = 0
ROLE_GAP = 1
ROLE_MFPT = 2
ROLE_IDENTITY = 3
ROLE_SUP = 4
ROLE_PROBE = 5

# Censoring above this rate flags the estimate.
CENSOR_WARN_RATE = 1e-3
HIGH_CENSOR_FLAG = "high_censor_rate"

_MASK64 = (1 << 64) - 1
_SUBSTEPS = 4


@dataclass(frozen=True)
class SimConfig:
    """Time-stepping and detection settings for one run.

    t_max = None derives the censor horizon from the model and regions.
    substep_threshold > 0 turns on near-boundary refinement: a path starting
    a step within threshold * sqrt(dt) * noise_scale of an active boundary
    gets its Wiener increment bridged into 4 sub-segments and detection runs
    on each (the endpoint state is unchanged).  shard_size fixes the
    reproducibility granularity and must not be tuned per run.
    """

    dt: float
    seed: int
    t_max: float | None = None
    bridge_correction: bool = True
    substep_threshold: float = 0.0
    shard_size: int = 4096

    def __post_init__(self):
        if not (isinstance(self.dt, (int, float)) and math.isfinite(self.dt) and self.dt > 0.0):
            raise ConfigurationError(f"dt must be a positive number, got {self.dt!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigurationError(f"seed must be an integer, got {self.seed!r}")
        if self.t_max is not None:
            if not (math.isfinite(self.t_max) and self.t_max > self.dt):
                raise ConfigurationError(
                    f"t_max must exceed dt={self.dt}, got {self.t_max!r}")
        if not (math.isfinite(self.substep_threshold) and self.substep_threshold >= 0.0):
            raise ConfigurationError(
                f"substep_threshold must be >= 0, got {self.substep_threshold!r}")
        if not isinstance(self.shard_size, int) or self.shard_size < 1:
            raise ConfigurationError(f"shard_size must be a positive integer, got {self.shard_size!r}")


@dataclass(frozen=True, eq=False)
class CoupledExitSample:
    """Both exit clocks read off one trajectory."""

    tau1: float
    tau2: float
    exit_point1: np.ndarray
    exit_point2: np.ndarray
    censored1: bool
    censored2: bool

    @property
    def e1(self) -> int:
        """Indicator of the first clock firing strictly later (ties give 0)."""
        return int(self.tau1 > self.tau2)

    @property
    def e2(self) -> int:
        return int(self.tau2 > self.tau1)

    @property
    def gap(self) -> float:
        return abs(self.tau1 - self.tau2)


@dataclass(frozen=True, eq=False)
class CoupledExitBatch:
    """Column arrays of coupled exit samples, in shard order."""

    tau1: np.ndarray
    tau2: np.ndarray
    exit_point1: np.ndarray
    exit_point2: np.ndarray
    censored1: np.ndarray
    censored2: np.ndarray

    @property
    def n(self) -> int:
        return self.tau1.shape[0]

    @property
    def e1(self) -> np.ndarray:
        return self.tau1 > self.tau2

    @property
    def e2(self) -> np.ndarray:
        return self.tau2 > self.tau1

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.tau1 - self.tau2)

    def sample(self, i: int) -> CoupledExitSample:
        return CoupledExitSample(
            tau1=float(self.tau1[i]), tau2=float(self.tau2[i]),
            exit_point1=self.exit_point1[i].copy(), exit_point2=self.exit_point2[i].copy(),
            censored1=bool(self.censored1[i]), censored2=bool(self.censored2[i]),
        )


@dataclass(frozen=True)
class MCEstimate:
    """Monte Carlo mean with its sampling error and censoring bookkeeping."""

    mean: float
    stderr: float
    n_samples: int
    censor_rate: float
    flags: tuple[str, ...] = ()

    @property
    def confidence_halfwidth_95(self) -> float:
        return 1.96 * self.stderr


def bridge_crossing_probability(x0, x1, barrier, sigma_eff, dt):
    """Probability that a Brownian bridge from x0 to x1 over dt crosses a level.

    With d0 = x0 - barrier and d1 = x1 - barrier on the same side, the law is
    exp(-2*d0*d1 / (sigma_eff^2 * dt)); if the endpoints straddle the barrier
    (or touch it) the crossing already happened and the value is 1.
    """
    sigma_eff = float(sigma_eff)
    dt = float(dt)
    if not (sigma_eff > 0.0 and math.isfinite(sigma_eff)):
        raise ConfigurationError(f"sigma_eff must be positive, got {sigma_eff}")
    if not (dt > 0.0 and math.isfinite(dt)):
        raise ConfigurationError(f"dt must be positive, got {dt}")
    d0 = np.asarray(x0, dtype=np.float64) - barrier
    d1 = np.asarray(x1, dtype=np.float64) - barrier
    with np.errstate(under="ignore"):
        p = np.where(d0 * d1 <= 0.0, 1.0,
                     np.exp(-2.0 * d0 * d1 / (sigma_eff**2 * dt)))
    return float(p) if p.ndim == 0 else p


def default_t_max(model: DiffusionModel, r1: Region, r2: Region) -> float:
    """Censor horizon: 200 x the diffusive crossing-time scale of the regions."""
    scale = max(r.diameter() ** 2 * model.n / (2.0 * model.ellipticity_floor)
                for r in (r1, r2))
    return 200.0 * scale


def _resolve_t_max(cfg: SimConfig, model, r1, r2) -> float:
    t_max = cfg.t_max if cfg.t_max is not None else default_t_max(model, r1, r2)
    if t_max <= cfg.dt:
        raise ConfigurationError(f"t_max={t_max} must exceed dt={cfg.dt}")
    return t_max


def _stream(seed: int, *tags: int) -> np.random.Generator:
    entropy = [seed & _MASK64] + [int(t) & _MASK64 for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class _GeneratorDraws:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def normals(self, k: int, d: int) -> np.ndarray:
        return self.rng.standard_normal((k, d))

    def uniforms(self, k: int) -> np.ndarray:
        return self.rng.random(k)


class _InjectedDraws:
    """Gaussians from a fixed pool, uniforms from a generator (testing hook)."""

    def __init__(self, normals: np.ndarray, rng: np.random.Generator):
        pool = np.asarray(normals, dtype=np.float64)
        if pool.ndim == 1:
            pool = pool.reshape(-1, 1)
        self.pool = pool
        self.pos = 0
        self.rng = rng

    def normals(self, k: int, d: int) -> np.ndarray:
        if self.pos + k > self.pool.shape[0] or self.pool.shape[1] != d:
            raise ConfigurationError(
                "injected increments exhausted or of wrong width "
                f"(need {k}x{d} at offset {self.pos}, pool is {self.pool.shape})")
        out = self.pool[self.pos:self.pos + k]
        self.pos += k
        return out

    def uniforms(self, k: int) -> np.ndarray:
        return self.rng.random(k)


def _bridge_probability(region: Region, x0, x1, bmat, hs) -> np.ndarray:
    with np.errstate(under="ignore"):
        if isinstance(region, Interval):
            s2 = bmat[:, 0, 0] * hs
            a0, a1 = x0[:, 0], x1[:, 0]
            p = (np.exp(-2.0 * (a0 - region.lo) * (a1 - region.lo) / s2)
                 + np.exp(-2.0 * (region.hi - a0) * (region.hi - a1) / s2))
            return np.minimum(p, 1.0)
        if isinstance(region, Box):
            s2 = np.einsum("ijj->ij", bmat) * hs
            p = (np.exp(-2.0 * (x0 - region.lo) * (x1 - region.lo) / s2)
                 + np.exp(-2.0 * (region.hi - x0) * (region.hi - x1) / s2)).sum(axis=1)
            return np.minimum(p, 1.0)
        if isinstance(region, Ball):
            v = x0 - region.center
            rho = np.linalg.norm(v, axis=1)
            u = np.where(rho[:, None] > 0.0, v / np.maximum(rho, 1e-300)[:, None], 0.0)
            u[rho == 0.0, 0] = 1.0
            d0 = region.radius - rho
            d1 = region.radius - np.einsum("ij,ij->i", x1 - region.center, u)
            s2 = np.einsum("ij,ijk,ik->i", u, bmat, u) * hs
            return np.exp(-2.0 * d0 * d1 / s2)
    raise NotImplementedError(type(region).__name__)


def _bridge_exit_point(region: Region, x0, x1, bmat) -> np.ndarray:
    if isinstance(region, Interval):
        a0, a1 = x0[:, 0], x1[:, 0]
        low = (a0 - region.lo) * (a1 - region.lo) <= (region.hi - a0) * (region.hi - a1)
        return np.where(low, region.lo, region.hi).reshape(-1, 1)
    if isinstance(region, Box):
        diag = np.einsum("ijj->ij", bmat)
        score_lo = (x0 - region.lo) * (x1 - region.lo) / diag
        score_hi = (region.hi - x0) * (region.hi - x1) / diag
        score = np.concatenate([score_lo, score_hi], axis=1)
        j = np.argmin(score, axis=1)
        n = region.dim
        rows = np.arange(x0.shape[0])
        pts = np.clip((x0 + x1) / 2.0, region.lo, region.hi)
        axis = j % n
        face_val = np.where(j < n, region.lo[axis], region.hi[axis])
        pts[rows, axis] = face_val
        return pts
    if isinstance(region, Ball):
        v = x0 - region.center
        rho = np.linalg.norm(v, axis=1, keepdims=True)
        u = np.where(rho > 0.0, v / np.maximum(rho, 1e-300), 0.0)
        u[rho[:, 0] == 0.0, 0] = 1.0
        return region.center + region.radius * u
    raise NotImplementedError(type(region).__name__)


def _simulate_batch(model: DiffusionModel, starts: np.ndarray,
                    r1: Region, r2: Region, cfg: SimConfig, t_max: float,
                    draws) -> dict:
    """Run one batch of coupled-exit paths to completion.

    Returns column arrays tau (2, k), pts (2, k, n), cens (2, k).
    """
    regions = (r1, r2)
    k_total = starts.shape[0]
    nn = model.n
    tau = np.zeros((2, k_total))
    pts = np.stack([starts.copy(), starts.copy()])
    cens = np.zeros((2, k_total), dtype=bool)

    active = np.empty((2, k_total), dtype=bool)
    for c, r in enumerate(regions):
        bd = r._boundary_distance(starts)
        worst = float(bd.min()) if k_total else 0.0
        if worst < -POSITION_TOL:
            raise ConfigurationError(
                f"start lies outside the closure of region {r.describe()} by {-worst:.3e}")
        active[c] = bd > 0.0  # on-boundary starts fire at time zero

    alive_idx = np.flatnonzero(active.any(axis=0))
    y = starts[alive_idx].copy()
    act = active[:, alive_idx].copy()
    dt = cfg.dt
    bridge = cfg.bridge_correction
    sub_thresh = cfg.substep_threshold

    def _process_segment(pidx, x0, x1, bsub, hs, t_seg, u):
        # pidx: indices into the current alive arrays; x0/x1/bsub/u are the
        # corresponding per-path slices for this (sub-)segment.
        for c in (0, 1):
            r = regions[c]
            rows = np.flatnonzero(act[c, pidx])
            if rows.size == 0:
                continue
            bd1 = r._boundary_distance(x1[rows])
            out = bd1 <= 0.0
            if out.any():
                rr = rows[out]
                s, q = r.segment_exit(x0[rr], x1[rr])
                glob = alive_idx[pidx[rr]]
                tau[c, glob] = t_seg + s * hs
                pts[c, glob] = q
                act[c, pidx[rr]] = False
            if bridge and (~out).any():
                rr = rows[~out]
                p = _bridge_probability(r, x0[rr], x1[rr], bsub[rr], hs)
                fire = u[rr] < p
                if fire.any():
                    ff = rr[fire]
                    q = _bridge_exit_point(r, x0[ff], x1[ff], bsub[ff])
                    glob = alive_idx[pidx[ff]]
                    tau[c, glob] = t_seg + hs
                    pts[c, glob] = q
                    act[c, pidx[ff]] = False

    step = 0
    while alive_idx.size:
        t0 = step * dt
        if t0 >= t_max:
            break
        h = min(dt, t_max - t0)
        m = y.shape[0]
        sqh = math.sqrt(h)

        Z = draws.normals(m, model.d)
        f = model.drift_at(y)
        B = model.diffusion_at(y)
        bmat = B @ np.transpose(B, (0, 2, 1))
        W_full = Z * sqh
        y_end = y + f * h + np.einsum("ijk,ik->ij", B, W_full)

        if sub_thresh > 0.0:
            noise = np.sqrt(np.einsum("ijj->ij", bmat).max(axis=1)) * sqh
            near = np.zeros(m, dtype=bool)
            for c in (0, 1):
                bd0 = regions[c]._boundary_distance(y)
                near |= act[c] & (bd0 < sub_thresh * noise)
            near_idx = np.flatnonzero(near)
            far_idx = np.flatnonzero(~near)
        else:
            near_idx = np.empty(0, dtype=np.intp)
            far_idx = np.arange(m)

        if near_idx.size:
            xi = draws.normals(3 * near_idx.size, model.d).reshape(-1, 3, model.d)
        if bridge:
            U = draws.uniforms(m)
            U_extra = (draws.uniforms(3 * near_idx.size).reshape(-1, 3)
                       if near_idx.size else None)
        else:
            U = np.empty(m)
            U_extra = np.empty((near_idx.size, 3)) if near_idx.size else None

        if far_idx.size:
            _process_segment(far_idx, y[far_idx], y_end[far_idx],
                             bmat[far_idx], h, t0, U[far_idx])

        if near_idx.size:
            # Brownian-bridge refinement of the step's Wiener increment; the
            # endpoint is pinned so the dynamics are unchanged.
            Wn = W_full[near_idx]
            W2 = Wn / 2.0 + (sqh / 2.0) * xi[:, 0, :]
            W1 = W2 / 2.0 + math.sqrt(h / 8.0) * xi[:, 1, :]
            W3 = (W2 + Wn) / 2.0 + math.sqrt(h / 8.0) * xi[:, 2, :]
            fn, Bn, bn = f[near_idx], B[near_idx], bmat[near_idx]
            yn = y[near_idx]
            xs = [yn]
            for j, W in enumerate((W1, W2, W3), start=1):
                xs.append(yn + fn * (j * h / _SUBSTEPS) + np.einsum("ijk,ik->ij", Bn, W))
            xs.append(y_end[near_idx])
            hs = h / _SUBSTEPS
            for j in range(_SUBSTEPS):
                u_j = U[near_idx] if j == 0 else U_extra[:, j - 1]
                _process_segment(near_idx, xs[j], xs[j + 1], bn, hs, t0 + j * hs, u_j)

        still = act.any(axis=0)
        keep = np.flatnonzero(still)
        alive_idx = alive_idx[keep]
        y = y_end[keep]
        act = act[:, keep]
        step += 1

    for c in (0, 1):
        rem = np.flatnonzero(act[c]) if alive_idx.size else np.empty(0, dtype=np.intp)
        if rem.size:
            glob = alive_idx[rem]
            tau[c, glob] = t_max
            pts[c, glob] = y[rem]
            cens[c, glob] = True
    return {"tau": tau, "pts": pts, "cens": cens}


def _coerce_initial(initial, dim: int) -> InitialCondition:
    if isinstance(initial, InitialCondition):
        return initial
    return InitialCondition.fixed(as_point(initial, dim))


def _check_setup(model: DiffusionModel, initial: InitialCondition,
                 r1: Region, r2: Region) -> None:
    if r1.dim != model.n or r2.dim != model.n:
        raise ConfigurationError(
            f"region dimensions ({r1.dim}, {r2.dim}) must match the model state dimension {model.n}")
    if initial.dim != model.n:
        raise ConfigurationError(
            f"initial condition dimension {initial.dim} must match the model state dimension {model.n}")
    initial.require_in_closure(r1, r2)


def _shard_plan(n: int, shard_size: int) -> list[tuple[int, int]]:
    return [(sid, min(shard_size, n - sid * shard_size))
            for sid in range(-(-n // shard_size))]


def _map_shards(fn: Callable, argsets: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(argsets) <= 1:
        return [fn(*a) for a in argsets]
    return Parallel(n_jobs=workers, backend="loky")(delayed(fn)(*a) for a in argsets)


def _batch_shard(model, initial, r1, r2, cfg, t_max, role_tags, sid, count):
    rng = _stream(cfg.seed, *role_tags, sid)
    starts = initial.draw(rng, count)
    return _simulate_batch(model, starts, r1, r2, cfg, t_max, _GeneratorDraws(rng))


def _stat_shard(model, initial, r1, r2, cfg, t_max, role_tags, sid, count, which):
    out = _batch_shard(model, initial, r1, r2, cfg, t_max, role_tags, sid, count)
    if which == "gap":
        val = np.abs(out["tau"][0] - out["tau"][1])
        n_cens = int(out["cens"].any(axis=0).sum())
    else:  # first-clock exit time
        val = out["tau"][0]
        n_cens = int(out["cens"][0].sum())
    return count, float(val.sum()), float(np.dot(val, val)), n_cens


def _mc_mean_reduce(model, initial, r1, r2, cfg, n, workers, role_tags, which) -> MCEstimate:
    if not isinstance(n, int) or n < 2:
        raise ConfigurationError(f"need an integer sample count n >= 2, got {n!r}")
    initial = _coerce_initial(initial, model.n)
    _check_setup(model, initial, r1, r2)
    t_max = _resolve_t_max(cfg, model, r1, r2)
    argsets = [(model, initial, r1, r2, cfg, t_max, role_tags, sid, count, which)
               for sid, count in _shard_plan(n, cfg.shard_size)]
    parts = _map_shards(_stat_shard, argsets, workers)
    total = s1 = s2 = 0.0
    n_cens = 0
    for cnt, a, b, c in parts:  # ascending shard order: reduction is exact
        total += cnt
        s1 += a
        s2 += b
        n_cens += c
    mean = s1 / n
    var = max(0.0, (s2 - n * mean * mean) / (n - 1))
    stderr = math.sqrt(var / n)
    censor_rate = n_cens / n
    flags = (HIGH_CENSOR_FLAG,) if censor_rate > CENSOR_WARN_RATE else ()
    return MCEstimate(mean=mean, stderr=stderr, n_samples=n,
                      censor_rate=censor_rate, flags=flags)


def estimate_mean_abs_gap(model: DiffusionModel, initial, r1: Region, r2: Region,
                          cfg: SimConfig, n: int, workers: int = 1) -> MCEstimate:
    """Monte Carlo estimate of E|tau(r1) - tau(r2)| from coupled paths."""
    return _mc_mean_reduce(model, initial, r1, r2, cfg, n, workers,
                           (ROLE_GAP,), "gap")


def sample_coupled_exits(model: DiffusionModel, initial, r1: Region, r2: Region,
                         cfg: SimConfig, n: int, workers: int = 1,
                         role_tags: tuple[int, ...] = (ROLE_IDENTITY,)) -> CoupledExitBatch:
    """Materialize n coupled exit samples (shard order, reproducible)."""
    if not isinstance(n, int) or n < 1:
        raise ConfigurationError(f"need an integer sample count n >= 1, got {n!r}")
    initial = _coerce_initial(initial, model.n)
    _check_setup(model, initial, r1, r2)
    t_max = _resolve_t_max(cfg, model, r1, r2)
    argsets = [(model, initial, r1, r2, cfg, t_max, role_tags, sid, count)
               for sid, count in _shard_plan(n, cfg.shard_size)]
    parts = _map_shards(_batch_shard, argsets, workers)
    tau = np.concatenate([p["tau"] for p in parts], axis=1)
    pts = np.concatenate([p["pts"] for p in parts], axis=1)
    cens = np.concatenate([p["cens"] for p in parts], axis=1)
    return CoupledExitBatch(tau1=tau[0], tau2=tau[1],
                            exit_point1=pts[0], exit_point2=pts[1],
                            censored1=cens[0], censored2=cens[1])


def simulate_coupled_exit(model: DiffusionModel, a, r1: Region, r2: Region,
                          cfg: SimConfig, stream: np.random.Generator | None = None,
                          increments: np.ndarray | None = None) -> CoupledExitSample:
    """One coupled path.  ``increments`` injects the standard-normal draws
    (one row per step) so tests can run the same Brownian skeleton at two
    step sizes; uniforms still come from the stream."""
    point = as_point(a, model.n)
    initial = InitialCondition.fixed(point)
    _check_setup(model, initial, r1, r2)
    t_max = _resolve_t_max(cfg, model, r1, r2)
    rng = stream if stream is not None else _stream(cfg.seed, ROLE_SINGLE, 0)
    draws = (_InjectedDraws(increments, rng) if increments is not None
             else _GeneratorDraws(rng))
    out = _simulate_batch(model, point.reshape(1, -1), r1, r2, cfg, t_max, draws)
    return CoupledExitBatch(
        tau1=out["tau"][0], tau2=out["tau"][1],
        exit_point1=out["pts"][0], exit_point2=out["pts"][1],
        censored1=out["cens"][0], censored2=out["cens"][1],
    ).sample(0)
