"""Symmetrized random walk, its Green function and the survival criterion.

The walk S attached to a kernel jumps by z at rate
q(z) = (E[K_z] + E[K_{-z}])/2 (z != 0).  Its Green function

    G(x) = integral_0^inf P(S_t = x | S_0 = 0) dt
         = (2 pi)^{-d} int_{[-pi,pi]^d} cos(x . theta) / phi(theta) dtheta,
    phi(theta) = sum_z q(z) (1 - cos(z . theta)),

is finite only for d >= 3.  G(0) controls everything here: the return
probability of the embedded jump chain is pi_d = 1 - 1/(total_rate*G(0))
(sojourn decomposition: G(0) = holding 1/total_rate times expected number
of visits 1/(1-pi_d)), the survival criterion is kappa_2*G(0)/2 < 1, and
under the criterion the exponential local-time moment is

    h(x) = 1 + kappa_2 G(x) / (2 - kappa_2 G(0)).

Two independent routes compute G: tensor midpoint quadrature of the
Fourier integral with dyadic refinement toward the theta = 0 singularity
plus Richardson extrapolation, and a truncated-lattice solve of
(-L_S) g = delta_0 with absorbing exterior (monotone from below in the
box radius).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .kernel import Kernel, kernel_moments


class WalkError(ValueError):
    pass


class RecurrentDimensionError(WalkError):
    """G(0) = infinity: the walk is recurrent for d <= 2."""


class DegenerateWalkError(WalkError):
    """All jump rates vanish."""


class DivergentHError(WalkError):
    """h(x) is infinite when the survival criterion fails."""


@dataclass(eq=False)
class WalkSpec:
    """Jump rates of the walk attached to a kernel.

    ``rates[z]`` is the rate of a jump *by displacement z*.  For the
    symmetrized walk this is q(z) = (E[K_z] + E[K_{-z}])/2; for the
    one-point walk (symmetrized=False) the generator
    L_X f(x) = sum_y E[K_{x-y}] (f(y) - f(x)) jumps from x to y = x - z
    at rate E[K_z], i.e. rates[z] = E[K_{-z}].
    """

    d: int
    rates: dict
    total_rate: float
    symmetrized: bool = True
    kappa2: float = 0.0


@dataclass(eq=False)
class GreenTable:
    values: dict              # offset -> G(x)
    g0: float
    pi_d: float
    criterion_value: float    # kappa_2 G(0) / 2
    h_values: dict            # offset -> h(x), empty if criterion >= 1
    method: str = "fourier_quadrature"
    resolution: int = 0
    error_estimate: float = math.inf


def walk_from_kernel(kernel: Kernel, symmetrized: bool = True) -> WalkSpec:
    mu = kernel.mean_vector
    zero = tuple([0] * kernel.d)
    rates = {}
    offs = set(mu)
    offs.update(tuple(-c for c in x) for x in mu)
    for z in offs:
        if z == zero:
            continue
        mz = tuple(-c for c in z)
        if symmetrized:
            r = 0.5 * (mu.get(z, 0.0) + mu.get(mz, 0.0))
        else:
            r = mu.get(mz, 0.0)
        if r > 0.0:
            rates[z] = r
    if not rates:
        raise DegenerateWalkError("walk has no nonzero jump rates")
    return WalkSpec(
        d=kernel.d,
        rates=rates,
        total_rate=sum(rates.values()),
        symmetrized=symmetrized,
        kappa2=kernel_moments(kernel).kappa2,
    )


# ---------------------------------------------------------------------------
# Green function


def _phi_on_grid(walk, axes):
    """phi(theta) on a tensor grid given 1-d axis arrays."""
    mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
    phi = np.zeros(tuple(len(a) for a in axes))
    for z, q in walk.rates.items():
        dot = sum(c * m for c, m in zip(z, mesh) if c != 0)
        # 2 sin^2(x/2) = 1 - cos(x) without cancellation at small angles
        phi += q * 2.0 * np.sin(0.5 * dot) ** 2
    return phi, mesh

def _fourier_level_sums(walk, offsets, n, levels):
    """Midpoint sums of cos(x.theta)/phi over dyadic annuli around 0.

    Level k integrates over C_k \\ C_{k+1} with C_k = [-pi 2^-k, pi 2^-k]^d
    on an n-per-axis midpoint grid (n divisible by 4 so the inner half-cube
    is exactly the central block of cells).  The integrand is smooth on
    each annulus; the leftover cube C_levels contributes O(2^-levels).
    """
    d = walk.d
    out = {x: 0.0 for x in offsets}
    lo, hi = n // 4, 3 * n // 4
    inner = (slice(lo, hi),) * d
    for k in range(levels):
        half = math.pi * 0.5**k
        step = 2.0 * half / n
        ax = -half + step * (np.arange(n) + 0.5)
        axes = [ax] * d
        phi, mesh = _phi_on_grid(walk, axes)
        mask = np.zeros_like(phi, dtype=bool)
        mask[inner] = True
        inv = np.where(mask, 0.0, 1.0 / phi)
        cell = step**d
        for x in offsets:
            if any(x):
                dot = sum(c * m for c, m in zip(x, mesh) if c != 0)
                out[x] += float(np.sum(np.cos(dot) * inv)) * cell
            else:
                out[x] += float(np.sum(inv)) * cell
    return out


def _green_fourier(walk, offsets, n, levels=40):
    if n % 4:
        raise WalkError("quadrature resolution must be divisible by 4")
    coarse = _fourier_level_sums(walk, offsets, n // 2, levels)
    fine = _fourier_level_sums(walk, offsets, n, levels)
    norm = (2.0 * math.pi) ** walk.d
    values, err = {}, 0.0
    for x in offsets:
        a, b = coarse[x] / norm, fine[x] / norm
        # midpoint rule is O(h^2) on each smooth annulus
        values[x] = b + (b - a) / 3.0
        err = max(err, abs(b - a) / 3.0)
    return values, err


def _green_truncated(walk, offsets, radius):
    """Solve (-L_S) g = delta_0 on the box [-R, R]^d, absorbing outside."""
    d, R = walk.d, int(radius)
    n = 2 * R + 1
    size = n**d
    strides = [n**i for i in range(d)]

    def idx(x):
        return sum((c + R) * s for c, s in zip(x, strides))

    rows, cols, vals = [], [], []
    diag = np.full(size, walk.total_rate)
    grid = np.stack(
        np.meshgrid(*([np.arange(-R, R + 1)] * d), indexing="ij"), axis=-1
    ).reshape(size, d)
    for z, q in walk.rates.items():
        tgt = grid + np.asarray(z)
        ok = np.all(np.abs(tgt) <= R, axis=1)
        src = np.nonzero(ok)[0]
        dst = tgt[ok] + R
        dst_idx = dst @ np.asarray(strides)
        rows.extend(src.tolist())
        cols.extend(dst_idx.tolist())
        vals.extend([-q] * len(src))
    A = scipy.sparse.csr_matrix(
        (np.concatenate([vals, diag]),
         (np.concatenate([rows, np.arange(size)]),
          np.concatenate([cols, np.arange(size)]))),
        shape=(size, size),
    )
    rhs = np.zeros(size)
    rhs[idx(tuple([0] * d))] = 1.0
    g, info = scipy.sparse.linalg.cg(A, rhs, rtol=1e-12, atol=0.0, maxiter=20000)
    if info != 0:
        raise WalkError(f"truncated solve did not converge (info={info})")
    return {x: float(g[idx(x)]) for x in offsets}


def green_box(walk: WalkSpec, radius):
    """Truncated-solve Green values as a dense array over [-R, R]^d.

    Absorbing exterior: every value underestimates G by roughly the mean
    Green value on the boundary (a nearly constant deficit ~ 1/R for
    d = 3), which callers can correct against quadrature references.
    """
    if walk.d <= 2:
        raise RecurrentDimensionError("green_box requires d >= 3")
    d, R = walk.d, int(radius)
    n = 2 * R + 1
    size = n**d
    strides = [n**i for i in range(d)]
    rows, cols, vals = [], [], []
    diag = np.full(size, walk.total_rate)
    grid = np.stack(
        np.meshgrid(*([np.arange(-R, R + 1)] * d), indexing="ij"), axis=-1
    ).reshape(size, d)
    for z, q in walk.rates.items():
        tgt = grid + np.asarray(z)
        ok = np.all(np.abs(tgt) <= R, axis=1)
        src = np.nonzero(ok)[0]
        dst_idx = (tgt[ok] + R) @ np.asarray(strides)
        rows.append(src)
        cols.append(dst_idx)
        vals.append(np.full(len(src), -q))
    rows = np.concatenate(rows + [np.arange(size)])
    cols = np.concatenate(cols + [np.arange(size)])
    vals = np.concatenate(vals + [diag])
    A = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))
    rhs = np.zeros(size)
    rhs[(np.zeros(d, dtype=int) + R) @ np.asarray(strides)] = 1.0
    g, info = scipy.sparse.linalg.cg(A, rhs, rtol=1e-12, atol=0.0, maxiter=20000)
    if info != 0:
        raise WalkError(f"green_box solve did not converge (info={info})")
    return g.reshape(*([n] * d))


def green(walk: WalkSpec, offsets=None, method="fourier_quadrature",
          resolution=None) -> GreenTable:
    """Green function table, return probability and survival criterion.

    ``resolution`` is points per axis for the quadrature (default 64 for
    d = 3, 32 above) or the box radius for the truncated solve (default
    25 for d = 3).
    """
    if walk.d <= 2:
        raise RecurrentDimensionError(
            f"d={walk.d}: the walk is recurrent for d <= 2, G(0) diverges")
    zero = tuple([0] * walk.d)
    offsets = [tuple(x) for x in (offsets or [])]
    want = [zero] + [x for x in offsets if x != zero]

    if method == "fourier_quadrature":
        n = resolution or (64 if walk.d == 3 else 32)
        values, err = _green_fourier(walk, want, n)
        res = n
    elif method == "truncated_solve":
        R = resolution or (25 if walk.d == 3 else 8)
        fine = _green_truncated(walk, want, R)
        coarse = _green_truncated(walk, want, max(R // 2, 2))
        values = fine
        err = max(abs(fine[x] - coarse[x]) for x in want)
        res = R
    else:
        raise WalkError(f"unknown green method {method!r}")

    g0 = values[zero]
    pi_d = 1.0 - 1.0 / (walk.total_rate * g0)
    criterion = 0.5 * walk.kappa2 * g0
    h = {}
    if criterion < 1.0:
        h = {x: 1.0 + walk.kappa2 * g / (2.0 - walk.kappa2 * g0)
             for x, g in values.items()}
    return GreenTable(values=values, g0=g0, pi_d=pi_d, criterion_value=criterion,
                      h_values=h, method=method, resolution=res,
                      error_estimate=err)


def survival_criterion(kernel: Kernel, resolution=None):
    """(kappa_2 G(0)/2, satisfied).  kappa_2 = 0 is trivially satisfied."""
    mom = kernel_moments(kernel)
    if mom.kappa2 == 0.0:
        return 0.0, True
    if kernel.d <= 2:
        raise RecurrentDimensionError(
            f"d={kernel.d}: criterion requires d >= 3 (walk recurrent below)")
    tab = green(walk_from_kernel(kernel), resolution=resolution)
    return tab.criterion_value, tab.criterion_value < 1.0


def simple_walk(d) -> WalkSpec:
    """Nearest-neighbor walk with unit rate per direction (scale-free uses)."""
    rates = {}
    for i in range(d):
        for s in (+1, -1):
            rates[tuple(s if j == i else 0 for j in range(d))] = 1.0
    return WalkSpec(d=d, rates=rates, total_rate=2.0 * d, symmetrized=True)


def return_probability(d, resolution=None):
    """Return probability pi_d of the simple random walk, d >= 3."""
    tab = green(simple_walk(d), resolution=resolution)
    return tab.pi_d


def bcpp_critical_lambda(d, resolution=None):
    """Critical BCPP rate 1/(2d(1 - 2 pi_d)) above which the criterion holds."""
    if d <= 2:
        raise RecurrentDimensionError("critical lambda defined only for d >= 3")
    pi_d = return_probability(d, resolution=resolution)
    return 1.0 / (2.0 * d * (1.0 - 2.0 * pi_d))


def h_of_x(kernel: Kernel, offsets, resolution=None):
    """h(x) = 1 + kappa_2 G(x)/(2 - kappa_2 G(0)) for the given offsets."""
    value, ok = survival_criterion(kernel, resolution=resolution)
    if not ok:
        raise DivergentHError(
            f"criterion value {value} >= 1: exponential moment diverges")
    mom = kernel_moments(kernel)
    if mom.kappa2 == 0.0:
        return {tuple(x): 1.0 for x in offsets}
    tab = green(walk_from_kernel(kernel), offsets=offsets, resolution=resolution)
    return {tuple(x): tab.h_values[tuple(x)] for x in offsets}


# ---------------------------------------------------------------------------
# Direct simulation of the walk (shared by the Feynman-Kac estimators)


def simulate_walk(walk: WalkSpec, start, horizon, samples, rng,
                  batch=200_000):
    """Simulate `samples` paths of the walk up to `horizon`.

    Returns (positions, local_time) where positions is (samples, d) at the
    horizon and local_time[i] is the exact total time path i spent at the
    origin (accumulated from the exponential holding times, no time
    discretization).
    """
    d = walk.d
    steps = np.asarray(sorted(walk.rates), dtype=np.int64)
    probs = np.asarray([walk.rates[tuple(z)] for z in steps])
    cum = np.cumsum(probs / probs.sum())
    rate = walk.total_rate
    start = np.asarray(start, dtype=np.int64)

    pos_out = np.empty((samples, d), dtype=np.int64)
    loc_out = np.empty(samples)
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        pos = np.tile(start, (b, 1))
        t = np.zeros(b)
        loc = np.zeros(b)
        alive = np.ones(b, dtype=bool)
        while True:
            hold = rng.exponential(1.0 / rate, b)
            at0 = ~pos.any(axis=1)
            dt = np.minimum(hold, horizon - t)
            loc += np.where(alive & at0, dt, 0.0)
            t = t + hold
            alive = t < horizon
            if not alive.any():
                break
            jumps = steps[np.searchsorted(cum, rng.random(b))]
            pos += np.where(alive[:, None], jumps, 0)
        pos_out[done:done + b] = pos
        loc_out[done:done + b] = loc
        done += b
    return pos_out, loc_out
