"""Exact event-driven simulation of the linear particle system.

Every lattice site carries a rate-1 exponential clock; at a ring of the
clock at z a fresh copy xi of the kernel vector is drawn and the
configuration is replaced by

    eta_z     <- xi_0 * eta_z
    eta_{z+u} <- eta_{z+u} + xi_u * eta_z     (u != 0),

or, for the dual process, by the transposed map

    eta_z     <- sum_u xi_u * eta_{z+u},      other sites unchanged.

Clocks at sites where the update cannot change anything are no-ops
(every replacement term carries a factor of the local mass), so the
simulation rings only "active" sites: occupied sites for the forward
process, and occupied sites plus the halo that an update could pull mass
from for the dual.  This restriction is distributionally exact and is
what makes the simulation feasible: the total event rate equals the
active-site count.

Masses are doubles scaled by a shared log-scale factor (the total mass
grows like exp(kappa_1 t)); normalized quantities are computed as
exp(log_scale - kappa_1 t) * (unscaled value) so nothing overflows.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kernel import Kernel, kernel_moments

# packed site keys: each coordinate in a 21-bit field, offset so fields
# stay nonnegative; neighbor moves are single integer additions
_BITS = 21
_OFF = 1 << 20
_MASK = (1 << _BITS) - 1

_RESCALE_HI = 1e200
_RESCALE_LO = 1e-200
_AUDIT_EVERY = 4096
_URAND_BUF = 8192


class EngineError(RuntimeError):
    pass


class CorruptStateError(EngineError):
    """NaN or nonpositive mass detected inside the sparse configuration."""


def pack_site(x):
    key = 0
    for i, c in enumerate(x):
        key |= (c + _OFF) << (_BITS * i)
    return key


def unpack_site(key, d):
    return tuple(((key >> (_BITS * i)) & _MASK) - _OFF for i in range(d))


def _pack_delta(u):
    # valid to *add* to a packed key as long as coordinates stay in range
    return sum(c << (_BITS * i) for i, c in enumerate(u))


@dataclass(eq=False)
class ObservableRecord:
    t: float
    normalized_total: float
    rho_star: float
    overlap: float
    occupied: int
    weighted_moment_1: np.ndarray
    weighted_moment_2: np.ndarray
    extinct: bool
    battery: dict = field(default_factory=dict)


class ProcessState:
    """Mutable simulation state for one trajectory (single-threaded)."""

    def __init__(self, kernel: Kernel, initial, dual, seed):
        if not initial:
            raise EngineError("initial configuration is empty; the process "
                              "would be identically zero")
        self.kernel = kernel
        self.d = kernel.d
        self.dual = bool(dual)
        self.t = 0.0
        self.log_scale = 0.0
        self.extinct = False
        self.truncated = False
        self.max_occupied = 5_000_000
        mom = kernel_moments(kernel)
        self.kappa1 = mom.kappa1
        self.drift = mom.drift

        self.masses = {}
        for x, m in initial:
            m = float(m)
            if m <= 0:
                raise EngineError(f"initial mass at {x} must be > 0, got {m}")
            key = pack_site(_check_coords(x))
            self.masses[key] = self.masses.get(key, 0.0) + m

        # atom tables: cumulative probabilities for the draw, then per-atom
        # (xi_0, ((packed offset, value), ...)) with offset 0 split out for
        # the forward update and kept inline for the dual read
        cum = []
        acc = 0.0
        fwd, dualrd = [], []
        zero = tuple([0] * self.d)
        for p, vec in kernel.atoms:
            acc += p
            cum.append(acc)
            fwd.append((vec.get(zero, 0.0),
                        tuple((_pack_delta(u), v) for u, v in sorted(vec.items())
                              if u != zero)))
            dualrd.append(tuple((_pack_delta(u), v) for u, v in sorted(vec.items())))
        cum[-1] = 1.0 + 1e-15
        self._atom_cum = cum
        self._atoms_fwd = fwd
        self._atoms_dual = dualrd

        # active-site bookkeeping: list + position map with O(1) uniform
        # pick and swap-remove; for the dual, reference counts over the
        # read offsets decide which empty sites can still be written to
        self._active = []
        self._active_pos = {}
        if self.dual:
            reads = sorted({u for _, vec in kernel.atoms for u in vec} | {zero})
            self._read_deltas = tuple(_pack_delta(u) for u in reads)
            self._halo_count = {}
            for key in self.masses:
                self._flip_on_dual(key)
        else:
            for key in self.masses:
                self._activate(key)

        if isinstance(seed, np.random.SeedSequence):
            ss = seed
        else:
            ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._rng = np.random.Generator(np.random.Philox(ss))
        self._buf = self._rng.random(_URAND_BUF)
        self._bufi = 0
        self._events = 0
        self._trace = None  # set to a list to record (site, atom, mass) per event

    # -- active-set maintenance -------------------------------------------

    def _activate(self, key):
        self._active_pos[key] = len(self._active)
        self._active.append(key)

    def _deactivate(self, key):
        pos = self._active_pos.pop(key)
        last = self._active.pop()
        if last != key:
            self._active[pos] = last
            self._active_pos[last] = pos

    def _flip_on_dual(self, key):
        cnt = self._halo_count
        for du in self._read_deltas:
            z = key - du
            c = cnt.get(z, 0)
            cnt[z] = c + 1
            if c == 0:
                self._activate(z)

    def _flip_off_dual(self, key):
        cnt = self._halo_count
        for du in self._read_deltas:
            z = key - du
            c = cnt[z] - 1
            if c:
                cnt[z] = c
            else:
                del cnt[z]
                self._deactivate(z)

    # -- uniforms ------------------------------------------------------------

    def _u(self):
        i = self._bufi
        if i == _URAND_BUF:
            self._buf = self._rng.random(_URAND_BUF)
            i = 0
        self._bufi = i + 1
        return self._buf[i]

    # -- audits ----------------------------------------------------------

    def _audit(self):
        masses = self.masses
        if not masses:
            return
        hi = max(masses.values())
        lo = min(masses.values())
        if hi != hi or lo <= 0.0:
            raise CorruptStateError(
                f"bad stored mass (max={hi}, min={lo}) at t={self.t}")
        if hi > _RESCALE_HI or hi < _RESCALE_LO:
            factor = 1.0 / hi
            for k in masses:
                masses[k] *= factor
            self.log_scale += math.log(hi)

    def total_mass(self):
        """Unscaled total; true total is this times exp(log_scale)."""
        return math.fsum(self.masses.values())

    # -- core loop ---------------------------------------------------------

    def advance(self, duration):
        if duration < 0:
            raise EngineError("duration must be nonnegative")
        target = self.t + duration
        if self.extinct or self.truncated:
            self.t = target
            return self
        masses = self.masses
        active = self._active
        u = self._u
        cum = self._atom_cum
        log = math.log
        if self.dual:
            atoms = self._atoms_dual
            while True:
                n = len(active)
                if n == 0:
                    self.extinct = True
                    self.t = target
                    break
                dt = -log(1.0 - u()) / n
                if self.t + dt >= target:
                    self.t = target
                    break
                self.t += dt
                z = active[int(u() * n)]
                ai = bisect_right(cum, u())
                entries = atoms[ai]
                new = 0.0
                for du, val in entries:
                    m = masses.get(z + du)
                    if m is not None:
                        new += val * m
                old = masses.get(z)
                if self._trace is not None:
                    self._trace.append((z, ai, old if old is not None else 0.0))
                if old is None:
                    if new > 0.0:
                        masses[z] = new
                        self._flip_on_dual(z)
                elif new > 0.0:
                    masses[z] = new
                else:
                    del masses[z]
                    self._flip_off_dual(z)
                self._events += 1
                if new >= 1e250:  # rescale before doubles can overflow
                    self._audit()
                if not self._events % _AUDIT_EVERY:
                    self._audit()
                if len(masses) > self.max_occupied:
                    self.truncated = True
                    return self
        else:
            atoms = self._atoms_fwd
            while True:
                n = len(active)
                if n == 0:
                    self.extinct = True
                    self.t = target
                    break
                dt = -log(1.0 - u()) / n
                if self.t + dt >= target:
                    self.t = target
                    break
                self.t += dt
                z = active[int(u() * n)]
                ai = bisect_right(cum, u())
                k0, entries = atoms[ai]
                mz = masses[z]
                if self._trace is not None:
                    self._trace.append((z, ai, mz))
                for du, val in entries:
                    y = z + du
                    m = masses.get(y)
                    if m is None:
                        masses[y] = val * mz
                        self._activate(y)
                    else:
                        masses[y] = m + val * mz
                if k0 == 0.0:
                    del masses[z]
                    self._deactivate(z)
                elif k0 != 1.0:
                    m = k0 * mz
                    if m > 0.0:
                        masses[z] = m
                    else:  # underflow below double range: evict
                        del masses[z]
                        self._deactivate(z)
                self._events += 1
                if mz >= 1e250:  # rescale before doubles can overflow
                    self._audit()
                if not self._events % _AUDIT_EVERY:
                    self._audit()
                if len(masses) > self.max_occupied:
                    self.truncated = True
                    return self
        return self

    # -- observables -------------------------------------------------------

    def normalized_total(self):
        if not self.masses:
            return 0.0
        return self.total_mass() * math.exp(self.log_scale - self.kappa1 * self.t)

    def site_array(self):
        """(coords, masses) as numpy arrays, in packed-key order."""
        keys = list(self.masses)
        coords = np.empty((len(keys), self.d), dtype=np.int64)
        vals = np.empty(len(keys))
        for i, k in enumerate(keys):
            coords[i] = unpack_site(k, self.d)
            vals[i] = self.masses[k]
        return coords, vals


def replica_seed(base_seed, r):
    """Stream for replica r: independent of any other replica's stream."""
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(r)])


def _check_coords(x):
    t = tuple(int(c) for c in x)
    if any(abs(c) >= _OFF - 64 for c in t):
        raise EngineError(f"site {x} outside supported coordinate range")
    return t


def init_state(kernel: Kernel, initial, dual=False, seed=0) -> ProcessState:
    """Fresh state at t = 0 with a deterministic stream derived from seed."""
    return ProcessState(kernel, list(initial), dual, seed)


def observables(state: ProcessState, test_functions=None) -> ObservableRecord:
    """Density observables of the current configuration.

    rho_x = eta_x/|eta|; rho_star = max rho; overlap = sum rho^2.  The
    weighted moments are sum_x xhat^{(k)} rho_x with
    xhat = (x - m t)/sqrt(t) centered by the kernel drift (scale 1 at
    t = 0).  Extinction gives the all-zero record.
    """
    d = state.d
    if not state.masses:
        return ObservableRecord(
            t=state.t, normalized_total=0.0, rho_star=0.0, overlap=0.0,
            occupied=0, weighted_moment_1=np.zeros(d),
            weighted_moment_2=np.zeros((d, d)), extinct=True,
            battery={name: 0.0 for name in (test_functions or {})})
    coords, vals = state.site_array()
    if np.max(np.abs(coords)) >= _OFF - 64:
        raise CorruptStateError("configuration reached the coordinate range limit")
    total = math.fsum(vals)
    rho = vals / total
    scale = math.sqrt(state.t) if state.t > 0 else 1.0
    xhat = (coords - state.drift * state.t) / scale
    m1 = rho @ xhat
    m2 = (xhat * rho[:, None]).T @ xhat
    battery = {}
    if test_functions:
        for name, f in test_functions.items():
            battery[name] = float(rho @ f(xhat, scale))
    return ObservableRecord(
        t=state.t,
        normalized_total=state.normalized_total(),
        rho_star=float(rho.max()),
        overlap=float(rho @ rho),
        occupied=len(vals),
        weighted_moment_1=m1,
        weighted_moment_2=m2,
        extinct=False,
        battery=battery,
    )


# ---------------------------------------------------------------------------
# Ensembles


@dataclass(eq=False)
class EnsembleSummary:
    """Per-time ensemble statistics over replicas.

    ``stats[name]`` has arrays mean/var/se/n of shape (len(t_grid),)
    under both conditionings: "all" replicas and "surviving" (occupied at
    the record time; survival-at-t is the finite-time proxy for surviving
    forever, recorded as such in the metadata).
    """
    t_grid: tuple
    replicas: int
    truncated: int
    survival_fraction: np.ndarray
    stats: dict
    metadata: dict

    def stat(self, name, which="all"):
        return self.stats[name][which]

    def to_dict(self):
        def arr(a):
            return np.asarray(a).tolist()
        return {
            "format_version": FORMAT_VERSION,
            "t_grid": list(self.t_grid),
            "replicas": self.replicas,
            "truncated": self.truncated,
            "survival_fraction": arr(self.survival_fraction),
            "stats": {
                name: {cond: {k: arr(v) for k, v in s.items()}
                       for cond, s in conds.items()}
                for name, conds in self.stats.items()
            },
            "metadata": self.metadata,
        }


FORMAT_VERSION = "linsys-summary-1"


def _scalar_names(d, battery_names):
    names = ["normalized_total", "normalized_total_sq", "rho_star",
             "overlap", "occupied"]
    names += [f"m1_{i}" for i in range(d)]
    names += [f"m2_{i}{j}" for i in range(d) for j in range(d)]
    names += [f"battery:{b}" for b in battery_names]
    return names


def _record_row(rec, d, battery_names):
    row = [rec.normalized_total, rec.normalized_total**2, rec.rho_star,
           rec.overlap, float(rec.occupied)]
    row += [rec.weighted_moment_1[i] for i in range(d)]
    row += [rec.weighted_moment_2[i, j] for i in range(d) for j in range(d)]
    row += [rec.battery[b] for b in battery_names]
    return row


def _run_replicas(kernel_dict, initial, t_grid, dual, base_seed, lo, hi,
                  max_occupied, battery_spec):
    """Worker: trajectories for replicas [lo, hi); returns raw rows."""
    kernel = Kernel.from_dict(kernel_dict)
    test_functions = _build_battery_functions(battery_spec, kernel)
    battery_names = sorted(test_functions) if test_functions else []
    d = kernel.d
    out = np.empty((hi - lo, len(t_grid), len(_scalar_names(d, battery_names))))
    surv = np.empty((hi - lo, len(t_grid)), dtype=bool)
    trunc = np.zeros(hi - lo, dtype=bool)
    for r in range(lo, hi):
        state = init_state(kernel, initial, dual=dual,
                           seed=replica_seed(base_seed, r))
        state.max_occupied = max_occupied
        prev = 0.0
        for j, t in enumerate(t_grid):
            state.advance(t - prev)
            prev = t
            if state.truncated:
                trunc[r - lo] = True
                break
            rec = observables(state, test_functions)
            out[r - lo, j] = _record_row(rec, d, battery_names)
            surv[r - lo, j] = not rec.extinct
    return out, surv, trunc


def _build_battery_functions(battery_spec, kernel):
    if battery_spec is None:
        return None
    if callable(battery_spec):
        return battery_spec(kernel)
    return battery_spec


def run_ensemble(kernel: Kernel, initial, t_grid, replicas, base_seed,
                 dual=False, threads=1, max_occupied=5_000_000,
                 battery=None) -> EnsembleSummary:
    """Independent trajectories with per-replica streams (base_seed, r).

    ``battery`` is an optional factory kernel -> {name: f(xhat array)}
    evaluated on the normalized coordinates at every record; its per-
    replica statistics land in ``stats["battery:<name>"]``.  Results are
    byte-identical for any thread count: replica r always uses the stream
    derived from (base_seed, r) and the reduction runs in replica order.
    """
    t_grid = [float(t) for t in t_grid]
    if not t_grid or any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise EngineError("t_grid must be a nonempty increasing list")
    if replicas < 1:
        raise EngineError("replicas must be >= 1")
    kern_dict = kernel.to_dict()
    test_functions = _build_battery_functions(battery, kernel)
    battery_names = sorted(test_functions) if test_functions else []
    names = _scalar_names(kernel.d, battery_names)

    chunk = max(64, (replicas + 4 * max(threads, 1) - 1) // (4 * max(threads, 1)))
    jobs = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    args = [(kern_dict, list(initial), t_grid, dual, base_seed, lo, hi,
             max_occupied, battery) for lo, hi in jobs]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_run_replicas_star, args))
    else:
        parts = [_run_replicas_star(a) for a in args]

    rows = np.concatenate([p[0] for p in parts], axis=0)
    surv = np.concatenate([p[1] for p in parts], axis=0)
    trunc = np.concatenate([p[2] for p in parts], axis=0)

    keep = ~trunc
    rows, surv = rows[keep], surv[keep]
    n_kept = int(keep.sum())

    stats = {}
    for i, name in enumerate(names):
        col = rows[:, :, i]
        stats[name] = {
            "all": _column_stats(col, np.ones_like(surv)),
            "surviving": _column_stats(col, surv),
        }
    return EnsembleSummary(
        t_grid=tuple(t_grid),
        replicas=n_kept,
        truncated=int(trunc.sum()),
        survival_fraction=surv.mean(axis=0) if n_kept else np.zeros(len(t_grid)),
        stats=stats,
        metadata={
            "kernel": kern_dict,
            "initial": [[list(x), float(m)] for x, m in initial],
            "base_seed": int(base_seed),
            "dual": bool(dual),
            "conditioning": "survival at record time (finite-t proxy)",
            "battery": battery_names,
        },
    )


def _run_replicas_star(a):
    return _run_replicas(*a)


def _column_stats(col, mask):
    T = col.shape[1]
    mean = np.zeros(T)
    var = np.zeros(T)
    se = np.zeros(T)
    n = np.zeros(T, dtype=np.int64)
    for j in range(T):
        sel = col[mask[:, j], j]
        n[j] = sel.size
        if sel.size:
            mean[j] = sel.mean()
            var[j] = sel.var(ddof=1) if sel.size > 1 else 0.0
            se[j] = math.sqrt(var[j] / sel.size) if sel.size > 1 else 0.0
    return {"mean": mean, "var": var, "se": se, "n": n}


def trajectory_records(kernel, initial, t_grid, replicas, base_seed,
                       dual=False, max_occupied=5_000_000):
    """Raw per-replica records for CSV export (replica-major order)."""
    rows = []
    for r in range(replicas):
        state = init_state(kernel, initial, dual=dual,
                           seed=replica_seed(base_seed, r))
        state.max_occupied = max_occupied
        prev = 0.0
        for t in t_grid:
            state.advance(t - prev)
            prev = t
            if state.truncated:
                break
            rec = observables(state)
            rows.append((r, rec))
    return rows
