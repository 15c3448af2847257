"""Branching particle system: births at rate b, deaths at rate d^(m), traits
moving per the dynamics spec, with genealogy and Monte Carlo estimators.

The scheme is time stepped: in each step of size dt every particle
independently branches with probability b(x) dt, dies with probability
d^(m)(x) dt (d truncated at the cutoff level m), and otherwise takes one
dynamics step.  Children start at the parent trait and inherit a fresh
counter-based stream key split from the parent, so runs are bit
reproducible regardless of batching.  Replicas are simulated together in
flat arrays; aggregation is a fixed-order reduction over replica indices.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .dynamics import THINNING_CAP, ConfigurationError, PathSegment
from .model import DRIFTED_JUMP

__all__ = [
    "CutoffSpec",
    "Population",
    "HistoricalForest",
    "EnsembleResult",
    "simulate",
    "simulate_ensemble",
    "simulate_coupled_yule",
    "yule_moment_bound",
    "mc_moments",
    "mc_survival",
    "qprocess_weight",
    "cutoff_diagnostics",
]

MAX_PARTICLES = 50_000_000


@dataclass(frozen=True)
class CutoffSpec:
    """Death-rate truncation level: d^(m)(x) = d(clamp(x, -m, m))."""

    m: float

    def truncated_death(self, model, x):
        return model.d(np.clip(x, -self.m, self.m))


@dataclass
class Population:
    """Snapshot of the particle system at one time."""

    time: float
    ids: np.ndarray
    traits: np.ndarray

    @property
    def size(self):
        return len(self.ids)

    def functional(self, f):
        return float(np.sum(f(self.traits))) if self.size else 0.0


class HistoricalForest:
    """Genealogy store: per-particle parent pointers and birth steps plus
    per-step id/trait snapshots, materialized lazily into ancestral paths."""

    def __init__(self, dt):
        self.dt = dt
        self.parent = {}
        self.birth_step = {}
        self._steps = []  # (sorted ids, traits) per recorded step

    def register(self, ids, parents, step):
        for i, p in zip(ids, parents):
            self.parent[int(i)] = int(p)
            self.birth_step[int(i)] = int(step)

    def record_step(self, ids, traits):
        self._steps.append((ids.copy(), traits.copy()))

    @property
    def recorded_steps(self):
        return len(self._steps)

    def _lookup(self, step, pid):
        ids, traits = self._steps[step]
        j = np.searchsorted(ids, pid)
        if j < len(ids) and ids[j] == pid:
            return float(traits[j])
        return None

    def path(self, pid, upto_step=None):
        """Materialize the ancestral path of ``pid`` as a PathSegment."""
        upto = self.recorded_steps - 1 if upto_step is None else min(int(upto_step), self.recorded_steps - 1)
        states = np.full(upto + 1, np.nan)
        cur = int(pid)
        step = upto
        while step >= 0:
            born = self.birth_step.get(cur, 0)
            while step >= born:
                val = self._lookup(step, cur)
                if val is None:
                    break
                states[step] = val
                step -= 1
            nxt = self.parent.get(cur, -1)
            if nxt < 0:
                break
            cur = nxt
        seen = ~np.isnan(states)
        if not seen.any():
            raise KeyError(f"particle {pid} absent from the recorded history")
        first = int(np.argmax(seen))
        states[:first] = states[first]
        times = np.arange(upto + 1) * self.dt
        return PathSegment(times, states, np.zeros(upto + 1, dtype=bool))

    def alive_at(self, step):
        ids, traits = self._steps[min(step, self.recorded_steps - 1)]
        return ids, traits


@dataclass
class EnsembleResult:
    """Recorded output of one replica ensemble."""

    times: np.ndarray  # snapshot times (snapped to the step grid)
    counts: np.ndarray  # (n_times, reps) population sizes
    functionals: dict  # name -> (n_times, reps) values of <Z_t, f>
    max_abs: np.ndarray  # (n_times, reps) running max |trait| up to each time
    tm_first: np.ndarray  # (reps,) first time |trait| > m, inf if never
    seed: int
    dt: float
    x0: float
    cutoff_m: float
    reps: int
    traits_at: dict = field(default_factory=dict)  # time -> (rep idx, traits, ids)
    forest: HistoricalForest | None = None
    history_rep_limit: int = 0

    def survival(self, k):
        return self.counts[k] > 0


def _snap_steps(record_times, dt, t_end):
    n_end = int(round(t_end / dt))
    return sorted({min(max(int(round(t / dt)), 0), n_end) for t in record_times})


def _reflect(x, bounds):
    lo, hi = bounds
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.minimum(y, 2.0 * width - y)


def _move(x, keys, step, dt, dyn, reflect_at=None):
    out = _move_free(x, keys, step, dt, dyn)
    if reflect_at is not None:
        out = _reflect(out, reflect_at)
    return out


def _move_free(x, keys, step, dt, dyn):
    if dyn.has_jumps:
        kernel = dyn.jump
        rate = np.asarray(kernel.total_mass(x), dtype=float)
        u_accept = rng.uniform(keys, step, rng.CH_MOVE)
        jumped = u_accept < rate * dt
        u_size = rng.uniform(keys, step, rng.CH_JUMP_SIZE)
        z_jump = x + kernel.sample_displacement(u_size)
        if dyn.variant == DRIFTED_JUMP:
            z_cont = x + dt
        else:
            noise = rng.normal(keys, step, rng.CH_MOVE2)
            z_cont = x - dyn.a(x) * dt + math.sqrt(dt) * noise
        return np.where(jumped, z_jump, z_cont)
    noise = rng.normal(keys, step, rng.CH_MOVE)
    return x - dyn.a(x) * dt + math.sqrt(dt) * noise


def check_event_cap(model, dyn, cutoff, dt):
    """Enforce dt * (b_star + sup_{[-m,m]} d) <= 0.1 and the thinning cap."""
    xs = np.linspace(-cutoff.m, cutoff.m, 2001)
    sup_d = float(np.max(model.d(xs)))
    cap = dt * (model.b_star + sup_d)
    if cap > THINNING_CAP + 1e-12:
        raise ConfigurationError(
            f"dt * (b_star + sup d^(m)) = {cap:.3g} exceeds {THINNING_CAP}; "
            f"reduce dt below {THINNING_CAP / (model.b_star + sup_d):.3g}"
        )
    if dyn.has_jumps:
        sup_r = float(np.max(dyn.jump.total_mass(xs)))
        if sup_r * dt > THINNING_CAP + 1e-12:
            raise ConfigurationError("dt too large for the jump thinning cap")


class _Ensemble:
    """Flat-array state of all replicas during a stepped simulation."""

    def __init__(self, x0, seed, reps, rep_offset=0, reflect_at=None):
        self.reflect_at = reflect_at
        self.x = np.full(reps, float(x0))
        self.keys = rng.root_key(seed, rep_offset + np.arange(reps, dtype=np.uint64))
        self.rep = np.arange(reps, dtype=np.int64)
        self.pid = np.arange(reps, dtype=np.int64)
        self.pmax = np.abs(self.x)
        self.next_id = reps
        self.reps = reps
        self.repmax = np.abs(self.x).copy()  # running max per replica, deaths folded in

    def step(self, step, dt, model, dyn, cutoff, on_birth=None):
        """Advance one step; returns the per-particle branch mask length
        before the update (for coupling hooks)."""
        if len(self.x) == 0:
            return
        x = self.x
        pb = np.asarray(model.b(x), dtype=float) * dt
        pd = np.asarray(cutoff.truncated_death(model, x), dtype=float) * dt
        u = rng.uniform(self.keys, step, rng.CH_EVENT)
        branch = u < pb
        die = (~branch) & (u < pb + pd)
        move = ~(branch | die)

        if np.any(move):
            x = x.copy()
            x[move] = _move(x[move], self.keys[move], step, dt, dyn, self.reflect_at)
        self.x = x
        np.maximum(self.pmax, np.abs(self.x), out=self.pmax)

        if np.any(die):
            np.maximum.at(self.repmax, self.rep[die], self.pmax[die])

        if np.any(branch):
            child_keys = rng.spawn_keys(self.keys[branch], step)
            child_x = self.x[branch]
            child_rep = self.rep[branch]
            child_pmax = self.pmax[branch]
            child_pid = self.next_id + np.arange(len(child_keys), dtype=np.int64)
            self.next_id += len(child_keys)
            if on_birth is not None:
                on_birth(child_pid, self.pid[branch], child_rep)
            keep = ~die
            self.x = np.concatenate([self.x[keep], child_x])
            self.keys = np.concatenate([self.keys[keep], child_keys])
            self.rep = np.concatenate([self.rep[keep], child_rep])
            self.pid = np.concatenate([self.pid[keep], child_pid])
            self.pmax = np.concatenate([self.pmax[keep], child_pmax])
        elif np.any(die):
            keep = ~die
            self.x = self.x[keep]
            self.keys = self.keys[keep]
            self.rep = self.rep[keep]
            self.pid = self.pid[keep]
            self.pmax = self.pmax[keep]

        if len(self.x) > MAX_PARTICLES:
            raise MemoryError(
                f"population exceeded {MAX_PARTICLES} particles; lower t_end or reps"
            )

    def replica_counts(self):
        return np.bincount(self.rep, minlength=self.reps)

    def replica_sums(self, weights):
        return np.bincount(self.rep, weights=weights, minlength=self.reps)

    def replica_max_abs(self):
        cur = self.repmax.copy()
        if len(self.x):
            np.maximum.at(cur, self.rep, self.pmax)
        return cur


def simulate_ensemble(
    x0,
    t_end,
    dt,
    model,
    dyn,
    cutoff,
    seed,
    reps,
    record_times,
    functionals=None,
    record_traits_at=(),
    history_until=None,
    history_rep_limit=None,
    rep_offset=0,
    reflect_at=None,
):
    """Simulate ``reps`` independent replicas, all started at delta_{x0}.

    ``functionals`` maps names to vectorized trait functions; <Z_t, f> is
    recorded at every snapshot time.  ``reflect_at = (lo, hi)`` folds every
    continuous move back into the interval (matching a reflecting solver
    grid); ``rep_offset`` shifts the stream indices so chunked runs
    reproduce the monolithic ensemble bit for bit.  ``record_traits_at`` lists times whose
    full per-replica trait arrays are kept.  ``history_until`` turns on
    genealogy recording through that time, limited to the first
    ``history_rep_limit`` replicas.
    """
    if t_end < 0 or dt <= 0:
        raise ValueError("need t_end >= 0 and dt > 0")
    check_event_cap(model, dyn, cutoff, dt)
    functionals = functionals or {}
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt for ensemble runs")
    record_steps = _snap_steps(record_times, dt, t_end)
    record_set = set(record_steps)
    trait_steps = set(_snap_steps(record_traits_at, dt, t_end))

    ens = _Ensemble(x0, seed, reps, rep_offset=rep_offset, reflect_at=reflect_at)

    history = None
    hist_limit = 0
    hist_steps = -1
    if history_until is not None:
        hist_limit = history_rep_limit if history_rep_limit is not None else reps
        history = HistoricalForest(dt)
        hist_steps = int(round(history_until / dt))

    n_rec = len(record_steps)
    counts = np.zeros((n_rec, reps), dtype=np.int64)
    func_vals = {name: np.zeros((n_rec, reps)) for name in functionals}
    max_abs_rec = np.zeros((n_rec, reps))
    tm_first = np.full(reps, np.inf)
    traits_at = {}

    out0 = np.abs(ens.x) > cutoff.m
    tm_first[out0] = 0.0

    def record(rec_idx, step_idx):
        counts[rec_idx] = ens.replica_counts()
        for name, f in functionals.items():
            func_vals[name][rec_idx] = ens.replica_sums(f(ens.x)) if len(ens.x) else 0.0
        max_abs_rec[rec_idx] = ens.replica_max_abs()
        if step_idx in trait_steps:
            traits_at[float(step_idx * dt)] = (ens.rep.copy(), ens.x.copy(), ens.pid.copy())

    def record_history(step_idx):
        sel = ens.rep < hist_limit
        order = np.argsort(ens.pid[sel], kind="stable")
        history.record_step(ens.pid[sel][order], ens.x[sel][order])

    rec_idx = 0
    if history is not None:
        record_history(0)
    if 0 in record_set:
        record(0, 0)
        rec_idx = 1

    for step in range(n_steps):
        if len(ens.x) == 0:
            break
        on_birth = None
        if history is not None and step < hist_steps:
            def on_birth(child_pid, parent_pid, child_rep, _s=step):
                sel = child_rep < hist_limit
                history.register(child_pid[sel], parent_pid[sel], _s + 1)

        ens.step(step, dt, model, dyn, cutoff, on_birth=on_birth)

        if len(ens.x):
            out = ens.pmax > cutoff.m
            if np.any(out):
                hit = np.unique(ens.rep[out])
                unset = hit[~np.isfinite(tm_first[hit])]
                tm_first[unset] = (step + 1) * dt

        if history is not None and step + 1 <= hist_steps:
            record_history(step + 1)
        if (step + 1) in record_set:
            record(rec_idx, step + 1)
            rec_idx += 1

    # everything extinct before later snapshots: counts stay 0, max carries over
    while rec_idx < n_rec:
        max_abs_rec[rec_idx] = ens.repmax
        rec_idx += 1

    times = np.array([s * dt for s in record_steps])
    return EnsembleResult(
        times=times,
        counts=counts,
        functionals=func_vals,
        max_abs=max_abs_rec,
        tm_first=tm_first,
        seed=seed,
        dt=dt,
        x0=float(x0),
        cutoff_m=cutoff.m,
        reps=reps,
        traits_at=traits_at,
        forest=history,
        history_rep_limit=hist_limit,
    )


def simulate(x0, t_end, dt, model, dyn, cutoff, seed, record_history=False, record_times=None):
    """Single-replica simulation.

    Returns (list of Population snapshots, HistoricalForest or None,
    T_m estimate).  Deterministic given the seed.
    """
    if record_times is None:
        record_times = np.linspace(0.0, t_end, 11) if t_end > 0 else [0.0]
    res = simulate_ensemble(
        x0,
        t_end,
        dt,
        model,
        dyn,
        cutoff,
        seed,
        reps=1,
        record_times=record_times,
        record_traits_at=record_times,
        history_until=t_end if record_history else None,
    )
    snaps = []
    for t in res.times:
        _, traits, ids = res.traits_at.get(
            float(t), (None, np.zeros(0), np.zeros(0, dtype=np.int64))
        )
        snaps.append(Population(time=float(t), ids=ids, traits=traits))
    return snaps, res.forest, float(res.tm_first[0])


def simulate_coupled_yule(x0, t_end, dt, model, dyn, cutoff, seed, reps, record_times):
    """Couple the system with its dominating Yule process (birth rate
    b_star, no deaths) through shared event uniforms.

    Every Yule particle carries an in-system flag.  One shared uniform per
    particle per step decides: system birth (u < b(x) dt), system death
    (the next strip of width d^(m)(x) dt), Yule birth (u < b_star dt;
    a superset of system births since b <= b_star).  Returns (times,
    counts_system, counts_yule); pathwise counts_system <= counts_yule.
    """
    check_event_cap(model, dyn, cutoff, dt)
    n_steps = int(round(t_end / dt))
    record_steps = _snap_steps(record_times, dt, t_end)
    record_set = set(record_steps)

    x = np.full(reps, float(x0))
    alive_z = np.ones(reps, dtype=bool)
    keys = rng.root_key(seed, np.arange(reps, dtype=np.uint64))
    rep = np.arange(reps, dtype=np.int64)

    n_rec = len(record_steps)
    counts_z = np.zeros((n_rec, reps), dtype=np.int64)
    counts_y = np.zeros((n_rec, reps), dtype=np.int64)
    rec_idx = 0
    if 0 in record_set:
        counts_z[0] = np.bincount(rep[alive_z], minlength=reps)
        counts_y[0] = np.bincount(rep, minlength=reps)
        rec_idx = 1

    p_star = model.b_star * dt
    for step in range(n_steps):
        pb = np.asarray(model.b(x), dtype=float) * dt
        pd = np.asarray(cutoff.truncated_death(model, x), dtype=float) * dt
        u = rng.uniform(keys, step, rng.CH_EVENT)
        branch_z = alive_z & (u < pb)
        die_z = alive_z & (~branch_z) & (u < pb + pd)
        branch_y = u < p_star
        move = alive_z & ~(branch_z | die_z)

        if np.any(move):
            x = x.copy()
            x[move] = _move(x[move], keys[move], step, dt, dyn)
        alive_z = alive_z & ~die_z

        if np.any(branch_y):
            child_keys = rng.spawn_keys(keys[branch_y], step)
            x = np.concatenate([x, x[branch_y]])
            alive_z = np.concatenate([alive_z, branch_z[branch_y]])
            keys = np.concatenate([keys, child_keys])
            rep = np.concatenate([rep, rep[branch_y]])
        if len(x) > MAX_PARTICLES:
            raise MemoryError("coupled Yule population exceeded the particle cap")
        if (step + 1) in record_set:
            counts_z[rec_idx] = np.bincount(rep[alive_z], minlength=reps)
            counts_y[rec_idx] = np.bincount(rep, minlength=reps)
            rec_idx += 1

    times = np.array([s * dt for s in record_steps])
    return times, counts_z, counts_y


# ----------------------------------------------------------------------
# estimators


def yule_moment_bound(n, t, b_star):
    """Hard moment ceiling n! e^{n b_star t} for the dominating pure-birth
    process; +inf sentinel (with a warning) on overflow."""
    if n < 1:
        raise ValueError("moment order must be >= 1")
    log_val = math.lgamma(n + 1) + n * b_star * t
    if log_val > 700:
        warnings.warn("Yule moment bound overflows float range; returning inf")
        return math.inf
    return math.exp(log_val)


def _jackknife_se(values):
    """Jackknife standard error of the sample mean."""
    r = len(values)
    if r < 2:
        return math.inf
    mean = values.mean()
    loo = (r * mean - values) / (r - 1)
    return float(np.sqrt((r - 1) / r * np.sum((loo - loo.mean()) ** 2)))


def mc_moments(result, n_max, f_name=None, f_sup=None, b_star=None):
    """Empirical moments of <Z_t, f> with jackknife standard errors.

    ``f_name`` selects a recorded functional; None means total mass.  When
    ``f_sup`` and ``b_star`` are given the Yule ceiling is enforced.
    Returns rows {time, order, estimate, se}.
    """
    if result.reps < 2:
        raise ValueError("moment estimation needs at least 2 replicas")
    vals = result.counts.astype(float) if f_name is None else result.functionals[f_name]
    rows = []
    for k, t in enumerate(result.times):
        y = vals[k]
        for n in range(1, n_max + 1):
            yn = y**n
            est = float(yn.mean())
            se = _jackknife_se(yn)
            if f_sup is not None and b_star is not None:
                ceiling = (f_sup**n) * yule_moment_bound(n, t, b_star)
                if est > ceiling * (1 + 1e-9):
                    raise RuntimeError(
                        f"moment estimate {est:.4g} exceeds the Yule ceiling "
                        f"{ceiling:.4g} (order {n}, t = {t:g})"
                    )
            rows.append({"time": float(t), "order": n, "estimate": est, "se": se})
    return rows


def mc_survival(result):
    """Survival probability estimates with binomial standard errors."""
    rows = []
    for k, t in enumerate(result.times):
        alive = result.counts[k] > 0
        p = float(alive.mean())
        se = math.sqrt(max(p * (1 - p), 1e-300) / result.reps)
        rows.append({"time": float(t), "estimate": p, "se": se, "survivors": int(alive.sum())})
    return rows


def qprocess_weight(traits_at_s, s, x0, spectral, h_field=None):
    """Radon-Nikodym weight of the conditioned-on-survival limit law.

    Critical/subcritical: e^{lambda0 s} <Z_s, Theta0> / Theta0(x0).
    Supercritical (``h_field`` given): (1 - exp<Z_s, log(1-h)>) / h(x0).
    An empty population gives weight 0 in both variants; at s = 0 the
    weight is 1.
    """
    traits = np.asarray(traits_at_s, dtype=float)
    regime = spectral.regime()
    if regime == "supercritical":
        if h_field is None:
            raise ValueError("supercritical weight needs the extinction-limit field h")
        hx0 = float(np.interp(x0, spectral.grid.nodes, h_field))
        if hx0 <= 0:
            raise ValueError("h(x0) = 0; the supercritical weight is undefined")
        if traits.size == 0:
            return 0.0
        hvals = np.clip(np.interp(traits, spectral.grid.nodes, h_field), 1e-15, 1 - 1e-15)
        return float((1.0 - np.exp(np.sum(np.log1p(-hvals)))) / hx0)
    if traits.size == 0:
        return 0.0
    th = np.interp(traits, spectral.grid.nodes, spectral.theta0)
    return float(math.exp(spectral.lambda0 * s) * np.sum(th) / spectral.theta0_at(x0))


def cutoff_diagnostics(result, m_grid, times=None):
    """P(T_m <= t) table over the m grid, from the running max |trait|.

    Estimates are monotone nonincreasing in m at fixed t by construction;
    report them alongside survival/moment estimates as the truncation-bias
    bound (the bias is at most twice the exceedance probability).
    """
    times = result.times if times is None else times
    rows = []
    for t in times:
        k = int(np.argmin(np.abs(result.times - t)))
        for m in m_grid:
            p = float((result.max_abs[k] > m).mean())
            se = math.sqrt(max(p * (1 - p), 1e-300) / result.reps)
            rows.append({"time": float(result.times[k]), "m": float(m), "estimate": p, "se": se})
    return rows
