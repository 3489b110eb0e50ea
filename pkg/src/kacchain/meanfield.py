"""Weighted-cloud approximation of the kinetic limit law.

A cloud of M samples (rho, x, v) stands in for the limit law: spatial
coordinates are frozen forever, drift forces are kernel-weighted cloud
averages, and each sample's velocity jumps at rate gamma_bar to a value
drawn from the exchange-kernel-weighted velocity distribution around its
own coordinate.  Two jump modes are shipped: "exchange" swaps velocities
inside the cloud (conserves the kinetic multiset exactly), "resample"
copies the partner's velocity (the literal nonlinear update).  A
frozen-reference mode evolves a fresh cloud against fixed snapshots,
which is one step of the Picard iteration for the limit law.

Drift and jumps are interleaved per integrator substep: jump times are
exact Poisson times, positions advance lazily between them, and the
self-consistent force field is refreshed once per substep (not per jump).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .chain import EmpiricalMeasure
from .model import (
    InitialCondition,
    KacKernel,
    PotentialSpec,
    sample_z_given_r,
    torus_delta,
)

__all__ = [
    "MeanFieldCloud",
    "CloudTrajectory",
    "PicardReference",
    "GeneratorTestFunction",
    "init_cloud",
    "mf_force",
    "mf_jump",
    "evolve_cloud",
    "picard_step",
    "picard_iterate",
    "generator_apply",
    "generator_residual",
    "default_test_functions",
    "cloud_energy_mean",
    "mean_z_squared_bound",
]

log = logging.getLogger(__name__)


@dataclass
class MeanFieldCloud:
    """Equal-weight samples (rho, x, v); rho never changes after init."""

    t: float
    rho: np.ndarray  # (m,)
    x: np.ndarray    # (m, d)
    v: np.ndarray    # (m, d)
    grid_g: int = 64

    @property
    def m(self) -> int:
        return self.rho.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "MeanFieldCloud":
        return MeanFieldCloud(self.t, self.rho, self.x.copy(), self.v.copy(),
                              self.grid_g)

    def empirical(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(r=self.rho.copy(), x=self.x.copy(), v=self.v.copy())


def init_cloud(ic: InitialCondition, m: int, grid_g: int,
               rng: np.random.Generator) -> MeanFieldCloud:
    """Stratified-uniform rho (one sample per stratum of width 1/m,
    shuffled) with phase coordinates drawn from the local Gibbs law."""
    if m < grid_g:
        raise ValueError("cloud size must be at least the binning grid")
    rho = (np.arange(m) + 1.0 - rng.random(m)) / m  # one per stratum, in (0, 1]
    rho = rng.permutation(rho)
    x, v = sample_z_given_r(ic, rho, rng)
    return MeanFieldCloud(t=0.0, rho=rho, x=x, v=v, grid_g=grid_g)


class _RhoBins:
    """Frozen binning of spatial coordinates on a periodic grid."""

    def __init__(self, rho: np.ndarray, grid_g: int):
        self.g = grid_g
        idx = np.floor(rho * grid_g).astype(np.int64)
        self.idx = np.clip(idx, 0, grid_g - 1)  # rho = 1 lands in the last bin
        self.counts = np.bincount(self.idx, minlength=grid_g)
        self.order = np.argsort(self.idx, kind="stable")
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])

    def members(self, h: int) -> np.ndarray:
        return self.order[self.offsets[h]:self.offsets[h + 1]]


class _KernelFieldOps:
    """Binned kernel sums and partner sampling over frozen rho.

    Fields S(r) = (1/M) sum_m' K(r - rho_m') val_m' are computed by
    depositing per-bin sums, circularly convolving with the kernel sampled
    at bin-lag distances, and linearly interpolating the bin-center values
    back to arbitrary coordinates.  The pointwise error is bounded by
    Lip(K)/G times the mean |val| and is much smaller in practice because
    within-bin placements average out.
    """

    def __init__(self, rho: np.ndarray, kernel: KacKernel, grid_g: int):
        self.bins = _RhoBins(rho, grid_g)
        self.kernel = kernel
        self.m = rho.shape[0]
        lags = np.arange(grid_g) / grid_g
        self._phi_hat = np.fft.rfft(kernel.phi_eval(lags))
        self._partner_cdf = None
        self._partner_tot = None

    def field_at_centers(self, values=None) -> np.ndarray:
        """Convolved field at bin centers; ``values=None`` means counts."""
        g = self.bins.g
        if values is None:
            sums = self.bins.counts.astype(float)
            return np.fft.irfft(np.fft.rfft(sums) * self._phi_hat, n=g) / self.m
        values = np.asarray(values)
        if values.ndim == 1:
            sums = np.bincount(self.bins.idx, weights=values, minlength=g)
            return np.fft.irfft(np.fft.rfft(sums) * self._phi_hat, n=g) / self.m
        out = np.empty((g, values.shape[1]))
        for c in range(values.shape[1]):
            sums = np.bincount(self.bins.idx, weights=values[:, c], minlength=g)
            out[:, c] = np.fft.irfft(np.fft.rfft(sums) * self._phi_hat, n=g)
        return out / self.m

    def interp(self, centers: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """Periodic linear interpolation of bin-center values."""
        g = self.bins.g
        p = np.asarray(rho) * g - 0.5
        g0 = np.floor(p).astype(np.int64)
        frac = p - g0
        g0m = g0 % g
        g1m = (g0 + 1) % g
        if centers.ndim == 1:
            return (1.0 - frac) * centers[g0m] + frac * centers[g1m]
        return (1.0 - frac)[:, None] * centers[g0m] + frac[:, None] * centers[g1m]

    def _ensure_partner_tables(self):
        if self._partner_cdf is None:
            g = self.bins.g
            shifts = (np.arange(g)[None, :] - np.arange(g)[:, None]) / g
            w = self.kernel.gamma_eval(shifts) * self.bins.counts[None, :]
            self._partner_cdf = np.cumsum(w, axis=1)
            self._partner_tot = self._partner_cdf[:, -1].copy()

    def draw_partner_in_bin(self, source_bin: int,
                            rng: np.random.Generator) -> int:
        """Partner index ~ Gamma_ell(rho_src - rho'), bin-resolved.

        Returns -1 when the whole exchange window is empty (possible only
        for extremely sparse clouds); callers resample self and log.
        """
        self._ensure_partner_tables()
        tot = self._partner_tot[source_bin]
        if tot <= 0.0:
            return -1
        u = rng.random() * tot
        h = int(np.searchsorted(self._partner_cdf[source_bin], u, side="right"))
        h = min(h, self.bins.g - 1)
        members = self.bins.members(h)
        return int(members[rng.integers(members.size)])

    def draw_partner(self, sample: int, rng: np.random.Generator) -> int:
        partner = self.draw_partner_in_bin(int(self.bins.idx[sample]), rng)
        if partner < 0:
            log.warning("empty exchange window for sample %d; using self", sample)
            return sample
        return partner

    def draw_partner_at(self, rho_value: float, rng: np.random.Generator) -> int:
        g = self.bins.g
        source_bin = min(int(rho_value * g), g - 1)
        return self.draw_partner_in_bin(source_bin, rng)


def _interaction_accel_binned(ops: _KernelFieldOps, x: np.ndarray,
                              rho: np.ndarray) -> np.ndarray:
    """Harmonic-W interaction acceleration -(x S0(rho) - S1(rho))."""
    s0 = ops.interp(ops.field_at_centers(None), rho)
    s1 = ops.interp(ops.field_at_centers(x), rho)
    return -(x * s0[:, None] - s1)


def _windowed_indices(rho_sorted: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Indices (into sorted order) whose rho lies in [lo, hi] mod 1."""
    m = rho_sorted.size
    if hi - lo >= 1.0:
        return np.arange(m)
    lo_m = lo % 1.0
    hi_m = hi % 1.0
    a = np.searchsorted(rho_sorted, lo_m, side="left")
    b = np.searchsorted(rho_sorted, hi_m, side="right")
    if lo_m <= hi_m:
        return np.arange(a, b)
    return np.concatenate([np.arange(a, m), np.arange(0, b)])


def _interaction_accel_exact(eval_rho, eval_x, src_rho, src_x, kernel,
                             potentials) -> np.ndarray:
    """Exact per-sample kernel-weighted interaction over rho-sorted windows."""
    order = np.argsort(src_rho, kind="stable")
    rs = src_rho[order]
    xs = src_x[order]
    msrc = src_rho.shape[0]
    half = kernel.ell / 2.0
    out = np.zeros_like(eval_x)
    for i in range(eval_rho.shape[0]):
        w_idx = _windowed_indices(rs, eval_rho[i] - half, eval_rho[i] + half)
        if w_idx.size == 0:
            continue
        weights = kernel.phi_eval(eval_rho[i] - rs[w_idx]) / msrc
        grads = potentials.w_grad(eval_x[i][None, :] - xs[w_idx])
        out[i] = -np.sum(weights[:, None] * grads, axis=0)
    return out


def mf_force(cloud: MeanFieldCloud, kernel: KacKernel, potentials: PotentialSpec,
             source: MeanFieldCloud | None = None,
             method: str = "binned") -> np.ndarray:
    """Per-sample accelerations from the cloud (or a frozen source cloud).

    "binned" requires harmonic W and runs in O(M + G log G) per call;
    "exact" evaluates the kernel-weighted sums sample by sample and is the
    oracle for the binned path (general W supported).
    """
    src = cloud if source is None else source
    if method == "binned":
        if not potentials.w_is_harmonic:
            raise ValueError("binned mean-field forces require harmonic W")
        ops = _KernelFieldOps(src.rho, kernel, src.grid_g)
        acc = _interaction_accel_binned(ops, cloud.x, cloud.rho)
    elif method == "exact":
        acc = _interaction_accel_exact(cloud.rho, cloud.x, src.rho, src.x,
                                       kernel, potentials)
    else:
        raise ValueError(f"unknown mean-field force method {method!r}")
    return acc - potentials.u_grad(cloud.x)


def mf_jump(cloud: MeanFieldCloud, sample: int, mode: str,
            rng: np.random.Generator, kernel: KacKernel,
            source: MeanFieldCloud | None = None) -> MeanFieldCloud:
    """One velocity jump of ``sample``; returns the updated cloud.

    The partner is drawn with probability proportional to
    Gamma_ell(rho_sample - rho_partner) over the source cloud.
    "exchange" swaps the two velocities, "resample" copies the partner's.
    """
    if mode not in ("exchange", "resample"):
        raise ValueError(f"unknown jump mode {mode!r}")
    if not 0 <= sample < cloud.m:
        raise IndexError("sample index out of range")
    out = cloud.copy()
    if source is None:
        ops = _KernelFieldOps(cloud.rho, kernel, cloud.grid_g)
        partner = ops.draw_partner(sample, rng)
        if mode == "exchange":
            out.v[sample] = cloud.v[partner]
            out.v[partner] = cloud.v[sample]
        else:
            out.v[sample] = cloud.v[partner]
        return out
    if mode == "exchange":
        raise ValueError("exchange mode swaps within the cloud; no external source")
    ops = _KernelFieldOps(source.rho, kernel, source.grid_g)
    partner = ops.draw_partner_at(float(cloud.rho[sample]), rng)
    if partner < 0:
        log.warning("empty exchange window at rho=%g; keeping own velocity",
                    cloud.rho[sample])
        return out
    out.v[sample] = source.v[partner]
    return out


@dataclass
class CloudTrajectory:
    """Snapshots of an evolving cloud on a fixed time grid."""

    times: np.ndarray           # (s,)
    rho: np.ndarray             # (m,)
    xs: np.ndarray | None       # (s, m, d) when paths are stored
    vs: np.ndarray | None
    grid_g: int
    records: dict = field(default_factory=dict)
    n_jumps: int = 0

    def cloud_at(self, index: int) -> MeanFieldCloud:
        if self.xs is None:
            raise ValueError("trajectory did not store paths")
        return MeanFieldCloud(float(self.times[index]), self.rho,
                              self.xs[index].copy(), self.vs[index].copy(),
                              self.grid_g)

    def paths(self) -> np.ndarray:
        """(m, s, 2d) per-sample phase trajectories."""
        if self.xs is None:
            raise ValueError("trajectory did not store paths")
        return np.concatenate([self.xs, self.vs], axis=-1).transpose(1, 0, 2)


@dataclass
class PicardReference:
    """Frozen time-gridded cloud snapshots standing in for the limit law.

    Time interpolation is piecewise constant on the snapshot grid.  A
    constant reference (single snapshot) covers any horizon and is the
    standard starting point of the iteration.
    """

    times: np.ndarray   # (s,)
    rho: np.ndarray     # (m,)
    xs: np.ndarray      # (s, m, d)
    vs: np.ndarray      # (s, m, d)
    grid_g: int
    constant: bool = False

    def __post_init__(self):
        self._ops_cache = {}
        self._field_cache = {}

    @classmethod
    def from_trajectory(cls, traj: CloudTrajectory) -> "PicardReference":
        if traj.xs is None:
            raise ValueError("trajectory must store paths to serve as a reference")
        return cls(times=traj.times.copy(), rho=traj.rho, xs=traj.xs, vs=traj.vs,
                   grid_g=traj.grid_g)

    @classmethod
    def constant_from_cloud(cls, cloud: MeanFieldCloud) -> "PicardReference":
        return cls(times=np.array([0.0]), rho=cloud.rho,
                   xs=cloud.x[None, :, :].copy(), vs=cloud.v[None, :, :].copy(),
                   grid_g=cloud.grid_g, constant=True)

    def check_covers(self, horizon: float):
        if not self.constant and self.times[-1] < horizon - 1e-12:
            raise ValueError(
                f"reference grid ends at {self.times[-1]:g} < horizon {horizon:g}"
            )

    def index_at(self, t: float) -> int:
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return max(0, min(idx, self.times.size - 1))

    def _ops(self, kernel: KacKernel, grid_g: int) -> _KernelFieldOps:
        key = (id(kernel), grid_g)
        if key not in self._ops_cache:
            # the ops object keeps the kernel alive, so the id stays valid
            self._ops_cache[key] = _KernelFieldOps(self.rho, kernel, grid_g)
        return self._ops_cache[key]

    def fields_at(self, t: float, kernel: KacKernel, grid_g: int,
                  eval_rho: np.ndarray):
        """(S0, S1) interaction fields of the snapshot active at time t."""
        s = self.index_at(t)
        key = (s, id(kernel), grid_g)
        if key not in self._field_cache:
            ops = self._ops(kernel, grid_g)
            self._field_cache[key] = (
                ops.field_at_centers(None),
                ops.field_at_centers(self.xs[s]),
            )
        c0, c1 = self._field_cache[key]
        ops = self._ops(kernel, grid_g)
        return ops.interp(c0, eval_rho), ops.interp(c1, eval_rho)

    def velocity_draw(self, t: float, rho_value: float, kernel: KacKernel,
                      grid_g: int, rng: np.random.Generator) -> np.ndarray:
        """Velocity from the active snapshot's weighted marginal at rho_value."""
        s = self.index_at(t)
        ops = self._ops(kernel, grid_g)
        partner = ops.draw_partner_at(rho_value, rng)
        if partner < 0:
            log.warning("empty reference window at rho=%g", rho_value)
            return np.zeros(self.xs.shape[2])
        return self.vs[s][partner].copy()


def _evolve(cloud: MeanFieldCloud, kernel: KacKernel, potentials: PotentialSpec,
            gamma_bar: float, horizon: float, dt_max: float, mode: str,
            rng: np.random.Generator, snapshot_times, observers,
            store_paths: bool, reference: PicardReference | None,
            force_method: str = "binned") -> CloudTrajectory:
    """Substep loop shared by the self-consistent and frozen-reference modes."""
    if force_method == "binned" and not potentials.w_is_harmonic:
        raise ValueError("binned cloud evolution requires harmonic W")
    m = cloud.m
    rho = cloud.rho
    x = cloud.x.copy()
    v = cloud.v.copy()

    if snapshot_times is None:
        snapshot_times = [0.0, horizon]
    snapshot_times = np.asarray(sorted(set(float(t) for t in snapshot_times)))
    if snapshot_times.size and snapshot_times[-1] > horizon + 1e-12:
        raise ValueError("snapshot times beyond the horizon")

    self_ops = _KernelFieldOps(rho, kernel, cloud.grid_g)
    if reference is not None:
        reference.check_covers(horizon)

    def force(x_now, t_now):
        if reference is not None:
            s0, s1 = reference.fields_at(t_now, kernel, cloud.grid_g, rho)
            acc = -(x_now * s0[:, None] - s1)
        elif force_method == "binned":
            acc = _interaction_accel_binned(self_ops, x_now, rho)
        else:
            acc = _interaction_accel_exact(rho, x_now, rho, x_now, kernel,
                                           potentials)
        return acc - potentials.u_grad(x_now)

    boundaries = set(snapshot_times.tolist())
    boundaries.add(float(horizon))
    if reference is not None:
        boundaries.update(float(rt) for rt in reference.times if 0.0 < rt < horizon)
    boundaries = np.asarray(sorted(b for b in boundaries if b > 0.0))

    rate = gamma_bar * m
    t = 0.0
    t_jump = rng.exponential(1.0 / rate) if rate > 0 else math.inf

    xs = [] if store_paths else None
    vs = [] if store_paths else None
    rec = {name: [] for name in (observers or {})}
    rec_times = []
    n_jumps = 0

    def record(t_now):
        rec_times.append(t_now)
        if store_paths:
            xs.append(x.copy())
            vs.append(v.copy())
        if observers:
            snap = MeanFieldCloud(t_now, rho, x, v, cloud.grid_g)  # read-only view
            for name, fn in observers.items():
                rec[name].append(fn(t_now, snap))

    snap_idx = 0
    if snapshot_times.size and snapshot_times[0] == 0.0:
        record(0.0)
        snap_idx = 1

    a = force(x, 0.0)
    for b_end in boundaries:
        if b_end <= t:
            continue
        seg = b_end - t
        n_steps = max(1, math.ceil(seg / dt_max - 1e-12))
        dt = seg / n_steps
        half = 0.5 * dt
        for _ in range(n_steps):
            t_end = t + dt
            v += half * a
            # drift phase with exact-time jumps; positions advance lazily
            last = np.full(m, t)
            while t_jump < t_end:
                jumper = int(rng.integers(m))
                x[jumper] += (t_jump - last[jumper]) * v[jumper]
                last[jumper] = t_jump
                if reference is None:
                    partner = self_ops.draw_partner(jumper, rng)
                    if partner != jumper:
                        x[partner] += (t_jump - last[partner]) * v[partner]
                        last[partner] = t_jump
                    if mode == "exchange":
                        tmp = v[jumper].copy()
                        v[jumper] = v[partner]
                        v[partner] = tmp
                    else:
                        v[jumper] = v[partner].copy()
                else:
                    v[jumper] = reference.velocity_draw(
                        t_jump, float(rho[jumper]), kernel, cloud.grid_g, rng)
                n_jumps += 1
                t_jump += rng.exponential(1.0 / rate)
            x += (t_end - last)[:, None] * v
            a = force(x, t_end)
            v += half * a
            t = t_end
        while snap_idx < snapshot_times.size and snapshot_times[snap_idx] <= t + 1e-12:
            record(snapshot_times[snap_idx])
            snap_idx += 1

    return CloudTrajectory(
        times=np.asarray(rec_times),
        rho=rho.copy(),
        xs=np.asarray(xs) if store_paths else None,
        vs=np.asarray(vs) if store_paths else None,
        grid_g=cloud.grid_g,
        records=rec,
        n_jumps=n_jumps,
    )


def evolve_cloud(cloud: MeanFieldCloud, kernel: KacKernel, potentials: PotentialSpec,
                 gamma_bar: float, horizon: float, dt_max: float,
                 mode: str, rng: np.random.Generator, snapshot_times=None,
                 observers=None, store_paths: bool = True,
                 force_method: str = "binned") -> CloudTrajectory:
    """Self-consistent evolution: jumps at total rate gamma_bar * M, Verlet
    drift between them, force field refreshed every substep."""
    if mode not in ("exchange", "resample"):
        raise ValueError(f"unknown jump mode {mode!r}")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if gamma_bar > 0 and kernel.ell * cloud.m < 100:
        # exchange windows need enough partners; pure drift has no such need
        raise ValueError("cloud too sparse: require M * ell >= 100")
    return _evolve(cloud, kernel, potentials, gamma_bar, horizon, dt_max, mode,
                   rng, snapshot_times, observers, store_paths, reference=None,
                   force_method=force_method)


def picard_step(reference: PicardReference, ic: InitialCondition, horizon: float,
                dt_max: float, kernel: KacKernel, potentials: PotentialSpec,
                gamma_bar: float, m: int, grid_g: int,
                rng_init: np.random.Generator, rng_evolve: np.random.Generator,
                snapshot_times=None) -> CloudTrajectory:
    """One linear (frozen-reference) evolution: forces and jump-velocity
    draws read the reference, never the evolving cloud itself."""
    reference.check_covers(horizon)
    cloud = init_cloud(ic, m, grid_g, rng_init)
    return _evolve(cloud, kernel, potentials, gamma_bar, horizon, dt_max,
                   mode="resample", rng=rng_evolve, snapshot_times=snapshot_times,
                   observers=None, store_paths=True, reference=reference)


def picard_iterate(ic: InitialCondition, kernel: KacKernel, potentials: PotentialSpec,
                   gamma_bar: float, horizon: float, dt_max: float, m: int,
                   grid_g: int, iterations: int, master_seed: int,
                   eps_inv: int, snapshot_times=None):
    """Run the Picard sequence and measure successive sliced path distances.

    Every iteration reuses the same initial cloud and the same evolution
    stream (common random numbers), coupling successive iterates the way
    the contraction argument couples the two linear solutions; the
    distance ratios are then measurable without replication.

    Returns (trajectories, distances, ratios); distances[k] is the sliced
    path distance between iterates k+1 and k, ratios[k] = distances[k] /
    distances[k-1].
    """
    from .transport import sliced_w1_paths

    if snapshot_times is None:
        step = min(dt_max * 10.0, horizon / 10.0)
        n_snap = round(horizon / step)
        snapshot_times = np.linspace(0.0, horizon, n_snap + 1)

    base = init_cloud(ic, m, grid_g, streams.stream(master_seed, "picard-init"))
    const_traj = CloudTrajectory(
        times=np.asarray(snapshot_times, dtype=float),
        rho=base.rho.copy(),
        xs=np.repeat(base.x[None, :, :], len(snapshot_times), axis=0),
        vs=np.repeat(base.v[None, :, :], len(snapshot_times), axis=0),
        grid_g=grid_g,
    )
    trajectories = [const_traj]
    reference = PicardReference.constant_from_cloud(base)
    for _ in range(iterations):
        traj = picard_step(
            reference, ic, horizon, dt_max, kernel, potentials, gamma_bar,
            m, grid_g,
            rng_init=streams.stream(master_seed, "picard-init"),
            rng_evolve=streams.stream(master_seed, "picard-evolve"),
            snapshot_times=snapshot_times,
        )
        trajectories.append(traj)
        reference = PicardReference.from_trajectory(traj)

    distances = []
    for k in range(len(trajectories) - 1):
        a, b = trajectories[k], trajectories[k + 1]
        distances.append(
            sliced_w1_paths(a.rho, a.paths(), b.rho, b.paths(), eps_inv)
        )
    ratios = [math.nan]
    for k in range(1, len(distances)):
        ratios.append(distances[k] / distances[k - 1] if distances[k - 1] > 0
                      else math.inf)
    return trajectories, distances, ratios


# -- generator diagnostics ------------------------------------------------


@dataclass(frozen=True)
class GeneratorTestFunction:
    """Observable with explicit phase-space gradients.

    ``value(r, x, v)`` must broadcast over leading axes; the gradients
    return arrays broadcast like x and v.  ``jump_moment``, when present,
    computes the jump integral sum_w gam[c, w] (psi(r_c, x_c, v_w) -
    psi(r_c, x_c, v_c)) without materializing the pairwise array; it is a
    pure optimization hook used by the bulk residual evaluator and must
    agree with ``value`` (the generic path remains the reference).
    """

    name: str
    value: object
    grad_x: object
    grad_v: object
    jump_moment: object = None


def _bshape(x, v):
    return np.broadcast_shapes(np.shape(x), np.shape(v))


def _unit_first(x, v):
    out = np.zeros(_bshape(x, v))
    out[..., 0] = 1.0
    return out


def default_test_functions(d: int, bump_radius: float = 4.0):
    """Basket probing drift, exchange, and boundedness separately:
    {1, v_1, x_1, kinetic energy, x.v, compact bump of |z|}."""

    def _jump_zero(gam, vw, re_, xe, ve):
        # the observable does not depend on v: the jump integral vanishes
        return np.zeros(gam.shape[0])

    def _jump_v1(gam, vw, re_, xe, ve):
        return gam @ vw[:, 0] - gam.sum(axis=1) * ve[:, 0]

    def _jump_kinetic(gam, vw, re_, xe, ve):
        kin_w = 0.5 * np.sum(vw * vw, axis=-1)
        return gam @ kin_w - gam.sum(axis=1) * 0.5 * np.sum(ve * ve, axis=-1)

    def _jump_xv(gam, vw, re_, xe, ve):
        return (np.sum(xe * (gam @ vw), axis=-1)
                - gam.sum(axis=1) * np.sum(xe * ve, axis=-1))

    funcs = [
        GeneratorTestFunction(
            "const",
            lambda r, x, v: np.ones(_bshape(x, v)[:-1]),
            lambda r, x, v: np.zeros(_bshape(x, v)),
            lambda r, x, v: np.zeros(_bshape(x, v)),
            jump_moment=_jump_zero,
        ),
        GeneratorTestFunction(
            "v1",
            lambda r, x, v: (np.asarray(v)[..., 0]
                             + 0.0 * np.asarray(x)[..., 0]),
            lambda r, x, v: np.zeros(_bshape(x, v)),
            lambda r, x, v: _unit_first(x, v),
            jump_moment=_jump_v1,
        ),
        GeneratorTestFunction(
            "x1",
            lambda r, x, v: (np.asarray(x)[..., 0]
                             + 0.0 * np.asarray(v)[..., 0]),
            lambda r, x, v: _unit_first(x, v),
            lambda r, x, v: np.zeros(_bshape(x, v)),
            jump_moment=_jump_zero,
        ),
        GeneratorTestFunction(
            "kinetic",
            lambda r, x, v: (0.5 * np.sum(np.asarray(v) ** 2, axis=-1)
                             + 0.0 * np.asarray(x)[..., 0]),
            lambda r, x, v: np.zeros(_bshape(x, v)),
            lambda r, x, v: np.broadcast_to(np.asarray(v), _bshape(x, v)) + 0.0,
            jump_moment=_jump_kinetic,
        ),
        GeneratorTestFunction(
            "xv",
            lambda r, x, v: np.sum(np.asarray(x) * np.asarray(v), axis=-1),
            lambda r, x, v: np.broadcast_to(np.asarray(v), _bshape(x, v)) + 0.0,
            lambda r, x, v: np.broadcast_to(np.asarray(x), _bshape(x, v)) + 0.0,
            jump_moment=_jump_xv,
        ),
    ]

    r2 = bump_radius * bump_radius

    def _s(x, v):
        return (np.sum(np.asarray(x) ** 2, axis=-1)
                + np.sum(np.asarray(v) ** 2, axis=-1)) / r2

    def bump_val(r, x, v):
        s = _s(x, v)
        inside = s < 1.0
        safe = np.where(inside, 1.0 - s, 1.0)
        return np.where(inside, np.exp(-1.0 / safe), 0.0)

    def bump_dds(x, v):
        s = _s(x, v)
        inside = s < 1.0
        safe = np.where(inside, 1.0 - s, 1.0)
        return np.where(inside, -np.exp(-1.0 / safe) / safe**2, 0.0)

    funcs.append(GeneratorTestFunction(
        "bump",
        bump_val,
        lambda r, x, v: (bump_dds(x, v)[..., None]
                         * 2.0 * np.broadcast_to(np.asarray(x), _bshape(x, v)) / r2),
        lambda r, x, v: (bump_dds(x, v)[..., None]
                         * 2.0 * np.broadcast_to(np.asarray(v), _bshape(x, v)) / r2),
    ))
    return funcs


def generator_apply(cloud: MeanFieldCloud, psi: GeneratorTestFunction, point,
                    kernel: KacKernel, potentials: PotentialSpec,
                    gamma_bar: float) -> float:
    """Generator value A[nu]psi + gamma_bar S[nu]psi at one phase point,
    with the cloud as the measure nu (exact kernel-weighted sums)."""
    r, x, v = point
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    phi_w = kernel.phi_eval(r - cloud.rho) / cloud.m
    grads = potentials.w_grad(x[None, :] - cloud.x)
    f_int = np.sum(phi_w[:, None] * grads, axis=0)
    drift = float(
        np.sum(v * np.asarray(psi.grad_x(r, x, v)))
        - np.sum((f_int + potentials.u_grad(x)) * np.asarray(psi.grad_v(r, x, v)))
    )
    gamma_w = kernel.gamma_eval(r - cloud.rho) / cloud.m
    vals = psi.value(r, x[None, :], cloud.v)
    jump = float(np.sum(gamma_w * (vals - psi.value(r, x, v))))
    return drift + gamma_bar * jump


def generator_residual(traj: CloudTrajectory, psis, delta: float,
                       kernel: KacKernel, potentials: PotentialSpec,
                       gamma_bar: float, pair_index: int = 0,
                       chunk: int = 512) -> dict:
    """Martingale residual E[psi(Y_{t+delta}) - psi(Y_t) - delta L psi(Y_t)].

    Uses the trajectory's snapshot ``pair_index`` and the snapshot delta
    later; the generator integrals are exact kernel-weighted sums over the
    cloud, evaluated in rho-sorted chunks that share the kernel weight
    slices across the whole basket.  Returns {name: (mean, stderr)}.
    """
    times = traj.times
    t0 = float(times[pair_index])
    t1_idx = int(np.argmin(np.abs(times - (t0 + delta))))
    if abs(times[t1_idx] - t0 - delta) > 1e-9:
        raise ValueError("trajectory grid does not contain the requested delta pair")
    rho = traj.rho
    x0, v0 = traj.xs[pair_index], traj.vs[pair_index]
    x1, v1 = traj.xs[t1_idx], traj.vs[t1_idx]
    m = rho.shape[0]

    order = np.argsort(rho, kind="stable")
    rs = rho[order]
    xs = x0[order]
    vs = v0[order]
    half = kernel.ell / 2.0

    residuals = {psi.name: np.empty(m) for psi in psis}
    for start in range(0, m, chunk):
        sel = order[start:start + chunk]
        re_ = rho[sel]
        xe = x0[sel]
        ve = v0[sel]
        stop = min(start + chunk, m)
        w_idx = _windowed_indices(rs, rs[start] - half, rs[stop - 1] + half)
        rw, xw, vw = rs[w_idx], xs[w_idx], vs[w_idx]
        u = torus_delta(re_[:, None] - rw[None, :]) / kernel.ell
        phi_w = kernel.profile_phi(u) / (kernel.ell * m)
        if kernel.profile_gamma is kernel.profile_phi:
            gam_w = phi_w
        else:
            gam_w = kernel.profile_gamma(u) / (kernel.ell * m)
        if potentials.w_is_harmonic:
            # sum_w phi (x_e - x_w) = x_e (sum phi) - phi @ x_w
            f_int = xe * phi_w.sum(axis=1)[:, None] - phi_w @ xw
        else:
            grads = potentials.w_grad(xe[:, None, :] - xw[None, :, :])
            f_int = np.sum(phi_w[..., None] * grads, axis=1)
        force = -(f_int + potentials.u_grad(xe))
        for psi in psis:
            base = np.asarray(psi.value(re_, xe, ve))
            drift = (np.sum(ve * np.asarray(psi.grad_x(re_, xe, ve)), axis=-1)
                     + np.sum(force * np.asarray(psi.grad_v(re_, xe, ve)), axis=-1))
            if psi.jump_moment is not None:
                jump = np.asarray(psi.jump_moment(gam_w, vw, re_, xe, ve))
            else:
                vals = np.asarray(psi.value(re_[:, None], xe[:, None, :],
                                            vw[None, :, :]))
                jump = np.sum(gam_w * (vals - base[:, None]), axis=1)
            lpsi = drift + gamma_bar * jump
            residuals[psi.name][start:stop] = (
                np.asarray(psi.value(rho[sel], x1[sel], v1[sel])) - base - delta * lpsi
            )
    out = {}
    for psi in psis:
        res = residuals[psi.name]
        out[psi.name] = (float(res.mean()), float(res.std(ddof=1) / math.sqrt(m)))
    return out


def cloud_energy_mean(cloud: MeanFieldCloud, kernel: KacKernel,
                      potentials: PotentialSpec) -> float:
    """Mean per-sample energy with the kernel-weighted interaction share."""
    if not potentials.w_is_harmonic:
        raise ValueError("cloud energy mean implemented for harmonic W")
    ops = _KernelFieldOps(cloud.rho, kernel, cloud.grid_g)
    sq = np.sum(cloud.x**2, axis=-1)
    s2 = ops.interp(ops.field_at_centers(sq), cloud.rho)
    s1 = ops.interp(ops.field_at_centers(cloud.x), cloud.rho)
    s0 = ops.interp(ops.field_at_centers(None), cloud.rho)
    inter = 0.5 * (sq * s0 + s2 - 2.0 * np.sum(cloud.x * s1, axis=-1))
    e = 0.5 * np.sum(cloud.v**2, axis=-1) + 0.5 * inter + potentials.u_value(cloud.x)
    return float(e.mean())


def mean_z_squared_bound(cloud: MeanFieldCloud, kernel: KacKernel,
                         potentials: PotentialSpec) -> float:
    """Conservation-implied bound on sup_t mean |z|^2.

    The kinetic part bounds mean |v|^2 by twice the mean energy; the
    coercivity constant c with |x|^2 <= c U(x) bounds mean |x|^2 by c
    times the mean energy.  Exchange dynamics conserve the energy, so the
    time-zero value bounds all later ones (up to integrator error).
    """
    e0 = cloud_energy_mean(cloud, kernel, potentials)
    return (2.0 + potentials.lipschitz_c) * e0
