"""Energy observables and the diffusive-transport experiment.

Coarse-grains site or cloud energies onto a periodic grid, forms the
mechanical and stochastic energy currents, solves the limiting heat
equation spectrally, measures the time-equipartition residual and the
Hamiltonian-current integral at diffusive scale, and runs the full
experiment comparing the measured energy field against the heat-equation
reference with diffusivity gamma_bar * c_gamma / 2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import chain as chain_mod
from . import meanfield as mf_mod
from . import streams
from .meanfield import CloudTrajectory, MeanFieldCloud, _KernelFieldOps
from .model import (
    InitialCondition,
    KacKernel,
    ModelParams,
    PotentialSpec,
    kernel_moments,
)

__all__ = [
    "EnergyProfile",
    "CurrentField",
    "HeatProfile",
    "energy_profile",
    "energy_currents",
    "heat_solve",
    "equipartition_residual",
    "hamiltonian_current_check",
    "diffusion_experiment",
    "mode_amplitude",
    "fit_mode_decay",
]

log = logging.getLogger(__name__)


@dataclass
class EnergyProfile:
    """Binned mean energies with standard errors on a periodic grid."""

    grid_g: int
    r_centers: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    source: str
    t: float = 0.0

    def population_mean(self) -> float:
        """Mass-weighted bin means; equals total energy / population."""
        total = self.counts.sum()
        return float(np.sum(self.counts * self.mean) / total)


def _bin_means(r: np.ndarray, values: np.ndarray, grid_g: int):
    # bins are half-open on the left, (g/G, (g+1)/G], like the box partition
    rm = r - np.floor(r)
    rm = np.where(rm == 0.0, 1.0, rm)
    idx = (np.ceil(rm * grid_g).astype(np.int64) - 1) % grid_g
    counts = np.bincount(idx, minlength=grid_g)
    if np.any(counts == 0):
        # merge empty bins into their left neighbour by re-binning coarser
        empty = int(np.sum(counts == 0))
        log.warning("energy profile: %d empty bins merged into neighbours", empty)
        nonempty = counts > 0
        sums = np.bincount(idx, weights=values, minlength=grid_g)
        sq = np.bincount(idx, weights=values * values, minlength=grid_g)
        fill = np.nonzero(nonempty)[0]
        take = fill[np.searchsorted(fill, np.arange(grid_g), side="right") - 1]
        counts = counts[take]
        sums = sums[take]
        sq = sq[take]
    else:
        sums = np.bincount(idx, weights=values, minlength=grid_g)
        sq = np.bincount(idx, weights=values * values, minlength=grid_g)
    mean = sums / counts
    var = np.maximum(sq / counts - mean * mean, 0.0)
    se = np.sqrt(var / np.maximum(counts - 1, 1))
    return counts, mean, se


def _cloud_site_energies(cloud: MeanFieldCloud, kernel: KacKernel,
                         potentials: PotentialSpec) -> np.ndarray:
    """Per-sample energy |v|^2/2 + |x|^2/4 + U(x) + (kernel mean |x'|^2)/4."""
    if not potentials.w_is_harmonic:
        raise ValueError("cloud energy decomposition requires harmonic W")
    ops = _KernelFieldOps(cloud.rho, kernel, cloud.grid_g)
    sq = np.sum(cloud.x**2, axis=-1)
    s2 = ops.interp(ops.field_at_centers(sq), cloud.rho)
    return (0.5 * np.sum(cloud.v**2, axis=-1) + 0.25 * sq
            + potentials.u_value(cloud.x) + 0.25 * s2)


def energy_profile(source, kernel: KacKernel, potentials: PotentialSpec,
                   grid_g: int) -> EnergyProfile:
    """Coarse-grained energy field from a chain state or a cloud."""
    if isinstance(source, chain_mod.ChainState):
        values = chain_mod.site_energies(source, kernel, potentials)
        r = source.site_coords()
        kind = "chain"
        t = source.t
    elif isinstance(source, MeanFieldCloud):
        values = _cloud_site_energies(source, kernel, potentials)
        r = source.rho
        kind = "cloud"
        t = source.t
    else:
        raise TypeError("source must be a ChainState or a MeanFieldCloud")
    counts, mean, se = _bin_means(r, values, grid_g)
    centers = (np.arange(grid_g) + 0.5) / grid_g
    return EnergyProfile(grid_g=grid_g, r_centers=centers, mean=mean, se=se,
                         counts=counts, source=kind, t=t)


@dataclass
class CurrentField:
    """Per-bin first moments feeding the bin-pair energy currents.

    j_mech[g, g'] = (1/2)(<v.x>_g - <v.x>_{g'}) and
    j_stoch[g, g'] = <|v|^2/2>_g - <|v|^2/2>_{g'}; both exactly
    antisymmetric by construction.
    """

    r_centers: np.ndarray
    vx_mean: np.ndarray
    kinetic_mean: np.ndarray
    vx_se: np.ndarray
    kinetic_se: np.ndarray

    def j_mech(self) -> np.ndarray:
        half = 0.5 * self.vx_mean
        return half[:, None] - half[None, :]

    def j_stoch(self) -> np.ndarray:
        return self.kinetic_mean[:, None] - self.kinetic_mean[None, :]


def energy_currents(cloud: MeanFieldCloud, kernel: KacKernel,
                    grid_g: int) -> CurrentField:
    """Bin-pair mechanical and stochastic current moments of a cloud."""
    vx = np.sum(cloud.v * cloud.x, axis=-1)
    kin = 0.5 * np.sum(cloud.v**2, axis=-1)
    _, vx_mean, vx_se = _bin_means(cloud.rho, vx, grid_g)
    _, kin_mean, kin_se = _bin_means(cloud.rho, kin, grid_g)
    centers = (np.arange(grid_g) + 0.5) / grid_g
    return CurrentField(r_centers=centers, vx_mean=vx_mean, kinetic_mean=kin_mean,
                        vx_se=vx_se, kinetic_se=kin_se)


@dataclass
class HeatProfile:
    """Heat-equation solution values on the periodic grid."""

    values: np.ndarray
    diffusivity: float
    t: float

    def mass(self) -> float:
        """Trapezoid integral over the periodic grid (= the grid mean)."""
        return float(np.mean(self.values))


def heat_solve(e0: np.ndarray, diffusivity: float, t: float) -> HeatProfile:
    """Spectral solution of de/dt = D d^2e/dr^2 on the unit torus.

    Fourier mode m decays by exp(-D (2 pi m)^2 t); exact for
    grid-band-limited data.
    """
    if diffusivity < 0 or t < 0:
        raise ValueError("diffusivity and time must be nonnegative")
    e0 = np.asarray(e0, dtype=float)
    g = e0.shape[0]
    modes = np.fft.rfftfreq(g) * g  # integer mode numbers 0..g/2
    decay = np.exp(-diffusivity * (2.0 * np.pi * modes) ** 2 * t)
    values = np.fft.irfft(np.fft.rfft(e0) * decay, n=g)
    return HeatProfile(values=values, diffusivity=diffusivity, t=t)


def _trapezoid(times: np.ndarray, values: np.ndarray) -> float:
    return float(np.trapezoid(values, times))


def equipartition_residual(traj: CloudTrajectory, kernel: KacKernel,
                           potentials: PotentialSpec, g_test, t_scaled: float,
                           ell: float, grid_g: int | None = None) -> float:
    """Time-equipartition defect at diffusive scale.

    Returns int_0^t <|v|^2/2 G(rho)> ds - (1/2) int_0^t int E_s(r) G(r) dr ds,
    both in scaled time s (trajectory snapshot times are raw, scaled by
    ell^2).  Vanishes at rate O((1 + gamma_bar) t ell^2) for degree-2
    homogeneous pinning.
    """
    if not potentials.u_is_homogeneous:
        raise ValueError("equipartition requires degree-2 homogeneous pinning")
    if traj.xs is None:
        raise ValueError("trajectory must store paths")
    grid_g = grid_g or traj.grid_g
    scaled = traj.times * ell * ell
    keep = scaled <= t_scaled + 1e-12
    scaled = scaled[keep]
    gothic = np.asarray(g_test(traj.rho), dtype=float)
    term1 = np.empty(scaled.size)
    term2 = np.empty(scaled.size)
    centers = (np.arange(grid_g) + 0.5) / grid_g
    g_centers = np.asarray(g_test(centers), dtype=float)
    for s in range(scaled.size):
        kin = 0.5 * np.sum(traj.vs[s] ** 2, axis=-1)
        term1[s] = float(np.mean(kin * gothic))
        snap = traj.cloud_at(s)
        prof = energy_profile(snap, kernel, potentials, grid_g)
        term2[s] = float(np.mean(prof.mean * g_centers))
    return _trapezoid(scaled, term1) - 0.5 * _trapezoid(scaled, term2)


def hamiltonian_current_check(traj: CloudTrajectory, g_second_derivative,
                              t_scaled: float, ell: float) -> float:
    """Scaled integral int_0^t <(x.v/2) g''(rho)> ds; expected O(t ell^2)."""
    if traj.xs is None:
        raise ValueError("trajectory must store paths")
    scaled = traj.times * ell * ell
    keep = scaled <= t_scaled + 1e-12
    scaled = scaled[keep]
    gpp = np.asarray(g_second_derivative(traj.rho), dtype=float)
    vals = np.empty(scaled.size)
    for s in range(scaled.size):
        xv = 0.5 * np.sum(traj.xs[s] * traj.vs[s], axis=-1)
        vals[s] = float(np.mean(xv * gpp))
    return _trapezoid(scaled, vals)


def mode_amplitude(values: np.ndarray, mode: int, se: np.ndarray | None = None):
    """Cosine/sine amplitude of one Fourier mode of grid values.

    Returns (amplitude, amplitude_se); the amplitude is the root sum of
    squares of the cosine and sine projections, so a pure cos(2 pi m r)
    profile of unit strength reports 1.
    """
    g = values.shape[0]
    centers = (np.arange(g) + 0.5) / g
    cosv = np.cos(2.0 * np.pi * mode * centers)
    sinv = np.sin(2.0 * np.pi * mode * centers)
    ac = 2.0 * float(np.mean(values * cosv))
    as_ = 2.0 * float(np.mean(values * sinv))
    amp = math.hypot(ac, as_)
    if se is None:
        return amp, 0.0
    var = np.sum(((2.0 / g) * cosv * se) ** 2) + np.sum(((2.0 / g) * sinv * se) ** 2)
    return amp, math.sqrt(var)


def fit_mode_decay(times: np.ndarray, amps: np.ndarray, ses: np.ndarray,
                   se_factor: float = 5.0):
    """Log-linear least-squares decay rate over well-resolved amplitudes.

    Uses only points with amplitude above ``se_factor`` times its standard
    error; returns (rate, n_points_used); rate is positive for decay.
    """
    times = np.asarray(times, float)
    amps = np.asarray(amps, float)
    ses = np.asarray(ses, float)
    keep = amps > se_factor * ses
    if np.sum(keep) < 2:
        return math.nan, int(np.sum(keep))
    tt = times[keep]
    yy = np.log(amps[keep])
    slope = np.polyfit(tt, yy, 1)[0]
    return -float(slope), int(np.sum(keep))


def diffusion_experiment(n: int, ell_values, gamma_bar: float,
                         ic: InitialCondition, scaled_times, engine: str,
                         kernel_builder, master_seed: int, replicas: int = 1,
                         grid_g: int = 64, dt_max: float | None = None,
                         cloud_m: int | None = None,
                         event_budget: float = 5e7) -> dict:
    """Diffusive-scaling experiment: measured energy field vs heat solution.

    For each interaction range ell, local-Gibbs chains (or clouds) evolve
    to raw times t/ell^2; coarse-grained energy profiles are compared with
    the spectral solution started from the exact initial field
    e0(r) = d * T(r) with diffusivity gamma_bar * c_gamma / 2.  Replicas
    share seeds across ell values, so the ell comparison runs on common
    random numbers.

    Returns a report dict with per-ell L1 profile errors, first-mode
    amplitudes and fitted decay rates, and the test-function observables
    {1, cos 2 pi r, sin 2 pi r, cos 4 pi r}.
    """
    if engine not in ("chain", "cloud"):
        raise ValueError(f"unknown engine {engine!r}")
    potentials = ic.potentials
    if not potentials.w_is_harmonic:
        raise ValueError("energy transport experiment requires harmonic W")
    if not potentials.u_is_homogeneous:
        raise ValueError("pinning must be harmonic or homogeneous-symmetric")
    scaled_times = np.asarray(sorted(set([0.0] + [float(t) for t in scaled_times])))
    d = ic.d
    centers = (np.arange(grid_g) + 0.5) / grid_g
    # the reference is compared against bin averages, so it is solved on a
    # refined grid and averaged over each bin
    refine = 16
    fine_centers = (np.arange(grid_g * refine) + 0.5) / (grid_g * refine)
    e0_fine = d * np.asarray(ic.temperature(fine_centers), dtype=float)

    basket = {
        "one": lambda r: np.ones_like(r),
        "cos2pi": lambda r: np.cos(2 * np.pi * r),
        "sin2pi": lambda r: np.sin(2 * np.pi * r),
        "cos4pi": lambda r: np.cos(4 * np.pi * r),
    }

    report = {"engine": engine, "n": n, "gamma_bar": gamma_bar,
              "grid_g": grid_g, "replicas": replicas, "per_ell": {}}
    c_gamma = None

    for ell in ell_values:
        kernel = kernel_builder(ell, n)
        if c_gamma is None:
            c_gamma = kernel_moments(kernel)[1]
            diffusivity = gamma_bar * c_gamma / 2.0
            report["c_gamma"] = c_gamma
            report["diffusivity"] = diffusivity
        params = ModelParams(n=n, ell=ell, gamma_bar=gamma_bar, d=d,
                             dt_max=dt_max, seed=master_seed)
        raw_times = scaled_times / (ell * ell)
        horizon = float(raw_times[-1])
        est_events = gamma_bar * n * 0.5 * horizon
        if est_events > event_budget:
            raise RuntimeError(
                f"event budget exceeded: ~{est_events:.3g} exchanges at ell={ell}"
            )

        sums = np.zeros((scaled_times.size, grid_g))
        sqs = np.zeros((scaled_times.size, grid_g))
        obs_sums = {name: np.zeros(scaled_times.size) for name in basket}
        for rep in range(replicas):
            rng = streams.replica_stream(master_seed, "diffusion", rep)
            profiles = _run_energy_profiles(
                engine, params, kernel, potentials, ic, raw_times, grid_g,
                cloud_m or n, rng)
            for s, prof in enumerate(profiles):
                sums[s] += prof.mean
                sqs[s] += prof.mean**2
                for name, fn in basket.items():
                    weights = prof.counts / prof.counts.sum()
                    obs_sums[name][s] += float(
                        np.sum(weights * prof.mean * fn(prof.r_centers)))

        mean_prof = sums / replicas
        if replicas > 1:
            se_prof = np.sqrt(np.maximum(sqs / replicas - mean_prof**2, 0.0)
                              / (replicas - 1))
        else:
            se_prof = np.zeros_like(mean_prof)

        l1 = []
        amps = []
        amp_ses = []
        refs = []
        for s, ts in enumerate(scaled_times):
            fine = heat_solve(e0_fine, diffusivity, float(ts))
            ref_vals = fine.values.reshape(grid_g, refine).mean(axis=1)
            refs.append(ref_vals)
            l1.append(float(np.mean(np.abs(mean_prof[s] - ref_vals))))
            amp, amp_se = mode_amplitude(mean_prof[s], 1, se_prof[s])
            amps.append(amp)
            amp_ses.append(amp_se)
        rate, n_used = fit_mode_decay(scaled_times, np.asarray(amps),
                                      np.asarray(amp_ses))
        expected_rate = diffusivity * (2.0 * np.pi) ** 2

        observables = {}
        for name, fn in basket.items():
            measured = obs_sums[name] / replicas
            reference = np.array([float(np.mean(rv * fn(centers))) for rv in refs])
            observables[name] = {
                "measured": measured.tolist(),
                "reference": reference.tolist(),
            }

        report["per_ell"][float(ell)] = {
            "scaled_times": scaled_times.tolist(),
            "l1_errors": l1,
            "mode1_amplitudes": amps,
            "mode1_amse": amp_ses,
            "fitted_rate": rate,
            "fit_points": n_used,
            "expected_rate": expected_rate,
            "profiles": mean_prof.tolist(),
            "profile_se": se_prof.tolist(),
            "observables": observables,
        }
    return report


def _run_energy_profiles(engine, params, kernel, potentials, ic, raw_times,
                         grid_g, cloud_m, rng):
    """One replica run returning an EnergyProfile per requested raw time."""
    profiles = []
    if engine == "chain":
        def make_profile(t, state):
            return energy_profile(state, kernel, potentials, grid_g)

        result = chain_mod.simulate_chain(
            params, kernel, potentials, ic, float(raw_times[-1]),
            observers={"profile": make_profile}, rng=rng,
            sample_times=raw_times)
        profiles = result["profile"]
    else:
        cloud = mf_mod.init_cloud(ic, cloud_m, grid_g, rng)

        def cloud_profile(t, snap):
            return energy_profile(snap, kernel, potentials, grid_g)

        traj = mf_mod.evolve_cloud(
            cloud, kernel, potentials, params.gamma_bar, float(raw_times[-1]),
            params.dt_max, "exchange", rng, snapshot_times=raw_times,
            observers={"profile": cloud_profile}, store_paths=False)
        profiles = traj.records["profile"]
    return profiles
