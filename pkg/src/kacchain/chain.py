"""N-oscillator chain: Hamiltonian drift plus Poisson-timed velocity swaps.

The jump process has a state-independent total rate, so the simulation
loop is an exact-time Gillespie scheme: draw the exponential waiting time,
integrate the deterministic flow up to the event instant with velocity
Verlet, swap the two velocities, repeat.  Only the drift carries
integrator error; exchanges are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import KacKernel, ModelParams, PotentialSpec, sample_initial

__all__ = [
    "ChainState",
    "ExchangeEvent",
    "EmpiricalMeasure",
    "ForceEngine",
    "compute_forces",
    "hamiltonian_flow",
    "ExchangeProcess",
    "next_exchange",
    "apply_exchange",
    "simulate_chain",
    "empirical_measure",
    "site_energies",
    "total_energy",
]


@dataclass
class ChainState:
    """Microscopic configuration: time, displacements x, momenta v.

    Site i (0-based array index) sits at torus coordinate (i+1)/n.
    """

    t: float
    x: np.ndarray  # (n, d)
    v: np.ndarray  # (n, d)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def site_coords(self) -> np.ndarray:
        return (np.arange(self.n) + 1.0) / self.n

    def copy(self) -> "ChainState":
        return ChainState(self.t, self.x.copy(), self.v.copy())

    def check_finite(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise FloatingPointError("chain state contains non-finite entries")


@dataclass(frozen=True)
class ExchangeEvent:
    """A velocity swap between sites i and j = i + k mod n."""

    t: float
    i: int
    j: int


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight atoms (r, x, v) on the cylinder T x R^{2d}."""

    r: np.ndarray  # (m,)
    x: np.ndarray  # (m, d)
    v: np.ndarray  # (m, d)

    @property
    def count(self) -> int:
        return self.r.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.count, 1.0 / self.count)

    def points(self) -> np.ndarray:
        """Atoms as rows (r, x_1..x_d, v_1..v_d)."""
        return np.concatenate([self.r[:, None], self.x, self.v], axis=1)

    def z_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.x**2, axis=-1) + np.sum(self.v**2, axis=-1))


class UnsupportedForceMethod(ValueError):
    pass


class ForceEngine:
    """Evaluates F_i = -sum_k phi_k grad W(x_i - x_{i+k}) - grad U(x_i).

    For harmonic W the interaction sum is linear in x and is computed by a
    circular correlation with the lag coefficients (FFT for n >= 256, an
    explicit lag loop below that); general W always uses the lag loop.
    """

    def __init__(self, kernel: KacKernel, potentials: PotentialSpec, n: int,
                 method: str = "auto"):
        if method not in ("auto", "naive", "convolution"):
            raise ValueError(f"unknown force method {method!r}")
        if method == "convolution" and not potentials.w_is_harmonic:
            raise UnsupportedForceMethod(
                "convolution forces require a harmonic pair potential"
            )
        if method == "auto":
            method = "convolution" if (potentials.w_is_harmonic and n >= 256) else "naive"
        self.method = method
        self.kernel = kernel
        self.potentials = potentials
        self.n = n
        if method == "convolution":
            kern = np.zeros(n)
            for lag, w in zip(kernel.lags, kernel.phi_k):
                kern[lag % n] += w
            self._kern_hat = np.conj(np.fft.rfft(kern))[:, None]
            self._sum_phi = kernel.sum_phi

    def __call__(self, x: np.ndarray) -> np.ndarray:
        pot = self.potentials
        if self.method == "convolution":
            corr = np.fft.irfft(np.fft.rfft(x, axis=0) * self._kern_hat,
                                n=self.n, axis=0)
            f = corr - self._sum_phi * x - pot.u_grad(x)
        else:
            f = -pot.u_grad(x)
            k_max = self.kernel.lag_max
            for lag in range(-k_max, k_max + 1):
                if lag == 0:
                    continue
                w = self.kernel.phi_lag(lag)
                if w == 0.0:
                    continue
                f -= w * pot.w_grad(x - np.roll(x, -lag, axis=0))
        return f


def compute_forces(state: ChainState, kernel: KacKernel, potentials: PotentialSpec,
                   method: str = "naive") -> np.ndarray:
    """Forces on every site; "naive" and "convolution" agree to rounding."""
    return ForceEngine(kernel, potentials, state.n, method)(state.x)


def _drift(x, v, a, duration, dt_max, force):
    """In-place velocity-Verlet advance by ``duration``; returns final forces.

    Uses ceil(duration/dt_max) equal steps so the segment lands exactly on
    its endpoint and forward/backward step sequences mirror each other.
    """
    if duration <= 0.0:
        return a
    n_steps = max(1, math.ceil(duration / dt_max - 1e-12))
    dt = duration / n_steps
    half = 0.5 * dt
    for _ in range(n_steps):
        v += half * a
        x += dt * v
        a = force(x)
        if not np.all(np.isfinite(a)):
            bad = int(np.argwhere(~np.isfinite(a))[0][0])
            raise FloatingPointError(f"non-finite force at site {bad}")
        v += half * a
    return a


def hamiltonian_flow(state: ChainState, duration: float, dt_max: float,
                     kernel: KacKernel, potentials: PotentialSpec,
                     method: str = "auto") -> ChainState:
    """Advance the deterministic flow by ``duration`` (gamma_bar = 0 dynamics)."""
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    out = state.copy()
    if duration == 0.0:
        return out
    force = ForceEngine(kernel, potentials, state.n, method)
    a = force(out.x)
    _drift(out.x, out.v, a, duration, dt_max, force)
    out.t = state.t + duration
    return out


class ExchangeProcess:
    """Samples the velocity-exchange point process.

    The total rate Lambda = gamma_bar * n * sum_{k>=1} gamma_k does not
    depend on the state; the site is uniform and the positive lag k is
    drawn with probability gamma_k / sum_{k'>=1} gamma_{k'}.  Self-pairs
    (k = 0) exchange a velocity with itself and are omitted as no-ops.
    """

    def __init__(self, kernel: KacKernel, params: ModelParams):
        self.n = params.n
        self.gamma_bar = params.gamma_bar
        pos = kernel.gamma_k[kernel.lag_max + 1:]
        self._pos_total = float(pos.sum())
        self._pos_cdf = np.cumsum(pos)
        self.rate = params.gamma_bar * params.n * self._pos_total

    def draw(self, rng: np.random.Generator):
        """One event: (waiting time, site i, site j)."""
        if self.rate <= 0.0:
            return math.inf, -1, -1
        wait = rng.exponential(1.0 / self.rate)
        i = int(rng.integers(self.n))
        u = rng.random() * self._pos_total
        k = int(np.searchsorted(self._pos_cdf, u, side="right")) + 1
        j = (i + k) % self.n
        return wait, i, j


def next_exchange(kernel: KacKernel, params: ModelParams,
                  rng: np.random.Generator):
    """Next exchange event: (wait, ExchangeEvent with t set to the wait).

    Returns (inf, None) when gamma_bar = 0.
    """
    proc = ExchangeProcess(kernel, params)
    wait, i, j = proc.draw(rng)
    if math.isinf(wait):
        return math.inf, None
    return wait, ExchangeEvent(t=wait, i=i, j=j)


def apply_exchange(state: ChainState, event: ExchangeEvent) -> ChainState:
    """Swap the velocities of the event's two sites; positions untouched."""
    if event.i == event.j:
        raise ValueError("exchange requires two distinct sites")
    out = state.copy()
    out.v[event.i] = state.v[event.j]
    out.v[event.j] = state.v[event.i]
    return out


def site_energies(state: ChainState, kernel: KacKernel,
                  potentials: PotentialSpec) -> np.ndarray:
    """Per-site energy: kinetic + pinning + half the pair-interaction share.

    Harmonic W uses (1/4) sum_k phi_k |x_i - x_{i+k}|^2, whose total equals
    the Hamiltonian exactly; general W uses (1/2) sum_k phi_k W(x_i - x_{i+k}).
    """
    x, v = state.x, state.v
    n = state.n
    e = 0.5 * np.sum(v * v, axis=-1) + potentials.u_value(x)
    if potentials.w_is_harmonic and n >= 2048:
        kern = np.zeros(n)
        for lag, w in zip(kernel.lags, kernel.phi_k):
            kern[lag % n] += w
        kern_hat = np.conj(np.fft.rfft(kern))
        sq = np.sum(x * x, axis=-1)
        corr_sq = np.fft.irfft(np.fft.rfft(sq) * kern_hat, n=n)
        corr_x = np.fft.irfft(np.fft.rfft(x, axis=0) * kern_hat[:, None], n=n, axis=0)
        e += 0.25 * (kernel.sum_phi * sq + corr_sq - 2.0 * np.sum(x * corr_x, axis=-1))
        return e
    inter = np.zeros(n)
    for lag in range(-kernel.lag_max, kernel.lag_max + 1):
        if lag == 0:
            continue
        w = kernel.phi_lag(lag)
        if w == 0.0:
            continue
        diff = x - np.roll(x, -lag, axis=0)
        if potentials.w_is_harmonic:
            inter += 0.25 * w * np.sum(diff * diff, axis=-1)
        else:
            inter += 0.5 * w * potentials.w_value(diff)
    return e + inter


def total_energy(state: ChainState, kernel: KacKernel,
                 potentials: PotentialSpec) -> float:
    """Chain Hamiltonian (equals the sum of site energies)."""
    return float(np.sum(site_energies(state, kernel, potentials)))


def empirical_measure(state: ChainState) -> EmpiricalMeasure:
    """Equal-weight atoms ((i+1)/n, x_i, v_i)."""
    return EmpiricalMeasure(r=state.site_coords(), x=state.x.copy(), v=state.v.copy())


def simulate_chain(params: ModelParams, kernel: KacKernel, potentials: PotentialSpec,
                   ic, horizon: float, observers, rng: np.random.Generator,
                   sample_times=None, collect_events: bool = False,
                   force_method: str = "auto") -> dict:
    """Exact-jump Gillespie loop over [0, horizon].

    ``ic`` is either an InitialCondition (sampled on the site grid) or a
    ready ChainState.  ``observers`` maps names to callables
    f(t, state) -> value, evaluated on ``sample_times`` (defaults to
    {0, horizon}).  At an exact tie between an event and a sample time the
    swap is applied first, so observers see the post-jump state.

    Returns {"times", "final", per-observer lists, "events" (optional),
    "n_events"}.  Deterministic given (params.seed-derived rng, config).
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if isinstance(ic, ChainState):
        state = ic.copy()
    else:
        r, x, v = sample_initial(ic, params.n, "grid", rng)
        state = ChainState(t=0.0, x=x, v=v)
    state.check_finite()

    if sample_times is None:
        sample_times = np.array([0.0, horizon])
    sample_times = np.asarray(sorted(set(float(s) for s in sample_times)))
    if sample_times.size and sample_times[-1] > horizon + 1e-12:
        raise ValueError("sample times beyond the horizon")

    force = ForceEngine(kernel, potentials, params.n, force_method)
    a = force(state.x)
    proc = ExchangeProcess(kernel, params)
    wait, ev_i, ev_j = proc.draw(rng)
    t_event = state.t + wait

    records = {name: [] for name in observers}
    events = []
    n_events = 0
    obs_idx = 0
    recorded_times = []

    while True:
        t_obs = sample_times[obs_idx] if obs_idx < sample_times.size else math.inf
        t_stop = min(t_event, t_obs, horizon)
        if t_stop > state.t:
            a = _drift(state.x, state.v, a, t_stop - state.t, params.dt_max, force)
            state.t = t_stop
        if t_event <= t_stop:
            vi = state.v[ev_i].copy()
            state.v[ev_i] = state.v[ev_j]
            state.v[ev_j] = vi
            n_events += 1
            if collect_events:
                events.append((state.t, ev_i, ev_j))
            wait, ev_i, ev_j = proc.draw(rng)
            t_event = state.t + wait
            continue
        if t_obs <= t_stop:
            for name, fn in observers.items():
                records[name].append(fn(state.t, state))
            recorded_times.append(state.t)
            obs_idx += 1
            continue
        break

    out = {"times": np.asarray(recorded_times), "final": state, "n_events": n_events}
    out.update(records)
    if collect_events:
        out["events"] = events
    return out
