"""Static problem definition shared by the chain and mean-field engines.

Covers the interaction-range kernels and their lattice coefficients, the
pair/pinning potentials, mesoscopic box partitions of the unit torus, and
local-Gibbs initial conditions with their samplers.  Everything built here
is immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ModelParams",
    "KernelProfile",
    "smooth_bump",
    "uniform_profile",
    "KacKernel",
    "build_kernel",
    "kernel_moments",
    "profile_second_moment",
    "QuadratureError",
    "PotentialSpec",
    "harmonic_potentials",
    "homogeneous_potentials",
    "BoxPartition",
    "InitialCondition",
    "sample_initial",
    "sample_z_given_r",
    "initial_self_test",
    "torus_delta",
    "torus_distance",
]

log = logging.getLogger(__name__)

# 16-point Gauss-Legendre rule, used for the per-cell kernel integrals.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def torus_delta(r):
    """Signed displacement on the unit torus, reduced to [-1/2, 1/2)."""
    r = np.asarray(r, dtype=float)
    return r - np.round(r)


def torus_distance(r):
    """Distance to 0 on the unit torus: min(|r|, 1 - |r|)."""
    return np.abs(torus_delta(r))


@dataclass(frozen=True)
class ModelParams:
    """Dimensionless parameters of one chain instance.

    Attributes
    ----------
    n : int
        Number of oscillators.
    ell : float
        Interaction range on the torus, in (0, 1).  The number of
        interacting neighbour lags is floor(ell * n), which must be >= 1.
    gamma_bar : float
        Velocity-exchange intensity, >= 0.
    d : int
        Dimension of each displacement/momentum vector.
    dt_max : float
        Cap on the symplectic integrator step.
    moment_order_b : float
        Diagnostic exponent b; initial laws are checked for finite
        (2 + 2b)-moments.
    seed : int
        64-bit master seed for all derived random streams.
    """

    n: int
    ell: float
    gamma_bar: float = 0.0
    d: int = 1
    dt_max: float | None = None
    moment_order_b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not (0.0 < self.ell < 1.0):
            raise ValueError(f"ell must lie in (0, 1), got {self.ell}")
        # n = 1 is the degenerate pinning-only oscillator: every interaction
        # term vanishes identically, so no neighbour lag is required
        if self.n > 1 and math.floor(self.ell * self.n) < 1:
            raise ValueError(
                f"ell * n = {self.ell * self.n:.3g} < 1: no interacting neighbour lag"
            )
        if self.gamma_bar < 0:
            raise ValueError("gamma_bar must be nonnegative")
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        if self.dt_max is None:
            object.__setattr__(self, "dt_max", min(1e-2, self.ell / 10.0))
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")
        if self.moment_order_b <= 0:
            raise ValueError("moment_order_b must be positive")

    @property
    def lag_max(self) -> int:
        return math.floor(self.ell * self.n)

    def site_coords(self) -> np.ndarray:
        """Lattice coordinates i/n for i = 1..n."""
        return (np.arange(self.n) + 1.0) / self.n

    def validate_eps(self, eps_inv: int):
        """Check the box-width constraints 1/n < eps < ell, eps_inv | n."""
        if eps_inv < 1:
            raise ValueError("eps_inv must be a positive integer")
        if self.n % eps_inv != 0:
            raise ValueError(
                f"eps_inv = {eps_inv} must divide n = {self.n} exactly"
            )
        eps = 1.0 / eps_inv
        if not (1.0 / self.n < eps < self.ell):
            raise ValueError(
                f"eps = 1/{eps_inv} violates 1/n < eps < ell "
                f"(n = {self.n}, ell = {self.ell})"
            )


class KernelProfile:
    """Even nonnegative profile supported in [-1/2, 1/2] with unit mass.

    Profiles must be non-increasing on [0, 1/2].  The smooth bump family
    satisfies all the regularity requirements; the uniform profile drops
    smoothness and is intended for closed-form tests only.
    """

    def __init__(self, kind: str, func, test_only: bool = False, params=()):
        self.kind = kind
        self._func = func
        self.test_only = test_only
        self.params = tuple(params)
        self._validate()

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self._func(u)

    def __repr__(self):
        return f"KernelProfile({self.kind!r}, params={self.params})"

    def _validate(self, tol: float = 1e-9):
        u = np.linspace(0.0, 0.5, 2001)
        vals = self(u)
        if np.any(vals < -tol):
            raise ValueError(f"profile {self.kind} takes negative values")
        if np.any(np.diff(vals) > tol):
            raise ValueError(f"profile {self.kind} is not non-increasing on [0, 1/2]")
        sym = self(np.array([0.1, 0.3, 0.45])) - self(np.array([-0.1, -0.3, -0.45]))
        if np.max(np.abs(sym)) > tol:
            raise ValueError(f"profile {self.kind} is not even")
        outside = self(np.array([0.5 + 1e-9, 0.75, -0.6]))
        if np.max(np.abs(outside)) > tol:
            raise ValueError(f"profile {self.kind} has mass outside [-1/2, 1/2]")
        total = _simpson_mass(self)
        if abs(total - 1.0) > tol:
            raise ValueError(
                f"profile {self.kind} integrates to {total!r}, expected 1"
            )


def _simpson_mass(profile, n: int = 1 << 14) -> float:
    u = np.linspace(-0.5, 0.5, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(np.sum(w * profile(u)) * (1.0 / n) / 3.0)


def smooth_bump(sharpness: float = 1.0) -> KernelProfile:
    """C-infinity bump exp(-sharpness / (1 - 4 u^2)), normalized to unit mass.

    Smaller sharpness flattens the profile toward the uniform one while
    keeping all derivatives zero at the support boundary.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")

    def raw(u):
        u = np.asarray(u, dtype=float)
        denom = 1.0 - 4.0 * u * u
        inside = denom > 0.0
        # branch-free evaluation; exp(-large) underflows to 0 harmlessly
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            val = np.exp(-sharpness / np.where(inside, denom, np.inf))
        return np.where(inside, val, 0.0)

    # Normalize numerically; the raw bump has no closed-form mass.
    norm = _adaptive_mass(raw)
    return KernelProfile(
        "smooth-bump", lambda u: raw(u) / norm, test_only=False, params=(sharpness,)
    )


def uniform_profile() -> KernelProfile:
    """Indicator profile of [-1/2, 1/2]; test-only (violates smoothness)."""

    def func(u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) <= 0.5, 1.0, 0.0)

    return KernelProfile("uniform-test", func, test_only=True)


class QuadratureError(RuntimeError):
    """Raised when step-halving quadrature fails to settle."""


def _adaptive_mass(func, tol: float = 1e-13) -> float:
    prev = None
    n = 256
    while n <= (1 << 21):
        u = np.linspace(-0.5, 0.5, n + 1)
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        cur = float(np.sum(w * func(u)) / n / 3.0)
        if prev is not None and abs(cur - prev) < tol:
            return cur
        prev = cur
        n *= 2
    raise QuadratureError("profile mass quadrature did not converge")


def profile_second_moment(profile, tol: float = 1e-10) -> float:
    """Half second moment (1/2) * int u^2 profile(u) du by step halving.

    Composite Simpson with doubling resolution; returns once two successive
    estimates agree to ``tol`` and the Richardson extrapolation confirms it.
    """
    prev = None
    n = 64
    while n <= (1 << 20):
        u = np.linspace(-0.5, 0.5, n + 1)
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        cur = 0.5 * float(np.sum(w * (u * u) * profile(u)) / n / 3.0)
        if prev is not None and abs(cur - prev) < tol:
            richardson = (16.0 * cur - prev) / 15.0
            if abs(richardson - cur) < 4.0 * tol:
                return cur
        prev = cur
        n *= 2
    raise QuadratureError(
        f"second-moment quadrature for {profile.kind} did not converge to {tol:g}"
    )


@dataclass(frozen=True)
class KacKernel:
    """Rescaled interaction kernels and their lattice coefficients.

    ``phi_k[lag + lag_max]`` carries the force weight of lattice lag
    ``lag``; ``gamma_k`` likewise for the exchange rates.  Both arrays are
    even in the lag and non-increasing in |lag|.  The evaluators accept any
    real argument and reduce it to the torus.
    """

    profile_phi: KernelProfile
    profile_gamma: KernelProfile
    ell: float
    n: int
    lag_max: int
    phi_k: np.ndarray
    gamma_k: np.ndarray

    def phi_eval(self, r):
        """Rescaled force kernel profile_phi(r/ell)/ell, torus-periodic."""
        return self.profile_phi(torus_delta(r) / self.ell) / self.ell

    def gamma_eval(self, r):
        """Rescaled exchange kernel profile_gamma(r/ell)/ell, torus-periodic."""
        return self.profile_gamma(torus_delta(r) / self.ell) / self.ell

    def phi_lag(self, lag: int) -> float:
        return float(self.phi_k[lag + self.lag_max]) if abs(lag) <= self.lag_max else 0.0

    def gamma_lag(self, lag: int) -> float:
        return float(self.gamma_k[lag + self.lag_max]) if abs(lag) <= self.lag_max else 0.0

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.lag_max, self.lag_max + 1)

    @property
    def sum_phi(self) -> float:
        return float(np.sum(self.phi_k))


def _cell_integrals(profile, ell: float, n: int, lag_max: int) -> np.ndarray:
    """Exact per-cell integrals of profile(r/ell)/ell over cells of width 1/n.

    Cell ``lag`` is [(lag - 1/2)/n, (lag + 1/2)/n]; in profile coordinates
    u = r/ell the integrand is profile(u) du.  Each cell is clipped to the
    support [-1/2, 1/2] so the only non-smooth points (the support edges)
    coincide with integration limits and Gauss-Legendre stays exact for the
    piecewise-constant test profile.  Wide cells (small n*ell) are split
    into panels of width <= 1/32 to keep the rule at full accuracy.
    """
    lags = np.arange(0, lag_max + 1)
    lo = np.clip((lags - 0.5) / (n * ell), -0.5, 0.5)
    hi = np.clip((lags + 0.5) / (n * ell), -0.5, 0.5)
    pos_vals = np.empty(lags.size)
    for pos in range(lags.size):
        width = hi[pos] - lo[pos]
        if width <= 0.0:
            pos_vals[pos] = 0.0
            continue
        panels = max(1, math.ceil(width * 32.0))
        edges = np.linspace(lo[pos], hi[pos], panels + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1] - edges[0])
        pts = mid[:, None] + half * _GL_NODES[None, :]
        vals = profile(pts.ravel()).reshape(pts.shape)
        pos_vals[pos] = float(np.sum(vals * _GL_WEIGHTS[None, :]) * half)
    # mirror: the profile is even, so negative lags equal positive ones bitwise
    return np.concatenate([pos_vals[:0:-1], pos_vals])


def build_kernel(
    profile_phi: KernelProfile,
    profile_gamma: KernelProfile,
    ell: float,
    n: int,
    gamma_def: str = "cell-integral",
) -> KacKernel:
    """Construct lattice coefficients for both kernels.

    Force coefficients are the pointwise rescaled samples
    phi_k = profile_phi(k/(ell n)) / (ell n).  Exchange coefficients are,
    by default, the exact cell integrals of the rescaled gamma kernel, so
    they sum to 1 exactly; ``gamma_def="pointwise"`` switches to the same
    sampled form as phi_k (the two differ by O(1/(n ell)^2) per lag).
    """
    if not (0.0 < ell < 1.0):
        raise ValueError(f"ell must lie in (0, 1), got {ell}")
    lag_max = math.floor(ell * n)
    if lag_max < 1 and n > 1:
        raise ValueError(f"ell * n = {ell * n:.3g} < 1: kernel has no neighbour lag")

    pos_lags = np.arange(0, lag_max + 1)
    phi_pos = profile_phi(pos_lags / (ell * n)) / (ell * n)
    phi_k = np.concatenate([phi_pos[:0:-1], phi_pos])

    if gamma_def == "cell-integral":
        gamma_k = _cell_integrals(profile_gamma, ell, n, lag_max)
        total = gamma_k.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"gamma cell integrals sum to {total!r}; support not covered"
            )
        gamma_k = gamma_k / total  # remove residual quadrature rounding
    elif gamma_def == "pointwise":
        gam_pos = profile_gamma(pos_lags / (ell * n)) / (ell * n)
        gamma_k = np.concatenate([gam_pos[:0:-1], gam_pos])
    else:
        raise ValueError(f"unknown gamma_def {gamma_def!r}")

    # Symmetry and monotonicity must hold exactly on the arrays.
    for arr, name in ((phi_k, "phi_k"), (gamma_k, "gamma_k")):
        if not np.array_equal(arr, arr[::-1]):
            raise AssertionError(f"{name} is not even in the lag")
        pos = arr[lag_max:]
        if np.any(np.diff(pos) > 1e-15):
            raise AssertionError(f"{name} is not non-increasing in |lag|")
        if np.any(arr < 0):
            raise AssertionError(f"{name} has negative entries")

    return KacKernel(
        profile_phi=profile_phi,
        profile_gamma=profile_gamma,
        ell=ell,
        n=n,
        lag_max=lag_max,
        phi_k=phi_k,
        gamma_k=gamma_k,
    )


def kernel_moments(kernel: KacKernel, tol: float = 1e-10) -> tuple[float, float]:
    """Second-moment constants (c_phi, c_gamma) of the two profiles.

    c = (1/2) * int_{-1/2}^{1/2} u^2 profile(u) du; independent of ell and n.
    """
    return (
        profile_second_moment(kernel.profile_phi, tol),
        profile_second_moment(kernel.profile_gamma, tol),
    )


class _DirectionProfile:
    """Direction weight psi on the unit sphere for degree-2 homogeneous pinning.

    psi(theta) = base + quartic * sum_m theta_m^4.  Symmetric, twice
    differentiable, strictly positive for base > 0 and quartic >= 0.
    """

    def __init__(self, base: float, quartic: float, d: int):
        if base <= 0:
            raise ValueError("psi base must be strictly positive")
        if quartic < 0:
            raise ValueError("psi quartic coefficient must be nonnegative")
        self.base = base
        self.quartic = quartic
        self.d = d

    @property
    def min_value(self) -> float:
        # min of sum theta^4 on the sphere is 1/d (attained on the diagonal)
        return self.base + self.quartic / self.d

    @property
    def max_value(self) -> float:
        return self.base + self.quartic

    def value(self, theta):
        return self.base + self.quartic * np.sum(theta**4, axis=-1)


class PotentialSpec:
    """Pair potential W and pinning potential U with their gradients.

    All evaluators accept arrays shaped (..., d) and vectorize over the
    leading axes.  ``lipschitz_c`` is the constant c of the coercivity
    bounds |x|^2 <= c U(x) and |grad W(x)|^2 <= c W(x).
    """

    def __init__(self, d: int, w_kind: str = "harmonic", u_kind: str = "harmonic",
                 u_stiffness: float = 1.0, psi: _DirectionProfile | None = None,
                 w_funcs=None):
        self.d = d
        self.w_kind = w_kind
        self.u_kind = u_kind
        self.u_stiffness = float(u_stiffness)
        self.psi = psi
        if w_kind == "harmonic":
            self._w_value = lambda x: 0.5 * np.sum(x * x, axis=-1)
            self._w_grad = lambda x: x
        elif w_kind == "general":
            if w_funcs is None:
                raise ValueError("general W requires (value, gradient) callables")
            self._w_value, self._w_grad = w_funcs
        else:
            raise ValueError(f"unknown W kind {w_kind!r}")

        if u_kind == "harmonic":
            if self.u_stiffness <= 0:
                raise ValueError("harmonic U needs stiffness a > 0")
        elif u_kind == "zero":
            pass  # test-only: free flight; violates the coercivity bound
        elif u_kind == "homogeneous":
            if psi is None:
                raise ValueError("homogeneous U requires a direction profile")
            if d == 1 and psi.quartic != 0.0:
                # psi(+1) = psi(-1) forces a constant profile in d = 1, so any
                # genuinely anharmonic direction dependence needs d >= 2.
                raise ValueError(
                    "anharmonic direction profile requires d >= 2; in d = 1 the "
                    "symmetry of psi forces U to be harmonic"
                )
        else:
            raise ValueError(f"unknown U kind {u_kind!r}")

        self._check_origin()

    # -- pair potential -------------------------------------------------

    @property
    def w_is_harmonic(self) -> bool:
        return self.w_kind == "harmonic"

    def w_value(self, x):
        return self._w_value(np.asarray(x, dtype=float))

    def w_grad(self, x):
        return self._w_grad(np.asarray(x, dtype=float))

    # -- pinning potential ----------------------------------------------

    @property
    def u_is_homogeneous(self) -> bool:
        """Degree-2 homogeneity x . grad U(x) = 2 U(x)."""
        return self.u_kind in ("harmonic", "homogeneous", "zero")

    def u_value(self, x):
        x = np.asarray(x, dtype=float)
        s2 = np.sum(x * x, axis=-1)
        if self.u_kind == "zero":
            return np.zeros_like(s2)
        if self.u_kind == "harmonic":
            return 0.5 * self.u_stiffness * s2
        q = np.sum(x**4, axis=-1)
        out = self.psi.base * s2
        with np.errstate(invalid="ignore", divide="ignore"):
            anh = np.where(s2 > 0.0, q / np.where(s2 > 0.0, s2, 1.0), 0.0)
        return out + self.psi.quartic * anh

    def u_grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.u_kind == "zero":
            return np.zeros_like(x)
        if self.u_kind == "harmonic":
            return self.u_stiffness * x
        s2 = np.sum(x * x, axis=-1, keepdims=True)
        q = np.sum(x**4, axis=-1, keepdims=True)
        safe = np.where(s2 > 0.0, s2, 1.0)
        grad = 2.0 * self.psi.base * x
        anh = 4.0 * x**3 / safe - 2.0 * q * x / (safe * safe)
        return grad + self.psi.quartic * np.where(s2 > 0.0, anh, 0.0)

    @property
    def lipschitz_c(self) -> float:
        """(H1) constant: |x|^2 <= c U(x); harmonic W gives |grad W|^2 = 2 W."""
        if self.u_kind == "zero":
            raise ValueError("zero pinning violates the coercivity bound")
        if self.u_kind == "harmonic":
            return max(2.0 / self.u_stiffness, 2.0)
        return max(1.0 / self.psi.min_value, 2.0)

    def _check_origin(self):
        zero = np.zeros(self.d)
        if not np.allclose(self.w_grad(zero), 0.0) or not np.allclose(
            self.u_grad(zero), 0.0
        ):
            raise ValueError("potential gradients must vanish at the origin")

    def check_homogeneity(self, rng: np.random.Generator, samples: int = 64,
                          rtol: float = 1e-10):
        """Verify x . grad U(x) = 2 U(x) at random points (degree-2 identity)."""
        x = rng.normal(size=(samples, self.d)) * rng.uniform(0.1, 3.0, size=(samples, 1))
        lhs = np.sum(x * self.u_grad(x), axis=-1)
        rhs = 2.0 * self.u_value(x)
        err = np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-12))
        if err > rtol:
            raise AssertionError(f"homogeneity identity violated: rel err {err:g}")


def harmonic_potentials(d: int, u_stiffness: float = 1.0) -> PotentialSpec:
    """Harmonic W = |x|^2/2 and harmonic U = a |x|^2 / 2."""
    return PotentialSpec(d=d, w_kind="harmonic", u_kind="harmonic",
                         u_stiffness=u_stiffness)


def homogeneous_potentials(d: int, psi_base: float, psi_quartic: float) -> PotentialSpec:
    """Harmonic W with degree-2 homogeneous pinning |x|^2 psi(x/|x|)."""
    psi = _DirectionProfile(psi_base, psi_quartic, d)
    return PotentialSpec(d=d, w_kind="harmonic", u_kind="homogeneous", psi=psi)


@dataclass(frozen=True)
class BoxPartition:
    """Partition of the torus into eps_inv boxes B_j = (j eps, (j+1) eps].

    With sites at coordinates i/n (i = 1..n) and eps_inv dividing n, box j
    holds exactly n * eps consecutive sites: the 0-based site index a
    belongs to box a // (n // eps_inv).
    """

    eps_inv: int
    n: int

    def __post_init__(self):
        if self.eps_inv < 1:
            raise ValueError("eps_inv must be >= 1")
        if self.n % self.eps_inv != 0:
            raise ValueError(
                f"eps_inv = {self.eps_inv} must divide n = {self.n} exactly"
            )

    @property
    def eps(self) -> float:
        return 1.0 / self.eps_inv

    @property
    def sites_per_box(self) -> int:
        return self.n // self.eps_inv

    def box_of_site(self, site_index) -> np.ndarray:
        """Box index for 0-based site indices."""
        return np.asarray(site_index) // self.sites_per_box

    def box_of_r(self, r) -> np.ndarray:
        """Box index of torus coordinates, boxes half-open on the left."""
        r = np.asarray(r, dtype=float)
        rm = r - np.floor(r)
        rm = np.where(rm == 0.0, 1.0, rm)
        j = np.ceil(rm * self.eps_inv).astype(int) - 1
        return j % self.eps_inv

    def box_bounds(self, j: int) -> tuple[float, float]:
        return (j * self.eps, (j + 1) * self.eps)


@dataclass(frozen=True)
class InitialCondition:
    """Local Gibbs initial law with site-dependent temperature.

    The phase-space density at spatial coordinate r is proportional to
    exp(-(|v|^2/2 + U(x) + |x|^2/2) / T(r)).  For any degree-2 homogeneous
    pinning this law has mean energy |v|^2/2 + U(x) + |x|^2/2 equal to
    d * T(r) exactly.
    """

    temperature: object  # callable T(r), vectorized, strictly positive
    potentials: PotentialSpec
    kind: str = "local-gibbs"

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, 257)
        temps = np.asarray(self.temperature(grid), dtype=float)
        if np.any(temps <= 0.0):
            raise ValueError("temperature profile must be strictly positive")

    @property
    def d(self) -> int:
        return self.potentials.d

    def energy_mean(self, r):
        """Analytic mean of |v|^2/2 + U(x) + |x|^2/2 at coordinate r."""
        return self.d * np.asarray(self.temperature(r), dtype=float)


def _sample_positions_rejection(ic: InitialCondition, temps: np.ndarray,
                                rng: np.random.Generator) -> np.ndarray:
    """Rejection sampler for anharmonic pinning.

    Proposal is the Gaussian at temperature T/(1 + 2 psi_min); the density
    ratio exp(-(psi(theta) - psi_min)|x|^2 / T) is an exact envelope with
    constant 1.
    """
    pot = ic.potentials
    count = temps.shape[0]
    d = pot.d
    psi_min = pot.psi.min_value
    out = np.empty((count, d))
    pending = np.arange(count)
    proposed = 0
    accepted = 0
    while pending.size:
        t = temps[pending]
        scale = np.sqrt(t / (1.0 + 2.0 * psi_min))
        x = rng.normal(size=(pending.size, d)) * scale[:, None]
        s2 = np.sum(x * x, axis=-1)
        log_ratio = -(pot.u_value(x) - psi_min * s2) / t
        accept = np.log(rng.random(pending.size)) < log_ratio
        out[pending[accept]] = x[accept]
        proposed += pending.size
        accepted += int(accept.sum())
        pending = pending[~accept]
        if proposed >= 64 * count and accepted < 0.01 * proposed:
            raise RuntimeError(
                f"rejection sampler acceptance rate {accepted / proposed:.2%} "
                "below the 1% floor; direction profile too anisotropic"
            )
    return out


def sample_initial(ic: InitialCondition, count: int, r_assignment: str,
                   rng: np.random.Generator, eps_inv: int | None = None):
    """Draw (r, x, v) samples from the local Gibbs law.

    r_assignment selects the spatial coordinates: "grid" places one sample
    at each lattice coordinate i/count, "uniform" draws them uniformly on
    the torus, and "uniform-in-box" keeps the grid's box occupancies but
    redraws each coordinate uniformly inside its box (requires eps_inv).

    Velocities are exactly Gaussian at temperature T(r).  Positions are
    exactly Gaussian for harmonic pinning and rejection-sampled otherwise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if r_assignment == "grid":
        r = (np.arange(count) + 1.0) / count
    elif r_assignment == "uniform":
        r = 1.0 - rng.random(count)  # uniform on (0, 1]
    elif r_assignment == "uniform-in-box":
        if eps_inv is None:
            raise ValueError("uniform-in-box assignment requires eps_inv")
        part = BoxPartition(eps_inv=eps_inv, n=count)
        j = part.box_of_site(np.arange(count))
        r = (j + 1.0 - rng.random(count)) * part.eps  # uniform on each B_j
    else:
        raise ValueError(f"unknown r_assignment {r_assignment!r}")

    x, v = sample_z_given_r(ic, r, rng)
    return r, x, v


def sample_z_given_r(ic: InitialCondition, r: np.ndarray,
                     rng: np.random.Generator):
    """Draw (x, v) from the local Gibbs law at the given coordinates."""
    r = np.asarray(r, dtype=float)
    temps = np.asarray(ic.temperature(r), dtype=float)
    count = r.shape[0]
    d = ic.d
    v = rng.normal(size=(count, d)) * np.sqrt(temps)[:, None]
    pot = ic.potentials
    if pot.u_kind == "harmonic":
        scale = np.sqrt(temps / (1.0 + pot.u_stiffness))
        x = rng.normal(size=(count, d)) * scale[:, None]
    else:
        x = _sample_positions_rejection(ic, temps, rng)
    return x, v


def initial_self_test(ic: InitialCondition, rng: np.random.Generator,
                      count: int = 100_000, bins: int = 16,
                      moment_order_b: float = 1.0) -> dict:
    """Statistical self-test of the sampler against the law's exact moments.

    Returns worst z-scores for the odd-moment symmetry, the binned energy
    means against d * T(r), the uniformity of the r-marginal, and the
    empirical (2 + 2b)-moment.  Callers assert on the z-scores.
    """
    r, x, v = sample_initial(ic, count, "uniform", rng)
    z_odd = 0.0
    for arr in (x, v):
        m = arr.mean(axis=0)
        se = arr.std(axis=0, ddof=1) / math.sqrt(count)
        z_odd = max(z_odd, float(np.max(np.abs(m) / se)))

    energy = 0.5 * np.sum(v * v, axis=-1) + ic.potentials.u_value(x) \
        + 0.5 * np.sum(x * x, axis=-1)
    idx = np.minimum((r * bins).astype(int), bins - 1)
    z_energy = 0.0
    for j in range(bins):
        sel = idx == j
        nj = int(sel.sum())
        if nj < 2:
            continue
        mean_t = float(np.mean(ic.energy_mean(r[sel])))
        se = float(np.std(energy[sel], ddof=1)) / math.sqrt(nj)
        z_energy = max(z_energy, abs(float(energy[sel].mean()) - mean_t) / se)

    counts = np.bincount(idx, minlength=bins)
    expected = count / bins
    z_uniform = float(np.max(np.abs(counts - expected)) / math.sqrt(expected))

    znorm = np.sqrt(np.sum(x * x, axis=-1) + np.sum(v * v, axis=-1))
    high_moment = float(np.mean(znorm ** (2.0 + 2.0 * moment_order_b)))

    return {
        "z_odd_moments": z_odd,
        "z_energy_profile": z_energy,
        "z_r_uniformity": z_uniform,
        "high_moment": high_moment,
    }
