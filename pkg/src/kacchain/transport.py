"""Wasserstein-1 machinery on discrete measures.

Exact transport only: equal-weight atomic measures go through an exact
assignment solver, general weights through the transportation linear
program (HiGHS), whose plan is re-solved exactly on its support tree so
marginals hold to machine precision.  On the cylinder T x R^{2d} the
metric is the Euclidean combination of the torus distance on the first
coordinate with the Euclidean distance on the rest.

Also provides the mesoscopic box/grid upper-bound estimator, the sliced
(box-conditioned) distance for measures and for sampled trajectories, and
the neighbour-coupling map that realizes an optimal plan between a lag-
weighted velocity measure and an arbitrary discrete target as a piecewise
constant function on the torus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy import sparse

from .model import torus_delta

__all__ = [
    "DiscreteMeasure",
    "CouplingPlan",
    "PiMap",
    "as_discrete",
    "distance_matrix",
    "w1_matching",
    "w1_general",
    "w1_box_bound",
    "box_bound_schedule",
    "sliced_w1",
    "sliced_w1_paths",
    "build_pi_map",
    "write_measure_csv",
    "read_measure_csv",
]

MATCHING_SIZE_CAP = 4096


def write_measure_csv(path, measure):
    """Measure file: header r, x_1..x_d, v_1..v_d, weight; 17 digits."""
    m = as_discrete(measure)
    two_d = m.points.shape[1] - 1
    if two_d % 2 != 0:
        raise ValueError("phase measures need an even number of z columns")
    d = two_d // 2
    header = (["r"] + [f"x_{c + 1}" for c in range(d)]
              + [f"v_{c + 1}" for c in range(d)] + ["weight"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row, w in zip(m.points, m.weights):
            cells = [f"{val:.17g}" for val in row] + [f"{w:.17g}"]
            fh.write(",".join(cells) + "\n")


def read_measure_csv(path) -> DiscreteMeasure:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "r" or header[-1] != "weight":
            raise ValueError(f"{path}: not a measure file (header {header})")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return DiscreteMeasure(points=data[:, :-1], weights=data[:, -1],
                           torus_first=True)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted atoms, optionally with a torus-valued first coordinate."""

    points: np.ndarray  # (m, k)
    weights: np.ndarray  # (m,)
    torus_first: bool = False

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, float)))
        object.__setattr__(self, "weights", np.asarray(self.weights, float))
        if self.weights.shape[0] != self.points.shape[0]:
            raise ValueError("weights and points length mismatch")
        if np.any(self.weights < 0):
            raise ValueError("negative weights")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_probability(self) -> bool:
        return abs(self.mass - 1.0) <= 1e-12

    def equal_weights(self, tol: float = 1e-12) -> bool:
        w = self.weights
        return bool(np.max(np.abs(w - w[0])) <= tol * max(w[0], 1e-300))


def as_discrete(measure) -> DiscreteMeasure:
    """Adapt an empirical phase-space measure (or pass one through)."""
    if isinstance(measure, DiscreteMeasure):
        return measure
    if hasattr(measure, "points") and hasattr(measure, "weights"):
        return DiscreteMeasure(measure.points(), measure.weights, torus_first=True)
    raise TypeError(f"cannot interpret {type(measure).__name__} as a discrete measure")


def distance_matrix(pa: np.ndarray, pb: np.ndarray, torus_first: bool) -> np.ndarray:
    """Pairwise distances between two point sets of equal column count."""
    pa = np.atleast_2d(pa)
    pb = np.atleast_2d(pb)
    if torus_first:
        dr = torus_delta(pa[:, :1] - pb[:, :1].T)
        dz = pa[:, None, 1:] - pb[None, :, 1:]
        return np.sqrt(dr**2 + np.sum(dz**2, axis=-1))
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def w1_matching(a, b) -> tuple[float, np.ndarray]:
    """Exact W1 between equal-weight measures with equal atom counts.

    Returns the cost and the matched permutation (atom i of ``a`` pairs
    with atom perm[i] of ``b``).
    """
    a = as_discrete(a)
    b = as_discrete(b)
    if a.count != b.count:
        raise ValueError("w1_matching requires equal atom counts")
    if not (a.equal_weights() and b.equal_weights()):
        raise ValueError("w1_matching requires equal weights; use w1_general")
    if a.count > MATCHING_SIZE_CAP:
        raise ValueError(
            f"atom count {a.count} exceeds the matching cap {MATCHING_SIZE_CAP}; "
            "use the box or sliced estimators"
        )
    if abs(a.mass - b.mass) > 1e-9:
        raise ValueError("total masses differ")
    dist = distance_matrix(a.points, b.points, a.torus_first or b.torus_first)
    rows, cols = linear_sum_assignment(dist)
    perm = np.empty(a.count, dtype=int)
    perm[rows] = cols
    cost = float(np.sum(dist[rows, cols]) * a.weights[0])
    return cost, perm


@dataclass(frozen=True)
class CouplingPlan:
    """Joint weights realizing a transport cost between two atom sets."""

    plan: np.ndarray  # (n, m)
    cost: float

    def check_marginals(self, a_weights, b_weights, tol: float = 1e-10):
        row = np.max(np.abs(self.plan.sum(axis=1) - a_weights))
        col = np.max(np.abs(self.plan.sum(axis=0) - b_weights))
        if max(row, col) > tol:
            raise AssertionError(f"plan marginals off by {max(row, col):g}")


def _repair_plan_on_tree(plan, a_w, b_w):
    """Re-solve the flows on the plan's support forest from exact marginals.

    A basic solution of the transportation LP is supported on a forest, on
    which the flows are uniquely determined by leaf elimination.  This
    removes the solver's constraint roundoff without changing the support
    (hence without changing optimality).  Falls back to the input plan if
    the support is not a forest.
    """
    n, m = plan.shape
    scale = max(float(plan.max(initial=0.0)), 1e-300)
    ii, jj = np.nonzero(plan > 1e-14 * scale)
    edges = list(zip(ii.tolist(), jj.tolist()))
    adj: dict[int, list[int]] = {}
    for e, (i, j) in enumerate(edges):
        adj.setdefault(i, []).append(e)
        adj.setdefault(n + j, []).append(e)
    alive = [True] * len(edges)
    degree = {v: len(es) for v, es in adj.items()}
    res = np.concatenate([np.asarray(a_w, float).copy(), np.asarray(b_w, float).copy()])
    out = np.zeros_like(plan)
    stack = [v for v, d in degree.items() if d == 1]
    removed = 0
    while stack:
        v = stack.pop()
        if degree.get(v, 0) != 1:
            continue
        e = next(k for k in adj[v] if alive[k])
        i, j = edges[e]
        flow = max(res[v], 0.0)
        out[i, j] = flow
        res[i] -= flow
        res[n + j] -= flow
        alive[e] = False
        removed += 1
        for u in (i, n + j):
            degree[u] -= 1
            if degree[u] == 1:
                stack.append(u)
    if removed != len(edges):
        return plan  # support had a cycle; keep the solver's plan
    return out


def w1_general(a, b) -> tuple[float, CouplingPlan]:
    """Exact W1 between discrete measures with arbitrary weights.

    Solves the transportation linear program and returns an optimal plan
    whose marginals match the inputs to machine precision.
    """
    a = as_discrete(a)
    b = as_discrete(b)
    if abs(a.mass - b.mass) > 1e-9:
        raise ValueError(f"masses differ by {abs(a.mass - b.mass):g}: infeasible")
    dist = distance_matrix(a.points, b.points, a.torus_first or b.torus_first)
    n, m = dist.shape
    if n == 1 or m == 1:
        plan = np.outer(a.weights, b.weights) / max(a.mass, 1e-300)
        cost = float(np.sum(plan * dist))
        return cost, CouplingPlan(plan=plan, cost=cost)

    data = np.ones(2 * n * m)
    rows = np.concatenate([
        np.repeat(np.arange(n), m),
        n + np.tile(np.arange(m), n),
    ])
    cols = np.concatenate([np.arange(n * m), np.arange(n * m)])
    A = sparse.csr_matrix((data, (rows, cols)), shape=(n + m, n * m))
    # drop the final (redundant) column constraint for a full-rank system
    A = A[:-1]
    beq = np.concatenate([a.weights, b.weights[:-1]])
    res = linprog(dist.ravel(), A_eq=A, b_eq=beq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    plan = _repair_plan_on_tree(res.x.reshape(n, m), a.weights, b.weights)
    cost = float(np.sum(plan * dist))
    return cost, CouplingPlan(plan=plan, cost=cost)


# -- box partition helpers on raw measures ------------------------------


def _box_groups(measure, eps_inv: int):
    """Atom indices per box B_j = (j eps, (j+1) eps], j = 0..eps_inv-1."""
    m = as_discrete(measure)
    r = m.points[:, 0]
    rm = r - np.floor(r)
    rm = np.where(rm == 0.0, 1.0, rm)
    j = (np.ceil(rm * eps_inv).astype(int) - 1) % eps_inv
    return m, [np.nonzero(j == box)[0] for box in range(eps_inv)]


def _check_equal_box_masses(m1, groups1, m2, groups2, eps_inv):
    eps = 1.0 / eps_inv
    for j, (g1, g2) in enumerate(zip(groups1, groups2)):
        f1 = g1.size / m1.count
        f2 = g2.size / m2.count
        if g1.size == 0 or g2.size == 0:
            raise ValueError(f"box {j} is empty")
        if abs(f1 - eps) > 1e-9 or abs(f2 - eps) > 1e-9:
            raise ValueError(
                f"box {j} masses {f1:.6g}/{f2:.6g} differ from eps = {eps:.6g}"
            )


def w1_box_bound(mu1, mu2, eps_n: float, m_cut: float, n_cubes: int) -> float:
    """Upper bound on the boxwise-coupled W1 from cube-count differences.

    Partitions each box's z-content over n_cubes^{2d} cubes tiling
    [-m_cut, m_cut]^{2d} and charges (1 + m_cut) per unit of cube-mass
    discrepancy, plus the cube/box diameters and an empirical tail term
    for atoms with |z| > m_cut.  Always >= the boxwise-coupled W1.
    """
    eps_inv = round(1.0 / eps_n)
    if abs(eps_inv * eps_n - 1.0) > 1e-9:
        raise ValueError("1/eps_N must be an integer")
    if n_cubes < 1 or m_cut <= 0:
        raise ValueError("need n_cubes >= 1 and m_cut > 0")
    m1, groups1 = _box_groups(mu1, eps_inv)
    m2, groups2 = _box_groups(mu2, eps_inv)
    if m1.points.shape[1] != m2.points.shape[1]:
        raise ValueError("measures live in different dimensions")
    _check_equal_box_masses(m1, groups1, m2, groups2, eps_inv)

    two_d = m1.points.shape[1] - 1
    side = 2.0 * m_cut / n_cubes
    diff_sum = 0.0
    tail = 0.0
    for meas in (m1, m2):
        zn = np.linalg.norm(meas.points[:, 1:], axis=1)
        tail += float(np.mean(zn > m_cut) + np.mean(zn * (zn > m_cut)))

    for g1, g2 in zip(groups1, groups2):
        counts = {}
        for meas, grp, sgn in ((m1, g1, 1.0), (m2, g2, -1.0)):
            z = meas.points[grp, 1:]
            zn = np.linalg.norm(z, axis=1)
            inside = zn <= m_cut
            idx = np.clip(((z[inside] + m_cut) // side).astype(int), 0, n_cubes - 1)
            keys = [tuple(row) for row in idx]
            w = sgn / grp.size
            for key in keys:
                counts[key] = counts.get(key, 0.0) + w
        diff_sum += sum(abs(vv) for vv in counts.values())

    eps = 1.0 / eps_inv
    cube_diam = math.sqrt(two_d) * m_cut / n_cubes
    return float(
        (1.0 + m_cut) * eps * diff_sum + 2.0 * cube_diam + 2.0 * eps + tail
    )


def box_bound_schedule(n_eps: float, d: int) -> tuple[float, int]:
    """Cut radius and cube count (m_cut, n_cubes) from the box population."""
    m_cut = float(n_eps) ** (1.0 / (4.0 * (d + 1)))
    return m_cut, max(1, math.floor(m_cut**2))


def _w1_equal_weight_pair(pa, pb, torus_first) -> float:
    """Exact W1 between equal-weight atom sets with commensurate counts."""
    na, nb = pa.shape[0], pb.shape[0]
    if na > nb:
        pa, pb = pb, pa
        na, nb = nb, na
    if nb % na != 0:
        a = DiscreteMeasure(pa, np.full(na, 1.0 / na), torus_first)
        b = DiscreteMeasure(pb, np.full(nb, 1.0 / nb), torus_first)
        cost, _ = w1_general(a, b)
        return cost
    if nb > MATCHING_SIZE_CAP:
        raise ValueError(
            f"per-box atom count {nb} exceeds the matching cap; coarsen the boxes"
        )
    # replicate each smaller-side atom nb/na times: exact reduction to
    # an assignment between nb unit-weight atoms
    reps = nb // na
    dist = distance_matrix(pa, pb, torus_first)
    dist = np.repeat(dist, reps, axis=0)
    rows, cols = linear_sum_assignment(dist)
    return float(np.sum(dist[rows, cols]) / nb)


def sliced_w1(mu1, mu2, eps_inv: int) -> float:
    """Box-conditioned W1: eps * sum_j W1(mu1 | B_j, mu2 | B_j).

    The per-box conditionals keep their atoms' full (r, z) coordinates, so
    the value is the cost of an optimal box-blocked coupling and therefore
    never below the unrestricted W1.
    """
    m1, groups1 = _box_groups(mu1, eps_inv)
    m2, groups2 = _box_groups(mu2, eps_inv)
    _check_equal_box_masses(m1, groups1, m2, groups2, eps_inv)
    total = 0.0
    for g1, g2 in zip(groups1, groups2):
        total += _w1_equal_weight_pair(m1.points[g1], m2.points[g2], True)
    return float(total / eps_inv)


def sliced_w1_paths(r1, traj1, r2, traj2, eps_inv: int) -> float:
    """Sliced distance between two sampled path families.

    ``traj`` has shape (samples, snapshots, 2d); the per-pair cost is the
    supremum over the common snapshot grid of the phase-space distance,
    with the (constant) torus offset of the spatial coordinates included.
    Per box the atom counts must be equal.
    """
    if traj1.shape[1:] != traj2.shape[1:]:
        raise ValueError("trajectories must share the snapshot grid and dimension")
    dummy1 = DiscreteMeasure(np.asarray(r1, float)[:, None], np.full(len(r1), 1.0 / len(r1)), True)
    dummy2 = DiscreteMeasure(np.asarray(r2, float)[:, None], np.full(len(r2), 1.0 / len(r2)), True)
    _, groups1 = _box_groups(dummy1, eps_inv)
    _, groups2 = _box_groups(dummy2, eps_inv)
    total = 0.0
    for j, (g1, g2) in enumerate(zip(groups1, groups2)):
        if g1.size != g2.size:
            raise ValueError(f"box {j} path counts differ: {g1.size} vs {g2.size}")
        if g1.size == 0:
            raise ValueError(f"box {j} is empty")
        dr2 = torus_delta(np.asarray(r1)[g1][:, None] - np.asarray(r2)[g2][None, :]) ** 2
        sup = np.zeros_like(dr2)
        for s in range(traj1.shape[1]):
            dz = traj1[g1][:, None, s, :] - traj2[g2][None, :, s, :]
            sup = np.maximum(sup, np.sum(dz * dz, axis=-1))
        dist = np.sqrt(dr2 + sup)
        rows, cols = linear_sum_assignment(dist)
        total += float(np.sum(dist[rows, cols]) / g1.size)
    return float(total / eps_inv)


# -- neighbour coupling map ----------------------------------------------


@dataclass(frozen=True)
class PiMap:
    """Piecewise-constant map from neighbour cells to target velocities.

    For each lag k with weight gamma_k, the cell of width 1/n centered at
    k/n is split into consecutive subintervals whose sigma-masses equal
    the optimal plan's conditional masses; each subinterval is assigned
    one target atom.  Drawing r from the lag-weighted cell density and
    applying the map yields exactly the target measure, at transport cost
    equal to the optimal one.
    """

    n: int
    lags: np.ndarray          # (L,) lags with positive weight
    gamma: np.ndarray         # (L,) their weights
    velocities: np.ndarray    # (L, d) neighbour velocities per lag
    target_points: np.ndarray  # (m, d)
    target_weights: np.ndarray  # (m,)
    plan: np.ndarray          # (L, m) optimal plan
    cost: float
    cum_fractions: list       # per lag: cumulative sub-interval fractions (ends with 1)
    assignments: list         # per lag: target atom index per sub-interval

    def evaluate(self, r) -> np.ndarray:
        """Map torus coordinates to target velocities (vectorized)."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        delta = torus_delta(r)
        lag = np.round(delta * self.n).astype(int)
        out = np.empty((r.size, self.target_points.shape[1]))
        lag_index = {int(k): idx for idx, k in enumerate(self.lags)}
        for pos, (k, dd) in enumerate(zip(lag, delta)):
            idx = lag_index.get(int(k))
            if idx is None:
                raise ValueError(f"coordinate {r[pos]} falls in a zero-weight cell")
            frac = (dd - k / self.n) * self.n + 0.5
            frac = min(max(frac, 0.0), np.nextafter(1.0, 0.0))
            sub = int(np.searchsorted(self.cum_fractions[idx], frac, side="right"))
            sub = min(sub, len(self.assignments[idx]) - 1)
            out[pos] = self.target_points[self.assignments[idx][sub]]
        return out

    def cost_integral(self) -> float:
        """int |v^{[nr]} - Pi(r)| sigma(r) dr as a finite sum over subintervals."""
        total = 0.0
        for idx in range(self.lags.size):
            cum = np.concatenate([[0.0], self.cum_fractions[idx]])
            lengths = np.diff(cum) * self.gamma[idx]
            targets = self.target_points[self.assignments[idx]]
            dists = np.linalg.norm(self.velocities[idx][None, :] - targets, axis=1)
            total += float(np.sum(lengths * dists))
        return total

    def pushforward_weights(self) -> np.ndarray:
        """Sigma-mass of each target atom's preimage."""
        out = np.zeros(self.target_points.shape[0])
        for idx in range(self.lags.size):
            cum = np.concatenate([[0.0], self.cum_fractions[idx]])
            lengths = np.diff(cum) * self.gamma[idx]
            np.add.at(out, self.assignments[idx], lengths)
        return out


def build_pi_map(lag_weights: np.ndarray, neighbor_velocities: np.ndarray,
                 target: DiscreteMeasure, n: int) -> PiMap:
    """Optimal coupling of a lag-weighted velocity measure with a target.

    ``lag_weights`` holds gamma_k for lags -K..K (odd length), and
    ``neighbor_velocities`` the corresponding velocities.  Target atoms
    are processed in a fixed canonical order (lexicographic by
    coordinates), which pins down the subinterval layout.
    """
    lag_weights = np.asarray(lag_weights, dtype=float)
    neighbor_velocities = np.atleast_2d(np.asarray(neighbor_velocities, dtype=float))
    if lag_weights.size % 2 != 1:
        raise ValueError("lag weights must cover lags -K..K (odd length)")
    if neighbor_velocities.shape[0] != lag_weights.size:
        raise ValueError("one velocity per lag required")
    if abs(lag_weights.sum() - target.mass) > 1e-9:
        raise ValueError("lag weights must sum to the target mass")
    k_max = lag_weights.size // 2
    keep = lag_weights > 0.0
    lags = np.arange(-k_max, k_max + 1)[keep]
    gam = lag_weights[keep]
    vel = neighbor_velocities[keep]

    order = np.lexsort(target.points.T[::-1])  # lexicographic by coordinates
    src = DiscreteMeasure(vel, gam, torus_first=False)
    tgt_sorted = DiscreteMeasure(target.points[order], target.weights[order],
                                 torus_first=False)
    cost, plan = w1_general(src, tgt_sorted)
    p = plan.plan

    cum_fractions = []
    assignments = []
    for idx in range(lags.size):
        row = p[idx]
        nz = np.nonzero(row > 1e-16 * max(gam[idx], 1e-300))[0]
        if nz.size == 0:
            raise RuntimeError("positive-weight lag received no plan mass")
        fractions = row[nz] / gam[idx]
        cum = np.cumsum(fractions)
        cum[-1] = 1.0  # row sums are exact; clamp the final breakpoint
        cum_fractions.append(cum)
        assignments.append(order[nz])

    return PiMap(
        n=n,
        lags=lags,
        gamma=gam,
        velocities=vel,
        target_points=target.points,
        target_weights=target.weights,
        plan=p,
        cost=cost,
        cum_fractions=cum_fractions,
        assignments=assignments,
    )
