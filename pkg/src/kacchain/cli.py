"""Experiment orchestration and command-line entry point.

Subcommands: chain, meanfield, picard, hydro, compare, coupling, metrics.
Every run is a pure function of (config, seed); replicas draw from
independently derived counter-based streams and are reduced in replica
order, so the worker count never changes the output.  Outputs land in one
subdirectory per (subcommand, config-hash) so reruns overwrite
deterministically.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys
import traceback

import numpy as np

from . import chain as chain_mod
from . import hydro as hydro_mod
from . import meanfield as mf_mod
from . import streams
from . import transport
from .config import ConfigError, ExperimentConfig, parse_config, parse_config_text
from .model import BoxPartition, sample_z_given_r

__all__ = [
    "main",
    "run",
    "convergence_experiment",
    "admissible_eps_inv",
    "initial_coupling_distance",
]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for val in row:
                if isinstance(val, (int, np.integer)):
                    cells.append(str(int(val)))
                else:
                    cells.append(_fmt(val))
            fh.write(",".join(cells) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _sample_grid(horizon: float, snapshots: int) -> np.ndarray:
    return np.linspace(0.0, horizon, snapshots)


# -- chain ---------------------------------------------------------------


def _chain_observers(kernel, potentials):
    return {
        "state": lambda t, st: (st.x.copy(), st.v.copy()),
        "energies": lambda t, st: chain_mod.site_energies(st, kernel, potentials),
    }


def _run_chain_replica(config_text: str, seed: int, rep: int):
    cfg = parse_config_text(config_text)
    params = cfg.model_params(seed)
    kernel = cfg.kernel()
    potentials = cfg.potentials()
    ic = cfg.initial_condition()
    r = cfg.sections["run"]
    rng = streams.replica_stream(seed, "chain", rep)
    result = chain_mod.simulate_chain(
        params, kernel, potentials, ic, r["horizon"],
        observers=_chain_observers(kernel, potentials), rng=rng,
        sample_times=_sample_grid(r["horizon"], r["snapshots"]),
        collect_events=r["collect_events"])
    energies = [e.sum() for e in result["energies"]]
    drift = 0.0
    if energies and abs(energies[0]) > 0:
        drift = max(abs(e - energies[0]) for e in energies) / abs(energies[0])
    return result, drift


def cmd_chain(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    r = cfg.sections["run"]
    replicas = r["replicas"]
    drifts = []
    n_events = []
    config_text = cfg.to_text()
    first = None
    if workers > 1 and replicas > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chain_worker,
                                    [(config_text, seed, rep) for rep in range(replicas)]))
        for rep, (result, drift) in enumerate(results):
            if rep == 0:
                first = result
            drifts.append(drift)
            n_events.append(result["n_events"])
    else:
        for rep in range(replicas):
            result, drift = _run_chain_replica(config_text, seed, rep)
            if rep == 0:
                first = result
            drifts.append(drift)
            n_events.append(result["n_events"])

    d = cfg.sections["model"]["d"]
    header = (["t", "site"] + [f"x_{c + 1}" for c in range(d)]
              + [f"v_{c + 1}" for c in range(d)] + ["energy"])
    rows = []
    for t, (x, v), e in zip(first["times"], first["state"], first["energies"]):
        for site in range(x.shape[0]):
            rows.append([t, site + 1, *x[site], *v[site], e[site]])
    _write_csv(os.path.join(outdir, "chain_trace.csv"), header, rows)
    if r["collect_events"]:
        _write_csv(os.path.join(outdir, "events.csv"), ["t", "i", "j"],
                   [[t, i + 1, j + 1] for (t, i, j) in first["events"]])
    summary = {
        "replicas": replicas,
        "energy_drift_rel": drifts,
        "n_events": n_events,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    return summary


def _chain_worker(args):
    return _run_chain_replica(*args)


# -- meanfield -------------------------------------------------------------


def cmd_meanfield(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    r = cfg.sections["run"]
    kernel = cfg.kernel()
    potentials = cfg.potentials()
    ic = cfg.initial_condition()
    rng = streams.stream(seed, "meanfield")
    cloud = mf_mod.init_cloud(ic, r["cloud_m"], r["grid_g"], rng)
    bound = mf_mod.mean_z_squared_bound(cloud, kernel, potentials)
    traj = mf_mod.evolve_cloud(
        cloud, kernel, potentials, cfg.sections["model"]["gamma_bar"],
        r["horizon"], cfg.model_params(seed).dt_max, r["jump_mode"], rng,
        snapshot_times=_sample_grid(r["horizon"], r["snapshots"]))

    d = cloud.d
    header = (["t", "sample_id", "rho"] + [f"x_{c + 1}" for c in range(d)]
              + [f"v_{c + 1}" for c in range(d)])
    rows = []
    for s, t in enumerate(traj.times):
        for mm in range(cloud.m):
            rows.append([t, mm, traj.rho[mm], *traj.xs[s][mm], *traj.vs[s][mm]])
    _write_csv(os.path.join(outdir, "cloud_snapshots.csv"), header, rows)

    mz = [float(np.mean(np.sum(traj.xs[s] ** 2, axis=-1)
                        + np.sum(traj.vs[s] ** 2, axis=-1)))
          for s in range(traj.times.size)]
    odd = max(float(np.max(np.abs(traj.xs[s].mean(axis=0))))
              + float(np.max(np.abs(traj.vs[s].mean(axis=0))))
              for s in range(traj.times.size))
    summary = {
        "n_jumps": traj.n_jumps,
        "sup_mean_z_squared": max(mz),
        "mean_z_squared_bound": bound,
        "max_odd_moment": odd,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    return summary


# -- picard ----------------------------------------------------------------


def cmd_picard(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    r = cfg.sections["run"]
    m = r["cloud_m"]
    eps_inv = cfg.sections["model"]["eps_inv"] or 16
    if m % eps_inv != 0:
        raise ConfigError("run", "cloud_m",
                          f"must be divisible by eps_inv = {eps_inv}")
    kernel = cfg.kernel()
    _, dists, ratios = mf_mod.picard_iterate(
        cfg.initial_condition(), kernel, cfg.potentials(),
        cfg.sections["model"]["gamma_bar"], r["horizon"],
        cfg.model_params(seed).dt_max, m, r["grid_g"],
        r["picard_iterations"], seed, eps_inv)
    report = {
        "distances": dists,
        "contraction_ratios": [None if math.isnan(x) else x for x in ratios],
        "iterations": r["picard_iterations"],
        "eps_inv": eps_inv,
    }
    _write_json(os.path.join(outdir, "picard_report.json"), report)
    return report


# -- hydro -------------------------------------------------------------


def cmd_hydro(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    m = cfg.sections["model"]
    r = cfg.sections["run"]
    ell_values = list(r["ell_list"]) or [m["ell"]]
    report = hydro_mod.diffusion_experiment(
        n=m["n"], ell_values=ell_values, gamma_bar=m["gamma_bar"],
        ic=cfg.initial_condition(), scaled_times=r["times"], engine=r["engine"],
        kernel_builder=lambda ell, n: cfg.kernel(ell, n), master_seed=seed,
        replicas=r["replicas"], grid_g=r["grid_g"], dt_max=m["dt_max"],
        cloud_m=r["cloud_m"])
    _write_json(os.path.join(outdir, "hydro_report.json"), report)

    header = ["t_scaled", "bin", "r_center", "energy_mean", "energy_se"]
    for idx, (ell, block) in enumerate(report["per_ell"].items()):
        rows = []
        centers = (np.arange(r["grid_g"]) + 0.5) / r["grid_g"]
        for s, ts in enumerate(block["scaled_times"]):
            for g in range(r["grid_g"]):
                rows.append([ts, g, centers[g], block["profiles"][s][g],
                             block["profile_se"][s][g]])
        name = "profile.csv" if len(report["per_ell"]) == 1 else f"profile_ell{ell}.csv"
        _write_csv(os.path.join(outdir, name), header, rows)
    return report


# -- compare (convergence experiment) --------------------------------------


def admissible_eps_inv(n: int, ell: float, d: int, ref_m: int) -> int:
    """Box count 1/eps nearest the coarse-graining schedule
    eps = ell^{(2d+2)/(2d+3)} n^{-1/(2d+3)}, among divisors of both n and
    the reference size (so stratified boxes hold exact populations)."""
    target_inv = ell ** (-(2.0 * d + 2.0) / (2.0 * d + 3.0)) * n ** (1.0 / (2.0 * d + 3.0))
    best = None
    for k in range(2, n + 1):
        if n % k or ref_m % k:
            continue
        if not (1.0 / n < 1.0 / k < ell):
            continue
        score = abs(math.log(k / target_inv))
        if best is None or score < best[0]:
            best = (score, k)
    if best is None:
        raise ValueError(
            f"no admissible box count for n={n}, ell={ell}, ref_m={ref_m}")
    return best[1]


def _subsample_reference(ref, eps_inv: int, per_box: int, cap: int = 1024):
    """Per-box even subsample whose count is an exact multiple of per_box."""
    pts = ref.points() if hasattr(ref, "points") else ref.points
    r = pts[:, 0]
    part = BoxPartition(eps_inv=eps_inv, n=eps_inv)
    boxes = part.box_of_r(r)
    picks = []
    for j in range(eps_inv):
        members = np.nonzero(boxes == j)[0]
        members = members[np.argsort(r[members], kind="stable")]
        q = max(1, min(members.size // per_box, max(1, cap // per_box)))
        m_sub = q * per_box
        idx = (np.arange(m_sub) * members.size) // m_sub
        picks.append(members[idx])
    picks = np.concatenate(picks)
    return transport.DiscreteMeasure(pts[picks], np.full(picks.size, 1.0 / picks.size),
                                     torus_first=True)


def _reference_self_distance(ref, eps_inv: int, cap: int = 1024) -> float:
    """Sliced distance between two disjoint halves of the reference cloud."""
    pts = ref.points() if hasattr(ref, "points") else ref.points
    r = pts[:, 0]
    part = BoxPartition(eps_inv=eps_inv, n=eps_inv)
    boxes = part.box_of_r(r)
    first, second = [], []
    for j in range(eps_inv):
        members = np.nonzero(boxes == j)[0]
        members = members[np.argsort(r[members], kind="stable")]
        half = min(members.size // 2, cap)
        first.append(members[0:2 * half:2])
        second.append(members[1:2 * half:2])
    first = np.concatenate(first)
    second = np.concatenate(second)
    a = transport.DiscreteMeasure(pts[first], np.full(first.size, 1.0 / first.size),
                                  torus_first=True)
    b = transport.DiscreteMeasure(pts[second], np.full(second.size, 1.0 / second.size),
                                  torus_first=True)
    return transport.sliced_w1(a, b, eps_inv)


def _compare_chain_worker(args):
    config_text, seed, n, rep, horizon = args
    cfg = parse_config_text(config_text)
    params = cfg.model_params(seed, n=n)
    kernel = cfg.kernel(n=n)
    potentials = cfg.potentials()
    ic = cfg.initial_condition()
    rng = streams.replica_stream(seed, f"compare-n{n}", rep)
    result = chain_mod.simulate_chain(params, kernel, potentials, ic, horizon,
                                      observers={}, rng=rng,
                                      sample_times=[horizon])
    state = result["final"]
    return state.x, state.v


def convergence_experiment(cfg: ExperimentConfig, seed: int,
                           workers: int = 1) -> dict:
    """Chain empirical measures against one high-resolution cloud.

    For each n, replicas of the chain run to the horizon and their sliced
    distance to the reference cloud (and the box upper bound) is averaged.
    The reference's own resolution is reported as the sliced distance
    between its two half-clouds.
    """
    m = cfg.sections["model"]
    r = cfg.sections["run"]
    n_list = list(r["n_list"]) or [256, 1024, 4096]
    replicas = r["replicas"]
    if replicas < 8:
        raise ConfigError("run", "replicas",
                          "convergence report needs >= 8 replicas for its SE")
    ref_m = r["ref_cloud_m"]
    if ref_m < 10 * max(n_list):
        raise ConfigError("run", "ref_cloud_m",
                          "reference cloud must be >= 10x the largest n")
    horizon = r["horizon"]
    d = m["d"]
    ell = m["ell"]
    est_events = (m["gamma_bar"] * horizon
                  * (ref_m + replicas * 0.5 * sum(n_list)))
    if est_events > 2e8:
        raise ConfigError("run", "horizon",
                          f"budget guard: ~{est_events:.3g} exchange events")
    ic = cfg.initial_condition()
    potentials = cfg.potentials()

    ref_kernel = cfg.kernel(n=max(n_list))
    rng_ref = streams.stream(seed, "compare-reference")
    ref_cloud = mf_mod.init_cloud(ic, ref_m, r["grid_g"], rng_ref)
    traj = mf_mod.evolve_cloud(
        ref_cloud, ref_kernel, potentials, m["gamma_bar"], horizon,
        cfg.model_params(seed).dt_max, r["jump_mode"], rng_ref,
        snapshot_times=[0.0, horizon])
    ref_final = traj.cloud_at(int(np.argmin(np.abs(traj.times - horizon)))).empirical()

    config_text = cfg.to_text()
    report = {"ell": ell, "gamma_bar": m["gamma_bar"], "t": horizon,
              "d": d, "ref_cloud_m": ref_m, "replicas": replicas, "per_n": {}}

    for n in n_list:
        eps_inv = admissible_eps_inv(n, ell, d, ref_m)
        per_box = n // eps_inv
        ref_sub = _subsample_reference(ref_final, eps_inv, per_box)
        m_cut, n_cubes = transport.box_bound_schedule(n / eps_inv, d)
        if r["w1_m_cut"] > 0:
            m_cut = r["w1_m_cut"]
        if r["w1_n_cubes"] > 0:
            n_cubes = r["w1_n_cubes"]

        payloads = [(config_text, seed, n, rep, horizon) for rep in range(replicas)]
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                states = list(pool.map(_compare_chain_worker, payloads))
        else:
            states = [_compare_chain_worker(p) for p in payloads]

        sliced_vals = []
        bound_vals = []
        for x, v in states:
            emp = chain_mod.EmpiricalMeasure(
                r=(np.arange(n) + 1.0) / n, x=x, v=v)
            sliced_vals.append(transport.sliced_w1(emp, ref_sub, eps_inv))
            bound_vals.append(transport.w1_box_bound(emp, ref_sub, 1.0 / eps_inv,
                                                     m_cut, n_cubes))
        sliced_vals = np.asarray(sliced_vals)
        bound_vals = np.asarray(bound_vals)
        report["per_n"][n] = {
            "eps_inv": eps_inv,
            "sliced_mean": float(sliced_vals.mean()),
            "sliced_se": float(sliced_vals.std(ddof=1) / math.sqrt(replicas)),
            "bound_mean": float(bound_vals.mean()),
            "bound_se": float(bound_vals.std(ddof=1) / math.sqrt(replicas)),
            "box_m_cut": m_cut,
            "box_n_cubes": n_cubes,
            "ref_self_distance": _reference_self_distance(ref_final, eps_inv),
        }

    means = [report["per_n"][n]["sliced_mean"] for n in n_list]
    report["n_list"] = n_list
    report["sliced_ratios"] = [means[i + 1] / means[i] if means[i] > 0 else math.nan
                               for i in range(len(means) - 1)]
    return report


def cmd_compare(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    report = convergence_experiment(cfg, seed, workers)
    _write_json(os.path.join(outdir, "convergence_report.json"), report)
    return report


def initial_coupling_distance(n: int, eps_inv: int, ic, seed: int) -> float:
    """Sliced distance of the shared-sample box coupling at time zero.

    The chain sits on the grid; the coupled cloud keeps the same phase
    coordinates but redraws each spatial coordinate uniformly inside its
    box, so the distance is bounded by the box width.
    """
    rng = streams.stream(seed, "initial-coupling")
    r_grid = (np.arange(n) + 1.0) / n
    x, v = sample_z_given_r(ic, r_grid, rng)
    part = BoxPartition(eps_inv=eps_inv, n=n)
    j = part.box_of_site(np.arange(n))
    rho = (j + 1.0 - rng.random(n)) * part.eps
    a = chain_mod.EmpiricalMeasure(r=r_grid, x=x, v=v)
    b = chain_mod.EmpiricalMeasure(r=rho, x=x, v=v)
    return transport.sliced_w1(a, b, eps_inv)


# -- coupling demonstration -------------------------------------------------


def cmd_coupling(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    """Random coupling-map instances: cost identity and pushforward checks."""
    rng = streams.stream(seed, "coupling")
    d = cfg.sections["model"]["d"]
    instances = cfg.sections["run"]["coupling_instances"]
    worst_cost = 0.0
    worst_push = 0.0
    for _ in range(instances):
        k_max = int(rng.integers(2, 7))
        nn = int(rng.integers(4 * k_max, 8 * k_max))
        raw = rng.random(k_max + 1) + 0.1
        raw = np.sort(raw)[::-1]
        gam = np.concatenate([raw[::-1], raw[1:]])
        gam = gam / gam.sum()
        vels = rng.normal(size=(2 * k_max + 1, d))
        m_t = int(rng.integers(3, 13))
        tw = rng.random(m_t) + 0.05
        tw = tw / tw.sum()
        target = transport.DiscreteMeasure(rng.normal(size=(m_t, d)), tw)
        pm = transport.build_pi_map(gam, vels, target, nn)
        worst_cost = max(worst_cost, abs(pm.cost_integral() - pm.cost))
        worst_push = max(worst_push,
                         float(np.max(np.abs(pm.pushforward_weights()
                                             - target.weights))))
    report = {
        "instances": instances,
        "max_cost_identity_error": worst_cost,
        "max_pushforward_error": worst_push,
        "cost_identity_tol": 1e-10,
        "pushforward_tol": 1e-12,
        "pass": bool(worst_cost <= 1e-10 and worst_push <= 1e-12),
    }
    _write_json(os.path.join(outdir, "coupling_report.json"), report)
    return report


# -- metrics -----------------------------------------------------------------


def cmd_metrics(cfg: ExperimentConfig, seed: int, workers: int, outdir: str) -> dict:
    r = cfg.sections["run"]
    if not r["measure_a"] or not r["measure_b"]:
        raise ConfigError("run", "measure_a",
                          "metrics needs measure_a and measure_b paths")
    a = transport.read_measure_csv(r["measure_a"])
    b = transport.read_measure_csv(r["measure_b"])
    report: dict = {"measure_a": r["measure_a"], "measure_b": r["measure_b"]}
    if (a.count == b.count and a.count <= transport.MATCHING_SIZE_CAP
            and a.equal_weights() and b.equal_weights()):
        cost, _ = transport.w1_matching(a, b)
        report["w1_exact"] = cost
    else:
        report["w1_exact"] = None
    eps_inv = cfg.sections["model"]["eps_inv"]
    if eps_inv:
        try:
            report["sliced_w1"] = transport.sliced_w1(a, b, eps_inv)
            d = (a.points.shape[1] - 1) // 2
            m_cut, n_cubes = transport.box_bound_schedule(a.count / eps_inv, d)
            report["w1_box_bound"] = transport.w1_box_bound(
                a, b, 1.0 / eps_inv, m_cut, n_cubes)
            report["eps_inv"] = eps_inv
        except ValueError as exc:
            report["sliced_w1"] = None
            report["box_error"] = str(exc)
    _write_json(os.path.join(outdir, "metrics.json"), report)
    return report


# -- plumbing ---------------------------------------------------------------


_COMMANDS = {
    "chain": cmd_chain,
    "meanfield": cmd_meanfield,
    "picard": cmd_picard,
    "hydro": cmd_hydro,
    "compare": cmd_compare,
    "coupling": cmd_coupling,
    "metrics": cmd_metrics,
}

_PLOTTABLE = {
    "chain": ("chain_trace.csv", "t", "energy"),
    "hydro": ("profile.csv", "r_center", "energy_mean"),
}


def _emit_plot(outdir: str, sub: str):
    spec = _PLOTTABLE.get(sub)
    if spec is None:
        return
    csv_name, xcol, ycol = spec
    if not os.path.exists(os.path.join(outdir, csv_name)):
        candidates = sorted(f for f in os.listdir(outdir)
                            if f.startswith(csv_name.split(".")[0]))
        if not candidates:
            return
        csv_name = candidates[0]
    path = os.path.join(outdir, "plot.gp")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("set datafile separator ','\n")
        fh.write(f"set xlabel '{xcol}'\nset ylabel '{ycol}'\n")
        fh.write(f"plot '{csv_name}' using "
                 f"'{xcol}':'{ycol}' with points title '{sub}'\n")


def run(subcommand: str, config_path: str, seed: int, workers: int = 1,
        out: str = "out", emit_plot: bool = False) -> dict:
    """Programmatic entry point; returns the subcommand's summary dict."""
    if subcommand not in _COMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    cfg = parse_config(config_path)
    outdir = os.path.join(out, f"{subcommand}-{cfg.content_hash(seed)}")
    os.makedirs(outdir, exist_ok=True)
    summary = _COMMANDS[subcommand](cfg, seed, workers, outdir)
    if emit_plot:
        _emit_plot(outdir, subcommand)
    summary = dict(summary)
    summary["outdir"] = outdir
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kacchain",
        description="Oscillator chain with interaction-range kernels, its "
                    "mean-field limit, transport metrics, and energy-diffusion "
                    "experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--seed", type=int, default=0, help="64-bit master seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default="out", help="output directory root")
        p.add_argument("--emit-plot", action="store_true")
    args = parser.parse_args(argv)
    try:
        summary = run(args.subcommand, args.config, args.seed, args.workers,
                      args.out, args.emit_plot)
    except Exception as exc:  # noqa: BLE001 - machine-readable error contract
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        if os.environ.get("KACCHAIN_DEBUG"):
            payload["error"]["traceback"] = traceback.format_exc()
        print(json.dumps(payload), file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
