import json
import os

import numpy as np
import pytest

from kacchain import cli, streams, transport
from kacchain.config import ConfigError, parse_config_text
from kacchain.model import InitialCondition, harmonic_potentials

MINIMAL = """
[model]
n = 64
ell = 0.25
gamma_bar = 1.0
"""

FULL = """
[model]
n = 128
ell = 0.25
gamma_bar = 0.5
d = 2
dt_max = 0.005
eps_inv = 16

[kernel]
phi = smooth-bump
phi_sharpness = 0.7
gamma = uniform-test
gamma_def = pointwise

[potential]
u = homogeneous
psi_base = 1.0
psi_quartic = 0.5

[initial]
t0 = 1.0
t1 = 0.25

[run]
horizon = 0.5
replicas = 2
snapshots = 3
grid_g = 32
times = 0.05, 0.1
n_list = 32, 64
"""


def test_minimal_config_parses_and_round_trips():
    cfg = parse_config_text(MINIMAL)
    again = parse_config_text(cfg.to_text())
    assert cfg == again
    assert cfg.get("model", "n") == 64
    assert cfg.get("run", "horizon") == 1.0  # default


def test_full_config_round_trip_identical():
    cfg = parse_config_text(FULL)
    again = parse_config_text(cfg.to_text())
    assert cfg == again
    assert cfg.get("kernel", "gamma") == "uniform-test"
    assert cfg.get("run", "n_list") == (32, 64)
    params = cfg.model_params(seed=5)
    assert params.d == 2 and params.seed == 5
    kern = cfg.kernel()
    assert kern.n == 128
    pots = cfg.potentials()
    assert pots.u_kind == "homogeneous"


def test_eps_must_divide_n():
    text = MINIMAL.replace("n = 64", "n = 100") + "eps_inv = 12\n"
    with pytest.raises(ConfigError, match=r"\[model\] eps_inv"):
        parse_config_text(text)


def test_anharmonic_direction_profile_rejected_in_1d():
    text = MINIMAL + "\n[potential]\nu = homogeneous\npsi_quartic = 0.5\n"
    with pytest.raises(ConfigError, match="harmonic"):
        parse_config_text(text)


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text(MINIMAL + "bogus = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text(MINIMAL + "\n[extra]\nfoo = 1\n")


def test_required_and_typed_values():
    with pytest.raises(ConfigError, match="required"):
        parse_config_text("[model]\nn = 64\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("[model]\nn = sixty\nell = 0.25\n")
    with pytest.raises(ConfigError, match="one of"):
        parse_config_text(MINIMAL + "\n[kernel]\nphi = triangle\n")


def test_temperature_positivity_enforced():
    with pytest.raises(ConfigError, match="positive"):
        parse_config_text(MINIMAL + "\n[initial]\nt0 = 0.5\nt1 = 0.5\n")


def _write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_chain_zero_noise_energy_drift(tmp_path):
    text = """
[model]
n = 128
ell = 0.25
gamma_bar = 0.0
dt_max = 0.001

[run]
horizon = 1.0
snapshots = 3
"""
    path = _write(tmp_path, text)
    summary = cli.run("chain", path, seed=3, out=str(tmp_path / "out"))
    assert summary["energy_drift_rel"][0] <= 1e-6
    trace = os.path.join(summary["outdir"], "chain_trace.csv")
    header = open(trace).readline().strip().split(",")
    assert header == ["t", "site", "x_1", "v_1", "energy"]


def test_cli_outputs_byte_identical_across_runs(tmp_path):
    text = MINIMAL + "\n[run]\nhorizon = 0.25\nsnapshots = 3\ncollect_events = true\n"
    path = _write(tmp_path, text)
    s1 = cli.run("chain", path, seed=11, out=str(tmp_path / "a"))
    s2 = cli.run("chain", path, seed=11, out=str(tmp_path / "b"))
    for name in ("chain_trace.csv", "events.csv", "summary.json"):
        b1 = open(os.path.join(s1["outdir"], name), "rb").read()
        b2 = open(os.path.join(s2["outdir"], name), "rb").read()
        assert b1 == b2


def test_cli_worker_count_does_not_change_results(tmp_path):
    text = MINIMAL + "\n[run]\nhorizon = 0.25\nreplicas = 3\nsnapshots = 2\n"
    path = _write(tmp_path, text)
    s1 = cli.run("chain", path, seed=7, out=str(tmp_path / "w1"), workers=1)
    s2 = cli.run("chain", path, seed=7, out=str(tmp_path / "w2"), workers=3)
    assert s1["energy_drift_rel"] == s2["energy_drift_rel"]
    assert s1["n_events"] == s2["n_events"]


def test_cli_meanfield_snapshot_schema(tmp_path):
    text = """
[model]
n = 64
ell = 0.25
gamma_bar = 1.0

[run]
horizon = 0.1
snapshots = 2
cloud_m = 512
grid_g = 16
"""
    path = _write(tmp_path, text)
    summary = cli.run("meanfield", path, seed=1, out=str(tmp_path / "out"))
    snap = os.path.join(summary["outdir"], "cloud_snapshots.csv")
    header = open(snap).readline().strip().split(",")
    assert header == ["t", "sample_id", "rho", "x_1", "v_1"]
    assert summary["sup_mean_z_squared"] <= 1.1 * summary["mean_z_squared_bound"]


def test_cli_metrics_self_distance_zero(tmp_path):
    rng = streams.stream(2, "meas")
    r = (np.arange(64) + 1.0) / 64
    pts = np.concatenate([r[:, None], rng.normal(size=(64, 2))], axis=1)
    m = transport.DiscreteMeasure(pts, np.full(64, 1.0 / 64), torus_first=True)
    meas = tmp_path / "m.csv"
    transport.write_measure_csv(meas, m)
    text = MINIMAL + f"""
eps_inv = 8

[run]
measure_a = {meas}
measure_b = {meas}
"""
    path = _write(tmp_path, text)
    summary = cli.run("metrics", path, seed=0, out=str(tmp_path / "out"))
    assert summary["w1_exact"] == 0.0
    assert summary["sliced_w1"] == 0.0


def test_cli_error_is_machine_readable(tmp_path, capsys):
    path = _write(tmp_path, "[model]\nn = 100\nell = 0.25\neps_inv = 12\n")
    rc = cli.main(["chain", "--config", path, "--seed", "0",
                   "--out", str(tmp_path / "out")])
    assert rc == 1
    err = capsys.readouterr().err
    payload = json.loads(err)
    assert payload["error"]["type"] == "ConfigError"
    assert "eps_inv" in payload["error"]["message"]


def test_cli_coupling_subcommand(tmp_path):
    path = _write(tmp_path, MINIMAL + "\n[run]\ncoupling_instances = 10\n")
    summary = cli.run("coupling", path, seed=4, out=str(tmp_path / "out"))
    assert summary["pass"] is True


def test_cli_hydro_profile_schema(tmp_path):
    text = """
[model]
n = 512
ell = 0.25
gamma_bar = 1.0

[kernel]
phi_sharpness = 0.3
gamma_sharpness = 0.3

[initial]
t1 = 0.5

[run]
times = 0.02
grid_g = 16
replicas = 1
"""
    path = _write(tmp_path, text)
    summary = cli.run("hydro", path, seed=5, out=str(tmp_path / "out"),
                      emit_plot=True)
    prof = os.path.join(summary["outdir"], "profile.csv")
    header = open(prof).readline().strip().split(",")
    assert header == ["t_scaled", "bin", "r_center", "energy_mean", "energy_se"]
    assert os.path.exists(os.path.join(summary["outdir"], "plot.gp"))
    assert os.path.exists(os.path.join(summary["outdir"], "hydro_report.json"))


def test_cli_compare_smoke(tmp_path):
    text = """
[model]
n = 128
ell = 0.2
gamma_bar = 1.0

[run]
horizon = 0.2
replicas = 8
n_list = 32, 64
ref_cloud_m = 1280
grid_g = 16
"""
    path = _write(tmp_path, text)
    summary = cli.run("compare", path, seed=6, out=str(tmp_path / "out"))
    assert set(summary["per_n"]) == {32, 64}
    for block in summary["per_n"].values():
        assert block["sliced_mean"] > 0
        assert block["bound_mean"] >= block["sliced_mean"]


def test_initial_coupling_distance_bounded_by_box_width():
    ic = InitialCondition(
        temperature=lambda r: 1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(r)),
        potentials=harmonic_potentials(1, 1.0))
    dist = cli.initial_coupling_distance(512, 16, ic, seed=8)
    assert dist <= 1.0 / 16  # shared samples: only the spatial offset remains


def test_admissible_eps_inv_schedule():
    # d = 1, ell = 0.1: the schedule targets eps^-1 ~ 33 at n = 4096
    assert cli.admissible_eps_inv(4096, 0.1, 1, 100000) == 32
    assert cli.admissible_eps_inv(256, 0.1, 1, 100000) == 16
    with pytest.raises(ValueError):
        cli.admissible_eps_inv(7, 0.5, 1, 100000)


def test_cli_compare_worker_count_invariant(tmp_path):
    text = """
[model]
n = 64
ell = 0.2
gamma_bar = 1.0

[run]
horizon = 0.1
replicas = 8
n_list = 32
ref_cloud_m = 640
grid_g = 16
"""
    path = _write(tmp_path, text)
    s1 = cli.run("compare", path, seed=9, out=str(tmp_path / "w1"), workers=1)
    s2 = cli.run("compare", path, seed=9, out=str(tmp_path / "w2"), workers=2)
    assert s1["per_n"] == s2["per_n"]


def test_cli_compare_budget_guard(tmp_path):
    text = """
[model]
n = 4096
ell = 0.2
gamma_bar = 1.0

[run]
horizon = 1000000
replicas = 8
n_list = 4096
ref_cloud_m = 100000
"""
    path = _write(tmp_path, text)
    with pytest.raises(ConfigError, match="budget"):
        cli.run("compare", path, seed=0, out=str(tmp_path / "out"))
