"""Experiment configuration: INI-style files with a strict schema.

Sections [model], [kernel], [potential], [initial], [run].  Unknown
sections or keys are rejected, every value is type-checked, and parsing
then serializing then reparsing reproduces the identical configuration.
All physical parameters are dimensionless.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    InitialCondition,
    KacKernel,
    ModelParams,
    PotentialSpec,
    build_kernel,
    harmonic_potentials,
    homogeneous_potentials,
    smooth_bump,
    uniform_profile,
)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_text"]


class ConfigError(ValueError):
    """Configuration problem with a section/key-precise message."""

    def __init__(self, section: str, key: str | None, message: str):
        self.section = section
        self.key = key
        where = f"[{section}]" + (f" {key}" if key else "")
        super().__init__(f"{where}: {message}")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str):
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(float(p) for p in items)


def _parse_int_list(text: str):
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in items)


# key -> (parser, default); REQUIRED means the key must be present
_REQUIRED = object()

_SCHEMA = {
    "model": {
        "n": (int, _REQUIRED),
        "ell": (float, _REQUIRED),
        "gamma_bar": (float, 0.0),
        "d": (int, 1),
        "dt_max": (float, None),
        "moment_order_b": (float, 1.0),
        "eps_inv": (int, None),
    },
    "kernel": {
        "phi": (str, "smooth-bump"),
        "phi_sharpness": (float, 1.0),
        "gamma": (str, "smooth-bump"),
        "gamma_sharpness": (float, 1.0),
        "gamma_def": (str, "cell-integral"),
    },
    "potential": {
        "w": (str, "harmonic"),
        "u": (str, "harmonic"),
        "u_stiffness": (float, 1.0),
        "psi_base": (float, 1.0),
        "psi_quartic": (float, 0.0),
    },
    "initial": {
        "kind": (str, "local-gibbs"),
        "t0": (float, 1.0),
        "t1": (float, 0.0),
        "r_assignment": (str, "grid"),
    },
    "run": {
        "horizon": (float, 1.0),
        "replicas": (int, 1),
        "snapshots": (int, 2),
        "grid_g": (int, 64),
        "cloud_m": (int, 10000),
        "jump_mode": (str, "exchange"),
        "collect_events": (_parse_bool, False),
        "times": (_parse_float_list, (0.05, 0.1, 0.2)),
        "ell_list": (_parse_float_list, ()),
        "n_list": (_parse_int_list, ()),
        "ref_cloud_m": (int, 100000),
        "picard_iterations": (int, 5),
        "engine": (str, "chain"),
        "w1_m_cut": (float, 0.0),
        "w1_n_cubes": (int, 0),
        "measure_a": (str, ""),
        "measure_b": (str, ""),
        "coupling_instances": (int, 50),
    },
}

_CHOICES = {
    ("kernel", "phi"): ("smooth-bump", "uniform-test"),
    ("kernel", "gamma"): ("smooth-bump", "uniform-test"),
    ("kernel", "gamma_def"): ("cell-integral", "pointwise"),
    ("potential", "w"): ("harmonic",),
    ("potential", "u"): ("harmonic", "homogeneous"),
    ("initial", "kind"): ("local-gibbs",),
    ("initial", "r_assignment"): ("grid", "uniform", "uniform-in-box"),
    ("run", "jump_mode"): ("exchange", "resample"),
    ("run", "engine"): ("chain", "cloud"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; ``sections`` holds the typed values."""

    sections: dict

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.sections == other.sections

    def get(self, section: str, key: str):
        return self.sections[section][key]

    # -- constructors for the model objects -------------------------------

    def model_params(self, seed: int = 0, n: int | None = None,
                     ell: float | None = None) -> ModelParams:
        m = self.sections["model"]
        return ModelParams(
            n=n if n is not None else m["n"],
            ell=ell if ell is not None else m["ell"],
            gamma_bar=m["gamma_bar"],
            d=m["d"],
            dt_max=m["dt_max"],
            moment_order_b=m["moment_order_b"],
            seed=seed,
        )

    def _profile(self, which: str):
        k = self.sections["kernel"]
        kind = k[which]
        if kind == "smooth-bump":
            return smooth_bump(k[f"{which}_sharpness"])
        return uniform_profile()

    def kernel(self, ell: float | None = None, n: int | None = None) -> KacKernel:
        m = self.sections["model"]
        return build_kernel(
            self._profile("phi"), self._profile("gamma"),
            ell if ell is not None else m["ell"],
            n if n is not None else m["n"],
            gamma_def=self.sections["kernel"]["gamma_def"],
        )

    def potentials(self) -> PotentialSpec:
        p = self.sections["potential"]
        d = self.sections["model"]["d"]
        if p["u"] == "harmonic":
            return harmonic_potentials(d, p["u_stiffness"])
        return homogeneous_potentials(d, p["psi_base"], p["psi_quartic"])

    def initial_condition(self) -> InitialCondition:
        i = self.sections["initial"]
        t0, t1 = i["t0"], i["t1"]

        def temperature(r):
            return t0 + t1 * np.cos(2.0 * np.pi * np.asarray(r, dtype=float))

        return InitialCondition(temperature=temperature, potentials=self.potentials())

    # -- canonical serialization ------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in _SCHEMA:
            lines.append(f"[{section}]")
            for key in _SCHEMA[section]:
                val = self.sections[section][key]
                lines.append(f"{key} = {_format_value(val)}")
            lines.append("")
        return "\n".join(lines)

    def content_hash(self, seed: int) -> str:
        payload = self.to_text() + f"\nseed = {seed}\n"
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _format_value(val) -> str:
    if val is None:
        return ""
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, tuple):
        return ", ".join(_format_value(v) for v in val)
    return str(val)


def parse_config(path: str) -> ExperimentConfig:
    """Parse and validate a configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("?", None, f"syntax error: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, None, "unknown section")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(section, key, "unknown key")

    sections: dict = {}
    for section, keys in _SCHEMA.items():
        sections[section] = {}
        for key, (conv, default) in keys.items():
            if parser.has_option(section, key) and parser.get(section, key).strip():
                raw = parser.get(section, key)
                try:
                    sections[section][key] = conv(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(section, key, f"bad value {raw!r}: {exc}") from exc
            elif default is _REQUIRED:
                raise ConfigError(section, key, "required key missing")
            else:
                sections[section][key] = default

    cfg = ExperimentConfig(sections=sections)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    for (section, key), allowed in _CHOICES.items():
        val = cfg.sections[section][key]
        if val not in allowed:
            raise ConfigError(section, key,
                              f"must be one of {allowed}, got {val!r}")

    m = cfg.sections["model"]
    if m["n"] < 1:
        raise ConfigError("model", "n", "must be a positive integer")
    if not (0.0 < m["ell"] < 1.0):
        raise ConfigError("model", "ell", "must lie in (0, 1)")
    if math.floor(m["ell"] * m["n"]) < 1:
        raise ConfigError("model", "ell",
                          f"ell * n = {m['ell'] * m['n']:.3g} < 1")
    if m["gamma_bar"] < 0:
        raise ConfigError("model", "gamma_bar", "must be nonnegative")
    if m["d"] < 1:
        raise ConfigError("model", "d", "must be a positive integer")
    if m["dt_max"] is not None and m["dt_max"] <= 0:
        raise ConfigError("model", "dt_max", "must be positive")

    eps_inv = m["eps_inv"]
    if eps_inv is not None:
        if eps_inv < 1:
            raise ConfigError("model", "eps_inv", "must be a positive integer")
        if m["n"] % eps_inv != 0:
            raise ConfigError("model", "eps_inv",
                              f"1/eps must divide n = {m['n']} exactly")
        eps = 1.0 / eps_inv
        if not (1.0 / m["n"] < eps < m["ell"]):
            raise ConfigError("model", "eps_inv",
                              "box width must satisfy 1/n < eps < ell")

    p = cfg.sections["potential"]
    if p["u"] == "harmonic" and p["u_stiffness"] <= 0:
        raise ConfigError("potential", "u_stiffness", "must be positive")
    if p["u"] == "homogeneous":
        if p["psi_base"] <= 0:
            raise ConfigError("potential", "psi_base", "must be positive")
        if p["psi_quartic"] < 0:
            raise ConfigError("potential", "psi_quartic", "must be nonnegative")
        if m["d"] == 1 and p["psi_quartic"] != 0.0:
            raise ConfigError(
                "potential", "psi_quartic",
                "anharmonic direction profile requires d >= 2: in d = 1 the "
                "symmetry of the direction profile forces a harmonic pinning",
            )

    i = cfg.sections["initial"]
    if i["t0"] - abs(i["t1"]) <= 0:
        raise ConfigError("initial", "t1",
                          "temperature profile must stay strictly positive")

    r = cfg.sections["run"]
    if r["horizon"] < 0:
        raise ConfigError("run", "horizon", "must be nonnegative")
    if r["replicas"] < 1:
        raise ConfigError("run", "replicas", "must be >= 1")
    if r["snapshots"] < 2:
        raise ConfigError("run", "snapshots", "need at least the two endpoints")
    if r["grid_g"] < 2:
        raise ConfigError("run", "grid_g", "must be >= 2")
    for key in ("cloud_m", "ref_cloud_m"):
        if r[key] < 1:
            raise ConfigError("run", key, "must be positive")
    for nn in r["n_list"]:
        if nn < 1:
            raise ConfigError("run", "n_list", "entries must be positive")
    for ll in r["ell_list"]:
        if not (0.0 < ll < 1.0):
            raise ConfigError("run", "ell_list", "entries must lie in (0, 1)")
