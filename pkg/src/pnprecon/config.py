"""Sectioned key-value experiment configs: parse, validate, canonicalize.

Format: `[section]` headers, `key = value` lines, `#` comments, one global
`seed` key allowed before the first section.  Unknown sections or keys are
hard errors with line diagnostics; the canonical re-serialization is what
gets hashed into provenance records.
"""

import hashlib
import os
from dataclasses import dataclass

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config",
           "canonical_text", "config_hash"]


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def _floats(text):
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default).  Defaults marked REQUIRED must be set.
_REQUIRED = object()

_SCHEMA = {
    "": {
        "seed": (int, 12345),
    },
    "phantoms": {
        "count": (int, 5),
        "n_test": (int, 1),
        "grid_size": (int, 48),
        "family_seed": (int, 7),
    },
    "geometry": {
        "n_angles": (int, 48),
        "n_bins": (int, 69),
        "bin_width": (float, 1.0),
    },
    "simulation": {
        "n_doses": (int, 5),
        "dose_center": (float, 1.0),
        "dose_decades": (float, 1.0),
        "background_fraction": (float, 0.2),
        "normalization": (_bool, True),
    },
    "osem": {
        "n_iterations": (int, 8),
        "n_subsets": (str, "auto"),
    },
    "net": {
        "n_layers": (int, 5),
        "channels": (int, 16),
        "kernel": (int, 3),
        "activation": (str, "softplus"),
        "init_scale": (float, 0.1),
        "certify_power_iters": (int, 30),
        "certify_margin": (float, 0.05),
    },
    "train.pre": {
        "epochs": (int, 50),
        "learning_rate": (float, 0.001),
        "batch_size": (int, 1),
        "power_iters": (int, 10),
        "sigma_eval_samples": (int, 8),
    },
    "train.jac": {
        "epochs": (int, 14),
        "learning_rate": (float, 0.0005),
        "batch_size": (int, 5),
        "beta": (float, 10.0),
        "alpha": (float, 0.1),
        "epsilon": (float, 0.05),
        "power_iters": (int, 10),
        "sigma_eval_samples": (int, 8),
    },
    "admm": {
        "rho": (float, 10.0),
        "iterations": (int, 40),
        "prox_inner": (int, 30),
        "prox_tol": (float, 1e-8),
        "n_test_sims": (int, 3),
        "record_t_residual": (_bool, False),
        "filter_sigmas": (_floats, [0.0, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0]),
    },
    "sweep": {
        "rhos": (str, "auto"),
        "iterations": (int, 40),
        "n_values": (int, 8),
        "decades": (float, 4.0),
    },
    "paths": {
        "data": (str, "runs/data"),
        "train": (str, "runs/train"),
        "recon": (str, "runs/recon"),
        "sweep": (str, "runs/sweep"),
        "certify": (str, "runs/certify"),
    },
}

_SECTION_ORDER = ["", "phantoms", "geometry", "simulation", "osem", "net",
                  "train.pre", "train.jac", "admm", "sweep", "paths"]


@dataclass
class ExperimentConfig:
    values: dict          # section -> key -> parsed value
    base_dir: str = "."

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values[""]["seed"]

    def path(self, name):
        return os.path.normpath(os.path.join(self.base_dir,
                                             self.values["paths"][name]))


def parse_config(text, base_dir="."):
    values = {sec: dict() for sec in _SCHEMA}
    seen = {sec: set() for sec in _SCHEMA}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA or section == "":
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        schema = _SCHEMA[section]
        if key not in schema:
            where = f"[{section}]" if section else "the global scope"
            raise ConfigError(f"line {lineno}: unknown key {key!r} in {where}")
        if key in seen[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[section].add(key)
        parser = schema[key][0]
        try:
            values[section][key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    for sec, schema in _SCHEMA.items():
        for key, (_, default) in schema.items():
            if key not in values[sec]:
                if default is _REQUIRED:
                    raise ConfigError(f"missing required key {key!r} in [{sec}]")
                values[sec][key] = default if not isinstance(default, list) else list(default)
    return ExperimentConfig(values=values, base_dir=base_dir)


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, list):
        return ",".join(f"{x:.17g}" for x in v)
    return str(v)


def canonical_text(cfg):
    """Fixed section and key order; parsing it back is the identity."""
    lines = []
    for sec in _SECTION_ORDER:
        if sec:
            lines.append(f"[{sec}]")
        for key in _SCHEMA[sec]:
            lines.append(f"{key} = {_fmt_value(cfg.values[sec][key])}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()
