# config.py
# Layered run options: built-in defaults, then a YAML file, then CLI flags.
import logging
import os
from pathlib import Path

import yaml

from modules.errors import ValidationError
from modules.inference import FitConfig, HyperoptConfig

logger = logging.getLogger(__name__)

TABLE_DIR_ENV = "QP_TABLE_DIR"
TABLE_SUFFIX = ".qplt"

DEFAULTS = {
    "method": "ep",
    "sigma_source": "quadrature",
    "inner_tol": 1e-6,
    "max_sweeps": 100,
    "damping": 0.9,
    "order": "index",
    "seed": 0,
    "hyperopt": True,
    "hyperopt_maxiter": 1000,
    "hyperopt_ftol": 1e-9,
    "fd_step": 1e-5,
    "table": None,
    "processes": 1,
    "folds": 10,
    "seeds": "0-9",
    "methods": "ep,qp",
    "output_dir": "results",
    "standardize": True,
}


def load_config(path):
    """Read a YAML mapping of option names; an empty file is an empty mapping."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ValidationError(f"could not read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a mapping, got {type(data).__name__}")
    options = {str(key).replace("-", "_"): value for key, value in data.items()}
    unknown = sorted(set(options) - set(DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return options


def merge_options(file_options, cli_options):
    """Defaults < file < CLI; CLI values of None mean the flag was not given."""
    merged = dict(DEFAULTS)
    merged.update(file_options)
    merged.update({key: value for key, value in cli_options.items() if key in DEFAULTS and value is not None})
    return merged


def build_fit_config(options):
    hyperopt = HyperoptConfig(
        enabled=bool(options["hyperopt"]),
        maxiter=int(options["hyperopt_maxiter"]),
        ftol=float(options["hyperopt_ftol"]),
        fd_step=float(options["fd_step"]),
    )
    try:
        return FitConfig(
            method=str(options["method"]).lower(),
            sigma_source=str(options["sigma_source"]).lower(),
            inner_tol=float(options["inner_tol"]),
            max_sweeps=int(options["max_sweeps"]),
            damping=float(options["damping"]),
            order=str(options["order"]),
            seed=int(options["seed"]),
            hyperopt=hyperopt,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid fit option: {exc}") from exc


def table_dir():
    return Path(os.environ.get(TABLE_DIR_ENV, "tables"))


def default_table_path(likelihood_name):
    return table_dir() / f"{likelihood_name}{TABLE_SUFFIX}"


def resolve_table_path(options, likelihood_name):
    """Explicit table option, else the default location; None when QP does not read a table."""
    if str(options["sigma_source"]).lower() != "table":
        return None
    path = Path(options["table"]) if options.get("table") else default_table_path(likelihood_name)
    if not path.exists():
        raise ValidationError(f"lookup table {path} not found; run precompute-table or set {TABLE_DIR_ENV}")
    return path
