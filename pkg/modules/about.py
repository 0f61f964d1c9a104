import platform
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np
import scipy
from colorama import Fore, Style

from modules.kernel import JITTER_MAX, JITTER_START

version = "1.0.0"
ScriptCreator = "QuantiProp contributors"
ProjectName = "QuantiProp"


def run_metadata(config):
    """Settings and environment recorded next to every experiment's results."""
    settings = asdict(config)
    settings["method"] = config.method.value
    settings["sigma_source"] = config.sigma_source.value
    return {
        "version": version,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "fit": settings,
        "jitter_policy": {"start": JITTER_START, "max": JITTER_MAX, "growth": 10, "relative_to": "gamma"},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def print_about():
    print(f"\033[4m{Fore.GREEN}About the project:{Style.RESET_ALL}\033[0m")
    print(f"{ProjectName} {Fore.YELLOW}v{version}{Style.RESET_ALL}: Gaussian process classification and "
          f"Poisson regression with expectation propagation (EP) and quantile propagation (QP).")
    print(f"Maintained by {ScriptCreator}.\n")
