##### Primary Imports #####
try:
    import argparse
    import os
    import math
    import sys
    import ctypes
    import json
    import re
    import logging
    import time
    import numpy as np
    import pandas as pd
    import humanize

    from datetime import timedelta
    from pathlib import Path
    from colorama import Fore, Back, Style, init
    from tqdm import tqdm
    from prettytable import PrettyTable

except Exception as e:
    print("Error Loading Primary Imports")
    print("Check to make sure you have all the required modules installed.")
    print("Error: " + str(e))
    sys.exit(1)



##### Extensions #####

try:
    from modules.about import print_about, version
    from modules.console_settings import set_window_title, setup_logging
    from modules.warnings import print_warning, print_budget_warning, print_table_fallback_warning
    from modules import parser_args
    from modules import config
    from modules.errors import DomainError, NumericalError, QuantiPropError, TableError, ValidationError
    from modules.datasets import get_schema, load_dataset, standardization
    from modules.experiment import ExperimentSpec, FAILURE_BUDGET, over_budget, run_experiment
    from modules.inference import fit_with_hypers
    from modules.likelihoods import Task, get_likelihood
    from modules.lookup import GridAxis, GridSpec, load_table, precompute_table, save_table, spot_check
    from modules.predict import FittedModel, evaluate, load_model, save_model
    from modules.verify import CHECKS, all_passed, run_checks
except Exception as e:
    print("Error Loading Extensions")
    print("Check the Modules folder and see if there are any missing or corrupted files.")
    print("You should make sure all these files are present:")
    print("about.py, console_settings.py, warnings.py, parser_args.py, config.py, errors.py, datasets.py, experiment.py, inference.py, likelihoods.py, lookup.py, predict.py, verify.py")
    print("If you have git installed, you can use \"git reset --hard\" to reset the files to the latest version.")
    print(e)
    sys.exit(1)
