from modules.imports import *
from modules.datasets import DATASETS
from modules.likelihoods import LIKELIHOODS

# Define constant choices shared by the subcommands
VALID_DATASETS = sorted(DATASETS)
VALID_LIKELIHOODS = sorted(LIKELIHOODS)


def valid_damping(value):
    try:
        damping = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid damping: {value}. Please give a number.")
    if not 0 < damping <= 1:
        raise argparse.ArgumentTypeError(f"Invalid damping: {value}. Please choose a value in (0, 1].")
    return damping


def valid_positive_int(value):
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid number: {value}. Please give a whole number.")
    if number < 1:
        raise argparse.ArgumentTypeError(f"Invalid number: {value}. Please choose a number of at least 1.")
    return number


def valid_folds(value):
    folds = valid_positive_int(value)
    if folds < 2:
        raise argparse.ArgumentTypeError(f"Invalid fold count: {value}. Cross-validation needs at least 2 folds.")
    return folds


def valid_tolerance(value):
    try:
        tol = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid tolerance: {value}.")
    if not tol > 0:
        raise argparse.ArgumentTypeError(f"Invalid tolerance: {value}. Please choose a positive value.")
    return tol


def valid_seed_range(value):
    """'0-9' is an inclusive range, '1,4,7' a list, '3' a single seed."""
    text = str(value).strip()
    try:
        if re.fullmatch(r"\d+-\d+", text):
            first, last = (int(part) for part in text.split("-"))
            if last < first:
                raise ValueError
            return tuple(range(first, last + 1))
        if re.fullmatch(r"\d+(,\d+)*", text):
            return tuple(int(part) for part in text.split(","))
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"Invalid seed range: {value}. Use a range like 0-9 or a list like 1,4,7.")


def valid_methods(value):
    methods = tuple(part.strip().lower() for part in str(value).split(",") if part.strip())
    if not methods or any(method not in ("ep", "qp") for method in methods):
        raise argparse.ArgumentTypeError(f"Invalid methods: {value}. Choose from ep and qp, for example ep,qp.")
    return methods


def add_common_arguments(parser):
    parser.add_argument("--config", default=None, help="YAML file with option defaults. Flags given on the command line win.")
    parser.add_argument("--debug", action='store_true', help="Show per-sweep debug logging.")
    parser.add_argument("--damping", default=None, type=valid_damping, help="Site update damping in (0, 1]. Default is 0.9.")
    parser.add_argument("--inner_tol", "--inner-tol", default=None, type=valid_tolerance, help="RMS site change that ends the sweeps. Default is 1e-6.")
    parser.add_argument("--max_sweeps", "--max-sweeps", default=None, type=valid_positive_int, help="Cap on sweeps per fit. Default is 100.")
    parser.add_argument("--order", default=None, choices=["index", "random"], help="Site visiting order within a sweep.")


def add_fit_arguments(parser):
    parser.add_argument("--method", default=None, choices=["ep", "qp"], help="Projection used for the local updates.")
    parser.add_argument("--sigma_source", "--sigma-source", default=None, choices=["quadrature", "table"], help="Where QP reads sigma* from.")
    parser.add_argument("--table", default=None, help="Lookup table file. Default is $QP_TABLE_DIR/<likelihood>.qplt.")
    parser.add_argument("--no_hyperopt", "--no-hyperopt", dest="hyperopt", action='store_const', const=False, default=None,
                        help="Keep the initial kernel hyperparameters instead of maximizing the evidence.")


def parse_arguments(argv=None):
    parser = argparse.ArgumentParser(prog="quantile_propagation.py",
                                     description="EP and QP inference for Gaussian process classification and Poisson regression.")
    parser.add_argument("--about", action='store_true', help="About the project.")
    subparsers = parser.add_subparsers(dest="command")

    table = subparsers.add_parser("precompute-table", help="Precompute a sigma* lookup table.")
    add_common_arguments(table)
    table.add_argument("--likelihood", required=True, choices=VALID_LIKELIHOODS, help="Likelihood to tabulate.")
    table.add_argument("--mu_count", "--mu-count", default=20001, type=valid_positive_int, help="Nodes on the cavity mean axis [-10, 10].")
    table.add_argument("--sigma_count", "--sigma-count", default=2001, type=valid_positive_int, help="Nodes on the log10 cavity std axis [-1, 1].")
    table.add_argument("--y_max", "--y-max", default=16, type=int, help="Largest count with its own slice (Poisson only).")
    table.add_argument("--processes", default=None, type=valid_positive_int, help="Worker processes.")
    table.add_argument("--output", default=None, help="Output file. Default is $QP_TABLE_DIR/<likelihood>.qplt.")

    fit = subparsers.add_parser("fit", help="Fit a model on a CSV file.")
    add_common_arguments(fit)
    add_fit_arguments(fit)
    fit.add_argument("--data", required=True, help="CSV file with features and a label column.")
    fit.add_argument("--dataset", default=None, choices=VALID_DATASETS, help="Known dataset schema to apply.")
    fit.add_argument("--label_column", "--label-column", default=None, help="Label column for a dataset without a schema.")
    fit.add_argument("--positive", default=None, help="Comma separated label values mapped to +1.")
    fit.add_argument("--model_out", "--model-out", default=None, help="Write the fitted model to this .npz file.")

    predict = subparsers.add_parser("predict", help="Predict with a saved model.")
    predict.add_argument("--debug", action='store_true', help="Show debug logging.")
    predict.add_argument("--model", required=True, help="Model .npz written by fit.")
    predict.add_argument("--data", required=True, help="CSV file with the same feature columns used in fit.")
    predict.add_argument("--label_column", "--label-column", default=None, help="Column to leave out of the features if present.")
    predict.add_argument("--output", default=None, help="Write predictions to this CSV file instead of the console.")

    experiment = subparsers.add_parser("run-experiment", help="Run the seed x fold benchmark protocol.")
    add_common_arguments(experiment)
    add_fit_arguments(experiment)
    experiment.add_argument("--dataset", required=True, choices=VALID_DATASETS, help="Benchmark dataset.")
    experiment.add_argument("--data", required=True, help="CSV file for the dataset.")
    experiment.add_argument("--seeds", default=None, type=valid_seed_range, help="Seeds, e.g. 0-9 (default) or 0-199.")
    experiment.add_argument("--folds", default=None, type=valid_folds, help="Folds per seed. Default is 10.")
    experiment.add_argument("--methods", default=None, type=valid_methods, help="Methods to compare. Default is ep,qp.")
    experiment.add_argument("--processes", default=None, type=valid_positive_int, help="Worker processes.")
    experiment.add_argument("--output_dir", "--output-dir", default=None, help="Where runs.csv and the summaries go.")

    verify = subparsers.add_parser("verify-invariants", help="Run the randomized property checks.")
    verify.add_argument("--debug", action='store_true', help="Show debug logging.")
    verify.add_argument("--samples", default=100, type=valid_positive_int, help="Random cases per check.")
    verify.add_argument("--seed", default=0, type=int, help="Seed for the random cases.")

    args = parser.parse_args(argv)
    if args.command is None and not args.about:
        parser.print_help()
        sys.exit(2)
    return args
