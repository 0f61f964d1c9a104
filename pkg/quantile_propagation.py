try:
    from modules.imports import *
except Exception as e:
    print("Error Loading Primary Imports")
    print("Check the Modules folder for the imports.py file and make sure it is not missing or corrupted.")
    print(e)
    sys.exit(1)

init()

logger = logging.getLogger("quantile_propagation")

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def merged_options(args):
    file_options = config.load_config(getattr(args, "config", None))
    return config.merge_options(file_options, vars(args))


def likelihood_for(task):
    return get_likelihood("poisson" if Task(task) is Task.COUNT else "probit")


def elapsed(start):
    return humanize.precisedelta(timedelta(seconds=time.perf_counter() - start), minimum_unit="seconds", format="%0.1f")


def cmd_precompute_table(args):
    options = merged_options(args)
    likelihood = get_likelihood(args.likelihood)
    grid = GridSpec(GridAxis(-10.0, 10.0, args.mu_count), GridAxis(-1.0, 1.0, args.sigma_count, log10=True))
    y_set = likelihood.table_keys(args.y_max) if likelihood.name == "poisson" else likelihood.table_keys()
    output = Path(args.output) if args.output else config.default_table_path(likelihood.name)
    output.parent.mkdir(parents=True, exist_ok=True)

    print(f"Precomputing {Fore.GREEN}{likelihood.name}{Style.RESET_ALL} table: "
          f"{len(y_set)} slices of {grid.shape[0]} x {grid.shape[1]} nodes")
    start = time.perf_counter()
    table = precompute_table(likelihood, y_set, grid, processes=int(options["processes"]))
    checksum = save_table(table, output)
    print(f"Wrote {Fore.YELLOW}{output}{Style.RESET_ALL} ({humanize.naturalsize(output.stat().st_size)}) in {elapsed(start)}")
    print(f"sha256 {checksum}")
    worst = spot_check(table, likelihood, n=20)
    print(f"Spot check: largest |interpolated - direct| sigma* is {worst:.2e}")
    return 0


def load_training_data(args):
    if args.dataset is None and args.label_column is None:
        raise ValidationError("pass --dataset for a known schema or --label-column for your own CSV")
    name = args.dataset or Path(args.data).stem
    positive = args.positive.split(",") if args.positive else None
    dataset = load_dataset(args.data, get_schema(name, args.label_column, positive))
    if dataset.events:
        raise ValidationError(f"{name} is an event log; use run-experiment to bin and split it")
    return dataset


def fit_summary(method, dataset, params, posterior, metrics, duration):
    diagnostics = posterior.diagnostics
    table = PrettyTable(["Field", "Value"])
    table.align = "l"
    table.add_row(["Method", method.upper()])
    table.add_row(["Data", f"{dataset.name} (n={dataset.n}, d={dataset.d})"])
    table.add_row(["Log evidence", f"{posterior.log_evidence:.6f}"])
    table.add_row(["Kernel", repr(params)])
    table.add_row(["Sweeps", f"{diagnostics.sweeps} ({'converged' if diagnostics.converged else 'not converged'})"])
    table.add_row(["Skipped / clipped / clamped", f"{diagnostics.skipped} / {diagnostics.clipped} / {diagnostics.ordering_clamps}"])
    table.add_row(["Quadrature fallbacks", f"{diagnostics.events.moment_fallbacks} moments, {diagnostics.events.cdf_fallbacks} CDF"])
    table.add_row(["Jitter", f"{diagnostics.jitter:.1e}"])
    table.add_row(["Training TE / NTLL", f"{metrics.te:.4f} / {metrics.ntll:.4f}"])
    table.add_row(["Time", duration])
    return table


def cmd_fit(args):
    options = merged_options(args)
    fit_config = config.build_fit_config(options)
    dataset = load_training_data(args)
    likelihood = likelihood_for(dataset.task)
    table_path = config.resolve_table_path(options, likelihood.name) if fit_config.method.value == "qp" else None
    table = load_table(table_path) if table_path else None

    mean, std = standardization(dataset.X)
    X = (dataset.X - mean) / std
    start = time.perf_counter()
    params, posterior = fit_with_hypers(X, dataset.y, fit_config, likelihood, table=table)
    model = FittedModel(X, params, posterior, likelihood.name, dataset.task, mean, std)
    metrics = evaluate(model.predict(dataset.X), dataset.y)

    print(fit_summary(fit_config.method.value, dataset, params, posterior, metrics, elapsed(start)))
    if table is not None:
        print_table_fallback_warning(posterior.diagnostics)
    if args.model_out:
        save_model(model, args.model_out)
        print(f"Saved model to {Fore.YELLOW}{args.model_out}{Style.RESET_ALL}")
    return 0


def cmd_predict(args):
    model = load_model(args.model)
    try:
        frame = pd.read_csv(args.data, na_values=["?"], skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"could not read {args.data}: {exc}") from exc
    truth = None
    if args.label_column and args.label_column in frame.columns:
        truth = frame.pop(args.label_column)
    X = pd.get_dummies(frame, drop_first=True, dtype=float).to_numpy(dtype=float)
    predictive = model.predict(X)

    out = pd.DataFrame({"latent_mean": predictive.latent_mean, "latent_var": predictive.latent_var})
    if predictive.task is Task.BINARY:
        out["probability"] = predictive.class_prob
    else:
        out["nb_k"] = predictive.nb.k
        out["nb_c"] = predictive.nb.c
    out["prediction"] = predictive.point()

    if args.output:
        out.to_csv(args.output, index=False)
        print(f"Wrote {len(out)} predictions to {Fore.YELLOW}{args.output}{Style.RESET_ALL}")
    else:
        table = PrettyTable(list(out.columns))
        for row in out.itertuples(index=False):
            table.add_row([f"{value:.6g}" if isinstance(value, float) else value for value in row])
        print(table)
    if truth is not None:
        labels = likelihood_for(model.task).validate(truth.to_numpy())
        metrics = evaluate(predictive, labels)
        print(f"TE {Fore.GREEN}{metrics.te:.4f}{Style.RESET_ALL}  NTLL {Fore.GREEN}{metrics.ntll:.4f}{Style.RESET_ALL}")
    return 0


def as_seeds(value):
    if isinstance(value, str):
        try:
            return parser_args.valid_seed_range(value)
        except argparse.ArgumentTypeError as exc:
            raise ValidationError(str(exc)) from exc
    return tuple(value)


def as_methods(value):
    if isinstance(value, str):
        try:
            return parser_args.valid_methods(value)
        except argparse.ArgumentTypeError as exc:
            raise ValidationError(str(exc)) from exc
    return tuple(value)


def aggregate_table(summary):
    table = PrettyTable(["Dataset", "Method", "TE", "NTLL", "Failures"])
    for dataset, methods in sorted(summary.items()):
        for method, entry in sorted(methods.items()):
            if not isinstance(entry, dict):
                continue
            te = f"{entry['te_mean']:.4f} ± {entry['te_std']:.4f}" if "te_mean" in entry else "-"
            ntll = f"{entry['ntll_mean']:.4f} ± {entry['ntll_std']:.4f}" if "ntll_mean" in entry else "-"
            if method == "qp" and methods.get("qp_asterisk"):
                ntll += " *"
            table.add_row([dataset, method.upper(), te, ntll, f"{entry['failure_rate']:.1%}"])
    return table


def cmd_run_experiment(args):
    options = merged_options(args)
    fit_config = config.build_fit_config(options)
    dataset = load_dataset(args.data, get_schema(args.dataset))
    likelihood = likelihood_for(dataset.task)
    methods = as_methods(options["methods"])
    table_path = config.resolve_table_path(options, likelihood.name) if "qp" in methods else None

    spec = ExperimentSpec(
        dataset=dataset,
        output_dir=Path(options["output_dir"]) / dataset.name,
        methods=methods,
        seeds=as_seeds(options["seeds"]),
        folds=int(options["folds"]),
        standardize=bool(options["standardize"]),
        config=fit_config,
        processes=int(options["processes"]),
        table_path=str(table_path) if table_path else None,
    )
    print(f"Running {Fore.GREEN}{dataset.name}{Style.RESET_ALL}: {len(spec.seeds)} seeds, "
          f"{'1 split' if dataset.events else f'{spec.folds} folds'} per seed, methods {', '.join(methods)}")

    def on_progress(done, total):
        set_window_title(f"{dataset.name} {done}/{total}")

    start = time.perf_counter()
    summary, failure_rates = run_experiment(spec, on_progress=on_progress)
    print(aggregate_table(summary))
    for name, entry in sorted(summary.items()):
        if "variance_order_points" in entry:
            print(f"{name}: QP predictive variance above EP at {entry['variance_order_violations']} of "
                  f"{entry['variance_order_points']} test points ({entry['variance_order_violation_fraction']:.2%})")
    print(f"Results in {Fore.YELLOW}{spec.output_dir}{Style.RESET_ALL} after {elapsed(start)}")
    print_budget_warning(failure_rates, FAILURE_BUDGET)
    if over_budget(failure_rates):
        return EXIT_NUMERICAL
    return 0


def cmd_verify_invariants(args):
    bar = tqdm(total=len(CHECKS), desc="checks", unit="check")
    results = run_checks(args.samples, args.seed, progress=lambda name: bar.update())
    bar.close()

    table = PrettyTable(["Check", "Cases", "Worst", "Tolerance", "Result"])
    table.align["Check"] = "l"
    for result in results:
        status = f"{Fore.GREEN}pass{Style.RESET_ALL}" if result.passed else f"{Fore.RED}FAIL{Style.RESET_ALL}"
        if result.detail:
            status += f" ({result.detail})"
        table.add_row([result.name, result.cases, f"{result.worst:.2e}", f"{result.tolerance:.0e}", status])
    print(table)
    return 0 if all_passed(results) else EXIT_NUMERICAL


COMMANDS = {
    "precompute-table": cmd_precompute_table,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "run-experiment": cmd_run_experiment,
    "verify-invariants": cmd_verify_invariants,
}


def main(argv=None):
    args = parser_args.parse_arguments(argv)
    setup_logging(getattr(args, "debug", False))

    if args.about:
        print_about()
        return 0

    try:
        return COMMANDS[args.command](args)
    except (ValidationError, DomainError, TableError) as e:
        print(f"{Fore.RED}Error{Style.RESET_ALL}: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        print(f"{Fore.RED}Numerical failure{Style.RESET_ALL}: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}Interrupted.{Style.RESET_ALL}")
        sys.exit(130)
