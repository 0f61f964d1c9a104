# experiment.py
# Runs seed x fold x method fits in a worker pool. A single collector thread
# owns the output files, so rows are written in task order by one writer.
import csv
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from modules.about import run_metadata
from modules.datasets import make_folds, prepare_coal_mining, standardization
from modules.errors import QuantiPropError, ValidationError
from modules.inference import FitConfig, SigmaSource, fit_with_hypers
from modules.kernel import KernelParams
from modules.likelihoods import Task, get_likelihood
from modules.lookup import load_table
from modules.predict import evaluate, predict
from modules.projection import Method

logger = logging.getLogger(__name__)

FAILURE_BUDGET = 0.05
ASTERISK_FRACTION = 0.9
# a test point breaks the EP/QP predictive-variance ordering when var_qp > var_ep + this
VARIANCE_ORDER_TOL = 1e-9

RUN_COLUMNS = [
    "dataset", "seed", "fold", "method", "status", "te", "ntll", "log_evidence",
    "sweeps", "converged", "skipped", "clipped", "ordering_clamps",
    "moment_fallbacks", "cdf_fallbacks", "table_fallbacks", "jitter", "error", "wall_time",
]
VARIANCE_COLUMNS = ["dataset", "seed", "fold", "test_index", "var_ep", "var_qp"]

_tables = {}


@dataclass
class ExperimentSpec:
    dataset: object
    output_dir: Path
    methods: tuple = (Method.EP, Method.QP)
    seeds: tuple = tuple(range(10))
    folds: int = 10
    standardize: bool = True
    config: FitConfig = field(default_factory=FitConfig)
    processes: int = 1
    table_path: str = None

    def __post_init__(self):
        self.methods = tuple(Method(m) for m in self.methods)
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.folds < 2:
            raise ValidationError("folds must be at least 2")
        if not set(self.methods) <= {Method.EP, Method.QP}:
            raise ValidationError("methods must be drawn from ep and qp")
        if Method.QP in self.methods and self.config.sigma_source is SigmaSource.TABLE and not self.table_path:
            raise ValidationError("sigma_source=table needs a lookup table path")
        self.output_dir = Path(self.output_dir)


@dataclass
class RunTask:
    dataset: str
    likelihood: str
    seed: int
    fold: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    methods: tuple
    config: FitConfig
    table_path: str = None


@dataclass
class RunOutcome:
    rows: list
    variances: list


def _table_for(path):
    if path is None:
        return None
    if path not in _tables:
        _tables[path] = load_table(path)
    return _tables[path]


def run_task(task):
    """Fit, predict and score every method on one (seed, fold); EP and QP share the initial hyperparameters."""
    likelihood = get_likelihood(task.likelihood)
    table = _table_for(task.table_path)
    init = KernelParams.default(task.X_train.shape[1])
    rows = []
    latent_vars = {}
    for method in task.methods:
        config = replace(task.config, method=method)
        row = {"dataset": task.dataset, "seed": task.seed, "fold": task.fold, "method": method.value}
        start = time.perf_counter()
        try:
            params, posterior = fit_with_hypers(task.X_train, task.y_train, config, likelihood, init, table)
            predictive = predict(posterior, task.X_train, task.X_test, params, likelihood.task)
            metrics = evaluate(predictive, task.y_test)
            row.update(status="ok", te=metrics.te, ntll=metrics.ntll, log_evidence=posterior.log_evidence, error="")
            row.update(posterior.diagnostics.as_row())
            latent_vars[method] = predictive.latent_var
        except QuantiPropError as exc:
            logger.warning("%s seed %d fold %d %s failed: %s", task.dataset, task.seed, task.fold, method.value, exc)
            row.update(status="failed", error=str(exc))
        row["wall_time"] = round(time.perf_counter() - start, 3)
        rows.append(row)

    variances = []
    if Method.EP in latent_vars and Method.QP in latent_vars:
        for index, (var_ep, var_qp) in enumerate(zip(latent_vars[Method.EP], latent_vars[Method.QP])):
            variances.append({
                "dataset": task.dataset, "seed": task.seed, "fold": task.fold,
                "test_index": index, "var_ep": var_ep, "var_qp": var_qp,
            })
    return RunOutcome(rows, variances)


def build_tasks(spec):
    dataset = spec.dataset
    likelihood = "poisson" if dataset.task is Task.COUNT else "probit"
    tasks = []
    for seed in spec.seeds:
        if dataset.events:
            train, test = prepare_coal_mining(dataset.X[:, 0], seed)
            X_train, X_test = train.X, test.X
            if spec.standardize:
                mean, std = standardization(X_train)
                X_train, X_test = (X_train - mean) / std, (X_test - mean) / std
            tasks.append(RunTask(dataset.name, likelihood, seed, 0, X_train, train.y, X_test, test.y,
                                 spec.methods, spec.config, spec.table_path))
            continue
        for fold in make_folds(dataset, seed, spec.folds):
            X_train, y_train, X_test, y_test = fold.split(dataset)
            if not spec.standardize:
                X_train, X_test = dataset.X[fold.train_idx], dataset.X[fold.test_idx]
            tasks.append(RunTask(dataset.name, likelihood, seed, fold.index, X_train, y_train, X_test, y_test,
                                 spec.methods, spec.config, spec.table_path))
    return tasks


def _collector(results, run_path, variance_path, collected, collected_variances):
    with open(run_path, "w", newline="", encoding="utf-8") as run_file, \
            open(variance_path, "w", newline="", encoding="utf-8") as variance_file:
        run_writer = csv.DictWriter(run_file, fieldnames=RUN_COLUMNS, restval="")
        variance_writer = csv.DictWriter(variance_file, fieldnames=VARIANCE_COLUMNS)
        run_writer.writeheader()
        variance_writer.writeheader()
        while True:
            outcome = results.get()
            if outcome is None:
                break
            run_writer.writerows(outcome.rows)
            variance_writer.writerows(outcome.variances)
            collected.extend(outcome.rows)
            collected_variances.extend(outcome.variances)
            results.task_done()


def aggregate(rows, variances=None):
    """Per dataset and method: mean and std over seeds of per-seed fold means, plus QP-vs-EP NTLL wins.

    With the paired predictive variances, also counts test points where the
    QP variance exceeds the EP variance.
    """
    frame = pd.DataFrame(rows)
    summary = {}
    for (dataset, method), group in frame.groupby(["dataset", "method"], sort=True):
        ok = group[group["status"] == "ok"]
        entry = {"runs": int(len(group)), "failure_rate": float((group["status"] != "ok").mean())}
        if len(ok):
            per_seed = ok.groupby("seed")[["te", "ntll"]].mean()
            for metric in ("te", "ntll"):
                entry[f"{metric}_mean"] = float(per_seed[metric].mean())
                entry[f"{metric}_std"] = float(per_seed[metric].std(ddof=0))
        summary.setdefault(dataset, {})[method] = entry

    ok = frame[frame["status"] == "ok"]
    if {"ep", "qp"} <= set(ok["method"]):
        paired = ok.pivot_table(index=["dataset", "seed", "fold"], columns="method", values="ntll").dropna()
        for dataset, group in paired.groupby(level="dataset"):
            fraction = float((group["qp"] < group["ep"]).mean())
            summary[dataset]["qp_better_ntll_fraction"] = fraction
            summary[dataset]["qp_asterisk"] = fraction > ASTERISK_FRACTION

    if variances:
        pairs = pd.DataFrame(variances)
        pairs["violation"] = pairs["var_qp"] > pairs["var_ep"] + VARIANCE_ORDER_TOL
        for dataset, group in pairs.groupby("dataset", sort=True):
            summary.setdefault(dataset, {})
            summary[dataset]["variance_order_points"] = int(len(group))
            summary[dataset]["variance_order_violations"] = int(group["violation"].sum())
            summary[dataset]["variance_order_violation_fraction"] = float(group["violation"].mean())
    return summary


def run_experiment(spec, progress=True, on_progress=None):
    """Writes runs.csv, variances.csv, aggregate.json and metadata.json under spec.output_dir."""
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    tasks = build_tasks(spec)
    run_path = spec.output_dir / "runs.csv"
    variance_path = spec.output_dir / "variances.csv"

    results = queue.Queue()
    collected, collected_variances = [], []
    writer = threading.Thread(target=_collector, args=(results, run_path, variance_path, collected, collected_variances),
                              daemon=True)
    writer.start()

    bar = tqdm(total=len(tasks), desc=f"{spec.dataset.name} runs", unit="run", disable=not progress)
    try:
        if spec.processes > 1:
            with Pool(spec.processes) as pool:
                for done, outcome in enumerate(pool.imap(run_task, tasks), start=1):
                    results.put(outcome)
                    bar.update()
                    if on_progress:
                        on_progress(done, len(tasks))
        else:
            for done, task in enumerate(tasks, start=1):
                results.put(run_task(task))
                bar.update()
                if on_progress:
                    on_progress(done, len(tasks))
    finally:
        results.put(None)
        writer.join()
        bar.close()

    summary = aggregate(collected, collected_variances)
    with open(spec.output_dir / "aggregate.json", "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)

    metadata = run_metadata(spec.config)
    metadata.update(
        dataset=spec.dataset.name,
        provenance=spec.dataset.provenance,
        seeds=list(spec.seeds),
        folds=spec.folds,
        methods=[m.value for m in spec.methods],
        table_checksum=_table_for(spec.table_path).checksum if spec.table_path else None,
    )
    with open(spec.output_dir / "metadata.json", "w", encoding="utf-8") as handle:
        json.dump(metadata, handle, indent=2, default=str)

    failure_rates = {
        method: entry["failure_rate"]
        for methods in summary.values()
        for method, entry in methods.items()
        if isinstance(entry, dict)
    }
    return summary, failure_rates


def over_budget(failure_rates, budget=FAILURE_BUDGET):
    return sorted(method for method, rate in failure_rates.items() if rate > budget)
