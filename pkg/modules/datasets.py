# datasets.py
# Benchmark dataset schemas, CSV ingestion, seeded fold generation with
# train-only standardization, and the coal-mining event-sequence splits.
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from modules.errors import ValidationError
from modules.likelihoods import Task

logger = logging.getLogger(__name__)

MAX_SPLIT_RETRIES = 100


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    label: str
    task: Task = Task.BINARY
    positive: tuple = ()
    keep: tuple = ()
    drop: tuple = ()
    events: bool = False


def get_dataset_schemas():
    schemas = [
        DatasetSchema("ionosphere", "class", positive=("g",)),
        DatasetSchema("cancer", "class", positive=("4",), drop=("id",)),
        DatasetSchema("sonar", "class", positive=("M",)),
        DatasetSchema("crabs", "sex", positive=("M",)),
        DatasetSchema("pima", "Outcome", positive=("1",)),
        # window glass (types 1-4) against the rest
        DatasetSchema("glass", "Type", positive=("1", "2", "3", "4"), drop=("Id",)),
        DatasetSchema("wine1", "class", positive=("1",), keep=("1", "2")),
        DatasetSchema("wine2", "class", positive=("1",), keep=("1", "3")),
        DatasetSchema("wine3", "class", positive=("2",), keep=("2", "3")),
        DatasetSchema("mining", "date", task=Task.COUNT, events=True),
    ]
    return {schema.name: schema for schema in schemas}


DATASETS = get_dataset_schemas()


def get_schema(name, label=None, positive=None):
    if name in DATASETS:
        schema = DATASETS[name]
    elif label:
        schema = DatasetSchema(name, label)
    else:
        raise ValidationError(f"unknown dataset '{name}'; pass a label column or one of {sorted(DATASETS)}")
    if label:
        schema = replace(schema, label=label)
    if positive:
        schema = replace(schema, positive=tuple(positive))
    return schema


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    task: Task
    provenance: dict = field(default_factory=dict)
    events: bool = False

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class Fold:
    index: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def split(self, dataset):
        X_train = (dataset.X[self.train_idx] - self.mean) / self.std
        X_test = (dataset.X[self.test_idx] - self.mean) / self.std
        return X_train, dataset.y[self.train_idx], X_test, dataset.y[self.test_idx]


def _label_strings(series):
    if pd.api.types.is_numeric_dtype(series) and np.all(np.mod(series.to_numpy(dtype=float), 1) == 0):
        series = series.astype(np.int64)
    return series.astype(str).str.strip()


def decimal_years(values):
    """Event times as decimal years; accepts numbers or anything pandas parses as a date."""
    series = pd.Series(values)
    if pd.api.types.is_numeric_dtype(series):
        return series.to_numpy(dtype=float)
    stamps = pd.to_datetime(series, errors="raise")
    start = pd.to_datetime(stamps.dt.year.astype(str) + "-01-01")
    length = np.where(stamps.dt.is_leap_year, 366.0, 365.0)
    return (stamps.dt.year + (stamps - start).dt.days / length).to_numpy(dtype=float)


def load_dataset(path, schema):
    try:
        frame = pd.read_csv(path, na_values=["?"], skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"could not read {path}: {exc}") from exc
    if schema.label not in frame.columns:
        raise ValidationError(f"{path} has no '{schema.label}' column (columns: {list(frame.columns)})")

    if schema.events:
        times = decimal_years(frame[schema.label].dropna())
        if times.size == 0:
            raise ValidationError(f"{path} holds no events")
        provenance = {"source": str(path), "rows_read": len(frame), "rows_dropped": len(frame) - times.size}
        return Dataset(schema.name, times[:, None], np.ones(times.size, dtype=int), Task.COUNT, provenance, events=True)

    features = [c for c in frame.columns if c != schema.label and c not in schema.drop]
    rows_read = len(frame)
    frame = frame.dropna(subset=features + [schema.label])
    dropped = rows_read - len(frame)
    if dropped:
        logger.warning("%s: dropped %d rows with missing values", schema.name, dropped)

    labels = _label_strings(frame[schema.label])
    if schema.keep:
        mask = labels.isin(schema.keep).to_numpy()
        frame, labels = frame[mask], labels[mask]
    if len(frame) == 0:
        raise ValidationError(f"{schema.name}: dataset is empty after cleaning")

    if schema.task is Task.BINARY:
        classes = set(labels)
        if schema.positive:
            if not classes & set(schema.positive) or not classes - set(schema.positive):
                raise ValidationError(f"{schema.name}: labels {sorted(classes)} do not split on positive class {schema.positive}")
            y = np.where(labels.isin(schema.positive), 1, -1)
        elif classes <= {"-1", "1"}:
            y = labels.astype(int).to_numpy()
        else:
            raise ValidationError(f"{schema.name}: labels {sorted(classes)} are not -1/+1 and no positive class given")
    else:
        counts = pd.to_numeric(frame[schema.label], errors="coerce").to_numpy()
        if np.any(np.isnan(counts)) or np.any(counts < 0) or np.any(np.mod(counts, 1) != 0):
            raise ValidationError(f"{schema.name}: count labels must be nonnegative integers")
        y = counts.astype(int)

    X = pd.get_dummies(frame[features], drop_first=True, dtype=float).to_numpy(dtype=float)
    provenance = {
        "source": str(path),
        "rows_read": rows_read,
        "rows_dropped": dropped,
        "label": schema.label,
        "features": features,
    }
    logger.info("loaded %s: n=%d, d=%d", schema.name, X.shape[0], X.shape[1])
    return Dataset(schema.name, X, y, schema.task, provenance)


def standardization(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def make_folds(dataset, seed, k=10):
    n = dataset.n
    if not 2 <= k <= n:
        raise ValidationError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, k)
    folds = []
    for index, part in enumerate(parts):
        test_idx = np.sort(part)
        train_idx = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != index]))
        mean, std = standardization(dataset.X[train_idx])
        folds.append(Fold(index, train_idx, test_idx, mean, std))
    return folds


def bin_yearly(times, first_year, last_year):
    years = np.arange(first_year, last_year + 1)
    offsets = np.floor(times).astype(int) - first_year
    if np.any(offsets < 0) or np.any(offsets >= years.size):
        raise ValidationError(f"event times fall outside {first_year}-{last_year}")
    counts = np.bincount(offsets, minlength=years.size)
    return (years + 0.5)[:, None], counts


def prepare_coal_mining(event_times, seed, first_year=None, last_year=None):
    """Split events into train and test with probability 1/2 each and bin both by year.

    Both splits are binned over the same span of years, so zero-count years
    are rows too. Returns (train, test) count datasets.
    """
    times = np.asarray(event_times, dtype=float).ravel()
    if times.size == 0:
        raise ValidationError("no events to split")
    first_year = int(np.floor(times.min())) if first_year is None else first_year
    last_year = int(np.floor(times.max())) if last_year is None else last_year

    for attempt in range(MAX_SPLIT_RETRIES):
        rng = np.random.default_rng(seed if attempt == 0 else (seed, attempt))
        to_train = rng.random(times.size) < 0.5
        if 0 < to_train.sum() < times.size:
            break
        logger.warning("seed %d: empty coal-mining split, retrying with a derived seed", seed)
    else:
        raise ValidationError(f"could not split {times.size} events into two non-empty sets")

    provenance = {"seed": seed, "retries": attempt, "first_year": first_year, "last_year": last_year}
    split = []
    for name, mask in (("train", to_train), ("test", ~to_train)):
        X, y = bin_yearly(times[mask], first_year, last_year)
        split.append(Dataset(f"mining-{name}", X, y, Task.COUNT, {**provenance, "events": int(mask.sum())}))
    return split[0], split[1]
