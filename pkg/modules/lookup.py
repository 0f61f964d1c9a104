# lookup.py
# Precomputed sigma*_QP(mu, sigma, y) tables over a grid of cavity parameters,
# bilinear lookup with an EP fallback outside the grid, and the on-disk format.
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from multiprocessing import Pool

import numpy as np
from tqdm import tqdm

from modules.errors import NumericalError, TableError, ValidationError
from modules.likelihoods import CavityParams, get_likelihood, likelihood_from_table_id
from modules.projection import Method, project_tilted

logger = logging.getLogger(__name__)

MAGIC = b"QPLT"
FORMAT_VERSION = 1
MAX_FAILURE_RATE = 1e-6
_HEADER = struct.Struct("<4sHBH")
_SLICE_Y = struct.Struct("<i")
_AXIS = struct.Struct("<ddI")
_DIGEST_SIZE = hashlib.sha256().digest_size


class LookupSource(str, Enum):
    TABLE = "table"
    FALLBACK_EP = "fallback_ep"
    DIRECT = "direct"


@dataclass(frozen=True)
class GridAxis:
    """Evenly spaced axis; for a log10 axis lo and hi are log10 values."""

    lo: float
    hi: float
    count: int
    log10: bool = False

    def __post_init__(self):
        if self.count < 2 or not self.lo < self.hi:
            raise ValidationError(f"axis must be strictly increasing with at least 2 nodes, got {self}")

    @property
    def step(self):
        return (self.hi - self.lo) / (self.count - 1)

    def nodes(self):
        """Node values in natural units (10**node for a log10 axis)."""
        raw = np.linspace(self.lo, self.hi, self.count)
        return 10.0 ** raw if self.log10 else raw

    def locate(self, value):
        """Cell index and fractional offset of value, or None when it is off the axis."""
        coord = math.log10(value) if self.log10 else value
        position = (coord - self.lo) / (self.hi - self.lo) * (self.count - 1)
        nearest = round(position)
        if abs(position - nearest) < 1e-9:
            position = float(nearest)
        if position < 0 or position > self.count - 1:
            return None
        index = min(int(position), self.count - 2)
        return index, position - index


@dataclass(frozen=True)
class GridSpec:
    mu: GridAxis
    log_sigma: GridAxis

    @classmethod
    def default(cls):
        return cls(GridAxis(-10.0, 10.0, 20001), GridAxis(-1.0, 1.0, 2001, log10=True))

    @classmethod
    def toy(cls, count=5):
        return cls(GridAxis(-2.0, 2.0, count), GridAxis(-1.0, 1.0, count, log10=True))

    @property
    def shape(self):
        return self.mu.count, self.log_sigma.count


@dataclass
class SigmaLookupTable:
    likelihood: str
    grid: GridSpec
    slices: dict
    version: int = FORMAT_VERSION
    checksum: str = field(default="")

    def __post_init__(self):
        for y, values in self.slices.items():
            if values.shape != self.grid.shape:
                raise TableError(f"slice y={y} has shape {values.shape}, expected {self.grid.shape}")
        if not self.checksum:
            self.checksum = hashlib.sha256(_payload(self)).hexdigest()

    @property
    def ys(self):
        return sorted(self.slices)

    def failures(self):
        return int(sum(np.isnan(values).sum() for values in self.slices.values()))


def direct_sigma(likelihood, cavity, y, events=None):
    projected, _ = project_tilted(likelihood, cavity, y, Method.QP, events)
    return projected.std


def _compute_row(task):
    likelihood_name, y, mu, sigmas = task
    likelihood = get_likelihood(likelihood_name)
    row = np.empty(len(sigmas))
    for j, sigma in enumerate(sigmas):
        try:
            row[j] = direct_sigma(likelihood, CavityParams(mu, sigma * sigma), y)
        except (NumericalError, ArithmeticError, ValueError) as exc:
            logger.debug("node (mu=%g, sigma=%g, y=%d) failed: %s", mu, sigma, y, exc)
            row[j] = np.nan
    return row


def precompute_table(likelihood, y_set, grid, processes=1, progress=True):
    """Fill every (y, mu, sigma) node with the direct W2 projection sigma*.

    Rows are dispatched in a fixed order and collected in that order, so the
    table does not depend on the number of worker processes.
    """
    y_set = [int(y) for y in y_set]
    mus = np.linspace(grid.mu.lo, grid.mu.hi, grid.mu.count)
    sigmas = grid.log_sigma.nodes()
    tasks = [(likelihood.name, y, float(mu), sigmas) for y in y_set for mu in mus]

    rows = []
    bar = tqdm(total=len(tasks), desc=f"{likelihood.name} table", unit="row", disable=not progress)
    if processes > 1:
        with Pool(processes) as pool:
            for row in pool.imap(_compute_row, tasks, chunksize=max(1, len(tasks) // (processes * 16))):
                rows.append(row)
                bar.update()
    else:
        for task in tasks:
            rows.append(_compute_row(task))
            bar.update()
    bar.close()

    slices = {}
    for position, y in enumerate(y_set):
        slices[y] = np.vstack(rows[position * grid.mu.count:(position + 1) * grid.mu.count])
    table = SigmaLookupTable(likelihood.name, grid, slices)

    failures = table.failures()
    total = len(y_set) * grid.mu.count * grid.log_sigma.count
    if failures:
        logger.warning("%d of %d table nodes failed and hold NaN", failures, total)
    if failures / total >= MAX_FAILURE_RATE:
        raise TableError(f"{failures} of {total} nodes failed, above the {MAX_FAILURE_RATE:g} budget")
    return table


def interp_sigma(table, cavity, y, likelihood=None, events=None):
    """Bilinear interpolation of sigma* in (mu, log10 sigma).

    Returns (sigma, LookupSource). Off-grid cavities use the EP standard
    deviation; unknown y or a NaN corner use direct projection.
    """
    likelihood = likelihood or get_likelihood(table.likelihood)
    values = table.slices.get(int(y))
    if values is None:
        return direct_sigma(likelihood, cavity, y, events), LookupSource.DIRECT

    mu_cell = table.grid.mu.locate(cavity.mu)
    sigma_cell = table.grid.log_sigma.locate(cavity.std)
    if mu_cell is None or sigma_cell is None:
        tilted = likelihood.tilted_moments(cavity, y)
        return tilted.std, LookupSource.FALLBACK_EP

    (i, a), (j, b) = mu_cell, sigma_cell
    corners = values[i:i + 2, j:j + 2]
    if np.isnan(corners).any():
        return direct_sigma(likelihood, cavity, y, events), LookupSource.DIRECT
    sigma = (
        (1 - a) * (1 - b) * corners[0, 0]
        + a * (1 - b) * corners[1, 0]
        + (1 - a) * b * corners[0, 1]
        + a * b * corners[1, 1]
    )
    return float(sigma), LookupSource.TABLE


def _payload(table):
    likelihood = get_likelihood(table.likelihood)
    parts = [_HEADER.pack(MAGIC, table.version, likelihood.table_id, len(table.slices))]
    for y in table.ys:
        parts.append(_SLICE_Y.pack(y))
        parts.append(_AXIS.pack(table.grid.mu.lo, table.grid.mu.hi, table.grid.mu.count))
        parts.append(_AXIS.pack(table.grid.log_sigma.lo, table.grid.log_sigma.hi, table.grid.log_sigma.count))
        parts.append(np.ascontiguousarray(table.slices[y], dtype="<f8").tobytes())
    return b"".join(parts)


def save_table(table, path):
    payload = _payload(table)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as handle:
        handle.write(payload)
        handle.write(digest)
    return digest.hex()


def _take(buffer, offset, size, what):
    if offset + size > len(buffer):
        raise TableError(f"table file truncated while reading {what}")
    return buffer[offset:offset + size], offset + size


def load_table(path):
    with open(path, "rb") as handle:
        data = handle.read()
    if len(data) < _HEADER.size + _DIGEST_SIZE:
        raise TableError("table file truncated")

    payload, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    raw, offset = _take(payload, 0, _HEADER.size, "header")
    magic, version, table_id, n_slices = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise TableError(f"not a sigma lookup table (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise TableError(f"table format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(payload).digest() != digest:
        raise TableError("table checksum mismatch")
    likelihood = likelihood_from_table_id(table_id)

    grid = None
    slices = {}
    for _ in range(n_slices):
        raw, offset = _take(payload, offset, _SLICE_Y.size, "slice header")
        (y,) = _SLICE_Y.unpack(raw)
        raw, offset = _take(payload, offset, _AXIS.size, "mu axis")
        mu_axis = GridAxis(*_AXIS.unpack(raw))
        raw, offset = _take(payload, offset, _AXIS.size, "sigma axis")
        sigma_axis = GridAxis(*_AXIS.unpack(raw), log10=True)
        slice_grid = GridSpec(mu_axis, sigma_axis)
        if grid is not None and slice_grid != grid:
            raise TableError("slices use different grids")
        grid = slice_grid
        raw, offset = _take(payload, offset, 8 * mu_axis.count * sigma_axis.count, "values")
        slices[y] = np.frombuffer(raw, dtype="<f8").reshape(grid.shape)
    if offset != len(payload):
        raise TableError("trailing bytes after the last slice")
    if grid is None:
        raise TableError("table has no slices")
    return SigmaLookupTable(likelihood.name, grid, slices, version, digest.hex())


def spot_check(table, likelihood, n=100, seed=0):
    """Largest |interp - direct| over n random in-range cavities."""
    rng = np.random.default_rng(seed)
    grid = table.grid
    ys = table.ys
    worst = 0.0
    for _ in range(n):
        mu = rng.uniform(grid.mu.lo, grid.mu.hi)
        sigma = 10.0 ** rng.uniform(grid.log_sigma.lo, grid.log_sigma.hi)
        y = ys[rng.integers(len(ys))]
        cavity = CavityParams(mu, sigma * sigma)
        sigma_table, _ = interp_sigma(table, cavity, y, likelihood)
        worst = max(worst, abs(sigma_table - direct_sigma(likelihood, cavity, y)))
    return worst
