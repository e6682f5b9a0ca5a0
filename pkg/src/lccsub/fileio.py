"""File formats: observation CSVs, coefficient files, YAML configs, reports.

CSV contract: UTF-8 with a header row; a `y` column in {0,1}; optional
`weight` (>0) and `offset` columns recognized by name; every other column
is a numeric feature.  Values are rendered with 17 significant digits so
parse -> serialize -> parse is lossless.  All writers go through a
write-temp-then-rename so partial files never appear at the target path.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import yaml

from .experiments import ExperimentConfig
from .glm import FitConfig, ModelParams, ObservationSet
from .populations import (
    DiscretePopulation,
    PopulationSpec,
    StepLogit,
    TwoClassGaussian,
)

__all__ = [
    "ConfigError",
    "CsvFormatError",
    "format_value",
    "atomic_write",
    "read_observations_csv",
    "write_observations_csv",
    "read_coefficients",
    "write_coefficients",
    "load_config_file",
    "parse_population",
    "parse_experiment",
    "stream_rows",
    "write_report",
]

LABEL_COLUMN = "y"
WEIGHT_COLUMN = "weight"
OFFSET_COLUMN = "offset"


class ConfigError(Exception):
    """A config or spec file failed validation; message names the field."""


class CsvFormatError(Exception):
    """A data CSV failed validation; message carries row/column context."""


def format_value(x: float) -> str:
    return f"{x:.17g}"


@contextmanager
def atomic_write(path: str, newline=None):
    """Write to a temp file in the target directory, rename on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline=newline) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# observation CSVs


@dataclass(frozen=True)
class CsvHeader:
    columns: list
    label_idx: int
    feature_idx: list
    weight_idx: int | None
    offset_idx: int | None

    @property
    def feature_names(self) -> list:
        return [self.columns[i] for i in self.feature_idx]


def _parse_header(columns) -> CsvHeader:
    if LABEL_COLUMN not in columns:
        raise CsvFormatError(f"missing required label column {LABEL_COLUMN!r}")
    seen = set()
    for c in columns:
        if c in seen:
            raise CsvFormatError(f"duplicate column {c!r}")
        seen.add(c)
    label_idx = columns.index(LABEL_COLUMN)
    weight_idx = columns.index(WEIGHT_COLUMN) if WEIGHT_COLUMN in columns else None
    offset_idx = columns.index(OFFSET_COLUMN) if OFFSET_COLUMN in columns else None
    special = {label_idx, weight_idx, offset_idx}
    feature_idx = [i for i in range(len(columns)) if i not in special]
    return CsvHeader(list(columns), label_idx, feature_idx, weight_idx, offset_idx)


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise CsvFormatError(
            f"row {row}, column {column!r}: not a number: {raw!r}"
        ) from None
    if not np.isfinite(value):
        raise CsvFormatError(f"row {row}, column {column!r}: non-finite value")
    return value


def stream_rows(path: str, chunk_size: int = 8192):
    """Yield (header, row_offset, features, labels, weights, offsets) chunks.

    weights/offsets are None when the columns are absent.  Row numbers in
    error messages are 1-based over data rows.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = _parse_header(next(reader))
        except StopIteration:
            raise CsvFormatError("empty file: no header row") from None
        row_number = 0
        chunk_start = 1
        raw_rows = []

        def emit(rows, start):
            feats = np.empty((len(rows), len(header.feature_idx)))
            labels = np.empty(len(rows))
            weights = np.empty(len(rows)) if header.weight_idx is not None else None
            offsets = np.empty(len(rows)) if header.offset_idx is not None else None
            for k, row in enumerate(rows):
                r = start + k
                if len(row) != len(header.columns):
                    raise CsvFormatError(
                        f"row {r}: expected {len(header.columns)} fields, got {len(row)}"
                    )
                label = _parse_cell(row[header.label_idx], r, LABEL_COLUMN)
                if label not in (0.0, 1.0):
                    raise CsvFormatError(f"row {r}: label {label!r} is not 0 or 1")
                labels[k] = label
                for j, idx in enumerate(header.feature_idx):
                    feats[k, j] = _parse_cell(row[idx], r, header.columns[idx])
                if weights is not None:
                    weights[k] = _parse_cell(row[header.weight_idx], r, WEIGHT_COLUMN)
                    if weights[k] <= 0:
                        raise CsvFormatError(f"row {r}: weight must be positive")
                if offsets is not None:
                    offsets[k] = _parse_cell(row[header.offset_idx], r, OFFSET_COLUMN)
            return header, start, feats, labels, weights, offsets

        for row in reader:
            raw_rows.append(row)
            row_number += 1
            if len(raw_rows) == chunk_size:
                yield emit(raw_rows, chunk_start)
                chunk_start = row_number + 1
                raw_rows = []
        if raw_rows:
            yield emit(raw_rows, chunk_start)
        elif row_number == 0:
            raise CsvFormatError("no data rows")


def read_observations_csv(path: str):
    """Load a whole CSV as (ObservationSet, feature_names)."""
    feats, labels, weights, offsets = [], [], [], []
    header = None
    for header, _, f, l, w, o in stream_rows(path):
        feats.append(f)
        labels.append(l)
        weights.append(w)
        offsets.append(o)
    obs = ObservationSet(
        np.vstack(feats),
        np.concatenate(labels),
        weights=None if weights[0] is None else np.concatenate(weights),
        offsets=None if offsets[0] is None else np.concatenate(offsets),
    )
    return obs, header.feature_names


def write_observations_csv(path: str, obs: ObservationSet, feature_names) -> None:
    with atomic_write(path, newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([LABEL_COLUMN, *feature_names, WEIGHT_COLUMN, OFFSET_COLUMN])
        for i in range(obs.n):
            writer.writerow(
                [
                    format_value(obs.labels[i]),
                    *(format_value(v) for v in obs.features[i]),
                    format_value(obs.weights[i]),
                    format_value(obs.offsets[i]),
                ]
            )


# ---------------------------------------------------------------------------
# coefficient files


def write_coefficients(path: str, params: ModelParams, feature_names=None) -> None:
    """One `name value` line per coefficient, intercept first, 17 digits."""
    names = feature_names or [f"x{i + 1}" for i in range(params.slopes.size)]
    if len(names) != params.slopes.size:
        raise ValueError("feature name count does not match slopes")
    with atomic_write(path) as handle:
        handle.write(f"intercept {format_value(params.intercept)}\n")
        for name, value in zip(names, params.slopes):
            handle.write(f"{name} {format_value(value)}\n")


def read_coefficients(path: str):
    """Read a coefficient file; returns (ModelParams, feature_names)."""
    names, values = [], []
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'name value'")
            try:
                values.append(float(parts[1]))
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: not a number: {parts[1]!r}"
                ) from None
            names.append(parts[0])
    if not names or names[0] != "intercept":
        raise ConfigError(f"{path}: first coefficient must be 'intercept'")
    return ModelParams(values[0], values[1:]), names[1:]


# ---------------------------------------------------------------------------
# config / spec files (YAML)


def _require_keys(mapping: dict, allowed: set, required: set, context: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown key {sorted(unknown)[0]!r}")
    missing = required - set(mapping)
    if missing:
        raise ConfigError(f"{context}: missing key {sorted(missing)[0]!r}")


def parse_population(mapping) -> PopulationSpec:
    if not isinstance(mapping, dict):
        raise ConfigError("population: expected a mapping")
    kind = mapping.get("kind")
    try:
        if kind == "discrete":
            _require_keys(mapping, {"kind", "cells"}, {"kind", "cells"}, "population")
            cells = mapping["cells"]
            if not isinstance(cells, list) or not cells:
                raise ConfigError("population.cells: expected a nonempty list")
            xs, masses, logodds = [], [], []
            for i, cell in enumerate(cells):
                _require_keys(
                    cell,
                    {"x", "mass", "logodds"},
                    {"x", "mass", "logodds"},
                    f"population.cells[{i}]",
                )
                xs.append(cell["x"])
                masses.append(cell["mass"])
                logodds.append(cell["logodds"])
            return DiscretePopulation(xs, masses, logodds)
        if kind == "gaussian2":
            keys = {"kind", "prior1", "mu0", "mu1", "sigma0", "sigma1"}
            _require_keys(mapping, keys, keys, "population")
            return TwoClassGaussian(
                prior1=mapping["prior1"],
                mu0=mapping["mu0"],
                mu1=mapping["mu1"],
                sigma0=mapping["sigma0"],
                sigma1=mapping["sigma1"],
            )
        if kind == "steplogit":
            keys = {"kind", "a", "b", "jump", "threshold"}
            _require_keys(mapping, keys, {"kind"}, "population")
            args = {k: mapping[k] for k in keys - {"kind"} if k in mapping}
            return StepLogit(**args)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"population: {exc}") from exc
    raise ConfigError(
        f"population.kind: expected discrete|gaussian2|steplogit, got {kind!r}"
    )


_EXPERIMENT_KEYS = {
    "n_full",
    "n_pilot",
    "n_lcc",
    "replications",
    "methods",
    "c",
    "retain_cases",
    "bootstrap_B",
    "master_seed",
    "recycle_pilot",
    "implicit_full",
    "max_failure_fraction",
    "grad_tol",
    "max_iter",
}


def parse_experiment(mapping, spec: PopulationSpec) -> ExperimentConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("experiment: expected a mapping")
    _require_keys(
        mapping,
        _EXPERIMENT_KEYS,
        {"n_full", "n_pilot", "n_lcc", "replications"},
        "experiment",
    )
    kwargs = dict(mapping)
    fit_kwargs = {}
    for key in ("grad_tol", "max_iter"):
        if key in kwargs:
            fit_kwargs[key] = kwargs.pop(key)
    if "methods" in kwargs:
        kwargs["methods"] = tuple(kwargs["methods"])
    try:
        return ExperimentConfig(spec=spec, fit=FitConfig(**fit_kwargs), **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"experiment: {exc}") from exc


def load_config_file(path: str) -> dict:
    """Parse a YAML config file into a raw mapping with diagnostics."""
    with open(path) as handle:
        try:
            raw = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a top-level mapping")
    return raw


# ---------------------------------------------------------------------------
# report output


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_report(path: str, rows, fmt: str, comments=(), json_extra=None) -> None:
    """Write tabular report rows as CSV (with # comment header) or JSON."""
    if fmt == "json":
        payload = {"rows": _jsonable(list(rows))}
        payload.update(_jsonable(json_extra or {}))
        with atomic_write(path) as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    rows = list(rows)
    with atomic_write(path, newline="") as handle:
        for comment in comments:
            handle.write(f"# {comment}\n")
        if not rows:
            return
        writer = csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    k: format_value(v) if isinstance(v, (float, np.floating)) else v
                    for k, v in row.items()
                }
            )
