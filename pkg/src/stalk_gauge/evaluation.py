"""Regression metrics, the ablation configuration matrix and its runner.

Metrics follow the usual definitions (residuals ``y - y_hat``): MAE, MAPE in
percent, RMSE and the coefficient of determination against the mean of the
actual values.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import MeasurementError
from .slicing import (PipelineConfig, _extract_slices, _finish, _prepare, reconstruct,
                      with_overrides)

PAIRS_HEADER = ("sample_id", "predicted_m", "actual_m")
ABLATION_HEADER = ("configuration", "mae_m", "mape_pct", "rmse_m", "r2")
RANKING_HEADER = ("component", "rank", "delta_mae_m")
THREADS_ENV = "STALK_GAUGE_THREADS"


@dataclass(frozen=True)
class SamplePair:
    sample_id: str
    predicted: float
    actual: float


@dataclass(frozen=True)
class EvaluationReport:
    n: int
    mae: float
    mape: float
    rmse: float
    r2: Optional[float]
    y_bar: float


def _arrays(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise ValueError("no sample pairs")
    y = np.array([p.actual for p in pairs], dtype=np.float64)
    y_hat = np.array([p.predicted for p in pairs], dtype=np.float64)
    return y, y_hat


def mae(pairs: Sequence[SamplePair]) -> float:
    y, y_hat = _arrays(pairs)
    return float(np.mean(np.abs(y - y_hat)))


def mape(pairs: Sequence[SamplePair]) -> float:
    y, y_hat = _arrays(pairs)
    if np.any(y == 0):
        raise ValueError("MAPE is undefined when an actual value is zero")
    return float(100.0 * np.mean(np.abs((y - y_hat) / y)))


def rmse(pairs: Sequence[SamplePair]) -> float:
    y, y_hat = _arrays(pairs)
    return float(math.sqrt(np.mean((y - y_hat) ** 2)))


def r_squared(pairs: Sequence[SamplePair]) -> float:
    y, y_hat = _arrays(pairs)
    if len(y) < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 is undefined when all actual values are equal")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def evaluate(pairs: Sequence[SamplePair]) -> EvaluationReport:
    """All four metrics; ``r2`` is ``None`` when its precondition fails."""
    try:
        r2 = r_squared(pairs)
    except ValueError:
        r2 = None
    y, _ = _arrays(pairs)
    return EvaluationReport(len(pairs), mae(pairs), mape(pairs), rmse(pairs), r2,
                            float(y.mean()))


# ---------------------------------------------------------------- CSV

def parse_pairs(text: str, source: str = "<pairs>") -> list:
    """Parse ``sample_id,predicted_m,actual_m`` rows; errors name the line."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != PAIRS_HEADER:
        raise ValueError(f"{source}:1: expected header {','.join(PAIRS_HEADER)}")
    pairs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ValueError(f"{source}:{lineno}: expected 3 fields, got {len(row)}")
        sid, pred, act = (c.strip() for c in row)
        try:
            p, a = float(pred), float(act)
        except ValueError:
            raise ValueError(f"{source}:{lineno}: non-numeric value") from None
        if not (math.isfinite(p) and math.isfinite(a)):
            raise ValueError(f"{source}:{lineno}: non-finite value")
        if a <= 0:
            raise ValueError(f"{source}:{lineno}: actual value must be > 0")
        pairs.append(SamplePair(sid, p, a))
    if not pairs:
        raise ValueError(f"{source}: no data rows")
    return pairs


def load_pairs(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_pairs(fh.read(), str(path))


def format_number(x: Optional[float]) -> str:
    """Six significant digits; empty for a missing value."""
    if x is None:
        return ""
    return f"{x:.6g}"


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report_row(report: EvaluationReport) -> list:
    return [format_number(report.mae), format_number(report.mape),
            format_number(report.rmse), format_number(report.r2)]


# ---------------------------------------------------------------- ablation

ABLATION_NAMES = ("baseline", "no_1std", "no_dbscan", "no_sor", "fit_mean", "fit_median")

_VARIANTS = {
    "baseline": {},
    "no_1std": {"aggregation": "plain_mean"},
    "no_dbscan": {"dbscan_enabled": False},
    "no_sor": {"sor_enabled": False},
    "fit_mean": {"circle_fit_method": "mean"},
    "fit_median": {"circle_fit_method": "median"},
}

# component -> configurations that remove or replace it
COMPONENTS = {
    "circle_fit": ("fit_mean", "fit_median"),
    "one_std_aggregation": ("no_1std",),
    "dbscan": ("no_dbscan",),
    "sor": ("no_sor",),
}


@dataclass(frozen=True)
class AblationConfigSet:
    names: tuple
    configs: tuple

    @classmethod
    def standard(cls, base: PipelineConfig = PipelineConfig(),
                 names: Sequence[str] = ABLATION_NAMES) -> "AblationConfigSet":
        names = tuple(names)
        unknown = [n for n in names if n not in _VARIANTS]
        if unknown:
            raise ValueError(f"unknown ablation configuration(s): {', '.join(unknown)}")
        if "baseline" not in names:
            raise ValueError("the configuration set must include 'baseline'")
        configs = tuple(with_overrides(base, **_VARIANTS[n]) for n in names)
        return cls(names, configs)

    def __getitem__(self, name: str) -> PipelineConfig:
        return self.configs[self.names.index(name)]

    def __iter__(self):
        return iter(zip(self.names, self.configs))


@dataclass
class AblationSample:
    sample_id: str
    depth: np.ndarray
    mask: np.ndarray
    intr: object
    actual: float
    rear: object = None


@dataclass
class AblationResult:
    names: tuple
    reports: dict
    predictions: dict
    failures: dict

    def mae_of(self, name: str) -> float:
        return self.reports[name].mae

    def deltas(self) -> dict:
        base = self.reports["baseline"].mae
        return {n: self.reports[n].mae - base for n in self.names if n != "baseline"}

    def ranking(self) -> list:
        """``(component, rank, delta_mae)`` sorted by delta descending.

        A component's impact is the largest MAE increase over the
        configurations that remove or replace it.
        """
        deltas = self.deltas()
        rows = []
        for comp, variants in COMPONENTS.items():
            present = [deltas[v] for v in variants if v in deltas]
            if present:
                rows.append((comp, max(present)))
        rows.sort(key=lambda r: -r[1])
        return [(c, i + 1, d) for i, (c, d) in enumerate(rows)]

    def table_rows(self) -> list:
        return [[n] + report_row(self.reports[n]) for n in self.names]

    def ranking_rows(self) -> list:
        return [[c, str(r), format_number(d)] for c, r, d in self.ranking()]

    def prediction_rows(self, ids: Sequence[str]) -> list:
        rows = []
        for i, sid in enumerate(ids):
            rows.append([sid] + [format_number(self.predictions[n][i]) for n in self.names])
        return rows


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_tasks))


def _sample_predictions(sample: AblationSample, configs: AblationConfigSet) -> dict:
    """Per configuration: predicted diameter or the failure message.

    Stages are shared between configurations whose settings agree up to that
    stage, which gives the same numbers as independent measurements.
    """
    out = {}
    try:
        cloud = reconstruct(sample.depth, sample.mask, sample.intr, rear=sample.rear)
    except MeasurementError as exc:
        return {n: exc for n in configs.names}
    prepared, extracted = {}, {}
    for name, cfg in configs:
        try:
            pkey = (cfg.sor_enabled, cfg.sor)
            if pkey not in prepared:
                try:
                    prepared[pkey] = _prepare(cloud, cfg)
                except MeasurementError as exc:
                    prepared[pkey] = exc
            if isinstance(prepared[pkey], Exception):
                raise prepared[pkey]
            filtered, axis = prepared[pkey]
            ekey = pkey + (cfg.slicing, cfg.dbscan_enabled, cfg.dbscan)
            if ekey not in extracted:
                extracted[ekey] = _extract_slices(filtered, axis, cfg.slicing, cfg.dbscan,
                                                  cfg.dbscan_enabled)
            est = _finish(extracted[ekey], cfg.circle_fit, cfg.aggregation,
                          cfg.slicing.min_slice_points)
            out[name] = est.predicted_diameter
        except MeasurementError as exc:
            out[name] = exc
    return out


def run_ablation(dataset: Sequence[AblationSample],
                 configs: Optional[AblationConfigSet] = None,
                 progress: Optional[Callable[[int, int], None]] = None) -> AblationResult:
    """Measure every sample under every configuration and evaluate each one.

    Samples whose measurement fails under a configuration are excluded from
    that configuration's metrics, with a warning giving the count.
    """
    if len(dataset) < 2:
        raise ValueError("ablation needs at least 2 samples")
    configs = configs or AblationConfigSet.standard()
    workers = _worker_count(len(dataset))
    if workers == 1:
        per_sample = []
        for i, s in enumerate(dataset):
            per_sample.append(_sample_predictions(s, configs))
            if progress:
                progress(i + 1, len(dataset))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_sample = list(pool.map(lambda s: _sample_predictions(s, configs), dataset))

    reports, predictions, failures = {}, {}, {}
    for name in configs.names:
        preds, fails, pairs = [], [], []
        for sample, result in zip(dataset, per_sample):
            value = result[name]
            if isinstance(value, Exception):
                preds.append(None)
                fails.append((sample.sample_id, str(value)))
            else:
                preds.append(value)
                pairs.append(SamplePair(sample.sample_id, value, sample.actual))
        if fails:
            warnings.warn(f"{name}: {len(fails)} sample(s) failed and were excluded",
                          RuntimeWarning, stacklevel=2)
        if not pairs:
            raise MeasurementError(f"{name}: every sample failed")
        reports[name] = evaluate(pairs)
        predictions[name] = preds
        failures[name] = fails
    return AblationResult(configs.names, reports, predictions, failures)
