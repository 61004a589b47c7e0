"""Same/All cross-validation over taxon-wise prediction tasks.

Each taxon becomes one regression task: its (log) abundance is predicted
from all other taxa. For every habitat and fold the test set is that
habitat's fold; the "same" scenario trains on the habitat's remaining
folds, the "all" scenario trains on every habitat's remaining folds.
Results are one MSE per (algorithm, taxon, habitat, fold) cell, compared
across algorithms by paired t-tests on matched cells.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import solver
from ._seeds import derive_seed, rows_digest
from .data_model import PreparedDataset
from .errors import ConfigError, DataError, NumericalError

ALGORITHMS = ("fused_all", "lasso_same", "lasso_all", "featureless_same", "featureless_all")

RECORD_HEADER = "dataset,algorithm,scenario,taxon,habitat,fold,mse"
COMPARISON_HEADER = "dataset,algo_a,algo_b,mean_diff,ci_low,ci_high,p_value,log10_p,n_pairs"


@dataclass(frozen=True)
class GroupedDesign:
    """One taxon-wise regression task over the full sample set."""

    response: np.ndarray
    predictors: np.ndarray
    group_of_row: np.ndarray
    target_taxon: str
    predictor_names: tuple[str, ...]

    def __post_init__(self):
        if self.predictors.shape != (self.response.shape[0], len(self.predictor_names)):
            raise DataError("predictor matrix does not match response/names")
        if self.target_taxon in self.predictor_names:
            raise DataError(f"target taxon {self.target_taxon!r} appears among predictors")

    def subset(self, rows) -> "GroupedDesign":
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            response=self.response[rows],
            predictors=self.predictors[rows],
            group_of_row=self.group_of_row[rows],
        )


@dataclass(frozen=True)
class SplitPlan:
    """Train/test row sets for one (scenario, habitat, fold) cell."""

    scenario: str
    habitat: int
    fold: int
    train_rows: np.ndarray
    test_rows: np.ndarray


@dataclass(frozen=True)
class CvRecord:
    dataset: str
    algorithm: str
    scenario: str
    taxon: str
    habitat: int
    fold: int
    mse: float


@dataclass(frozen=True)
class FailedCell:
    dataset: str
    algorithm: str
    scenario: str
    taxon: str
    habitat: int
    fold: int
    message: str


@dataclass(frozen=True)
class ComparisonSummary:
    algorithm_a: str
    algorithm_b: str
    mean_diff: float
    ci_low: float
    ci_high: float
    p_value: float
    n_pairs: int


@dataclass(frozen=True)
class SacResult:
    records: tuple[CvRecord, ...]
    failures: tuple[FailedCell, ...]


def mse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.size == 0:
        raise DataError(f"mse needs equal-length non-empty vectors, got {predicted.shape} vs {actual.shape}")
    return float(np.mean((predicted - actual) ** 2))


def build_taxon_task(dataset: PreparedDataset, taxon: str) -> GroupedDesign:
    """Response = the taxon's column; predictors = all other columns in order."""
    table = dataset.table
    if taxon not in table.taxa_names:
        raise DataError(f"unknown taxon {taxon!r}")
    if table.n_taxa < 2:
        raise DataError("need at least two taxa to form a prediction task")
    d = table.taxa_names.index(taxon)
    others = [j for j in range(table.n_taxa) if j != d]
    return GroupedDesign(
        response=table.counts[:, d].copy(),
        predictors=table.counts[:, others].copy(),
        group_of_row=table.groups_array(),
        target_taxon=taxon,
        predictor_names=tuple(table.taxa_names[j] for j in others),
    )


def enumerate_splits(dataset: PreparedDataset, scenario: str) -> list[SplitPlan]:
    """All S x K split plans for one scenario, ordered by (habitat, fold)."""
    if scenario not in ("same", "all"):
        raise ConfigError(f"scenario must be 'same' or 'all', got {scenario!r}")
    groups = dataset.table.groups_array()
    folds = dataset.folds_array()
    plans = []
    for habitat in range(1, dataset.table.n_groups + 1):
        for fold in range(1, dataset.n_folds + 1):
            test = np.flatnonzero((groups == habitat) & (folds == fold))
            if scenario == "same":
                train = np.flatnonzero((groups == habitat) & (folds != fold))
            else:
                train = np.flatnonzero(folds != fold)
            if test.size == 0:
                raise DataError(f"empty test set for habitat {habitat}, fold {fold}")
            plans.append(SplitPlan(scenario=scenario, habitat=habitat, fold=fold,
                                   train_rows=train, test_rows=test))
    return plans


def aggregate(records, by=("algorithm", "scenario")) -> list[dict]:
    """Arithmetic mean of mse within each combination of the given keys."""
    records = list(records)
    if not records:
        raise DataError("no records to aggregate")
    by = tuple(by)
    cells: dict[tuple, list[float]] = {}
    for r in records:
        key = tuple(getattr(r, k) for k in by)
        cells.setdefault(key, []).append(r.mse)
    rows = []
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        values = cells[key]
        row = dict(zip(by, key))
        row["mean_mse"] = float(np.mean(values))
        row["n"] = len(values)
        rows.append(row)
    return rows


def paired_compare(records, algorithm_a: str, algorithm_b: str,
                   pairing=("taxon", "habitat", "fold")) -> ComparisonSummary:
    """Paired two-sided t-test of mse_a - mse_b over matched cells.

    Cells missing for either algorithm are dropped pairwise. A negative
    mean difference means algorithm_a predicts better. The zero-variance
    case is defined as p = 1 when all differences are zero and p = 0 for a
    constant nonzero difference.
    """
    cells_a: dict[tuple, float] = {}
    cells_b: dict[tuple, float] = {}
    for r in records:
        key = tuple(getattr(r, k) for k in pairing)
        if r.algorithm == algorithm_a:
            cells_a[key] = r.mse
        if r.algorithm == algorithm_b:
            cells_b[key] = r.mse
    shared = sorted(set(cells_a) & set(cells_b), key=lambda k: tuple(str(v) for v in k))
    if len(shared) < 2:
        raise DataError(f"need at least 2 paired cells, found {len(shared)}")
    d = np.array([cells_a[k] - cells_b[k] for k in shared])
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        p = 1.0 if mean == 0.0 else 0.0
        return ComparisonSummary(algorithm_a, algorithm_b, mean, mean, mean, p, n)
    se = sd / math.sqrt(n)
    t = mean / se
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    half = float(stats.t.ppf(0.975, n - 1)) * se
    return ComparisonSummary(algorithm_a, algorithm_b, mean, mean - half, mean + half, p, n)


# ---------------------------------------------------------------------------
# the SAC run itself
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SacConfig:
    """Tuning knobs for one SAC run; grids are data-anchored per training set."""

    inner_folds: int = 5
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    n_gamma: int = 10
    tol: float = 1e-6
    max_iter: int = 100_000


def _scenario_of(algorithm: str) -> str:
    if algorithm.endswith("_same"):
        return "same"
    if algorithm.endswith("_all"):
        return "all"
    raise ConfigError(f"unknown algorithm label {algorithm!r}")


def _lambda_grid_lasso(X, y, cfg: SacConfig) -> np.ndarray:
    return solver.lambda_grid_from(solver.lasso_lambda_max(X, y),
                                   num=cfg.n_lambda, min_ratio=cfg.lambda_min_ratio)


def _taxon_records(dataset, taxon, algorithms, plans_same, plans_all, seed, cfg,
                   dataset_label):
    """All records for one taxon; failures become missing cells."""
    design = build_taxon_task(dataset, taxon)
    records: list[CvRecord] = []
    failures: list[FailedCell] = []

    def record(algorithm, scenario, habitat, fold, value):
        records.append(CvRecord(dataset_label, algorithm, scenario, taxon,
                                habitat, fold, value))

    def fail(algorithm, scenario, habitat, fold, err):
        failures.append(FailedCell(dataset_label, algorithm, scenario, taxon,
                                   habitat, fold, f"{type(err).__name__}: {err}"))

    by_fold_all = {}
    for plan in plans_all:
        by_fold_all.setdefault(plan.fold, []).append(plan)

    for algorithm in algorithms:
        scenario = _scenario_of(algorithm)
        if scenario == "same":
            for plan in plans_same:
                y_tr = design.response[plan.train_rows]
                y_te = design.response[plan.test_rows]
                try:
                    if algorithm == "featureless_same":
                        fit = solver.fit_featureless(y_tr)
                        pred = fit.predict(design.predictors[plan.test_rows])
                    elif algorithm == "lasso_same":
                        X_tr = design.predictors[plan.train_rows]
                        inner_seed = derive_seed(seed, "inner", taxon,
                                                 rows_digest(plan.train_rows))
                        fit = solver.cv_lasso(X_tr, y_tr,
                                              _lambda_grid_lasso(X_tr, y_tr, cfg),
                                              cfg.inner_folds, inner_seed,
                                              tol=cfg.tol, max_iter=cfg.max_iter)
                        pred = fit.predict(design.predictors[plan.test_rows])
                    else:
                        raise ConfigError(f"unknown algorithm label {algorithm!r}")
                    record(algorithm, scenario, plan.habitat, plan.fold, mse(pred, y_te))
                except (NumericalError, np.linalg.LinAlgError) as err:
                    fail(algorithm, scenario, plan.habitat, plan.fold, err)
        else:
            for fold, plans in sorted(by_fold_all.items()):
                train_rows = plans[0].train_rows
                y_tr = design.response[train_rows]
                X_tr = design.predictors[train_rows]
                inner_seed = derive_seed(seed, "inner", taxon, rows_digest(train_rows))
                try:
                    if algorithm == "featureless_all":
                        fit = solver.fit_featureless(y_tr)
                    elif algorithm == "lasso_all":
                        fit = solver.cv_lasso(X_tr, y_tr,
                                              _lambda_grid_lasso(X_tr, y_tr, cfg),
                                              cfg.inner_folds, inner_seed,
                                              tol=cfg.tol, max_iter=cfg.max_iter)
                    elif algorithm == "fused_all":
                        sub = design.subset(train_rows)
                        lam_max = solver.fused_lambda_max(sub)
                        fit = solver.cv_fused(
                            sub,
                            solver.lambda_grid_from(lam_max, num=cfg.n_lambda,
                                                    min_ratio=cfg.lambda_min_ratio),
                            solver.gamma_grid_from(lam_max, num=cfg.n_gamma),
                            inner_folds=cfg.inner_folds, seed=inner_seed,
                            tol=cfg.tol, max_iter=cfg.max_iter)
                    else:
                        raise ConfigError(f"unknown algorithm label {algorithm!r}")
                except (NumericalError, np.linalg.LinAlgError) as err:
                    for plan in plans:
                        fail(algorithm, scenario, plan.habitat, plan.fold, err)
                    continue
                for plan in plans:
                    y_te = design.response[plan.test_rows]
                    X_te = design.predictors[plan.test_rows]
                    try:
                        if algorithm == "fused_all":
                            pred = fit.predict(X_te, group=plan.habitat)
                        else:
                            pred = fit.predict(X_te)
                        record(algorithm, scenario, plan.habitat, plan.fold, mse(pred, y_te))
                    except (NumericalError, np.linalg.LinAlgError) as err:
                        fail(algorithm, scenario, plan.habitat, plan.fold, err)
    return records, failures


def run_sac(dataset: PreparedDataset, algorithms, n_folds=None, seed=0, *,
            dataset_label="dataset", config: SacConfig | None = None,
            n_jobs: int = 1) -> SacResult:
    """Score every (algorithm, taxon, habitat, fold) cell of the dataset.

    ``n_folds`` must match the dataset's fixed fold labels when given.
    Individual fit failures are recorded as missing cells with a
    diagnostic instead of aborting the run. Records come back in canonical
    (dataset, algorithm, taxon, habitat, fold) order regardless of how the
    per-taxon work was scheduled.
    """
    algorithms = tuple(algorithms)
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise ConfigError(f"unknown algorithms {unknown}; valid labels are {ALGORITHMS}")
    if n_folds is not None and n_folds != dataset.n_folds:
        raise ConfigError(
            f"requested {n_folds} folds but the dataset carries fixed labels for {dataset.n_folds}"
        )
    cfg = config or SacConfig()
    plans_same = enumerate_splits(dataset, "same")
    plans_all = enumerate_splits(dataset, "all")
    taxa = dataset.table.taxa_names

    records: list[CvRecord] = []
    failures: list[FailedCell] = []
    if n_jobs > 1 and len(taxa) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_taxon_records, dataset, taxon, algorithms,
                                   plans_same, plans_all, seed, cfg, dataset_label)
                       for taxon in taxa]
            for fut in futures:
                recs, fails = fut.result()
                records.extend(recs)
                failures.extend(fails)
    else:
        for taxon in taxa:
            recs, fails = _taxon_records(dataset, taxon, algorithms, plans_same,
                                         plans_all, seed, cfg, dataset_label)
            records.extend(recs)
            failures.extend(fails)

    key = lambda r: (r.dataset, r.algorithm, r.taxon, r.habitat, r.fold)
    return SacResult(records=tuple(sorted(records, key=key)),
                     failures=tuple(sorted(failures, key=key)))


# ---------------------------------------------------------------------------
# delimited output
# ---------------------------------------------------------------------------

def write_records(records, path) -> None:
    lines = [RECORD_HEADER]
    for r in records:
        lines.append(f"{r.dataset},{r.algorithm},{r.scenario},{r.taxon},"
                     f"{r.habitat},{r.fold},{repr(float(r.mse))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path) -> list[CvRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]) != RECORD_HEADER:
        raise DataError(f"{path}: expected header {RECORD_HEADER!r}")
    return [CvRecord(r[0], r[1], r[2], r[3], int(r[4]), int(r[5]), float(r[6]))
            for r in rows[1:]]


def comparison_line(dataset_label: str, cmp: ComparisonSummary) -> str:
    log10_p = math.log10(cmp.p_value) if cmp.p_value > 0 else float("-inf")
    return (f"{dataset_label},{cmp.algorithm_a},{cmp.algorithm_b},"
            f"{repr(float(cmp.mean_diff))},{repr(float(cmp.ci_low))},"
            f"{repr(float(cmp.ci_high))},{repr(float(cmp.p_value))},"
            f"{repr(float(log10_p))},{cmp.n_pairs}")


def write_comparisons(entries, path) -> None:
    """Write (dataset_label, ComparisonSummary) pairs as delimited text."""
    lines = [COMPARISON_HEADER]
    for dataset_label, cmp in entries:
        lines.append(comparison_line(dataset_label, cmp))
    Path(path).write_text("\n".join(lines) + "\n")
