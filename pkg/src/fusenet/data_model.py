"""Grouped abundance tables: loading, validation, preprocessing, folds.

The carrier type is an immutable sample-by-taxon matrix with one habitat
(group) label per sample. Preprocessing is a fixed sequence of pure
transformations: log10(x+1) transform, group-size balancing, prevalence
filtering, and within-group fold assignment. Every step is deterministic
given its seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ._seeds import derive_seed
from .errors import DataError

_DELIMITERS = {".csv": ",", ".tsv": "\t"}


def _delimiter_for(path: Path) -> str:
    try:
        return _DELIMITERS[path.suffix.lower()]
    except KeyError:
        raise DataError(
            f"cannot infer delimiter for {path.name!r}: expected a .csv or .tsv extension"
        ) from None


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(x))


@dataclass(frozen=True)
class AbundanceTable:
    """Sample x taxon abundance matrix with habitat labels.

    ``counts`` holds raw counts when ``transformed`` is False and
    log10(x+1) values otherwise; both are non-negative. Group indices are
    contiguous 1..S, assigned in lexicographic order of group name.
    """

    taxa_names: tuple[str, ...]
    sample_ids: tuple[str, ...]
    counts: np.ndarray
    group_of: Mapping[str, int]
    group_names: tuple[str, ...]
    transformed: bool = False

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 2 or counts.shape != (len(self.sample_ids), len(self.taxa_names)):
            raise DataError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.taxa_names)} taxa"
            )
        if len(set(self.taxa_names)) != len(self.taxa_names):
            raise DataError("duplicate taxa names")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DataError("duplicate sample ids")
        if not np.all(np.isfinite(counts)):
            raise DataError("non-finite abundance values")
        if np.any(counts < 0):
            i, j = map(int, np.argwhere(counts < 0)[0])
            raise DataError(
                f"negative abundance for sample {self.sample_ids[i]!r}, "
                f"taxon {self.taxa_names[j]!r}"
            )
        missing = [s for s in self.sample_ids if s not in self.group_of]
        if missing:
            raise DataError(f"sample {missing[0]!r} has no group label")
        groups = sorted({self.group_of[s] for s in self.sample_ids})
        if groups != list(range(1, len(self.group_names) + 1)):
            raise DataError(
                f"group indices {groups} are not contiguous 1..{len(self.group_names)}"
            )
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "taxa_names", tuple(self.taxa_names))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "group_names", tuple(self.group_names))
        object.__setattr__(self, "group_of", dict(self.group_of))

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_taxa(self) -> int:
        return len(self.taxa_names)

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def groups_array(self) -> np.ndarray:
        """Habitat index of each row, aligned with ``counts``."""
        return np.array([self.group_of[s] for s in self.sample_ids], dtype=int)

    def rows_in_group(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.groups_array() == group)

    def group_sizes(self) -> dict[int, int]:
        arr = self.groups_array()
        return {s: int(np.sum(arr == s)) for s in range(1, self.n_groups + 1)}


@dataclass(frozen=True)
class PreparedDataset:
    """Analysis-ready table with a fixed within-habitat fold label per sample."""

    table: AbundanceTable
    fold_of: Mapping[str, int]
    n_folds: int
    seed: int

    def __post_init__(self):
        sizes = set(self.table.group_sizes().values())
        if len(sizes) > 1:
            raise DataError(f"groups are unbalanced (sizes {sorted(sizes)}); balance first")
        for s in self.table.sample_ids:
            k = self.fold_of.get(s)
            if k is None or not (1 <= k <= self.n_folds):
                raise DataError(f"sample {s!r} has no fold label in 1..{self.n_folds}")
        object.__setattr__(self, "fold_of", dict(self.fold_of))

    def folds_array(self) -> np.ndarray:
        return np.array([self.fold_of[s] for s in self.table.sample_ids], dtype=int)


def load_table(path, metadata_path) -> AbundanceTable:
    """Load a delimited abundance matrix plus its sample->group metadata.

    First row of the matrix holds taxa names (after the sample-id column),
    each following row is one sample. Metadata is a two-column file with
    header ``sample_id,group``. Group names are mapped to contiguous
    indices in lexicographic order.
    """
    path, metadata_path = Path(path), Path(metadata_path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=_delimiter_for(path)))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path.name}: empty or header-less abundance file")
    taxa = [t.strip() for t in rows[0][1:]]
    sample_ids: list[str] = []
    values = np.empty((len(rows) - 1, len(taxa)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(taxa) + 1:
            raise DataError(f"{path.name}: row {i + 2} has {len(row)} fields, expected {len(taxa) + 1}")
        sid = row[0].strip()
        sample_ids.append(sid)
        for j, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"count for sample {sid!r}, taxon {taxa[j]!r} is not numeric: {cell!r}"
                ) from None
            if v < 0:
                raise DataError(f"count for sample {sid!r}, taxon {taxa[j]!r} is negative: {cell!r}")
            values[i, j] = v

    with open(metadata_path, newline="") as fh:
        meta_rows = list(csv.reader(fh, delimiter=_delimiter_for(metadata_path)))
    if not meta_rows or [c.strip() for c in meta_rows[0][:2]] != ["sample_id", "group"]:
        raise DataError(f"{metadata_path.name}: expected header 'sample_id,group'")
    group_name_of = {r[0].strip(): r[1].strip() for r in meta_rows[1:] if len(r) >= 2}
    for sid in sample_ids:
        if sid not in group_name_of:
            raise DataError(f"sample {sid!r} missing from metadata {metadata_path.name}")
    names = tuple(sorted({group_name_of[s] for s in sample_ids}))
    index_of = {name: i + 1 for i, name in enumerate(names)}
    group_of = {s: index_of[group_name_of[s]] for s in sample_ids}
    return AbundanceTable(
        taxa_names=tuple(taxa),
        sample_ids=tuple(sample_ids),
        counts=values,
        group_of=group_of,
        group_names=names,
        transformed=False,
    )


def log_transform(table: AbundanceTable) -> AbundanceTable:
    """Replace every entry x by log10(x + 1); zeros stay exactly zero."""
    if table.transformed:
        raise DataError("table is already log-transformed")
    return AbundanceTable(
        taxa_names=table.taxa_names,
        sample_ids=table.sample_ids,
        counts=np.log10(table.counts + 1.0),
        group_of=table.group_of,
        group_names=table.group_names,
        transformed=True,
    )


def balance_groups(table: AbundanceTable, seed: int) -> AbundanceTable:
    """Subsample every group to a common size without replacement.

    The target is min(floor(mean group size), smallest group size), so the
    reduction is always achievable without duplicating samples. Sample
    order within each group is preserved.
    """
    sizes = table.group_sizes()
    if any(v == 0 for v in sizes.values()):
        raise DataError("every group must be non-empty")
    target = min(int(math.floor(sum(sizes.values()) / len(sizes))), min(sizes.values()))
    rng = np.random.default_rng(seed)
    groups = table.groups_array()
    keep = np.zeros(table.n_samples, dtype=bool)
    for s in range(1, table.n_groups + 1):
        rows = np.flatnonzero(groups == s)
        if len(rows) > target:
            chosen = rng.choice(len(rows), size=target, replace=False)
            rows = rows[np.sort(chosen)]
        keep[rows] = True
    kept = np.flatnonzero(keep)
    ids = tuple(table.sample_ids[i] for i in kept)
    return AbundanceTable(
        taxa_names=table.taxa_names,
        sample_ids=ids,
        counts=table.counts[kept],
        group_of={s: table.group_of[s] for s in ids},
        group_names=table.group_names,
        transformed=table.transformed,
    )


def filter_low_prevalence(table: AbundanceTable, min_prevalence: float) -> AbundanceTable:
    """Keep taxa observed (value > 0) in at least ``min_prevalence`` of samples.

    The threshold is inclusive. Column order is preserved.
    """
    if not 0.0 <= min_prevalence <= 1.0:
        raise DataError(f"min_prevalence must be in [0, 1], got {min_prevalence}")
    if table.n_samples == 0 or table.n_taxa == 0:
        raise DataError("cannot filter an empty table")
    prevalence = np.mean(table.counts > 0, axis=0)
    keep = prevalence >= min_prevalence
    if not np.any(keep):
        raise DataError(
            f"all {table.n_taxa} taxa fall below prevalence {min_prevalence}; lower the threshold"
        )
    return AbundanceTable(
        taxa_names=tuple(t for t, k in zip(table.taxa_names, keep) if k),
        sample_ids=table.sample_ids,
        counts=table.counts[:, keep],
        group_of=table.group_of,
        group_names=table.group_names,
        transformed=table.transformed,
    )


def assign_folds(table: AbundanceTable, n_folds: int, seed: int) -> PreparedDataset:
    """Deal samples of each group round-robin into ``n_folds`` folds.

    Within each group the samples are shuffled by a seeded RNG first, so
    fold sizes within a group differ by at most one.
    """
    if n_folds < 2:
        raise DataError(f"need at least 2 folds, got {n_folds}")
    sizes = table.group_sizes()
    for s, size in sizes.items():
        if size < n_folds:
            raise DataError(
                f"group {table.group_names[s - 1]!r} has {size} samples, fewer than {n_folds} folds"
            )
    rng = np.random.default_rng(seed)
    groups = table.groups_array()
    fold_of: dict[str, int] = {}
    for s in range(1, table.n_groups + 1):
        rows = np.flatnonzero(groups == s)
        order = rng.permutation(len(rows))
        for pos, idx in enumerate(order):
            fold_of[table.sample_ids[rows[idx]]] = pos % n_folds + 1
    return PreparedDataset(table=table, fold_of=fold_of, n_folds=n_folds, seed=seed)


def sparsity(table: AbundanceTable) -> float:
    """Fraction of exactly-zero entries."""
    return float(np.mean(table.counts == 0.0))


def prepare(
    table: AbundanceTable,
    *,
    min_prevalence: float = 0.10,
    n_folds: int = 5,
    seed: int = 0,
) -> tuple[PreparedDataset, dict]:
    """Run the full preprocessing pipeline: transform, balance, filter, folds.

    Returns the prepared dataset and a report of what was dropped. Balancing
    and fold seeds are derived from ``seed`` as separate named streams.
    """
    transformed = log_transform(table)
    balanced = balance_groups(transformed, derive_seed(seed, "balance"))
    filtered = filter_low_prevalence(balanced, min_prevalence)
    dataset = assign_folds(filtered, n_folds, derive_seed(seed, "folds"))
    report = {
        "n_samples_in": table.n_samples,
        "n_samples_kept": filtered.n_samples,
        "n_samples_dropped": table.n_samples - filtered.n_samples,
        "n_taxa_in": table.n_taxa,
        "n_taxa_kept": filtered.n_taxa,
        "n_taxa_dropped": table.n_taxa - filtered.n_taxa,
        "n_groups": filtered.n_groups,
        "group_size": min(filtered.group_sizes().values()) if filtered.n_samples else 0,
        "n_folds": n_folds,
        "seed": seed,
        "min_prevalence": min_prevalence,
        "sparsity": sparsity(filtered),
    }
    return dataset, report


def save_dataset(dataset: PreparedDataset, directory, *, extra_params: dict | None = None) -> None:
    """Write a dataset directory: the matrix plus one flat key/value sidecar.

    Output is byte-deterministic for a given dataset, so reruns with the
    same seed produce identical files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = dataset.table
    lines = ["sample_id," + ",".join(table.taxa_names)]
    for i, sid in enumerate(table.sample_ids):
        lines.append(sid + "," + ",".join(_fmt(v) for v in table.counts[i]))
    (directory / "abundance.csv").write_text("\n".join(lines) + "\n")

    meta = [
        f"n_folds={dataset.n_folds}",
        f"seed={dataset.seed}",
        f"transformed={'true' if table.transformed else 'false'}",
    ]
    for key in sorted(extra_params or {}):
        meta.append(f"param.{key}={extra_params[key]}")
    for sid in table.sample_ids:
        meta.append(f"group.{sid}={table.group_names[table.group_of[sid] - 1]}")
    for sid in table.sample_ids:
        meta.append(f"fold.{sid}={dataset.fold_of[sid]}")
    (directory / "dataset.meta").write_text("\n".join(meta) + "\n")


def load_dataset(directory) -> PreparedDataset:
    """Load a dataset directory written by :func:`save_dataset`."""
    directory = Path(directory)
    meta_path = directory / "dataset.meta"
    if not meta_path.exists():
        raise DataError(f"{directory} is not a dataset directory (missing dataset.meta)")
    fields: dict[str, str] = {}
    for line in meta_path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key] = value

    with open(directory / "abundance.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    taxa = tuple(rows[0][1:])
    sample_ids = tuple(r[0] for r in rows[1:])
    counts = np.array([[float(c) for c in r[1:]] for r in rows[1:]])

    group_name_of = {s: fields[f"group.{s}"] for s in sample_ids}
    names = tuple(sorted(set(group_name_of.values())))
    index_of = {name: i + 1 for i, name in enumerate(names)}
    table = AbundanceTable(
        taxa_names=taxa,
        sample_ids=sample_ids,
        counts=counts,
        group_of={s: index_of[group_name_of[s]] for s in sample_ids},
        group_names=names,
        transformed=fields.get("transformed") == "true",
    )
    fold_of = {s: int(fields[f"fold.{s}"]) for s in sample_ids}
    return PreparedDataset(
        table=table,
        fold_of=fold_of,
        n_folds=int(fields["n_folds"]),
        seed=int(fields["seed"]),
    )
