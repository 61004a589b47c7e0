"""Co-occurrence networks from fitted coefficients, and their differences.

Per-taxon regression fits are assembled into a directed coefficient
matrix per habitat, symmetrized by the union rule (an undirected edge
exists when either directed coefficient is nonzero), and compared across
habitat pairs: a difference edge marks a pair whose association strength
changes beyond a threshold. Pooled fits collapse to identical per-habitat
networks, so their difference networks are exactly empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import solver
from ._seeds import derive_seed, rows_digest
from .data_model import PreparedDataset
from .errors import ConfigError, DataError
from .sac_cv import SacConfig, build_taxon_task

NONZERO_TOL = 1e-8  # coefficient magnitude below this is solver round-off
DEFAULT_TAU = 1e-3  # difference threshold on the standardized-coefficient scale


class Edge(NamedTuple):
    i: int
    j: int
    weight: float


class DiffEdge(NamedTuple):
    i: int
    j: int
    diff_weight: float
    present: bool


@dataclass(frozen=True)
class GroupNetwork:
    """Weighted undirected taxon graph for one habitat."""

    taxa: tuple[str, ...]
    habitat: int
    edges: tuple[Edge, ...]

    def __post_init__(self):
        for e in self.edges:
            if not (0 <= e.i < e.j < len(self.taxa)):
                raise DataError(f"edge ({e.i},{e.j}) violates i<j over {len(self.taxa)} taxa")
            if not np.isfinite(e.weight):
                raise DataError("non-finite edge weight")
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))

    def weight_map(self) -> dict[tuple[int, int], float]:
        return {(e.i, e.j): e.weight for e in self.edges}


@dataclass(frozen=True)
class DiffNetwork:
    """Edge-wise differences between two habitats' networks.

    Only pairs whose symmetrized weights actually differ are stored; the
    ``present`` flag marks differences beyond the detection threshold tau.
    """

    taxa: tuple[str, ...]
    habitat_pair: tuple[int, int]
    tau: float
    edges: tuple[DiffEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))

    @property
    def n_present(self) -> int:
        return sum(1 for e in self.edges if e.present)

    def present_pairs(self) -> set[tuple[int, int]]:
        return {(e.i, e.j) for e in self.edges if e.present}


class RecoveryMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float


def coefficient_matrix(fits, taxa, habitat) -> np.ndarray:
    """Directed coefficient matrix: row d holds taxon d's model for the habitat.

    ``fits`` maps taxon name to a fused or lasso fit whose predictors are
    the remaining taxa in table order. The diagonal is zero by construction.
    """
    taxa = tuple(taxa)
    D = len(taxa)
    C = np.zeros((D, D))
    for d, taxon in enumerate(taxa):
        fit = fits.get(taxon)
        if fit is None:
            raise DataError(f"missing fit for taxon {taxon!r}")
        coef = fit.coef(habitat) if isinstance(fit, solver.FusedFit) else fit.coef()
        others = [j for j in range(D) if j != d]
        if coef.shape[0] != D - 1:
            raise DataError(
                f"fit for taxon {taxon!r} has {coef.shape[0]} coefficients, expected {D - 1}"
            )
        names = getattr(fit, "predictor_names", None)
        if names is not None and tuple(names) != tuple(taxa[j] for j in others):
            raise DataError(f"fit for taxon {taxon!r} was trained on different predictors")
        C[d, others] = coef
    return C


def symmetrize(C, taxa, habitat, *, nonzero_tol=NONZERO_TOL, weight_rule="average") -> GroupNetwork:
    """Undirected network by the union rule over the two directed coefficients.

    The edge weight is the average of the two directed entries; pass
    ``weight_rule='max_abs'`` to keep the larger-magnitude entry instead.
    """
    C = np.asarray(C, dtype=float)
    taxa = tuple(taxa)
    if C.shape != (len(taxa), len(taxa)):
        raise DataError(f"matrix shape {C.shape} does not match {len(taxa)} taxa")
    if np.any(np.diag(C) != 0):
        raise DataError("coefficient matrix must have a zero diagonal")
    if weight_rule not in ("average", "max_abs"):
        raise ConfigError(f"unknown weight_rule {weight_rule!r}")
    edges = []
    for i in range(len(taxa)):
        for j in range(i + 1, len(taxa)):
            a, b = C[i, j], C[j, i]
            if abs(a) > nonzero_tol or abs(b) > nonzero_tol:
                if weight_rule == "average":
                    w = (a + b) / 2.0
                else:
                    w = a if abs(a) >= abs(b) else b
                edges.append(Edge(i, j, float(w)))
    return GroupNetwork(taxa=taxa, habitat=int(habitat), edges=tuple(edges))


def diff_network(net_s: GroupNetwork, net_t: GroupNetwork, tau: float = DEFAULT_TAU) -> DiffNetwork:
    """Edge-wise weight differences net_s - net_t; absent edges count as zero.

    Pairs with exactly equal weights are not stored, so pooled models give
    an exactly empty difference network. ``present`` requires |diff| > tau.
    """
    if net_s.taxa != net_t.taxa:
        raise DataError("difference network requires identical taxa lists")
    if tau < 0:
        raise ConfigError("tau must be non-negative")
    ws, wt = net_s.weight_map(), net_t.weight_map()
    edges = []
    for pair in sorted(set(ws) | set(wt)):
        diff = ws.get(pair, 0.0) - wt.get(pair, 0.0)
        if diff != 0.0:
            edges.append(DiffEdge(pair[0], pair[1], float(diff), bool(abs(diff) > tau)))
    return DiffNetwork(taxa=net_s.taxa, habitat_pair=(net_s.habitat, net_t.habitat),
                       tau=float(tau), edges=tuple(edges))


def recovery_metrics(inferred: DiffNetwork, truth: DiffNetwork) -> RecoveryMetrics:
    """Precision/recall/F1 of detected difference edges against the truth."""
    if inferred.taxa != truth.taxa:
        raise DataError("recovery metrics require identical taxa lists")
    pred = inferred.present_pairs()
    true = truth.present_pairs()
    tp = len(pred & true)
    fp = len(pred - true)
    fn = len(true - pred)
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return RecoveryMetrics(precision=float(precision), recall=float(recall), f1=float(f1))


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _dot_lines(net) -> list[str]:
    if isinstance(net, GroupNetwork):
        name = f"habitat_{net.habitat}"
        rows = [(net.taxa[e.i], net.taxa[e.j], e.weight) for e in net.edges]
    else:
        s, t = net.habitat_pair
        name = f"diff_{s}_{t}"
        rows = [(net.taxa[e.i], net.taxa[e.j], e.diff_weight) for e in net.edges if e.present]
    lines = [f"graph {name} {{"]
    for taxon in net.taxa:
        lines.append(f'  "{taxon}";')
    for a, b, w in rows:
        lines.append(f'  "{a}" -- "{b}" [weight={_fmt(w)}];')
    lines.append("}")
    return lines


def _json_obj(net) -> dict:
    if isinstance(net, GroupNetwork):
        return {
            "taxa": list(net.taxa),
            "habitat": net.habitat,
            "edges": [{"a": net.taxa[e.i], "b": net.taxa[e.j], "weight": e.weight}
                      for e in net.edges],
        }
    return {
        "taxa": list(net.taxa),
        "habitat_pair": list(net.habitat_pair),
        "tau": net.tau,
        "edges": [{"a": net.taxa[e.i], "b": net.taxa[e.j], "weight": e.diff_weight,
                   "present": e.present} for e in net.edges],
    }


def _edgelist_lines(net) -> list[str]:
    lines = ["taxon_a,taxon_b,weight"]
    if isinstance(net, GroupNetwork):
        for e in net.edges:
            lines.append(f"{net.taxa[e.i]},{net.taxa[e.j]},{_fmt(e.weight)}")
    else:
        for e in net.edges:
            if e.present:
                lines.append(f"{net.taxa[e.i]},{net.taxa[e.j]},{_fmt(e.diff_weight)}")
    return lines


def export_network(net, fmt: str, path) -> None:
    """Write a network as DOT, JSON, or an edge-list CSV.

    DOT always lists the full node set so isolated taxa are preserved;
    JSON carries full fidelity (difference edges keep their ``present``
    flag); the edge list holds detected edges only. Output bytes are a
    pure function of the network.
    """
    if fmt == "dot":
        text = "\n".join(_dot_lines(net)) + "\n"
    elif fmt == "json":
        text = json.dumps(_json_obj(net), indent=1, sort_keys=True) + "\n"
    elif fmt == "edgelist":
        text = "\n".join(_edgelist_lines(net)) + "\n"
    else:
        raise ConfigError(f"unknown export format {fmt!r}; use dot, json, or edgelist")
    Path(path).write_text(text)


def load_network_json(path):
    """Reload a network written by :func:`export_network` with fmt='json'."""
    obj = json.loads(Path(path).read_text())
    taxa = tuple(obj["taxa"])
    index = {t: i for i, t in enumerate(taxa)}
    if "habitat" in obj:
        edges = tuple(Edge(index[e["a"]], index[e["b"]], float(e["weight"]))
                      for e in obj["edges"])
        return GroupNetwork(taxa=taxa, habitat=int(obj["habitat"]), edges=edges)
    edges = tuple(DiffEdge(index[e["a"]], index[e["b"]], float(e["weight"]), bool(e["present"]))
                  for e in obj["edges"])
    s, t = obj["habitat_pair"]
    return DiffNetwork(taxa=taxa, habitat_pair=(int(s), int(t)),
                       tau=float(obj.get("tau", DEFAULT_TAU)), edges=edges)


# ---------------------------------------------------------------------------
# fitting whole-network collections on a prepared dataset
# ---------------------------------------------------------------------------

def fit_taxon_models(dataset: PreparedDataset, algorithm: str, *, seed: int = 0,
                     config: SacConfig | None = None) -> dict:
    """CV-selected per-taxon fits on the full dataset, keyed by taxon.

    For ``lasso_same`` the value is a {habitat: LassoFit} map; for the
    pooled and fused algorithms it is a single fit per taxon.
    """
    if algorithm not in ("fused_all", "lasso_all", "lasso_same"):
        raise ConfigError(f"networks are built from coefficient models, not {algorithm!r}")
    cfg = config or SacConfig()
    table = dataset.table
    fits: dict = {}
    all_rows = np.arange(table.n_samples)
    for taxon in table.taxa_names:
        design = build_taxon_task(dataset, taxon)
        if algorithm == "fused_all":
            lam_max = solver.fused_lambda_max(design)
            inner_seed = derive_seed(seed, "inner", taxon, rows_digest(all_rows))
            fits[taxon] = solver.cv_fused(
                design,
                solver.lambda_grid_from(lam_max, num=cfg.n_lambda, min_ratio=cfg.lambda_min_ratio),
                solver.gamma_grid_from(lam_max, num=cfg.n_gamma),
                inner_folds=cfg.inner_folds, seed=inner_seed,
                tol=cfg.tol, max_iter=cfg.max_iter)
        elif algorithm == "lasso_all":
            inner_seed = derive_seed(seed, "inner", taxon, rows_digest(all_rows))
            fits[taxon] = solver.cv_lasso(
                design.predictors, design.response,
                solver.lambda_grid_from(solver.lasso_lambda_max(design.predictors, design.response),
                                        num=cfg.n_lambda, min_ratio=cfg.lambda_min_ratio),
                cfg.inner_folds, inner_seed, tol=cfg.tol, max_iter=cfg.max_iter,
                predictor_names=design.predictor_names, target=taxon)
        else:
            per_habitat = {}
            groups = table.groups_array()
            for habitat in range(1, table.n_groups + 1):
                rows = np.flatnonzero(groups == habitat)
                X, y = design.predictors[rows], design.response[rows]
                inner_seed = derive_seed(seed, "inner", taxon, rows_digest(rows))
                per_habitat[habitat] = solver.cv_lasso(
                    X, y,
                    solver.lambda_grid_from(solver.lasso_lambda_max(X, y),
                                            num=cfg.n_lambda, min_ratio=cfg.lambda_min_ratio),
                    cfg.inner_folds, inner_seed, tol=cfg.tol, max_iter=cfg.max_iter,
                    predictor_names=design.predictor_names, target=taxon)
            fits[taxon] = per_habitat
    return fits


def networks_from_fits(fits: dict, taxa, habitats) -> dict[int, GroupNetwork]:
    """One symmetrized network per habitat from a fit collection."""
    nets = {}
    for habitat in habitats:
        flat = {}
        for taxon, fit in fits.items():
            flat[taxon] = fit[habitat] if isinstance(fit, dict) else fit
        nets[habitat] = symmetrize(coefficient_matrix(flat, taxa, habitat), taxa, habitat)
    return nets


def build_networks(dataset: PreparedDataset, algorithm: str, *, seed: int = 0,
                   tau: float = DEFAULT_TAU, config: SacConfig | None = None):
    """Fit models and return ({habitat: GroupNetwork}, {(s,t): DiffNetwork})."""
    table = dataset.table
    habitats = list(range(1, table.n_groups + 1))
    fits = fit_taxon_models(dataset, algorithm, seed=seed, config=config)
    nets = networks_from_fits(fits, table.taxa_names, habitats)
    diffs = {}
    for i, s in enumerate(habitats):
        for t in habitats[i + 1:]:
            diffs[(s, t)] = diff_network(nets[s], nets[t], tau)
    return nets, diffs
