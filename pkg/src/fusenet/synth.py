"""Synthetic grouped abundance data with known network structure.

Ground truth is a signed association weight per taxon pair and habitat:
shared pairs carry one weight used in every habitat, habitat-specific
pairs draw independent weights (possibly zero in some habitats). Samples
come from a latent multivariate normal whose precision matrix encodes the
weights, so the taxon-on-taxa regressions the solvers fit have sparse
coefficients exactly proportional to the truth. Latents are shifted,
exponentiated and rounded to non-negative integer counts, and the raw
table is returned so the standard pipeline (log transform onward)
applies unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._seeds import derive_seed
from .data_model import AbundanceTable, PreparedDataset, assign_folds, log_transform
from .errors import ConfigError, NumericalError
from .network import DEFAULT_TAU, DiffNetwork, Edge, GroupNetwork, diff_network

_DOMINANCE = 1.5  # diagonal dominance factor of the latent precision matrix


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; densities are fractions of all taxon pairs."""

    n_groups: int
    n_taxa: int
    n_per_group: int
    shared_density: float
    specific_density: float
    effect_low: float = 0.4
    effect_high: float = 0.8
    noise_sd: float = 1.0
    seed: int = 0
    habitat_shift: float = 0.25
    count_scale: float = 0.5
    count_loc: float = 1.5

    def __post_init__(self):
        if self.n_groups < 1 or self.n_taxa < 2 or self.n_per_group < 1:
            raise ConfigError("need n_groups >= 1, n_taxa >= 2, n_per_group >= 1")
        for name in ("shared_density", "specific_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.shared_density + self.specific_density > 1.0:
            raise ConfigError("shared_density + specific_density must be at most 1")
        if not 0 < self.effect_low <= self.effect_high:
            raise ConfigError("need 0 < effect_low <= effect_high")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")
        if self.habitat_shift < 0:
            raise ConfigError("habitat_shift must be non-negative")


@dataclass(frozen=True)
class SynthResult:
    table: AbundanceTable
    dataset: PreparedDataset
    truth_networks: tuple[GroupNetwork, ...]
    truth_diffs: tuple[DiffNetwork, ...]


def _draw_weight(rng, spec) -> float:
    mag = rng.uniform(spec.effect_low, spec.effect_high)
    return float(mag if rng.random() < 0.5 else -mag)


def _place_edges(rng, pairs, n_taxa, n_shared, n_specific):
    """Pick edge pairs with a node-degree cap so no taxon hogs the graph.

    The latent precision matrix is normalized by its largest absolute row
    sum; capping the degree near the average keeps every edge's implied
    regression coefficient at a usable size instead of letting one dense
    node shrink them all. The cap is relaxed if the draw cannot be placed.
    """
    total = n_shared + n_specific
    cap = max(2, math.ceil(2.0 * total / n_taxa))
    order = rng.permutation(len(pairs))
    while True:
        degree = [0] * n_taxa
        chosen = []
        for k in order:
            i, j = pairs[k]
            if degree[i] < cap and degree[j] < cap:
                chosen.append(int(k))
                degree[i] += 1
                degree[j] += 1
            if len(chosen) == total:
                break
        if len(chosen) == total:
            break
        cap += 1
    return sorted(chosen[:n_shared]), sorted(chosen[n_shared:])


def generate(spec: SynthSpec, *, k_folds: int = 3, tau: float = DEFAULT_TAU) -> SynthResult:
    """Generate one dataset plus its truth networks and difference networks.

    Fold labels are assigned with the standard round-robin rule; rows are
    exchangeable within each habitat so folds carry no hidden structure.
    """
    rng = np.random.default_rng(spec.seed)
    D, S = spec.n_taxa, spec.n_groups
    pairs = [(i, j) for i in range(D) for j in range(i + 1, D)]
    n_pairs = len(pairs)
    n_shared = int(round(spec.shared_density * n_pairs))
    n_specific = int(round(spec.specific_density * n_pairs))
    shared_idx, specific_idx = _place_edges(rng, pairs, D, n_shared, n_specific)

    W = np.zeros((S, D, D))
    for k in shared_idx:
        i, j = pairs[k]
        w = _draw_weight(rng, spec)
        W[:, i, j] = W[:, j, i] = w
    for k in specific_idx:
        i, j = pairs[k]
        # per-habitat state: positive, negative, or absent; sign flips are
        # the strong form of habitat-specific association, and independent
        # magnitudes keep nonzero draws distinct across habitats
        states = rng.choice([1.0, -1.0, 0.0], size=S, p=[0.4, 0.4, 0.2])
        mags = rng.uniform(spec.effect_low, spec.effect_high, size=S)
        for s in range(S):
            W[s, i, j] = W[s, j, i] = float(states[s] * mags[s])

    # Precision parametrization: the conditional regression of taxon d on
    # the rest has coefficients W[s, d, :] / c and residual sd noise_sd.
    row_sums = np.abs(W).sum(axis=2)
    c = _DOMINANCE * max(float(row_sums.max()), 1.0)
    # habitats differ in baseline abundance per taxon; constant within a
    # habitat, so within-habitat conditional structure (the truth network)
    # is untouched
    baselines = rng.normal(0.0, spec.habitat_shift, size=(S, D))
    counts_blocks = []
    for s in range(S):
        omega = (np.eye(D) - W[s] / c) / spec.noise_sd**2
        for attempt in range(10):
            try:
                L = np.linalg.cholesky(omega)
                break
            except np.linalg.LinAlgError:
                omega = omega + np.eye(D) * (0.5 * (attempt + 1) / spec.noise_sd**2)
        else:
            raise NumericalError("latent precision matrix not positive definite after 10 boosts")
        noise = rng.standard_normal((spec.n_per_group, D))
        # z ~ N(mu_s, omega^{-1}) via one triangular solve per sample block
        z = np.linalg.solve(L.T, noise.T).T + baselines[s]
        counts = np.round(10.0 ** (z * spec.count_scale + spec.count_loc) - 1.0)
        counts_blocks.append(np.maximum(counts, 0.0))

    group_names = tuple(f"g{s + 1:02d}" for s in range(S))
    taxa = tuple(f"t{j + 1:03d}" for j in range(D))
    sample_ids = []
    group_of = {}
    for s, name in enumerate(group_names):
        for i in range(spec.n_per_group):
            sid = f"{name}_s{i + 1:03d}"
            sample_ids.append(sid)
            group_of[sid] = s + 1
    table = AbundanceTable(
        taxa_names=taxa,
        sample_ids=tuple(sample_ids),
        counts=np.vstack(counts_blocks),
        group_of=group_of,
        group_names=group_names,
        transformed=False,
    )
    dataset = assign_folds(log_transform(table), k_folds, derive_seed(spec.seed, "folds"))

    nets = []
    for s in range(S):
        edges = tuple(Edge(i, j, float(W[s, i, j]))
                      for (i, j) in pairs if W[s, i, j] != 0.0)
        nets.append(GroupNetwork(taxa=taxa, habitat=s + 1, edges=edges))
    diffs = []
    for a in range(S):
        for b in range(a + 1, S):
            diffs.append(diff_network(nets[a], nets[b], tau))
    return SynthResult(table=table, dataset=dataset,
                       truth_networks=tuple(nets), truth_diffs=tuple(diffs))
