"""Certified solvers: subgroup fused lasso, plain lasso, featureless mean.

For a response split into S habitat blocks (X_s, y_s) the fused model uses
a shared coefficient vector b0 plus one deviation vector u_s per habitat,
fitted by minimising

    sum_s ||y_s - X_s (b0 + u_s)||^2
      + lam * ( ||b0||_1 + sum_s ||u_s||_1 )
      + gam * sum_{s<t} w[s,t] * ||u_s - u_t||_1

over the stacked parameter (b0, u_1, ..., u_S). The whole nonsmooth part
is one weighted L1 norm of D theta for a fixed difference operator D, so
the problem is solved by ADMM with a single prox (soft threshold) and a
cached Cholesky factor that is reused across the (lam, gam) grid.

Responses are centered per habitat and predictor columns are centered per
habitat and scaled by their pooled within-habitat standard deviation,
which is equivalent to an unpenalized per-habitat intercept. Columns with
no within-habitat variance are dropped and reported with coefficient 0.

Every fit returned by a public entry point carries a certificate:
``kkt_residual`` (the coordinate-wise distance from zero to the
objective's subdifferential) is at most the requested tolerance, or a
``NumericalError`` is raised with the last iterate attached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NumericalError

_DROP_TOL = 1e-12  # pooled within-group std below this marks a constant column
_TIE_RTOL = 1e-5   # CV scores closer than this are ties, broken toward stronger penalties


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardization:
    """Per-habitat centering plus one pooled column scale.

    ``x_scale`` entries of exactly 0 mark dropped (constant) columns.
    """

    groups: tuple[int, ...]
    y_mean: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray

    def position(self, group) -> int:
        try:
            return self.groups.index(int(group))
        except ValueError:
            raise DataError(
                f"habitat {group} was not part of the training data (groups {self.groups})"
            ) from None

    def apply_x(self, X, pos: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.x_mean.shape[1]:
            raise DataError(f"expected {self.x_mean.shape[1]} predictor columns, got {X.shape[1]}")
        out = np.zeros_like(X)
        kept = self.x_scale > 0
        out[:, kept] = (X[:, kept] - self.x_mean[pos, kept]) / self.x_scale[kept]
        return out


def standardize_design(design):
    """Center/scale a grouped design; returns (std, per-group X, per-group y).

    The returned X blocks contain only the kept (non-constant) columns, in
    original order; ``std.x_scale > 0`` gives the kept-column mask.
    """
    y = np.asarray(design.response, dtype=float)
    X = np.asarray(design.predictors, dtype=float)
    g = np.asarray(design.group_of_row, dtype=int)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0] or g.shape[0] != y.shape[0]:
        raise DataError("design arrays have inconsistent shapes")
    groups = tuple(int(s) for s in np.unique(g))
    p = X.shape[1]
    y_mean = np.empty(len(groups))
    x_mean = np.empty((len(groups), p))
    centered = np.empty_like(X)
    ys = []
    rows = []
    for pos, s in enumerate(groups):
        idx = np.flatnonzero(g == s)
        rows.append(idx)
        y_mean[pos] = y[idx].mean()
        x_mean[pos] = X[idx].mean(axis=0)
        centered[idx] = X[idx] - x_mean[pos]
        ys.append(y[idx] - y_mean[pos])
    scale = np.sqrt(np.mean(centered**2, axis=0))
    scale[scale <= _DROP_TOL] = 0.0
    kept = scale > 0
    std = Standardization(groups=groups, y_mean=y_mean, x_mean=x_mean, x_scale=scale)
    Xs = []
    for pos, idx in enumerate(rows):
        block = np.zeros((len(idx), int(kept.sum())))
        block[:, :] = centered[np.ix_(idx, np.flatnonzero(kept))] / scale[kept]
        Xs.append(block)
    return std, Xs, ys


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusedFit:
    """Fused-lasso fit: shared vector plus per-habitat deviations.

    Coefficients live on the standardized predictor scale recorded in
    ``centering``; the habitat coefficient vector is ``beta0 + deviations[s]``.
    """

    beta0: np.ndarray
    deviations: np.ndarray
    lam: float
    gam: float
    weights: np.ndarray
    centering: Standardization
    predictor_names: tuple[str, ...] | None = None
    target: str | None = None

    def coef(self, group) -> np.ndarray:
        pos = self.centering.position(group)
        return self.beta0 + self.deviations[pos]

    def predict(self, X, group) -> np.ndarray:
        pos = self.centering.position(group)
        Xstd = self.centering.apply_x(X, pos)
        return self.centering.y_mean[pos] + Xstd @ (self.beta0 + self.deviations[pos])


@dataclass(frozen=True)
class LassoFit:
    """Plain lasso fit on pooled rows, with its own centering."""

    beta: np.ndarray
    lam: float
    y_mean: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    predictor_names: tuple[str, ...] | None = None
    target: str | None = None

    def coef(self, group=None) -> np.ndarray:
        return self.beta

    def predict(self, X, group=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.x_mean.shape[0]:
            raise DataError(f"expected {self.x_mean.shape[0]} predictor columns, got {X.shape[1]}")
        out = np.zeros_like(X)
        kept = self.x_scale > 0
        out[:, kept] = (X[:, kept] - self.x_mean[kept]) / self.x_scale[kept]
        return self.y_mean + out @ self.beta


@dataclass(frozen=True)
class FeaturelessFit:
    """Training-response mean; the floor every model must beat."""

    constant: float

    def predict(self, X, group=None) -> np.ndarray:
        n = np.atleast_2d(np.asarray(X)).shape[0]
        return np.full(n, self.constant, dtype=float)


def predict(fit, X, group=None) -> np.ndarray:
    """Dispatch prediction for any fit kind."""
    if isinstance(fit, FusedFit):
        return fit.predict(X, group)
    return fit.predict(X)


def fit_featureless(y) -> FeaturelessFit:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DataError("cannot fit a featureless model on an empty response")
    return FeaturelessFit(constant=float(y.mean()))


# ---------------------------------------------------------------------------
# fused-lasso ADMM engine
# ---------------------------------------------------------------------------

def _check_weights(weights, n_groups: int) -> np.ndarray:
    if weights is None:
        w = np.ones((n_groups, n_groups)) - np.eye(n_groups)
        return w
    w = np.asarray(weights, dtype=float)
    if w.shape != (n_groups, n_groups):
        raise ConfigError(f"weights must be {n_groups}x{n_groups}, got {w.shape}")
    if np.any(w < 0) or not np.allclose(w, w.T) or np.any(np.diag(w) != 0):
        raise ConfigError("weights must be symmetric, non-negative, with zero diagonal")
    return w


def _fused_kkt(B, g, lam, gam, pairs, wvals) -> float:
    """Coordinate-wise subdifferential distance at the stacked point B.

    B and g are (S+1, p): row 0 the shared vector, rows 1.. the deviations.
    Nonzero coordinates (and nonzero pairwise gaps) contribute their exact
    penalty sign; coordinates sitting at a kink contribute slack instead.
    """
    if B.shape[1] == 0:
        return 0.0
    fixed = g.copy()
    slack = np.zeros_like(B)
    nz = B != 0
    fixed[nz] += lam * np.sign(B[nz])
    slack[~nz] += lam
    for (a, b), w in zip(pairs, wvals):
        delta = B[1 + a] - B[1 + b]
        sgn = np.sign(delta)
        nzd = delta != 0
        fixed[1 + a, nzd] += gam * w * sgn[nzd]
        fixed[1 + b, nzd] -= gam * w * sgn[nzd]
        slack[1 + a, ~nzd] += gam * w
        slack[1 + b, ~nzd] += gam * w
    # row 0 never enters the fusion penalty, so its slack is lam alone
    viol = np.maximum(np.abs(fixed) - slack, 0.0)
    return float(viol.max())


class _AdmmState:
    """Warm-start carrier for one fused problem across a hyperparameter path."""

    __slots__ = ("theta", "z", "dual", "rho", "factor", "factor_rho")

    def __init__(self, q: int, m: int):
        self.theta = np.zeros(q)
        self.z = np.zeros(m)
        self.dual = np.zeros(m)
        self.rho = 1.0
        self.factor = None
        self.factor_rho = None


class _FusedProblem:
    """One standardized grouped design, ready for repeated ADMM solves."""

    def __init__(self, Xs, ys, weights):
        self.Xs = Xs
        self.ys = ys
        self.n_groups = len(Xs)
        self.p = Xs[0].shape[1] if Xs else 0
        S, p = self.n_groups, self.p
        self.q = (S + 1) * p
        w = np.asarray(weights, dtype=float)
        self.pairs = [(a, b) for a in range(S) for b in range(a + 1, S) if w[a, b] > 0]
        self.wvals = np.array([w[a, b] for a, b in self.pairs])
        self.m = self.q + len(self.pairs) * p
        self.y_sq = float(sum(float(v @ v) for v in ys))

        G = [x.T @ x for x in Xs]
        c = [x.T @ y for x, y in zip(Xs, ys)]
        AtA = np.zeros((self.q, self.q))
        Aty = np.zeros(self.q)
        if p:
            AtA[:p, :p] = sum(G)
            Aty[:p] = sum(c)
            for s in range(S):
                sl = slice((1 + s) * p, (2 + s) * p)
                AtA[:p, sl] = G[s]
                AtA[sl, :p] = G[s]
                AtA[sl, sl] = G[s]
                Aty[sl] = c[s]
        self.AtA = AtA
        self.Aty = Aty
        # splitting operator D = [I; rows u_a - u_b per pair]; penalty weights
        # (lam, gam * w_ab) are applied in the prox, so the factorization of
        # the theta-update matrix is shared by the whole hyperparameter grid.
        K0 = np.eye(self.q)
        for a, b in self.pairs:
            sa = slice((1 + a) * p, (2 + a) * p)
            sb = slice((1 + b) * p, (2 + b) * p)
            K0[sa, sa] += np.eye(p)
            K0[sb, sb] += np.eye(p)
            idx_a = np.arange((1 + a) * p, (2 + a) * p)
            idx_b = np.arange((1 + b) * p, (2 + b) * p)
            K0[idx_a, idx_b] -= 1.0
            K0[idx_b, idx_a] -= 1.0
        self.K0 = K0

    def new_state(self) -> _AdmmState:
        return _AdmmState(self.q, self.m)

    def _apply_D(self, theta):
        if not self.pairs:
            return theta.copy()
        B = theta.reshape(self.n_groups + 1, self.p)
        diffs = [B[1 + a] - B[1 + b] for a, b in self.pairs]
        return np.concatenate([theta] + diffs)

    def _apply_Dt(self, v):
        out = v[: self.q].copy()
        B = out.reshape(self.n_groups + 1, self.p)
        for k, (a, b) in enumerate(self.pairs):
            blk = v[self.q + k * self.p : self.q + (k + 1) * self.p]
            B[1 + a] += blk
            B[1 + b] -= blk
        return out

    def gradient(self, theta):
        """Smooth gradient computed from residuals (matches the public check)."""
        B = theta.reshape(self.n_groups + 1, self.p)
        g = np.zeros_like(B)
        for s, (x, y) in enumerate(zip(self.Xs, self.ys)):
            r = y - x @ (B[0] + B[1 + s])
            gs = -2.0 * (x.T @ r)
            g[0] += gs
            g[1 + s] = gs
        return g

    def objective(self, theta, lam, gam):
        B = theta.reshape(self.n_groups + 1, self.p)
        value = 0.0
        for s, (x, y) in enumerate(zip(self.Xs, self.ys)):
            r = y - x @ (B[0] + B[1 + s])
            value += float(r @ r)
        value += lam * float(np.abs(B).sum())
        for (a, b), w in zip(self.pairs, self.wvals):
            value += gam * w * float(np.abs(B[1 + a] - B[1 + b]).sum())
        return value

    def kkt(self, theta, lam, gam) -> float:
        B = theta.reshape(self.n_groups + 1, self.p)
        return _fused_kkt(B, self.gradient(theta), lam, gam, self.pairs, self.wvals)

    def _thresholds(self, lam, gam):
        t = np.full(self.m, lam)
        for k, w in enumerate(self.wvals):
            t[self.q + k * self.p : self.q + (k + 1) * self.p] = gam * w
        return t

    def _factorize(self, state):
        M = 2.0 * self.AtA + state.rho * self.K0
        state.factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        state.factor_rho = state.rho

    def _snap(self, state, lam, gam):
        """Candidate with exact kinks, rebuilt from the prox output.

        The sparse block of z is exactly zero wherever the soft threshold
        fired; pairs whose fusion block is exactly zero are averaged into a
        single value (zero wins inside a component so zero coordinates stay
        exact). The candidate is only accepted if its KKT residual passes.
        """
        theta = state.z[: self.q].copy()
        if self.pairs and gam > 0 and self.p:
            S, p = self.n_groups, self.p
            B = theta.reshape(S + 1, p)
            zf = state.z[self.q :].reshape(len(self.pairs), p)
            for j in range(p):
                fused = [k for k in range(len(self.pairs)) if zf[k, j] == 0.0]
                if not fused:
                    continue
                parent = list(range(S))

                def find(x):
                    while parent[x] != x:
                        parent[x] = parent[parent[x]]
                        x = parent[x]
                    return x

                for k in fused:
                    a, b = self.pairs[k]
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[ra] = rb
                comps: dict[int, list[int]] = {}
                for s in range(S):
                    comps.setdefault(find(s), []).append(s)
                for members in comps.values():
                    if len(members) < 2:
                        continue
                    vals = B[[1 + s for s in members], j]
                    B[[1 + s for s in members], j] = 0.0 if np.any(vals == 0.0) else vals.mean()
        return theta

    def solve(self, lam, gam, state=None, *, eps=1e-7, certify_tol=None, max_iter=100_000):
        """Run ADMM; with ``certify_tol`` iterate until a snapped candidate
        passes the exact KKT check, else stop on primal/dual residuals.

        Returns (theta, state, info). Raises NumericalError if the budget is
        exhausted before certification.
        """
        if self.p == 0:
            return np.zeros(0), state or self.new_state(), {"iterations": 0, "kkt": 0.0}
        if state is None:
            state = self.new_state()
            state.rho = 1.0 + lam
        if state.factor is None or state.factor_rho != state.rho:
            self._factorize(state)
        t = self._thresholds(lam, gam)
        base = 2.0 * self.Aty
        alpha = 1.7  # over-relaxation
        sqrt_m, sqrt_q = math.sqrt(self.m), math.sqrt(self.q)
        check_every = 10
        eps_now = eps
        best_kkt = np.inf
        best_theta = None
        it = 0
        while it < max_iter:
            it += 1
            rhs = base + state.rho * self._apply_Dt(state.z - state.dual)
            theta = scipy.linalg.cho_solve(state.factor, rhs, check_finite=False)
            Dth = self._apply_D(theta)
            relaxed = alpha * Dth + (1.0 - alpha) * state.z
            z_old = state.z
            state.z = _soft(relaxed + state.dual, t / state.rho)
            state.dual = state.dual + relaxed - state.z
            state.theta = theta
            if it % check_every:
                continue
            r_pri = float(np.linalg.norm(Dth - state.z))
            r_dual = float(state.rho * np.linalg.norm(self._apply_Dt(state.z - z_old)))
            eps_pri = sqrt_m * eps_now + eps_now * max(np.linalg.norm(Dth), np.linalg.norm(state.z))
            eps_dual = sqrt_q * eps_now + eps_now * state.rho * np.linalg.norm(self._apply_Dt(state.dual))
            if r_pri <= eps_pri and r_dual <= eps_dual:
                if certify_tol is None:
                    return theta, state, {"iterations": it, "kkt": None}
                cand = self._snap(state, lam, gam)
                # prefer the sparser representative when it also certifies:
                # coordinates hovering at a kink boundary become exact zeros
                sparse = np.where(np.abs(cand) <= max(certify_tol, 1e-8), 0.0, cand)
                candidates = [sparse] if np.array_equal(sparse, cand) else [sparse, cand]
                for attempt in candidates:
                    kkt = self.kkt(attempt, lam, gam)
                    if kkt <= certify_tol:
                        return attempt + 0.0, state, {"iterations": it, "kkt": kkt}
                    if kkt < best_kkt:
                        best_kkt, best_theta = kkt, attempt
                eps_now *= 0.2
            elif r_pri > 10.0 * r_dual and state.rho < 1e8:
                state.rho *= 2.0
                state.dual /= 2.0
                self._factorize(state)
            elif r_dual > 10.0 * r_pri and state.rho > 1e-8:
                state.rho /= 2.0
                state.dual *= 2.0
                self._factorize(state)
        if certify_tol is None:
            return state.theta, state, {"iterations": it, "kkt": None}
        raise NumericalError(
            f"fused solver did not certify within {max_iter} iterations "
            f"(best KKT residual {best_kkt:.3g})",
            fit=best_theta if best_theta is not None else state.theta,
            residual=best_kkt,
        )


def _expand(vec, kept, p_full):
    out = np.zeros(p_full)
    out[kept] = vec
    return out + 0.0  # normalizes -0.0


def fit_fused(design, lam, gam, weights=None, tol=1e-6, max_iter=100_000) -> FusedFit:
    """Fit the subgroup fused lasso at fixed penalties, with certified optimality."""
    if lam < 0 or gam < 0:
        raise ConfigError("penalty weights must be non-negative")
    if tol <= 0:
        raise ConfigError("tol must be positive")
    std, Xs, ys = standardize_design(design)
    S = len(std.groups)
    w = _check_weights(weights, S)
    p_full = std.x_mean.shape[1]
    kept = std.x_scale > 0
    problem = _FusedProblem(Xs, ys, w)
    theta, _, _ = problem.solve(lam, gam, eps=max(tol * 0.1, 1e-12),
                                certify_tol=tol, max_iter=max_iter)
    p = problem.p
    B = theta.reshape(S + 1, p) if p else np.zeros((S + 1, 0))
    fit = FusedFit(
        beta0=_expand(B[0], kept, p_full),
        deviations=np.stack([_expand(B[1 + s], kept, p_full) for s in range(S)]),
        lam=float(lam),
        gam=float(gam),
        weights=w,
        centering=std,
        predictor_names=tuple(getattr(design, "predictor_names", ()) or ()) or None,
        target=getattr(design, "target_taxon", None),
    )
    return fit


def _std_blocks_from_fit(fit: FusedFit, design):
    """Standardized per-group blocks using the centering recorded in the fit."""
    y = np.asarray(design.response, dtype=float)
    X = np.asarray(design.predictors, dtype=float)
    g = np.asarray(design.group_of_row, dtype=int)
    if X.shape[1] != fit.beta0.shape[0]:
        raise DataError(f"design has {X.shape[1]} predictors, fit has {fit.beta0.shape[0]}")
    std = fit.centering
    kept = std.x_scale > 0
    Xs, ys, positions = [], [], []
    for pos, s in enumerate(std.groups):
        idx = np.flatnonzero(g == s)
        if idx.size == 0:
            continue
        Xs.append(std.apply_x(X[idx], pos)[:, kept])
        ys.append(y[idx] - std.y_mean[pos])
        positions.append(pos)
    extra = set(int(v) for v in np.unique(g)) - set(std.groups)
    if extra:
        raise DataError(f"design contains habitats {sorted(extra)} unknown to the fit")
    return Xs, ys, positions, kept


def fused_objective(fit: FusedFit, design) -> float:
    """Objective value at the fit, on the standardized data recorded in it."""
    Xs, ys, positions, kept = _std_blocks_from_fit(fit, design)
    value = 0.0
    for x, y, pos in zip(Xs, ys, positions):
        r = y - x @ (fit.beta0[kept] + fit.deviations[pos, kept])
        value += float(r @ r)
    value += fit.lam * float(np.abs(fit.beta0).sum() + np.abs(fit.deviations).sum())
    S = len(fit.centering.groups)
    for a in range(S):
        for b in range(a + 1, S):
            if fit.weights[a, b] > 0:
                value += fit.gam * fit.weights[a, b] * float(
                    np.abs(fit.deviations[a] - fit.deviations[b]).sum()
                )
    return value


def kkt_residual(fit: FusedFit, design, lam=None, gam=None, weights=None) -> float:
    """Distance from zero to the objective's subdifferential at the fit.

    Computed coordinate-wise: nonzero coordinates (and nonzero pairwise
    deviation gaps) contribute their exact penalty sign; coordinates at a
    kink contribute the available subgradient slack instead.
    """
    lam = fit.lam if lam is None else float(lam)
    gam = fit.gam if gam is None else float(gam)
    S = len(fit.centering.groups)
    w = fit.weights if weights is None else _check_weights(weights, S)
    Xs, ys, positions, kept = _std_blocks_from_fit(fit, design)
    if len(positions) != S:
        raise DataError("design does not cover every habitat of the fit")
    p = int(kept.sum())
    B = np.zeros((S + 1, p))
    B[0] = fit.beta0[kept]
    for pos in range(S):
        B[1 + pos] = fit.deviations[pos, kept]
    g = np.zeros_like(B)
    for x, y, pos in zip(Xs, ys, positions):
        r = y - x @ (B[0] + B[1 + pos])
        gs = -2.0 * (x.T @ r)
        g[0] += gs
        g[1 + pos] = gs
    pairs = [(a, b) for a in range(S) for b in range(a + 1, S) if w[a, b] > 0]
    wvals = np.array([w[a, b] for a, b in pairs])
    return _fused_kkt(B, g, lam, gam, pairs, wvals)


# ---------------------------------------------------------------------------
# plain lasso by coordinate descent
# ---------------------------------------------------------------------------

def _lasso_std(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DataError("X and y have inconsistent shapes")
    if y.shape[0] < 1:
        raise DataError("need at least one sample")
    y_mean = float(y.mean())
    x_mean = X.mean(axis=0)
    Xc = X - x_mean
    scale = np.sqrt(np.mean(Xc**2, axis=0))
    scale[scale <= _DROP_TOL] = 0.0
    kept = scale > 0
    Xstd = Xc[:, kept] / scale[kept]
    return Xstd, y - y_mean, y_mean, x_mean, scale, kept


def _lasso_kkt_core(Xstd, yc, beta, lam) -> float:
    r = yc - Xstd @ beta
    g = -2.0 * (Xstd.T @ r)
    nz = beta != 0
    viol = np.where(nz, np.abs(g + lam * np.sign(beta)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


class _LassoProblem:
    """One standardized lasso design, ready for repeated ADMM solves.

    Same splitting as the fused engine with D = I: the theta update is one
    cached p x p Cholesky solve, the prox is a soft threshold, and the
    returned coefficients come from the prox output so zeros are exact.
    """

    __slots__ = ("X", "y", "G2", "c2", "p")

    def __init__(self, Xstd, yc):
        self.X = Xstd
        self.y = yc
        self.p = Xstd.shape[1]
        self.G2 = 2.0 * (Xstd.T @ Xstd)
        self.c2 = 2.0 * (Xstd.T @ yc)

    def new_state(self) -> _AdmmState:
        return _AdmmState(self.p, self.p)

    def _factorize(self, state):
        M = self.G2 + state.rho * np.eye(self.p)
        state.factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        state.factor_rho = state.rho

    def kkt(self, beta, lam) -> float:
        return _lasso_kkt_core(self.X, self.y, beta, lam)

    def solve(self, lam, state=None, *, eps=1e-7, certify_tol=None, max_iter=100_000):
        if self.p == 0:
            return np.zeros(0), state or self.new_state()
        if state is None:
            state = self.new_state()
            state.rho = 1.0 + lam
        if state.factor is None or state.factor_rho != state.rho:
            self._factorize(state)
        alpha = 1.7
        sqrt_p = math.sqrt(self.p)
        eps_now = eps
        best_kkt = np.inf
        best_beta = None
        it = 0
        while it < max_iter:
            it += 1
            theta = scipy.linalg.cho_solve(
                state.factor, self.c2 + state.rho * (state.z - state.dual), check_finite=False)
            relaxed = alpha * theta + (1.0 - alpha) * state.z
            z_old = state.z
            state.z = _soft(relaxed + state.dual, lam / state.rho)
            state.dual = state.dual + relaxed - state.z
            state.theta = theta
            if it % 10:
                continue
            r_pri = float(np.linalg.norm(theta - state.z))
            r_dual = float(state.rho * np.linalg.norm(state.z - z_old))
            eps_pri = sqrt_p * eps_now + eps_now * max(np.linalg.norm(theta), np.linalg.norm(state.z))
            eps_dual = sqrt_p * eps_now + eps_now * state.rho * np.linalg.norm(state.dual)
            if r_pri <= eps_pri and r_dual <= eps_dual:
                if certify_tol is None:
                    return state.z.copy(), state
                cand = state.z.copy()
                sparse = np.where(np.abs(cand) <= max(certify_tol, 1e-8), 0.0, cand)
                candidates = [sparse] if np.array_equal(sparse, cand) else [sparse, cand]
                for attempt in candidates:
                    kkt = self.kkt(attempt, lam)
                    if kkt <= certify_tol:
                        return attempt + 0.0, state
                    if kkt < best_kkt:
                        best_kkt, best_beta = kkt, attempt
                eps_now *= 0.2
            elif r_pri > 10.0 * r_dual and state.rho < 1e8:
                state.rho *= 2.0
                state.dual /= 2.0
                self._factorize(state)
            elif r_dual > 10.0 * r_pri and state.rho > 1e-8:
                state.rho /= 2.0
                state.dual *= 2.0
                self._factorize(state)
        if certify_tol is None:
            return state.z.copy(), state
        raise NumericalError(
            f"lasso solver did not certify within {max_iter} iterations "
            f"(best KKT residual {best_kkt:.3g})",
            fit=best_beta,
            residual=best_kkt,
        )


def fit_lasso(X, y, lam, tol=1e-6, max_iter=100_000, predictor_names=None, target=None) -> LassoFit:
    """Minimise sum (y - X b)^2 + lam * ||b||_1 to KKT tolerance ``tol``."""
    if lam < 0:
        raise ConfigError("lam must be non-negative")
    if tol <= 0:
        raise ConfigError("tol must be positive")
    Xstd, yc, y_mean, x_mean, scale, kept = _lasso_std(X, y)
    beta_k, _ = _LassoProblem(Xstd, yc).solve(float(lam), eps=max(tol * 0.1, 1e-12),
                                              certify_tol=tol, max_iter=max_iter)
    return LassoFit(
        beta=_expand(beta_k, kept, scale.shape[0]),
        lam=float(lam),
        y_mean=y_mean,
        x_mean=x_mean,
        x_scale=scale,
        predictor_names=tuple(predictor_names) if predictor_names else None,
        target=target,
    )


def lasso_kkt_residual(fit: LassoFit, X, y) -> float:
    """KKT residual of a lasso fit evaluated on its recorded standardization."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    kept = fit.x_scale > 0
    Xstd = (X[:, kept] - fit.x_mean[kept]) / fit.x_scale[kept]
    return _lasso_kkt_core(Xstd, y - fit.y_mean, fit.beta[kept], fit.lam)


# ---------------------------------------------------------------------------
# hyperparameter grids
# ---------------------------------------------------------------------------

def lasso_lambda_max(X, y) -> float:
    """Smallest penalty that provably zeroes all lasso coefficients."""
    Xstd, yc, *_ = _lasso_std(X, y)
    if Xstd.shape[1] == 0:
        return 0.0
    return 2.0 * float(np.abs(Xstd.T @ yc).max())


def fused_lambda_max(design) -> float:
    """Zero-solution threshold for the fused objective on standardized data.

    At the all-zero point the fusion subgradients can be taken as zero, so
    the stacked KKT condition reduces to 2 * ||Xaug' y||_inf <= lam.
    """
    _, Xs, ys = standardize_design(design)
    if not Xs or Xs[0].shape[1] == 0:
        return 0.0
    blocks = [x.T @ y for x, y in zip(Xs, ys)]
    top = sum(blocks)
    m = max(float(np.abs(b).max()) for b in blocks + [top])
    return 2.0 * m


def lambda_grid_from(lam_max: float, num: int = 50, min_ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced descending path from the zero-solution threshold."""
    if num < 1:
        raise ConfigError("lambda grid needs at least one point")
    lam_max = max(float(lam_max), 1e-12)
    if num == 1:
        return np.array([lam_max])
    return lam_max * np.logspace(0.0, math.log10(min_ratio), num)


def gamma_grid_from(lam_max: float, num: int = 10, lo: float = 1e-2, hi: float = 1e2) -> np.ndarray:
    """Log-spaced descending fusion path spanning [lo, hi] * lam_max."""
    if num < 1:
        raise ConfigError("gamma grid needs at least one point")
    lam_max = max(float(lam_max), 1e-12)
    if num == 1:
        return np.array([lam_max * hi])
    return lam_max * np.logspace(math.log10(hi), math.log10(lo), num)


def _check_descending(grid, name) -> np.ndarray:
    arr = np.asarray(grid, dtype=float)
    if arr.size == 0:
        raise ConfigError(f"{name} grid is empty")
    if np.any(np.diff(arr) > 0):
        raise ConfigError(f"{name} grid must be sorted descending")
    if np.any(arr < 0):
        raise ConfigError(f"{name} grid has negative entries")
    return arr


# ---------------------------------------------------------------------------
# cross-validated selection
# ---------------------------------------------------------------------------

def cv_lasso(X, y, lambda_grid, inner_folds, seed, tol=1e-6, max_iter=100_000,
             predictor_names=None, target=None) -> LassoFit:
    """Select lam by seeded inner CV (ties toward larger lam), then refit.

    Falls back to leave-one-out when the training set is smaller than
    ``inner_folds``; a single sample is an error.
    """
    grid = _check_descending(lambda_grid, "lambda")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 2:
        raise DataError("cross-validated lasso needs at least two samples")
    if inner_folds < 2:
        raise ConfigError("inner_folds must be at least 2")
    k = min(inner_folds, n)
    rng = np.random.default_rng(seed)
    fold_id = np.empty(n, dtype=int)
    fold_id[rng.permutation(n)] = np.arange(n) % k
    tol_inner = max(tol, 1e-5)
    mse = np.zeros((k, grid.size))
    for fold in range(k):
        te = fold_id == fold
        tr = ~te
        Xstd, yc, y_mean, x_mean, scale, kept = _lasso_std(X[tr], y[tr])
        Xte = np.zeros((int(te.sum()), int(kept.sum())))
        Xte[:, :] = (X[np.ix_(te, np.flatnonzero(kept))] - x_mean[kept]) / scale[kept]
        problem = _LassoProblem(Xstd, yc)
        state = None
        for li, lam in enumerate(grid):
            beta, state = problem.solve(float(lam), state, eps=tol_inner, max_iter=max_iter)
            pred = y_mean + Xte @ beta
            mse[fold, li] = float(np.mean((pred - y[te]) ** 2))
    means = mse.mean(axis=0)
    best = 0
    for li in range(1, grid.size):
        if means[li] < means[best] * (1.0 - _TIE_RTOL):
            best = li
    return fit_lasso(X, y, float(grid[best]), tol=tol, max_iter=max_iter,
                     predictor_names=predictor_names, target=target)


def cv_fused(design, lambda_grid, gamma_grid, weights=None, inner_folds=5, seed=0,
             tol=1e-6, max_iter=100_000) -> FusedFit:
    """Select (lam, gam) by group-stratified inner CV, then refit on all rows.

    Inner folds are dealt round-robin within each habitat so every habitat
    appears in every inner training set. Ties break toward larger lam,
    then larger gam.
    """
    lam_grid = _check_descending(lambda_grid, "lambda")
    gam_grid = np.sort(np.asarray(gamma_grid, dtype=float))[::-1]
    if gam_grid.size == 0:
        raise ConfigError("gamma grid is empty")
    if np.any(gam_grid < 0):
        raise ConfigError("gamma grid has negative entries")

    y = np.asarray(design.response, dtype=float)
    X = np.asarray(design.predictors, dtype=float)
    g = np.asarray(design.group_of_row, dtype=int)
    groups = [int(s) for s in np.unique(g)]
    S = len(groups)
    w = _check_weights(weights, S)
    sizes = {s: int(np.sum(g == s)) for s in groups}
    if min(sizes.values()) < 2:
        raise DataError("every habitat needs at least two samples for inner CV")
    k = min(inner_folds, min(sizes.values()))
    if inner_folds < 2:
        raise ConfigError("inner_folds must be at least 2")
    rng = np.random.default_rng(seed)
    fold_id = np.empty(y.shape[0], dtype=int)
    for s in groups:
        idx = np.flatnonzero(g == s)
        order = rng.permutation(idx.size)
        fold_id[idx[order]] = np.arange(idx.size) % k

    tol_inner = max(tol, 1e-5)
    mse = np.zeros((k, gam_grid.size, lam_grid.size))
    for fold in range(k):
        te = fold_id == fold
        tr = ~te
        sub = _SubDesign(y[tr], X[tr], g[tr])
        std, Xs, ys = standardize_design(sub)
        problem = _FusedProblem(Xs, ys, w)
        kept = std.x_scale > 0
        te_idx = np.flatnonzero(te)
        te_pos = np.array([std.position(gi) for gi in g[te_idx]])
        Xte = np.stack([std.apply_x(X[i : i + 1], pos)[0, kept]
                        for i, pos in zip(te_idx, te_pos)]) if te_idx.size else np.zeros((0, int(kept.sum())))
        yte = y[te_idx]
        p = problem.p
        for gi, gam in enumerate(gam_grid):
            state = None
            for li, lam in enumerate(lam_grid):
                theta, state, _ = problem.solve(float(lam), float(gam), state,
                                                eps=tol_inner, max_iter=max_iter)
                B = theta.reshape(S + 1, p) if p else np.zeros((S + 1, 0))
                coef = B[0][None, :] + B[1 + te_pos]
                pred = std.y_mean[te_pos] + np.einsum("ij,ij->i", Xte, coef)
                mse[fold, gi, li] = float(np.mean((pred - yte) ** 2))
    means = mse.mean(axis=0)
    best_li, best_gi = 0, 0
    for li in range(lam_grid.size):
        for gi in range(gam_grid.size):
            if means[gi, li] < means[best_gi, best_li] * (1.0 - _TIE_RTOL):
                best_li, best_gi = li, gi
    return fit_fused(design, float(lam_grid[best_li]), float(gam_grid[best_gi]),
                     weights=w, tol=tol, max_iter=max_iter)


class _SubDesign:
    """Row-subset view with just the fields the solver needs."""

    __slots__ = ("response", "predictors", "group_of_row")

    def __init__(self, response, predictors, group_of_row):
        self.response = response
        self.predictors = predictors
        self.group_of_row = group_of_row


# ---------------------------------------------------------------------------
# fit serialization
# ---------------------------------------------------------------------------

def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(v, dtype=float).ravel())


def _parse_vec(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split(",")]) if s else np.zeros(0)


def save_fit(fit, path) -> None:
    """Write a fit as a flat text record that reloads bit-identically."""
    lines = []
    if isinstance(fit, FusedFit):
        std = fit.centering
        lines += [
            "type=fused",
            f"lam={repr(fit.lam)}",
            f"gam={repr(fit.gam)}",
            f"groups={','.join(str(s) for s in std.groups)}",
            f"weights={_fmt_vec(fit.weights)}",
            f"y_mean={_fmt_vec(std.y_mean)}",
            f"x_scale={_fmt_vec(std.x_scale)}",
            f"beta0={_fmt_vec(fit.beta0)}",
        ]
        for pos, s in enumerate(std.groups):
            lines.append(f"x_mean.{s}={_fmt_vec(std.x_mean[pos])}")
            lines.append(f"dev.{s}={_fmt_vec(fit.deviations[pos])}")
    elif isinstance(fit, LassoFit):
        lines += [
            "type=lasso",
            f"lam={repr(fit.lam)}",
            f"y_mean={repr(fit.y_mean)}",
            f"x_mean={_fmt_vec(fit.x_mean)}",
            f"x_scale={_fmt_vec(fit.x_scale)}",
            f"beta={_fmt_vec(fit.beta)}",
        ]
    elif isinstance(fit, FeaturelessFit):
        lines += ["type=featureless", f"constant={repr(fit.constant)}"]
    else:
        raise ConfigError(f"cannot serialize fit of type {type(fit).__name__}")
    names = getattr(fit, "predictor_names", None)
    if names:
        lines.append(f"predictor_names={json.dumps(list(names))}")
    target = getattr(fit, "target", None)
    if target:
        lines.append(f"target={json.dumps(target)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_fit(path):
    """Reload a fit written by :func:`save_fit`."""
    fields: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key] = value
    kind = fields.get("type")
    names = tuple(json.loads(fields["predictor_names"])) if "predictor_names" in fields else None
    target = json.loads(fields["target"]) if "target" in fields else None
    if kind == "featureless":
        return FeaturelessFit(constant=float(fields["constant"]))
    if kind == "lasso":
        return LassoFit(
            beta=_parse_vec(fields["beta"]),
            lam=float(fields["lam"]),
            y_mean=float(fields["y_mean"]),
            x_mean=_parse_vec(fields["x_mean"]),
            x_scale=_parse_vec(fields["x_scale"]),
            predictor_names=names,
            target=target,
        )
    if kind == "fused":
        groups = tuple(int(s) for s in fields["groups"].split(","))
        S = len(groups)
        x_scale = _parse_vec(fields["x_scale"])
        p = x_scale.shape[0]
        std = Standardization(
            groups=groups,
            y_mean=_parse_vec(fields["y_mean"]),
            x_mean=np.stack([_parse_vec(fields[f"x_mean.{s}"]) for s in groups]) if p else np.zeros((S, 0)),
            x_scale=x_scale,
        )
        return FusedFit(
            beta0=_parse_vec(fields["beta0"]),
            deviations=np.stack([_parse_vec(fields[f"dev.{s}"]) for s in groups]) if p else np.zeros((S, 0)),
            lam=float(fields["lam"]),
            gam=float(fields["gam"]),
            weights=_parse_vec(fields["weights"]).reshape(S, S),
            centering=std,
            predictor_names=names,
            target=target,
        )
    raise DataError(f"{path}: unknown fit record type {kind!r}")
