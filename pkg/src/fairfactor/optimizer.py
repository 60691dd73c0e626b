"""Penalized objectives, analytic gradients, and projected gradient descent.

Both fair fits minimize

    total_error(L) + penalty * sum_{k<k'} (err_k(L) - err_k'(L))^2

over loadings with L^T L / N = I_r, by gradient steps followed by the scaled
polar projection L <- sqrt(N) * nearest_orthonormal(L - eta * grad). The
factor model measures reconstruction error per group; the decision model
measures the error of a transform g applied to reconstructions.

The factor gradient follows the classical trace form: it is the exact
gradient of the objective with the orthonormality constraint substituted in,
which differs from the unconstrained Frobenius gradient by a component normal
to the constraint set. Finite-difference checks must therefore target the
substituted (restricted) objective; on feasible loadings the two objective
forms coincide.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import GroupedPanel
from .factor import (
    FactorPath,
    FitResult,
    Loading,
    fit_pca,
    fix_column_signs,
    group_errors,
    pairwise_unfairness,
    reconstruction_error,
)
from .linalg import RankDeficientError, nearest_orthonormal
from .transforms import (
    ClipCounter,
    DecisionTransform,
    apply_transform,
    decision_errors,
    epv_matrix,
    epv_weights_stack,
)

__all__ = [
    "GridSpec",
    "OptimizerOptions",
    "StepFailureError",
    "fair_factor_objective",
    "fair_factor_gradient",
    "fit_fair_factor",
    "fair_decision_objective",
    "fair_decision_gradient",
    "annuity_taylor_objective",
    "fit_fair_decision",
    "line_search",
    "random_loading",
]

_IMPROVEMENT_TOL = 1e-12  # a line-search step may never lose more than this
_STAGNATION_TOL = 1e-14
_STAGNATION_LIMIT = 20


class StepFailureError(RuntimeError):
    """Every step on the current grid left the iterate rank-deficient."""


@dataclass(frozen=True)
class GridSpec:
    """Geometric step grid; when relative, spans [lo, hi] * ||L||_F / ||grad||_F."""

    points: int = 25
    lo: float = 1e-6
    hi: float = 10.0
    relative: bool = True

    def values(self) -> np.ndarray:
        if self.points < 1 or self.lo <= 0 or self.hi < self.lo:
            raise ValueError(f"bad grid spec {self}")
        if self.points == 1:
            return np.array([self.lo])
        return np.geomspace(self.lo, self.hi, self.points)


@dataclass(frozen=True)
class OptimizerOptions:
    penalty: float = 0.0
    max_iterations: int = 2000
    convergence_epsilon: float = 1e-6
    line_search: str = "exact-grid"  # or "backtracking"
    grid: GridSpec = field(default_factory=GridSpec)
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.penalty < 0.0:
            raise ValueError("penalty must be non-negative")
        if self.convergence_epsilon <= 0.0:
            raise ValueError("convergence epsilon must be positive")
        if self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("max_iterations and restarts must be at least 1")
        if self.line_search not in ("exact-grid", "backtracking"):
            raise ValueError(f"unknown line search mode {self.line_search!r}")


def random_loading(rng: np.random.Generator, n: int, r: int) -> Loading:
    """Random draw on the scaled orthonormal set (Gaussian then projection)."""
    while True:
        try:
            return Loading(np.sqrt(n) * nearest_orthonormal(rng.standard_normal((n, r))))
        except RankDeficientError:  # pragma: no cover - probability zero
            continue


def _combine(errors: np.ndarray, rows: np.ndarray, total_rows: int, penalty: float) -> float:
    return float(errors @ rows) / total_rows + penalty * pairwise_unfairness(errors)


def _penalized_gradient(
    errors: np.ndarray, grads: list[np.ndarray], rows: np.ndarray, total_rows: int, penalty: float
) -> np.ndarray:
    out = sum((rows[k] / total_rows) * grads[k] for k in range(len(grads)))
    if penalty:
        for k in range(len(grads)):
            for kp in range(k + 1, len(grads)):
                out = out + 2.0 * penalty * (errors[k] - errors[kp]) * (grads[k] - grads[kp])
    return out


class _FactorProblem:
    """Reconstruction errors in the substituted trace form, from Gram matrices."""

    def __init__(self, data: GroupedPanel, penalty: float):
        self.penalty = penalty
        self.N = data.n_ages
        self.rows = data.group_rows
        self.total_rows = data.total_rows
        self.grams = [p.y.T @ p.y for p in data.panels]
        self.sq = [float((p.y**2).sum()) for p in data.panels]
        self.Y = data.stacked()

    def errors(self, loading: Loading) -> np.ndarray:
        M = loading.matrix
        return np.array(
            [
                (self.sq[k] - float((M * (self.grams[k] @ M)).sum()) / self.N) / self.rows[k]
                for k in range(len(self.grams))
            ]
        )

    def errors_batch(self, stack: np.ndarray) -> np.ndarray:
        """(B, K) errors for a (B, N, r) stack of candidate loadings."""
        out = np.empty((stack.shape[0], len(self.grams)))
        for k, gram in enumerate(self.grams):
            GM = np.matmul(gram, stack)
            out[:, k] = (self.sq[k] - (stack * GM).sum(axis=(1, 2)) / self.N) / self.rows[k]
        return out

    def errors_and_grads(self, loading: Loading):
        M = loading.matrix
        errors, grads = [], []
        for k, gram in enumerate(self.grams):
            GM = gram @ M
            errors.append((self.sq[k] - float((M * GM).sum()) / self.N) / self.rows[k])
            grads.append((-2.0 / (self.rows[k] * self.N)) * GM)
        return np.array(errors), grads

    def objective(self, loading: Loading) -> float:
        return _combine(self.errors(loading), self.rows, self.total_rows, self.penalty)

    def gradient(self, loading: Loading) -> np.ndarray:
        errors, grads = self.errors_and_grads(loading)
        return _penalized_gradient(errors, grads, self.rows, self.total_rows, self.penalty)

    def stop_signal(self, loading: Loading) -> np.ndarray:
        return (self.Y @ loading.matrix) @ loading.matrix.T / self.N


class _DecisionProblem:
    """Decision errors for a transform g, with the matching analytic gradients.

    Per sample the gradient of ||g(L L^T y / N) - g(y)||^2 is
    (2/N) [z y^T L + y z^T L] with z = g'(recon) * (g(recon) - g(y)); group
    terms stack as (2/(T_k N)) (Z^T Y + Y^T Z) L. For the annuity transform in
    taylor mode, g(recon) - g(y) is replaced by W (m_recon - m_obs) with the
    derivative weights W frozen at the observed rates.
    """

    def __init__(self, data: GroupedPanel, g: DecisionTransform, penalty: float):
        self.g = g
        self.penalty = penalty
        self.N = data.n_ages
        self.rows = data.group_rows
        self.total_rows = data.total_rows
        self.panels = data.panels
        self.ys = [p.y for p in data.panels]
        if g.kind == "annuity":
            self.intercepts = [g.intercept_for(p.group) for p in data.panels]
            self.m_obs = [
                np.clip(np.exp(p.y + a), 0.0, 1.0) for p, a in zip(data.panels, self.intercepts)
            ]
            if g.annuity_mode == "taylor":
                # band-compact weights: row i of W_t is nonzero in columns i..i+n-2
                dense = [epv_weights_stack(m, g.term, g.discount) for m in self.m_obs]
                width = dense[0].shape[1]
                rows_idx = np.arange(width)[:, None]
                cols = rows_idx + np.arange(max(g.term - 1, 0))[None, :]
                self.bands = [W[:, rows_idx, cols] for W in dense]
            self.epv_obs = [epv_matrix(m, g.term, g.discount) for m in self.m_obs]
        elif g.kind == "elementwise":
            func, deriv = g.funcs()
            self.func, self.deriv = func, deriv
            self.g_obs = [func(p.y) for p in data.panels]
        else:  # identity
            self.g_obs = [p.y for p in data.panels]

    def _recon(self, k: int, M: np.ndarray) -> np.ndarray:
        return (self.ys[k] @ M) @ M.T / self.N

    def _error_parts(self, k: int, M: np.ndarray):
        """Return (error_k, Z_k) where Z_k stacks the per-sample z vectors."""
        recon = self._recon(k, M)
        if self.g.kind == "identity":
            e = recon - self.g_obs[k]
            return float((e * e).sum()) / self.rows[k], e
        if self.g.kind == "elementwise":
            g_recon = self.func(recon)
            e = g_recon - self.g_obs[k]
            return float((e * e).sum()) / self.rows[k], self.deriv(recon) * e
        m_recon = np.exp(recon + self.intercepts[k])
        if self.g.annuity_mode == "taylor":
            e = m_recon - self.m_obs[k]
            band = self.bands[k]
            width = band.shape[1]
            we = np.zeros((e.shape[0], width))
            for j in range(band.shape[2]):
                we += band[:, :, j] * e[:, j : j + width]
            u = np.zeros_like(e)  # W^T W e through the band
            for j in range(band.shape[2]):
                u[:, j : j + width] += band[:, :, j] * we
            return float((we * we).sum()) / self.rows[k], m_recon * u
        inside = m_recon <= 1.0  # clipping zeroes the sensitivity above 1
        m_clip = np.clip(m_recon, 0.0, 1.0)
        d = epv_matrix(m_clip, self.g.term, self.g.discount) - self.epv_obs[k]
        W = epv_weights_stack(m_clip, self.g.term, self.g.discount)
        u = np.matmul(W.transpose(0, 2, 1), d[:, :, None])[:, :, 0]  # W(m_recon)^T d
        return float((d * d).sum()) / self.rows[k], np.where(inside, m_recon, 0.0) * u

    def errors(self, loading: Loading) -> np.ndarray:
        M = loading.matrix
        return np.array([self._error_parts(k, M)[0] for k in range(len(self.ys))])

    def errors_batch(self, stack: np.ndarray) -> np.ndarray:
        out = np.empty((stack.shape[0], len(self.ys)))
        for k, Y in enumerate(self.ys):
            C = np.matmul(Y, stack)  # (B, T, r)
            recon = np.matmul(C, stack.transpose(0, 2, 1)) / self.N  # (B, T, N)
            if self.g.kind == "identity":
                e = recon - Y[None]
            elif self.g.kind == "elementwise":
                e = self.func(recon) - self.g_obs[k][None]
            elif self.g.annuity_mode == "taylor":
                diff = np.exp(recon + self.intercepts[k]) - self.m_obs[k][None]
                band = self.bands[k]
                width = band.shape[1]
                e = np.zeros((stack.shape[0], diff.shape[1], width))
                for j in range(band.shape[2]):
                    e += band[None, :, :, j] * diff[:, :, j : j + width]
            else:  # exact pricing has no batched form; fall back per candidate
                out[:, k] = [self._error_parts(k, stack[b])[0] for b in range(stack.shape[0])]
                continue
            out[:, k] = (e * e).sum(axis=(1, 2)) / self.rows[k]
        return out

    def errors_and_grads(self, loading: Loading):
        M = loading.matrix
        errors, grads = [], []
        for k, Y in enumerate(self.ys):
            err, Z = self._error_parts(k, M)
            errors.append(err)
            C = Z.T @ Y + Y.T @ Z
            grads.append((2.0 / (self.rows[k] * self.N)) * (C @ M))
        return np.array(errors), grads

    def objective(self, loading: Loading) -> float:
        return _combine(self.errors(loading), self.rows, self.total_rows, self.penalty)

    def gradient(self, loading: Loading) -> np.ndarray:
        errors, grads = self.errors_and_grads(loading)
        return _penalized_gradient(errors, grads, self.rows, self.total_rows, self.penalty)

    def stop_signal(self, loading: Loading) -> np.ndarray:
        M = loading.matrix
        blocks = []
        for k, p in enumerate(self.panels):
            blocks.append(apply_transform(self.g, p.group, self._recon(k, M)))
        return np.vstack(blocks)


def fair_factor_objective(data: GroupedPanel, loading: Loading, penalty: float) -> float:
    """Reconstruction error of the stacked panel plus the pairwise parity penalty."""
    if penalty < 0.0:
        raise ValueError("penalty must be non-negative")
    total = reconstruction_error(data.stacked(), loading)
    return total + penalty * pairwise_unfairness(group_errors(data, loading))


def fair_factor_gradient(data: GroupedPanel, loading: Loading, penalty: float) -> np.ndarray:
    """Analytic gradient of the substituted fair-factor objective.

    Equals -(2/(T N)) Y^T Y L plus, per group pair, the parity chain-rule term
    4 * penalty * (err_k - err_k') * (G_k' L / (T_k' N) - G_k L / (T_k N)).
    """
    if penalty < 0.0:
        raise ValueError("penalty must be non-negative")
    return _FactorProblem(data, penalty).gradient(loading)


def fair_decision_objective(
    data: GroupedPanel, loading: Loading, penalty: float, g: DecisionTransform
) -> float:
    """Decision error of the stacked panel plus the pairwise parity penalty.

    Uses the transform itself (exact annuity pricing, not the taylor
    surrogate); with g = identity this equals fair_factor_objective.
    """
    if penalty < 0.0:
        raise ValueError("penalty must be non-negative")
    errors = decision_errors(data, loading, g)
    return _combine(errors, data.group_rows, data.total_rows, penalty)


def annuity_taylor_objective(
    data: GroupedPanel, loading: Loading, penalty: float, g: DecisionTransform
) -> float:
    """Quadratic pricing surrogate: per sample ||W_t (m_recon - m_obs)||^2 with
    derivative weights frozen at the observed rates. This is the objective the
    default annuity fit actually minimizes, and the one whose exact gradient
    the annuity decision gradient is."""
    if g.kind != "annuity":
        raise ValueError("the taylor surrogate is defined for the annuity transform only")
    frozen = replace(g, annuity_mode="taylor") if g.annuity_mode != "taylor" else g
    problem = _DecisionProblem(data, frozen, penalty)
    return problem.objective(loading)


def fair_decision_gradient(
    data: GroupedPanel, loading: Loading, penalty: float, g: DecisionTransform
) -> np.ndarray:
    """Analytic gradient of the substituted fair-decision objective.

    Element-wise transforms use the diag(g') sandwich form; the annuity
    transform inserts W^T W with weights frozen at the observed rates (taylor
    mode) or evaluated at the reconstruction (exact mode).
    """
    if penalty < 0.0:
        raise ValueError("penalty must be non-negative")
    return _DecisionProblem(data, g, penalty).gradient(loading)


def line_search(objective, loading: Loading, direction: np.ndarray, opts: OptimizerOptions, _scale: float = 1.0):
    """Step-size search along -direction with the scaled polar projection.

    exact-grid mode returns the grid minimizer; both modes return (0, input)
    rather than any point worse than the current objective. Raises
    StepFailureError when every grid point projects from a rank-deficient
    matrix; callers halve the grid scale and retry.
    """
    L = loading.matrix
    G = np.asarray(direction, dtype=float)
    if G.shape != L.shape:
        raise ValueError(f"direction shape {G.shape} does not match loading {L.shape}")
    current = objective(loading)
    gnorm = float(np.linalg.norm(G))
    if gnorm == 0.0:
        return 0.0, loading
    base = _scale * (float(np.linalg.norm(L)) / gnorm if opts.grid.relative else 1.0)
    sqrt_n = np.sqrt(L.shape[0])
    etas = opts.grid.values() * base
    if opts.line_search == "exact-grid":
        best = None
        for eta in etas:
            try:
                cand = Loading(sqrt_n * nearest_orthonormal(L - eta * G))
            except RankDeficientError:
                continue
            value = objective(cand)
            if best is None or value < best[1]:
                best = (float(eta), value, cand)
        if best is None:
            raise StepFailureError("all grid steps were rank-deficient")
        if best[1] > current + _IMPROVEMENT_TOL:
            return 0.0, loading
        return best[0], best[2]
    eta = float(etas[-1])
    floor = float(etas[0]) * 2.0**-20
    while eta > floor:
        try:
            cand = Loading(sqrt_n * nearest_orthonormal(L - eta * G))
        except RankDeficientError:
            eta *= 0.5
            continue
        if objective(cand) < current:
            return eta, cand
        eta *= 0.5
    return 0.0, loading


def _grid_step(
    problem,
    loading: Loading,
    grad: np.ndarray,
    opts: OptimizerOptions,
    scale: float,
    current: float,
    grid_values: np.ndarray,
):
    """Vectorized exact-grid search: same minimizer as line_search, one pass.

    Projects every grid candidate with one batched SVD and evaluates all of
    them through the problem's batched error kernel. Returns
    (eta, next_loading, next_objective, next_errors or None on no-move).
    """
    L = loading.matrix
    gnorm = float(np.linalg.norm(grad))
    if gnorm == 0.0:
        return 0.0, loading, current, None
    base = scale * (float(np.linalg.norm(L)) / gnorm if opts.grid.relative else 1.0)
    etas = grid_values * base
    stack = L[None] - etas[:, None, None] * grad[None]
    u, s, vt = np.linalg.svd(stack, full_matrices=False)
    valid = (s[:, 0] > 0.0) & (s[:, -1] > 1e-12 * s[:, 0])
    if not valid.any():
        raise StepFailureError("all grid steps were rank-deficient")
    projected = np.sqrt(L.shape[0]) * np.einsum("bij,bjk->bik", u, vt)
    errors = problem.errors_batch(projected)
    values = errors @ (problem.rows / problem.total_rows)
    if problem.penalty:
        K = errors.shape[1]
        for i in range(K):
            for j in range(i + 1, K):
                values = values + problem.penalty * (errors[:, i] - errors[:, j]) ** 2
    values = np.where(valid & np.isfinite(values), values, np.inf)
    best = int(np.argmin(values))
    if values[best] > current + _IMPROVEMENT_TOL:
        return 0.0, loading, current, None
    return float(etas[best]), Loading(projected[best]), float(values[best]), errors[best]


@dataclass
class _RunState:
    loading: Loading
    objective: float
    trace: list[float]
    log: list[dict]
    iterations: int
    converged: bool


def _pgd(problem, start: Loading, opts: OptimizerOptions) -> _RunState:
    loading = start
    errors = problem.errors(loading)
    obj = _combine(errors, problem.rows, problem.total_rows, problem.penalty)
    trace = [obj]
    log: list[dict] = []
    signal = problem.stop_signal(loading)
    signal_norm = float(np.linalg.norm(signal))
    objective = problem.objective
    stagnant = 0
    converged = False
    scale = 1.0
    iterations = 0
    use_grid = opts.line_search == "exact-grid"
    grid_values = opts.grid.values()
    while iterations < opts.max_iterations:
        grad = problem.gradient(loading)
        try:
            if use_grid:
                eta, nxt, obj_next, errors_next = _grid_step(
                    problem, loading, grad, opts, scale, obj, grid_values
                )
                if errors_next is None:  # no admissible improvement: keep the iterate
                    errors_next = errors
            else:
                eta, nxt = line_search(objective, loading, grad, opts, _scale=scale)
                errors_next = problem.errors(nxt)
                obj_next = _combine(errors_next, problem.rows, problem.total_rows, problem.penalty)
        except StepFailureError:
            scale *= 0.5
            if scale < 2.0**-16:
                break
            continue
        iterations += 1
        errors = errors_next
        trace.append(obj_next)
        log.append(
            {
                "iteration": iterations,
                "objective": obj_next,
                "unfairness": pairwise_unfairness(errors),
                "step_size": eta,
            }
        )
        new_signal = problem.stop_signal(nxt)
        diff = float(np.linalg.norm(new_signal - signal))
        rel = 0.0 if diff == 0.0 else diff / max(signal_norm, 1e-300)
        improvement = obj - obj_next
        loading, obj, signal, signal_norm = nxt, obj_next, new_signal, float(np.linalg.norm(new_signal))
        if rel <= opts.convergence_epsilon:
            converged = True
            break
        stagnant = stagnant + 1 if improvement < _STAGNATION_TOL else 0
        if stagnant >= _STAGNATION_LIMIT:
            converged = True
            break
    return _RunState(loading, obj, trace, log, iterations, converged)


def _fit(data: GroupedPanel, r: int, opts: OptimizerOptions, problem, counter: ClipCounter | None, g: DecisionTransform | None) -> FitResult:
    Y = data.stacked()
    T, N = Y.shape
    if not 1 <= r <= min(N, T):
        raise ValueError(f"r={r} out of range [1, {min(N, T)}]")
    pca = fit_pca(data, r)
    rng = np.random.default_rng(opts.seed)
    starts = [pca.loading] + [random_loading(rng, N, r) for _ in range(opts.restarts - 1)]
    best: _RunState | None = None
    for start in starts:
        run = _pgd(problem, start, opts)
        if best is None or run.objective < best.objective:
            best = run
    assert best is not None
    loading = Loading(fix_column_signs(best.loading.matrix))
    if g is None:
        errors = group_errors(data, loading)
    else:
        errors = decision_errors(data, loading, g, counter)
    return FitResult(
        loading=loading,
        factors=tuple(FactorPath(p.group, p.y @ loading.matrix / N) for p in data.panels),
        objective_trace=tuple(best.trace),
        group_errors=errors,
        unfairness=pairwise_unfairness(errors),
        iterations=best.iterations,
        converged=best.converged,
        degenerate_spectrum=pca.degenerate_spectrum,
        groups=data.groups,
        iteration_log=tuple(best.log),
        clipped_rates=counter.clipped if counter is not None else 0,
    )


def fit_fair_factor(data: GroupedPanel, r: int, opts: OptimizerOptions) -> FitResult:
    """Projected gradient descent on the fair-factor objective.

    Starts at the principal-components solution plus restarts-1 random draws
    and keeps the best final objective. Stops when the relative change of the
    reconstruction Y L L^T / N drops below convergence_epsilon, when the
    objective stagnates, or at max_iterations (converged=False).
    """
    return _fit(data, r, opts, _FactorProblem(data, opts.penalty), None, None)


def fit_fair_decision(
    data: GroupedPanel, r: int, opts: OptimizerOptions, g: DecisionTransform
) -> FitResult:
    """Projected gradient descent on the fair-decision objective.

    Same scheme as the fair-factor fit with the transform-aware gradient; the
    stopping rule tracks the relative change of g applied to reconstructions.
    The returned group_errors are the exact per-group decision errors, also
    when the annuity fit optimizes the taylor surrogate.
    """
    counter = ClipCounter()
    problem = _DecisionProblem(data, g, opts.penalty)
    return _fit(data, r, opts, problem, counter, g)
