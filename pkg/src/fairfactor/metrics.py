"""RMSE accuracy/fairness reporting and k-fold cross-validation of the penalty.

Accuracy is reported as RMSE per group, per age, per year, and in total, with
the total satisfying total^2 * T = sum_k T_k * group_k^2. Fairness is the
absolute difference of the per-group RMSEs (largest pairwise gap for K > 2).
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import GroupedPanel
from .optimizer import OptimizerOptions, fit_fair_decision, fit_fair_factor
from .transforms import DecisionTransform, apply_transform

__all__ = [
    "MetricsReport",
    "CvRow",
    "CvTable",
    "metrics",
    "cross_validate_lambda",
]


@dataclass(frozen=True)
class MetricsReport:
    quantity: str  # "mortality" or "epv"
    groups: tuple[str, ...]
    group_rows: np.ndarray  # T_k per group
    rmse_by_group: np.ndarray
    rmse_total: float
    fairness_difference: float
    rmse_by_age: dict[str, np.ndarray]  # per group, one value per column
    rmse_by_year: dict[str, np.ndarray]  # per group, one value per row

    def aggregation_residual(self) -> float:
        """Relative defect of total^2 * T = sum_k T_k * group_k^2 (ideally 0)."""
        T = int(self.group_rows.sum())
        lhs = self.rmse_total**2 * T
        rhs = float(self.group_rows @ (self.rmse_by_group**2))
        return abs(lhs - rhs) / max(abs(rhs), 1e-300)

    def to_json_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "groups": list(self.groups),
            "group_rows": [int(v) for v in self.group_rows],
            "rmse_by_group": {g: float(v) for g, v in zip(self.groups, self.rmse_by_group)},
            "rmse_total": self.rmse_total,
            "fairness_difference": self.fairness_difference,
            "rmse_by_age": {g: [float(v) for v in self.rmse_by_age[g]] for g in self.groups},
            "rmse_by_year": {g: [float(v) for v in self.rmse_by_year[g]] for g in self.groups},
        }


def metrics(
    actual: dict[str, np.ndarray],
    predicted: dict[str, np.ndarray],
    quantity: str,
) -> MetricsReport:
    """RMSE report for per-group matrices of rates or EPVs (rows are years)."""
    if quantity not in ("mortality", "epv"):
        raise ValueError(f"unknown quantity {quantity!r}")
    if set(actual) != set(predicted):
        raise ValueError("actual and predicted cover different groups")
    groups = tuple(sorted(actual))
    by_group = []
    rows = []
    by_age: dict[str, np.ndarray] = {}
    by_year: dict[str, np.ndarray] = {}
    sq_sum = 0.0
    cells = 0
    for g in groups:
        a = np.asarray(actual[g], dtype=float)
        p = np.asarray(predicted[g], dtype=float)
        if a.shape != p.shape:
            raise ValueError(f"group {g!r}: actual {a.shape} vs predicted {p.shape}")
        err2 = (a - p) ** 2
        by_group.append(float(np.sqrt(err2.mean())))
        rows.append(a.shape[0])
        by_age[g] = np.sqrt(err2.mean(axis=0))
        by_year[g] = np.sqrt(err2.mean(axis=1))
        sq_sum += float(err2.sum())
        cells += err2.size
    by_group = np.array(by_group)
    fairness = 0.0
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            fairness = max(fairness, abs(by_group[i] - by_group[j]))
    return MetricsReport(
        quantity=quantity,
        groups=groups,
        group_rows=np.array(rows, dtype=int),
        rmse_by_group=by_group,
        rmse_total=float(np.sqrt(sq_sum / cells)),
        fairness_difference=float(fairness),
        rmse_by_age=by_age,
        rmse_by_year=by_year,
    )


@dataclass(frozen=True)
class CvRow:
    penalty: float
    cv_error: float
    mean_gap: float
    feasible: bool


@dataclass(frozen=True)
class CvTable:
    rows: tuple[CvRow, ...]
    chosen: float
    gap_cap: float
    fallback: bool  # no feasible row; chose the smallest-gap one instead

    def row(self, penalty: float) -> CvRow:
        for r in self.rows:
            if r.penalty == penalty:
                return r
        raise KeyError(penalty)


def _fold_indices(n: int, k: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, k)]


def _fit_for(data: GroupedPanel, r: int, opts: OptimizerOptions, g: DecisionTransform):
    if g.kind == "identity":
        return fit_fair_factor(data, r, opts)
    return fit_fair_decision(data, r, opts, g)


def _evaluate_fold(args):
    data, r, opts, g, fold_sets = args
    train_panels = []
    valid_blocks = []
    valid_rows = 0
    gap_errors = []
    for p, fold in zip(data.panels, fold_sets):
        keep = np.setdiff1d(np.arange(p.n_years), fold)
        train_panels.append(p.take_rows(keep))
        valid_blocks.append((p.group, p.y[fold]))
        valid_rows += len(fold)
    fit = _fit_for(GroupedPanel(tuple(train_panels)), r, opts, g)
    P = fit.loading.projector()
    sq_total = 0.0
    for group, block in valid_blocks:
        observed = apply_transform(g, group, block)
        predicted = apply_transform(g, group, block @ P)
        diff = predicted - observed
        sq = float((diff * diff).sum())
        sq_total += sq
        gap_errors.append(sq / len(block))
    gaps = [
        abs(gap_errors[i] - gap_errors[j])
        for i in range(len(gap_errors))
        for j in range(i + 1, len(gap_errors))
    ]
    return sq_total / valid_rows, max(gaps)


def cross_validate_lambda(
    data: GroupedPanel,
    r: int,
    lambda_grid,
    k: int,
    lambda_cap: float | None,
    g: DecisionTransform,
    opts: OptimizerOptions,
    random_folds: bool = False,
    jobs: int = 1,
) -> CvTable:
    """k-fold search over the penalty grid under the fairness-gap constraint.

    Folds partition each group's rows; contiguous time blocks by default,
    seeded random assignment with random_folds=True. A grid point is feasible
    when its mean validation fairness gap is at most lambda_cap; with
    lambda_cap=None the cap defaults to half the penalty-free gap. The chosen
    penalty minimizes the mean validation error among feasible rows, falling
    back to the smallest-gap row (flagged) when none is feasible.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("empty penalty grid")
    if any(v < 0 for v in grid):
        raise ValueError("penalties must be non-negative")
    if k < 2:
        raise ValueError("need at least two folds")
    for p in data.panels:
        if p.n_years < k:
            raise ValueError(f"group {p.group!r} has {p.n_years} rows, fewer than {k} folds")
    rng = np.random.default_rng(opts.seed) if random_folds else None
    folds_per_group = [_fold_indices(p.n_years, k, rng) for p in data.panels]
    fold_sets = [
        tuple(folds_per_group[gi][j] for gi in range(len(data.panels))) for j in range(k)
    ]

    # the default cap is half the penalty-free gap, so lambda = 0 must be run
    penalties = sorted(set(grid) | {0.0}) if lambda_cap is None else sorted(set(grid))
    tasks = [
        (lam, j, (data, r, replace(opts, penalty=lam), g, fold_sets[j]))
        for lam in penalties
        for j in range(k)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_evaluate_fold, [t[2] for t in tasks]))
    else:
        outcomes = [_evaluate_fold(t[2]) for t in tasks]
    by_penalty: dict[float, list[tuple[float, float]]] = {}
    for (lam, _, _), outcome in zip(tasks, outcomes):
        by_penalty.setdefault(lam, []).append(outcome)

    means = {
        lam: (
            float(np.mean([e for e, _ in vals])),
            float(np.mean([gap for _, gap in vals])),
        )
        for lam, vals in by_penalty.items()
    }
    cap = float(lambda_cap) if lambda_cap is not None else means[0.0][1] / 2.0
    rows = tuple(
        CvRow(penalty=lam, cv_error=means[lam][0], mean_gap=means[lam][1], feasible=means[lam][1] <= cap)
        for lam in grid
    )
    feasible = [row for row in rows if row.feasible]
    if feasible:
        chosen = min(feasible, key=lambda row: (row.cv_error, row.penalty))
        fallback = False
    else:
        chosen = min(rows, key=lambda row: (row.mean_gap, row.penalty))
        fallback = True
    return CvTable(rows=rows, chosen=chosen.penalty, gap_cap=cap, fallback=fallback)
