"""End-to-end stages shared by the command-line entry points.

Every stage is a pure function from a RunConfig (plus loaded inputs) to
in-memory results; artifact files are written through ArtifactWriter so a
failed run never leaves partial outputs and every file carries the config
hash and seed.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataset import (
    DataError,
    GroupedPanel,
    build_panel,
    panels_to_csv,
    parse_hmd_1x1,
    split_train_test,
    synthesize,
)
from .factor import FitResult, fit_pca
from .forecasting import fit_factor_models, predict_epv, predict_mortality
from .metrics import MetricsReport, cross_validate_lambda, metrics
from .optimizer import GridSpec, OptimizerOptions, fit_fair_decision, fit_fair_factor
from .transforms import (
    DecisionTransform,
    annuity_transform_for,
    epv_matrix,
    epv_width,
    identity_transform,
)

MODEL_ORDER = ("factor", "fair-factor", "fair-decision")


class ArtifactWriter:
    """Writes deterministic artifacts under one directory, removing them on failure."""

    def __init__(self, out_dir: str | Path, config_hash: str, seed: int):
        if not str(out_dir):
            raise ConfigError("an output directory is required (set out=...)")
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = f"# config_hash={config_hash} seed={seed}"
        self.meta = {"config_hash": config_hash, "seed": seed}
        self.written: list[Path] = []

    def _open(self, name: str):
        path = self.dir / name
        self.written.append(path)
        return path

    def write_text_rows(self, name: str, header_row: str, rows) -> Path:
        path = self._open(name)
        with path.open("w") as fh:
            fh.write(self.header + "\n")
            fh.write(header_row + "\n")
            for row in rows:
                fh.write(row + "\n")
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self._open(name)
        with path.open("w") as fh:
            json.dump({"meta": self.meta, **payload}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    def write_jsonl(self, name: str, records) -> Path:
        path = self._open(name)
        with path.open("w") as fh:
            fh.write(self.header + "\n")
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    def write_panels(self, name: str, panels) -> Path:
        path = self._open(name)
        with path.open("w") as fh:
            fh.write(self.header + "\n")
            panels_to_csv(panels, fh)
        return path

    def discard_all(self) -> None:
        for path in self.written:
            try:
                path.unlink()
            except OSError:
                pass


def fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class PreparedData:
    train: GroupedPanel
    test: GroupedPanel
    full: GroupedPanel


def load_panels(config: RunConfig) -> PreparedData:
    """Parse the configured files and build train/test panels per group."""
    tables = {}
    train_panels, test_panels, full_panels = [], [], []
    for group in config.groups:
        path = config.data_path_for(group)
        if path not in tables:
            text = Path(path).read_text()
            tables[path] = parse_hmd_1x1(text)
        table = tables[path]
        years = table.years
        if len(years) == 0:
            raise DataError(f"{path}: no data rows")
        y_lo = config.year_min if config.year_min is not None else int(years.min())
        y_hi = config.year_max if config.year_max is not None else int(years.max())
        panel = build_panel(
            table,
            group,
            ages=(config.age_min, config.age_max),
            years=(y_lo, y_hi),
            standardize=config.standardize,
        )
        train, test = split_train_test(panel, config.train_cutoff)
        full_panels.append(panel)
        train_panels.append(train)
        test_panels.append(test)
    return PreparedData(
        train=GroupedPanel(tuple(train_panels)),
        test=GroupedPanel(tuple(test_panels)),
        full=GroupedPanel(tuple(full_panels)),
    )


def optimizer_options(config: RunConfig, penalty: float) -> OptimizerOptions:
    return OptimizerOptions(
        penalty=penalty,
        max_iterations=config.max_iterations,
        convergence_epsilon=config.epsilon,
        line_search=config.line_search,
        grid=GridSpec(),
        restarts=config.restarts,
        seed=config.seed,
    )


def transform_for_model(config: RunConfig, model: str, train: GroupedPanel) -> DecisionTransform:
    if model == "fair-decision":
        return annuity_transform_for(
            train, term=config.term, discount=config.discount, annuity_mode=config.annuity_mode
        )
    return identity_transform()


def fit_model(config: RunConfig, model: str, train: GroupedPanel, penalty: float) -> FitResult:
    if model == "factor":
        return fit_pca(train, config.r)
    opts = optimizer_options(config, penalty)
    if model == "fair-factor":
        return fit_fair_factor(train, config.r, opts)
    g = transform_for_model(config, model, train)
    return fit_fair_decision(train, config.r, opts, g)


def forecast_for_fit(config: RunConfig, data: PreparedData, fit: FitResult, horizon: int):
    models = fit_factor_models(fit)
    intercepts = {p.group: p.intercept for p in data.train.panels}
    scales = {p.group: p.scale for p in data.train.panels}
    result = predict_mortality(fit, models, intercepts, horizon, scales=scales)
    return result, models


def forecast_years(data: PreparedData, horizon: int) -> dict[str, np.ndarray]:
    return {
        p.group: p.years[-1] + 1 + np.arange(horizon) for p in data.train.panels
    }


def resolve_horizon(config: RunConfig, data: PreparedData) -> int:
    if config.horizon > 0:
        return config.horizon
    return min(p.n_years for p in data.test.panels)


def tidy_metric_rows(model: str, report: MetricsReport, ages, years_by_group) -> list[str]:
    """Rows of the documented metrics.csv schema: model,quantity,group,scope,key,value."""
    rows = [f"{model},{report.quantity},,total,,{fmt(report.rmse_total)}"]
    rows.append(f"{model},{report.quantity},,fairness,,{fmt(report.fairness_difference)}")
    for g, rmse in zip(report.groups, report.rmse_by_group):
        rows.append(f"{model},{report.quantity},{g},group,,{fmt(rmse)}")
    for g in report.groups:
        for label, value in zip(ages, report.rmse_by_age[g]):
            rows.append(f"{model},{report.quantity},{g},age,{label},{fmt(value)}")
        for label, value in zip(years_by_group[g], report.rmse_by_year[g]):
            rows.append(f"{model},{report.quantity},{g},year,{label},{fmt(value)}")
    return rows


def evaluate_model(
    config: RunConfig,
    data: PreparedData,
    model: str,
    penalty: float,
    predicted_rates: dict[str, np.ndarray] | None = None,
):
    """Fit, forecast over the test window, and score mortality plus EPVs.

    Returns (fit, mortality_report, epv_report, rate_forecasts, epv_actual,
    epv_predicted). With predicted_rates given, skips fitting (fit is None).
    """
    horizon = min(p.n_years for p in data.test.panels)
    actual_rates = {p.group: p.rates()[:horizon] for p in data.test.panels}
    fit = None
    if predicted_rates is None:
        fit = fit_model(config, model, data.train, penalty)
        forecasted, _ = forecast_for_fit(config, data, fit, horizon)
        predicted_rates = forecasted.rates
    else:
        predicted_rates = {g: m[:horizon] for g, m in predicted_rates.items()}
    mortality = metrics(actual_rates, predicted_rates, "mortality")
    epv_actual = {g: epv_matrix(m, config.term, config.discount) for g, m in actual_rates.items()}
    epv_pred = {g: epv_matrix(m, config.term, config.discount) for g, m in predicted_rates.items()}
    epv_report = metrics(epv_actual, epv_pred, "epv")
    return fit, mortality, epv_report, predicted_rates, epv_actual, epv_pred


def run_repro(config: RunConfig, writer: ArtifactWriter) -> dict[str, dict[str, MetricsReport]]:
    """Full pipeline for the three models; emits the two summary tables,
    the tidy metric series, and the optimizer convergence stream."""
    data = load_panels(config)
    horizon = min(p.n_years for p in data.test.panels)
    ages = data.train.panels[0].ages
    years_by_group = {p.group: p.years[:horizon] for p in data.test.panels}
    start_ages = ages[: epv_width(len(ages), config.term)]

    penalties = {
        "factor": 0.0,
        "fair-factor": config.repro_lambda_factor,
        "fair-decision": config.repro_lambda_decision,
    }
    reports: dict[str, dict[str, MetricsReport]] = {}
    tidy_rows: list[str] = []
    convergence: list[dict] = []
    for model in MODEL_ORDER:
        fit, mortality, epv_report, _, _, _ = evaluate_model(config, data, model, penalties[model])
        reports[model] = {"mortality": mortality, "epv": epv_report}
        tidy_rows += tidy_metric_rows(model, mortality, ages, years_by_group)
        tidy_rows += tidy_metric_rows(model, epv_report, start_ages, years_by_group)
        if fit is not None:
            for record in fit.iteration_log:
                convergence.append({"model": model, **record})

    def table_rows(quantity: str) -> list[str]:
        rows = []
        for model in MODEL_ORDER:
            report = reports[model][quantity]
            cells = [fmt(v) for v in report.rmse_by_group]
            rows.append(
                ",".join([model, *cells, fmt(report.fairness_difference), fmt(report.rmse_total)])
            )
        return rows

    group_header = ",".join(f"rmse_{g}" for g in reports["factor"]["mortality"].groups)
    writer.write_text_rows("table1.csv", f"model,{group_header},difference,total", table_rows("mortality"))
    writer.write_text_rows("table2.csv", f"model,{group_header},difference,total", table_rows("epv"))
    writer.write_text_rows("metrics.csv", "model,quantity,group,scope,key,value", tidy_rows)
    writer.write_json(
        "metrics.json",
        {
            "reports": {
                model: {q: reports[model][q].to_json_dict() for q in ("mortality", "epv")}
                for model in MODEL_ORDER
            }
        },
    )
    writer.write_jsonl("convergence.jsonl", convergence)
    return reports


def run_simulate(config: RunConfig, writer: ArtifactWriter) -> None:
    data, truth = synthesize(
        N=config.sim_ages,
        r=config.sim_r,
        group_sizes=config.sim_group_sizes,
        noise_scales=config.sim_noise_scales,
        seed=config.seed,
    )
    writer.write_panels("panels.csv", data.panels)
    writer.write_json(
        "truth.json",
        {
            "loading": truth.loading.tolist(),
            "factors": {g: f.tolist() for g, f in sorted(truth.factors.items())},
            "drifts": {g: d.tolist() for g, d in sorted(truth.drifts.items())},
        },
    )


def run_ingest(config: RunConfig, writer: ArtifactWriter) -> PreparedData:
    data = load_panels(config)
    writer.write_panels("panels_train.csv", data.train.panels)
    writer.write_panels("panels_test.csv", data.test.panels)
    return data


def run_fit(config: RunConfig, writer: ArtifactWriter) -> FitResult:
    data = load_panels(config)
    fit = fit_model(config, config.model, data.train, config.values["lambda"])
    writer.write_json("fit.json", fit.to_json_dict())
    writer.write_jsonl(
        "convergence.jsonl", [{"model": config.model, **rec} for rec in fit.iteration_log]
    )
    return fit


def run_cv(config: RunConfig, writer: ArtifactWriter):
    data = load_panels(config)
    g = transform_for_model(config, config.model, data.train)
    table = cross_validate_lambda(
        data.train,
        config.r,
        config.cv_lambdas,
        k=config.cv_folds,
        lambda_cap=config.cv_lambda_cap,
        g=g,
        opts=optimizer_options(config, 0.0),
        random_folds=config.cv_random_folds,
        jobs=config.jobs,
    )
    rows = [
        f"{fmt(row.penalty)},{fmt(row.cv_error)},{fmt(row.mean_gap)},"
        f"{int(row.feasible)},{int(row.penalty == table.chosen)}"
        for row in table.rows
    ]
    writer.write_text_rows("cv.csv", "lambda,cv_error,mean_gap,feasible,chosen", rows)
    writer.write_json(
        "cv.json",
        {
            "rows": [
                {
                    "lambda": row.penalty,
                    "cv_error": row.cv_error,
                    "mean_gap": row.mean_gap,
                    "feasible": row.feasible,
                }
                for row in table.rows
            ],
            "chosen_lambda": table.chosen,
            "gap_cap": table.gap_cap,
            "fallback": table.fallback,
        },
    )
    return table


def rates_csv_rows(rates: dict[str, np.ndarray], years_by_group, labels) -> list[str]:
    rows = []
    for group in sorted(rates):
        m = rates[group]
        years = years_by_group[group]
        for t in range(m.shape[0]):
            for i in range(m.shape[1]):
                rows.append(f"{group},{int(years[t])},{int(labels[i])},{fmt(m[t, i])}")
    return rows


def run_forecast(config: RunConfig, writer: ArtifactWriter):
    data = load_panels(config)
    horizon = resolve_horizon(config, data)
    fit = fit_model(config, config.model, data.train, config.values["lambda"])
    forecasted, models = forecast_for_fit(config, data, fit, horizon)
    years = forecast_years(data, horizon)
    ages = data.train.panels[0].ages
    writer.write_text_rows(
        "forecast_rates.csv", "group,year,age,value", rates_csv_rows(forecasted.rates, years, ages)
    )
    writer.write_json(
        "models.json",
        {
            "models": {
                g: [m.to_json_dict() for m in cols] for g, cols in sorted(models.items())
            },
            "clipped_rates": forecasted.clipped,
        },
    )
    return forecasted


def run_price(config: RunConfig, writer: ArtifactWriter):
    data = load_panels(config)
    horizon = resolve_horizon(config, data)
    fit = fit_model(config, config.model, data.train, config.values["lambda"])
    forecasted, _ = forecast_for_fit(config, data, fit, horizon)
    g = annuity_transform_for(
        data.train, term=config.term, discount=config.discount, annuity_mode=config.annuity_mode
    )
    epvs = predict_epv(forecasted.rates, g)
    years = forecast_years(data, horizon)
    ages = data.train.panels[0].ages
    start_ages = ages[: epv_width(len(ages), config.term)]
    writer.write_text_rows(
        "epv.csv", "group,year,age,value", rates_csv_rows(epvs, years, start_ages)
    )
    return epvs


def read_rates_csv(path: str) -> dict[str, np.ndarray]:
    """Read a group,year,age,value file back into per-group matrices."""
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("group,"):
                continue
            group, year, age, value = line.split(",")
            cells.setdefault(group, {})[(int(year), int(age))] = float(value)
    out = {}
    for group, data in cells.items():
        years = sorted({y for y, _ in data})
        ages = sorted({a for _, a in data})
        m = np.empty((len(years), len(ages)))
        for t, y in enumerate(years):
            for i, a in enumerate(ages):
                m[t, i] = data[(y, a)]
        out[group] = m
    return out


def run_evaluate(config: RunConfig, writer: ArtifactWriter):
    data = load_panels(config)
    predicted = read_rates_csv(config.predictions) if config.predictions else None
    horizon = min(p.n_years for p in data.test.panels)
    fit, mortality, epv_report, _, _, _ = evaluate_model(
        config, data, config.model, config.values["lambda"], predicted_rates=predicted
    )
    ages = data.train.panels[0].ages
    years_by_group = {p.group: p.years[:horizon] for p in data.test.panels}
    start_ages = ages[: epv_width(len(ages), config.term)]
    rows = tidy_metric_rows(config.model, mortality, ages, years_by_group)
    rows += tidy_metric_rows(config.model, epv_report, start_ages, years_by_group)
    writer.write_text_rows("metrics.csv", "model,quantity,group,scope,key,value", rows)
    writer.write_json(
        "metrics.json",
        {
            "reports": {
                config.model: {
                    "mortality": mortality.to_json_dict(),
                    "epv": epv_report.to_json_dict(),
                }
            }
        },
    )
    return mortality, epv_report
