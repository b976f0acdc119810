"""One-step-ahead test scoring, self-fed multi-year forecasting and reports.

Test-year predictions are teacher-forced: every input window holds true
(scaled) history. Beyond the last observed year the forecaster rolls forward
on its own outputs, and each step records which window slots still came from
true history so leakage is auditable after the fact.

Anything with a ``window_size`` attribute and a ``predict_scaled(window)``
method can be scored, which keeps oracle and baseline models trivial to write
in tests.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .data import ConsumptionSeries, CoverageError, Scaler, SplitSpec

PLOT_HEADER = "year,truth_twh,pred_lstm,pred_gru,pred_bilstm,pred_convlstm,regime"
PLOT_MODEL_COLUMNS = ("lstm", "gru", "bilstm", "convlstm")


def evaluate(
    model,
    test_pairs: dict[str, list[tuple[int, float]]],
    scaler: Scaler,
    histories: dict[str, ConsumptionSeries],
    per_entity_average: bool = False,
) -> float:
    """Mean absolute error in TWh over all test points.

    Each test year is predicted from the true values of the preceding
    window_size years; residuals are taken after unscaling. The default pools
    every point into one mean; the flag averages per-entity MAEs instead.
    """
    per_entity: list[float] = []
    pooled: list[float] = []
    for entity in sorted(test_pairs):
        errors = [
            abs(pred - truth)
            for _, truth, pred in predict_test_years(
                model, histories[entity], scaler, test_pairs[entity]
            )
        ]
        pooled.extend(errors)
        per_entity.append(float(np.mean(errors)))
    if not pooled:
        raise CoverageError("no test points to evaluate")
    return float(np.mean(per_entity if per_entity_average else pooled))


def predict_test_years(
    model,
    history: ConsumptionSeries,
    scaler: Scaler,
    pairs: list[tuple[int, float]],
) -> list[tuple[int, float, float]]:
    """(year, truth_twh, prediction_twh) rows, teacher-forced from history."""
    n = model.window_size
    out = []
    for year, truth in pairs:
        if year - n < history.first_year:
            raise CoverageError(
                f"{history.entity}: need {n} years before {year}, history starts "
                f"{history.first_year}"
            )
        window = [history.value_at(y) for y in range(year - n, year)]
        pred_scaled = model.predict_scaled(scaler.scale(window, history.entity))
        pred = float(scaler.unscale(pred_scaled, history.entity))
        out.append((year, truth, pred))
    return out


@dataclass(frozen=True)
class ForecastTrajectory:
    """Self-fed yearly predictions with a leakage audit trail.

    ``true_years_used[k]`` lists the years whose true values sat in the input
    window when predicting ``years[k]``; everything else was self-fed.
    """

    entity: str
    years: tuple[int, ...]
    values: tuple[float, ...]
    true_years_used: tuple[tuple[int, ...], ...]


def autoregressive_forecast(
    model, history: ConsumptionSeries, scaler: Scaler, horizon_end_year: int = 2025
) -> ForecastTrajectory:
    """Roll forward one year at a time, feeding predictions back as inputs."""
    if horizon_end_year <= history.last_year:
        raise ValueError(
            f"horizon {horizon_end_year} is not after the last observed year "
            f"{history.last_year}"
        )
    n = model.window_size
    if len(history.years) < n:
        raise CoverageError(f"{history.entity}: history shorter than window {n}")
    window = [
        (year, float(scaler.scale(history.value_at(year), history.entity)), True)
        for year in history.years[-n:]
    ]
    years, values, audits = [], [], []
    for year in range(history.last_year + 1, horizon_end_year + 1):
        audits.append(tuple(y for y, _, is_true in window if is_true))
        pred_scaled = model.predict_scaled([v for _, v, _ in window])
        years.append(year)
        values.append(float(scaler.unscale(pred_scaled, history.entity)))
        window = window[1:] + [(year, pred_scaled, False)]
    return ForecastTrajectory(
        entity=history.entity,
        years=tuple(years),
        values=tuple(values),
        true_years_used=tuple(audits),
    )


@dataclass
class ForecastReport:
    """Fig-9-style bundle: truth, test predictions and forecasts per model."""

    histories: dict[str, ConsumptionSeries]
    split: SplitSpec
    horizon_end_year: int
    # model label -> entity -> {year: value in TWh}
    test_preds: dict[str, dict[str, dict[int, float]]]
    forecasts: dict[str, dict[str, ForecastTrajectory]]


def build_report(
    models: dict[str, object],
    histories: dict[str, ConsumptionSeries],
    scaler: Scaler,
    split: SplitSpec = SplitSpec(),
    horizon_end_year: int = 2025,
) -> ForecastReport:
    """Score test years and roll forecasts for every (model, entity) pair."""
    test_preds: dict[str, dict[str, dict[int, float]]] = {}
    forecasts: dict[str, dict[str, ForecastTrajectory]] = {}
    s0, s1 = split.test_years
    for label, model in models.items():
        test_preds[label] = {}
        forecasts[label] = {}
        for entity, history in histories.items():
            pairs = [(y, history.value_at(y)) for y in range(s0, s1 + 1)]
            test_preds[label][entity] = {
                year: pred for year, _, pred in predict_test_years(model, history, scaler, pairs)
            }
            forecasts[label][entity] = autoregressive_forecast(
                model, history, scaler, horizon_end_year
            )
    return ForecastReport(
        histories=dict(histories),
        split=split,
        horizon_end_year=horizon_end_year,
        test_preds=test_preds,
        forecasts=forecasts,
    )


def growth_summary(report: ForecastReport) -> dict[str, float]:
    """Per model: mean over entities of (forecast at horizon - last truth)."""
    out = {}
    for label, per_entity in report.forecasts.items():
        missing = sorted(set(report.histories) - set(per_entity))
        if missing:
            raise CoverageError(f"{label}: no forecast for {', '.join(missing)}")
        deltas = []
        for entity, history in report.histories.items():
            traj = per_entity[entity]
            deltas.append(traj.values[-1] - history.value_at(history.last_year))
        out[label] = float(np.mean(deltas))
    return out


def emit_plot_series(report: ForecastReport, entity: str) -> str:
    """CSV text for one entity: truth, per-model predictions and the regime.

    Rows run from the first history year to the forecast horizon. Truth is
    blank beyond observed years; prediction columns are blank where a model
    has no value (all of history, or the model was not supplied).
    """
    if entity not in report.histories:
        raise KeyError(f"unknown entity {entity!r}")
    history = report.histories[entity]
    train_end = report.split.train_years[1]
    test_end = report.split.test_years[1]

    def fmt(v: float | None) -> str:
        return "" if v is None else f"{v:.6f}"

    buf = io.StringIO()
    buf.write(PLOT_HEADER + "\n")
    for year in range(history.first_year, report.horizon_end_year + 1):
        truth = history.value_at(year) if year <= history.last_year else None
        cols = [str(year), fmt(truth)]
        for label in PLOT_MODEL_COLUMNS:
            value: float | None = None
            if label in report.test_preds:
                value = report.test_preds[label].get(entity, {}).get(year)
            if value is None and label in report.forecasts:
                traj = report.forecasts[label].get(entity)
                if traj is not None and year in traj.years:
                    value = traj.values[traj.years.index(year)]
            cols.append(fmt(value))
        regime = "history" if year <= train_end else ("test" if year <= test_end else "forecast")
        cols.append(regime)
        buf.write(",".join(cols) + "\n")
    return buf.getvalue()
