import csv
import io
import logging
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from pydantic import Field, root_validator, validator

from . import utils
from .exceptions import InvalidInputError
from .models import (
    REPORT_SCENARIO_ORDER,
    AggregationStrategy,
    BaseModel,
    LossCurves,
    PredictionRecord,
    Scenario,
)
from .training import write_loss_curves_csv

logger = logging.getLogger(__name__)

NOT_AVAILABLE = "n/a"
OVERALL_ROW = "Overall"

_COLUMN_TITLES = {s.short_name: s.display_name for s in AggregationStrategy}
_COLUMN_TITLES["multitask"] = "Method 1"

# (train|val) x (total, prof, scen)
_CURVE_STYLES = (("total", "-", "total"), ("prof", "--", "proficiency"), ("scen", ":", "scenario"))


def column_title(column: str) -> str:
    return _COLUMN_TITLES.get(column, column)


def top1_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels):
        raise InvalidInputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise InvalidInputError("Top-1 accuracy of an empty set is undefined")

    return sum(int(p) == int(y) for p, y in zip(predictions, labels)) / len(labels)


# noinspection PyMethodParameters
class ColumnReport(BaseModel):
    overall: float
    per_scenario: Dict[Scenario, Optional[float]]

    @validator("overall")
    def validate_overall(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {value}")

        return value


# noinspection PyMethodParameters
class EvalReport(BaseModel):
    columns: List[str]
    per_column: Dict[str, ColumnReport]
    counts: Dict[Scenario, int]
    sample_ids: List[str] = Field(default_factory=list)
    scenario_accuracy: Optional[float] = None

    @root_validator(skip_on_failure=True)
    def validate_columns(cls, values):
        missing = [c for c in values["columns"] if c not in values["per_column"]]
        if missing:
            raise ValueError(f"report has no results for columns: {', '.join(missing)}")

        return values

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def overall_top1(self) -> float:
        return self.per_column[self.columns[0]].overall

    def overall(self, column: str) -> float:
        return self.per_column[column].overall

    def accuracy(self, column: str, scenario: Scenario) -> Optional[float]:
        return self.per_column[column].per_scenario.get(scenario)


def _report_columns(records: Sequence[PredictionRecord], strategy: Optional[AggregationStrategy]) -> List[str]:
    if strategy is not None:
        return [AggregationStrategy(strategy).short_name]

    columns = list(records[0].columns)
    for record in records:
        if record.columns != columns:
            raise InvalidInputError(f"record {record.sample_id} has columns {record.columns}, expected {columns}")

    # Strategies keep their canonical order; other columns follow as found
    ordered = [s.short_name for s in AggregationStrategy if s.short_name in columns]
    return ordered + [c for c in columns if c not in ordered]


def per_scenario_report(
    records: Sequence[PredictionRecord], strategy: Optional[AggregationStrategy] = None
) -> EvalReport:
    """
    Top-1 accuracy per ground-truth scenario and overall, for one strategy or every column the records carry.

    Scenarios without samples report None and render as "n/a".
    """
    if not records:
        raise InvalidInputError("No prediction records to evaluate")

    for record in records:
        if record.true_scenario is None or record.true_proficiency is None:
            raise InvalidInputError(f"record {record.sample_id} has no ground truth")

    columns = _report_columns(records, strategy)

    groups: Dict[Scenario, List[PredictionRecord]] = OrderedDict((s, []) for s in REPORT_SCENARIO_ORDER)
    for record in records:
        groups[record.true_scenario].append(record)

    per_column = {}
    for column in columns:
        per_scenario = {}
        for scenario, members in groups.items():
            per_scenario[scenario] = (
                top1_accuracy([r.label_for(column) for r in members], [r.true_proficiency for r in members])
                if members
                else None
            )

        overall = top1_accuracy([r.label_for(column) for r in records], [r.true_proficiency for r in records])
        per_column[column] = ColumnReport(overall=overall, per_scenario=per_scenario)

    scenario_accuracy = top1_accuracy([r.predicted_scenario for r in records], [r.true_scenario for r in records])

    return EvalReport(
        columns=columns,
        per_column=per_column,
        counts={s: len(m) for s, m in groups.items()},
        sample_ids=sorted(r.sample_id for r in records),
        scenario_accuracy=scenario_accuracy,
    )


def _format_cell(value: Optional[float]) -> str:
    return NOT_AVAILABLE if value is None else utils.format_percent(value)


def report_rows(report: EvalReport) -> List[Tuple[str, List[Optional[float]]]]:
    rows = [(s.display_name, [report.accuracy(c, s) for c in report.columns]) for s in REPORT_SCENARIO_ORDER]
    rows.append((OVERALL_ROW, [report.overall(c) for c in report.columns]))

    return rows


def report_to_csv(report: EvalReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["scenario"] + report.columns)

    for name, values in report_rows(report):
        writer.writerow([name] + [_format_cell(v) for v in values])

    return buffer.getvalue()


def _bold_best(values: Sequence[Optional[float]]) -> List[str]:
    cells = [_format_cell(v) for v in values]
    rendered = [utils.format_percent(v) for v in values if v is not None]
    if not rendered:
        return cells

    # Compare at display precision so visually tied values are all bolded
    best = max(rendered, key=float)
    return [f"**{c}**" if c != NOT_AVAILABLE and float(c) == float(best) else c for c in cells]


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]

    return "\n".join(lines) + "\n"


def report_to_markdown(report: EvalReport, bold: bool = True) -> str:
    header = ["Scenario"] + [column_title(c) for c in report.columns]
    rows = []
    for name, values in report_rows(report):
        cells = _bold_best(values) if bold and len(values) > 1 else [_format_cell(v) for v in values]
        rows.append([name] + cells)

    table = _markdown_table(header, rows)
    if report.scenario_accuracy is not None:
        table += f"\nScenario recognition accuracy: {utils.format_percent(report.scenario_accuracy)}\n"

    return table


def overall_table_markdown(report: EvalReport) -> str:
    """One-row table of overall accuracy per column, best value in bold."""
    header = [column_title(c) for c in report.columns]
    values = [report.overall(c) for c in report.columns]

    return _markdown_table(header, [_bold_best(values) if len(values) > 1 else [_format_cell(values[0])]])


def write_report(report: EvalReport, output_directory: str) -> str:
    path = os.path.join(output_directory, "report.csv")
    utils.write_text(path, report_to_csv(report))
    utils.write_text(os.path.join(output_directory, "report.md"), report_to_markdown(report))
    utils.write_text(os.path.join(output_directory, "report.json"), report.json(indent=2, sort_keys=True) + "\n")

    summary = ", ".join(f"{c}={utils.format_percent(report.overall(c))}" for c in report.columns)
    logger.info("Overall Top-1: %s", summary)

    return path


class MethodComparison(BaseModel):
    m1_column: str
    m2_columns: List[str]
    deltas: Dict[str, float]
    per_scenario_deltas: Dict[str, Dict[Scenario, Optional[float]]]


def format_delta(value: float) -> str:
    return f"{100.0 * value:+.1f}"


def _check_same_samples(m1_report: EvalReport, m2_report: EvalReport):
    m1_ids, m2_ids = set(m1_report.sample_ids), set(m2_report.sample_ids)
    if m1_ids != m2_ids:
        differing = sorted(m1_ids.symmetric_difference(m2_ids))
        raise InvalidInputError(
            f"Reports cover different evaluation sets; differing sample_ids: {', '.join(differing)}"
        )


def compare_methods(m1_report: EvalReport, m2_report: EvalReport) -> Tuple[MethodComparison, str]:
    """
    Method 2 columns against the Method 1 column: absolute deltas and a markdown document.

    Deltas are raw accuracy differences; only the rendered document rounds them.
    """
    _check_same_samples(m1_report, m2_report)

    m1_column = m1_report.columns[0]

    def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
        if a is None or b is None:
            return None
        return a - b

    deltas = {c: _delta(m2_report.overall(c), m1_report.overall(m1_column)) for c in m2_report.columns}
    per_scenario_deltas = {
        c: {s: _delta(m2_report.accuracy(c, s), m1_report.accuracy(m1_column, s)) for s in REPORT_SCENARIO_ORDER}
        for c in m2_report.columns
    }

    comparison = MethodComparison(
        m1_column=m1_column, m2_columns=m2_report.columns, deltas=deltas, per_scenario_deltas=per_scenario_deltas
    )

    header = ["Scenario", column_title(m1_column)] + [column_title(c) for c in m2_report.columns]
    header += [f"Δ {column_title(c)}" for c in m2_report.columns]

    rows = []
    for (name, m1_values), (_, m2_values) in zip(report_rows(m1_report), report_rows(m2_report)):
        delta_values = [_delta(v, m1_values[0]) for v in m2_values]
        rows.append(
            [name]
            + _bold_best(m1_values + m2_values)
            + [NOT_AVAILABLE if d is None else format_delta(d) for d in delta_values]
        )

    document = "# Method comparison\n\n" + _markdown_table(header, rows)
    best_column = max(m2_report.columns, key=lambda c: deltas[c])
    document += (
        f"\n{column_title(best_column)} improves on {column_title(m1_column)} by "
        f"{format_delta(deltas[best_column])} points overall.\n"
    )

    return comparison, document


def _plot_panel(ax, curves: LossCurves, split: str):
    epochs = curves.column("epoch")
    plotted = False

    for suffix, linestyle, label in _CURVE_STYLES:
        values = curves.column(f"{split}_{suffix}")
        if all(v is None for v in values):
            continue

        ax.plot(epochs, [float("nan") if v is None else v for v in values], linestyle=linestyle, label=label)
        plotted = True

    ax.set_title("Training" if split == "train" else "Validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if plotted:
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)


def plot_loss_curves(curves: LossCurves, path: str, title: Optional[str] = None):
    fig = Figure(figsize=(10, 4))
    FigureCanvasAgg(fig)
    train_ax, val_ax = fig.subplots(1, 2, sharex=True)

    _plot_panel(train_ax, curves, "train")
    _plot_panel(val_ax, curves, "val")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)


def emit_loss_curves(
    curves: LossCurves, output_directory: str, name: str = "loss_curves", plot: bool = True
) -> Tuple[str, Optional[str]]:
    """Writes `<name>.csv` and, when `plot` is set, a two-panel `<name>.png` alongside."""
    if not len(curves):
        raise InvalidInputError("Cannot emit empty loss curves")

    utils.ensure_directory(output_directory)
    csv_path = os.path.join(output_directory, f"{name}.csv")
    write_loss_curves_csv(curves, csv_path)

    png_path = None
    if plot:
        png_path = os.path.join(output_directory, f"{name}.png")
        plot_loss_curves(curves, png_path)

    logger.info("Wrote loss curves to %s", csv_path)

    return csv_path, png_path
