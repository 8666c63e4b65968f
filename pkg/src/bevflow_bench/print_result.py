import math
from collections.abc import Callable

from rich.console import Console
from rich.markdown import Markdown
from rich.panel import Panel
from rich.rule import Rule
from rich.table import Table

console = Console()


def _fmt(value: float, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{digits}f}"


def print_tuning_result(result, parameter_space, fn: Callable = console.print) -> None:
    """
    Prints the tuned estimator hyperparameters and the validation losses of
    the default and the tuned configuration.
    """
    fn(Rule("OPTIMIZED ESTIMATOR PARAMETERS", align="center"))

    if not result.best.params:
        fn(Panel("No significant parameter changes were identified.", style="bold red"))
    else:
        table = Table(show_header=True, header_style="bold magenta")
        table.add_column("#", style="dim", width=3)
        table.add_column("Parameter", style="bold")
        table.add_column("Value", justify="center")
        table.add_column("Default Value", justify="center")

        descriptions = []
        for i, (key, value) in enumerate(result.best.params.items(), start=1):
            parameter = parameter_space.get_parameter_by_name(key)
            table.add_row(str(i), key, str(value), str(parameter.get_default()))
            descriptions.append(f"**{i}. {key}**\n{parameter.description.strip()}\n")

        fn(table)
        fn(Rule("Descriptions", align="center"))
        fn(Markdown("\n".join(descriptions)))

    fn(Rule())

    metrics_table = Table(show_header=True, header_style="bold green")
    metrics_table.add_column("Validation loss", style="bold green")
    metrics_table.add_column("Mean", justify="right")
    metrics_table.add_column("Min", justify="right")
    metrics_table.add_column("Max", justify="right")
    metrics_table.add_column("#Seeds", justify="right")
    for label, score in (("Default Parameters", result.default), ("Optimized Parameters", result.best)):
        metrics_table.add_row(
            label,
            _fmt(score.mean(), 6),
            _fmt(score.min(), 6),
            _fmt(score.max(), 6),
            str(len(score)),
        )
    fn(metrics_table)

    fn(Rule())
    warning_message = """
        The optimized parameters were selected on a small number of training seeds and one
        validation set of simulated tracklets. Confirm them with a full benchmark sweep
        before relying on them.
        """
    fn(Panel(Markdown(warning_message), title="WARNING", style="bold yellow"))


def print_run_report(report, fn: Callable = console.print) -> None:
    """
    Prints one table row per (sweep point, method) of a run report.
    """
    fn(Rule(f"RESULTS [config {report.config_hash[:12]}]", align="center"))
    if not report.rows:
        fn(Panel("The sweep produced no rows.", style="bold red"))
        return
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Interval [ms]", justify="right")
    table.add_column("sigma_t [m]", justify="right")
    table.add_column("sigma_r [deg]", justify="right")
    table.add_column("K_roi", justify="right")
    table.add_column("Method", style="bold")
    table.add_column("AP@0.5", justify="right")
    table.add_column("AP@0.7", justify="right")
    table.add_column("Center err [m]", justify="right")
    table.add_column("Comm. volume", justify="right")
    for row in report.rows:
        table.add_row(
            f"{row.interval_expectation_ms:g}",
            f"{row.sigma_t:g}",
            f"{row.sigma_r:g}",
            str(row.k_roi),
            row.method,
            _fmt(row.ap50),
            _fmt(row.ap70),
            _fmt(row.mean_center_err, 3),
            _fmt(row.comm_volume, 2),
        )
    fn(table)
    fn(Rule(f"wall clock {report.wall_clock:.1f}s"))
