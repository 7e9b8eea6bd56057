"""
Main CLI interface for the IES token economy simulator
"""
import sys
from pathlib import Path
from typing import Optional

import click
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from config.settings import EXIT_CODES, TIMESERIES_HEADER, get_settings
from src.grid.power_flow import SolverError
from src.grid.tracing import TraceError
from src.ledger.chain import read_chain_log, verify_chain
from src.parsers.scenario_parser import ScenarioConfig, ScenarioError, ScenarioParser
from src.simulation.report import load_report, write_outputs, write_timeseries_csv
from src.simulation.runner import run as run_simulation
from src.utils.logger import get_logger, setup_logger

# Setup: tables and the summary line go to stdout, diagnostics to stderr
console = Console()
err_console = Console(stderr=True)
setup_logger()
logger = get_logger(__name__)

EXPORT_FORMATS = ("csv", "json")


def _fail(message: str, code: str) -> None:
    err_console.print(message, style="bold red")
    sys.exit(EXIT_CODES[code])


def _load(path: str) -> ScenarioConfig:
    """Parse a scenario or exit with the unreadable/invalid code"""
    try:
        return ScenarioParser(path).parse()
    except FileNotFoundError:
        _fail(f"❌ ファイルが見つかりません: {path}", "unreadable")
    except (OSError, UnicodeDecodeError) as e:
        _fail(f"❌ ファイルを読み込めません: {e}", "unreadable")
    except ScenarioError as e:
        err_console.print(f"❌ シナリオに{len(e.errors)}件の問題があります:", style="bold red")
        for error in e.errors:
            err_console.print(f"  • {error}")
        sys.exit(EXIT_CODES["invalid"])


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose (DEBUG) logging')
def cli(verbose):
    """IES Token Economy Simulator - grid, incentives and ledger in one loop"""
    if verbose:
        setup_logger(level="DEBUG")
        logger.debug("Verbose mode enabled")


@cli.command()
@click.argument('path')
def validate(path):
    """Validate a scenario file"""
    config = _load(path)
    console.print(f"✅ シナリオは有効です: {config.name} ({config.horizon} steps)", style="bold green")
    sys.exit(EXIT_CODES["ok"])


@cli.command()
@click.argument('path')
@click.option('--out', '-o', 'out_dir', help='Output directory (default from settings)')
@click.option('--seed', '-s', type=int, help='Override the scenario seed')
def run(path, out_dir, seed):
    """Run a scenario and write report.json, timeseries.csv and chain.log"""
    settings = get_settings()
    out_dir = out_dir or settings.default_out_dir
    config = _load(path)

    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        _fail(f"❌ 出力先がディレクトリではありません: {out}", "out_dir")

    console.print(Panel.fit(
        f"▶️  シミュレーション開始\nシナリオ: {config.name}\n"
        f"期間: {config.schedule.periods} × {config.schedule.steps_per_period} steps",
        title="実行設定",
    ))

    try:
        report = run_simulation(config, seed=seed)
    except SolverError as e:
        _fail(f"❌ 潮流計算に失敗しました: {e}", "solver")
    except TraceError as e:
        _fail(f"❌ 潮流の追跡に失敗しました: {e}", "solver")

    try:
        write_outputs(report, out)
    except OSError as e:
        _fail(f"❌ 出力先に書き込めません: {e}", "out_dir")

    table = Table(title="アクター別トークン")
    table.add_column("アクター", style="cyan")
    table.add_column("初期残高", style="magenta", justify="right")
    table.add_column("最終残高", style="magenta", justify="right")
    table.add_column("発行", justify="right")
    table.add_column("徴収", justify="right")
    table.add_column("法定通貨", justify="right", style="dim")
    for actor, info in report.actors.items():
        table.add_row(
            actor,
            str(info["initial_balance"]),
            str(info["final_balance"]),
            str(info["issued"]),
            str(info["levied"]),
            f"{info['fiat']:.2f}",
        )
    console.print(table)

    click.echo(report.summary_line())
    sys.exit(EXIT_CODES["ok"])


@cli.command()
@click.argument('report_path')
@click.option('--format', '-f', 'fmt', help='Export format: csv or json (default from settings)')
@click.option('--out', '-o', 'out_file', help='Output file (default: stdout)')
def export(report_path, fmt, out_file):
    """Re-emit a report's time series in a plot-ready format"""
    fmt = (fmt or get_settings().default_export_format).lower()
    if fmt not in EXPORT_FORMATS:
        _fail(f"❌ 未対応の形式です: {fmt} (csv または json)", "invalid")

    try:
        report = load_report(report_path)
    except FileNotFoundError:
        _fail(f"❌ レポートが見つかりません: {report_path}", "unreadable")
    except (OSError, ValueError, KeyError, TypeError) as e:
        _fail(f"❌ レポートを読み込めません: {e}", "unreadable")

    if fmt == "json":
        content: Optional[str] = report.to_json()
    else:
        content = report.timeseries_frame().to_csv(index=False, columns=TIMESERIES_HEADER, lineterminator="\n")

    if out_file:
        try:
            if fmt == "csv":
                write_timeseries_csv(report.timeseries_frame(), Path(out_file))
            else:
                Path(out_file).write_text(content, encoding="utf-8")
        except OSError as e:
            _fail(f"❌ 出力先に書き込めません: {e}", "out_dir")
        err_console.print(f"✅ {fmt} を書き出しました: {out_file}", style="bold green")
    else:
        click.echo(content, nl=False)
    sys.exit(EXIT_CODES["ok"])


@cli.command()
@click.argument('chain_log')
def verify(chain_log):
    """Re-verify an exported chain.log"""
    try:
        blocks = read_chain_log(Path(chain_log))
    except FileNotFoundError:
        _fail(f"❌ ファイルが見つかりません: {chain_log}", "unreadable")
    except (OSError, UnicodeDecodeError) as e:
        _fail(f"❌ ファイルを読み込めません: {e}", "unreadable")
    except (ValueError, KeyError, TypeError) as e:
        _fail(f"❌ チェーンログを解析できません: {e}", "invalid")

    corrupt = verify_chain(blocks)
    if corrupt is not None:
        _fail(f"❌ 改ざんを検出しました: height {corrupt}", "invalid")

    head = blocks[-1].digest.hex() if blocks else ""
    console.print(f"✅ チェーンは正常です: {len(blocks)} blocks, head {head}", style="bold green")
    sys.exit(EXIT_CODES["ok"])


@cli.command()
@click.argument('path')
def inspect(path):
    """Show topology, actor and schedule statistics of a scenario"""
    config = _load(path)
    stats = ScenarioParser(path).get_stats()

    console.print(Panel.fit(f"シナリオ: {stats['name']}\nサイズ: {stats['file_size_kb']:.1f} KB", title="ファイル情報"))

    table = Table(title="シナリオ統計")
    table.add_column("項目", style="cyan")
    table.add_column("値", style="magenta")
    table.add_row("バス数", str(stats["buses"]))
    table.add_row("線路数", str(stats["lines"]))
    table.add_row("アクター数", str(stats["actors"]))
    table.add_row("期間数", str(stats["periods"]))
    table.add_row("総ステップ数", str(stats["horizon"]))
    table.add_row("契約数", str(stats["contracts"]))
    table.add_row("需要応答イベント数", str(stats["dr_events"]))
    console.print(table)

    device_table = Table(title="機器")
    device_table.add_column("ID", style="cyan")
    device_table.add_column("種別", style="magenta")
    device_table.add_column("バス")
    device_table.add_column("所有者")
    device_table.add_column("排出係数", justify="right", style="dim")
    for device in config.topology.devices:
        device_table.add_row(device.id, device.kind.value, device.bus, device.owner, f"{device.emission_rate:g}")
    console.print(device_table)

    actor_table = Table(title="アクター")
    actor_table.add_column("ID", style="cyan")
    actor_table.add_column("役割", style="magenta")
    actor_table.add_column("初期残高", justify="right")
    actor_table.add_column("上限", justify="right")
    actor_table.add_column("排出許可量", justify="right", style="dim")
    for actor in config.actors:
        permit = "-" if actor.s_permit is None else f"{actor.s_permit:g}"
        actor_table.add_row(actor.id, actor.role, str(actor.initial_balance), str(actor.balance_cap), permit)
    console.print(actor_table)


@cli.command()
def config():
    """Show current configuration"""
    try:
        settings = get_settings()
    except Exception as e:
        _fail(f"❌ 設定読み込みエラー: {e}", "invalid")

    table = Table(title="現在の設定")
    table.add_column("設定項目", style="cyan")
    table.add_column("値", style="magenta")
    for name, value in settings.model_dump().items():
        table.add_row(name, str(value))
    console.print(table)


if __name__ == '__main__':
    cli()
