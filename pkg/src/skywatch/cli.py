"""Command-line entry points: server, edge, consumer, and the scenario
harness (run / check)."""

from __future__ import annotations

import asyncio
import logging
import sys
from pathlib import Path

import click

from .scenario import ScenarioError, load_scenario


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Detection-gated UAV streaming pipeline tools."""
    _setup_logging(verbose)


@main.command()
@click.option("--host", default="127.0.0.1", envvar="SKYWATCH_HOST", show_default=True)
@click.option("--port", default=8787, envvar="SKYWATCH_PORT", show_default=True)
@click.option("--store", "store_path", default=":memory:", envvar="SKYWATCH_STORE",
              show_default=True, help="SQLite path for the mission tables.")
@click.option("--blob-dir", default=None, envvar="SKYWATCH_BLOB_DIR",
              help="Directory for uploaded images (default: in-memory).")
@click.option("--demo-seed", is_flag=True,
              help="Seed demo mission/drone/operator/rule records.")
def server(host: str, port: int, store_path: str, blob_dir: str | None,
           demo_seed: bool) -> None:
    """Run the central server (WebSocket endpoints + /status)."""
    from .webserver import serve

    serve(host=host, port=port, store_path=store_path, blob_dir=blob_dir,
          demo_seed=demo_seed)


@click.command("edge")
@click.option("--server", "server_url", required=True, help="ws://host:port base URL.")
@click.option("--drone-id", required=True)
@click.option("--token", required=True, help="Drone secret token.")
@click.option("--scenario", "scenario_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", default="ultrafast", show_default=True,
              type=click.Choice(["ultrafast", "medium", "slow"]))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--realtime", is_flag=True,
              help="Sleep the modeled detector/encoder latencies for real.")
def edge(server_url: str, drone_id: str, token: str, scenario_path: str,
         preset: str, seed: int, realtime: bool) -> None:
    """Run the drone-side edge node against a live server."""
    _setup_logging(False)
    from .edge_client import run_edge

    try:
        scenario = load_scenario(scenario_path)
    except ScenarioError as exc:
        raise click.ClickException(str(exc)) from None
    try:
        asyncio.run(run_edge(server_url, scenario, drone_id, token,
                             preset=preset, seed=seed, realtime=realtime))
    except KeyboardInterrupt:
        pass
    except PermissionError as exc:
        raise click.ClickException(f"authentication failed: {exc}") from None


@click.command("consumer")
@click.option("--server", "server_url", required=True, help="ws://host:port base URL.")
@click.option("--token", default="operator-token", show_default=True)
@click.option("--log", "log_path", default=None, type=click.Path(dir_okay=False),
              help="Write the display log (JSONL) here.")
@click.option("--display-delay-ms", default=0.0, show_default=True, type=float)
@click.option("--stream", "streams", multiple=True,
              help="Subscribe to specific stream ids (default: all).")
def consumer(server_url: str, token: str, log_path: str | None,
             display_delay_ms: float, streams: tuple[str, ...]) -> None:
    """Run a headless stream consumer (VR headset stand-in)."""
    _setup_logging(False)
    from .consumer import run_consumer

    try:
        state = asyncio.run(run_consumer(
            server_url, token, log_path=log_path,
            display_delay_ms=display_delay_ms,
            streams=list(streams) or None,
        ))
    except KeyboardInterrupt:
        return
    except PermissionError as exc:
        raise click.ClickException(f"authentication failed: {exc}") from None
    click.echo(f"frames accepted: {len(state.frames)}, discarded: {state.discarded}, "
               f"alerts: {len(state.alerts)}")


@click.group("harness")
def harness() -> None:
    """Deterministic scenario harness."""
    _setup_logging(False)


@harness.command("run")
@click.option("--scenario", "scenario_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int,
              help="Override the scenario's seed.")
def harness_run(scenario_path: str, out_dir: str, seed: int | None) -> None:
    """Run a scenario; write report.txt/json, budget.csv, trace.log, figures."""
    from .checks import check_trace
    from .harness import run_scenario
    from .report import render_text, write_outputs

    try:
        scenario = load_scenario(scenario_path)
    except ScenarioError as exc:
        raise click.ClickException(str(exc)) from None
    result = run_scenario(scenario, seed=seed)
    paths = write_outputs(result.report, result.trace, out_dir, title=scenario.name)
    click.echo(render_text(result.report, title=scenario.name))
    failures = [c for c in check_trace(result.trace) if not c.passed]
    for check in check_trace(result.trace):
        click.echo(f"  {check}")
    click.echo(f"\noutputs in {Path(out_dir).resolve()}:")
    for name, path in paths.items():
        click.echo(f"  {name}: {path}")
    if failures:
        raise click.ClickException(f"{len(failures)} trace invariant(s) failed")


@harness.command("check")
@click.option("--trace", "trace_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def harness_check(trace_path: str) -> None:
    """Re-run the invariant suite over a written trace.log."""
    from .checks import check_trace
    from .tracing import TraceLog

    trace = TraceLog.read(trace_path)
    results = check_trace(trace)
    for check in results:
        click.echo(str(check))
    if any(not c.passed for c in results):
        sys.exit(1)


main.add_command(edge)
main.add_command(consumer)
main.add_command(harness)


if __name__ == "__main__":
    main()
