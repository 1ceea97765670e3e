"""Command-line interface: run, compare, sweep, gen.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import hashlib
import os
import sys

import click

from .config import ConfigError, ScenarioConfig, sweep_peak_throughput
from .workload import generate, save_trace


def _load(config_path, overrides):
    return ScenarioConfig.from_file(config_path, overrides)


def _write_artifacts(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    report.write_queries_csv(os.path.join(out_dir, "queries.csv"))
    report.write_utilization_csv(os.path.join(out_dir, "utilization.csv"))
    report.write_swaps_csv(os.path.join(out_dir, "swaps.csv"))
    report.write_summary(os.path.join(out_dir, "summary.txt"))


def _workload_hash(queries) -> str:
    h = hashlib.sha256()
    for q in queries:
        h.update(f"{q.id},{q.session_id},{q.lora_id},{q.arrival:.9f},"
                 f"{q.prompt_tokens},{q.output_tokens}".encode())
    return h.hexdigest()[:16]


@click.group()
def main():
    """Simulator for multi-adapter LLM serving memory policies."""


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config field, e.g. --set seed=7.")
@click.option("--out", "out_dir", default=None,
              help="Output directory (defaults to the config's output_dir).")
def run(config_path, overrides, out_dir):
    """Run one scenario and write queries/utilization/swaps CSVs."""
    try:
        cfg = _load(config_path, overrides)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    try:
        report = cfg.run()
        _write_artifacts(report, out_dir or cfg.output_dir)
    except Exception as e:
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(1)
    click.echo(report.summary_text(), nl=False)


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--policies", default="fastlibra,static_lru,no_history",
              show_default=True, help="Comma-separated policy list.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", default=None)
def compare(config_path, policies, overrides, out_dir):
    """Run several policies on the identical workload realization."""
    try:
        cfg = _load(config_path, overrides)
        names = [p.strip() for p in policies.split(",") if p.strip()]
        if not names:
            raise ConfigError("policies: empty list")
        from .policies import POLICIES
        for n in names:
            if n not in POLICIES:
                raise ConfigError(f"policies: unknown policy {n!r}")
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    try:
        queries = cfg.build_queries()
        base = out_dir or cfg.output_dir
        click.echo(f"workload: {len(queries)} queries, "
                   f"hash {_workload_hash(queries)}")
        header = (f"{'policy':<12} {'mean_ttft':>10} {'p99_ttft':>10} "
                  f"{'mean_tpot':>10} {'kv_hit':>8} {'invalid_kv':>10}")
        click.echo(header)
        for name in names:
            report = cfg.run(policy=name, queries=queries)
            _write_artifacts(report, os.path.join(base, name))
            click.echo(
                f"{name:<12} {report.mean_ttft():>10.4f} "
                f"{report.percentile_ttft(99):>10.4f} "
                f"{report.mean_tpot():>10.4f} "
                f"{report.kv_hit_rate():>8.3f} "
                f"{report.invalid_mean:>10.4f}"
            )
    except Exception as e:
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(1)


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--rates", required=True,
              help="Comma-separated ascending arrival rates, e.g. 1,2,4.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "out_dir", default=None)
def sweep(config_path, rates, overrides, out_dir):
    """Find the highest rate whose mean TTFT stays under 500 ms."""
    try:
        cfg = _load(config_path, overrides)
        try:
            rate_list = [float(r) for r in rates.split(",") if r.strip()]
        except ValueError as e:
            raise ConfigError(f"rates: {e}") from e
        if not rate_list:
            raise ConfigError("rates: empty list")
        if rate_list != sorted(rate_list):
            raise ConfigError("rates: must be ascending")
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    try:
        peak, rows = sweep_peak_throughput(cfg, rate_list)
        base = out_dir or cfg.output_dir
        os.makedirs(base, exist_ok=True)
        with open(os.path.join(base, "sweep.csv"), "w") as f:
            f.write("# schema=1\n")
            f.write("rate,mean_ttft\n")
            for rate, mean in rows:
                f.write(f"{rate:.9f},{mean:.9f}\n")
        for rate, mean in rows:
            click.echo(f"rate {rate:g}: mean_ttft {mean:.4f} s")
        if peak is None:
            click.echo("peak: unsupported (no rate met the TTFT limit)")
        else:
            click.echo(f"peak: {peak:g}")
    except Exception as e:
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(1)


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("out_path", type=click.Path())
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def gen(config_path, out_path, overrides):
    """Generate a synthetic trace file from a scenario's workload spec."""
    try:
        cfg = _load(config_path, overrides)
        spec = cfg.workload_spec()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    try:
        records = generate(spec)
        save_trace(records, out_path)
    except Exception as e:
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(1)
    click.echo(f"wrote {len(records)} records to {out_path}")


if __name__ == "__main__":
    main()
