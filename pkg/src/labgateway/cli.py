"""Command-line entry points for the gateway and its companion servers."""
from __future__ import annotations

import datetime as dt
import json
import logging
import sys

import click

from .errors import ConfigError
from .gateway import GatewayServer
from .mock_ehr import FixtureSet, MockEhrServer
from .ref_classifier import RefClassifierServer, load_model
from .registry import load_config


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Gateway between EHR laboratory data and ML classifier sidecars."""
    _setup_logging(verbose)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=None, help="Override the configured listen port.")
def serve(config_path: str, port: int | None) -> None:
    """Run the gateway service until interrupted."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    server = GatewayServer(config, port=port)
    bound = server.start()
    click.echo(f"gateway listening on {config.listen_host}:{bound}")
    for spec in config.classifiers:
        state = "enabled" if spec.classifier_id and server.app.registry.is_enabled(spec.classifier_id) else "disabled"
        click.echo(f"  /ml_classifier_run/{spec.route_path} -> {spec.classifier_id} ({state})")
    server.service.serve_until_interrupt()


@main.command("check-config")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def check_config(config_path: str) -> None:
    """Validate a config file and summarize the declared classifiers."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(1)
    click.echo(f"ok: {len(config.classifiers)} classifier(s)")
    for spec in config.classifiers:
        kinds = "binary" if spec.prediction_kind.is_binary else f"{len(spec.prediction_kind.labels)} labels"
        click.echo(
            f"  {spec.classifier_id}: route={spec.route_path} species={sorted(spec.species)} "
            f"features={len(spec.features)} ({kinds})"
        )


@main.command("mock-ehr")
@click.option("--fixtures", "fixture_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--auth-code", default="dev-auth", show_default=True)
@click.option("--port", type=int, default=8081, show_default=True)
@click.option("--latency-ms", type=int, default=0, show_default=True, help="Default per-request latency.")
def mock_ehr(fixture_dir: str, auth_code: str, port: int, latency_ms: int) -> None:
    """Serve XML lab fixtures from a directory, EHR style."""
    fixtures = FixtureSet.from_dir(fixture_dir, default_latency_ms=latency_ms)
    server = MockEhrServer(fixtures, auth_code=auth_code, port=port)
    bound = server.start()
    click.echo(f"mock EHR listening on 127.0.0.1:{bound} ({len(fixtures.records)} fixture records)")
    server.service.serve_until_interrupt()


@main.command("ref-classifier")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--port", type=int, default=8090, show_default=True)
def ref_classifier(model_path: str, port: int) -> None:
    """Serve a rule-based classifier speaking the sidecar protocol."""
    model = load_model(model_path)
    server = RefClassifierServer(model, port=port)
    bound = server.start()
    click.echo(f"classifier '{model.model_id}' listening on 127.0.0.1:{bound}")
    server.service.serve_until_interrupt()


@main.command("audit-export")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--since", default=None, help="Only records recorded on/after this date (YYYY-MM-DD).")
def audit_export(store_path: str, since: str | None) -> None:
    """Print audit records as JSON lines."""
    from .audit import AuditStore

    try:
        cutoff = dt.date.fromisoformat(since) if since else None
    except ValueError:
        raise click.BadParameter("expected YYYY-MM-DD", param_hint="--since")
    store = AuditStore(store_path)
    for entry in store.export(since=cutoff):
        click.echo(json.dumps(entry, sort_keys=False))


if __name__ == "__main__":
    main()
