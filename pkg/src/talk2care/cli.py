"""Command-line entry points.

Exit codes: 0 success, 1 domain failure (invariant violations, missing data),
2 usage error, 3 backend failure (scripted miss, gateway error).
"""

import functools
import json
import logging
import os
import sys
import tempfile

import click

from . import fixtures
from .api import Principal, create_app, tokens_from_env
from .domain import render_transcript, validate_session
from .engine import ConversationEngine
from .errors import ConfigurationError, Talk2CareError
from .gateway import GatewayError, HttpBackend, ScriptedBackend
from .pipeline import Notifier, ProviderPipeline
from .store import EncryptedStore

log = logging.getLogger(__name__)


def _mapped_exit(func):
    """Translate domain errors into the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GatewayError as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(3)
        except ConfigurationError as exc:
            raise click.UsageError(str(exc))
        except Talk2CareError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _open_store(store_path: str | None, key: str | None) -> EncryptedStore:
    return EncryptedStore(path=store_path, key=key)


def _ephemeral_store() -> EncryptedStore:
    from cryptography.fernet import Fernet

    root = tempfile.mkdtemp(prefix="talk2care-")
    return EncryptedStore(path=os.path.join(root, "journal.t2c"),
                          key=Fernet.generate_key().decode("ascii"))


def _scripted_entries(script: str) -> list:
    """A --script value is a bundled name or a path to a JSON exchange list."""
    if script in fixtures.PERSONA_NAMES:
        return fixtures.conversation_script(script)
    if os.path.exists(script):
        with open(script, encoding="utf-8") as handle:
            return json.load(handle)
    raise click.UsageError(
        f"--script must name a bundled persona ({', '.join(fixtures.PERSONA_NAMES)}) "
        f"or an existing JSON file, got {script!r}"
    )


def _process_entries(script: str) -> list:
    if script in fixtures.PERSONA_NAMES:
        return fixtures.process_script(script)
    if os.path.exists(script):
        with open(script, encoding="utf-8") as handle:
            return json.load(handle)
    raise click.UsageError(f"no bundled process script or file named {script!r}")


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Conversational check-ins for patients, review tools for care teams."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


@main.command()
@click.option("--persona", default="post_surgery",
              help="Bundled persona name or path to a persona JSON file.")
@click.option("--script", default=None,
              help="Scripted replies: bundled name or JSON file. Defaults to the persona's bundle.")
@click.option("--store-path", default=None, help="Persist into this journal instead of a temp one.")
@click.option("--key", default=None, help="Encryption key for --store-path (or STORE_KEY).")
@click.option("--json", "as_json", is_flag=True, help="Emit the full session as JSON.")
@_mapped_exit
def simulate(persona: str, script: str | None, store_path: str | None,
             key: str | None, as_json: bool):
    """Replay a scripted conversation end to end and print the transcript."""
    if persona in fixtures.PERSONA_NAMES:
        spec = fixtures.persona(persona)
    elif os.path.exists(persona):
        with open(persona, encoding="utf-8") as handle:
            spec = json.load(handle)
    else:
        raise click.UsageError(f"unknown persona {persona!r}")

    backend = ScriptedBackend.from_entries(
        _scripted_entries(script if script is not None else spec.get("name", persona))
    )
    store = _open_store(store_path, key) if store_path else _ephemeral_store()
    fixtures.load_bundled(store)

    engine = ConversationEngine(store, backend)
    session = engine.start_session(spec["patient_id"], spec["protocol_id"],
                                   spec["initiator"])
    for utterance in spec["utterances"]:
        engine.patient_turn(session.session_id, utterance)

    session = store.get_session(session.session_id)
    violations = validate_session(session)
    if as_json:
        click.echo(json.dumps(
            {"session": session.to_dict(), "violations": violations},
            indent=2, ensure_ascii=False,
        ))
    else:
        click.echo(render_transcript(session))
    if violations:
        for violation in violations:
            click.echo(f"invariant violation: {violation}", err=True)
        sys.exit(1)


@main.command()
@click.argument("session_id")
@click.option("--script", default=None,
              help="Scripted stage outputs: bundled name or ordinal-keyed JSON file.")
@click.option("--backend", "backend_kind", type=click.Choice(["scripted", "http"]),
              default="scripted", show_default=True)
@click.option("--store-path", default=None, help="Journal path (or STORE_PATH).")
@click.option("--key", default=None, help="Encryption key (or STORE_KEY).")
@click.option("--force", is_flag=True, help="Re-run stages that already completed.")
@click.option("--json", "as_json", is_flag=True, help="Emit the result as JSON.")
@_mapped_exit
def process(session_id: str, script: str | None, backend_kind: str,
            store_path: str | None, key: str | None, force: bool, as_json: bool):
    """Run the review pipeline (summary, highlights, risk) for one session."""
    store = _open_store(store_path, key)
    if backend_kind == "http":
        pipeline = ProviderPipeline(store, backend_factory=lambda session: HttpBackend())
    else:
        if script is None:
            raise click.UsageError("--script is required with the scripted backend")
        entries = _process_entries(script)
        pipeline = ProviderPipeline(
            store,
            backend_factory=lambda session: ScriptedBackend.from_entries(entries),
        )

    result = pipeline.process_session(session_id, force=force)
    failed = [s for s, state in result.stages.items() if state.startswith("error")]

    if as_json:
        click.echo(json.dumps(result.to_dict(), indent=2, ensure_ascii=False))
    else:
        for stage in ("summary", "highlight", "risk"):
            click.echo(f"{stage}: {result.stages.get(stage, 'skipped')}")
        if result.summary is not None:
            click.echo(f"\nchief concern: {result.summary.chief_concern}")
            for label, value in result.summary.symptom_details:
                click.echo(f"  {label}: {value}")
            for question in result.summary.patient_questions:
                click.echo(f"patient question: {question}")
            for note in result.summary.additional_notes:
                click.echo(f"note: {note}")
        if result.highlights is not None:
            click.echo(f"\nhighlights anchored: {len(result.highlights.spans)} "
                       f"(dropped: {result.highlights.dropped_quotes})")
        if result.risk is not None:
            level = result.risk.level.value if result.risk.level else "unassessed"
            flag = " [needs human review]" if result.risk.needs_human_review else ""
            click.echo(f"risk: {level}{flag}")

    if failed:
        click.echo(f"stages failed: {', '.join(failed)}", err=True)
        sys.exit(3)


def _demo_setup(notifier: Notifier):
    """Ephemeral store preloaded with both bundled walkthroughs, fully processed."""
    store = _ephemeral_store()
    fixtures.load_bundled(store)
    session_ids = {}
    for name in fixtures.PERSONA_NAMES:
        spec = fixtures.persona(name)
        backend = ScriptedBackend.from_entries(fixtures.conversation_script(name))
        engine = ConversationEngine(store, backend)
        session = engine.start_session(spec["patient_id"], spec["protocol_id"],
                                       spec["initiator"])
        for utterance in spec["utterances"]:
            engine.patient_turn(session.session_id, utterance)
        entries = fixtures.process_script(name)
        pipeline = ProviderPipeline(
            store,
            backend_factory=lambda session, e=entries: ScriptedBackend.from_entries(e),
            notifier=notifier,
        )
        pipeline.process_session(session.session_id)
        session_ids[name] = session.session_id
    return store, session_ids


DEMO_TOKENS = {
    "demo-patient-john": Principal("patient", "pt-9d7f31c5"),
    "demo-patient-mary": Principal("patient", "pt-4e1c0b2a"),
    "demo-provider": Principal("provider", "demo-provider"),
}


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=None, type=int, help="Port to bind (or PORT, default 8000).")
@click.option("--backend", "backend_kind", type=click.Choice(["scripted", "http"]),
              default="http", show_default=True)
@click.option("--script", default=None, help="Conversation script for the scripted backend.")
@click.option("--process-script", default=None,
              help="Stage-output script for the scripted review pipeline.")
@click.option("--store-path", default=None, help="Journal path (or STORE_PATH).")
@click.option("--key", default=None, help="Encryption key (or STORE_KEY).")
@click.option("--auto-process", is_flag=True,
              help="Run the review pipeline as soon as a session completes.")
@click.option("--demo", is_flag=True,
              help="Ephemeral store with bundled data, scripted backends, fixed tokens.")
@click.option("--ui", "ui_dir", default=None, help="Serve a dashboard build from /dashboard.")
@click.option("--heartbeat", default=15.0, show_default=True,
              help="Seconds between keep-alive comments on the notification stream.")
@_mapped_exit
def serve(host: str, port: int | None, backend_kind: str, script: str | None,
          process_script: str | None, store_path: str | None, key: str | None,
          auto_process: bool, demo: bool, ui_dir: str | None, heartbeat: float):
    """Run the HTTP service."""
    import uvicorn

    if port is None:
        port = int(os.environ.get("PORT", "8000"))

    notifier = Notifier()
    if demo:
        store, _ = _demo_setup(notifier)
        backend = ScriptedBackend.from_entries(fixtures.demo_script())
        per_protocol = fixtures.demo_process_scripts()
        pipeline = ProviderPipeline(
            store,
            backend_factory=lambda session: ScriptedBackend.from_entries(
                per_protocol[session.protocol_id]
            ),
            notifier=notifier,
        )
        tokens = tokens_from_env() or dict(DEMO_TOKENS)
        auto_process = True
        click.echo("demo tokens: " + ", ".join(DEMO_TOKENS), err=True)
    else:
        store = _open_store(store_path, key)
        if backend_kind == "scripted":
            if script is None:
                raise click.UsageError("--script is required with the scripted backend")
            backend = ScriptedBackend.from_entries(_scripted_entries(script))
            if process_script is None:
                process_script = script
            entries = _process_entries(process_script)
            pipeline = ProviderPipeline(
                store,
                backend_factory=lambda session: ScriptedBackend.from_entries(entries),
                notifier=notifier,
            )
        else:
            backend = HttpBackend()
            pipeline = ProviderPipeline(
                store, backend_factory=lambda session: HttpBackend(), notifier=notifier
            )
        tokens = tokens_from_env()
        if not tokens:
            log.warning("no AUTH_TOKENS configured; every request will be rejected")

    engine = ConversationEngine(store, backend)
    app = create_app(store, engine, pipeline, tokens,
                     auto_process=auto_process, heartbeat_s=heartbeat, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning" if demo else "info")


@main.group()
def data():
    """Load, export, or import store contents."""


@data.command("load")
@click.option("--store-path", default=None)
@click.option("--key", default=None)
@_mapped_exit
def data_load(store_path: str | None, key: str | None):
    """Write the bundled patients and protocols into the store."""
    store = _open_store(store_path, key)
    fixtures.load_bundled(store)
    click.echo(f"loaded {len(store.list_patients())} patients, "
               f"{len(store.list_protocols())} protocols")


@data.command("export")
@click.argument("out_path")
@click.option("--store-path", default=None)
@click.option("--key", default=None)
@_mapped_exit
def data_export(out_path: str, store_path: str | None, key: str | None):
    """Dump every record as plaintext JSONL (for backup or migration)."""
    store = _open_store(store_path, key)
    count = store.export_jsonl(out_path)
    click.echo(f"exported {count} records to {out_path}")


@data.command("import")
@click.argument("in_path")
@click.option("--store-path", default=None)
@click.option("--key", default=None)
@_mapped_exit
def data_import(in_path: str, store_path: str | None, key: str | None):
    """Replay a JSONL dump into the store."""
    store = _open_store(store_path, key)
    count = store.import_jsonl(in_path)
    click.echo(f"imported {count} records from {in_path}")


@main.command()
def keygen():
    """Print a fresh encryption key suitable for STORE_KEY."""
    from cryptography.fernet import Fernet

    click.echo(Fernet.generate_key().decode("ascii"))


if __name__ == "__main__":
    main()
