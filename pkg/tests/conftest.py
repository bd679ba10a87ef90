"""Shared fixtures: stores, engines, replayed sessions, a fake clock."""

from datetime import datetime, timedelta, timezone

import pytest

from talk2care import fixtures as bundled
from talk2care.domain import Session
from talk2care.engine import ConversationEngine, EngineConfig
from talk2care.gateway import ScriptedBackend
from talk2care.store import EncryptedStore, generate_key


class FakeClock:
    """Deterministic time source; advances only when told to."""

    def __init__(self, start: datetime | None = None):
        self.now = start or datetime(2026, 3, 1, 9, 0, 0, tzinfo=timezone.utc)

    def __call__(self) -> datetime:
        # Step a millisecond per reading so timestamps stay strictly ordered
        # and survive the ms-precision serialization round trip.
        self.now += timedelta(milliseconds=1)
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += timedelta(seconds=seconds)


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def store(tmp_path):
    with EncryptedStore(path=tmp_path / "store", key=generate_key()) as s:
        yield s


@pytest.fixture
def loaded_store(store):
    bundled.load_bundled(store)
    return store


@pytest.fixture
def profile(loaded_store):
    return loaded_store.get_patient("pt-9d7f31c5")


@pytest.fixture
def protocol(loaded_store):
    return loaded_store.get_protocol("post_surgery")


def make_engine(store, entries, config: EngineConfig | None = None,
                clock=None) -> ConversationEngine:
    backend = ScriptedBackend.from_entries(entries)
    return ConversationEngine(store, backend, config=config, clock=clock)


def replay_persona(store, name: str, config: EngineConfig | None = None,
                   clock=None) -> Session:
    """Drive one bundled persona through the engine; returns the final session."""
    spec = bundled.persona(name)
    engine = make_engine(store, bundled.conversation_script(name), config, clock)
    session = engine.start_session(spec["patient_id"], spec["protocol_id"],
                                   spec["initiator"])
    for utterance in spec["utterances"]:
        engine.patient_turn(session.session_id, utterance)
    return store.get_session(session.session_id)


@pytest.fixture
def completed_session(loaded_store):
    return replay_persona(loaded_store, "post_surgery")
