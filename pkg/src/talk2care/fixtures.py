"""Accessors for the bundled demo data.

Two reference conversations ship with the package: a provider-initiated
post-surgery follow-up and a patient-initiated daily-care contact. Each
comes with a patient profile, a protocol, a persona (the patient's lines),
a conversation script (the assistant's lines), and a processing script
(summary, quote list, and risk output by call ordinal).
"""

import json
from importlib import resources

from .domain import ConversationProtocol, PatientProfile
from .errors import ConfigurationError

PERSONA_NAMES = ("post_surgery", "daily_care")


def _read(name: str) -> str:
    try:
        return resources.files("talk2care").joinpath(f"data/{name}").read_text("utf-8")
    except FileNotFoundError as exc:
        raise ConfigurationError(f"bundled fixture missing: {name}") from exc


def _read_json(name: str):
    return json.loads(_read(name))


def bundled_patients() -> list[PatientProfile]:
    return [PatientProfile.from_dict(d) for d in _read_json("patients.json")]


def bundled_protocols() -> list[ConversationProtocol]:
    return [ConversationProtocol.from_dict(d) for d in _read_json("protocols.json")]


def persona(name: str) -> dict:
    if name not in PERSONA_NAMES:
        raise ConfigurationError(
            f"unknown bundled persona {name!r}; available: {', '.join(PERSONA_NAMES)}"
        )
    return _read_json(f"persona_{name}.json")


def conversation_script(name: str) -> list[dict]:
    if name not in PERSONA_NAMES:
        raise ConfigurationError(f"unknown bundled script {name!r}")
    return _read_json(f"script_{name}.json")


def process_script(name: str) -> list[dict]:
    if name not in PERSONA_NAMES:
        raise ConfigurationError(f"unknown bundled process script {name!r}")
    return _read_json(f"process_{name}.json")


def demo_script() -> list[dict]:
    """Both conversation scripts merged; shared lines appear once."""
    return _read_json("script_demo.json")


def demo_process_scripts() -> dict[str, list[dict]]:
    """Processing scripts keyed by protocol_id, for the demo server."""
    return _read_json("process_demo.json")


def transcript(name: str) -> str:
    """The expected replay transcript, newline-terminated."""
    if name not in PERSONA_NAMES:
        raise ConfigurationError(f"unknown bundled transcript {name!r}")
    return _read(f"transcript_{name}.txt")


def load_bundled(store) -> None:
    """Load the bundled patients and protocols into a store."""
    for profile in bundled_patients():
        store.put_patient(profile)
    for protocol in bundled_protocols():
        store.put_protocol(protocol)
