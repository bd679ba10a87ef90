"""Encrypted single-file store.

All state lives in one append-only journal. Each record is framed as

    MAGIC 'T2CJ' | u32 big-endian ciphertext length | SHA-256 of ciphertext | ciphertext

where the ciphertext is a Fernet token wrapping a JSON payload
{"ns": namespace, "key": key, "value": object-or-null}. A null value is a
delete. Writes flush and fsync before returning, so an acknowledged write
survives a hard kill. On reload, the journal is replayed until the first
torn or corrupt frame; the valid prefix wins and the tail is truncated
away. Patient text therefore never touches disk in the clear.

Configuration comes from STORE_PATH (data directory) and STORE_KEY
(Fernet key) unless passed explicitly.
"""

import hashlib
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.fernet import Fernet, InvalidToken

from .domain import (
    ActionKind,
    ClinicalSummary,
    ConversationProtocol,
    HighlightResult,
    PatientProfile,
    ProviderAction,
    RiskAssessment,
    RiskLevel,
    Session,
    SessionStatus,
    TERMINAL_STATUSES,
    dumps_canonical,
    new_id,
)
from .errors import ConfigurationError, ConflictError, NotFoundError

log = logging.getLogger(__name__)

MAGIC = b"T2CJ"
_HEADER = struct.Struct(">4sI32s")
_MAX_RECORD = 64 * 1024 * 1024

NAMESPACES = (
    "patients", "protocols", "sessions", "summaries",
    "highlights", "risks", "actions", "processing",
)

_RISK_RANK = {RiskLevel.HIGH: 3, RiskLevel.MODERATE: 2, RiskLevel.LOW: 1, None: 0}


def generate_key() -> str:
    return Fernet.generate_key().decode("ascii")


@dataclass(frozen=True)
class SessionRow:
    """One listing row: the session plus the fields the queue sorts on."""

    session: Session
    risk_level: RiskLevel | None
    done: bool


@dataclass(frozen=True)
class SessionPage:
    rows: tuple[SessionRow, ...]
    total: int
    limit: int
    offset: int


class EncryptedStore:
    def __init__(self, path: str | Path | None = None, key: str | None = None,
                 fsync: bool = True):
        raw_path = path or os.environ.get("STORE_PATH")
        if not raw_path:
            raise ConfigurationError("STORE_PATH is not set and no path was given")
        raw_key = key or os.environ.get("STORE_KEY")
        if not raw_key:
            raise ConfigurationError("STORE_KEY is not set and no key was given")
        try:
            self._fernet = Fernet(raw_key.encode("ascii"))
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"STORE_KEY is not a valid Fernet key: {exc}") from exc

        self.directory = Path(raw_path)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.directory / "journal.t2c"
        self._fsync = fsync
        self._lock = threading.RLock()
        self._data: dict[str, dict[str, dict]] = {ns: {} for ns in NAMESPACES}
        self._replay()
        self._fh = open(self.journal_path, "ab")

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- journal ---------------------------------------------------------

    def _replay(self) -> None:
        if not self.journal_path.exists():
            return
        blob = self.journal_path.read_bytes()
        offset = 0
        good = 0
        records = 0
        while offset + _HEADER.size <= len(blob):
            magic, length, digest = _HEADER.unpack_from(blob, offset)
            if magic != MAGIC or length > _MAX_RECORD:
                break
            start = offset + _HEADER.size
            end = start + length
            if end > len(blob):
                break
            token = blob[start:end]
            if hashlib.sha256(token).digest() != digest:
                break
            try:
                payload = json.loads(self._fernet.decrypt(token))
            except (InvalidToken, json.JSONDecodeError, UnicodeDecodeError):
                break
            self._apply(payload)
            records += 1
            offset = end
            good = offset
        if good < len(blob):
            log.warning(
                "journal %s: dropping %d torn/corrupt trailing bytes after %d records",
                self.journal_path, len(blob) - good, records,
            )
            with open(self.journal_path, "r+b") as fh:
                fh.truncate(good)

    def _apply(self, payload: dict) -> None:
        ns, key, value = payload["ns"], payload["key"], payload.get("value")
        bucket = self._data.setdefault(ns, {})
        if value is None:
            bucket.pop(key, None)
        else:
            bucket[key] = value

    def _write(self, ns: str, key: str, value: dict | None) -> None:
        payload = dumps_canonical({"ns": ns, "key": key, "value": value}).encode("utf-8")
        token = self._fernet.encrypt(payload)
        frame = _HEADER.pack(MAGIC, len(token), hashlib.sha256(token).digest()) + token
        with self._lock:
            self._fh.write(frame)
            self._fh.flush()
            if self._fsync:
                os.fsync(self._fh.fileno())
            self._apply({"ns": ns, "key": key, "value": value})

    def _get(self, ns: str, key: str) -> dict | None:
        with self._lock:
            value = self._data[ns].get(key)
            # Copy on the way out so callers can't mutate the cache.
            return json.loads(json.dumps(value)) if value is not None else None

    # -- ids -------------------------------------------------------------

    def new_id(self) -> str:
        return new_id()

    # -- patients and protocols -------------------------------------------

    def put_patient(self, profile: PatientProfile) -> None:
        self._write("patients", profile.patient_id, profile.to_dict())

    def get_patient(self, patient_id: str) -> PatientProfile:
        value = self._get("patients", patient_id)
        if value is None:
            raise NotFoundError(f"no patient {patient_id!r}")
        return PatientProfile.from_dict(value)

    def list_patients(self) -> list[PatientProfile]:
        with self._lock:
            values = [json.loads(json.dumps(v)) for v in self._data["patients"].values()]
        profiles = [PatientProfile.from_dict(v) for v in values]
        return sorted(profiles, key=lambda p: p.patient_id)

    def put_protocol(self, protocol: ConversationProtocol) -> None:
        self._write("protocols", protocol.protocol_id, protocol.to_dict())

    def get_protocol(self, protocol_id: str) -> ConversationProtocol:
        value = self._get("protocols", protocol_id)
        if value is None:
            raise NotFoundError(f"no protocol {protocol_id!r}")
        return ConversationProtocol.from_dict(value)

    def list_protocols(self) -> list[ConversationProtocol]:
        with self._lock:
            values = [json.loads(json.dumps(v)) for v in self._data["protocols"].values()]
        protocols = [ConversationProtocol.from_dict(v) for v in values]
        return sorted(protocols, key=lambda p: p.protocol_id)

    # -- sessions ----------------------------------------------------------

    def put_session(self, session: Session) -> None:
        existing = self._get("sessions", session.session_id)
        if existing is not None and existing["status"] in (s.value for s in TERMINAL_STATUSES):
            self._check_terminal_overwrite(existing, session)
        self._write("sessions", session.session_id, session.to_dict())

    @staticmethod
    def _check_terminal_overwrite(existing: dict, session: Session) -> None:
        # Terminal sessions are append-only: the stored turns must survive
        # as a prefix and the status must not leave the terminal set.
        if session.status.value != existing["status"]:
            raise ConflictError(
                f"session {session.session_id} is {existing['status']} and cannot "
                f"move to {session.status.value}"
            )
        old_turns = existing.get("turns", [])
        if len(session.turns) < len(old_turns):
            raise ConflictError(f"session {session.session_id}: turns were removed")
        for old, new in zip(old_turns, session.turns):
            if (old["speaker"], old["text"], old["kind"]) != (
                new.speaker.value, new.text, new.kind.value
            ):
                raise ConflictError(
                    f"session {session.session_id}: history of a terminal session changed"
                )

    def get_session(self, session_id: str) -> Session:
        value = self._get("sessions", session_id)
        if value is None:
            raise NotFoundError(f"no session {session_id!r}")
        return Session.from_dict(value)

    def list_sessions(self, patient_id: str | None = None,
                      status: SessionStatus | str | None = None,
                      risk: RiskLevel | str | None = None,
                      done: bool | None = None,
                      limit: int = 50, offset: int = 0) -> SessionPage:
        """Filtered listing ordered by risk (high first), then newest first."""
        if status is not None:
            status = SessionStatus(status)
        if risk is not None:
            risk = RiskLevel(risk)
        with self._lock:
            values = [json.loads(json.dumps(v)) for v in self._data["sessions"].values()]
        rows = []
        for value in values:
            session = Session.from_dict(value)
            if patient_id is not None and session.patient_id != patient_id:
                continue
            if status is not None and session.status != status:
                continue
            level = self._risk_level(session.session_id)
            if risk is not None and level != risk:
                continue
            is_done = self.session_done(session.session_id)
            if done is not None and is_done != done:
                continue
            rows.append(SessionRow(session, level, is_done))
        rows.sort(key=lambda r: (
            -_RISK_RANK[r.risk_level],
            -r.session.created_at.timestamp(),
            r.session.session_id,
        ))
        total = len(rows)
        window = rows[offset:offset + limit]
        return SessionPage(tuple(window), total, limit, offset)

    def _risk_level(self, session_id: str) -> RiskLevel | None:
        value = self._get("risks", session_id)
        if value is None or value.get("level") is None:
            return None
        return RiskLevel(value["level"])

    # -- pipeline artifacts -------------------------------------------------

    def put_summary(self, session_id: str, summary: ClinicalSummary) -> None:
        self._write("summaries", session_id, summary.to_dict())

    def get_summary(self, session_id: str) -> ClinicalSummary | None:
        value = self._get("summaries", session_id)
        return ClinicalSummary.from_dict(value) if value else None

    def put_highlights(self, session_id: str, highlights: HighlightResult) -> None:
        self._write("highlights", session_id, highlights.to_dict())

    def get_highlights(self, session_id: str) -> HighlightResult | None:
        value = self._get("highlights", session_id)
        return HighlightResult.from_dict(value) if value else None

    def put_risk(self, session_id: str, risk: RiskAssessment) -> None:
        self._write("risks", session_id, risk.to_dict())

    def get_risk(self, session_id: str) -> RiskAssessment | None:
        value = self._get("risks", session_id)
        return RiskAssessment.from_dict(value) if value else None

    def put_processing(self, session_id: str, state: dict) -> None:
        self._write("processing", session_id, state)

    def get_processing(self, session_id: str) -> dict | None:
        return self._get("processing", session_id)

    # -- provider actions ---------------------------------------------------

    def append_action(self, action: ProviderAction) -> None:
        with self._lock:
            existing = self._get("actions", action.session_id) or {"items": []}
            if action.kind == ActionKind.MARK_DONE and any(
                item["kind"] == ActionKind.MARK_DONE.value for item in existing["items"]
            ):
                raise ConflictError(f"session {action.session_id} is already marked done")
            existing["items"].append(action.to_dict())
            self._write("actions", action.session_id, existing)

    def list_actions(self, session_id: str) -> list[ProviderAction]:
        value = self._get("actions", session_id) or {"items": []}
        return [ProviderAction.from_dict(item) for item in value["items"]]

    def session_done(self, session_id: str) -> bool:
        value = self._get("actions", session_id)
        if not value:
            return False
        return any(item["kind"] == ActionKind.MARK_DONE.value for item in value["items"])

    # -- snapshots ----------------------------------------------------------

    def export_jsonl(self, path: str | Path) -> int:
        """Plaintext JSONL snapshot, one record per line. For fixtures and
        migration, not for backups of sensitive deployments."""
        lines = []
        with self._lock:
            for ns in sorted(self._data):
                for key in sorted(self._data[ns]):
                    lines.append(dumps_canonical(
                        {"ns": ns, "key": key, "value": self._data[ns][key]}
                    ))
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")
        return len(lines)

    def import_jsonl(self, path: str | Path) -> int:
        count = 0
        text = Path(path).read_text("utf-8")
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ns, key, value = record["ns"], record["key"], record["value"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigurationError(f"{path}:{line_number}: bad snapshot line: {exc}") from exc
            self._write(ns, key, value)
            count += 1
        return count
