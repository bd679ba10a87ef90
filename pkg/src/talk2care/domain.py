"""Core domain types and their JSON encoding.

Everything that crosses a process boundary (store journal, HTTP payloads,
fixture files) is one of these types, serialized as UTF-8 JSON with
snake_case field names. Values are treated as immutable once constructed;
mutation happens only through the conversation engine and the store.
"""

import json
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

from .errors import ValidationError


class Speaker(str, Enum):
    PATIENT = "patient"
    ASSISTANT = "assistant"


class TurnKind(str, Enum):
    NORMAL = "normal"
    LOOPBACK_CONFIRM_REQUEST = "loopback_confirm_request"
    LOOPBACK_CONFIRM_RESPONSE = "loopback_confirm_response"
    REPROMPT = "reprompt"
    CLOSING = "closing"


class SessionStatus(str, Enum):
    ACTIVE = "active"
    AWAITING_CONFIRMATION = "awaiting_confirmation"
    PAUSED = "paused"
    COMPLETED = "completed"
    ABORTED = "aborted"


TERMINAL_STATUSES = {SessionStatus.COMPLETED, SessionStatus.ABORTED}


class Initiator(str, Enum):
    PATIENT = "patient"
    PROVIDER = "provider"


class ValueKind(str, Enum):
    SCALAR_1_TO_10 = "scalar_1_to_10"
    FREE_TEXT = "free_text"
    YES_NO = "yes_no"


class RiskLevel(str, Enum):
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"


class ActionKind(str, Enum):
    NOTE = "note"
    FOLLOW_UP_CALL = "follow_up_call"
    SCHEDULE_VISIT = "schedule_visit"
    ESCALATE = "escalate"
    MARK_DONE = "mark_done"
    CUSTOM = "custom"


def new_id() -> str:
    """Opaque id, never derived from patient data."""
    return uuid.uuid4().hex


def utc_now() -> datetime:
    """Current UTC time truncated to millisecond precision.

    Millisecond truncation keeps timestamps stable across an
    encode/decode round trip.
    """
    now = datetime.now(timezone.utc)
    return now.replace(microsecond=(now.microsecond // 1000) * 1000)


def format_ts(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def parse_ts(raw: str) -> datetime:
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValidationError("timestamp", f"not an ISO-8601 timestamp: {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    name: str
    age: int
    gender: str
    living_situation: str
    conditions: tuple[str, ...] = ()
    medical_history: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.patient_id:
            raise ValidationError("patient_id", "must be non-empty")
        if not isinstance(self.age, int) or self.age <= 0:
            raise ValidationError("age", f"must be a positive integer, got {self.age!r}")
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "medical_history", tuple(self.medical_history))

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "name": self.name,
            "age": self.age,
            "gender": self.gender,
            "living_situation": self.living_situation,
            "conditions": list(self.conditions),
            "medical_history": list(self.medical_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatientProfile":
        return cls(
            patient_id=d["patient_id"],
            name=d["name"],
            age=d["age"],
            gender=d["gender"],
            living_situation=d["living_situation"],
            conditions=tuple(d.get("conditions", ())),
            medical_history=tuple(d.get("medical_history", ())),
        )


@dataclass(frozen=True)
class KeySlot:
    """One piece of key information the conversation should collect."""

    slot_name: str
    description: str
    value_kind: ValueKind

    def to_dict(self) -> dict:
        return {
            "slot_name": self.slot_name,
            "description": self.description,
            "value_kind": self.value_kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeySlot":
        return cls(d["slot_name"], d["description"], ValueKind(d["value_kind"]))


@dataclass(frozen=True)
class ConversationProtocol:
    protocol_id: str
    task_summary: str
    question_protocol: tuple[str, ...]
    key_information: tuple[KeySlot, ...] = ()

    def __post_init__(self):
        if not self.protocol_id:
            raise ValidationError("protocol_id", "must be non-empty")
        object.__setattr__(self, "question_protocol", tuple(self.question_protocol))
        object.__setattr__(self, "key_information", tuple(self.key_information))
        names = [s.slot_name for s in self.key_information]
        if len(names) != len(set(names)):
            raise ValidationError("key_information", "slot names must be unique")

    def slot(self, slot_name: str) -> KeySlot | None:
        for s in self.key_information:
            if s.slot_name == slot_name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "protocol_id": self.protocol_id,
            "task_summary": self.task_summary,
            "question_protocol": list(self.question_protocol),
            "key_information": [s.to_dict() for s in self.key_information],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConversationProtocol":
        return cls(
            protocol_id=d["protocol_id"],
            task_summary=d["task_summary"],
            question_protocol=tuple(d["question_protocol"]),
            key_information=tuple(KeySlot.from_dict(s) for s in d.get("key_information", ())),
        )


@dataclass(frozen=True)
class Turn:
    turn_index: int
    speaker: Speaker
    text: str
    timestamp: datetime
    kind: TurnKind = TurnKind.NORMAL

    def __post_init__(self):
        if self.turn_index < 0:
            raise ValidationError("turn_index", "must be >= 0")

    def to_dict(self) -> dict:
        return {
            "turn_index": self.turn_index,
            "speaker": self.speaker.value,
            "text": self.text,
            "timestamp": format_ts(self.timestamp),
            "kind": self.kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(
            turn_index=d["turn_index"],
            speaker=Speaker(d["speaker"]),
            text=d["text"],
            timestamp=parse_ts(d["timestamp"]),
            kind=TurnKind(d.get("kind", "normal")),
        )


@dataclass(frozen=True)
class PendingLoopback:
    """A looped-back value waiting for the patient's explicit confirmation."""

    slot_name: str
    candidate_value: int | str | bool
    reask_count: int = 0

    def to_dict(self) -> dict:
        return {
            "slot_name": self.slot_name,
            "candidate_value": self.candidate_value,
            "reask_count": self.reask_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PendingLoopback":
        return cls(d["slot_name"], d["candidate_value"], d.get("reask_count", 0))


@dataclass
class Session:
    """One patient-assistant conversation.

    Mutable on purpose: the conversation engine appends turns and moves the
    status along. Nothing else should touch a session in place.
    """

    session_id: str
    patient_id: str
    protocol_id: str
    initiator: Initiator
    created_at: datetime
    turns: list[Turn] = field(default_factory=list)
    status: SessionStatus = SessionStatus.ACTIVE
    pending_loopback: PendingLoopback | None = None
    collected_slots: dict[str, int | str | bool] = field(default_factory=dict)
    closed_at: datetime | None = None

    def last_turn(self) -> Turn | None:
        return self.turns[-1] if self.turns else None

    def append_turn(self, speaker: Speaker, text: str, timestamp: datetime,
                    kind: TurnKind = TurnKind.NORMAL) -> Turn:
        turn = Turn(len(self.turns), speaker, text, timestamp, kind)
        self.turns.append(turn)
        return turn

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "patient_id": self.patient_id,
            "protocol_id": self.protocol_id,
            "initiator": self.initiator.value,
            "created_at": format_ts(self.created_at),
            "turns": [t.to_dict() for t in self.turns],
            "status": self.status.value,
            "pending_loopback": self.pending_loopback.to_dict() if self.pending_loopback else None,
            "collected_slots": dict(self.collected_slots),
            "closed_at": format_ts(self.closed_at) if self.closed_at else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        pending = d.get("pending_loopback")
        closed = d.get("closed_at")
        return cls(
            session_id=d["session_id"],
            patient_id=d["patient_id"],
            protocol_id=d["protocol_id"],
            initiator=Initiator(d["initiator"]),
            created_at=parse_ts(d["created_at"]),
            turns=[Turn.from_dict(t) for t in d.get("turns", ())],
            status=SessionStatus(d["status"]),
            pending_loopback=PendingLoopback.from_dict(pending) if pending else None,
            collected_slots=dict(d.get("collected_slots", {})),
            closed_at=parse_ts(closed) if closed else None,
        )


@dataclass(frozen=True)
class ClinicalSummary:
    chief_concern: str
    symptom_details: tuple[tuple[str, str], ...]
    patient_questions: tuple[str, ...]
    additional_notes: tuple[str, ...]
    raw_model_output: str
    parse_warning: bool = False

    def to_dict(self) -> dict:
        return {
            "chief_concern": self.chief_concern,
            "symptom_details": [[label, value] for label, value in self.symptom_details],
            "patient_questions": list(self.patient_questions),
            "additional_notes": list(self.additional_notes),
            "raw_model_output": self.raw_model_output,
            "parse_warning": self.parse_warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalSummary":
        return cls(
            chief_concern=d["chief_concern"],
            symptom_details=tuple((label, value) for label, value in d.get("symptom_details", ())),
            patient_questions=tuple(d.get("patient_questions", ())),
            additional_notes=tuple(d.get("additional_notes", ())),
            raw_model_output=d["raw_model_output"],
            parse_warning=d.get("parse_warning", False),
        )


@dataclass(frozen=True)
class HighlightSpan:
    """A quote anchored into a patient turn. Offsets are half-open."""

    turn_index: int
    char_start: int
    char_end: int
    quote: str

    def __post_init__(self):
        if not (0 <= self.char_start < self.char_end):
            raise ValidationError("char_start", "span must be non-empty and non-negative")

    def to_dict(self) -> dict:
        return {
            "turn_index": self.turn_index,
            "char_start": self.char_start,
            "char_end": self.char_end,
            "quote": self.quote,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HighlightSpan":
        return cls(d["turn_index"], d["char_start"], d["char_end"], d["quote"])


@dataclass(frozen=True)
class HighlightResult:
    spans: tuple[HighlightSpan, ...]
    dropped_quotes: int
    raw_model_output: str

    def to_dict(self) -> dict:
        return {
            "spans": [s.to_dict() for s in self.spans],
            "dropped_quotes": self.dropped_quotes,
            "raw_model_output": self.raw_model_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HighlightResult":
        return cls(
            spans=tuple(HighlightSpan.from_dict(s) for s in d.get("spans", ())),
            dropped_quotes=d["dropped_quotes"],
            raw_model_output=d["raw_model_output"],
        )


@dataclass(frozen=True)
class RiskAssessment:
    level: RiskLevel | None
    reasoning: str
    needs_human_review: bool
    raw_model_output: str

    def to_dict(self) -> dict:
        return {
            "level": self.level.value if self.level else None,
            "reasoning": self.reasoning,
            "needs_human_review": self.needs_human_review,
            "raw_model_output": self.raw_model_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RiskAssessment":
        level = d.get("level")
        return cls(
            level=RiskLevel(level) if level else None,
            reasoning=d["reasoning"],
            needs_human_review=d["needs_human_review"],
            raw_model_output=d["raw_model_output"],
        )


RISK_COLORS = {
    RiskLevel.LOW: "green",
    RiskLevel.MODERATE: "yellow",
    RiskLevel.HIGH: "red",
}


def risk_color(level: RiskLevel | None) -> str:
    """Dot color shown next to a session. Unassessed sessions are gray."""
    return RISK_COLORS.get(level, "gray")


@dataclass(frozen=True)
class ProviderAction:
    action_id: str
    session_id: str
    kind: ActionKind
    body: str
    author: str
    created_at: datetime

    def to_dict(self) -> dict:
        return {
            "action_id": self.action_id,
            "session_id": self.session_id,
            "kind": self.kind.value,
            "body": self.body,
            "author": self.author,
            "created_at": format_ts(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderAction":
        return cls(
            action_id=d["action_id"],
            session_id=d["session_id"],
            kind=ActionKind(d["kind"]),
            body=d.get("body", ""),
            author=d.get("author", ""),
            created_at=parse_ts(d["created_at"]),
        )


def dumps_canonical(payload: dict) -> str:
    """Stable JSON encoding: sorted keys, no extra whitespace, raw UTF-8."""
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def render_transcript(session: Session) -> str:
    """Human-readable transcript, one line per turn.

    This is also the canonical form compared by the replay tests, so the
    format must stay stable: 'Patient: ' or 'Assistant: ' prefix, verbatim
    text, newline-joined.
    """
    labels = {Speaker.PATIENT: "Patient", Speaker.ASSISTANT: "Assistant"}
    return "\n".join(f"{labels[t.speaker]}: {t.text}" for t in session.turns)


_WORD_RE = re.compile(r"\b\w+\b")


def validate_session(session: Session) -> list[str]:
    """Check a session against the structural invariants.

    Returns a list of human-readable violations, empty when the session is
    well-formed. Used by the CLI (nonzero exit) and by tests as the oracle
    for engine behavior.
    """
    violations: list[str] = []

    for i, turn in enumerate(session.turns):
        if turn.turn_index != i:
            violations.append(
                f"turns[{i}]: turn_index {turn.turn_index} breaks the 0..n-1 sequence"
            )

    # Speakers alternate; the one sanctioned exception is an assistant
    # reprompt following an assistant turn after a pause.
    for i in range(1, len(session.turns)):
        prev, cur = session.turns[i - 1], session.turns[i]
        if cur.speaker == prev.speaker:
            if cur.speaker == Speaker.ASSISTANT and cur.kind == TurnKind.REPROMPT:
                continue
            violations.append(
                f"turns[{i}]: consecutive {cur.speaker.value} turns without a reprompt"
            )

    awaiting = session.status == SessionStatus.AWAITING_CONFIRMATION
    if awaiting and session.pending_loopback is None:
        violations.append("status is awaiting_confirmation but pending_loopback is absent")
    if not awaiting and session.pending_loopback is not None:
        violations.append(
            f"pending_loopback present but status is {session.status.value}"
        )

    terminal = session.status in TERMINAL_STATUSES
    if terminal and session.closed_at is None:
        violations.append(f"status is {session.status.value} but closed_at is unset")
    if not terminal and session.closed_at is not None:
        violations.append(f"closed_at set on a {session.status.value} session")

    if session.status == SessionStatus.COMPLETED and session.turns:
        last = session.turns[-1]
        if last.speaker != Speaker.ASSISTANT or last.kind != TurnKind.CLOSING:
            violations.append("completed session does not end with an assistant closing turn")

    # Integer slot values come from scalar_1_to_10 slots, which must only be
    # committed after an explicit loopback confirmation pair.
    for slot_name, value in session.collected_slots.items():
        if not isinstance(value, bool) and isinstance(value, int):
            if not _has_confirm_pair(session, value):
                violations.append(
                    f"collected slot {slot_name!r}={value} has no preceding "
                    "loopback confirmation pair"
                )

    return violations


def _has_confirm_pair(session: Session, value: int) -> bool:
    token = str(value)
    for i in range(len(session.turns) - 1):
        req, resp = session.turns[i], session.turns[i + 1]
        if (
            req.speaker == Speaker.ASSISTANT
            and req.kind == TurnKind.LOOPBACK_CONFIRM_REQUEST
            and resp.speaker == Speaker.PATIENT
            and resp.kind == TurnKind.LOOPBACK_CONFIRM_RESPONSE
            and token in _WORD_RE.findall(req.text)
        ):
            return True
    return False
