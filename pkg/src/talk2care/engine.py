"""Conversation engine.

Drives one session at a time through the status machine below, calling the
LLM backend for replies, looping scalar values back for explicit
confirmation, and handling pauses with reprompts.

Status x event behavior (the full table is TRANSITIONS):

    status                 patient_utterance   pause_timeout        close_request
    active                 handled             reprompt_or_paused   aborted
    awaiting_confirmation  handled             reprompt_or_paused   aborted
    paused                 handled (resumes)   ignored              aborted
    completed              rejected            ignored              rejected
    aborted                rejected            ignored              rejected

Session mutations are committed to the store only after the backend call
succeeded, so a failed call leaves the session exactly as it was and the
caller may retry.
"""

import logging
import re
import threading
from dataclasses import dataclass, field, replace

from .domain import (
    ConversationProtocol,
    Initiator,
    KeySlot,
    PatientProfile,
    PendingLoopback,
    Session,
    SessionStatus,
    Speaker,
    Turn,
    TurnKind,
    TERMINAL_STATUSES,
    ValueKind,
    utc_now,
)
from .errors import LifecycleError, PreconditionError
from .gateway import CompletionRequest, DEFAULT_QUESTION_TEMPERATURE
from .prompts import PromptEngine

log = logging.getLogger(__name__)

EVENTS = ("patient_utterance", "pause_timeout", "close_request")

# Exhaustive (status, event) outcome table. Engine behavior and the state
# machine tests are both held to this.
TRANSITIONS: dict[tuple[SessionStatus, str], str] = {
    (SessionStatus.ACTIVE, "patient_utterance"): "handled",
    (SessionStatus.ACTIVE, "pause_timeout"): "reprompt_or_paused",
    (SessionStatus.ACTIVE, "close_request"): "aborted",
    (SessionStatus.AWAITING_CONFIRMATION, "patient_utterance"): "handled",
    (SessionStatus.AWAITING_CONFIRMATION, "pause_timeout"): "reprompt_or_paused",
    (SessionStatus.AWAITING_CONFIRMATION, "close_request"): "aborted",
    (SessionStatus.PAUSED, "patient_utterance"): "handled",
    (SessionStatus.PAUSED, "pause_timeout"): "ignored",
    (SessionStatus.PAUSED, "close_request"): "aborted",
    (SessionStatus.COMPLETED, "patient_utterance"): "rejected",
    (SessionStatus.COMPLETED, "pause_timeout"): "ignored",
    (SessionStatus.COMPLETED, "close_request"): "rejected",
    (SessionStatus.ABORTED, "patient_utterance"): "rejected",
    (SessionStatus.ABORTED, "pause_timeout"): "ignored",
    (SessionStatus.ABORTED, "close_request"): "rejected",
}


class RoundLimitExceeded(LifecycleError):
    """The conversation hit max_rounds and was aborted."""


@dataclass(frozen=True)
class GuardrailResult:
    passed: bool
    matched_pattern: str | None = None


@dataclass(frozen=True)
class EngineConfig:
    max_rounds: int = 30
    pause_timeout_s: float = 60.0
    reprompt_text: str = "Sorry, are you still there?"
    closing_phrases: tuple[str, ...] = ("goodbye",)
    loopback_value_kinds: frozenset[ValueKind] = frozenset({ValueKind.SCALAR_1_TO_10})
    confirm_template: str = "Just to confirm, you said {value}. Is that correct?"
    affirmations: tuple[str, ...] = (
        "yes", "yeah", "yep", "correct", "right", "exactly", "sure", "indeed",
    )
    negations: tuple[str, ...] = (
        "no", "nope", "not", "wrong", "incorrect", "never",
    )
    # Aimed at concrete prescription instructions, not general health talk.
    guardrail_deny_patterns: tuple[str, ...] = (
        r"\btake\s+\d+\s*(?:mg|mcg|milligrams?|tablets?|pills?)\b",
        r"\b(?:double|halve|increase|decrease|stop taking)\s+(?:your|the)\s+(?:dose|dosage|medication)\b",
    )
    deflection_text: str = (
        "I'm not a doctor, but it would be best to consult with your healthcare "
        "provider about that. I can pass this information along so they can "
        "assist you further."
    )

    def __post_init__(self):
        if self.max_rounds < 1:
            raise PreconditionError("max_rounds must be at least 1")
        if self.pause_timeout_s <= 0:
            raise PreconditionError("pause_timeout_s must be positive")


_NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}
_SCALAR_TOKEN_RE = re.compile(
    r"\b(10|[1-9]|one|two|three|four|five|six|seven|eight|nine|ten)\b", re.IGNORECASE
)
# "1 to 10" and friends are part of the question wording, not an answer.
_SCALE_PHRASE_RE = re.compile(
    r"\b(?:1|one)\s*(?:to|through|-)\s*(?:10|ten)\b", re.IGNORECASE
)
_RATING_CUES = ("rate", "rating", "scale")

# Slot-name tokens too generic to identify a slot on their own.
_GENERIC_SLOT_TOKENS = {
    "level", "value", "score", "rating", "scale", "number", "amount", "degree",
}

_WORD_CACHE: dict[str, re.Pattern] = {}


def _word_re(word: str) -> re.Pattern:
    pattern = _WORD_CACHE.get(word)
    if pattern is None:
        pattern = re.compile(rf"\b{re.escape(word)}\b", re.IGNORECASE)
        _WORD_CACHE[word] = pattern
    return pattern


def classify_confirmation(answer: str, config: EngineConfig) -> str:
    """'affirmative', 'negative' or 'ambiguous'. Negation wins on conflict."""
    for phrase in config.negations:
        if _word_re(phrase).search(answer):
            return "negative"
    for phrase in config.affirmations:
        if _word_re(phrase).search(answer):
            return "affirmative"
    return "ambiguous"


def extract_scalar(answer: str) -> int | None:
    """Leftmost standalone 1..10 in the answer, digits or words.

    Scale wordings like 'on a scale of 1 to 10' are stripped first so an
    echoed question never reads as an answer.
    """
    cleaned = _SCALE_PHRASE_RE.sub(" ", answer)
    m = _SCALAR_TOKEN_RE.search(cleaned)
    if not m:
        return None
    token = m.group(1).lower()
    return _NUMBER_WORDS.get(token) or int(token)


def _slot_tokens(slot: KeySlot) -> set[str]:
    tokens = {t.lower() for t in slot.slot_name.split("_")}
    return {t for t in tokens if len(t) > 2 and t not in _GENERIC_SLOT_TOKENS}


def _slot_matches_question(slot: KeySlot, question_lower: str) -> bool:
    if slot.value_kind == ValueKind.SCALAR_1_TO_10:
        if not any(cue in question_lower for cue in _RATING_CUES):
            return False
    tokens = _slot_tokens(slot)
    if not tokens:
        return False
    return any(_word_re(t).search(question_lower) for t in tokens)


def detect_loopback(
    protocol: ConversationProtocol,
    question: str | None,
    answer: str,
    value_kinds: frozenset[ValueKind] = frozenset({ValueKind.SCALAR_1_TO_10}),
    exclude_slots: frozenset[str] | set[str] = frozenset(),
) -> tuple[str, int | str | bool] | None:
    """Decide whether the answer carries a value that must be confirmed.

    Returns (slot_name, candidate_value) when the preceding question targets
    a loopback-eligible slot and the answer yields a value for it, else None.
    """
    if not question or not answer:
        return None
    question_lower = question.lower()
    for slot in protocol.key_information:
        if slot.value_kind not in value_kinds or slot.slot_name in exclude_slots:
            continue
        if not _slot_matches_question(slot, question_lower):
            continue
        value = _extract_for_kind(slot.value_kind, answer)
        if value is not None:
            return slot.slot_name, value
    return None


def _extract_for_kind(kind: ValueKind, answer: str) -> int | str | bool | None:
    if kind == ValueKind.SCALAR_1_TO_10:
        return extract_scalar(answer)
    if kind == ValueKind.YES_NO:
        verdict = classify_confirmation(answer, EngineConfig())
        if verdict == "affirmative":
            return True
        if verdict == "negative":
            return False
        return None
    text = answer.strip()
    return text or None


def guardrail_check(reply: str, config: EngineConfig) -> GuardrailResult:
    """Flag replies that read as concrete medical instructions."""
    for pattern in config.guardrail_deny_patterns:
        if re.search(pattern, reply, re.IGNORECASE):
            return GuardrailResult(passed=False, matched_pattern=pattern)
    return GuardrailResult(passed=True)


class ConversationEngine:
    def __init__(self, store, backend, prompt_engine: PromptEngine | None = None,
                 config: EngineConfig | None = None, clock=None):
        self.store = store
        self.backend = backend
        self.prompts = prompt_engine or PromptEngine()
        self.config = config or EngineConfig()
        self.clock = clock or utc_now
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, session_id: str) -> threading.RLock:
        with self._locks_guard:
            lock = self._locks.get(session_id)
            if lock is None:
                lock = threading.RLock()
                self._locks[session_id] = lock
            return lock

    # -- session lifecycle -------------------------------------------------

    def start_session(self, patient_id: str, protocol_id: str,
                      initiator: Initiator | str) -> Session:
        """Create a session; provider-initiated ones open with a generated greeting."""
        initiator = Initiator(initiator)
        profile = self.store.get_patient(patient_id)
        protocol = self.store.get_protocol(protocol_id)
        session = Session(
            session_id=self.store.new_id(),
            patient_id=patient_id,
            protocol_id=protocol_id,
            initiator=initiator,
            created_at=self.clock(),
        )
        if initiator == Initiator.PROVIDER:
            reply_text = self._generate(profile, protocol, session.turns, round_number=1)
            self._commit_reply(session, protocol, reply_text, loopback=None)
        self.store.put_session(session)
        return session

    def patient_turn(self, session_id: str, utterance: str) -> Turn:
        """Record the patient's utterance and return the assistant's reply turn."""
        with self._lock_for(session_id):
            session = self.store.get_session(session_id)
            if session.status in TERMINAL_STATUSES:
                raise LifecycleError(
                    f"session {session_id} is {session.status.value}; no further turns"
                )
            profile = self.store.get_patient(session.patient_id)
            protocol = self.store.get_protocol(session.protocol_id)

            if session.status == SessionStatus.PAUSED:
                session.status = SessionStatus.ACTIVE

            if session.status == SessionStatus.AWAITING_CONFIRMATION:
                # An empty utterance here is just an ambiguous confirmation.
                reply = self._resolve_loopback(session, profile, protocol, utterance)
            else:
                if not utterance or not utterance.strip():
                    raise PreconditionError("utterance must be non-empty")
                reply = self._active_turn(session, profile, protocol, utterance)
            self.store.put_session(session)
            return reply

    def close(self, session_id: str) -> Session:
        """Terminate without the natural farewell; the session ends aborted."""
        with self._lock_for(session_id):
            session = self.store.get_session(session_id)
            if session.status in TERMINAL_STATUSES:
                raise LifecycleError(f"session {session_id} is already {session.status.value}")
            session.status = SessionStatus.ABORTED
            session.pending_loopback = None
            session.closed_at = self.clock()
            self.store.put_session(session)
            return session

    def handle_pause(self, session_id: str) -> Turn | None:
        """Timer-driven pause event.

        Emits a reprompt restating the pending question, parks the session in
        paused after the configured number of consecutive reprompts, and is a
        no-op on sessions where a pause means nothing. Returns the reprompt
        turn, or None when no turn was emitted.
        """
        with self._lock_for(session_id):
            session = self.store.get_session(session_id)
            if session.status not in (SessionStatus.ACTIVE, SessionStatus.AWAITING_CONFIRMATION):
                return None
            now = self.clock()
            last = session.last_turn()
            reference = last.timestamp if last else session.created_at
            if (now - reference).total_seconds() < self.config.pause_timeout_s:
                return None

            trailing = 0
            for turn in reversed(session.turns):
                if turn.kind == TurnKind.REPROMPT:
                    trailing += 1
                else:
                    break
            if trailing >= 2:
                # Parking the session abandons any unconfirmed candidate:
                # silence is not a confirmation, and paused sessions carry
                # no pending loopback.
                session.status = SessionStatus.PAUSED
                session.pending_loopback = None
                self.store.put_session(session)
                return None

            question = self._last_question(session)
            text = f"{self.config.reprompt_text} {question}".strip() if question \
                else self.config.reprompt_text
            turn = session.append_turn(Speaker.ASSISTANT, text, now, TurnKind.REPROMPT)
            self.store.put_session(session)
            return turn

    # -- turn handling -----------------------------------------------------

    def _active_turn(self, session: Session, profile: PatientProfile,
                     protocol: ConversationProtocol, utterance: str) -> Turn:
        now = self.clock()
        question = self._last_question(session)
        loopback = detect_loopback(
            protocol, question, utterance,
            value_kinds=self.config.loopback_value_kinds,
            exclude_slots=set(session.collected_slots),
        )
        round_number = self._round_number(session)
        if round_number > self.config.max_rounds:
            session.append_turn(Speaker.PATIENT, utterance, now)
            session.status = SessionStatus.ABORTED
            session.closed_at = now
            self.store.put_session(session)
            raise RoundLimitExceeded(
                f"session {session.session_id} exceeded max_rounds={self.config.max_rounds}"
            )

        pending_turn = Turn(len(session.turns), Speaker.PATIENT, utterance, now)
        reply_text = self._generate(
            profile, protocol, session.turns + [pending_turn], round_number
        )
        session.append_turn(Speaker.PATIENT, utterance, now)
        return self._commit_reply(session, protocol, reply_text, loopback)

    def _resolve_loopback(self, session: Session, profile: PatientProfile,
                          protocol: ConversationProtocol, answer: str) -> Turn:
        pending = session.pending_loopback
        assert pending is not None, "awaiting_confirmation without pending_loopback"
        verdict = classify_confirmation(answer, self.config)

        if verdict == "ambiguous" and pending.reask_count < 1:
            now = self.clock()
            session.append_turn(Speaker.PATIENT, answer, now,
                                TurnKind.LOOPBACK_CONFIRM_RESPONSE)
            request_text = self._last_confirm_request(session) or \
                self.config.confirm_template.format(value=pending.candidate_value)
            session.pending_loopback = replace(pending, reask_count=pending.reask_count + 1)
            return session.append_turn(Speaker.ASSISTANT, request_text, self.clock(),
                                       TurnKind.LOOPBACK_CONFIRM_REQUEST)

        if verdict == "affirmative":
            # Commit only after the resumed reply is generated, so a backend
            # failure leaves the confirmation still pending.
            round_number = self._round_number(session)
            now = self.clock()
            pending_turn = Turn(len(session.turns), Speaker.PATIENT, answer, now,
                                TurnKind.LOOPBACK_CONFIRM_RESPONSE)
            reply_text = self._generate(
                profile, protocol, session.turns + [pending_turn], round_number
            )
            session.append_turn(Speaker.PATIENT, answer, now,
                                TurnKind.LOOPBACK_CONFIRM_RESPONSE)
            session.collected_slots[pending.slot_name] = pending.candidate_value
            session.pending_loopback = None
            session.status = SessionStatus.ACTIVE
            return self._commit_reply(session, protocol, reply_text, loopback=None)

        # Negative, or ambiguous past the re-ask budget: the candidate is
        # discarded. A corrected value in the same answer starts a fresh
        # confirmation; otherwise the original question is asked again.
        now = self.clock()
        session.append_turn(Speaker.PATIENT, answer, now, TurnKind.LOOPBACK_CONFIRM_RESPONSE)
        slot = protocol.slot(pending.slot_name)
        corrected = _extract_for_kind(slot.value_kind, answer) if slot else None
        if corrected is not None and corrected != pending.candidate_value:
            session.pending_loopback = PendingLoopback(pending.slot_name, corrected)
            text = self.config.confirm_template.format(value=corrected)
            return session.append_turn(Speaker.ASSISTANT, text, self.clock(),
                                       TurnKind.LOOPBACK_CONFIRM_REQUEST)

        session.pending_loopback = None
        session.status = SessionStatus.ACTIVE
        question = self._last_question(session, kinds=(TurnKind.NORMAL,))
        if question is None:
            reply_text = self._generate(profile, protocol, session.turns,
                                        self._round_number(session))
            return self._commit_reply(session, protocol, reply_text, loopback=None)
        return session.append_turn(Speaker.ASSISTANT, question, self.clock())

    # -- helpers -------------------------------------------------------

    def _round_number(self, session: Session) -> int:
        """1-based round: every prior assistant turn counts except reprompts."""
        prior = sum(
            1 for t in session.turns
            if t.speaker == Speaker.ASSISTANT and t.kind != TurnKind.REPROMPT
        )
        return prior + 1

    def _generate(self, profile: PatientProfile, protocol: ConversationProtocol,
                  turns: list[Turn], round_number: int) -> str:
        bundle = self.prompts.build_question_prompt(profile, protocol, turns, round_number)
        request = CompletionRequest(
            messages=bundle.messages, temperature=DEFAULT_QUESTION_TEMPERATURE
        )
        text = self.backend.complete(request)
        verdict = guardrail_check(text, self.config)
        if not verdict.passed:
            log.warning("guardrail replaced a generated reply (pattern %r)",
                        verdict.matched_pattern)
            return self.config.deflection_text
        return text

    def _commit_reply(self, session: Session, protocol: ConversationProtocol,
                      reply_text: str, loopback: tuple[str, int | str | bool] | None) -> Turn:
        now = self.clock()
        if loopback is not None:
            slot_name, value = loopback
            turn = session.append_turn(Speaker.ASSISTANT, reply_text, now,
                                       TurnKind.LOOPBACK_CONFIRM_REQUEST)
            session.pending_loopback = PendingLoopback(slot_name, value)
            session.status = SessionStatus.AWAITING_CONFIRMATION
            return turn
        if self._is_closing(reply_text):
            turn = session.append_turn(Speaker.ASSISTANT, reply_text, now, TurnKind.CLOSING)
            session.status = SessionStatus.COMPLETED
            session.closed_at = now
            return turn
        turn = session.append_turn(Speaker.ASSISTANT, reply_text, now)
        session.status = SessionStatus.ACTIVE
        return turn

    def _is_closing(self, reply_text: str) -> bool:
        lowered = reply_text.lower()
        return any(phrase.lower() in lowered for phrase in self.config.closing_phrases)

    @staticmethod
    def _last_question(session: Session,
                       kinds: tuple[TurnKind, ...] = (
                           TurnKind.NORMAL, TurnKind.LOOPBACK_CONFIRM_REQUEST,
                       )) -> str | None:
        for turn in reversed(session.turns):
            if turn.speaker == Speaker.ASSISTANT and turn.kind in kinds:
                return turn.text
        return None

    @staticmethod
    def _last_confirm_request(session: Session) -> str | None:
        for turn in reversed(session.turns):
            if turn.kind == TurnKind.LOOPBACK_CONFIRM_REQUEST:
                return turn.text
        return None
