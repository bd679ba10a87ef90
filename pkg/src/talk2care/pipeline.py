"""Provider-facing pipeline.

Turns a completed session into the three artifacts the dashboard shows:
a clinical-note summary, highlight spans anchored into the raw log, and a
risk assessment. Model output is parsed defensively; whatever the model
said is retained verbatim in raw_model_output so a human can always
counter-check.

Quote anchoring: a quote is first searched for verbatim across the
patient's turns (earliest turn, then lowest offset). Failing that, both
sides are normalized (lowercase, punctuation removed, whitespace collapsed)
and matched on word boundaries, with offsets mapped back to the original
text. Quotes that still match nowhere are only counted, never invented.
"""

import logging
import queue
import re
import string
import threading
from collections import deque
from dataclasses import dataclass

from .domain import (
    ClinicalSummary,
    HighlightResult,
    HighlightSpan,
    RiskAssessment,
    RiskLevel,
    Session,
    SessionStatus,
    Speaker,
    Turn,
    format_ts,
    risk_color,
)
from .errors import ConfigurationError, LifecycleError
from .gateway import CompletionRequest, DEFAULT_ANALYSIS_TEMPERATURE, GatewayError
from .prompts import PromptEngine

log = logging.getLogger(__name__)

SUMMARY_LABELS = ("chief concern", "symptom details", "patient questions", "additional notes")

STAGES = ("summary", "highlight", "risk")

_BULLET_RE = re.compile(r"^\s*(?:[-*•>]+|\d+[.)])\s*")
_QUOTE_CHARS = "\"'“”‘’«»"
_PUNCT = set(string.punctuation) | set("“”‘’…«»–—")
_LEVEL_RE = re.compile(r"\b(low|moderate|high)\b", re.IGNORECASE)
_REASONING_RE = re.compile(r"reasoning\s*:\s*", re.IGNORECASE)


def _label_re(label: str) -> re.Pattern:
    return re.compile(
        rf"(?im)^[ \t]*(?:[#*\->\d.)]+[ \t]*)*{re.escape(label)}[ \t]*:[ \t]*",
    )


_LABEL_RES = {label: _label_re(label) for label in SUMMARY_LABELS}


def parse_summary(raw: str) -> ClinicalSummary:
    """Pull the four labeled sections out of model output.

    Sections may come in any order; labels must match (case-insensitive).
    Output with no recognizable label yields empty fields plus a parse
    warning, never an exception.
    """
    found = []
    for label in SUMMARY_LABELS:
        m = _LABEL_RES[label].search(raw)
        if m:
            found.append((m.start(), m.end(), label))
    if not found:
        return ClinicalSummary("", (), (), (), raw, parse_warning=True)

    found.sort()
    sections: dict[str, str] = {}
    for i, (start, end, label) in enumerate(found):
        stop = found[i + 1][0] if i + 1 < len(found) else len(raw)
        sections[label] = raw[end:stop].strip()

    chief = " ".join(sections.get("chief concern", "").split())
    symptom_details = tuple(
        _split_detail(line) for line in _item_lines(sections.get("symptom details", ""))
    )
    questions = tuple(_item_lines(sections.get("patient questions", "")))
    notes = tuple(_item_lines(sections.get("additional notes", "")))
    return ClinicalSummary(
        chief_concern=chief,
        symptom_details=symptom_details,
        patient_questions=questions,
        additional_notes=notes,
        raw_model_output=raw,
        parse_warning=len(found) < len(SUMMARY_LABELS),
    )


def _item_lines(section: str) -> list[str]:
    lines = []
    for line in section.splitlines():
        stripped = _BULLET_RE.sub("", line).strip()
        if stripped:
            lines.append(stripped)
    return lines


def _split_detail(line: str) -> tuple[str, str]:
    if ":" in line:
        label, _, value = line.partition(":")
        return label.strip(), value.strip()
    return line, ""


def parse_quotes(raw: str) -> list[str]:
    """One quote per output line; bullets, numbering and framing quotes stripped."""
    quotes = []
    for line in raw.splitlines():
        stripped = _BULLET_RE.sub("", line).strip().strip(_QUOTE_CHARS).strip()
        if not stripped:
            continue
        # Short lines ending with a colon read as headers, not quotes.
        if stripped.endswith(":") and len(stripped.split()) <= 4:
            continue
        quotes.append(stripped)
    return quotes


def normalize_with_map(text: str) -> tuple[str, list[int]]:
    """Lowercase, drop punctuation, collapse whitespace.

    Returns the normalized text plus a map from each normalized character
    back to its source offset, so matches can be projected onto the
    original string.
    """
    chars: list[str] = []
    index_map: list[int] = []
    pending_space = False
    for i, ch in enumerate(text):
        if ch.isspace():
            pending_space = bool(chars)
            continue
        if ch in _PUNCT:
            continue
        if pending_space:
            chars.append(" ")
            index_map.append(i)
            pending_space = False
        chars.append(ch.lower())
        index_map.append(i)
    return "".join(chars), index_map


def anchor_quotes(quotes: list[str], turns: list[Turn], raw: str) -> HighlightResult:
    """Anchor each quote into the patient's turns; count what cannot anchor."""
    patient_turns = [t for t in turns if t.speaker == Speaker.PATIENT]
    spans: list[HighlightSpan] = []
    dropped = 0
    for quote in quotes:
        if not quote.strip():
            # parse_quotes never emits these, but an empty quote anchors to
            # nothing; count it instead of minting a zero-width span.
            dropped += 1
            continue
        span = _anchor_exact(quote, patient_turns) or _anchor_normalized(quote, patient_turns)
        if span:
            spans.append(span)
        else:
            dropped += 1
    return HighlightResult(tuple(spans), dropped, raw)


def _anchor_exact(quote: str, patient_turns: list[Turn]) -> HighlightSpan | None:
    for turn in patient_turns:
        pos = turn.text.find(quote)
        if pos >= 0:
            return HighlightSpan(turn.turn_index, pos, pos + len(quote), quote)
    return None


def _anchor_normalized(quote: str, patient_turns: list[Turn]) -> HighlightSpan | None:
    norm_quote, _ = normalize_with_map(quote)
    if not norm_quote:
        return None
    # Word-aligned match only: a normalized quote must not start or end
    # in the middle of a word.
    pattern = re.compile(rf"(?<!\S){re.escape(norm_quote)}(?!\S)")
    for turn in patient_turns:
        norm_text, index_map = normalize_with_map(turn.text)
        m = pattern.search(norm_text)
        if not m:
            continue
        start = index_map[m.start()]
        end = index_map[m.end() - 1] + 1
        return HighlightSpan(turn.turn_index, start, end, turn.text[start:end])
    return None


def parse_risk(raw: str) -> RiskAssessment:
    """First standalone low/moderate/high token wins; no token means review."""
    m = _LEVEL_RE.search(raw)
    reasoning_match = _REASONING_RE.search(raw)
    reasoning = raw[reasoning_match.end():].strip() if reasoning_match else raw.strip()
    if not m:
        return RiskAssessment(None, reasoning, needs_human_review=True, raw_model_output=raw)
    level = RiskLevel(m.group(1).lower())
    return RiskAssessment(level, reasoning, needs_human_review=False, raw_model_output=raw)


class Notifier:
    """In-process fan-out of provider notification events.

    Subscribers get a queue fed with every published event; a bounded
    history allows reconnecting clients to catch up by last seen id.
    """

    def __init__(self, history_limit: int = 256):
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []
        self._history: deque[dict] = deque(maxlen=history_limit)
        self._seq = 0

    def publish(self, event: dict) -> dict:
        with self._lock:
            self._seq += 1
            stamped = {"id": self._seq, **event}
            self._history.append(stamped)
            for q in self._subscribers:
                q.put(stamped)
        return stamped

    def subscribe(self, replay_after: int | None = None) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            if replay_after is not None:
                for event in self._history:
                    if event["id"] > replay_after:
                        q.put(event)
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)


@dataclass
class ProcessingResult:
    session_id: str
    stages: dict[str, str]
    summary: ClinicalSummary | None
    highlights: HighlightResult | None
    risk: RiskAssessment | None
    notified: bool
    version: int

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "stages": dict(self.stages),
            "summary": self.summary.to_dict() if self.summary else None,
            "highlights": self.highlights.to_dict() if self.highlights else None,
            "risk": self.risk.to_dict() if self.risk else None,
            "notified": self.notified,
            "version": self.version,
        }


class ProviderPipeline:
    """Runs the three analysis stages and owns the notification flow.

    Exactly one of backend / backend_factory must be given. A factory is
    called once per processing run with the session, which keeps scripted
    backends deterministic (fresh ordinal counter per run).
    """

    def __init__(self, store, backend=None, backend_factory=None,
                 prompt_engine: PromptEngine | None = None,
                 notifier: Notifier | None = None):
        if (backend is None) == (backend_factory is None):
            raise ConfigurationError("exactly one of backend or backend_factory is required")
        self.store = store
        self._backend = backend
        self._backend_factory = backend_factory
        self.prompts = prompt_engine or PromptEngine()
        self.notifier = notifier or Notifier()

    def _backend_for(self, session: Session):
        if self._backend is not None:
            return self._backend
        return self._backend_factory(session)

    @staticmethod
    def _require_completed(session: Session) -> None:
        if session.status != SessionStatus.COMPLETED:
            raise LifecycleError(
                f"session {session.session_id} is {session.status.value}; "
                "only completed sessions are processed"
            )

    def _complete(self, session: Session, bundle, backend) -> str:
        backend = backend or self._backend_for(session)
        request = CompletionRequest(
            messages=bundle.messages, temperature=DEFAULT_ANALYSIS_TEMPERATURE
        )
        return backend.complete(request)

    def summarize_session(self, session: Session, backend=None) -> ClinicalSummary:
        self._require_completed(session)
        profile = self.store.get_patient(session.patient_id)
        protocol = self.store.get_protocol(session.protocol_id)
        bundle = self.prompts.build_summary_prompt(profile, protocol, session.turns)
        return parse_summary(self._complete(session, bundle, backend))

    def extract_highlights(self, session: Session, backend=None) -> HighlightResult:
        self._require_completed(session)
        profile = self.store.get_patient(session.patient_id)
        protocol = self.store.get_protocol(session.protocol_id)
        bundle = self.prompts.build_highlight_prompt(profile, protocol, session.turns)
        raw = self._complete(session, bundle, backend)
        return anchor_quotes(parse_quotes(raw), session.turns, raw)

    def assess_risk(self, session: Session, backend=None) -> RiskAssessment:
        self._require_completed(session)
        profile = self.store.get_patient(session.patient_id)
        protocol = self.store.get_protocol(session.protocol_id)
        bundle = self.prompts.build_risk_prompt(profile, protocol, session.turns)
        return parse_risk(self._complete(session, bundle, backend))

    def process_session(self, session_id: str, force: bool = False) -> ProcessingResult:
        """Run all stages, persist artifacts, notify once when all are done.

        Stage failures are recorded for retry instead of raised; a later
        run re-attempts only what is missing. Re-running a fully processed
        session is a no-op unless force is set, and never re-notifies.
        """
        session = self.store.get_session(session_id)
        self._require_completed(session)
        state = self.store.get_processing(session_id) or {
            "stages": {}, "notified": False, "version": 0,
        }
        backend = self._backend_for(session)
        runners = {
            "summary": (self.summarize_session, self.store.put_summary),
            "highlight": (self.extract_highlights, self.store.put_highlights),
            "risk": (self.assess_risk, self.store.put_risk),
        }
        ran_any = False
        for stage in STAGES:
            if not force and state["stages"].get(stage) == "done":
                continue
            run, save = runners[stage]
            ran_any = True
            try:
                artifact = run(session, backend=backend)
            except GatewayError as exc:
                state["stages"][stage] = f"error: {exc}"
                log.warning("stage %s failed for session %s", stage, session_id)
                continue
            save(session_id, artifact)
            state["stages"][stage] = "done"

        all_done = all(state["stages"].get(s) == "done" for s in STAGES)
        notified_now = False
        if all_done and not state["notified"]:
            risk = self.store.get_risk(session_id)
            self.notifier.publish({
                "event": "session_processed",
                "session_id": session_id,
                "patient_id": session.patient_id,
                "risk_level": risk.level.value if risk and risk.level else None,
                "risk_color": risk_color(risk.level if risk else None),
                "closed_at": format_ts(session.closed_at) if session.closed_at else None,
            })
            state["notified"] = True
            notified_now = True
        if ran_any:
            state["version"] += 1
        self.store.put_processing(session_id, state)

        return ProcessingResult(
            session_id=session_id,
            stages=dict(state["stages"]),
            summary=self.store.get_summary(session_id),
            highlights=self.store.get_highlights(session_id),
            risk=self.store.get_risk(session_id),
            notified=notified_now,
            version=state["version"],
        )
