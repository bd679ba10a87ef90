"""Prompt assembly for the four LLM call sites.

Each prompt kind (question, summary, highlight, risk) is a template file
made of numbered sections separated by fixed ASCII delimiter lines:

    ==== 1. PATIENT INFORMATION ====

Sections 1-3 become the system text, section 4 carries the rendered
conversation, and section 5 (absent for highlight) is the optimization
suffix that is repeated once per conversation round for question prompts.
Assembly is a pure function of its inputs, so identical arguments produce
byte-identical bundles.
"""

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .domain import ConversationProtocol, PatientProfile, Speaker, Turn, TurnKind
from .errors import ConfigurationError, PreconditionError

SECTION_RE = re.compile(r"^==== (\d+)\. (.+?) ====$", re.MULTILINE)
PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")

EMPTY_HISTORY_MARKER = "(no conversation yet)"
TRUNCATION_MARKER = "(earlier turns omitted to fit the context budget)"

# The non-negotiable role clause every question prompt must carry.
NO_ADVICE_CLAUSE = "collecting health information but not giving specific health advice"

PROMPT_KINDS = ("question", "summary", "highlight", "risk")

_VALUE_KIND_PHRASES = {
    "scalar_1_to_10": "a number from 1 to 10",
    "free_text": "in the patient's own words",
    "yes_no": "yes or no",
}


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class PromptBundle:
    kind: str
    system_text: str
    history_block: str
    per_round_suffix: str
    messages: tuple[Message, ...]

    def full_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)


def section_headers(text: str) -> list[tuple[int, str]]:
    """All section delimiter lines in the text, as (number, name) pairs."""
    return [(int(m.group(1)), m.group(2)) for m in SECTION_RE.finditer(text)]


def render_history(turns: list[Turn] | tuple[Turn, ...], budget_chars: int | None = None) -> str:
    """Render turns as labeled lines, trimming to the character budget.

    Oldest normal turns are dropped first, then reprompts, then whole
    loopback confirmation pairs. A pair is never split: the request and its
    response leave together. A marker line records that trimming happened.
    """
    if not turns:
        return EMPTY_HISTORY_MARKER

    labels = {Speaker.PATIENT: "Patient", Speaker.ASSISTANT: "Assistant"}
    kept = list(turns)

    def length(ts: list[Turn]) -> int:
        return sum(len(labels[t.speaker]) + 2 + len(t.text) + 1 for t in ts)

    truncated = False
    if budget_chars is not None:
        while len(kept) > 1 and length(kept) > budget_chars:
            idx = _next_droppable(kept)
            if idx is None:
                break
            turn = kept[idx]
            if (
                turn.kind == TurnKind.LOOPBACK_CONFIRM_REQUEST
                and idx + 1 < len(kept)
                and kept[idx + 1].kind == TurnKind.LOOPBACK_CONFIRM_RESPONSE
            ):
                del kept[idx:idx + 2]
            else:
                del kept[idx]
            truncated = True

    lines = [f"{labels[t.speaker]}: {t.text}" for t in kept]
    if truncated:
        lines.insert(0, TRUNCATION_MARKER)
    return "\n".join(lines)


def _next_droppable(kept: list[Turn]) -> int | None:
    for wanted in (TurnKind.NORMAL, TurnKind.REPROMPT,
                   TurnKind.LOOPBACK_CONFIRM_REQUEST, TurnKind.LOOPBACK_CONFIRM_RESPONSE):
        for i, t in enumerate(kept):
            if t.kind == wanted:
                return i
    return None


class PromptEngine:
    """Loads the template files once and builds prompt bundles from them."""

    def __init__(self, template_dir: str | Path | None = None,
                 history_token_budget: int = 3000, chars_per_token: int = 4):
        if history_token_budget <= 0 or chars_per_token <= 0:
            raise ConfigurationError("history budget values must be positive")
        self.history_budget_chars = history_token_budget * chars_per_token
        self._sections: dict[str, list[tuple[int, str, str]]] = {}
        for kind in PROMPT_KINDS:
            raw = self._read_template(kind, template_dir)
            sections = self._split_sections(kind, raw)
            expected = 4 if kind == "highlight" else 5
            numbers = [n for n, _, _ in sections]
            if numbers != list(range(1, expected + 1)):
                raise ConfigurationError(
                    f"template {kind!r} must contain sections 1..{expected}, found {numbers}"
                )
            self._sections[kind] = sections

    @staticmethod
    def _read_template(kind: str, template_dir: str | Path | None) -> str:
        if template_dir is not None:
            path = Path(template_dir) / f"{kind}.txt"
            if not path.is_file():
                raise ConfigurationError(f"template file not found: {path}")
            return path.read_text("utf-8")
        try:
            return resources.files("talk2care").joinpath(f"templates/{kind}.txt").read_text("utf-8")
        except FileNotFoundError as exc:
            raise ConfigurationError(f"bundled template missing: {kind}.txt") from exc

    @staticmethod
    def _split_sections(kind: str, raw: str) -> list[tuple[int, str, str]]:
        matches = list(SECTION_RE.finditer(raw))
        if not matches:
            raise ConfigurationError(f"template {kind!r} has no section delimiters")
        sections = []
        for i, m in enumerate(matches):
            end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
            body = raw[m.end():end].strip("\n").rstrip()
            sections.append((int(m.group(1)), m.group(2), body))
        return sections

    def _render_section(self, number: int, name: str, body: str, values: dict[str, str]) -> str:
        def sub(match: re.Match) -> str:
            key = match.group(1)
            if key not in values:
                raise ConfigurationError(f"template placeholder {{{{{key}}}}} has no value")
            return values[key]

        rendered = PLACEHOLDER_RE.sub(sub, body)
        return f"==== {number}. {name} ====\n{rendered}"

    def _build(self, kind: str, profile: PatientProfile, protocol: ConversationProtocol,
               turns, rounds: int) -> PromptBundle:
        if profile is None or protocol is None:
            raise ConfigurationError("profile and protocol are required to build a prompt")
        values = self._placeholder_values(profile, protocol, turns)
        rendered = {
            n: self._render_section(n, name, body, values)
            for n, name, body in self._sections[kind]
        }
        system_text = "\n\n".join(rendered[n] for n in (1, 2, 3))
        history_block = rendered[4]
        suffix = rendered.get(5, "")
        messages = [Message("system", system_text), Message("user", history_block)]
        messages.extend(Message("system", suffix) for _ in range(rounds if suffix else 0))
        return PromptBundle(
            kind=kind,
            system_text=system_text,
            history_block=history_block,
            per_round_suffix=suffix,
            messages=tuple(messages),
        )

    def _placeholder_values(self, profile: PatientProfile, protocol: ConversationProtocol,
                            turns) -> dict[str, str]:
        question_protocol = "\n".join(
            f"{i}. {q}" for i, q in enumerate(protocol.question_protocol, start=1)
        ) or "(no scripted questions)"
        if protocol.key_information:
            key_information = "\n".join(
                f"- {s.slot_name}: {s.description} ({_VALUE_KIND_PHRASES[s.value_kind.value]})"
                for s in protocol.key_information
            )
        else:
            key_information = "(none specified)"
        return {
            "name": profile.name,
            "age": str(profile.age),
            "gender": profile.gender,
            "living_situation": profile.living_situation,
            "conditions": "; ".join(profile.conditions) or "none reported",
            "medical_history": "; ".join(profile.medical_history) or "none reported",
            "task_summary": protocol.task_summary,
            "question_protocol": question_protocol,
            "key_information": key_information,
            "history": render_history(turns, self.history_budget_chars),
        }

    def build_question_prompt(self, profile: PatientProfile, protocol: ConversationProtocol,
                              turns: list[Turn], round_number: int) -> PromptBundle:
        """Question-generation prompt; the optimization suffix repeats once per round."""
        if round_number < 1:
            raise PreconditionError(f"round must be >= 1, got {round_number}")
        return self._build("question", profile, protocol, turns, round_number)

    def build_summary_prompt(self, profile: PatientProfile, protocol: ConversationProtocol,
                             transcript: list[Turn]) -> PromptBundle:
        self._require_finished(transcript)
        return self._build("summary", profile, protocol, transcript, 1)

    def build_highlight_prompt(self, profile: PatientProfile, protocol: ConversationProtocol,
                               transcript: list[Turn]) -> PromptBundle:
        self._require_finished(transcript)
        return self._build("highlight", profile, protocol, transcript, 0)

    def build_risk_prompt(self, profile: PatientProfile, protocol: ConversationProtocol,
                          transcript: list[Turn]) -> PromptBundle:
        self._require_finished(transcript)
        return self._build("risk", profile, protocol, transcript, 1)

    def summary_exemplar(self) -> str:
        """The configured in-context example, exactly as the template ships it."""
        for n, name, body in self._sections["summary"]:
            if n == 5:
                return f"==== 5. {name} ====\n{body}"
        raise ConfigurationError("summary template has no section 5")

    @staticmethod
    def _require_finished(transcript) -> None:
        # Provider-facing prompts only make sense for finished conversations,
        # whose transcripts always end with the assistant's closing turn.
        if not transcript:
            raise PreconditionError("transcript is empty; a completed session is required")
        last = transcript[-1]
        if last.speaker != Speaker.ASSISTANT or last.kind != TurnKind.CLOSING:
            raise PreconditionError(
                "transcript does not end with a closing assistant turn; "
                "a completed session is required"
            )
