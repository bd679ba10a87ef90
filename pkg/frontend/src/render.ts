import { escapeHtml, formatWhen, label } from "./format.js";
import type {
  HighlightSpan,
  ProviderAction,
  QueueFilters,
  QueuePage,
  QueueRow,
  SessionDetail,
  Turn,
} from "./types.js";

export function dot(color: string): string {
  return `<span class="dot dot-${escapeHtml(color)}" title="risk: ${escapeHtml(color)}"></span>`;
}

// ---------------------------------------------------------------------------
// Queue view
// ---------------------------------------------------------------------------

const RISK_OPTIONS = ["", "low", "moderate", "high"];
const STATUS_OPTIONS = ["", "active", "awaiting_confirmation", "paused", "completed", "aborted"];

function options(values: string[], selected: string | undefined): string {
  return values
    .map((v) => {
      const sel = v === (selected ?? "") ? " selected" : "";
      const text = v === "" ? "all" : label(v);
      return `<option value="${escapeHtml(v)}"${sel}>${escapeHtml(text)}</option>`;
    })
    .join("");
}

export function renderQueue(
  page: QueuePage,
  filters: QueueFilters,
  patients: { patient_id: string; name: string }[] = [],
): string {
  const patientOptions =
    `<option value="">all</option>` +
    patients
      .map((p) => {
        const sel = p.patient_id === filters.patient_id ? " selected" : "";
        return `<option value="${escapeHtml(p.patient_id)}"${sel}>${escapeHtml(p.name)}</option>`;
      })
      .join("");

  const rows = page.sessions.map(renderQueueRow).join("");
  const empty = `<tr><td colspan="8" class="empty">No sessions match the current filters.</td></tr>`;

  return `
<section class="queue-view">
  <form class="filters" data-role="queue-filters">
    <label>risk <select name="risk">${options(RISK_OPTIONS, filters.risk)}</select></label>
    <label>status <select name="status">${options(STATUS_OPTIONS, filters.status)}</select></label>
    <label>patient <select name="patient_id">${patientOptions}</select></label>
    <label class="toggle"><input type="checkbox" name="show_done"${filters.done === undefined ? " checked" : ""}> show done</label>
    <span class="legend">${dot("red")} high ${dot("yellow")} moderate ${dot("green")} low ${dot("gray")} unassessed</span>
  </form>
  <table class="queue">
    <thead><tr>
      <th></th><th>patient</th><th>protocol</th><th>status</th>
      <th>turns</th><th>closed</th><th>review</th><th></th>
    </tr></thead>
    <tbody>${rows || empty}</tbody>
  </table>
  <div class="queue-foot">${page.sessions.length} of ${page.total} session(s)</div>
</section>`;
}

export function renderQueueRow(row: QueueRow): string {
  const review = row.needs_human_review
    ? `<span class="badge badge-review">needs review</span>`
    : "";
  const doneBadge = row.done ? `<span class="badge badge-done">done</span>` : "";
  return `
<tr class="queue-row${row.done ? " is-done" : ""}" data-session="${escapeHtml(row.session_id)}">
  <td class="cell-dot">${dot(row.risk_color)}</td>
  <td><a href="#/session/${escapeHtml(row.session_id)}">${escapeHtml(row.patient_name)}</a>
      <span class="sub">${escapeHtml(row.patient_id)}</span></td>
  <td>${escapeHtml(row.protocol_id)}</td>
  <td>${escapeHtml(label(row.status))}</td>
  <td class="num">${row.turn_count}</td>
  <td>${escapeHtml(formatWhen(row.closed_at))}</td>
  <td>${review}</td>
  <td>${doneBadge}</td>
</tr>`;
}

// ---------------------------------------------------------------------------
// Session detail
// ---------------------------------------------------------------------------

/**
 * Wrap each highlight span of one turn in <mark>, escaping everything else.
 * Spans come from the server as character offsets into the raw turn text, so
 * the slicing has to happen before HTML escaping, never after.
 */
export function highlightTurnText(text: string, spans: HighlightSpan[]): string {
  const ordered = [...spans].sort((a, b) => a.char_start - b.char_start);
  let html = "";
  let cursor = 0;
  for (const span of ordered) {
    if (span.char_start < cursor || span.char_end > text.length) continue;
    if (span.char_end <= span.char_start) continue;
    html += escapeHtml(text.slice(cursor, span.char_start));
    html += `<mark>${escapeHtml(text.slice(span.char_start, span.char_end))}</mark>`;
    cursor = span.char_end;
  }
  html += escapeHtml(text.slice(cursor));
  return html;
}

function rawOutput(name: string, raw: string): string {
  return `
<details class="raw-output" data-raw="${escapeHtml(name)}">
  <summary>raw model output</summary>
  <pre>${escapeHtml(raw)}</pre>
</details>`;
}

function renderTurn(turn: Turn, spans: HighlightSpan[]): string {
  const kind = turn.kind === "normal" ? "" : ` <span class="turn-kind">${escapeHtml(label(turn.kind))}</span>`;
  return `
<div class="turn turn-${turn.speaker}" data-turn="${turn.turn_index}">
  <div class="turn-head">${turn.speaker === "patient" ? "Patient" : "Assistant"}${kind}</div>
  <div class="turn-text">${highlightTurnText(turn.text, spans)}</div>
</div>`;
}

function renderLog(detail: SessionDetail): string {
  const spansByTurn = new Map<number, HighlightSpan[]>();
  for (const span of detail.highlights?.spans ?? []) {
    const bucket = spansByTurn.get(span.turn_index) ?? [];
    bucket.push(span);
    spansByTurn.set(span.turn_index, bucket);
  }
  const turns = detail.session.turns
    .map((t) => renderTurn(t, spansByTurn.get(t.turn_index) ?? []))
    .join("");
  const dropped = detail.highlights && detail.highlights.dropped_quotes > 0
    ? `<div class="dropped-note">${detail.highlights.dropped_quotes} quote(s) could not be anchored to the transcript.</div>`
    : "";
  const raw = detail.highlights ? rawOutput("highlights", detail.highlights.raw_model_output) : "";
  return `
<section class="pane log-pane">
  <h2>Conversation log <span class="sub">highlights inline</span></h2>
  ${dropped}
  <div class="log">${turns}</div>
  ${raw}
</section>`;
}

function renderSummary(detail: SessionDetail): string {
  const summary = detail.summary;
  if (!summary) {
    return `<section class="pane summary-pane"><h2>Summary</h2>
<p class="empty">Not processed yet. Run the pipeline to generate the summary.</p></section>`;
  }
  const details = summary.symptom_details
    .map(([k, v]) => `<tr><th>${escapeHtml(k)}</th><td>${escapeHtml(v)}</td></tr>`)
    .join("");
  const questions = summary.patient_questions
    .map((q) => `<li>${escapeHtml(q)}</li>`)
    .join("");
  const notes = summary.additional_notes
    .map((n) => `<li>${escapeHtml(n)}</li>`)
    .join("");
  const warning = summary.parse_warning
    ? `<div class="parse-warning">parser: ${escapeHtml(summary.parse_warning)}</div>`
    : "";
  return `
<section class="pane summary-pane">
  <h2>Summary</h2>
  ${warning}
  <h3>Chief concern</h3>
  <p class="chief-concern">${escapeHtml(summary.chief_concern)}</p>
  <h3>Symptom details</h3>
  <table class="kv">${details || `<tr><td class="empty">none recorded</td></tr>`}</table>
  <h3>Patient questions</h3>
  <ul class="patient-questions">${questions || `<li class="empty">none</li>`}</ul>
  <h3>Additional notes</h3>
  <ul class="additional-notes">${notes || `<li class="empty">none</li>`}</ul>
  ${rawOutput("summary", summary.raw_model_output)}
</section>`;
}

function renderRiskBanner(detail: SessionDetail): string {
  const risk = detail.risk;
  if (!risk) {
    return `<div class="risk-banner risk-gray">${dot("gray")} <strong>No risk assessment yet.</strong></div>`;
  }
  const reviewBadge = risk.needs_human_review
    ? `<span class="badge badge-review">needs human review</span>`
    : "";
  const levelText = risk.level ? label(risk.level) : "unclassified";
  return `
<div class="risk-banner risk-${escapeHtml(risk.color)}">
  ${dot(risk.color)} <strong>Risk: ${escapeHtml(levelText)}</strong> ${reviewBadge}
  <span class="risk-reasoning">${escapeHtml(risk.reasoning)}</span>
  ${rawOutput("risk", risk.raw_model_output)}
</div>`;
}

function renderActions(detail: SessionDetail): string {
  const rows = detail.actions
    .map(
      (a: ProviderAction) => `
<li class="action action-${escapeHtml(a.kind)}">
  <span class="action-kind">${escapeHtml(label(a.kind))}</span>
  ${a.body ? `<span class="action-body">${escapeHtml(a.body)}</span>` : ""}
  <span class="sub">${escapeHtml(a.author)}, ${escapeHtml(formatWhen(a.created_at))}</span>
</li>`,
    )
    .join("");
  const doneState = detail.done
    ? `<span class="badge badge-done">done</span>`
    : `<button type="button" data-role="mark-done">Mark done</button>`;
  return `
<section class="pane actions-pane">
  <h2>Actions &amp; notes</h2>
  <ul class="action-list">${rows || `<li class="empty">nothing yet</li>`}</ul>
  <form data-role="action-form">
    <select name="kind">
      <option value="note">note</option>
      <option value="follow_up_call">follow-up call</option>
      <option value="schedule_visit">schedule visit</option>
      <option value="escalate">escalate</option>
      <option value="custom">custom</option>
    </select>
    <textarea name="body" rows="3" placeholder="Write a note or describe the follow-up"></textarea>
    <button type="submit">Add</button>
  </form>
  <div class="done-row">${doneState}</div>
</section>`;
}

function renderPatientCard(detail: SessionDetail, history: QueueRow[]): string {
  const patient = detail.patient;
  const card = patient
    ? `
<dl class="kv">
  <dt>name</dt><dd>${escapeHtml(patient.name)}</dd>
  <dt>age</dt><dd>${patient.age}</dd>
  <dt>lives</dt><dd>${escapeHtml(patient.living_situation)}</dd>
  <dt>conditions</dt><dd>${escapeHtml(patient.conditions.join(", ") || "none")}</dd>
</dl>`
    : `<p class="empty">Profile unavailable.</p>`;

  const items = history
    .map((row) => {
      const current = row.session_id === detail.session.session_id ? " is-current" : "";
      return `<li class="history-item${current}">
  ${dot(row.risk_color)}
  <a href="#/session/${escapeHtml(row.session_id)}">${escapeHtml(row.protocol_id)}</a>
  <span class="sub">${escapeHtml(formatWhen(row.closed_at ?? row.created_at))}</span>
</li>`;
    })
    .join("");

  return `
<section class="pane patient-pane">
  <h2>Patient</h2>
  ${card}
  <h3>Session history</h3>
  <ul class="history">${items || `<li class="empty">no other sessions</li>`}</ul>
</section>`;
}

function renderProcessing(detail: SessionDetail): string {
  const state = detail.processing;
  const stages = state
    ? Object.entries(state.stages)
        .map(([stage, result]) => {
          const ok = result === "done";
          return `<span class="stage ${ok ? "stage-ok" : "stage-bad"}">${escapeHtml(stage)}: ${escapeHtml(result)}</span>`;
        })
        .join(" ")
    : `<span class="sub">pipeline has not run</span>`;
  const version = state ? `<span class="sub">v${state.version}</span>` : "";
  const canProcess = detail.session.status === "completed" || detail.session.status === "aborted";
  const button = canProcess
    ? `<button type="button" data-role="process">Run pipeline</button>
       <button type="button" data-role="process-force">Force re-run</button>`
    : `<span class="sub">available once the session closes</span>`;
  return `<footer class="processing">${stages} ${version} ${button}</footer>`;
}

export function renderDetail(detail: SessionDetail, history: QueueRow[]): string {
  const title = detail.patient ? detail.patient.name : detail.session.patient_id;
  // Fixed three-column arrangement: patient context left, summary center,
  // conversation log with inline highlights right.
  return `
<section class="detail-view" data-session="${escapeHtml(detail.session.session_id)}">
  <div class="detail-head">
    <a href="#/" class="back">&larr; queue</a>
    <h1>${escapeHtml(title)} <span class="sub">${escapeHtml(detail.session.protocol_id)},
      ${escapeHtml(label(detail.session.status))}</span></h1>
  </div>
  ${renderRiskBanner(detail)}
  <div class="detail-grid">
    <div class="col col-left">
      ${renderPatientCard(detail, history)}
      ${renderActions(detail)}
    </div>
    <div class="col col-center">
      ${renderSummary(detail)}
    </div>
    <div class="col col-right">
      ${renderLog(detail)}
    </div>
  </div>
  ${renderProcessing(detail)}
</section>`;
}
