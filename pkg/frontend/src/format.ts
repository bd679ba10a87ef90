import type { RiskColor, RiskLevel } from "./types.js";

// Documented dot convention: the server's risk_color follows the same table,
// and the e2e suite cross-checks the two stay in agreement.
export const RISK_DOT: Record<RiskLevel, RiskColor> = {
  low: "green",
  moderate: "yellow",
  high: "red",
};

export function riskDotColor(level: RiskLevel | null): RiskColor {
  return level ? RISK_DOT[level] : "gray";
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

/** Compact timestamp for list rows; full date once it is more than a day old. */
export function formatWhen(iso: string | null, now: Date = new Date()): string {
  if (!iso) return "—";
  const then = new Date(iso);
  if (Number.isNaN(then.getTime())) return iso;
  const ageMs = now.getTime() - then.getTime();
  const minutes = Math.floor(ageMs / 60_000);
  if (minutes < 1) return "just now";
  if (minutes < 60) return `${minutes}m ago`;
  const hours = Math.floor(minutes / 60);
  if (hours < 24) return `${hours}h ago`;
  return then.toISOString().slice(0, 10);
}

const LABELS: Record<string, string> = {
  active: "active",
  awaiting_confirmation: "awaiting confirmation",
  paused: "paused",
  completed: "completed",
  aborted: "aborted",
  note: "note",
  follow_up_call: "follow-up call",
  schedule_visit: "schedule visit",
  escalate: "escalate",
  mark_done: "marked done",
  custom: "custom",
  loopback_confirm_request: "confirmation request",
  loopback_confirm_response: "confirmation",
  reprompt: "re-prompt",
  closing: "closing",
};

export function label(value: string): string {
  return LABELS[value] ?? value.replace(/_/g, " ");
}
