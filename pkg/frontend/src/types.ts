// Payload shapes of the /v1 API. Field names mirror the wire format exactly;
// the dashboard never reshapes server data, it only renders it.

export type RiskLevel = "low" | "moderate" | "high";
export type RiskColor = "green" | "yellow" | "red" | "gray";

export type SessionStatus =
  | "active"
  | "awaiting_confirmation"
  | "paused"
  | "completed"
  | "aborted";

export type TurnKind =
  | "normal"
  | "loopback_confirm_request"
  | "loopback_confirm_response"
  | "reprompt"
  | "closing";

export type ActionKind =
  | "note"
  | "follow_up_call"
  | "schedule_visit"
  | "escalate"
  | "mark_done"
  | "custom";

export interface QueueRow {
  session_id: string;
  patient_id: string;
  patient_name: string;
  protocol_id: string;
  initiator: string;
  status: SessionStatus;
  created_at: string;
  closed_at: string | null;
  turn_count: number;
  risk_level: RiskLevel | null;
  risk_color: RiskColor;
  needs_human_review: boolean;
  done: boolean;
}

export interface QueuePage {
  sessions: QueueRow[];
  total: number;
  limit: number;
  offset: number;
}

export interface Turn {
  turn_index: number;
  speaker: "patient" | "assistant";
  text: string;
  timestamp: string;
  kind: TurnKind;
}

export interface Session {
  session_id: string;
  patient_id: string;
  protocol_id: string;
  initiator: string;
  created_at: string;
  turns: Turn[];
  status: SessionStatus;
  pending_loopback: { slot_name: string; candidate_value: unknown } | null;
  collected_slots: Record<string, unknown>;
  closed_at: string | null;
}

export interface PatientProfile {
  patient_id: string;
  name: string;
  age: number;
  gender: string;
  living_situation: string;
  conditions: string[];
  medical_history: string[];
}

export interface Protocol {
  protocol_id: string;
  task_summary: string;
  question_protocol: string[];
  key_information: { slot_name: string; description: string; value_kind: string }[];
}

export interface ClinicalSummary {
  chief_concern: string;
  symptom_details: [string, string][];
  patient_questions: string[];
  additional_notes: string[];
  raw_model_output: string;
  parse_warning: string | null;
}

export interface HighlightSpan {
  turn_index: number;
  char_start: number;
  char_end: number;
  quote: string;
}

export interface HighlightResult {
  spans: HighlightSpan[];
  dropped_quotes: number;
  raw_model_output: string;
}

export interface RiskAssessment {
  level: RiskLevel | null;
  reasoning: string;
  needs_human_review: boolean;
  raw_model_output: string;
  color: RiskColor;
}

export interface ProviderAction {
  action_id: string;
  session_id: string;
  kind: ActionKind;
  body: string;
  author: string;
  created_at: string;
}

export interface ProcessingState {
  stages: Record<string, string>;
  notified: boolean;
  version: number;
}

export interface SessionDetail {
  session: Session;
  patient: PatientProfile | null;
  protocol: Protocol | null;
  summary: ClinicalSummary | null;
  highlights: HighlightResult | null;
  risk: RiskAssessment | null;
  actions: ProviderAction[];
  done: boolean;
  processing: ProcessingState | null;
}

export interface ProcessedEvent {
  id: number;
  event: "session_processed";
  session_id: string;
  patient_id: string;
  risk_level: RiskLevel | null;
  risk_color: RiskColor;
  closed_at: string | null;
}

export interface QueueFilters {
  risk?: RiskLevel;
  status?: SessionStatus;
  patient_id?: string;
  done?: boolean;
  limit?: number;
  offset?: number;
}
