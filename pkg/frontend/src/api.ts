import type {
  ActionKind,
  PatientProfile,
  ProcessingState,
  Protocol,
  ProviderAction,
  QueueFilters,
  QueuePage,
  SessionDetail,
} from "./types.js";

export class ApiError extends Error {
  status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client for the provider side of the /v1 API. */
export class ApiClient {
  baseUrl: string;
  token: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, token: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.token = token;
    // Bind so the default keeps working when window is the real receiver.
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  headers(): Record<string, string> {
    return {
      Authorization: `Bearer ${this.token}`,
      "Content-Type": "application/json",
    };
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!res.ok) {
      let detail = `${res.status}`;
      try {
        const payload = await res.json();
        if (payload && typeof payload.detail === "string") detail = payload.detail;
      } catch {
        // Non-JSON error body, keep the status code message.
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  // GET /v1/provider/sessions - the triage queue
  listSessions(filters: QueueFilters = {}): Promise<QueuePage> {
    const params = new URLSearchParams();
    if (filters.risk) params.set("risk", filters.risk);
    if (filters.status) params.set("status", filters.status);
    if (filters.patient_id) params.set("patient_id", filters.patient_id);
    if (filters.done !== undefined) params.set("done", String(filters.done));
    if (filters.limit !== undefined) params.set("limit", String(filters.limit));
    if (filters.offset !== undefined) params.set("offset", String(filters.offset));
    const qs = params.toString();
    return this.request<QueuePage>("GET", `/v1/provider/sessions${qs ? "?" + qs : ""}`);
  }

  // GET /v1/provider/sessions/{id} - full workup for one session
  sessionDetail(sessionId: string): Promise<SessionDetail> {
    return this.request<SessionDetail>("GET", `/v1/provider/sessions/${sessionId}`);
  }

  // POST /v1/provider/sessions/{id}/actions
  addAction(sessionId: string, kind: ActionKind, body: string): Promise<ProviderAction> {
    return this.request<ProviderAction>(
      "POST",
      `/v1/provider/sessions/${sessionId}/actions`,
      { kind, body },
    );
  }

  // POST /v1/provider/sessions/{id}/done - rejected with 409 when already done
  markDone(sessionId: string): Promise<{ done: boolean; action: ProviderAction }> {
    return this.request("POST", `/v1/provider/sessions/${sessionId}/done`);
  }

  // POST /v1/provider/sessions/{id}/process
  processSession(sessionId: string, force = false): Promise<ProcessingState> {
    const qs = force ? "?force=true" : "";
    return this.request<ProcessingState>(
      "POST",
      `/v1/provider/sessions/${sessionId}/process${qs}`,
    );
  }

  listPatients(): Promise<{ patients: PatientProfile[] }> {
    return this.request("GET", "/v1/patients");
  }

  getProtocol(protocolId: string): Promise<Protocol> {
    return this.request<Protocol>("GET", `/v1/protocols/${protocolId}`);
  }

  async health(): Promise<boolean> {
    try {
      const res = await this.fetchFn(this.baseUrl + "/v1/health");
      return res.ok;
    } catch {
      return false;
    }
  }
}
