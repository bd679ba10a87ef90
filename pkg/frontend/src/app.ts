import { ApiClient, ApiError } from "./api.js";
import { escapeHtml } from "./format.js";
import { LiveFeed } from "./live.js";
import { renderDetail, renderQueue } from "./render.js";
import type { PatientProfile, QueueFilters } from "./types.js";

export type Route =
  | { view: "queue"; patientId?: string }
  | { view: "session"; id: string };

export function parseRoute(hash: string): Route {
  const parts = hash.replace(/^#\/?/, "").split("/").filter(Boolean);
  if (parts[0] === "session" && parts[1]) return { view: "session", id: parts[1] };
  if (parts[0] === "patient" && parts[1]) return { view: "queue", patientId: parts[1] };
  return { view: "queue" };
}

/**
 * Mark a session done, treating a 409 as "someone else got there first":
 * the UI refreshes from the server instead of showing an error.
 */
export async function submitDone(
  client: ApiClient,
  sessionId: string,
  refresh: () => Promise<void>,
): Promise<void> {
  try {
    await client.markDone(sessionId);
  } catch (err) {
    if (!(err instanceof ApiError && err.status === 409)) throw err;
  }
  await refresh();
}

const TOKEN_KEY = "t2c_token";

interface AppElements {
  view: HTMLElement;
  token: HTMLInputElement;
  mode: HTMLElement;
}

export class App {
  private els: AppElements;
  private client: ApiClient | null = null;
  private feed: LiveFeed | null = null;
  private filters: QueueFilters = { done: false };
  private patients: PatientProfile[] = [];
  private makeClient: (token: string) => ApiClient;

  constructor(els: AppElements, makeClient?: (token: string) => ApiClient) {
    this.els = els;
    this.makeClient = makeClient ?? ((token) => new ApiClient(window.location.origin, token));
  }

  stop(): void {
    this.feed?.stop();
    this.feed = null;
  }

  start(): void {
    const saved = localStorage.getItem(TOKEN_KEY) ?? "";
    this.els.token.value = saved;
    if (saved) this.setToken(saved);

    this.els.token.addEventListener("change", () => {
      this.setToken(this.els.token.value.trim());
    });
    window.addEventListener("hashchange", () => void this.render());
    this.els.view.addEventListener("submit", (ev) => void this.onSubmit(ev));
    this.els.view.addEventListener("click", (ev) => void this.onClick(ev));
    this.els.view.addEventListener("change", (ev) => void this.onChange(ev));
    void this.render();
  }

  private setToken(token: string): void {
    localStorage.setItem(TOKEN_KEY, token);
    this.feed?.stop();
    this.client = token ? this.makeClient(token) : null;
    this.patients = [];
    if (this.client) {
      this.feed = new LiveFeed(
        this.client,
        () => void this.render(),
        () => void this.render(),
        { onMode: (mode) => { this.els.mode.textContent = mode; this.els.mode.dataset.mode = mode; } },
      );
      this.feed.start();
    }
    void this.render();
  }

  private async render(): Promise<void> {
    if (!this.client) {
      this.els.view.innerHTML =
        `<p class="empty">Paste a provider access token above to load the queue.</p>`;
      return;
    }
    const route = parseRoute(window.location.hash);
    try {
      if (route.view === "session") {
        await this.renderSession(route.id);
      } else {
        if (route.patientId) this.filters.patient_id = route.patientId;
        await this.renderQueueView();
      }
    } catch (err) {
      this.els.view.innerHTML = this.errorHtml(err);
    }
  }

  private async renderQueueView(): Promise<void> {
    const client = this.client!;
    if (this.patients.length === 0) {
      this.patients = (await client.listPatients()).patients;
    }
    const page = await client.listSessions(this.filters);
    this.els.view.innerHTML = renderQueue(page, this.filters, this.patients);
  }

  private async renderSession(sessionId: string): Promise<void> {
    const client = this.client!;
    const detail = await client.sessionDetail(sessionId);
    const history = await client.listSessions({ patient_id: detail.session.patient_id });
    this.els.view.innerHTML = renderDetail(detail, history.sessions);
  }

  private errorHtml(err: unknown): string {
    if (err instanceof ApiError && err.status === 401) {
      return `<p class="error">The server rejected the access token. Check the token field above.</p>`;
    }
    const message = err instanceof Error ? err.message : String(err);
    return `<p class="error">Request failed: ${escapeHtml(message)}</p>`;
  }

  private sessionIdOf(target: Element): string | null {
    const holder = target.closest("[data-session]");
    return holder ? (holder as HTMLElement).dataset.session ?? null : null;
  }

  private async onSubmit(ev: Event): Promise<void> {
    const form = ev.target as HTMLFormElement;
    if (form.dataset.role !== "action-form") return;
    ev.preventDefault();
    const client = this.client;
    const sessionId = this.sessionIdOf(form);
    if (!client || !sessionId) return;
    const kind = (form.elements.namedItem("kind") as HTMLSelectElement).value;
    const body = (form.elements.namedItem("body") as HTMLTextAreaElement).value.trim();
    if (!body) return;
    try {
      await client.addAction(sessionId, kind as never, body);
      await this.render();
    } catch (err) {
      this.els.view.innerHTML = this.errorHtml(err);
    }
  }

  private async onClick(ev: Event): Promise<void> {
    const target = ev.target as HTMLElement;
    const role = target.dataset.role;
    if (!role) return;
    const client = this.client;
    const sessionId = this.sessionIdOf(target);
    if (!client || !sessionId) return;

    if (role === "mark-done") {
      // Optimistic: the button vanishes immediately, the server state is
      // reconciled by the refresh (and on 409 the refresh is the recovery).
      target.setAttribute("disabled", "disabled");
      await submitDone(client, sessionId, () => this.render());
    } else if (role === "process" || role === "process-force") {
      target.setAttribute("disabled", "disabled");
      try {
        await client.processSession(sessionId, role === "process-force");
      } catch (err) {
        this.els.view.innerHTML = this.errorHtml(err);
        return;
      }
      await this.render();
    }
  }

  private async onChange(ev: Event): Promise<void> {
    const target = ev.target as HTMLElement;
    const form = target.closest("form");
    if (!form || (form as HTMLFormElement).dataset.role !== "queue-filters") return;
    const data = new FormData(form as HTMLFormElement);
    const next: QueueFilters = {};
    const risk = String(data.get("risk") ?? "");
    const status = String(data.get("status") ?? "");
    const patient = String(data.get("patient_id") ?? "");
    if (risk) next.risk = risk as QueueFilters["risk"];
    if (status) next.status = status as QueueFilters["status"];
    if (patient) next.patient_id = patient;
    if (!data.has("show_done")) next.done = false;
    this.filters = next;
    await this.render();
  }
}

export function boot(): void {
  const els: AppElements = {
    view: document.getElementById("view")!,
    token: document.getElementById("token-input") as HTMLInputElement,
    mode: document.getElementById("feed-mode")!,
  };
  new App(els).start();
}

// The build is loaded as a module script; tests import the pieces instead.
if (typeof document !== "undefined" && document.getElementById("view")) {
  boot();
}
