import type { ApiClient } from "./api.js";
import type { ProcessedEvent } from "./types.js";

export interface SseFrame {
  id: string | null;
  event: string | null;
  data: string;
}

/**
 * Incremental parser for a text/event-stream body.
 *
 * EventSource cannot send an Authorization header, so the dashboard reads the
 * notification stream through fetch and feeds the chunks in here. Chunks can
 * split frames anywhere; state is kept across push() calls.
 */
export class SseParser {
  private buffer = "";

  push(chunk: string): SseFrame[] {
    this.buffer += chunk.replace(/\r\n/g, "\n");
    const frames: SseFrame[] = [];
    let sep: number;
    while ((sep = this.buffer.indexOf("\n\n")) !== -1) {
      const block = this.buffer.slice(0, sep);
      this.buffer = this.buffer.slice(sep + 2);
      const frame = parseBlock(block);
      if (frame) frames.push(frame);
    }
    return frames;
  }
}

function parseBlock(block: string): SseFrame | null {
  let id: string | null = null;
  let event: string | null = null;
  const data: string[] = [];
  for (const line of block.split("\n")) {
    if (!line || line.startsWith(":")) continue;
    const colon = line.indexOf(":");
    const field = colon === -1 ? line : line.slice(0, colon);
    let value = colon === -1 ? "" : line.slice(colon + 1);
    if (value.startsWith(" ")) value = value.slice(1);
    if (field === "id") id = value;
    else if (field === "event") event = value;
    else if (field === "data") data.push(value);
  }
  if (id === null && event === null && data.length === 0) return null;
  return { id, event, data: data.join("\n") };
}

export type FeedMode = "connecting" | "live" | "polling" | "stopped";

export interface LiveFeedOptions {
  pollMs?: number;
  retryMs?: number;
  fetchFn?: (url: string, init?: RequestInit) => Promise<Response>;
  onMode?: (mode: FeedMode) => void;
}

const POLL_MS = 30_000;
const RETRY_MS = 3_000;
const FAILURES_BEFORE_POLLING = 2;

/**
 * Push channel for session_processed events with a polling fallback.
 *
 * Streams /v1/provider/notifications and replays missed events via
 * Last-Event-ID on reconnect. After two consecutive connection failures the
 * feed downgrades to calling onPoll on a fixed interval; a later successful
 * reconnect upgrades it back.
 */
export class LiveFeed {
  private client: ApiClient;
  private onEvent: (event: ProcessedEvent) => void;
  private onPoll: () => void;
  private opts: Required<Pick<LiveFeedOptions, "pollMs" | "retryMs">> & LiveFeedOptions;

  private lastEventId: string | null = null;
  private failures = 0;
  private controller: AbortController | null = null;
  private pollTimer: ReturnType<typeof setInterval> | null = null;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private stopped = false;
  mode: FeedMode = "stopped";

  constructor(
    client: ApiClient,
    onEvent: (event: ProcessedEvent) => void,
    onPoll: () => void,
    opts: LiveFeedOptions = {},
  ) {
    this.client = client;
    this.onEvent = onEvent;
    this.onPoll = onPoll;
    this.opts = { pollMs: opts.pollMs ?? POLL_MS, retryMs: opts.retryMs ?? RETRY_MS, ...opts };
  }

  start(): void {
    this.stopped = false;
    void this.connect();
  }

  stop(): void {
    this.stopped = true;
    this.setMode("stopped");
    this.controller?.abort();
    this.controller = null;
    if (this.pollTimer) clearInterval(this.pollTimer);
    this.pollTimer = null;
    if (this.retryTimer) clearTimeout(this.retryTimer);
    this.retryTimer = null;
  }

  private setMode(mode: FeedMode): void {
    if (this.mode === mode) return;
    this.mode = mode;
    this.opts.onMode?.(mode);
  }

  private async connect(): Promise<void> {
    if (this.stopped) return;
    this.setMode(this.mode === "polling" ? "polling" : "connecting");
    this.controller = new AbortController();
    const headers: Record<string, string> = {
      Authorization: `Bearer ${this.client.token}`,
      Accept: "text/event-stream",
    };
    if (this.lastEventId !== null) headers["Last-Event-ID"] = this.lastEventId;
    const fetchFn = this.opts.fetchFn ?? ((url: string, init?: RequestInit) => fetch(url, init));

    try {
      const res = await fetchFn(`${this.client.baseUrl}/v1/provider/notifications`, {
        headers,
        signal: this.controller.signal,
      });
      if (!res.ok || !res.body) throw new Error(`stream rejected: ${res.status}`);

      this.failures = 0;
      this.stopPolling();
      this.setMode("live");

      const parser = new SseParser();
      const reader = res.body.getReader();
      const decoder = new TextDecoder();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        for (const frame of parser.push(decoder.decode(value, { stream: true }))) {
          if (frame.id !== null) this.lastEventId = frame.id;
          if (frame.event === "session_processed" && frame.data) {
            this.onEvent(JSON.parse(frame.data) as ProcessedEvent);
          }
        }
      }
      // Server closed a healthy stream; reconnect without counting a failure.
      this.scheduleReconnect();
    } catch {
      if (this.stopped) return;
      this.failures += 1;
      if (this.failures >= FAILURES_BEFORE_POLLING) this.startPolling();
      this.scheduleReconnect();
    }
  }

  private scheduleReconnect(): void {
    if (this.stopped) return;
    this.retryTimer = setTimeout(() => void this.connect(), this.opts.retryMs);
  }

  private startPolling(): void {
    if (this.pollTimer) return;
    this.setMode("polling");
    this.pollTimer = setInterval(() => this.onPoll(), this.opts.pollMs);
  }

  private stopPolling(): void {
    if (!this.pollTimer) return;
    clearInterval(this.pollTimer);
    this.pollTimer = null;
  }
}
