// @vitest-environment node
//
// Drives a real `serve --demo` instance end to end: queue dots, the detail
// layout, and the note/action/done flow, all through the public HTTP API.

import { spawn, type ChildProcess } from "node:child_process";
import net from "node:net";
import { Window } from "happy-dom";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";
import { RISK_DOT } from "../src/format.js";
import { renderDetail, renderQueue } from "../src/render.js";
import type { QueueRow } from "../src/types.js";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const address = srv.address();
      if (address && typeof address === "object") {
        const port = address.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error("no port assigned")));
      }
    });
  });
}

function render(html: string) {
  const window = new Window();
  window.document.body.innerHTML = html;
  return window.document;
}

let server: ChildProcess;
let client: ApiClient;

beforeAll(async () => {
  const port = await freePort();
  const env = { ...process.env };
  delete env.AUTH_TOKENS;
  server = spawn("python3", ["-m", "talk2care.cli", "serve", "--demo", "--port", String(port)], {
    env,
    stdio: ["ignore", "pipe", "pipe"],
  });
  const stderr: string[] = [];
  server.stderr?.on("data", (chunk) => stderr.push(String(chunk)));

  client = new ApiClient(`http://127.0.0.1:${port}`, "demo-provider");
  const deadline = Date.now() + 30_000;
  while (!(await client.health())) {
    if (Date.now() > deadline) {
      throw new Error(`backend never came up:\n${stderr.join("")}`);
    }
    await new Promise((r) => setTimeout(r, 300));
  }
});

afterAll(async () => {
  if (!server) return;
  server.kill("SIGTERM");
  const gone = new Promise((resolve) => server.once("exit", resolve));
  const timeout = new Promise((resolve) => setTimeout(resolve, 5_000));
  await Promise.race([gone, timeout]);
  if (server.exitCode === null) server.kill("SIGKILL");
});

let rows: QueueRow[] = [];

describe("dashboard against the demo deployment", () => {
  it("queue shows risk dots with the documented color mapping", async () => {
    const page = await client.listSessions({ done: false });
    rows = page.sessions;
    expect(rows).toHaveLength(2);

    // Riskier sessions come first, and every color obeys the documented table.
    expect(rows[0]!.risk_level).toBe("moderate");
    expect(rows[1]!.risk_level).toBe("low");
    for (const row of rows) {
      expect(row.risk_color).toBe(RISK_DOT[row.risk_level!]);
    }

    const doc = render(renderQueue(page, { done: false }));
    const dots = doc.querySelectorAll("tbody .cell-dot .dot");
    expect(dots).toHaveLength(2);
    expect(dots[0]!.classList.contains("dot-yellow")).toBe(true);
    expect(dots[1]!.classList.contains("dot-green")).toBe(true);
    expect(doc.querySelector(".legend")).not.toBeNull();
  });

  it("session detail renders summary center, log and highlights right", async () => {
    const mary = rows[0]!;
    const detail = await client.sessionDetail(mary.session_id);
    const history = await client.listSessions({ patient_id: mary.patient_id });
    const doc = render(renderDetail(detail, history.sessions));

    expect(doc.querySelector(".detail-grid > .col-center .summary-pane")).not.toBeNull();
    expect(doc.querySelector(".detail-grid > .col-right .log-pane")).not.toBeNull();

    // Her blood-pressure worry must surface in the additional notes.
    const notes = doc.querySelector(".summary-pane .additional-notes")!;
    expect(notes.textContent).toContain("high blood pressure");

    const banner = doc.querySelector(".risk-banner")!;
    expect(banner.classList.contains("risk-yellow")).toBe(true);
    expect(banner.textContent).toContain("Risk: moderate");

    // Raw model output is reachable for all three artifacts, collapsed.
    const raws = [...doc.querySelectorAll("details.raw-output")].map(
      (d) => d.getAttribute("data-raw"),
    );
    expect(raws.sort()).toEqual(["highlights", "risk", "summary"]);
  });

  it("renders highlights emphasized inside the turn text", async () => {
    const john = rows[1]!;
    const detail = await client.sessionDetail(john.session_id);
    const span = detail.highlights!.spans.find((s) => s.quote === "I have a little pain");
    expect(span).toBeDefined();

    const doc = render(renderDetail(detail, []));
    const turn = doc.querySelector(`[data-turn="${span!.turn_index}"] .turn-text`)!;
    const marks = [...turn.querySelectorAll("mark")].map((m) => m.textContent);
    expect(marks).toContain("I have a little pain");
    // Emphasis sits inside the full utterance, not a detached quote list.
    expect(turn.textContent!.length).toBeGreaterThan(span!.quote.length);
    expect(turn.textContent).toContain("I have a little pain");
  });

  it("round-trips note, follow-up action and mark-done through the API", async () => {
    const mary = rows[0]!;
    await client.addAction(mary.session_id, "note", "Called patient, advised clinic visit.");
    await client.addAction(mary.session_id, "schedule_visit", "Booked for Monday morning.");

    let detail = await client.sessionDetail(mary.session_id);
    const kinds = detail.actions.map((a) => a.kind);
    expect(kinds).toContain("note");
    expect(kinds).toContain("schedule_visit");
    const doc = render(renderDetail(detail, []));
    expect(doc.querySelector(".action-list")!.textContent).toContain("advised clinic visit");

    const done = await client.markDone(mary.session_id);
    expect(done.done).toBe(true);

    // A second done click is rejected, and the row leaves the active queue.
    const again = await client.markDone(mary.session_id).catch((e) => e);
    expect(again).toBeInstanceOf(ApiError);
    expect((again as ApiError).status).toBe(409);

    const active = await client.listSessions({ done: false });
    expect(active.sessions.map((r) => r.session_id)).not.toContain(mary.session_id);
    const everything = await client.listSessions({});
    const maryRow = everything.sessions.find((r) => r.session_id === mary.session_id);
    expect(maryRow?.done).toBe(true);

    detail = await client.sessionDetail(mary.session_id);
    expect(detail.done).toBe(true);
    const afterDoc = render(renderDetail(detail, []));
    expect(afterDoc.querySelector('[data-role="mark-done"]')).toBeNull();

    console.log(
      "[PASS] 9. queue dots, detail layout and the note/action/done flow verified against a live instance",
    );
  });
});
