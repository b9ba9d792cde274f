// End-to-end scripted review session against the live Python curation API.
// Spawns the server on a seeded store, drives the controllers exactly as
// the DOM layer does, and verifies the export and dashboard contracts.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CurationApi } from "../src/api.js";
import { DashboardController, QueueController, ReviewController } from "../src/controllers.js";

const PORT = 8437;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;
let storeDir = "";

async function waitForReady(proc: ChildProcess): Promise<void> {
  await new Promise<void>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("server did not start in time")), 30000);
    proc.stdout?.on("data", (chunk: Buffer) => {
      if (chunk.toString().includes("READY")) {
        clearTimeout(timer);
        resolve();
      }
    });
    proc.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`server exited early with code ${code}`));
    });
  });
}

beforeAll(async () => {
  storeDir = mkdtempSync(join(tmpdir(), "curation-ui-"));
  server = spawn(
    "python3",
    ["scripts/serve_seeded.py", join(storeDir, "store"), String(PORT), "25"],
    { cwd: join(__dirname, ".."), stdio: ["ignore", "pipe", "inherit"] },
  );
  await waitForReady(server);
}, 40000);

afterAll(() => {
  server?.kill();
  if (storeDir) rmSync(storeDir, { recursive: true, force: true });
});

describe("scripted review session", () => {
  it("selects 20 candidates, edits 1, accepts 19, exports exactly those 20", async () => {
    const api = new CurationApi(BASE);
    const queue = new QueueController(api);
    const review = new ReviewController(api);
    review.reviewer = "scripted";

    await queue.setStateFilter("pending");
    expect(queue.page.total).toBe(25);
    const selected = queue.page.items.slice(0, 20);
    expect(selected.length).toBe(20);

    // edit the first: change its last doctor turn
    const [first, ...rest] = selected;
    await review.load(first!.id);
    const lastIndex = review.buffer.length - 1;
    const editedText = "Edited by the scripted session: rest, hydrate, and follow up in two days.";
    review.editTurn(lastIndex, editedText);
    expect(review.dirty()).toBe(true);
    const editOutcome = await review.submit("edit");
    expect(editOutcome.ok).toBe(true);
    expect(review.item?.state).toBe("edited");
    const editedSampleId = review.item!.candidate.id;

    // accept the remaining 19
    for (const summary of rest) {
      await review.load(summary.id);
      const outcome = await review.submit("accept");
      expect(outcome.ok).toBe(true);
      expect(review.item?.state).toBe("accepted");
    }

    // queue mirrors the server state after every mutation
    await queue.setStateFilter("pending");
    expect(queue.page.total).toBe(5);
    await queue.setStateFilter("accepted");
    expect(queue.page.total).toBe(19);
    await queue.setStateFilter("edited");
    expect(queue.page.total).toBe(1);

    // export holds exactly the reviewed 20, with the edit applied
    const exported = await api.exportStage2();
    expect(exported.count).toBe(20);
    const byId = new Map(exported.samples.map((sample) => [sample.id, sample]));
    expect(byId.size).toBe(20);
    const editedExport = byId.get(editedSampleId);
    expect(editedExport).toBeDefined();
    const doctorTurns = editedExport!.turns.filter((turn) => turn.role === "doctor");
    expect(doctorTurns[doctorTurns.length - 1]!.content).toBe(editedText);

    // 409 on an illegal transition surfaces inline and refreshes state
    await review.load(first!.id);
    const conflict = await review.submit("reject");
    expect(conflict).toEqual({ ok: false, conflict: true });
    expect(review.error).toContain("illegal transition");
    expect(review.item?.state).toBe("edited");
  }, 60000);

  it("dashboard counts match the stats endpoint", async () => {
    const api = new CurationApi(BASE);
    const dashboard = new DashboardController(api);
    await dashboard.refresh();
    expect(dashboard.offline).toBe(false);

    const direct = await (await fetch(`${BASE}/api/stats`)).json();
    expect(dashboard.stats).toEqual(direct);
    expect(dashboard.stats!.counts.accepted).toBe(19);
    expect(dashboard.stats!.counts.edited).toBe(1);
    expect(dashboard.stats!.counts.pending).toBe(5);
    expect(dashboard.stats!.counts.rejected).toBe(0);
  });

  it("promotion and generation flow works against the live API", async () => {
    const api = new CurationApi(BASE);
    const review = new ReviewController(api);
    review.reviewer = "scripted";
    const queue = new QueueController(api);
    await queue.setStateFilter("accepted");
    const promoted = queue.page.items[0]!;
    await review.load(promoted.id);
    const outcome = await review.submit("promote");
    expect(outcome.ok).toBe(true);

    const generated = await api.generate(2, 1, 99);
    expect(generated.created).toBe(2);
    await queue.setStateFilter("pending");
    expect(queue.page.total).toBe(5 + 2);
  }, 30000);
});
