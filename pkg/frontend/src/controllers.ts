// View controllers: all state flows server -> controller -> DOM, every
// mutation goes through the decision endpoint, and controllers refetch
// after each write (no optimistic updates: conflicts must surface).

import { ApiError, conflictItem, CurationApi } from "./api.js";
import type {
  DecisionAction,
  ItemRecord,
  ItemState,
  QueueFilters,
  QueuePage,
  SampleRecord,
  StatsPayload,
} from "./types.js";

export class QueueController {
  page: QueuePage = { total: 0, offset: 0, items: [] };
  filters: QueueFilters = { limit: 50, offset: 0 };
  error: string | null = null;

  constructor(private readonly api: CurationApi) {}

  async refresh(): Promise<void> {
    try {
      this.page = await this.api.fetchQueue(this.filters);
      this.error = null;
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
    }
  }

  async setStateFilter(state: ItemState | ""): Promise<void> {
    this.filters = { ...this.filters, state: state || undefined, offset: 0 };
    await this.refresh();
  }

  async setDepartmentFilter(department: string): Promise<void> {
    this.filters = { ...this.filters, department: department || undefined, offset: 0 };
    await this.refresh();
  }

  async turnPage(delta: number): Promise<void> {
    const limit = this.filters.limit ?? 50;
    const next = Math.max(0, (this.filters.offset ?? 0) + delta * limit);
    if (next >= this.page.total && delta > 0) return;
    this.filters = { ...this.filters, offset: next };
    await this.refresh();
  }
}

export interface ReviewOutcome {
  ok: boolean;
  conflict: boolean;
}

export class ReviewController {
  item: ItemRecord | null = null;
  /** Local edit buffer, one entry per candidate turn; lost on navigation. */
  buffer: string[] = [];
  error: string | null = null;
  reviewer = "reviewer";

  constructor(private readonly api: CurationApi) {}

  async load(id: string): Promise<void> {
    this.item = await this.api.fetchItem(id);
    this.buffer = this.item.candidate.turns.map((turn) => turn.content);
    this.error = null;
  }

  editTurn(index: number, content: string): void {
    if (index >= 0 && index < this.buffer.length) {
      this.buffer[index] = content;
    }
  }

  dirty(): boolean {
    if (!this.item) return false;
    return this.item.candidate.turns.some((turn, i) => turn.content !== this.buffer[i]);
  }

  editedSample(): SampleRecord {
    if (!this.item) throw new Error("no item loaded");
    const candidate = this.item.candidate;
    return {
      ...candidate,
      turns: candidate.turns.map((turn, i) => ({ ...turn, content: this.buffer[i] ?? turn.content })),
    };
  }

  /**
   * Submit a decision and refetch the item. Edits become an `edit`
   * decision carrying the buffered sample; a clean buffer submits the
   * chosen action as-is. Conflicts refresh the item and surface inline.
   */
  async submit(action: DecisionAction, notes = ""): Promise<ReviewOutcome> {
    if (!this.item) throw new Error("no item loaded");
    const id = this.item.id;
    const body =
      action === "edit"
        ? { action, reviewer: this.reviewer, notes, edited_sample: this.editedSample() }
        : { action, reviewer: this.reviewer, notes };
    try {
      await this.api.submitDecision(id, body);
      await this.load(id);
      return { ok: true, conflict: false };
    } catch (err) {
      const refreshed = conflictItem(err);
      if (refreshed) {
        this.item = refreshed;
        this.buffer = refreshed.candidate.turns.map((turn) => turn.content);
        this.error = err instanceof Error ? err.message : String(err);
        return { ok: false, conflict: true };
      }
      if (err instanceof ApiError) {
        this.error = err.message;
        return { ok: false, conflict: false };
      }
      throw err;
    }
  }
}

export class DashboardController {
  stats: StatsPayload | null = null;
  offline = false;

  constructor(private readonly api: CurationApi) {}

  async refresh(): Promise<void> {
    try {
      this.stats = await this.api.stats();
      this.offline = false;
    } catch {
      this.offline = true;
    }
  }
}

export class GenerationController {
  lastResult: { created: number; quarantined: number } | null = null;
  error: string | null = null;

  constructor(private readonly api: CurationApi) {}

  async trigger(target: number, fewshotK: number, seed: number): Promise<boolean> {
    try {
      this.lastResult = await this.api.generate(target, fewshotK, seed);
      this.error = null;
      return true;
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
      return false;
    }
  }
}
