import type {
  DecisionBody,
  ExportResult,
  GenerateResult,
  ItemRecord,
  QueueFilters,
  QueuePage,
  StatsPayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: unknown,
  ) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
    this.name = "ApiError";
  }
}

/** Conflict payloads carry the refreshed item so the UI can resync. */
export function conflictItem(error: unknown): ItemRecord | null {
  if (error instanceof ApiError && error.status === 409) {
    const detail = error.detail as { item?: ItemRecord } | string;
    if (typeof detail === "object" && detail !== null && detail.item) {
      return detail.item;
    }
  }
  return null;
}

async function parseError(response: Response): Promise<never> {
  let detail: unknown = response.statusText;
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (body.detail !== undefined) detail = body.detail;
  } catch {
    // non-JSON error body: keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class CurationApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!response.ok) await parseError(response);
    return (await response.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as T;
  }

  fetchQueue(filters: QueueFilters = {}): Promise<QueuePage> {
    const params = new URLSearchParams();
    if (filters.state) params.set("state", filters.state);
    if (filters.department) params.set("department", filters.department);
    if (filters.offset !== undefined) params.set("offset", String(filters.offset));
    if (filters.limit !== undefined) params.set("limit", String(filters.limit));
    const query = params.toString();
    return this.get<QueuePage>(`/api/queue${query ? `?${query}` : ""}`);
  }

  fetchItem(id: string): Promise<ItemRecord> {
    return this.get<ItemRecord>(`/api/items/${encodeURIComponent(id)}`);
  }

  submitDecision(id: string, body: DecisionBody): Promise<ItemRecord> {
    return this.post<ItemRecord>(`/api/items/${encodeURIComponent(id)}/decision`, body);
  }

  generate(target: number, fewshotK = 3, seed = 0): Promise<GenerateResult> {
    return this.post<GenerateResult>("/api/generate", { target, fewshot_k: fewshotK, seed });
  }

  exportStage2(stage1Ids: string[] = [], path?: string): Promise<ExportResult> {
    return this.post<ExportResult>("/api/export", { stage1_ids: stage1Ids, path });
  }

  stats(): Promise<StatsPayload> {
    return this.get<StatsPayload>("/api/stats");
  }
}
