// Payload shapes of the curation API (canonical record serialization).

export type Role = "patient" | "doctor" | "system";

export type ItemState = "pending" | "accepted" | "edited" | "rejected" | "promoted_exemplar";

export interface TurnRecord {
  role: Role;
  content: string;
  meta?: Record<string, string>;
}

export interface PipelineStepRecord {
  step_name: string;
  backend_id: string;
  prompt_hash: string;
  response_hash: string;
  timestamp: number;
}

export interface ProvenanceRecord {
  origin_record_id?: string;
  pipeline_steps: PipelineStepRecord[];
  human_edited: boolean;
}

export interface SampleRecord {
  id: string;
  source: string;
  department?: string;
  stage_tag: string;
  turns: TurnRecord[];
  provenance: ProvenanceRecord;
}

export interface ItemSummary {
  id: string;
  state: ItemState;
  department: string | null;
  turn_count: number;
  rounds: number;
  preview: string;
  reviewer: string;
}

export interface QueuePage {
  total: number;
  offset: number;
  items: ItemSummary[];
}

export interface ItemRecord {
  id: string;
  state: ItemState;
  candidate: SampleRecord;
  original?: SampleRecord;
  edited_version?: SampleRecord;
  reviewer: string;
  decided_at?: number;
  notes: string;
}

export interface StatsPayload {
  counts: Record<ItemState, number>;
  total: number;
  decided: number;
  decisions_last_hour: number;
  target: number;
  remaining_to_target: number;
}

export type DecisionAction = "accept" | "edit" | "reject" | "promote";

export interface DecisionBody {
  action: DecisionAction;
  reviewer: string;
  notes?: string;
  edited_sample?: SampleRecord;
}

export interface ExportResult {
  count: number;
  samples: SampleRecord[];
  path?: string;
}

export interface GenerateResult {
  created: number;
  quarantined: number;
}

export interface QueueFilters {
  state?: ItemState;
  department?: string;
  offset?: number;
  limit?: number;
}
