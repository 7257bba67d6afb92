// Typed client for the supervisory service. Event streaming uses fetch with
// incremental body reads so the same code runs in browsers and in node-based
// tests (no EventSource dependency).

export interface PendingCandidate {
  rank: number;
  start: number[];
  end: number[];
  log_density: number;
}

export interface PendingRetraction {
  count: number;
  selected_rank: number;
  candidates: PendingCandidate[];
}

export interface SessionState {
  phase: string;
  next_cut_index: number;
  cuts_done_in_phase: number;
  cuts_total_in_phase: number;
  current_group_id: number;
  elapsed_s: number;
  retraction_displacement: number[];
  per_phase_cuts: Record<string, number>;
  per_phase_retractions: Record<string, number>;
  capsule_strike_voxels: number;
  registration_rms: number | null;
  pending_retraction: PendingRetraction | null;
  event_count: number;
  connected_clients: number;
}

export interface PlanWaypoint {
  kind: string;
  x: number;
  y: number;
  z: number;
}

export interface PlanCut {
  global_index: number;
  layer: number;
  velocity_mm_s: number;
  waypoints: PlanWaypoint[];
}

export interface PlanGroup {
  group_id: number;
  scope_pose: { point: number[]; direction: number[] };
  cuts: PlanCut[];
}

export interface PlanPhase {
  phase: string;
  groups: PlanGroup[];
}

export interface PlanDoc {
  version: number;
  config: Record<string, unknown>;
  phases: PlanPhase[];
}

export interface CloudSummary {
  points: number[][];
  labels: number[];
}

export interface EventMessage {
  seq: number;
  kind: string;
  timestamp_s: number;
  payload: Record<string, unknown>;
}

export interface CommandAck {
  accepted: boolean;
  issue_id: number;
  reason?: string;
  events?: number[];
}

export class ApiClient {
  constructor(readonly base: string) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(`${this.base}${path}`);
    if (!response.ok) {
      throw new Error(`${path}: HTTP ${response.status}`);
    }
    return (await response.json()) as T;
  }

  state(): Promise<SessionState> {
    return this.getJson("/state");
  }

  plan(): Promise<PlanDoc> {
    return this.getJson("/plan");
  }

  cloud(): Promise<CloudSummary> {
    return this.getJson("/cloud");
  }

  metrics(): Promise<Record<string, unknown>> {
    return this.getJson("/metrics");
  }

  async command(kind: string, args: Record<string, unknown> = {}): Promise<CommandAck> {
    const response = await fetch(`${this.base}/command`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ kind, args }),
    });
    return (await response.json()) as CommandAck;
  }
}

export type EventHandler = (event: EventMessage) => void;

/** Server-sent-events subscriber with Last-Event-ID resume. */
export class EventStream {
  lastSeq = 0;
  private controller: AbortController | null = null;
  private running = false;

  constructor(readonly base: string) {}

  async connect(onEvent: EventHandler): Promise<void> {
    this.controller = new AbortController();
    this.running = true;
    const headers: Record<string, string> = {};
    if (this.lastSeq > 0) {
      headers["Last-Event-ID"] = String(this.lastSeq);
    }
    const response = await fetch(`${this.base}/events`, {
      headers,
      signal: this.controller.signal,
    });
    if (!response.ok || !response.body) {
      this.running = false;
      throw new Error(`/events: HTTP ${response.status}`);
    }
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    void (async () => {
      try {
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          buffer += decoder.decode(value, { stream: true });
          let boundary = buffer.indexOf("\n\n");
          while (boundary >= 0) {
            const chunk = buffer.slice(0, boundary);
            buffer = buffer.slice(boundary + 2);
            const data = chunk
              .split("\n")
              .find((line) => line.startsWith("data:"));
            if (data) {
              const event = JSON.parse(data.slice(5).trim()) as EventMessage;
              this.lastSeq = Math.max(this.lastSeq, event.seq);
              onEvent(event);
            }
            boundary = buffer.indexOf("\n\n");
          }
        }
      } catch (err) {
        // Aborted by close(); reconnects are the caller's decision.
      } finally {
        this.running = false;
      }
    })();
  }

  get connected(): boolean {
    return this.running;
  }

  close(): void {
    this.controller?.abort();
    this.controller = null;
    this.running = false;
  }
}
