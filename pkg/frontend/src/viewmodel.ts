// Client-side view state. Everything here is derived from the server's
// /state, /plan, /cloud and /events payloads; nothing is simulated locally.

import {
  ApiClient,
  CloudSummary,
  EventMessage,
  PendingRetraction,
  PlanCut,
  PlanDoc,
  SessionState,
} from "./api.js";

export interface CutLookup {
  cut: PlanCut;
  phase: string;
  groupId: number;
}

export class ViewModel {
  state: SessionState | null = null;
  plan: PlanDoc | null = null;
  cloud: CloudSummary | null = null;
  metrics: Record<string, unknown> | null = null;
  events: EventMessage[] = [];
  executedCuts = new Set<number>();
  pending: PendingRetraction | null = null;
  lastError = "";

  constructor(readonly api: ApiClient) {}

  async loadStatic(): Promise<void> {
    this.plan = await this.api.plan();
    this.cloud = await this.api.cloud();
    await this.refreshState();
  }

  async refreshState(): Promise<void> {
    this.state = await this.api.state();
    this.pending = this.state.pending_retraction;
  }

  cutByIndex(globalIndex: number): CutLookup | null {
    if (!this.plan) return null;
    for (const phase of this.plan.phases) {
      for (const group of phase.groups) {
        for (const cut of group.cuts) {
          if (cut.global_index === globalIndex) {
            return { cut, phase: phase.phase, groupId: group.group_id };
          }
        }
      }
    }
    return null;
  }

  applyEvent(event: EventMessage): void {
    this.events.push(event);
    switch (event.kind) {
      case "cut_executed": {
        const idx = event.payload["global_index"];
        if (typeof idx === "number") {
          this.executedCuts.add(idx);
        }
        break;
      }
      case "retraction_proposed":
      case "override_applied": {
        this.pending = {
          count: (event.payload["count"] as number) ?? this.pending?.count ?? 0,
          selected_rank: (event.payload["selected_rank"] as number) ?? 0,
          candidates: (event.payload["candidates"] as never[]) ?? [],
        };
        break;
      }
      case "retraction_confirmed":
      case "retraction_executed":
      case "phase_advanced": {
        if (event.kind !== "retraction_executed") {
          this.pending = null;
        }
        break;
      }
      default:
        break;
    }
  }

  /** Gapless check over everything received so far. */
  eventSequenceIsGapless(): boolean {
    return this.events.every((event, i) => event.seq === i + 1 || (
      i > 0 && event.seq === this.events[i - 1].seq + 1
    ));
  }

  get phaseLabel(): string {
    return this.state?.phase ?? "disconnected";
  }

  get cutCounter(): string {
    if (!this.state) return "-/-";
    return `${this.state.cuts_done_in_phase}/${this.state.cuts_total_in_phase}`;
  }

  get nextCutIndex(): number | null {
    return this.state ? this.state.next_cut_index : null;
  }
}
