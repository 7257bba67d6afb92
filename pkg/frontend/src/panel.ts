// Command panel: the operator's buttons plus the phase/cut readout. Every
// click posts exactly one /command; disabled states and the readout follow
// the server state, and a rejection reason is shown inline without touching
// the view.

import { ApiClient } from "./api.js";
import { ViewModel } from "./viewmodel.js";

export class CommandPanel {
  private container: HTMLElement | null = null;
  onAfterCommand: () => void = () => {};

  constructor(
    readonly api: ApiClient,
    readonly vm: ViewModel,
  ) {}

  mount(container: HTMLElement): void {
    this.container = container;
    container.innerHTML = `
      <div class="status-row">
        <span id="phase-label"></span>
        <span id="cut-counter"></span>
        <span id="group-label"></span>
      </div>
      <div class="button-row">
        <button id="btn-resect">resect</button>
        <button id="btn-retract">retract</button>
        <button id="btn-override">override (2nd)</button>
        <button id="btn-confirm">confirm</button>
        <button id="btn-advance">advance phase</button>
        <button id="btn-fine-tune">fine-tune</button>
      </div>
      <div id="command-error" class="error"></div>
      <ul id="event-feed"></ul>
    `;
    this.bind("btn-resect", () => this.send("resect"));
    this.bind("btn-retract", () => this.send("retract"));
    this.bind("btn-override", () => this.send("override_retract", { rank: 1 }));
    this.bind("btn-confirm", () => this.send("retract"));
    this.bind("btn-advance", () => this.send("advance_phase"));
    this.bind("btn-fine-tune", () => this.send("fine_tune", { simulate: true }));
    this.render();
  }

  private bind(id: string, handler: () => void): void {
    this.container?.querySelector(`#${id}`)?.addEventListener("click", handler);
  }

  async send(kind: string, args: Record<string, unknown> = {}): Promise<void> {
    const ack = await this.api.command(kind, args);
    if (!ack.accepted) {
      this.vm.lastError = ack.reason ?? "rejected";
    } else {
      this.vm.lastError = "";
    }
    await this.vm.refreshState();
    this.render();
    this.onAfterCommand();
  }

  render(): void {
    if (!this.container) return;
    const state = this.vm.state;
    const set = (id: string, text: string) => {
      const el = this.container!.querySelector(`#${id}`);
      if (el) el.textContent = text;
    };
    set("phase-label", this.vm.phaseLabel);
    set("cut-counter", this.vm.cutCounter);
    set("group-label", state ? `group ${state.current_group_id}` : "");
    set("command-error", this.vm.lastError);

    const phaseDone = !!state && state.cuts_done_in_phase >= state.cuts_total_in_phase;
    const complete = state?.phase === "complete";
    const hasPending = !!this.vm.pending;
    this.setDisabled("btn-resect", complete || phaseDone);
    this.setDisabled("btn-retract", complete);
    this.setDisabled("btn-override", !hasPending);
    this.setDisabled("btn-confirm", !hasPending);
    this.setDisabled("btn-advance", complete);
    this.setDisabled("btn-fine-tune", complete || phaseDone);

    const feed = this.container.querySelector("#event-feed");
    if (feed) {
      feed.innerHTML = this.vm.events
        .slice(-8)
        .map((event) => `<li>#${event.seq} ${event.kind}</li>`)
        .join("");
    }
  }

  private setDisabled(id: string, disabled: boolean): void {
    const el = this.container?.querySelector(`#${id}`) as HTMLButtonElement | null;
    if (el) el.disabled = disabled;
  }
}
