// Scripted browser-style test against a live service: drives a full
// left-trough phase (resect / retract / override / confirm / advance) through
// the real DOM panel, checking the rendered readout against /state at every
// step, and verifies the event stream resumes gaplessly after a reconnect.

import { spawn, ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, EventStream } from "../src/api.js";
import { CommandPanel } from "../src/panel.js";
import { buildScene } from "../src/scene.js";
import { ViewModel } from "../src/viewmodel.js";

const PORT = 8719;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;

async function waitForService(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const response = await fetch(`${BASE}/state`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      throw new Error("service did not come up in time");
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
}

function textOf(id: string): string {
  return document.getElementById(id)?.textContent ?? "";
}

async function settle(ms = 150): Promise<void> {
  await new Promise((resolve) => setTimeout(resolve, ms));
}

beforeAll(async () => {
  server = spawn(
    "python3",
    [
      "-m", "lobesim.cli", "serve",
      "--port", String(PORT),
      "--train-epochs", "120",
      "--voxel-pitch", "1.0",
      "--seed", "3",
    ],
    { cwd: "..", stdio: "ignore" },
  );
  await waitForService(150_000);
}, 170_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("supervisory console against a live service", () => {
  it("drives a full left-trough phase and stays in lockstep with /state", async () => {
    const api = new ApiClient(BASE);
    const vm = new ViewModel(api);
    const panel = new CommandPanel(api, vm);

    document.body.innerHTML = '<div id="panel"></div>';
    await vm.loadStatic();
    panel.mount(document.getElementById("panel")!);

    const stream = new EventStream(BASE);
    await stream.connect((event) => {
      vm.applyEvent(event);
      panel.render();
    });

    const checkReadout = async () => {
      const state = await api.state();
      expect(textOf("phase-label")).toBe(state.phase);
      expect(textOf("cut-counter")).toBe(
        `${state.cuts_done_in_phase}/${state.cuts_total_in_phase}`,
      );
    };

    await checkReadout();
    expect(vm.phaseLabel).toBe("left_trough");
    const total = vm.state!.cuts_total_in_phase;
    expect(total).toBeGreaterThan(3);

    // Fine registration adjustment at the phase start, as the workflow
    // prescribes.
    await panel.send("fine_tune", { simulate: true });
    expect(vm.lastError).toBe("");
    await checkReadout();

    // Resect the first half of the phase, checking the counter each step.
    const firstHalf = Math.floor(total / 2);
    for (let i = 0; i < firstHalf; i += 1) {
      await panel.send("resect");
      expect(vm.lastError).toBe("");
      await checkReadout();
    }

    // Retract, inspect the proposal, override to the second-best, confirm.
    await panel.send("retract");
    await settle();
    expect(vm.pending).not.toBeNull();
    const proposedTop = vm.pending!.candidates[0];
    await panel.send("override_retract", { rank: 1 });
    await settle();
    expect(vm.pending!.selected_rank).toBe(1);

    // The scene shows the candidate arrows, selected one highlighted.
    const scene = buildScene(vm, {
      yawDeg: 15, pitchDeg: -20, scale: 5, centerX: 400, centerY: 300,
    });
    expect(scene.arrows.length).toBeGreaterThanOrEqual(2);

    await panel.send("retract"); // confirm
    await settle();
    const retraction = vm.events.filter((e) => e.kind === "retraction_executed").at(-1);
    expect(retraction).toBeDefined();
    const applied = retraction!.payload as { start: number[] };
    // The applied action is the override, not the original top candidate.
    expect(applied.start).not.toEqual(proposedTop.start);
    await checkReadout();

    // Finish the phase.
    for (let i = firstHalf; i < total; i += 1) {
      await panel.send("resect");
      expect(vm.lastError).toBe("");
      await checkReadout();
    }

    // Resect past the end is rejected and rendered inline, view unchanged.
    const counterBefore = textOf("cut-counter");
    await panel.send("resect");
    expect(vm.lastError).toContain("advance_phase");
    expect(textOf("command-error")).toContain("advance_phase");
    expect(textOf("cut-counter")).toBe(counterBefore);

    // Advance to the right trough.
    await panel.send("advance_phase");
    expect(vm.lastError).toBe("");
    await checkReadout();
    expect(vm.phaseLabel).toBe("right_trough");

    // Executed cuts are reflected in the scene overlay (dimmed paths).
    expect(vm.executedCuts.size).toBe(total);

    // Reconnect: drop the stream, issue a command while disconnected, then
    // resume from the last seen id with no gaps.
    const seenBefore = vm.events.map((e) => e.seq);
    stream.close();
    await settle(300);
    const ack = await api.command("resect");
    expect(ack.accepted).toBe(true);
    await stream.connect((event) => {
      vm.applyEvent(event);
      panel.render();
    });
    await settle(1200);
    const seqs = vm.events.map((e) => e.seq);
    expect(seqs.length).toBeGreaterThan(seenBefore.length);
    for (let i = 1; i < seqs.length; i += 1) {
      expect(seqs[i]).toBe(seqs[i - 1] + 1);
    }
    expect(seqs[0]).toBe(1);
    stream.close();
  });
});
