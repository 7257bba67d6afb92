// Browser bootstrap: connect to the service, stream events, render the
// scene at ~20 fps and keep the panel in sync.

import { ApiClient, EventStream } from "./api.js";
import { CommandPanel } from "./panel.js";
import { buildScene, drawScene, ViewPose } from "./scene.js";
import { ViewModel } from "./viewmodel.js";

export async function start(base: string): Promise<void> {
  const api = new ApiClient(base);
  const vm = new ViewModel(api);
  const panel = new CommandPanel(api, vm);
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const view: ViewPose = {
    yawDeg: 20,
    pitchDeg: -25,
    scale: 6.0,
    centerX: canvas.width / 2,
    centerY: canvas.height / 2,
  };

  await vm.loadStatic();
  panel.mount(document.getElementById("panel")!);

  const stream = new EventStream(base);
  const render = () => drawScene(ctx, buildScene(vm, view), canvas.width, canvas.height);
  await stream.connect((event) => {
    vm.applyEvent(event);
    panel.render();
    render();
  });
  panel.onAfterCommand = render;

  canvas.addEventListener("mousemove", (ev) => {
    if (ev.buttons & 1) {
      view.yawDeg += ev.movementX * 0.5;
      view.pitchDeg += ev.movementY * 0.5;
      render();
    }
  });
  canvas.addEventListener("wheel", (ev) => {
    view.scale *= ev.deltaY < 0 ? 1.1 : 0.9;
    render();
    ev.preventDefault();
  });
  render();
}

declare global {
  interface Window {
    lobesimStart: (base: string) => Promise<void>;
  }
}

if (typeof window !== "undefined") {
  window.lobesimStart = start;
}
