// 3D scene construction for the console: orthographic projection of the
// labeled cloud with plan overlays. buildScene is pure (testable headless);
// drawScene is the thin canvas binding.

import { ViewModel } from "./viewmodel.js";

export interface ViewPose {
  yawDeg: number;
  pitchDeg: number;
  scale: number;
  centerX: number;
  centerY: number;
}

export interface ScenePoint {
  x: number;
  y: number;
  color: string;
  size: number;
}

export interface ScenePolyline {
  points: Array<[number, number]>;
  color: string;
  width: number;
}

export interface SceneArrow {
  from: [number, number];
  to: [number, number];
  color: string;
}

export interface ScenePrimitives {
  points: ScenePoint[];
  polylines: ScenePolyline[];
  arrows: SceneArrow[];
}

const LABEL_COLORS: Record<number, string> = {
  0: "#8a8f98", // capsule
  1: "#4f9ddb", // left lobe
  2: "#58c1a5", // right lobe
  3: "#d4874e", // median lobe
};

const PHASE_COLORS: Record<string, string> = {
  left_trough: "#4f9ddb",
  right_trough: "#58c1a5",
  median_dissection: "#d4874e",
};

export function project(point: number[], view: ViewPose): [number, number] {
  const yaw = (view.yawDeg * Math.PI) / 180;
  const pitch = (view.pitchDeg * Math.PI) / 180;
  const [x, y, z] = point;
  const x1 = x * Math.cos(yaw) + y * Math.sin(yaw);
  const y1 = -x * Math.sin(yaw) + y * Math.cos(yaw);
  const y2 = y1 * Math.cos(pitch) + z * Math.sin(pitch);
  const z2 = -y1 * Math.sin(pitch) + z * Math.cos(pitch);
  return [view.centerX + x1 * view.scale, view.centerY - z2 * view.scale];
}

export function buildScene(vm: ViewModel, view: ViewPose): ScenePrimitives {
  const primitives: ScenePrimitives = { points: [], polylines: [], arrows: [] };
  if (vm.cloud) {
    const { points, labels } = vm.cloud;
    for (let i = 0; i < points.length; i += 1) {
      const [px, py] = project(points[i], view);
      primitives.points.push({
        x: px,
        y: py,
        color: LABEL_COLORS[labels[i]] ?? "#666",
        size: labels[i] === 0 ? 1 : 1.5,
      });
    }
  }
  if (vm.plan) {
    const nextIndex = vm.nextCutIndex;
    for (const phase of vm.plan.phases) {
      for (const group of phase.groups) {
        for (const cut of group.cuts) {
          const executed = vm.executedCuts.has(cut.global_index);
          const isNext = cut.global_index === nextIndex;
          const pts = cut.waypoints
            .filter((w) => w.kind === "cutting")
            .map((w) => project([w.x, w.y, w.z], view));
          primitives.polylines.push({
            points: pts,
            color: isNext
              ? "#f4d35e"
              : executed
                ? "#3a3f46"
                : PHASE_COLORS[phase.phase] ?? "#999",
            width: isNext ? 2.5 : executed ? 0.5 : 1.0,
          });
        }
      }
    }
  }
  if (vm.pending) {
    for (const candidate of vm.pending.candidates) {
      const selected = candidate.rank === vm.pending.selected_rank;
      primitives.arrows.push({
        from: project(candidate.start, view),
        to: project(candidate.end, view),
        color: selected ? "#e3655b" : "#8d6a9f",
      });
    }
  }
  return primitives;
}

export function drawScene(
  ctx: CanvasRenderingContext2D,
  primitives: ScenePrimitives,
  widthPx: number,
  heightPx: number,
): void {
  ctx.clearRect(0, 0, widthPx, heightPx);
  ctx.fillStyle = "#15171b";
  ctx.fillRect(0, 0, widthPx, heightPx);
  for (const point of primitives.points) {
    ctx.fillStyle = point.color;
    ctx.fillRect(point.x, point.y, point.size, point.size);
  }
  for (const line of primitives.polylines) {
    if (line.points.length < 2) continue;
    ctx.strokeStyle = line.color;
    ctx.lineWidth = line.width;
    ctx.beginPath();
    ctx.moveTo(line.points[0][0], line.points[0][1]);
    for (const [x, y] of line.points.slice(1)) {
      ctx.lineTo(x, y);
    }
    ctx.stroke();
  }
  for (const arrow of primitives.arrows) {
    ctx.strokeStyle = arrow.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(arrow.from[0], arrow.from[1]);
    ctx.lineTo(arrow.to[0], arrow.to[1]);
    ctx.stroke();
    ctx.fillStyle = arrow.color;
    ctx.beginPath();
    ctx.arc(arrow.to[0], arrow.to[1], 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}
