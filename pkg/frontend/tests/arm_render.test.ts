import { describe, expect, it } from "vitest";
import { armPose, bothArms, clampAngle, defaultLayout, dragToAngle,
         hitTest } from "../src/arm.js";
import { renderFrame } from "../src/main.js";
import { SessionView } from "../src/view.js";
import { StateMessage } from "../src/protocol.js";

const layout = defaultLayout(760, 340);

describe("arm geometry", () => {
  it("hangs straight down at zero angles", () => {
    const pose = armPose(layout.leftBase, 0, 0, layout);
    expect(pose.elbow.x).toBeCloseTo(layout.leftBase.x, 6);
    expect(pose.elbow.y).toBeCloseTo(layout.leftBase.y + layout.upperLen, 6);
    expect(pose.wrist.y).toBeCloseTo(
      layout.leftBase.y + layout.upperLen + layout.foreLen, 6);
  });

  it("drag inverse matches forward kinematics", () => {
    const theta = [0.3, -0.4, -0.2, 0.5];
    const [left, right] = bothArms(theta, layout);
    // dragging each handle exactly where it already is recovers its angle
    expect(dragToAngle(0, left.elbow, theta, layout)).toBeCloseTo(theta[0], 6);
    expect(dragToAngle(1, left.wrist, theta, layout)).toBeCloseTo(theta[1], 6);
    expect(dragToAngle(2, right.elbow, theta, layout)).toBeCloseTo(theta[2], 6);
    expect(dragToAngle(3, right.wrist, theta, layout)).toBeCloseTo(theta[3], 6);
  });

  it("hit test finds the nearest handle only within radius", () => {
    const theta = [0, 0, 0, 0];
    const [left] = bothArms(theta, layout);
    expect(hitTest(left.elbow, theta, layout)).toBe(0);
    expect(hitTest(left.wrist, theta, layout)).toBe(1);
    expect(hitTest({ x: 1, y: 1 }, theta, layout)).toBeNull();
  });

  it("two joints are draggable independently", () => {
    const theta = [0, 0, 0, 0];
    const a0 = dragToAngle(0, { x: layout.leftBase.x + 50, y: layout.leftBase.y + 50 },
                           theta, layout);
    const a2 = dragToAngle(2, { x: layout.rightBase.x - 50, y: layout.rightBase.y + 50 },
                           theta, layout);
    expect(a0).toBeGreaterThan(0);
    expect(a2).toBeLessThan(0);
  });

  it("clamps to the joint limits", () => {
    expect(clampAngle(3.0)).toBeCloseTo(Math.PI / 2, 9);
    expect(clampAngle(-3.0)).toBeCloseTo(-Math.PI / 2, 9);
    expect(clampAngle(0.4)).toBe(0.4);
  });
});

function stubContext(): CanvasRenderingContext2D {
  const noop = () => undefined;
  return {
    clearRect: noop, strokeRect: noop, fillText: noop, beginPath: noop,
    moveTo: noop, lineTo: noop, stroke: noop, arc: noop,
    set strokeStyle(_v: unknown) {}, set fillStyle(_v: unknown) {},
    set lineWidth(_v: unknown) {}, set lineCap(_v: unknown) {},
    set font(_v: unknown) {},
  } as unknown as CanvasRenderingContext2D;
}

function fullState(t: number): StateMessage {
  return {
    type: "state", t, theta: [0.1, -0.2, 0.3, 0.0],
    theta_pred: [0.12, -0.18, 0.31, 0.02], e_tilde: [0.5, 0, 0.2, 0],
    pred_err: Math.sin(t / 10) + 1.5, kld: [0.2, 0.1], w_i: 0.01, pattern: "A",
  };
}

describe("render loop budget", () => {
  it("renders 600-sample charts fast enough for 20 fps", () => {
    const view = new SessionView();
    for (let t = 0; t < 700; t++) view.absorb(fullState(t));
    view.swap();
    expect(view.predErr.length).toBe(600);
    const ctx = stubContext();
    const canvas = { width: 760, height: 560 };
    const t0 = performance.now();
    const frames = 200;
    for (let i = 0; i < frames; i++) {
      view.absorb(fullState(700 + i));
      view.swap();
      renderFrame(ctx, canvas, view, layout);
    }
    const perFrameMs = (performance.now() - t0) / frames;
    expect(perFrameMs).toBeLessThan(50); // 20 fps budget
  });

  it("renders an empty view without errors", () => {
    const view = new SessionView();
    renderFrame(stubContext(), { width: 760, height: 560 }, view, layout);
  });
});
