// Browser entry point: wires the websocket client, the drag interaction,
// the meta-prior slider, and the render loop together.

import { ReconnectingClient } from "./client.js";
import { SessionView } from "./view.js";
import { bothArms, clampAngle, defaultLayout, dragToAngle, hitTest } from "./arm.js";
import { drawStrip } from "./charts.js";

const MAX_GRAB_RATE_HZ = 30;

function setupBanner(client: ReconnectingClient): void {
  const banner = document.getElementById("status")!;
  client.onStatus = (status) => {
    banner.textContent = status === "open" ? "connected"
      : status === "connecting" ? "connecting..." : "disconnected, retrying";
    banner.className = status;
  };
}

function main(): void {
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const layout = defaultLayout(canvas.width, canvas.height * 0.6);
  const url = `ws://${location.hostname}:8765`;
  const client = new ReconnectingClient(url);
  const view = new SessionView();
  setupBanner(client);
  client.onState = (msg) => view.absorb(msg);
  client.connect();

  // meta-prior slider
  const slider = document.getElementById("w-slider") as HTMLInputElement;
  const wLabel = document.getElementById("w-label")!;
  slider.addEventListener("input", () => {
    const w = Number(slider.value);
    wLabel.textContent = `w = ${w.toFixed(3)}`;
    client.send({ type: "set_w", value: w });
  });

  // drag-to-grab with pointer capture, rate limited
  let grabbed: number | null = null;
  let lastSent = 0;
  const pointerPos = (ev: PointerEvent) => {
    const rect = canvas.getBoundingClientRect();
    return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  };
  canvas.addEventListener("pointerdown", (ev) => {
    const theta = view.current?.theta ?? [0, 0, 0, 0];
    const joint = hitTest(pointerPos(ev), theta, layout);
    if (joint === null) return;
    grabbed = joint;
    canvas.setPointerCapture(ev.pointerId);
    const angle = clampAngle(dragToAngle(joint, pointerPos(ev), theta, layout));
    client.send({ type: "grab", joint, angle });
    lastSent = performance.now();
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (grabbed === null) return;
    const now = performance.now();
    if (now - lastSent < 1000 / MAX_GRAB_RATE_HZ) return;
    const theta = view.current?.theta ?? [0, 0, 0, 0];
    const angle = clampAngle(dragToAngle(grabbed, pointerPos(ev), theta, layout));
    client.send({ type: "grab", joint: grabbed, angle });
    lastSent = now;
  });
  const endGrab = (ev: PointerEvent) => {
    if (grabbed === null) return;
    client.send({ type: "release", joint: grabbed });
    grabbed = null;
    canvas.releasePointerCapture(ev.pointerId);
  };
  canvas.addEventListener("pointerup", endGrab);
  canvas.addEventListener("pointercancel", endGrab);

  const render = () => {
    view.swap();
    renderFrame(ctx, canvas, view, layout);
    requestAnimationFrame(render);
  };
  requestAnimationFrame(render);
}

export function renderFrame(ctx: CanvasRenderingContext2D,
                            canvas: { width: number; height: number },
                            view: SessionView,
                            layout = defaultLayout(640, 300)): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const msg = view.current;
  const theta = msg?.theta ?? [0, 0, 0, 0];
  const pred = msg?.theta_pred ?? theta;

  // ghost arms show the intention; solid arms the actual joints
  drawArms(ctx, pred, layout, "rgba(120,160,255,0.35)", 10);
  drawArms(ctx, theta, layout, "#e8e8e8", 6);

  if (msg) {
    ctx.fillStyle = "#aaa";
    ctx.font = "13px sans-serif";
    ctx.fillText(`t=${msg.t}  pattern=${msg.pattern}  w=${msg.w_i}`, 12, 16);
  }

  const chartTop = canvas.height * 0.62;
  const h = (canvas.height - chartTop - 16) / 2;
  const w = (canvas.width - 36) / 2;
  drawStrip(ctx, { x: 12, y: chartTop, w, h }, view.predErr,
            "prediction error", "#7fc97f");
  drawStrip(ctx, { x: 24 + w, y: chartTop, w, h }, view.torque,
            "|excess torque|", "#f4a261");
  drawStrip(ctx, { x: 12, y: chartTop + h + 8, w, h }, view.kld1,
            "KL bottom", "#fdc086");
  drawStrip(ctx, { x: 24 + w, y: chartTop + h + 8, w, h }, view.kld2,
            "KL top", "#beaed4");
}

function drawArms(ctx: CanvasRenderingContext2D, theta: number[],
                  layout: ReturnType<typeof defaultLayout>, style: string,
                  width: number): void {
  const arms = bothArms(theta, layout);
  ctx.strokeStyle = style;
  ctx.lineWidth = width;
  ctx.lineCap = "round";
  for (const arm of arms) {
    ctx.beginPath();
    ctx.moveTo(arm.shoulder.x, arm.shoulder.y);
    ctx.lineTo(arm.elbow.x, arm.elbow.y);
    ctx.lineTo(arm.wrist.x, arm.wrist.y);
    ctx.stroke();
    for (const p of [arm.elbow, arm.wrist]) {
      ctx.beginPath();
      ctx.arc(p.x, p.y, width * 0.8, 0, 2 * Math.PI);
      ctx.stroke();
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("scene")) {
  main();
}
