// Wire protocol: message shapes and validation. Every outbound message is
// validated before send; inbound frames that fail validation are dropped.

export interface StateMessage {
  type: "state";
  t: number;
  theta: number[];        // joint angles, radians
  theta_pred: number[];   // predicted next-step angles, radians
  e_tilde: number[];      // filtered excess torque per joint, N m
  pred_err: number;
  kld: number[];          // per-layer window KL
  w_i: number;
  pattern: string;
}

export interface ForceMessage {
  type: "force";
  joint: number;
  value: number;
}

export interface GrabMessage {
  type: "grab";
  joint: number;
  angle: number;
}

export interface ReleaseMessage {
  type: "release";
  joint: number;
}

export interface SetWMessage {
  type: "set_w";
  value: number;
}

export type ClientMessage = ForceMessage | GrabMessage | ReleaseMessage | SetWMessage;

function isNumberArray(v: unknown, n: number): v is number[] {
  return Array.isArray(v) && v.length === n && v.every((x) => Number.isFinite(x));
}

export function parseStateMessage(raw: string): StateMessage | null {
  let msg: unknown;
  try {
    msg = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof msg !== "object" || msg === null) return null;
  const m = msg as Record<string, unknown>;
  if (m.type !== "state") return null;
  if (!Number.isFinite(m.t)) return null;
  if (!isNumberArray(m.theta, 4) || !isNumberArray(m.theta_pred, 4)) return null;
  if (!isNumberArray(m.e_tilde, 4) || !isNumberArray(m.kld, 2)) return null;
  if (!Number.isFinite(m.pred_err) || !Number.isFinite(m.w_i)) return null;
  if (typeof m.pattern !== "string") return null;
  return m as unknown as StateMessage;
}

export function validateClientMessage(msg: ClientMessage): string | null {
  switch (msg.type) {
    case "force":
      if (!Number.isInteger(msg.joint) || msg.joint < 0 || msg.joint > 3)
        return "joint must be 0-3";
      if (!Number.isFinite(msg.value)) return "value must be finite";
      return null;
    case "grab":
      if (!Number.isInteger(msg.joint) || msg.joint < 0 || msg.joint > 3)
        return "joint must be 0-3";
      if (!Number.isFinite(msg.angle)) return "angle must be finite";
      if (Math.abs(msg.angle) > Math.PI) return "angle out of range";
      return null;
    case "release":
      if (!Number.isInteger(msg.joint) || msg.joint < 0 || msg.joint > 3)
        return "joint must be 0-3";
      return null;
    case "set_w":
      if (!Number.isFinite(msg.value) || msg.value <= 0)
        return "w must be a positive number";
      return null;
    default:
      return "unknown message type";
  }
}
