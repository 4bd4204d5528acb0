// Planar two-link arm geometry: two arms side by side, joints 0,1 = left
// shoulder/elbow, joints 2,3 = right shoulder/elbow. Angle 0 hangs straight
// down; positive angles swing toward the body midline being screen-right.

export interface Point {
  x: number;
  y: number;
}

export interface ArmLayout {
  leftBase: Point;
  rightBase: Point;
  upperLen: number;
  foreLen: number;
}

export function defaultLayout(width: number, height: number): ArmLayout {
  return {
    leftBase: { x: width * 0.32, y: height * 0.3 },
    rightBase: { x: width * 0.68, y: height * 0.3 },
    upperLen: height * 0.22,
    foreLen: height * 0.2,
  };
}

function segmentEnd(from: Point, angle: number, len: number): Point {
  // angle 0 points down the screen; positive rotates counter-clockwise
  return { x: from.x + len * Math.sin(angle), y: from.y + len * Math.cos(angle) };
}

export interface ArmPose {
  shoulder: Point;
  elbow: Point;
  wrist: Point;
}

export function armPose(base: Point, shoulderAngle: number, elbowAngle: number,
                        layout: ArmLayout): ArmPose {
  const elbow = segmentEnd(base, shoulderAngle, layout.upperLen);
  const wrist = segmentEnd(elbow, shoulderAngle + elbowAngle, layout.foreLen);
  return { shoulder: base, elbow, wrist };
}

export function bothArms(theta: number[], layout: ArmLayout): [ArmPose, ArmPose] {
  return [
    armPose(layout.leftBase, theta[0], theta[1], layout),
    armPose(layout.rightBase, theta[2], theta[3], layout),
  ];
}

// Joint handles a pointer can grab: shoulder joints drag at the elbow point,
// elbow joints drag at the wrist point.
export function handlePoints(theta: number[], layout: ArmLayout): Point[] {
  const [left, right] = bothArms(theta, layout);
  return [left.elbow, left.wrist, right.elbow, right.wrist];
}

export function hitTest(point: Point, theta: number[], layout: ArmLayout,
                        radius = 24): number | null {
  const handles = handlePoints(theta, layout);
  let best: number | null = null;
  let bestDist = radius;
  handles.forEach((h, i) => {
    const d = Math.hypot(h.x - point.x, h.y - point.y);
    if (d <= bestDist) {
      best = i;
      bestDist = d;
    }
  });
  return best;
}

// Map a drag position to the grabbed joint's angle.
export function dragToAngle(joint: number, point: Point, theta: number[],
                            layout: ArmLayout): number {
  const leftArm = joint < 2;
  const base = leftArm ? layout.leftBase : layout.rightBase;
  const shoulderAngle = leftArm ? theta[0] : theta[2];
  if (joint === 0 || joint === 2) {
    // shoulder: absolute angle of base->pointer
    return Math.atan2(point.x - base.x, point.y - base.y);
  }
  // elbow: angle of elbow->pointer relative to the upper segment
  const elbow = armPose(base, shoulderAngle, 0, layout).elbow;
  const absolute = Math.atan2(point.x - elbow.x, point.y - elbow.y);
  return absolute - shoulderAngle;
}

export function clampAngle(angle: number, limit = Math.PI / 2): number {
  return Math.max(-limit, Math.min(limit, angle));
}
