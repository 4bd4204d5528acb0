import { describe, expect, it } from "vitest";
import { parseStateMessage, validateClientMessage } from "../src/protocol.js";

const good = JSON.stringify({
  type: "state", t: 5, theta: [0, 0.1, -0.2, 0.3],
  theta_pred: [0, 0, 0, 0], e_tilde: [0, 0, 0, 0],
  pred_err: 1.5, kld: [0.1, 0.2], w_i: 0.01, pattern: "A",
});

describe("parseStateMessage", () => {
  it("accepts a well-formed state frame", () => {
    const msg = parseStateMessage(good);
    expect(msg).not.toBeNull();
    expect(msg!.t).toBe(5);
    expect(msg!.kld).toEqual([0.1, 0.2]);
  });

  it("rejects malformed JSON", () => {
    expect(parseStateMessage("{nope")).toBeNull();
  });

  it("rejects frames with wrong type", () => {
    expect(parseStateMessage(JSON.stringify({ type: "error" }))).toBeNull();
  });

  it("rejects frames with short vectors", () => {
    const bad = JSON.parse(good);
    bad.theta = [1, 2];
    expect(parseStateMessage(JSON.stringify(bad))).toBeNull();
  });

  it("rejects frames with non-finite numbers", () => {
    const bad = JSON.parse(good);
    bad.pred_err = "NaN";
    expect(parseStateMessage(JSON.stringify(bad))).toBeNull();
  });
});

describe("validateClientMessage", () => {
  it("accepts valid messages", () => {
    expect(validateClientMessage({ type: "force", joint: 2, value: 0.5 })).toBeNull();
    expect(validateClientMessage({ type: "grab", joint: 0, angle: 1.0 })).toBeNull();
    expect(validateClientMessage({ type: "release", joint: 3 })).toBeNull();
    expect(validateClientMessage({ type: "set_w", value: 0.05 })).toBeNull();
  });

  it("rejects out-of-range joints", () => {
    expect(validateClientMessage({ type: "force", joint: 4, value: 0.1 }))
      .not.toBeNull();
    expect(validateClientMessage({ type: "grab", joint: -1, angle: 0 }))
      .not.toBeNull();
  });

  it("rejects non-finite values and non-positive w", () => {
    expect(validateClientMessage({ type: "force", joint: 0, value: Infinity }))
      .not.toBeNull();
    expect(validateClientMessage({ type: "set_w", value: 0 })).not.toBeNull();
  });

  it("rejects grab angles beyond pi", () => {
    expect(validateClientMessage({ type: "grab", joint: 1, angle: 4.0 }))
      .not.toBeNull();
  });
});
