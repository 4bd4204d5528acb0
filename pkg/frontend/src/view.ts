// Session view state with double buffering: websocket messages land in a
// staging slot and become visible only at the next frame swap, so a render
// never reads a partially-applied message.

import { RingBuffer } from "./ring.js";
import { StateMessage } from "./protocol.js";

export const CHART_SAMPLES = 600;

export class SessionView {
  predErr = new RingBuffer(CHART_SAMPLES);
  kld1 = new RingBuffer(CHART_SAMPLES);
  kld2 = new RingBuffer(CHART_SAMPLES);
  torque = new RingBuffer(CHART_SAMPLES);   // sum |e_tilde|
  current: StateMessage | null = null;
  connected = false;

  private staged: StateMessage[] = [];

  absorb(msg: StateMessage): void {
    this.staged.push(msg);
    // keep at most one chart sample per tick even if frames arrive faster
    if (this.staged.length > 4 * CHART_SAMPLES) {
      this.staged.splice(0, this.staged.length - CHART_SAMPLES);
    }
  }

  // called once per animation frame
  swap(): void {
    let lastT = this.current?.t ?? -1;
    for (const msg of this.staged) {
      if (msg.t !== lastT) {
        this.predErr.push(msg.pred_err);
        this.kld1.push(msg.kld[0]);
        this.kld2.push(msg.kld[1]);
        this.torque.push(msg.e_tilde.reduce((a, b) => a + Math.abs(b), 0));
        lastT = msg.t;
      }
      this.current = msg;
    }
    this.staged = [];
  }
}
