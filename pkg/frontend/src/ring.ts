// Fixed-capacity ring buffer backing the strip charts.

export class RingBuffer {
  private data: Float64Array;
  private head = 0;
  private count = 0;

  constructor(readonly capacity: number) {
    this.data = new Float64Array(capacity);
  }

  push(value: number): void {
    this.data[this.head] = value;
    this.head = (this.head + 1) % this.capacity;
    if (this.count < this.capacity) this.count += 1;
  }

  get length(): number {
    return this.count;
  }

  // oldest to newest
  values(): number[] {
    const out: number[] = new Array(this.count);
    const start = (this.head - this.count + this.capacity) % this.capacity;
    for (let i = 0; i < this.count; i++) {
      out[i] = this.data[(start + i) % this.capacity];
    }
    return out;
  }

  latest(): number | undefined {
    if (this.count === 0) return undefined;
    return this.data[(this.head - 1 + this.capacity) % this.capacity];
  }
}
