#!/usr/bin/env python3
"""Opt-in long run: train the full-size network on the four-pattern corpus.

This reproduces the full training regime (10 sequences x 4000 steps,
truncated backprop in 400-step segments, 50k epochs by default) and takes
many hours; it is not part of the test gate. Usage:

    python scripts/train_paper_scale.py OUT_DIR [TRAIN_SEED] [EPOCHS]
"""

import sys
from pathlib import Path

from kinaero.presets import paper_dataset, paper_network, paper_train_config
from kinaero.training import save_checkpoint, train


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("paper_ckpt")
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1
    epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 50_000
    out.mkdir(parents=True, exist_ok=True)
    ds = paper_dataset()
    result = train(ds, paper_network(), paper_train_config(seed, epochs),
                   log_path=out / "train_log.jsonl")
    save_checkpoint(result.checkpoint, out)
    last = result.log[-1]
    print(f"epoch {last['epoch']}: F={last['F']:.4g} e_mean={last['e_mean']:.4g}")
    print(f"checkpoint written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
