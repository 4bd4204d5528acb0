#!/usr/bin/env python3
"""Train the desk-scale two-pattern model and save a checkpoint.

Usage: python scripts/train_desk.py OUT_DIR [TRAIN_SEED] [EPOCHS]
"""

import sys
from pathlib import Path

from kinaero.presets import desk_dataset, desk_network, desk_train_config
from kinaero.training import save_checkpoint, train


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("desk_ckpt")
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1
    epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 3000
    out.mkdir(parents=True, exist_ok=True)
    ds = desk_dataset()
    result = train(ds, desk_network(), desk_train_config(seed, epochs),
                   log_path=out / "train_log.jsonl")
    save_checkpoint(result.checkpoint, out)
    last = result.log[-1]
    print(f"epoch {last['epoch']}: F={last['F']:.4g} e_mean={last['e_mean']:.4g}")
    print(f"checkpoint written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
