"""Run configuration merged from defaults, config file, environment, flags.

Precedence (lowest to highest): dataclass defaults, JSON config file,
KINAERO_* environment variables, command-line flags. Every field doubles as
a CLI flag (underscores become dashes) and as an environment variable
(upper-cased with the KINAERO_ prefix). The fully resolved configuration is
written next to a run's outputs so any run can be reproduced from its
artifact directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

ENV_PREFIX = "KINAERO_"


@dataclass
class RunConfig:
    # dataset
    pfsm: str = "paper"              # "paper" (A-D machine) or "two" (A/B)
    seqs: int = 10
    cycles: int = 200
    data_seed: int = 7
    # model architecture (bottom layer first, comma separated)
    layers_d: str = "60,30"
    layers_z: str = "6,3"
    taus: str = "3,9"
    n_soft: int = 10
    softmax_sigma: float = 0.2
    w_train: float = 0.01
    beta: float = -1.0               # -1: use w_train
    # training
    epochs: int = 3000
    lr: float = 5e-3
    lr_a: float = 0.02
    grad_clip: float = 1.0
    train_seed: int = 1
    log_every: int = 50
    trunc_len: int = -1              # -1: full-sequence backprop
    # interaction inference
    w_i: float = 0.01
    infer_epochs: int = 15
    infer_lr: float = 0.05
    window: int = 20
    infer_seed: int = 0
    # plant and controller
    inertia: float = 1.0
    damping: float = 0.5
    model_error: float = 0.0
    sensor_noise: float = 0.01
    tau_th: float = 0.05
    alpha: float = 0.9
    e_max: float = 2.0
    k_r: float = 1.0
    k_p: float = 0.3
    pid_kp: float = 900.0
    pid_ki: float = 0.0
    pid_kd: float = 41.5
    # sessions and experiments
    ticks: int = 600
    session_seed: int = 0
    hand_gain: float = 5.0
    attempts: int = 10
    w_list: str = "0.01,0.05,0.1"
    exp_seed: int = 0
    # server
    host: str = "127.0.0.1"
    port: int = 8765

    def layer_tuples(self) -> list[tuple[int, int, float]]:
        ds = [int(v) for v in self.layers_d.split(",")]
        zs = [int(v) for v in self.layers_z.split(",")]
        ts = [float(v) for v in self.taus.split(",")]
        if not len(ds) == len(zs) == len(ts):
            raise ValueError("layers_d, layers_z, and taus must have equal length")
        return list(zip(ds, zs, ts))

    def w_values(self) -> list[float]:
        return [float(v) for v in self.w_list.split(",")]

    def resolved_beta(self) -> float | None:
        return None if self.beta < 0 else self.beta

    def write_resolved(self, out_dir: str | Path, name: str = "run_config.json") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def _coerce(raw: str, kind: type):
    if kind is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return kind(raw)


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file with RunConfig fields")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, type=str, default=None, metavar=str(f.default))


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except FileNotFoundError as exc:
            raise ValueError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from exc
    for f in fields(RunConfig):
        env = os.environ.get(ENV_PREFIX + f.name.upper())
        if env is not None:
            values[f.name] = env
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    known = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for key, val in values.items():
        if key not in known:
            raise ValueError(f"unknown config field: {key}")
        kind = kinds[known[key]] if isinstance(known[key], str) else known[key]
        out[key] = _coerce(val, kind) if isinstance(val, str) else val
    return RunConfig(**out)
