"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 domain error (bad data, missing checkpoint, failed
run), 2 usage error (argparse). Every run writes its resolved configuration
next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, add_config_arguments, resolve_config
from .datagen import (PATTERN_IDS, build_dataset, load_dataset, paper_pfsm,
                      two_pattern_pfsm)
from .experiments import (classify_cycles, mannwhitney_greater, run_experiment1,
                          run_experiment2, transition_stats, untrained_edges,
                          trained_edges)
from .inference import InferenceConfig
from .model import LayerConfig, NetworkConfig
from .plant import (ControlGains, PidState, PlantParams, TorqueFilterState)
from .session import InteractionSession, SessionConfig, load_force_script
from .training import (CheckpointError, TrainConfig, load_checkpoint,
                       prior_generate, save_checkpoint, train)


def pfsm_for(rc: RunConfig):
    if rc.pfsm == "paper":
        return paper_pfsm()
    if rc.pfsm == "two":
        return two_pattern_pfsm()
    raise ValueError(f"unknown pfsm {rc.pfsm!r} (expected 'paper' or 'two')")


def network_config(rc: RunConfig) -> NetworkConfig:
    layers = tuple(LayerConfig(num_d=d, num_z=z, tau=t)
                   for d, z, t in rc.layer_tuples())
    return NetworkConfig(layers=layers, output_dim=4, n_soft=rc.n_soft,
                         w_train=rc.w_train, beta=rc.resolved_beta(),
                         softmax_sigma=rc.softmax_sigma)


def inference_config(rc: RunConfig, w: float | None = None) -> InferenceConfig:
    return InferenceConfig(w=w if w is not None else rc.w_i,
                           epochs=rc.infer_epochs, lr_a=rc.infer_lr,
                           window=rc.window, seed=rc.infer_seed)


def session_for(rc: RunConfig, params, w: float | None = None,
                telemetry_path=None) -> InteractionSession:
    return InteractionSession(
        params, inference_config(rc, w),
        plant_params=PlantParams(inertia=rc.inertia, damping=rc.damping,
                                 model_error=rc.model_error,
                                 sensor_noise_std=rc.sensor_noise),
        gains=ControlGains(k_r=rc.k_r, k_p=rc.k_p),
        pid=PidState(kp=rc.pid_kp, ki=rc.pid_ki, kd=rc.pid_kd),
        filt=TorqueFilterState(tau_th=rc.tau_th, alpha=rc.alpha, e_max=rc.e_max),
        session_cfg=SessionConfig(seed=rc.session_seed,
                                  hand_gain=rc.hand_gain),
        telemetry_path=telemetry_path)


def cmd_gen_data(rc: RunConfig, args) -> int:
    out = Path(args.out)
    ds = build_dataset(pfsm_for(rc), n_seqs=rc.seqs, n_cycles=rc.cycles,
                       seed=rc.data_seed, out_dir=out)
    rc.write_resolved(out)
    print(f"wrote {ds.n_sequences} sequences x {ds.sequences[0].shape[0]} steps "
          f"to {out}")
    return 0


def cmd_train(rc: RunConfig, args) -> int:
    ds = load_dataset(args.data)
    cfg = network_config(rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(epochs=rc.epochs, lr=rc.lr, lr_a=rc.lr_a,
                     grad_clip=rc.grad_clip, seed=rc.train_seed,
                     log_every=rc.log_every,
                     trunc_len=None if rc.trunc_len < 0 else rc.trunc_len)
    result = train(ds, cfg, tc, log_path=out / "train_log.jsonl")
    save_checkpoint(result.checkpoint, out)
    rc.write_resolved(out)
    if result.log:
        last = result.log[-1]
        print(f"trained {rc.epochs} epochs; final F={last['F']:.4g} "
              f"e_mean={last['e_mean']:.4g}; checkpoint in {out}")
    else:
        print(f"saved initialization checkpoint (0 epochs) in {out}")
    if result.aborted:
        print("training aborted on non-finite loss; kept last good state",
              file=sys.stderr)
        return 1
    return 0


def cmd_prior_gen(rc: RunConfig, args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    trace = prior_generate(ckpt, n_steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cycles = classify_cycles(trace.joints)
    labels = [c["label"] for c in cycles]
    stats = transition_stats(labels) if len(labels) > 1 else {}
    lines = ["t,j0,j1,j2,j3,label"]
    for t in range(trace.joints.shape[0]):
        vals = ",".join(f"{v:.6f}" for v in trace.joints[t])
        lines.append(f"{t},{vals},{labels[t // 20] if t // 20 < len(labels) else '?'}")
    (out / "prior_trajectory.csv").write_text("\n".join(lines) + "\n")
    learned = sum(c["learned"] for c in cycles) / max(len(cycles), 1)
    report = {
        "n_steps": int(trace.joints.shape[0]),
        "n_cycles": len(cycles),
        "fraction_learned": learned,
        "transition_probabilities": {f"{a}->{b}": p for (a, b), p in
                                     sorted(stats.items())},
    }
    (out / "prior_stats.json").write_text(json.dumps(report, indent=2))
    rc.write_resolved(out)
    print(json.dumps(report, indent=2))
    return 0


def cmd_interact(rc: RunConfig, args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    session = session_for(rc, ckpt.params, w=args.w,
                          telemetry_path=args.log)
    if args.script:
        session.schedule(load_force_script(args.script))
    with session:
        session.run(rc.ticks)
    if args.log:
        rc.write_resolved(Path(args.log).resolve().parent)
    last = session.telemetry[-1]
    print(f"ran {rc.ticks} ticks; final e_window={last['e_window']:.4g} "
          f"F_int={last['F_int']:.4g}; telemetry in {args.log or '(memory)'}")
    return 0


def _load_checkpoints(paths: list[str]):
    return [load_checkpoint(p) for p in paths]


def cmd_exp1(rc: RunConfig, args) -> int:
    ckpts = _load_checkpoints(args.ckpt)
    spec = pfsm_for(rc)
    out = Path(args.out)
    rows = run_experiment1(ckpts, spec, w_list=tuple(rc.w_values()),
                           n_attempts=rc.attempts, seed=rc.exp_seed,
                           out_dir=out, hand_gain=rc.hand_gain)
    rc.write_resolved(out)
    for w in rc.w_values():
        sub = [r for r in rows if r["w"] == w]
        print(f"w={w:g}: mean|e~|={np.mean([r['mean_torque'] for r in sub]):.4g} "
              f"mean_e={np.mean([r['mean_e'] for r in sub]):.4g} "
              f"mean_r={np.mean([r['mean_r1'] + r['mean_r2'] for r in sub]):.4g} "
              f"success={sum(r['success'] for r in sub)}/{len(sub)}")
    return 0


def cmd_exp2(rc: RunConfig, args) -> int:
    ckpts = _load_checkpoints(args.ckpt)
    spec = pfsm_for(rc)
    out = Path(args.out)
    rows = run_experiment2(ckpts, spec, w=rc.w_i, n_attempts=rc.attempts,
                           seed=rc.exp_seed, out_dir=out,
                           hand_gain=rc.hand_gain)
    rc.write_resolved(out)
    for trained in (True, False):
        sub = [r for r in rows if r["trained"] == trained]
        tag = "trained" if trained else "untrained"
        print(f"{tag}: mean|e~|={np.mean([r['mean_torque'] for r in sub]):.4g} "
              f"mean_e={np.mean([r['mean_e'] for r in sub]):.4g} "
              f"mean_r={np.mean([r['mean_r1'] + r['mean_r2'] for r in sub]):.4g} "
              f"success={sum(r['success'] for r in sub)}/{len(sub)}")
    return 0


def cmd_serve(rc: RunConfig, args) -> int:
    from .server import run_server
    ckpt = load_checkpoint(args.ckpt)
    session = session_for(rc, ckpt.params, telemetry_path=args.log)
    n_ticks = rc.ticks if rc.ticks > 0 else None
    print(f"serving on ws://{rc.host}:{rc.port} ({n_ticks or 'unbounded'} ticks)")
    with session:
        run_server(session, host=rc.host, port=rc.port, n_ticks=n_ticks)
    return 0


def _read_csv(path: str) -> list[dict]:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append({k: v for k, v in zip(header, parts)})
    return rows


def cmd_report(rc: RunConfig, args) -> int:
    if args.exp1:
        rows = _read_csv(args.exp1)
        print("experiment 1 (per complexity weight):")
        for w in sorted({r["w"] for r in rows}, key=float):
            sub = [r for r in rows if r["w"] == w]
            print(f"  w={w}: torque={np.mean([float(r['mean_torque']) for r in sub]):.4g}"
                  f" e={np.mean([float(r['mean_e']) for r in sub]):.4g}"
                  f" r={np.mean([float(r['mean_r1']) + float(r['mean_r2']) for r in sub]):.4g}"
                  f" success={sum(int(r['success']) for r in sub)}/{len(sub)}")
    if args.exp2:
        rows = _read_csv(args.exp2)
        print("experiment 2 (trained vs untrained):")
        groups = {}
        for flag in ("1", "0"):
            sub = [r for r in rows if r["trained"] == flag]
            tag = "trained" if flag == "1" else "untrained"
            groups[tag] = sub
            print(f"  {tag}: torque={np.mean([float(r['mean_torque']) for r in sub]):.4g}"
                  f" e={np.mean([float(r['mean_e']) for r in sub]):.4g}"
                  f" r={np.mean([float(r['mean_r1']) + float(r['mean_r2']) for r in sub]):.4g}"
                  f" success={sum(int(r['success']) for r in sub)}/{len(sub)}")
        if groups.get("trained") and groups.get("untrained"):
            for key in ("mean_torque", "mean_e"):
                p = mannwhitney_greater(
                    [float(r[key]) for r in groups["untrained"]],
                    [float(r[key]) for r in groups["trained"]])
                print(f"  untrained > trained ({key}): p = {p:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinaero",
        description="Variational-RNN robot interaction pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_msg, extra):
        p = sub.add_parser(name, help=help_msg)
        add_config_arguments(p)
        for flag, kwargs in extra:
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate a training dataset directory",
        [("--out", dict(required=True)),
         ("--seed", dict(dest="data_seed", default=None))])
    add("train", cmd_train, "train a model on a dataset directory",
        [("--data", dict(required=True)), ("--out", dict(required=True)),
         ("--seed", dict(dest="train_seed", default=None))])
    add("prior-gen", cmd_prior_gen, "closed-loop generation from a checkpoint",
        [("--ckpt", dict(required=True)), ("--out", dict(required=True)),
         ("--steps", dict(type=int, default=10_000)),
         ("--seed", dict(type=int, default=0))])
    add("interact", cmd_interact, "run a scripted interaction session",
        [("--ckpt", dict(required=True)), ("--script", dict(default=None)),
         ("--log", dict(default=None)),
         ("--w", dict(type=float, default=None))])
    add("exp1", cmd_exp1, "meta-prior sweep over guided trained transitions",
        [("--ckpt", dict(action="append", required=True)),
         ("--out", dict(required=True))])
    add("exp2", cmd_exp2, "trained vs untrained guided transitions",
        [("--ckpt", dict(action="append", required=True)),
         ("--out", dict(required=True))])
    add("serve", cmd_serve, "realtime websocket service",
        [("--ckpt", dict(required=True)), ("--log", dict(default=None))])
    add("report", cmd_report, "summarize experiment CSVs",
        [("--exp1", dict(default=None)), ("--exp2", dict(default=None))])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = resolve_config(args)
        return args.fn(rc, args)
    except (ValueError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
