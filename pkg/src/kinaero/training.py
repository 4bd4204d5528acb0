"""Offline training loop, checkpoint persistence, and closed-loop generation.

Each epoch runs a full posterior rollout per training sequence (optionally in
truncated segments with state carry for long corpora), backpropagates the
evidence loss, and applies one global-norm-clipped Adam update to the weights
and to every per-step posterior parameter. The reparameterization noise for
epoch k of sequence i is drawn from a generator seeded with
(master_seed, k, i), so runs are reproducible end to end.

Checkpoint layout (one directory):
    manifest.json    version, model config, tensor tables, evaluation record
    weights.bin      little-endian float32, row-major, in manifest order
    posteriors.bin   same encoding for the per-sequence posterior parameters
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tape, adam_step, clip_global_norm, zero_grads
from .datagen import Dataset
from .model import (Array, GenerationTrace, NetworkConfig, NetworkParams,
                    SequencePosterior, encode_frame, free_energy_of_rollout,
                    generate_prior, rollout_posterior)

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint on disk."""


@dataclass
class TrainConfig:
    epochs: int = 3000
    lr: float = 5e-3
    lr_a: float | None = 0.02   # posterior-parameter step size; None: use lr
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    trunc_len: int | None = None
    sequences: list[int] | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0 or (self.lr_a is not None and self.lr_a <= 0):
            raise ValueError("learning rates must be positive")


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: NetworkParams
    posteriors: list[SequencePosterior]
    free_energy: float = math.nan
    log_tail: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    aborted: bool = False


def encode_targets(ds: Dataset, cfg: NetworkConfig,
                   sequences: list[int] | None = None) -> list[list[Array]]:
    idx = sequences if sequences is not None else range(ds.n_sequences)
    out = []
    for i in idx:
        seq = ds.sequences[i]
        if seq.shape[1] != cfg.output_dim:
            raise ValueError(
                f"dataset has {seq.shape[1]} joints, model expects {cfg.output_dim}")
        out.append([encode_frame(seq[t], cfg) for t in range(seq.shape[0])])
    return out


def _epoch_eps(master_seed: int, epoch: int, seq_index: int,
               cfg: NetworkConfig, length: int) -> list[list[Array]]:
    rng = np.random.default_rng(np.random.SeedSequence(
        [master_seed, epoch, seq_index]))
    return [[rng.standard_normal(lc.num_z) for lc in cfg.layers]
            for _ in range(length)]


def _snapshot(params: NetworkParams,
              posteriors: list[SequencePosterior]) -> list[Array]:
    arrs = [t.data.copy() for _, t in params.named_tensors()]
    for post in posteriors:
        arrs.extend(t.data.copy() for t in post.tensors())
    return arrs


def _restore(params: NetworkParams, posteriors: list[SequencePosterior],
             arrs: list[Array]) -> None:
    tensors = [t for _, t in params.named_tensors()]
    for post in posteriors:
        tensors.extend(post.tensors())
    for t, a in zip(tensors, arrs):
        t.data = a.copy()


def quantize_float32(params: NetworkParams,
                     posteriors: list[SequencePosterior]) -> None:
    """Round every value through float32, matching the on-disk precision."""
    tensors = [t for _, t in params.named_tensors()]
    for post in posteriors:
        tensors.extend(post.tensors())
    for t in tensors:
        t.data = t.data.astype(np.float32).astype(np.float64)


def evaluate_free_energy(params: NetworkParams,
                         posteriors: list[SequencePosterior],
                         targets: list[list[Array]],
                         w: float | None = None) -> float:
    """Loss over all sequences with mean propagation (zero noise stream)."""
    cfg = params.cfg
    total = 0.0
    for post, tgt in zip(posteriors, targets):
        tape = Tape()
        ro = rollout_posterior(tape, params, [post.step(t) for t in range(post.length)],
                               eps_steps=None, targets=tgt)
        total += free_energy_of_rollout(tape, ro, cfg,
                                        w=w if w is not None else cfg.w_train).item()
    return total


def train(ds: Dataset, cfg: NetworkConfig, tc: TrainConfig,
          params: NetworkParams | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Minimize the evidence loss over the dataset; returns the checkpoint.

    Divergence (non-finite loss) aborts and returns the state captured at the
    last logging point. The training log is JSON-lines friendly: one dict per
    logging point with epoch, F, e_mean, per-layer r means, and wall time.
    """
    seq_idx = tc.sequences if tc.sequences is not None else list(range(ds.n_sequences))
    params = params or NetworkParams(cfg, np.random.default_rng(tc.seed))
    posteriors = [SequencePosterior(cfg, ds.sequences[i].shape[0]) for i in seq_idx]
    targets = encode_targets(ds, cfg, seq_idx)

    weight_leaves = params.trainable()
    a_leaves: list = []
    for post in posteriors:
        a_leaves.extend(post.tensors())
    leaves = weight_leaves + a_leaves
    adam_w = AdamState.for_params(weight_leaves, lr=tc.lr)
    adam_a = AdamState.for_params(a_leaves, lr=tc.lr_a if tc.lr_a is not None
                                  else tc.lr)

    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    n_steps_total = sum(ds.sequences[i].shape[0] for i in seq_idx)
    t_start = time.perf_counter()
    last_good = _snapshot(params, posteriors)
    aborted = False

    def emit(epoch: int, f_total: float, e_sum: float, r_sums: Array) -> None:
        entry = {"epoch": epoch, "F": f_total,
                 "e_mean": e_sum / n_steps_total,
                 **{f"r_l{l + 1}": float(r_sums[l]) / n_steps_total
                    for l in range(cfg.num_layers)},
                 "wallclock_s": time.perf_counter() - t_start}
        log.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()

    for epoch in range(1, tc.epochs + 1):
        zero_grads(leaves)
        f_total = 0.0
        e_sum = 0.0
        r_sums = np.zeros(cfg.num_layers)
        for j, i in enumerate(seq_idx):
            post, tgt = posteriors[j], targets[j]
            eps = _epoch_eps(tc.seed, epoch, i, cfg, post.length)
            if tc.trunc_len is None or post.length <= tc.trunc_len:
                spans = [(0, post.length)]
            else:
                spans = [(s, min(s + tc.trunc_len, post.length))
                         for s in range(0, post.length, tc.trunc_len)]
            h_carry = d_carry = None
            for (s, e) in spans:
                tape = Tape()
                ro = rollout_posterior(
                    tape, params, [post.step(t) for t in range(s, e)],
                    eps_steps=eps[s:e], targets=tgt[s:e],
                    h0=h_carry, d0=d_carry, first_abs_t=s + 1)
                F = free_energy_of_rollout(tape, ro, cfg, w=cfg.w_train,
                                           first_abs_t=s + 1)
                tape.backward(F)
                f_total += F.item()
                e_sum += float(ro.e_values().sum())
                r_sums += ro.r_values().sum(axis=0)
                h_carry, d_carry = ro.last_state()
        if not math.isfinite(f_total):
            _restore(params, posteriors, last_good)
            aborted = True
            emit(epoch, f_total, e_sum, r_sums)
            break
        clip_global_norm(leaves, tc.grad_clip)
        adam_step(weight_leaves, [p.grad for p in weight_leaves], adam_w)
        adam_step(a_leaves, [p.grad for p in a_leaves], adam_a)
        if epoch % tc.log_every == 0 or epoch == 1 or epoch == tc.epochs:
            emit(epoch, f_total, e_sum, r_sums)
            if not aborted:
                last_good = _snapshot(params, posteriors)

    if log_file is not None:
        log_file.close()

    # match on-disk float32 precision before recording the evaluation value
    quantize_float32(params, posteriors)
    final_f = evaluate_free_energy(params, posteriors, targets)
    ckpt = Checkpoint(config=cfg, params=params, posteriors=posteriors,
                      free_energy=final_f, log_tail=log[-5:],
                      meta={"seed": tc.seed, "epochs": tc.epochs,
                            "sequences": list(seq_idx), "lr": tc.lr,
                            "grad_clip": tc.grad_clip, "aborted": aborted})
    return TrainResult(checkpoint=ckpt, log=log, aborted=aborted)


# ---------------------------------------------------------------------------
# persistence


def _pack(entries: list[tuple[str, Array]]) -> tuple[list[dict], bytes]:
    table = []
    blobs = []
    offset = 0
    for name, arr in entries:
        raw = arr.astype("<f4").tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    return table, b"".join(blobs)


def _unpack(table: list[dict], blob: bytes) -> dict[str, Array]:
    expected = sum(4 * int(np.prod(e["shape"])) for e in table)
    if expected != len(blob):
        raise CheckpointError(
            f"binary payload is {len(blob)} bytes, manifest expects {expected}")
    out = {}
    for e in table:
        n = int(np.prod(e["shape"]))
        start = e["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    w_entries = [(name, t.data) for name, t in ckpt.params.named_tensors()]
    w_table, w_blob = _pack(w_entries)
    p_entries = []
    for i, post in enumerate(ckpt.posteriors):
        for name, arr in post.layer_arrays():
            p_entries.append((f"seq{i}/{name}", arr))
    p_table, p_blob = _pack(p_entries)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "free_energy": ckpt.free_energy,
        "log_tail": ckpt.log_tail,
        "meta": ckpt.meta,
        "n_sequences": len(ckpt.posteriors),
        "sequence_lengths": [p.length for p in ckpt.posteriors],
        "weights": w_table,
        "posteriors": p_table,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (out / "weights.bin").write_bytes(w_blob)
    (out / "posteriors.bin").write_bytes(p_blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest found in {src}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError("manifest is not valid JSON") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} not supported")
    cfg = NetworkConfig.from_dict(manifest["config"])
    weights = _unpack(manifest["weights"], (src / "weights.bin").read_bytes())
    params = NetworkParams(cfg, np.random.default_rng(0))
    for name, tensor in params.named_tensors():
        if name not in weights:
            raise CheckpointError(f"weight {name} missing from checkpoint")
        if tuple(weights[name].shape) != tensor.data.shape:
            raise CheckpointError(f"weight {name} has shape "
                                  f"{weights[name].shape}, expected {tensor.data.shape}")
        tensor.data = weights[name].copy()
    post_arrays = _unpack(manifest["posteriors"],
                          (src / "posteriors.bin").read_bytes())
    posteriors = []
    for i, length in enumerate(manifest["sequence_lengths"]):
        post = SequencePosterior(cfg, length)
        post.load_layer_arrays(
            {name.split("/", 1)[1]: arr for name, arr in post_arrays.items()
             if name.startswith(f"seq{i}/")})
        posteriors.append(post)
    return Checkpoint(config=cfg, params=params, posteriors=posteriors,
                      free_energy=manifest["free_energy"],
                      log_tail=manifest.get("log_tail", []),
                      meta=manifest.get("meta", {}))


def prior_generate(ckpt: Checkpoint, n_steps: int, seed: int) -> GenerationTrace:
    """Closed-loop generation from the trained prior; never reads a dataset."""
    return generate_prior(ckpt.params, n_steps, np.random.default_rng(seed))
