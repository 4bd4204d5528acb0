"""Training corpora: four cyclic 4-joint primitives chained by a stochastic
finite state machine.

Joint values are normalized: raw joint angles in degrees map affinely to
[-1, 1] with documented limits of +/-90 degrees per joint (shoulder and elbow
of each arm; columns j0, j1 = left arm, j2, j3 = right arm). Every primitive
cycle is 20 steps long, starts and ends at the zero posture, and stays within
0.8 of the normalized range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

CYCLE_STEPS = 20
NUM_JOINTS = 4
JOINT_LIMIT_DEG = 90.0
AMPLITUDE = 0.8

PATTERN_IDS = ("A", "B", "C", "D")


def primitive_waveform(pattern: str, steps: Array | int) -> Array:
    """Normalized joint values of one primitive at the given cycle steps.

    A: all joints in phase; B: right arm counter-phase to the left;
    C: half amplitude in phase; D: double frequency. All share the 20-step
    cycle and the zero posture at step 0.
    """
    s = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    base = np.sin(2.0 * np.pi * s / CYCLE_STEPS)
    if pattern == "A":
        joints = AMPLITUDE * np.stack([base, base, base, base], axis=1)
    elif pattern == "B":
        joints = AMPLITUDE * np.stack([base, base, -base, -base], axis=1)
    elif pattern == "C":
        joints = 0.5 * AMPLITUDE * np.stack([base, base, base, base], axis=1)
    elif pattern == "D":
        fast = np.sin(4.0 * np.pi * s / CYCLE_STEPS)
        joints = AMPLITUDE * np.stack([fast, fast, fast, fast], axis=1)
    else:
        raise ValueError(f"unknown pattern id {pattern!r}")
    if np.isscalar(steps) or np.asarray(steps).ndim == 0:
        return joints[0]
    return joints


def synth_primitive(pattern: str, n_cycles: int) -> Array:
    """(n_cycles * 20, 4) trajectory repeating one primitive."""
    if n_cycles < 1:
        raise ValueError("need at least one cycle")
    return primitive_waveform(pattern, np.arange(n_cycles * CYCLE_STEPS))


@dataclass(frozen=True)
class PfsmSpec:
    """Row-stochastic transition matrix over states emitting patterns."""

    patterns: tuple[str, ...]
    matrix: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        n = len(self.patterns)
        if len(self.matrix) != n or any(len(row) != n for row in self.matrix):
            raise ValueError("transition matrix must be square over the states")
        for row in self.matrix:
            if abs(sum(row) - 1.0) > 1e-9 or any(p < 0 for p in row):
                raise ValueError("transition rows must be stochastic")

    @property
    def n_states(self) -> int:
        return len(self.patterns)

    def edge_probability(self, src: str, dst: str) -> float:
        i = self.patterns.index(src)
        j = self.patterns.index(dst)
        return self.matrix[i][j]

    def to_dict(self) -> dict:
        return {"patterns": list(self.patterns),
                "matrix": [list(row) for row in self.matrix]}

    @classmethod
    def from_dict(cls, d: dict) -> "PfsmSpec":
        return cls(patterns=tuple(d["patterns"]),
                   matrix=tuple(tuple(row) for row in d["matrix"]))


def paper_pfsm() -> PfsmSpec:
    """The four-state machine: A repeats with 0.90, branches A->B 3% and
    A->C 7%; B->D 10%; C->D 15%; D->A 5%; remaining mass stays put."""
    return PfsmSpec(
        patterns=("A", "B", "C", "D"),
        matrix=(
            (0.90, 0.03, 0.07, 0.00),
            (0.00, 0.90, 0.00, 0.10),
            (0.00, 0.00, 0.85, 0.15),
            (0.05, 0.00, 0.00, 0.95),
        ))


def two_pattern_pfsm(p_switch: float = 0.1) -> PfsmSpec:
    """Desk-scale machine over A and B with symmetric switching."""
    return PfsmSpec(patterns=("A", "B"),
                    matrix=((1.0 - p_switch, p_switch),
                            (p_switch, 1.0 - p_switch)))


TRAINED_TRANSITIONS = (("A", "B"), ("A", "C"), ("B", "D"), ("D", "A"), ("C", "D"))
UNTRAINED_TRANSITIONS = (("A", "D"), ("D", "B"), ("D", "C"), ("B", "A"), ("C", "A"))


def sample_pfsm(spec: PfsmSpec, n_cycles: int, seed: int) -> list[str]:
    """Markov-chain sample of per-cycle pattern labels, starting at state 0."""
    rng = np.random.default_rng(seed)
    rows = [np.asarray(row) for row in spec.matrix]
    state = 0
    labels = []
    for _ in range(n_cycles):
        labels.append(spec.patterns[state])
        state = int(rng.choice(spec.n_states, p=rows[state]))
    return labels


@dataclass
class Dataset:
    sequences: list[Array]
    labels: list[list[str]]
    spec: PfsmSpec
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for seq, lab in zip(self.sequences, self.labels):
            if seq.shape[0] != len(lab) * CYCLE_STEPS:
                raise ValueError("sequence length must be cycles * 20")

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)


def build_dataset(spec: PfsmSpec, n_seqs: int, n_cycles: int, seed: int,
                  out_dir: str | Path | None = None) -> Dataset:
    """Concatenate primitive cycles along sampled state paths; optionally
    write the directory layout (meta.json plus one CSV per sequence)."""
    if n_seqs < 1:
        raise ValueError("need at least one sequence")
    sequences, labels = [], []
    for i in range(n_seqs):
        labs = sample_pfsm(spec, n_cycles, seed + i)
        chunks = [primitive_waveform(p, np.arange(CYCLE_STEPS)) for p in labs]
        sequences.append(np.concatenate(chunks, axis=0))
        labels.append(labs)
    ds = Dataset(sequences=sequences, labels=labels, spec=spec, seed=seed,
                 meta={"joint_limit_deg": JOINT_LIMIT_DEG,
                       "cycle_steps": CYCLE_STEPS})
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "n_sequences": ds.n_sequences,
        "n_cycles": len(ds.labels[0]),
        "joint_limit_deg": JOINT_LIMIT_DEG,
        "cycle_steps": CYCLE_STEPS,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i, (seq, labs) in enumerate(zip(ds.sequences, ds.labels)):
        lines = ["t,j0,j1,j2,j3,state"]
        for t in range(seq.shape[0]):
            state = labs[t // CYCLE_STEPS]
            vals = ",".join(f"{v:.6f}" for v in seq[t])
            lines.append(f"{t},{vals},{state}")
        (out / f"seq{i:03d}.csv").write_text("\n".join(lines) + "\n")


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    spec = PfsmSpec.from_dict(meta["spec"])
    sequences, labels = [], []
    for i in range(meta["n_sequences"]):
        path = src / f"seq{i:03d}.csv"
        rows = path.read_text().strip().split("\n")[1:]
        seq = np.zeros((len(rows), NUM_JOINTS))
        labs = []
        for t, row in enumerate(rows):
            parts = row.split(",")
            seq[t] = [float(v) for v in parts[1:5]]
            if t % CYCLE_STEPS == 0:
                labs.append(parts[5])
        sequences.append(seq)
        labels.append(labs)
    return Dataset(sequences=sequences, labels=labels, spec=spec,
                   seed=meta["seed"], meta=meta)


def normalized_to_rad(values: Array) -> Array:
    """Map normalized joints to radians via the documented +/-90 degree limit."""
    return np.asarray(values) * np.deg2rad(JOINT_LIMIT_DEG)


def rad_to_normalized(values: Array) -> Array:
    return np.asarray(values) / np.deg2rad(JOINT_LIMIT_DEG)
