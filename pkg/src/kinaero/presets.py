"""Canonical configurations: the full-size network and the desk-scale setup.

The desk-scale recipe is the small two-pattern configuration used by the
regression gate and the quick-start docs: it trains in minutes on a laptop
while exhibiting every qualitative behavior of the full configuration.
The dataset seed is fixed to a draw whose empirical switch rates sit close
to the nominal machine (tiny corpora scatter widely otherwise).
"""

from __future__ import annotations

import numpy as np

from .datagen import Dataset, PfsmSpec, build_dataset, paper_pfsm, two_pattern_pfsm
from .model import LayerConfig, NetworkConfig
from .training import TrainConfig

DESK_DATA_SEED = 130
DESK_SWITCH_P = 0.1


def paper_network() -> NetworkConfig:
    """Full-size architecture: 60d/6z tau 3 bottom, 30d/3z tau 9 top."""
    return NetworkConfig(layers=(LayerConfig(60, 6, 3.0), LayerConfig(30, 3, 9.0)),
                         output_dim=4, n_soft=10, w_train=0.01)


def desk_network() -> NetworkConfig:
    return NetworkConfig(layers=(LayerConfig(20, 2, 3.0), LayerConfig(10, 1, 9.0)),
                         output_dim=4, n_soft=10, w_train=0.01)


def desk_pfsm() -> PfsmSpec:
    return two_pattern_pfsm(DESK_SWITCH_P)


def desk_dataset(seed: int = DESK_DATA_SEED) -> Dataset:
    """Two sequences of 20 cycles (400 steps) over the A/B machine."""
    return build_dataset(desk_pfsm(), n_seqs=2, n_cycles=20, seed=seed)


def desk_train_config(seed: int = 1, epochs: int = 3000) -> TrainConfig:
    return TrainConfig(epochs=epochs, lr=5e-3, lr_a=0.05, grad_clip=1.0,
                       seed=seed, log_every=60)


def paper_dataset(seed: int = 7) -> Dataset:
    """Ten 200-cycle sequences (4000 steps) over the four-pattern machine."""
    return build_dataset(paper_pfsm(), n_seqs=10, n_cycles=200, seed=seed)


def paper_train_config(seed: int = 1, epochs: int = 50_000) -> TrainConfig:
    return TrainConfig(epochs=epochs, lr=5e-3, lr_a=0.05, grad_clip=1.0,
                       seed=seed, log_every=500, trunc_len=400)
