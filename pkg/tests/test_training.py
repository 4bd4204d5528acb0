"""Training loop and checkpoint persistence."""

import json
from pathlib import Path

import numpy as np
import pytest

from kinaero.datagen import build_dataset, two_pattern_pfsm
from kinaero.model import LayerConfig, NetworkConfig, NetworkParams
from kinaero.training import (Checkpoint, CheckpointError, TrainConfig,
                              evaluate_free_energy, encode_targets,
                              load_checkpoint, prior_generate, save_checkpoint,
                              train)


def tiny_setup(n_cycles=4):
    ds = build_dataset(two_pattern_pfsm(0.1), n_seqs=2, n_cycles=n_cycles, seed=11)
    cfg = NetworkConfig(layers=(LayerConfig(8, 2, 2.0), LayerConfig(4, 1, 4.0)),
                        output_dim=4, n_soft=10, w_train=0.01)
    return ds, cfg


class TestTrain:
    def test_zero_epochs_keeps_initialization(self):
        ds, cfg = tiny_setup()
        init = NetworkParams(cfg, np.random.default_rng(5))
        reference = [t.data.copy() for _, t in init.named_tensors()]
        result = train(ds, cfg, TrainConfig(epochs=0, seed=5))
        # quantization to float32 is the only permitted change
        for (name, t), ref in zip(result.checkpoint.params.named_tensors(),
                                  reference):
            np.testing.assert_allclose(t.data, ref.astype(np.float32), atol=0)

    def test_loss_decreases_on_short_run(self):
        ds, cfg = tiny_setup()
        result = train(ds, cfg, TrainConfig(epochs=120, lr=5e-3, lr_a=0.02,
                                            seed=2, log_every=119))
        assert result.log[-1]["F"] < result.log[0]["F"]
        assert result.log[-1]["e_mean"] < result.log[0]["e_mean"]
        assert not result.aborted

    def test_deterministic(self):
        ds, cfg = tiny_setup(n_cycles=2)
        r1 = train(ds, cfg, TrainConfig(epochs=15, seed=3))
        r2 = train(ds, cfg, TrainConfig(epochs=15, seed=3))
        for (n1, t1), (n2, t2) in zip(r1.checkpoint.params.named_tensors(),
                                      r2.checkpoint.params.named_tensors()):
            np.testing.assert_array_equal(t1.data, t2.data)
        assert r1.log[-1]["F"] == r2.log[-1]["F"]

    def test_truncated_backprop_preserves_loss_values(self):
        ds, cfg = tiny_setup(n_cycles=4)
        full = train(ds, cfg, TrainConfig(epochs=1, seed=9, log_every=1))
        trunc = train(ds, cfg, TrainConfig(epochs=1, seed=9, log_every=1,
                                           trunc_len=30))
        assert full.log[0]["F"] == pytest.approx(trunc.log[0]["F"], rel=1e-12)

    def test_sequence_subset(self):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=2, seed=1, sequences=[1]))
        assert len(result.checkpoint.posteriors) == 1
        assert result.checkpoint.meta["sequences"] == [1]


class TestCheckpointIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=3, seed=7))
        save_checkpoint(result.checkpoint, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        for (n1, t1), (n2, t2) in zip(result.checkpoint.params.named_tensors(),
                                      loaded.params.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)
        for p1, p2 in zip(result.checkpoint.posteriors, loaded.posteriors):
            for (n1, a1), (n2, a2) in zip(p1.layer_arrays(), p2.layer_arrays()):
                np.testing.assert_array_equal(a1, a2)

    def test_free_energy_reproduced_after_load(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=5, seed=7))
        save_checkpoint(result.checkpoint, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        targets = encode_targets(ds, cfg)
        recomputed = evaluate_free_energy(loaded.params, loaded.posteriors,
                                          targets)
        assert recomputed == pytest.approx(loaded.free_energy, abs=1e-6)

    def test_manifest_accounts_for_every_byte(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=1, seed=7))
        save_checkpoint(result.checkpoint, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        for table, binfile in (("weights", "weights.bin"),
                               ("posteriors", "posteriors.bin")):
            expected = sum(4 * int(np.prod(e["shape"])) for e in manifest[table])
            assert expected == (tmp_path / "ck" / binfile).stat().st_size

    def test_truncated_weights_rejected(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=1, seed=7))
        save_checkpoint(result.checkpoint, tmp_path / "ck")
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        (tmp_path / "ck" / "weights.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_version_mismatch_rejected(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        result = train(ds, cfg, TrainConfig(epochs=1, seed=7))
        save_checkpoint(result.checkpoint, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        manifest["version"] = 99
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)


class TestPriorGenerate:
    def test_deterministic_given_seed(self, tmp_path):
        ds, cfg = tiny_setup(n_cycles=2)
        ckpt = train(ds, cfg, TrainConfig(epochs=2, seed=4)).checkpoint
        t1 = prior_generate(ckpt, 50, seed=8)
        t2 = prior_generate(ckpt, 50, seed=8)
        np.testing.assert_array_equal(t1.joints, t2.joints)
        t3 = prior_generate(ckpt, 50, seed=9)
        assert not np.array_equal(t1.joints, t3.joints)

    def test_output_stays_in_range(self):
        ds, cfg = tiny_setup(n_cycles=2)
        ckpt = train(ds, cfg, TrainConfig(epochs=0, seed=4)).checkpoint
        trace = prior_generate(ckpt, 200, seed=1)
        lo, hi = cfg.value_range
        pad = 0.5  # decoded expectations can exceed the range by the pad
        assert np.all(trace.joints >= lo - pad)
        assert np.all(trace.joints <= hi + pad)
