"""Classifier, transition statistics, and PCA oracles."""

import numpy as np
import pytest

from kinaero.datagen import (CYCLE_STEPS, build_dataset, paper_pfsm,
                             primitive_waveform, sample_pfsm, two_pattern_pfsm)
from kinaero.experiments import (PAPER_TRAINED_EDGES, PAPER_UNTRAINED_EDGES,
                                 classify_cycles, classify_pattern,
                                 mannwhitney_greater, pattern_phase, pca3,
                                 template_rms, trained_edges, transition_stats,
                                 untrained_edges)


def cycle(pattern: str, shift: int = 0) -> np.ndarray:
    return primitive_waveform(pattern, np.arange(shift, shift + CYCLE_STEPS))


class TestClassifier:
    def test_clean_cycle_is_confident(self):
        label, conf = classify_pattern(cycle("A"))
        assert label == "A"
        assert conf > 0.5

    @pytest.mark.parametrize("pattern", ["A", "B", "C", "D"])
    @pytest.mark.parametrize("shift", [0, 5, 13])
    def test_phase_aligned_recognition(self, pattern, shift):
        label, conf = classify_pattern(cycle(pattern, shift))
        assert label == pattern
        assert conf > 0.5

    def test_noisy_cycles_still_classified(self):
        rng = np.random.default_rng(2)
        hits = 0
        for _ in range(200):
            noisy = cycle("A") + rng.normal(0, 0.05, (CYCLE_STEPS, 4))
            label, _ = classify_pattern(noisy)
            hits += label == "A"
        assert hits >= 198  # >= 99%

    def test_blend_of_candidates_has_low_confidence(self):
        blend = 0.5 * (cycle("A") + cycle("B"))
        _, conf = classify_pattern(blend, patterns=("A", "B"))
        assert conf < 0.1

    def test_phase_recovery(self):
        for shift in (0, 3, 11, 19):
            assert pattern_phase(cycle("A", shift), "A") == shift

    def test_template_rms_zero_for_exact(self):
        assert template_rms(cycle("D"), "D") == pytest.approx(0.0, abs=1e-12)

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            classify_pattern(np.zeros((10, 4)))

    def test_classify_cycles_on_clean_data(self):
        ds = build_dataset(paper_pfsm(), n_seqs=1, n_cycles=40, seed=3)
        rows = classify_cycles(ds.sequences[0])
        assert [r["label"] for r in rows] == ds.labels[0]
        assert all(r["learned"] for r in rows)


class TestTransitionStats:
    def test_constant_sequence(self):
        stats = transition_stats(["A"] * 50)
        assert stats == {("A", "A"): 1.0}

    def test_recovers_machine_targets(self):
        labels = sample_pfsm(paper_pfsm(), 20_000, seed=5)
        stats = transition_stats(labels)
        for (src, dst), p in [(("A", "B"), 0.03), (("A", "C"), 0.07),
                              (("B", "D"), 0.10), (("C", "D"), 0.15),
                              (("D", "A"), 0.05)]:
            assert stats[(src, dst)] == pytest.approx(p, abs=0.012), (src, dst)

    def test_needs_two_cycles(self):
        with pytest.raises(ValueError):
            transition_stats(["A"])


class TestPca:
    def test_rank_one_data_explained_by_first_component(self):
        rng = np.random.default_rng(7)
        direction = rng.normal(size=6)
        data = np.outer(rng.normal(size=50), direction)
        _, explained = pca3(data)
        assert explained[0] == pytest.approx(1.0, abs=1e-10)

    def test_rotation_invariant_spectrum(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(80, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.1])
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        _, e1 = pca3(data)
        _, e2 = pca3(data @ q)
        np.testing.assert_allclose(e1, e2, atol=1e-10)

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(9)
        data = rng.normal(size=(100, 10))
        centered = data - data.mean(axis=0)
        cov = centered.T @ centered / 99
        eigvals, eigvecs = np.linalg.eigh(cov)
        proj = centered @ eigvecs
        np.testing.assert_allclose(proj @ eigvecs.T, centered, atol=1e-8)

    def test_projection_consistent_with_variance_ordering(self):
        rng = np.random.default_rng(10)
        data = rng.normal(size=(200, 6)) * np.array([5, 3, 2, 1, 0.5, 0.2])
        proj, explained = pca3(data)
        variances = proj.var(axis=0)
        assert variances[0] >= variances[1] >= variances[2]
        assert np.all(explained[:-1] >= explained[1:])

    def test_needs_four_columns(self):
        with pytest.raises(ValueError):
            pca3(np.zeros((10, 3)))


class TestEdgeMaps:
    def test_paper_machine_trained_edges(self):
        edges = trained_edges(paper_pfsm())
        assert edges == {"A": ["B", "C"], "B": ["D"], "C": ["D"], "D": ["A"]}
        assert edges == PAPER_TRAINED_EDGES

    def test_paper_untrained_class_is_the_five_pairs(self):
        assert PAPER_UNTRAINED_EDGES == {"A": ["D"], "D": ["B", "C"],
                                         "B": ["A"], "C": ["A"]}

    def test_two_pattern_machine(self):
        spec = two_pattern_pfsm()
        assert trained_edges(spec) == {"A": ["B"], "B": ["A"]}
        assert untrained_edges(spec) == {"A": ["C", "D"], "B": ["C", "D"]}


def test_mannwhitney_detects_shift():
    rng = np.random.default_rng(11)
    x = rng.normal(1.0, 1.0, 40)
    y = rng.normal(0.0, 1.0, 40)
    assert mannwhitney_greater(x, y) < 0.01
    assert mannwhitney_greater(y, x) > 0.5
