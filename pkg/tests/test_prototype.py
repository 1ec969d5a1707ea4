import itertools

import numpy as np
import pytest

from opencon.core import EmptyScores, Rng, l2_normalize
from opencon.prototype import (
    DetectionMetrics,
    GateResult,
    PrototypeStore,
    UnknownVariant,
    calibrate_threshold,
    detection_metrics,
    init_prototypes,
    known_max_scores,
    ood_gate,
    ood_scores,
    pseudo_label,
    pseudo_labels,
    update_prototypes,
    warm_start_known,
)

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


def identity_store(n_known=1):
    return PrototypeStore(np.stack([E1, E2]), np.arange(n_known),
                          np.arange(n_known, 2))


def unit_with_first_coord(s):
    """Unit 2-vector whose dot with e1 equals s."""
    return np.array([s, np.sqrt(1 - s * s)])


class TestInit:
    def test_unit_rows(self):
        store = init_prototypes(7, 5, Rng(0, "init"), n_known=3)
        np.testing.assert_allclose(np.linalg.norm(store.matrix, axis=1), 1.0,
                                   atol=1e-9)
        assert store.known_ids.tolist() == [0, 1, 2]
        assert store.novel_ids.tolist() == [3, 4, 5, 6]

    def test_seeds_differ(self):
        a = init_prototypes(4, 3, Rng(1, "init"))
        b = init_prototypes(4, 3, Rng(2, "init"))
        assert not np.array_equal(a.matrix, b.matrix)

    def test_no_duplicates(self):
        store = init_prototypes(4, 2, Rng(3, "init"))
        for i, j in itertools.combinations(range(4), 2):
            assert not np.allclose(store.matrix[i], store.matrix[j])

    def test_partition_validated(self):
        with pytest.raises(Exception):
            PrototypeStore(np.stack([E1, E2]), np.array([0]), np.array([0, 1]))


class TestPseudoLabel:
    def test_argmax(self):
        store = identity_store()
        assert pseudo_label(unit_with_first_coord(0.8), store) == 0

    def test_scale_invariance(self):
        store = identity_store()
        z = unit_with_first_coord(0.8)
        before = pseudo_label(z, store)
        scaled = PrototypeStore(store.matrix.copy(), store.known_ids,
                                store.novel_ids)
        # argmax of similarities is unchanged by any positive rescaling of the
        # score vector, checked here through a monotone reparametrization
        sims = store.matrix @ z
        assert np.argmax(sims) == np.argmax(5.0 * sims) == before

    def test_restricted_to_novel(self):
        store = identity_store(n_known=1)
        z = unit_with_first_coord(0.8)
        assert pseudo_label(z, store, "novel_only") == 1

    def test_tie_breaks_low_id(self):
        matrix = np.stack([E1, E1, E2])
        store = PrototypeStore(matrix / np.linalg.norm(matrix, axis=1, keepdims=True),
                               np.array([0]), np.array([1, 2]))
        assert pseudo_label(E1, store) == 0

    def test_batched(self):
        store = identity_store()
        z = np.stack([unit_with_first_coord(0.9), unit_with_first_coord(0.1)])
        np.testing.assert_array_equal(pseudo_labels(z, store), [0, 1])


class TestCalibrate:
    def test_nearest_rank(self):
        store = identity_store()
        views = np.stack([unit_with_first_coord(s) for s in (0.2, 0.4, 0.6, 0.8)])
        lam = calibrate_threshold(views, store, 50)
        assert lam == pytest.approx(0.6, abs=1e-12)
        scores = known_max_scores(views, store)
        assert np.mean(scores >= lam) == 0.5

    def test_p100_is_min(self):
        store = identity_store()
        views = np.stack([unit_with_first_coord(s) for s in (0.2, 0.4, 0.6, 0.8)])
        assert calibrate_threshold(views, store, 100) == pytest.approx(0.2, abs=1e-12)

    def test_p0_sentinel_gates_everything(self):
        store = identity_store()
        views = np.stack([unit_with_first_coord(0.5)])
        lam = calibrate_threshold(views, store, 0)
        assert lam == np.inf
        gate = ood_gate(np.stack([unit_with_first_coord(s) for s in (0.1, 0.99)]),
                        store, lam)
        assert gate.novel_view_ids.tolist() == [0, 1]
        assert gate.rejected_view_ids.size == 0

    def test_empty_raises(self):
        with pytest.raises(EmptyScores):
            calibrate_threshold(np.zeros((0, 2)), identity_store(), 50)


class TestGate:
    def test_threshold_comparison(self):
        store = identity_store()
        views = np.stack([unit_with_first_coord(0.9), unit_with_first_coord(0.1)])
        gate = ood_gate(views, store, 0.5)
        assert gate.novel_view_ids.tolist() == [1]
        assert gate.rejected_view_ids.tolist() == [0]

    def test_exact_threshold_rejected(self):
        store = identity_store()
        views = np.stack([unit_with_first_coord(0.5)])
        gate = ood_gate(views, store, 0.5)
        assert gate.novel_view_ids.size == 0

    def test_partition(self):
        rng = Rng(4, "data")
        store = init_prototypes(5, 4, Rng(5, "init"), n_known=2)
        views = l2_normalize(rng.normal(size=(20, 4)))
        for lam in (-np.inf, 0.0, 0.5, np.inf):
            gate = ood_gate(views, store, lam)
            merged = np.sort(np.concatenate([gate.novel_view_ids,
                                             gate.rejected_view_ids]))
            np.testing.assert_array_equal(merged, np.arange(20))

    def test_monotone_in_p(self):
        rng = Rng(6, "data")
        store = init_prototypes(4, 4, Rng(7, "init"), n_known=2)
        labeled = l2_normalize(rng.normal(size=(50, 4)))
        views = l2_normalize(rng.normal(size=(40, 4)))
        sizes = []
        for p in (0, 10, 30, 50, 70, 90):
            lam = calibrate_threshold(labeled, store, p)
            sizes.append(ood_gate(views, store, lam).novel_view_ids.size)
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


class TestUpdate:
    def test_hand_arithmetic(self):
        store = identity_store(n_known=1)
        update_prototypes(store, np.stack([E2]), np.array([0]),
                          np.zeros((0, 2)), gamma=0.9)
        np.testing.assert_allclose(store.matrix[0], [0.99388, 0.11043], atol=1e-5)

    def test_fixed_point(self):
        store = identity_store(n_known=1)
        update_prototypes(store, np.stack([E1]), np.array([0]),
                          np.zeros((0, 2)), gamma=0.9)
        np.testing.assert_allclose(store.matrix[0], E1, atol=1e-12)

    def test_unit_after_many_updates(self):
        rng = Rng(8, "data")
        store = init_prototypes(3, 4, Rng(9, "init"), n_known=2)
        for _ in range(50):
            z = l2_normalize(rng.normal(size=(6, 4)))
            y = rng.integers(0, 2, size=6)
            nz = l2_normalize(rng.normal(size=(4, 4)))
            update_prototypes(store, z, y, nz, gamma=0.9)
        np.testing.assert_allclose(np.linalg.norm(store.matrix, axis=1), 1.0,
                                   atol=1e-9)

    def test_geometric_convergence(self):
        store = identity_store(n_known=1)
        target = l2_normalize(np.array([1.0, 1.0]))
        angles = []
        for _ in range(25):
            update_prototypes(store, target[None, :], np.array([0]),
                              np.zeros((0, 2)), gamma=0.9)
            angles.append(np.arccos(np.clip(store.matrix[0] @ target, -1, 1)))
        start = np.pi / 4
        for k, angle in enumerate(angles, start=1):
            assert angle <= 1.5 * start * 0.9 ** k

    def test_known_novel_separation(self):
        store = init_prototypes(4, 3, Rng(10, "init"), n_known=2)
        known_before = store.matrix[:2].copy()
        novel_before = store.matrix[2:].copy()
        nz = l2_normalize(Rng(11, "data").normal(size=(5, 3)))
        update_prototypes(store, np.zeros((0, 3)), np.zeros(0, np.int64), nz, 0.9)
        np.testing.assert_array_equal(store.matrix[:2], known_before)
        assert not np.array_equal(store.matrix[2:], novel_before)

        store2 = init_prototypes(4, 3, Rng(10, "init"), n_known=2)
        novel_before2 = store2.matrix[2:].copy()
        z = l2_normalize(Rng(12, "data").normal(size=(5, 3)))
        y = np.array([0, 1, 0, 1, 0])
        update_prototypes(store2, z, y, np.zeros((0, 3)), 0.9)
        np.testing.assert_array_equal(store2.matrix[2:], novel_before2)

    def test_counts(self):
        store = identity_store(n_known=1)
        update_prototypes(store, np.stack([E1, E1]), np.array([0, 0]),
                          np.stack([E2]), gamma=0.9)
        assert store.assignment_counts[0] == 2
        assert store.assignment_counts[1] == 1
        store.reset_counts()
        assert store.assignment_counts.sum() == 0

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            update_prototypes(identity_store(), np.zeros((0, 2)),
                              np.zeros(0), np.zeros((0, 2)), gamma=1.0)

    def test_warm_start(self):
        store = init_prototypes(3, 2, Rng(13, "init"), n_known=2)
        z = np.stack([E1, E1, E2, E2])
        y = np.array([0, 0, 1, 1])
        novel_before = store.matrix[2].copy()
        warm_start_known(store, z, y)
        np.testing.assert_allclose(store.matrix[0], E1, atol=1e-12)
        np.testing.assert_allclose(store.matrix[1], E2, atol=1e-12)
        np.testing.assert_array_equal(store.matrix[2], novel_before)


class TestOodScores:
    def test_hand_values(self):
        store = identity_store(n_known=2)
        assert ood_scores(E1, store, "max_cosine") == pytest.approx(1.0)
        assert ood_scores(E1, store, "msp", tau=1.0) == pytest.approx(
            np.e / (np.e + 1), abs=1e-12)
        assert ood_scores(E1, store, "energy", tau=1.0) == pytest.approx(
            np.log(np.e + 1), abs=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariant):
            ood_scores(E1, identity_store(), "mahalanobis")

    def test_single_prototype_same_ranking(self):
        store = PrototypeStore(np.stack([E1, E2]), np.array([0]), np.array([1]))
        rng = Rng(14, "data")
        z = l2_normalize(rng.normal(size=(30, 2)))
        base = ood_scores(z, store, "max_cosine")
        for variant in ("msp", "energy"):
            other = ood_scores(z, store, variant, tau=0.7)
            if variant == "msp":
                # msp of a single known prototype is constant 1; skip ordering
                np.testing.assert_allclose(other, 1.0)
            else:
                assert np.array_equal(np.argsort(base), np.argsort(other))


class TestDetectionMetrics:
    def test_perfect_separation(self):
        out = detection_metrics([0.9, 0.8, 0.7], [0.2, 0.1])
        assert out.auroc == 1.0
        assert out.fpr95 == 0.0

    def test_identical_distributions(self):
        out = detection_metrics([0.5, 0.5], [0.5, 0.5])
        assert out.auroc == pytest.approx(0.5)

    def test_hand_cases(self):
        assert detection_metrics([0.9, 0.8, 0.7], [0.6, 0.5]).auroc == 1.0
        assert detection_metrics([0.9, 0.4], [0.6]).auroc == pytest.approx(0.5)

    def test_brute_force_pairs(self):
        rng = Rng(15, "theory")
        for _ in range(50):
            ids = rng.normal(size=12)
            oods = rng.normal(size=9)
            auroc = detection_metrics(ids, oods).auroc
            wins = sum((i > o) + 0.5 * (i == o) for i in ids for o in oods)
            assert auroc == pytest.approx(wins / (12 * 9), abs=1e-12)

    def test_fpr95_counts_ood_above_threshold(self):
        ids = np.linspace(0, 1, 100)
        oods = np.array([0.5] * 10)
        out = detection_metrics(ids, oods)
        # threshold sits at the 5th percentile of ID scores (~0.05)
        assert out.fpr95 == 1.0

    def test_empty_raises(self):
        with pytest.raises(EmptyScores):
            detection_metrics([], [0.1])
        with pytest.raises(EmptyScores):
            detection_metrics([0.1], [])
