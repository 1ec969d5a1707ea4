"""Class prototypes on the unit sphere: pseudo-labeling, the percentile-
calibrated novelty gate, moving-average updates, and detection scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from opencon.core import (
    EmptyScores,
    OpenConError,
    Rng,
    as_f64,
    l2_normalize,
    percentile_threshold,
    sample_uniform_sphere,
    stable_sum,
)


class UnknownVariant(OpenConError):
    """Requested detection score variant does not exist."""


RESTRICT_ALL = "all"
RESTRICT_NOVEL = "novel_only"

SCORE_VARIANTS = ("max_cosine", "msp", "energy")


@dataclass
class PrototypeStore:
    """One unit prototype row per class. Rows in `known_ids` are index-aligned
    with ground-truth label ids; rows in `novel_ids` are anonymous slots that
    evaluation matches to classes by optimal assignment."""

    matrix: np.ndarray             # (C, d), unit rows
    known_ids: np.ndarray          # sorted row indices
    novel_ids: np.ndarray
    assignment_counts: np.ndarray = field(default=None)  # per-epoch tallies

    def __post_init__(self):
        self.matrix = as_f64(self.matrix)
        self.known_ids = np.asarray(self.known_ids, np.int64)
        self.novel_ids = np.asarray(self.novel_ids, np.int64)
        if self.assignment_counts is None:
            self.assignment_counts = np.zeros(self.n_classes, np.int64)
        merged = np.sort(np.concatenate([self.known_ids, self.novel_ids]))
        if not np.array_equal(merged, np.arange(self.n_classes)):
            raise OpenConError("known_ids and novel_ids must partition the rows")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise OpenConError("prototype rows must be unit norm")

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def known_matrix(self) -> np.ndarray:
        return self.matrix[self.known_ids]

    def reset_counts(self) -> None:
        self.assignment_counts[:] = 0

    def copy(self) -> "PrototypeStore":
        return PrototypeStore(self.matrix.copy(), self.known_ids.copy(),
                              self.novel_ids.copy(), self.assignment_counts.copy())


@dataclass(frozen=True)
class GateResult:
    """Partition of the unlabeled views into gated-novel and predicted-known."""

    novel_view_ids: np.ndarray
    rejected_view_ids: np.ndarray
    threshold: float


def init_prototypes(n_classes: int, d: int, rng: Rng, n_known: int = 0) -> PrototypeStore:
    """Random unit prototypes; the first `n_known` rows are the known slots."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if not 0 <= n_known <= n_classes:
        raise ValueError("n_known out of range")
    matrix = sample_uniform_sphere(d, n_classes, rng)
    return PrototypeStore(matrix, np.arange(n_known), np.arange(n_known, n_classes))


def _rows_for(store: PrototypeStore, restrict: str) -> np.ndarray:
    if restrict == RESTRICT_ALL:
        return np.arange(store.n_classes)
    if restrict == RESTRICT_NOVEL:
        return store.novel_ids
    raise ValueError(f"restrict must be 'all' or 'novel_only', got {restrict!r}")


def pseudo_labels(z: np.ndarray, store: PrototypeStore,
                  restrict: str = RESTRICT_ALL) -> np.ndarray:
    """Predicted class per row of `z`: argmax cosine over the selected
    prototype rows, ties broken toward the lowest class id."""
    rows = _rows_for(store, restrict)
    if rows.size == 0:
        raise OpenConError("no prototype rows to predict against")
    sims = as_f64(z) @ store.matrix[rows].T
    return rows[np.argmax(sims, axis=1)]


def pseudo_label(z: np.ndarray, store: PrototypeStore,
                 restrict: str = RESTRICT_ALL) -> int:
    return int(pseudo_labels(as_f64(z)[None, :], store, restrict)[0])


def known_max_scores(z: np.ndarray, store: PrototypeStore) -> np.ndarray:
    """max over known prototypes of mu . z, per row."""
    return np.max(as_f64(z) @ store.known_matrix().T, axis=1)


def calibrate_threshold(labeled_z: np.ndarray, store: PrototypeStore,
                        p: float) -> float:
    """Novelty threshold from the labeled views' known-prototype scores.

    p = 0 disables the gate entirely: the sentinel +inf sends every unlabeled
    view through as novel (the gate keeps views scoring strictly below the
    threshold).

    Raises:
        EmptyScores: if there are no labeled views.
    """
    labeled_z = as_f64(labeled_z)
    if labeled_z.shape[0] == 0:
        raise EmptyScores("cannot calibrate a threshold without labeled views")
    if p == 0:
        return np.inf
    return percentile_threshold(known_max_scores(labeled_z, store), p)


def ood_gate(z_u: np.ndarray, store: PrototypeStore, threshold: float) -> GateResult:
    """Mark unlabeled views as novel when their best known-prototype cosine
    falls strictly below the threshold."""
    z_u = as_f64(z_u)
    if z_u.shape[0] == 0:
        empty = np.zeros(0, np.int64)
        return GateResult(empty, empty.copy(), threshold)
    scores = known_max_scores(z_u, store)
    novel = scores < threshold
    return GateResult(
        np.flatnonzero(novel).astype(np.int64),
        np.flatnonzero(~novel).astype(np.int64),
        float(threshold),
    )


def _ema_update(store: PrototypeStore, c: int, z: np.ndarray, gamma: float) -> None:
    store.matrix[c] = l2_normalize(gamma * store.matrix[c] + (1.0 - gamma) * z)
    store.assignment_counts[c] += 1


def update_prototypes(
    store: PrototypeStore,
    labeled_z: np.ndarray,
    labeled_y: np.ndarray,
    novel_z: np.ndarray,
    gamma: float,
) -> PrototypeStore:
    """Moving-average prototype update, mu_c <- normalize(gamma mu_c + (1-gamma) z).

    Labeled views update their ground-truth row; gated novel views update the
    best-matching novel row, re-evaluated against the store as it evolves.
    Streaming order is labeled views first, then novel views, each in
    ascending view index; the update is order-sensitive by construction.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    labeled_z = as_f64(labeled_z)
    labeled_y = np.asarray(labeled_y, np.int64)
    for i in range(labeled_z.shape[0]):
        _ema_update(store, int(labeled_y[i]), labeled_z[i], gamma)
    novel_z = as_f64(novel_z)
    for i in range(novel_z.shape[0]):
        c = pseudo_label(novel_z[i], store, RESTRICT_NOVEL)
        _ema_update(store, c, novel_z[i], gamma)
    return store


def warm_start_known(store: PrototypeStore, labeled_z: np.ndarray,
                     labeled_y: np.ndarray) -> PrototypeStore:
    """Reset each known row to the normalized mean of its labeled embeddings
    (rows whose mean collapses keep their current value)."""
    labeled_z = as_f64(labeled_z)
    labeled_y = np.asarray(labeled_y, np.int64)
    for c in store.known_ids:
        rows = labeled_z[labeled_y == c]
        if rows.shape[0] == 0:
            continue
        mean = rows.mean(axis=0)
        if np.linalg.norm(mean) <= 1e-9:
            continue
        store.matrix[c] = l2_normalize(mean)
    return store


def ood_scores(z: np.ndarray, store: PrototypeStore, variant: str = "max_cosine",
               tau: float = 1.0) -> np.ndarray:
    """Per-row in-distribution score against the known prototypes; higher
    means more in-distribution for every variant.

    max_cosine: best known cosine; msp: max softmax probability of the known
    logits at temperature tau; energy: tau * logsumexp of the known logits.

    Raises:
        UnknownVariant: for variants other than max_cosine | msp | energy.
    """
    z2 = as_f64(z)
    single = z2.ndim == 1
    if single:
        z2 = z2[None, :]
    logits = z2 @ store.known_matrix().T
    if variant == "max_cosine":
        out = np.max(logits, axis=1)
    elif variant == "msp":
        shifted = logits / tau
        shifted -= shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = np.max(e / e.sum(axis=1, keepdims=True), axis=1)
    elif variant == "energy":
        shifted = logits / tau
        m = shifted.max(axis=1, keepdims=True)
        out = tau * (m[:, 0] + np.log(np.sum(np.exp(shifted - m), axis=1)))
    else:
        raise UnknownVariant(f"variant {variant!r} not in {SCORE_VARIANTS}")
    return out[0] if single else out


@dataclass(frozen=True)
class DetectionMetrics:
    auroc: float
    fpr95: float


def detection_metrics(id_scores: np.ndarray, ood_scores_: np.ndarray) -> DetectionMetrics:
    """AUROC (rank statistic, ties counted half) and the false-positive rate
    at the smallest observed threshold that keeps true-positive rate >= 95%.

    Scores follow the higher-is-in-distribution convention.

    Raises:
        EmptyScores: if either score set is empty.
    """
    id_scores = as_f64(id_scores).ravel()
    ood = as_f64(ood_scores_).ravel()
    if id_scores.size == 0 or ood.size == 0:
        raise EmptyScores("detection metrics need both ID and OOD scores")
    combined = np.concatenate([id_scores, ood])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    ranks[order] = np.arange(1, combined.size + 1)
    # midranks for ties
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_id, n_ood = id_scores.size, ood.size
    u = stable_sum(ranks[:n_id]) - n_id * (n_id + 1) / 2.0
    auroc = u / (n_id * n_ood)

    k = n_id - int(np.ceil(0.95 * n_id))
    threshold = np.sort(id_scores)[k]
    fpr95 = float(np.mean(ood >= threshold))
    return DetectionMetrics(float(auroc), fpr95)
