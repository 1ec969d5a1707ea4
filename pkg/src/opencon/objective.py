"""Contrastive losses and their exact gradients with respect to embeddings.

One per-anchor template covers every variant; the variants differ only in how
the positive set is chosen (ground-truth label, view pairing, or pseudo-label)
while the negative set is always the rest of the multi-view batch. Batch
losses are means over contributing anchors, so the loss weights stay
comparable across batch sizes. All reductions accumulate in value-sorted
order, making loss values invariant to view reordering at f64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from opencon.core import InvalidTemperature, OpenConError, as_f64, stable_sum


class EmptyPositiveSet(OpenConError):
    """Anchor has no positive partner; caller policy is to skip it."""


class InvalidPrior(OpenConError):
    """Class prior must be strictly positive and sum to one."""


@dataclass(frozen=True)
class ContrastSets:
    """Index sets for one anchor: pulled-toward positives and pushed-from
    negatives (anchor excluded from both)."""

    anchor: int
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.int64)
        neg = np.asarray(self.negatives, dtype=np.int64)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)
        if self.anchor in pos or self.anchor in neg:
            raise ValueError("anchor may not appear in its own positive/negative set")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients and temperatures of the composite objective."""

    lambda_n: float = 0.1
    tau_n: float = 0.7
    lambda_l: float = 0.2
    tau_l: float = 0.1
    lambda_u: float = 1.0
    tau_u: float = 0.4
    kl_weight: float = 0.05

    def __post_init__(self):
        for name in ("tau_n", "tau_l", "tau_u"):
            if getattr(self, name) <= 0:
                raise InvalidTemperature(f"{name} must be > 0")
        for name in ("lambda_n", "lambda_l", "lambda_u", "kl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted component values; total carries the weights."""

    total: float
    l: float
    u: float
    n: float
    kl: float


def _anchor_terms(sim_row: np.ndarray, positives: np.ndarray,
                  negatives: np.ndarray, tau: float) -> tuple[float, float]:
    """(alignment, log-partition) parts of one anchor's loss.

    alignment = -(1/|P|) sum of s/tau over positives;
    log-partition = logsumexp of s/tau over negatives.
    """
    s_pos = sim_row[positives] / tau
    s_neg = sim_row[negatives] / tau
    m = float(np.max(s_neg))
    lse = m + float(np.log(stable_sum(np.exp(s_neg - m))))
    align = -stable_sum(s_pos) / len(positives)
    return align, lse


def per_sample_loss(embeddings: np.ndarray, sets: ContrastSets,
                    tau: float) -> tuple[float, np.ndarray]:
    """Per-anchor contrastive loss and its exact gradient.

    loss = -(1/|P|) sum_{p in P} log[ exp(z.z_p/tau) / sum_{q in N} exp(z.z_q/tau) ]

    Raises:
        EmptyPositiveSet: if the positive set is empty.
        InvalidTemperature: if tau <= 0.
    """
    if tau <= 0:
        raise InvalidTemperature(f"tau must be > 0, got {tau}")
    z = as_f64(embeddings)
    if len(sets.positives) == 0:
        raise EmptyPositiveSet(f"anchor {sets.anchor} has no positives")
    if len(sets.negatives) == 0:
        raise ValueError("negative set must be nonempty")
    a = sets.anchor
    sim_row = z @ z[a]
    align, lse = _anchor_terms(sim_row, sets.positives, sets.negatives, tau)
    loss = align + lse

    grad = np.zeros_like(z)
    coeff = np.zeros(len(z))
    np.add.at(coeff, sets.positives, -1.0 / (len(sets.positives) * tau))
    s_neg = sim_row[sets.negatives] / tau
    w = np.exp(s_neg - (np.max(s_neg) + np.log(np.sum(np.exp(s_neg - np.max(s_neg))))))
    np.add.at(coeff, sets.negatives, w / tau)
    grad[a] += coeff @ z
    grad += np.outer(coeff, z[a])
    return loss, grad


def decompose_alignment(embeddings: np.ndarray, sets: ContrastSets,
                        tau: float) -> tuple[float, float]:
    """Split the per-anchor loss into its alignment part (mean positive
    similarity, negated) and its log-partition part; the two sum back to
    :func:`per_sample_loss` exactly."""
    if tau <= 0:
        raise InvalidTemperature(f"tau must be > 0, got {tau}")
    if len(sets.positives) == 0:
        raise EmptyPositiveSet(f"anchor {sets.anchor} has no positives")
    z = as_f64(embeddings)
    sim_row = z @ z[sets.anchor]
    return _anchor_terms(sim_row, sets.positives, sets.negatives, tau)


def _others_mask(n: int, anchor: int) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[anchor] = False
    return mask


def build_sets_supcon(labels: np.ndarray, anchor: int) -> ContrastSets:
    """Positives = other views sharing the anchor's ground-truth label;
    negatives = every other view in the batch."""
    labels = np.asarray(labels)
    others = _others_mask(len(labels), anchor)
    pos = np.flatnonzero(others & (labels == labels[anchor]))
    neg = np.flatnonzero(others)
    return ContrastSets(anchor, pos, neg)


def build_sets_simclr(sample_ids: np.ndarray, anchor: int) -> ContrastSets:
    """Positives = the other view of the same sample; negatives = the rest of
    the batch."""
    sample_ids = np.asarray(sample_ids)
    others = _others_mask(len(sample_ids), anchor)
    pos = np.flatnonzero(others & (sample_ids == sample_ids[anchor]))
    neg = np.flatnonzero(others)
    return ContrastSets(anchor, pos, neg)


def build_sets_novel(pseudo_labels: np.ndarray, anchor: int) -> ContrastSets:
    """Positives = other views with the same predicted label (over the full
    prototype set); negatives = the rest of the batch.

    Raises:
        EmptyPositiveSet: when no other view shares the prediction.
    """
    pseudo_labels = np.asarray(pseudo_labels)
    others = _others_mask(len(pseudo_labels), anchor)
    pos = np.flatnonzero(others & (pseudo_labels == pseudo_labels[anchor]))
    if pos.size == 0:
        raise EmptyPositiveSet(f"anchor {anchor} shares its prediction with no other view")
    neg = np.flatnonzero(others)
    return ContrastSets(anchor, pos, neg)


def _masked_contrastive(z: np.ndarray, pos_mask: np.ndarray,
                        tau: float) -> tuple[float, np.ndarray, int]:
    """Mean anchor loss over a multi-view batch.

    pos_mask[a, j] marks j as a positive of anchor a; negatives are always
    everything but the anchor. Anchors with an empty positive row contribute
    nothing, to loss or gradient, and are left out of the mean.
    Returns (loss, grad wrt z, number of contributing anchors).
    """
    if tau <= 0:
        raise InvalidTemperature(f"tau must be > 0, got {tau}")
    z = as_f64(z)
    n = len(z)
    if n == 0:
        return 0.0, np.zeros_like(z), 0
    pos_mask = pos_mask & ~np.eye(n, dtype=bool)
    neg_mask = ~np.eye(n, dtype=bool)
    contrib = pos_mask.any(axis=1)
    n_c = int(contrib.sum())
    if n_c == 0:
        return 0.0, np.zeros_like(z), 0

    s = (z @ z.T) / tau
    s_neg = np.where(neg_mask, s, -np.inf)
    rowmax = np.max(s_neg, axis=1)
    e = np.where(neg_mask, np.exp(s_neg - rowmax[:, None]), 0.0)
    denom = np.sum(np.sort(e, axis=1), axis=1)
    lse = rowmax + np.log(denom)
    n_pos = pos_mask.sum(axis=1)
    pos_sum = np.sum(np.sort(np.where(pos_mask, s, 0.0), axis=1), axis=1)
    losses = lse - pos_sum / np.maximum(n_pos, 1)
    loss = stable_sum(losses[contrib]) / n_c

    # d(loss)/d(raw similarity): softmax weight on negatives minus the
    # positive average, per contributing anchor, then mapped back to z.
    w = e / denom[:, None]
    d = (w - pos_mask / np.maximum(n_pos, 1)[:, None]) / tau
    d *= contrib[:, None] / n_c
    grad = d @ z + d.T @ z
    return float(loss), grad, n_c


def loss_supcon(z: np.ndarray, labels: np.ndarray, tau: float):
    """Supervised contrastive loss over a labeled multi-view batch."""
    labels = np.asarray(labels)
    return _masked_contrastive(z, labels[:, None] == labels[None, :], tau)


def loss_simclr(z: np.ndarray, sample_ids: np.ndarray, tau: float):
    """Self-supervised contrastive loss: the only positive is the paired view."""
    ids = np.asarray(sample_ids)
    return _masked_contrastive(z, ids[:, None] == ids[None, :], tau)


def loss_novel(z: np.ndarray, pseudo: np.ndarray, tau: float):
    """Pseudo-label contrastive loss over the gated novel views; anchors whose
    prediction is unique in the batch are skipped."""
    pseudo = np.asarray(pseudo)
    return _masked_contrastive(z, pseudo[:, None] == pseudo[None, :], tau)


def kl_regularizer(z: np.ndarray, prototypes: np.ndarray, tau: float,
                   prior: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(mean predicted class distribution || prior) over a batch.

    The predicted distribution per view is softmax(M z / tau); gradients flow
    through the embeddings only, never the prototypes.

    Raises:
        InvalidPrior: prior does not sum to 1 or has nonpositive entries.
    """
    if tau <= 0:
        raise InvalidTemperature(f"tau must be > 0, got {tau}")
    z = as_f64(z)
    m = as_f64(prototypes)
    prior = as_f64(prior)
    if prior.shape != (m.shape[0],):
        raise InvalidPrior(f"prior length {prior.shape} != class count {m.shape[0]}")
    if abs(prior.sum() - 1.0) > 1e-9 or np.any(prior <= 0):
        raise InvalidPrior("prior must be strictly positive and sum to 1")
    n = len(z)
    if n == 0:
        return 0.0, np.zeros_like(z)
    logits = z @ m.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    q = np.exp(logits)
    q /= q.sum(axis=1, keepdims=True)
    q_bar = np.sum(np.sort(q, axis=0), axis=0) / n
    kl = stable_sum(q_bar * (np.log(q_bar) - np.log(prior)))
    g = np.log(q_bar) - np.log(prior) + 1.0
    inner = q * g[None, :] - (q @ g)[:, None] * q
    grad = inner @ m / (n * tau)
    return float(kl), grad


def _uniform_prior(n_classes: int) -> np.ndarray:
    return np.full(n_classes, 1.0 / n_classes)


def loss_opencon(
    z_l: np.ndarray,
    labels_l: np.ndarray,
    z_u: np.ndarray,
    sample_ids_u: np.ndarray,
    novel_rows: np.ndarray,
    pseudo_novel: np.ndarray,
    prototypes: np.ndarray,
    weights: LossWeights,
    prior: np.ndarray | None = None,
    drop_l: bool = False,
    drop_u: bool = False,
    drop_n: bool = False,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Composite open-world loss over one labeled + one unlabeled batch.

    Args:
        z_l, labels_l: embeddings and ground-truth labels of the labeled views.
        z_u, sample_ids_u: embeddings and sample ids of all unlabeled views.
        novel_rows: indices into z_u of the views that passed the novelty gate.
        pseudo_novel: predicted class (over all prototypes) per gated view.
        prototypes: (C, d) unit prototype matrix, constant for this call.
        prior: class prior for the KL term; uniform when omitted.
        drop_*: ablation switches; a dropped term contributes zero loss and
            zero gradient.

    Returns:
        (breakdown, gradient wrt z_l, gradient wrt z_u).
    """
    z_l = as_f64(z_l)
    z_u = as_f64(z_u)
    grad_l = np.zeros_like(z_l)
    grad_u = np.zeros_like(z_u)
    val_l = val_u = val_n = val_kl = 0.0

    if not drop_l and len(z_l):
        val_l, g, _ = loss_supcon(z_l, labels_l, weights.tau_l)
        grad_l += weights.lambda_l * g
    if not drop_u and len(z_u):
        val_u, g, _ = loss_simclr(z_u, sample_ids_u, weights.tau_u)
        grad_u += weights.lambda_u * g
    novel_rows = np.asarray(novel_rows, dtype=np.int64)
    if not drop_n and novel_rows.size:
        val_n, g_n, _ = loss_novel(z_u[novel_rows], pseudo_novel, weights.tau_n)
        np.add.at(grad_u, novel_rows, weights.lambda_n * g_n)
    if weights.kl_weight > 0 and len(z_u):
        p = prior if prior is not None else _uniform_prior(prototypes.shape[0])
        val_kl, g = kl_regularizer(z_u, prototypes, weights.tau_n, p)
        grad_u += weights.kl_weight * g

    total = (weights.lambda_l * val_l + weights.lambda_u * val_u
             + weights.lambda_n * val_n + weights.kl_weight * val_kl)
    return LossBreakdown(total, val_l, val_u, val_n, val_kl), grad_l, grad_u


def loss_modified(
    z_l: np.ndarray,
    labels_l: np.ndarray,
    z_u: np.ndarray,
    sample_ids_u: np.ndarray,
    novel_rows: np.ndarray,
    pseudo_novel: np.ndarray,
    pseudo_u: np.ndarray,
    prototypes: np.ndarray,
    weights: LossWeights,
    prior: np.ndarray | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Variant that widens the supervised term to the rejected unlabeled views.

    The supervised term runs over labeled views plus the unlabeled views the
    gate predicted as known, each tagged with its ground-truth label if
    labeled and its predicted label otherwise. Reduces exactly to the
    standard composite loss when the gate rejects nothing.

    Args:
        pseudo_u: predicted class (over all prototypes) for every unlabeled
            view; only the rejected rows are consulted.
    """
    z_l = as_f64(z_l)
    z_u = as_f64(z_u)
    novel_rows = np.asarray(novel_rows, dtype=np.int64)
    rejected = np.setdiff1d(np.arange(len(z_u)), novel_rows)
    grad_l = np.zeros_like(z_l)
    grad_u = np.zeros_like(z_u)

    z_k = np.concatenate([z_l, z_u[rejected]]) if len(z_u) else z_l
    y_k = np.concatenate([np.asarray(labels_l, np.int64),
                          np.asarray(pseudo_u, np.int64)[rejected]])
    val_k, g_k, _ = loss_supcon(z_k, y_k, weights.tau_l)
    grad_l += weights.lambda_l * g_k[:len(z_l)]
    if rejected.size:
        np.add.at(grad_u, rejected, weights.lambda_l * g_k[len(z_l):])

    val_u = val_n = val_kl = 0.0
    if len(z_u):
        val_u, g, _ = loss_simclr(z_u, sample_ids_u, weights.tau_u)
        grad_u += weights.lambda_u * g
    if novel_rows.size:
        val_n, g_n, _ = loss_novel(z_u[novel_rows], pseudo_novel, weights.tau_n)
        np.add.at(grad_u, novel_rows, weights.lambda_n * g_n)
    if weights.kl_weight > 0 and len(z_u):
        p = prior if prior is not None else _uniform_prior(prototypes.shape[0])
        val_kl, g = kl_regularizer(z_u, prototypes, weights.tau_n, p)
        grad_u += weights.kl_weight * g

    total = (weights.lambda_l * val_k + weights.lambda_u * val_u
             + weights.lambda_n * val_n + weights.kl_weight * val_kl)
    return LossBreakdown(total, val_k, val_u, val_n, val_kl), grad_l, grad_u
