"""Training orchestration: batch sampling, augmentation, encoding, the
novelty gate, loss/gradient computation, optimizer steps, moving-average
prototype updates, per-epoch metrics, checkpointing, and ablation sweeps.

Per iteration the order is fixed: sample -> augment -> encode -> calibrate ->
gate -> pseudo-label -> loss + backprop -> optimizer step -> prototype
update. Everything is deterministic given the seed.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from opencon.core import OpenConError, RngBundle, as_f64
from opencon.data import AugmentConfig, BatchSampler, SplitDataset
from opencon.encoder import (
    Grads,
    Mlp,
    Optimizer,
    OptimizerConfig,
    ShapeMismatch,
    backward,
    forward,
)
from opencon.evaluation import AccuracyTriple, accuracy_triple
from opencon.objective import LossWeights, loss_modified, loss_opencon
from opencon.prototype import (
    DetectionMetrics,
    PrototypeStore,
    SCORE_VARIANTS,
    calibrate_threshold,
    detection_metrics,
    init_prototypes,
    ood_gate,
    ood_scores,
    pseudo_labels,
    update_prototypes,
    warm_start_known,
)

CHECKPOINT_MAGIC = b"OCKP"
CHECKPOINT_VERSION = 1

PER_BATCH = "per_batch"
PER_EPOCH = "per_epoch"


class TrainingDiverged(OpenConError):
    """A loss went non-finite; carries the diagnostic state."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


class Corrupt(OpenConError):
    """Checkpoint file is truncated or not a checkpoint."""


class VersionMismatch(OpenConError):
    """Checkpoint version or dimensions disagree with expectations."""


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of a run. Loss weights/temperatures default to the
    reference values; batch sizes and epochs default to desk scale."""

    epochs: int = 100
    b_l: int = 64
    b_u: int = 64
    lambda_n: float = 0.1
    tau_n: float = 0.7
    lambda_l: float = 0.2
    tau_l: float = 0.1
    lambda_u: float = 1.0
    tau_u: float = 0.4
    kl_weight: float = 0.05
    gamma: float = 0.9
    p: float = 70.0
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)
    seed: int = 0
    embed_dim: int = 128
    hidden_dim: int = 0          # 0 -> twice the input dim
    aug_sigma: float = 0.1
    aug_p_mask: float = 0.1
    n_prototypes: int = 0        # 0 -> number of ground-truth classes
    drop_l: bool = False
    drop_u: bool = False
    drop_n: bool = False
    use_modified_loss: bool = False
    calibration: str = PER_BATCH
    eval_every: int = 1
    warm_start: bool = True
    early_stop: bool = False
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-4

    def __post_init__(self):
        if self.calibration not in (PER_BATCH, PER_EPOCH):
            raise ValueError(f"calibration must be {PER_BATCH!r} or {PER_EPOCH!r}")
        if not 0.0 <= self.p <= 100.0:
            raise ValueError("p must lie in [0, 100]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.weights  # validate temperatures/coefficients eagerly

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_n, self.tau_n, self.lambda_l, self.tau_l,
                           self.lambda_u, self.tau_u, self.kl_weight)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["milestones"] = list(self.milestones)
        return out


@dataclass
class EpochReport:
    epoch: int
    loss_total: float
    loss_l: float
    loss_u: float
    loss_n: float
    kl: float
    lambda_threshold: float | None
    gated_fraction: float
    acc_all: float | None
    acc_novel: float | None
    acc_seen: float | None
    active_prototypes: int

    def as_dict(self) -> dict:
        def clean(v):
            if v is None:
                return None
            if isinstance(v, float) and not np.isfinite(v):
                return None
            return v

        return {k: clean(v) for k, v in dataclasses.asdict(self).items()}


@dataclass
class TrainState:
    """Everything needed to resume a run bitwise at an epoch boundary."""

    mlp: Mlp
    velocity: Grads
    store: PrototypeStore
    next_epoch: int
    total_epochs: int
    rng_words: dict[str, tuple[int, int, int, int]]


@dataclass
class TrainResult:
    mlp: Mlp
    store: PrototypeStore
    reports: list[EpochReport]
    config: TrainConfig
    final_state: TrainState

    @property
    def final(self) -> EpochReport:
        return self.reports[-1]


def evaluate_model(mlp: Mlp, store: PrototypeStore,
                   split: SplitDataset) -> tuple[AccuracyTriple, np.ndarray]:
    """Transductive accuracy triple on the unlabeled pool: predict by best
    prototype over all classes, then score with optimal assignment."""
    z, _ = forward(mlp, split.unlabeled_features())
    preds = pseudo_labels(z, store)
    triple = accuracy_triple(preds, split.unlabeled_true_labels(),
                             split.known_classes, split.novel_classes,
                             store.n_classes)
    return triple, preds


def detection_report(mlp: Mlp, store: PrototypeStore, split: SplitDataset,
                     tau: float) -> dict[str, DetectionMetrics]:
    """Known-vs-novel separation on the unlabeled pool for every score
    variant (true-known unlabeled samples are in-distribution)."""
    z, _ = forward(mlp, split.unlabeled_features())
    truth = split.unlabeled_true_labels()
    is_known = np.isin(truth, split.known_classes)
    out = {}
    for variant in SCORE_VARIANTS:
        scores = ood_scores(z, store, variant, tau)
        out[variant] = detection_metrics(scores[is_known], scores[~is_known])
    return out


def _epoch_mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def train(
    config: TrainConfig,
    split: SplitDataset,
    start_state: TrainState | None = None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
) -> TrainResult:
    """Run the full training loop and return the model, prototypes and one
    report per epoch.

    Raises:
        TrainingDiverged: on the first non-finite loss, with diagnostics.
    """
    m = split.dim
    h = config.hidden_dim or 2 * m
    d = config.embed_dim
    n_known = len(split.known_classes)
    n_protos = config.n_prototypes or len(split.all_classes)
    if n_protos < n_known:
        raise ValueError(f"n_prototypes={n_protos} < known classes {n_known}")

    rngs = RngBundle(config.seed)
    if start_state is not None:
        if start_state.total_epochs != config.epochs:
            raise VersionMismatch("checkpoint was produced with a different epoch budget")
        if start_state.next_epoch >= config.epochs:
            raise OpenConError("checkpoint already covers the full epoch budget")
        if start_state.mlp.dims != (m, h, d) or start_state.store.n_classes != n_protos:
            raise VersionMismatch("checkpoint dimensions disagree with the config/split")
        mlp = start_state.mlp.copy()
        store = start_state.store.copy()
        optimizer = Optimizer(_opt_config(config), mlp)
        optimizer.velocity = Grads(start_state.velocity.w1.copy(),
                                   start_state.velocity.b1.copy(),
                                   start_state.velocity.w2.copy(),
                                   start_state.velocity.b2.copy())
        for name, words in start_state.rng_words.items():
            getattr(rngs, name).set_state_words(words)
        first_epoch = start_state.next_epoch
    else:
        mlp = Mlp.init(m, h, d, rngs.init)
        store = init_prototypes(n_protos, d, rngs.init, n_known)
        optimizer = Optimizer(_opt_config(config), mlp)
        first_epoch = 0

    sampler = BatchSampler(split, config.b_l, config.b_u, rngs.data, rngs.augment,
                           AugmentConfig(config.aug_sigma, config.aug_p_mask))
    weights = config.weights
    labeled_y = split.labeled_labels()
    reports: list[EpochReport] = []
    loss_history: list[float] = []

    for epoch in range(first_epoch, config.epochs):
        store.reset_counts()
        lam_epoch = None
        if config.calibration == PER_EPOCH:
            z_all_l, _ = forward(mlp, split.labeled_features())
            lam_epoch = calibrate_threshold(z_all_l, store, config.p)

        sums = {"total": [], "l": [], "u": [], "n": [], "kl": []}
        lam_values: list[float] = []
        gated_count = 0
        unlabeled_count = 0

        for iteration, (batch_l, batch_u) in enumerate(sampler.epoch()):
            z_l, tape_l = forward(mlp, batch_l.inputs)
            has_u = batch_u.n_views > 0
            if has_u:
                z_u, tape_u = forward(mlp, batch_u.inputs)
            else:
                z_u = np.zeros((0, d))
                tape_u = None

            lam = lam_epoch if lam_epoch is not None else calibrate_threshold(
                z_l, store, config.p)
            gate = ood_gate(z_u, store, lam)
            novel_rows = gate.novel_view_ids
            pseudo_novel = (pseudo_labels(z_u[novel_rows], store)
                            if novel_rows.size else np.zeros(0, np.int64))

            if config.use_modified_loss:
                pseudo_u = (pseudo_labels(z_u, store)
                            if has_u else np.zeros(0, np.int64))
                breakdown, g_l, g_u = loss_modified(
                    z_l, batch_l.labels, z_u, batch_u.sample_ids, novel_rows,
                    pseudo_novel, pseudo_u, store.matrix, weights)
            else:
                breakdown, g_l, g_u = loss_opencon(
                    z_l, batch_l.labels, z_u, batch_u.sample_ids, novel_rows,
                    pseudo_novel, store.matrix, weights,
                    drop_l=config.drop_l, drop_u=config.drop_u, drop_n=config.drop_n)

            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} iteration {iteration}",
                    state={"epoch": epoch, "iteration": iteration,
                           "breakdown": dataclasses.asdict(breakdown),
                           "threshold": lam, "gated": int(novel_rows.size)},
                )

            grads = backward(mlp, tape_l, g_l)
            if has_u:
                grads.add_(backward(mlp, tape_u, g_u))
            optimizer.step(mlp, grads, epoch)
            update_prototypes(store, z_l, batch_l.labels, z_u[novel_rows],
                              config.gamma)

            sums["total"].append(breakdown.total)
            sums["l"].append(breakdown.l)
            sums["u"].append(breakdown.u)
            sums["n"].append(breakdown.n)
            sums["kl"].append(breakdown.kl)
            if np.isfinite(lam):
                lam_values.append(float(lam))
            gated_count += int(novel_rows.size)
            unlabeled_count += int(batch_u.n_views)

        if epoch == 0 and config.warm_start:
            z_all_l, _ = forward(mlp, split.labeled_features())
            warm_start_known(store, z_all_l, labeled_y)

        is_last = epoch == config.epochs - 1
        if config.eval_every > 0 and (epoch % config.eval_every == 0 or is_last):
            triple, _ = evaluate_model(mlp, store, split)
            acc_all, acc_novel, acc_seen = triple.all, triple.novel, triple.seen
        else:
            acc_all = acc_novel = acc_seen = None

        report = EpochReport(
            epoch=epoch,
            loss_total=_epoch_mean(sums["total"]),
            loss_l=_epoch_mean(sums["l"]),
            loss_u=_epoch_mean(sums["u"]),
            loss_n=_epoch_mean(sums["n"]),
            kl=_epoch_mean(sums["kl"]),
            lambda_threshold=_epoch_mean(lam_values) if lam_values else None,
            gated_fraction=(gated_count / unlabeled_count) if unlabeled_count else 0.0,
            acc_all=acc_all,
            acc_novel=acc_novel,
            acc_seen=acc_seen,
            active_prototypes=int(np.sum(store.assignment_counts > 0)),
        )
        reports.append(report)
        loss_history.append(report.loss_total)

        if checkpoint_path is not None and checkpoint_every:
            if (epoch + 1) % checkpoint_every == 0 and not is_last:
                checkpoint_save(checkpoint_path, TrainState(
                    mlp, optimizer.velocity, store, epoch + 1, config.epochs,
                    {name: rng.state_words() for name, rng in rngs.named().items()
                     if name != "theory"},
                ))

        if config.early_stop and len(loss_history) > config.early_stop_patience:
            prev = loss_history[-1 - config.early_stop_patience]
            rel = abs(loss_history[-1] - prev) / max(abs(prev), 1e-12)
            if rel < config.early_stop_tol:
                break

    final_state = TrainState(
        mlp, optimizer.velocity, store, config.epochs, config.epochs,
        {name: rng.state_words() for name, rng in rngs.named().items()
         if name != "theory"},
    )
    return TrainResult(mlp, store, reports, config, final_state)


def _opt_config(config: TrainConfig) -> OptimizerConfig:
    return OptimizerConfig(
        lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
        decay_factor=config.lr_decay, milestones=config.milestones,
        total_epochs=config.epochs,
    )


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

LOSS_COMPONENT_VARIANTS = (
    ("full", {}),
    ("no_l", {"drop_l": True}),
    ("no_u", {"drop_u": True}),
    ("no_n", {"drop_n": True}),
)

P_SWEEP_VALUES = (0, 10, 30, 50, 70, 90)


def variant_config(config: TrainConfig, overrides: dict) -> TrainConfig:
    return dataclasses.replace(config, **overrides)


def ablate(config: TrainConfig, split: SplitDataset,
           variants) -> list[dict]:
    """Train one run per (name, overrides) variant on the same split and seed
    and tabulate final accuracy triples."""
    rows = []
    for name, overrides in variants:
        result = train(variant_config(config, overrides), split)
        final = result.final
        rows.append({
            "variant": name,
            "acc_all": final.acc_all,
            "acc_novel": final.acc_novel,
            "acc_seen": final.acc_seen,
            "loss_total": final.loss_total,
            "active_prototypes": final.active_prototypes,
        })
    return rows


# ---------------------------------------------------------------------------
# Checkpoints: magic OCKP, version, dims, parameter/velocity/prototype blocks,
# assignment counts, known ids, rng stream states.
# ---------------------------------------------------------------------------

_RNG_STREAMS_SAVED = ("data", "augment", "init")


def checkpoint_save(path, state: TrainState) -> None:
    mlp, store = state.mlp, state.store
    m, h, d = mlp.dims
    k = store.n_classes
    n_known = len(store.known_ids)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIIIII", CHECKPOINT_VERSION, m, h, d, k,
                             n_known, state.next_epoch, state.total_epochs))
        for block in (mlp.w1, mlp.b1, mlp.w2, mlp.b2,
                      state.velocity.w1, state.velocity.b1,
                      state.velocity.w2, state.velocity.b2,
                      store.matrix):
            fh.write(as_f64(block).astype("<f8").tobytes(order="C"))
        fh.write(store.assignment_counts.astype("<i8").tobytes())
        fh.write(store.known_ids.astype("<i8").tobytes())
        for name in _RNG_STREAMS_SAVED:
            s, inc, has32, uint = state.rng_words[name]
            fh.write(s.to_bytes(16, "little"))
            fh.write(inc.to_bytes(16, "little"))
            fh.write(struct.pack("<BI", has32, uint))


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise Corrupt("bad magic, not a checkpoint")
    try:
        version, m, h, d, k, n_known, next_epoch, total_epochs = struct.unpack_from(
            "<IIIIIIII", blob, 4)
    except struct.error as exc:
        raise Corrupt(f"truncated header: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 4 + 32

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        need = count * 8
        if len(blob) < off + need:
            raise Corrupt(f"truncated block at offset {off}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += need
        return arr

    mlp = Mlp(take((h, m)), take((h,)), take((d, h)), take((d,)))
    velocity = Grads(take((h, m)), take((h,)), take((d, h)), take((d,)))
    matrix = take((k, d))

    def take_i64(count):
        nonlocal off
        need = count * 8
        if len(blob) < off + need:
            raise Corrupt(f"truncated block at offset {off}")
        arr = np.frombuffer(blob, dtype="<i8", count=count, offset=off).copy()
        off += need
        return arr

    counts = take_i64(k)
    known_ids = take_i64(n_known)
    novel_ids = np.setdiff1d(np.arange(k), known_ids)
    store = PrototypeStore(matrix, known_ids, novel_ids, counts)
    rng_words = {}
    for name in _RNG_STREAMS_SAVED:
        if len(blob) < off + 37:
            raise Corrupt(f"truncated rng state at offset {off}")
        s = int.from_bytes(blob[off:off + 16], "little")
        inc = int.from_bytes(blob[off + 16:off + 32], "little")
        has32, uint = struct.unpack_from("<BI", blob, off + 32)
        rng_words[name] = (s, inc, int(has32), int(uint))
        off += 37
    return TrainState(mlp, velocity, store, next_epoch, total_epochs, rng_words)
