"""Optimization loop: shuffled length-grouped batches, adaptive-moment updates,
and early stopping on validation AUC scored through the ensemble predictor."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter
from .batching import make_batches, prepare_corpus
from .graph import NodeRef
from .model import LinkModel, PredictorParams
from .objectives import LossConfig, SequenceLabels, batch_objective
from .predictor import (
    build_index,
    evaluate_metrics,
    occurrence_training_set,
    score_pairs,
    train_predictor,
)
from .sampler import ConcentratedSequence


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 20
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # validation scoring cost controls (None = use the full corpus)
    eval_sequences_per_head: int | None = None
    probe_steps: int = 80
    probe_lr: float = 0.05

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise TrainingError("learning rate, batch size, epochs, patience must be positive")
        if self.patience >= self.max_epochs:
            raise TrainingError("patience must be smaller than max_epochs")


class Adam:
    """Adaptive-moment optimizer; the update is a pure function of
    (gradient, state), and the state round-trips exactly through arrays."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"m.{p.name}"] = m
            out[f"v.{p.name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"m.{p.name}"].copy()
            self.v[i] = arrays[f"v.{p.name}"].copy()


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("-inf")

    def record(self, epoch: int, loss: float, auc: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.val_auc.append(auc)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_auc\n")
            for e, l, a in zip(self.epochs, self.train_loss, self.val_auc):
                fh.write(f"{e},{l!r},{a!r}\n")


def train_epoch(
    model: LinkModel,
    batches: list,
    optimizer: Adam,
    loss_config: LossConfig,
    rng: random.Random,
) -> float:
    """One pass over shuffled batches; returns the mean per-sequence loss."""
    order = list(range(len(batches)))
    rng.shuffle(order)
    total = 0.0
    count = 0
    for pos in order:
        batch = batches[pos]
        optimizer.zero_grad()
        H = model.encode_batch(batch)
        loss, _, _ = batch_objective(H, batch, model.attention_vector, loss_config)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss in batch {pos}")
        scaled = loss * (1.0 / batch.size)
        scaled.backward()
        optimizer.step()
        total += float(loss.data)
        count += batch.size
    return total / max(count, 1)


def _subsample_per_head(
    corpus: Sequence[ConcentratedSequence], per_head: int | None
) -> list[ConcentratedSequence]:
    if per_head is None:
        return list(corpus)
    taken: dict[NodeRef, int] = {}
    kept = []
    for seq in corpus:
        n = taken.get(seq.head, 0)
        if n < per_head:
            taken[seq.head] = n + 1
            kept.append(seq)
    return kept


def validation_auc(
    model: LinkModel,
    corpus: Sequence[ConcentratedSequence],
    train_pairs: Sequence[tuple[NodeRef, NodeRef]],
    train_labels: Sequence[int],
    val_pairs: Sequence[tuple[NodeRef, NodeRef]],
    val_labels: Sequence[int],
    config: TrainConfig,
) -> float:
    """AUC of the ensemble predictor on validation links, with the pair MLP
    re-fit from scratch on frozen current representations."""
    eval_corpus = _subsample_per_head(corpus, config.eval_sequences_per_head)
    index = build_index(model, eval_corpus)
    probe = PredictorParams.create(
        model.config.d_out,
        int(model.predictor.w1.shape[1]),
        np.random.default_rng(np.random.SeedSequence([config.seed, 0xD1CE])),
        scalar_dot=model.predictor.scalar_dot,
    )
    feats, ys, ws = occurrence_training_set(
        index, train_pairs, train_labels, probe.scalar_dot
    )
    train_predictor(probe, feats, ys, ws, steps=config.probe_steps, lr=config.probe_lr)
    scores = score_pairs(val_pairs, index, probe)
    metrics = evaluate_metrics(list(zip(scores, val_labels)))
    if metrics["auc"] is None:
        raise TrainingError("validation links must contain both classes")
    return metrics["auc"]


def fit(
    model: LinkModel,
    corpus: Sequence[ConcentratedSequence],
    labels: SequenceLabels,
    train_pairs: Sequence[tuple[NodeRef, NodeRef]],
    train_pair_labels: Sequence[int],
    val_pairs: Sequence[tuple[NodeRef, NodeRef]],
    val_pair_labels: Sequence[int],
    loss_config: LossConfig,
    config: TrainConfig,
) -> TrainLog:
    """Train the encoder objective with early stopping on validation AUC.

    Returns the log; the model is left at the best-AUC checkpoint.
    """
    train_pos = {
        (h, t) for (h, t), y in zip(train_pairs, train_pair_labels) if y == 1
    }
    for pair in val_pairs:
        if pair in train_pos:
            raise TrainingError("validation links overlap training positives")

    prepared = prepare_corpus(corpus, model.graph, model.tables, model.vocab)
    batches = make_batches(
        prepared, config.batch_size, positive_steps=labels.positive_steps, min_nodes=2
    )
    if not batches:
        raise TrainingError("corpus holds no sequence with at least two nodes")

    params = model.encoder_parameters()
    optimizer = Adam(params, lr=config.learning_rate,
                     beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    log = TrainLog()
    best_snapshot = [p.data.copy() for p in params]
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_rng = random.Random(f"{config.seed}/epoch/{epoch}")
        loss = train_epoch(model, batches, optimizer, loss_config, epoch_rng)
        auc = validation_auc(
            model, corpus, train_pairs, train_pair_labels,
            val_pairs, val_pair_labels, config,
        )
        log.record(epoch, loss, auc)
        if auc > log.best_val_auc:
            log.best_val_auc = auc
            log.best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for p, snap in zip(params, best_snapshot):
        p.data[...] = snap
    return log
