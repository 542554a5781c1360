"""Training stages: supervised / self-training pre-training of the base
classifier, pseudo-labeling of the unlabeled pool, and episodic finetuning
on the labeled + pseudo-labeled data.

The finetuning loss for one episode is

    L_ft = sum over queries of the head loss
           + gamma * sum over support+query of the base-classifier loss,

with both sums over cross-entropies and pseudo-labels treated exactly like
true labels. Learning-rate scheduling halves into 1/decay steps when the
validation episode loss plateaus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import heads
from .datastore import Dataset, OracleDisabledError, SemiSplit
from .rng import stream
from .sampler import EpisodeSpec, Episode, LabeledPool, sample_episode

HEAD_CHOICES = ("proto", "ep")


@dataclass(frozen=True)
class SSLConfig:
    epochs: int = 100
    batch_labeled: int = 32
    batch_unlabeled: int = 64
    lr: float = 0.01
    alpha: float = 1.0          # weight of the unsupervised consistency term
    beta: float = 0.0           # weight of the L2 parameter regularizer
    tau: float = 0.95           # confidence threshold for pseudo-label masking
    sigma_weak: float = 0.05    # noise scales, relative to the feature std
    sigma_strong: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs < 0 or self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("bad batch/epoch configuration")


@dataclass(frozen=True)
class PLMLConfig:
    episode: EpisodeSpec
    head: str = "proto"
    epochs: int = 30
    episodes_per_epoch: int = 100
    lr: float = 0.01
    patience: int = 10
    lr_decay: float = 10.0
    gamma: float = 0.1
    val_episodes: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.patience < 1 or self.lr_decay <= 1.0:
            raise ValueError("need patience >= 1 and lr_decay > 1")
        if self.head not in HEAD_CHOICES:
            raise ValueError(f"head must be one of {HEAD_CHOICES}")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.val_episodes < 1:
            raise ValueError("bad episode/epoch configuration")


@dataclass(frozen=True)
class PseudoLabeledSet:
    """Pseudo-label for every unlabeled sample, plus the labeler's hash."""

    items: tuple[tuple[str, int], ...]
    confidences: tuple[float, ...]
    source_model_hash: str

    def __post_init__(self):
        ids = [sid for sid, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("every unlabeled id must appear exactly once")
        if len(self.confidences) != len(self.items):
            raise ValueError("confidences must align with items")


@dataclass
class TraceRow:
    epoch: int
    phase: str
    lr: float
    loss: float
    val_loss: float | None = None


class PlateauSchedule:
    """Divide lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int, factor: float):
        if lr <= 0 or patience < 1 or factor <= 1.0:
            raise ValueError("bad schedule configuration")
        self.lr = float(lr)
        self.patience = int(patience)
        self.factor = float(factor)
        self._best: float | None = None
        self._stagnant = 0

    def update(self, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the lr for the next epoch."""
        if self._best is None or val_loss < self._best:
            self._best = float(val_loss)
            self._stagnant = 0
        else:
            self._stagnant += 1
            if self._stagnant >= self.patience:
                self.lr /= self.factor
                self._stagnant = 0
        return self.lr


def _base_class_index(split: SemiSplit) -> dict[int, int]:
    return {cls: i for i, cls in enumerate(split.base_classes)}


def _labeled_arrays(dataset: Dataset, split: SemiSplit):
    ids = [sid for sid, _ in split.labeled]
    base_idx = _base_class_index(split)
    x = dataset.features_for(ids)
    y = np.array([base_idx[lbl] for _, lbl in split.labeled], dtype=np.int64)
    return x, y, len(base_idx)


def _step(model, loss: dm.DiffValue, lr: float) -> float:
    grads = dm.backward(loss, model.params.values())
    model.params = dm.sgd_step(model.params, grads, lr)
    return float(loss.value)


def pretrain_supervised(dataset: Dataset, split: SemiSplit, model, cfg: SSLConfig) -> list[TraceRow]:
    """Minibatch SGD on the base-classifier cross-entropy over the labeled pool."""
    x, y, n_classes = _labeled_arrays(dataset, split)
    if n_classes < 2:
        raise ValueError("labeled pool must contain at least two classes")
    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, "pretrain", "order", epoch).permutation(x.shape[0])
        losses = []
        for lo in range(0, order.size, cfg.batch_labeled):
            batch = order[lo : lo + cfg.batch_labeled]
            probs = model.classify_base(model.embed(x[batch]))
            loss = dm.cross_entropy(probs, dm.onehot(y[batch], model.num_base_classes))
            losses.append(_step(model, loss, cfg.lr))
        trace.append(TraceRow(epoch, "pretrain", cfg.lr, float(np.mean(losses))))
    return trace


def _l2_penalty(model) -> dm.DiffValue:
    total = dm.constant(0.0)
    for name in sorted(model.params):
        p = model.params[name]
        total = dm.add(total, dm.sum_all(dm.mul(p, p)))
    return total


def pretrain_selftrain(dataset: Dataset, split: SemiSplit, model, cfg: SSLConfig) -> list[TraceRow]:
    """Confidence-thresholded self-training on weak/strong noised features.

    Per step: supervised cross-entropy on a labeled batch, plus alpha times
    the cross-entropy of strongly-noised unlabeled samples against hard
    pseudo-labels taken from their weakly-noised views wherever the weak
    confidence reaches tau, plus beta times an L2 parameter penalty. The
    labeled stream is keyed identically to :func:`pretrain_supervised`, so
    with an always-zero mask and beta=0 the two trajectories coincide.
    Hidden labels of the unlabeled pool are never read.
    """
    x, y, n_classes = _labeled_arrays(dataset, split)
    if n_classes < 2:
        raise ValueError("labeled pool must contain at least two classes")
    unl_x = dataset.features_for(split.unlabeled) if split.unlabeled else None
    if unl_x is not None:
        feat_std = float(np.std(np.concatenate([x, unl_x], axis=0)))
        weak_scale = cfg.sigma_weak * feat_std
        strong_scale = cfg.sigma_strong * feat_std
    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, "pretrain", "order", epoch).permutation(x.shape[0])
        unl_rng = stream(cfg.seed, "pretrain", "unlabeled", epoch)
        noise_rng = stream(cfg.seed, "pretrain", "noise", epoch)
        losses = []
        for lo in range(0, order.size, cfg.batch_labeled):
            batch = order[lo : lo + cfg.batch_labeled]
            probs = model.classify_base(model.embed(x[batch]))
            loss = dm.cross_entropy(probs, dm.onehot(y[batch], model.num_base_classes))
            if unl_x is not None:
                take = min(cfg.batch_unlabeled, unl_x.shape[0])
                ub = unl_x[unl_rng.choice(unl_x.shape[0], size=take, replace=False)]
                weak = ub + noise_rng.standard_normal(ub.shape) * weak_scale
                strong = ub + noise_rng.standard_normal(ub.shape) * strong_scale
                weak_probs = model.classify_base(model.embed(weak)).value
                confident = np.flatnonzero(weak_probs.max(axis=1) >= cfg.tau)
                if confident.size:
                    pseudo = weak_probs[confident].argmax(axis=1)
                    strong_probs = model.classify_base(model.embed(strong[confident]))
                    unsup = dm.cross_entropy(strong_probs, dm.onehot(pseudo, model.num_base_classes))
                    loss = dm.add(loss, dm.scale(unsup, cfg.alpha * confident.size / take))
            if cfg.beta > 0:
                loss = dm.add(loss, dm.scale(_l2_penalty(model), cfg.beta))
            losses.append(_step(model, loss, cfg.lr))
        trace.append(TraceRow(epoch, "pretrain", cfg.lr, float(np.mean(losses))))
    return trace


def pseudo_label(model, dataset: Dataset, split: SemiSplit) -> PseudoLabeledSet:
    """Label every unlabeled sample with the base classifier's argmax.

    No confidence filtering: the pseudo-labeled set covers the whole
    unlabeled pool. Ties break toward the lowest class index. Labels are
    reported as global class ids (the base classes in sorted order).
    """
    base_classes = split.base_classes
    items: list[tuple[str, int]] = []
    confidences: list[float] = []
    if split.unlabeled:
        probs = model.classify_base(model.embed(dataset.features_for(split.unlabeled))).value
        picks = probs.argmax(axis=1)
        for sid, j, row in zip(split.unlabeled, picks, probs):
            items.append((sid, base_classes[j]))
            confidences.append(float(row[j]))
    return PseudoLabeledSet(tuple(items), tuple(confidences), model.param_hash())


def pseudo_label_accuracy(pset: PseudoLabeledSet, split: SemiSplit) -> float | None:
    """Audit-only accuracy of pseudo-labels against the sealed true labels.

    Returns None when the split's oracle accessor is disabled.
    """
    if not pset.items:
        return None
    try:
        hits = sum(1 for sid, lbl in pset.items if split.oracle_hidden_label(sid) == lbl)
    except OracleDisabledError:
        return None
    return hits / len(pset.items)


def finetune_loss(fsl_term: dm.DiffValue, base_term: dm.DiffValue, gamma: float) -> dm.DiffValue:
    """Combine the episodic head loss with the base-classifier loss."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return dm.add(fsl_term, dm.scale(base_term, gamma))


def episode_head_loss(model, episode: Episode, head: str) -> tuple[dm.DiffValue, dm.DiffValue]:
    """Head cross-entropy summed over the episode queries.

    Returns (loss, embeddings of support+query rows) so callers can reuse
    the embeddings for the base-classifier term.
    """
    n_s, n_q = episode.support_y.size, episode.query_y.size
    ways = episode.ways
    z = model.embed(np.concatenate([episode.support_x, episode.query_x], axis=0))
    if head == "proto":
        zs = dm.slice_rows(z, 0, n_s)
        zq = dm.slice_rows(z, n_s, n_s + n_q)
        probs = heads.proto_predict(zq, heads.proto_fit(zs, episode.support_y, ways))
    elif head == "ep":
        probs = heads.ep_predict(z, episode.support_y, ways, n_q)
    else:
        raise ValueError(f"unknown head {head!r}")
    mean_ce = dm.cross_entropy(probs, dm.onehot(episode.query_y, ways))
    return dm.scale(mean_ce, float(n_q)), z


def episode_finetune_loss(
    model,
    episode: Episode,
    head: str,
    gamma: float,
    label_by_id: dict[str, int],
    base_idx: dict[int, int],
) -> dm.DiffValue:
    """Full per-episode finetuning loss (head term + base-classifier term)."""
    fsl_term, z = episode_head_loss(model, episode, head)
    ids = episode.support_ids + episode.query_ids
    targets = np.array([base_idx[label_by_id[sid]] for sid in ids], dtype=np.int64)
    base_probs = model.classify_base(z)
    base_mean = dm.cross_entropy(base_probs, dm.onehot(targets, model.num_base_classes))
    base_term = dm.scale(base_mean, float(len(ids)))
    return finetune_loss(fsl_term, base_term, gamma)


def metatrain_plml(
    dataset: Dataset,
    val_classes,
    split: SemiSplit,
    pseudo: PseudoLabeledSet,
    model,
    cfg: PLMLConfig,
) -> list[TraceRow]:
    """Episodic finetuning over the labeled + pseudo-labeled pool.

    Episodes are drawn from the merged pool with pseudo-labels treated
    exactly like true ones; validation episodes come from the held-out
    validation classes and drive the plateau schedule.
    """
    pairs = sorted(set(split.labeled) | set(pseudo.items))
    label_by_id = dict(pairs)
    if len(label_by_id) != len(pairs):
        raise ValueError("conflicting labels for the same sample id in the training pool")
    pool = LabeledPool.from_pairs(dataset, pairs)
    spec = cfg.episode
    need = spec.shots + spec.queries
    rich = [c for c in pool.classes if pool.class_size(c) >= need]
    if len(rich) < spec.ways:
        raise ValueError(
            f"training pool supports only {len(rich)} classes with >= {need} items, "
            f"need {spec.ways}"
        )
    val_pool = LabeledPool.from_classes(dataset, val_classes)
    base_idx = _base_class_index(split)
    schedule = PlateauSchedule(cfg.lr, cfg.patience, cfg.lr_decay)
    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = schedule.lr
        train_rng = stream(cfg.seed, "metatrain", "train", epoch)
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(pool, spec, train_rng)
            loss = episode_finetune_loss(model, episode, cfg.head, cfg.gamma, label_by_id, base_idx)
            losses.append(_step(model, loss, lr))
        val_rng = stream(cfg.seed, "metatrain", "val", epoch)
        val_losses = []
        for _ in range(cfg.val_episodes):
            episode = sample_episode(val_pool, spec, val_rng)
            val_losses.append(float(episode_head_loss(model, episode, cfg.head)[0].value))
        val_loss = float(np.mean(val_losses))
        trace.append(TraceRow(epoch, "metatrain", lr, float(np.mean(losses)), val_loss))
        schedule.update(val_loss)
    return trace
