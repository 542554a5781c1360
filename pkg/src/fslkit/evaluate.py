"""Few-shot evaluation on novel classes and the experiment harnesses.

Inference modes: inductive (prototype head, each query scored against the
support prototypes), transductive (label propagation over the joint
support+query graph), and semi-supervised (extra unlabeled-per-class nodes
join the propagation graph as zero-label rows). The refinement head
("semiproto") supports semi-supervised inference for the selection-strategy
comparison.

Per-episode RNG streams are keyed by episode index, so results are
independent of the worker count; accuracy aggregates over T episodes with a
normal-approximation 95% confidence half-width.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import diffmath as dm
from . import heads
from .datastore import Dataset, SemiSplit
from .rng import stream
from .sampler import EpisodeSpec, LabeledPool, attach_unlabeled, sample_episode
from .trainers import (
    SSLConfig,
    PLMLConfig,
    metatrain_plml,
    pretrain_selftrain,
    pretrain_supervised,
    pseudo_label,
)

MODES = ("inductive", "transductive", "semi")

RESULTS_HEADER = [
    "nl", "variant", "head", "mode", "ways", "shots", "queries",
    "unlabeled", "acc", "ci", "episodes", "taint", "seed",
]


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation row: task spec, provenance tags, accuracy and CI."""

    nl: int
    variant: str
    head: str
    mode: str
    ways: int
    shots: int
    queries: int
    unlabeled: int
    acc: float
    ci: float
    episodes: int
    taint: bool
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0 or self.ci < 0.0:
            raise ValueError("accuracy must be in [0,1] and CI non-negative")


def _check_mode_head(mode: str, head: str) -> None:
    if mode == "inductive" and head != "proto":
        raise ValueError("inductive inference requires the proto head")
    if mode == "transductive" and head != "ep":
        raise ValueError("transductive inference requires the ep head")
    if mode == "semi" and head not in ("ep", "semiproto"):
        raise ValueError("semi-supervised inference requires the ep or semiproto head")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")


def episode_accuracy(model, episode, head: str, mode: str) -> float:
    """Fraction of episode queries whose predicted class is correct."""
    n_s, n_q = episode.support_y.size, episode.query_y.size
    ways = episode.ways
    if mode == "inductive":
        z = model.embed(np.concatenate([episode.support_x, episode.query_x], axis=0))
        state = heads.proto_fit(dm.slice_rows(z, 0, n_s), episode.support_y, ways)
        probs = heads.proto_predict(dm.slice_rows(z, n_s, n_s + n_q), state)
    elif head == "semiproto":
        z = model.embed(
            np.concatenate([episode.support_x, episode.query_x, episode.unlabeled_x], axis=0)
        )
        state = heads.proto_fit(dm.slice_rows(z, 0, n_s), episode.support_y, ways)
        if episode.unlabeled_x.shape[0]:
            state = heads.semiproto_refine(state, dm.slice_rows(z, n_s + n_q, z.shape[0]))
        probs = heads.proto_predict(dm.slice_rows(z, n_s, n_s + n_q), state)
    else:
        blocks = [episode.support_x, episode.query_x]
        if mode == "semi" and episode.unlabeled_x.shape[0]:
            blocks.append(episode.unlabeled_x)
        z = model.embed(np.concatenate(blocks, axis=0))
        probs = heads.ep_predict(z, episode.support_y, ways, n_q)
    predicted = probs.value.argmax(axis=1)
    return float(np.mean(predicted == episode.query_y))


def _worker_count() -> int:
    raw = os.environ.get("FSL_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return max(1, os.cpu_count() or 1)


def eval_fewshot(
    model,
    head: str,
    pool: LabeledPool,
    spec: EpisodeSpec,
    mode: str,
    episodes: int,
    seed: int,
    nl: int = 0,
    variant: str = "",
    taint: bool = False,
) -> MetricsRecord:
    """Accuracy over ``episodes`` tasks sampled from the pool.

    Semi-supervised mode draws spec.unlabeled_per_class extra items per
    episode class (id-disjoint from support and query) and strips their
    labels before they enter the graph. The model is never mutated.
    """
    _check_mode_head(mode, head)
    heldout = spec.unlabeled_per_class if mode == "semi" else 0

    def run_one(index: int) -> float:
        rng = stream(seed, "eval", mode, index)
        episode = sample_episode(pool, spec, rng, heldout_per_class=heldout)
        return episode_accuracy(model, episode, head, mode)

    workers = _worker_count()
    if workers > 1 and episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            accs = list(pool_exec.map(run_one, range(episodes)))
    else:
        accs = [run_one(i) for i in range(episodes)]
    accs_arr = np.asarray(accs)
    acc = float(accs_arr.mean())
    ci = float(1.96 * accs_arr.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return MetricsRecord(
        nl=nl, variant=variant, head=head, mode=mode,
        ways=spec.ways, shots=spec.shots, queries=spec.queries,
        unlabeled=heldout, acc=acc, ci=ci, episodes=episodes,
        taint=taint, seed=seed,
    )


def write_metrics_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in records:
            writer.writerow([
                r.nl, r.variant, r.head, r.mode, r.ways, r.shots, r.queries,
                r.unlabeled, f"{r.acc:.6f}", f"{r.ci:.6f}", r.episodes,
                int(r.taint), r.seed,
            ])


# ---------------------------------------------------------------------------
# experiment harnesses


@dataclass(frozen=True)
class SweepConfig:
    nl_grid: tuple[int, ...]
    variants: tuple[str, ...]           # subset of {"base", "plml"}
    n_test: int
    modes: tuple[str, ...]
    eval_spec: EpisodeSpec
    eval_episodes: int
    ssl: SSLConfig
    plml: PLMLConfig
    model_widths: tuple[int, ...]
    nonlinearity: str = "relu"
    seed: int = 0


def _head_for_mode(mode: str) -> str:
    return "proto" if mode == "inductive" else "ep"


def run_degradation_sweep(dataset: Dataset, partition, cfg: SweepConfig, model_factory) -> list[MetricsRecord]:
    """Full pipeline per (labels-per-class, variant) cell from one master seed.

    base: supervised pre-training only, evaluated directly with the head.
    plml: self-training pre-training, pseudo-labeling of the unlabeled pool,
    then episodic finetuning before evaluation. Rows come out in
    deterministic (nl, variant, mode) order.
    """
    from .datastore import split_semi

    novel_pool = LabeledPool.from_classes(dataset, partition.novel_classes)
    records: list[MetricsRecord] = []
    for nl in cfg.nl_grid:
        split = split_semi(dataset, partition.base_classes, nl, cfg.n_test, cfg.seed)
        for variant in cfg.variants:
            model = model_factory(cfg.seed)
            ssl = replace(cfg.ssl, seed=cfg.seed)
            if variant == "base":
                pretrain_supervised(dataset, split, model, ssl)
            elif variant == "plml":
                pretrain_selftrain(dataset, split, model, ssl)
                pseudo = pseudo_label(model, dataset, split)
                plml = replace(cfg.plml, seed=cfg.seed)
                metatrain_plml(dataset, partition.val_classes, split, pseudo, model, plml)
            else:
                raise ValueError(f"unknown variant {variant!r}")
            for mode in cfg.modes:
                records.append(
                    eval_fewshot(
                        model, _head_for_mode(mode), novel_pool, cfg.eval_spec,
                        mode, cfg.eval_episodes, cfg.seed, nl=nl, variant=variant,
                    )
                )
    return records


@dataclass(frozen=True)
class ComparisonConfig:
    episode: EpisodeSpec                # training episodes; unlabeled_per_class > 0
    unlabeled_modes: tuple[str, ...] = ("class_aware_oracle", "practical")
    epochs: int = 10
    episodes_per_epoch: int = 50
    lr: float = 0.01
    eval_spec: EpisodeSpec | None = None
    eval_episodes: int = 200
    repeats: int = 3
    seed: int = 0


def _train_refinement_model(dataset, split, model, episode_spec, unlabeled_mode, epochs, episodes_per_epoch, lr, seed):
    """Meta-train a prototype-refinement pipeline on labeled episodes with
    unlabeled attachments drawn in the given mode.

    Support/query sampling and unlabeled attachment use separate streams so
    runs with different modes see identical support/query episodes.
    """
    pool = LabeledPool.from_pairs(dataset, split.labeled)
    spec = replace(episode_spec, unlabeled_mode=unlabeled_mode)
    for epoch in range(1, epochs + 1):
        ep_rng = stream(seed, "compare", "episode", epoch)
        attach_rng = stream(seed, "compare", "attach", epoch)
        for _ in range(episodes_per_epoch):
            episode = sample_episode(pool, spec, ep_rng)
            episode = attach_unlabeled(episode, dataset, split, spec, attach_rng)
            n_s, n_q = episode.support_y.size, episode.query_y.size
            z = model.embed(
                np.concatenate([episode.support_x, episode.query_x, episode.unlabeled_x], axis=0)
            )
            state = heads.proto_fit(dm.slice_rows(z, 0, n_s), episode.support_y, episode.ways)
            state = heads.semiproto_refine(state, dm.slice_rows(z, n_s + n_q, z.shape[0]))
            probs = heads.proto_predict(dm.slice_rows(z, n_s, n_s + n_q), state)
            mean_ce = dm.cross_entropy(probs, dm.onehot(episode.query_y, episode.ways))
            loss = dm.scale(mean_ce, float(n_q))
            grads = dm.backward(loss, model.params.values())
            model.params = dm.sgd_step(model.params, grads, lr)
    return model


def run_selection_comparison(
    dataset: Dataset,
    partition,
    split: SemiSplit,
    cfg: ComparisonConfig,
    model_factory,
) -> list[MetricsRecord]:
    """Train the refinement pipeline under class-aware vs practical
    unlabeled attachment and evaluate both with the identical
    semi-supervised inference protocol. Class-aware rows are taint-flagged.
    """
    if not split.oracle_enabled and "class_aware_oracle" in cfg.unlabeled_modes:
        raise ValueError("selection comparison requires the split's oracle accessor")
    eval_spec = cfg.eval_spec or cfg.episode
    novel_pool = LabeledPool.from_classes(dataset, partition.novel_classes)
    records: list[MetricsRecord] = []
    for repeat in range(cfg.repeats):
        seed = cfg.seed + repeat
        for mode in cfg.unlabeled_modes:
            model = model_factory(seed)
            _train_refinement_model(
                dataset, split, model, cfg.episode, mode,
                cfg.epochs, cfg.episodes_per_epoch, cfg.lr, seed,
            )
            records.append(
                eval_fewshot(
                    model, "semiproto", novel_pool, eval_spec, "semi",
                    cfg.eval_episodes, seed, nl=len(split.labeled) // max(1, len(split.base_classes)),
                    variant=mode, taint=(mode == "class_aware_oracle"),
                )
            )
    return records
