"""Episodic task construction: M-way K-shot support/query sampling and
unlabeled attachment (uniform "practical" draws vs the class-aware oracle
mode used only to probe how much prior work leaned on hidden labels)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datastore import Dataset, SemiSplit

UNLABELED_MODES = ("none", "practical", "class_aware_oracle")


class SamplingError(ValueError):
    """The pool cannot support the requested episode."""


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int
    shots: int
    queries: int
    unlabeled_per_class: int = 0
    unlabeled_mode: str = "none"

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("need at least 2 ways")
        if self.shots < 1 or self.queries < 1:
            raise ValueError("need at least 1 shot and 1 query per class")
        if self.unlabeled_per_class < 0:
            raise ValueError("unlabeled_per_class must be non-negative")
        if self.unlabeled_mode not in UNLABELED_MODES:
            raise ValueError(f"unlabeled_mode must be one of {UNLABELED_MODES}")


@dataclass(frozen=True)
class Episode:
    """One few-shot task. Rows are grouped by local class, support first.

    ``class_map`` sends original class ids to local indices 0..M-1. The
    unlabeled block carries features and ids only - never labels.
    """

    class_map: dict[int, int]
    support_x: np.ndarray
    support_y: np.ndarray
    support_ids: tuple[str, ...]
    query_x: np.ndarray
    query_y: np.ndarray
    query_ids: tuple[str, ...]
    unlabeled_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    unlabeled_ids: tuple[str, ...] = ()
    oracle_tainted: bool = False

    @property
    def ways(self) -> int:
        return len(self.class_map)


@dataclass(frozen=True)
class LabeledPool:
    """Class-indexed view over (sample_id, label) pairs with feature lookup."""

    dataset: Dataset
    by_class: dict[int, tuple[str, ...]]

    @classmethod
    def from_pairs(cls, dataset: Dataset, pairs) -> "LabeledPool":
        grouped: dict[int, list[str]] = {}
        for sid, label in pairs:
            grouped.setdefault(int(label), []).append(sid)
        return cls(dataset, {c: tuple(sorted(ids)) for c, ids in grouped.items()})

    @classmethod
    def from_classes(cls, dataset: Dataset, classes) -> "LabeledPool":
        wanted = set(int(c) for c in classes)
        pairs = [
            (sid, int(lbl))
            for sid, lbl in zip(dataset.sample_ids, dataset.labels)
            if int(lbl) in wanted
        ]
        return cls.from_pairs(dataset, pairs)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.by_class))

    def class_size(self, cls_id: int) -> int:
        return len(self.by_class.get(cls_id, ()))


def sample_episode(
    pool: LabeledPool,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    heldout_per_class: int = 0,
) -> Episode:
    """Draw an episode without replacement from the pool.

    ``heldout_per_class`` extra items per class are drawn after support and
    query and attached as unlabeled nodes (used by semi-supervised
    inference, where episode tasks are built from an openly labeled pool).
    """
    need = spec.shots + spec.queries + heldout_per_class
    eligible = [c for c in pool.classes if pool.class_size(c) >= need]
    if len(eligible) < spec.ways:
        raise SamplingError(
            f"need {spec.ways} classes with >= {need} samples, pool has {len(eligible)}"
        )
    chosen = rng.choice(np.array(eligible, dtype=np.int64), size=spec.ways, replace=False)
    class_map = {int(c): j for j, c in enumerate(chosen)}
    support_ids: list[str] = []
    query_ids: list[str] = []
    heldout_ids: list[str] = []
    support_y: list[int] = []
    query_y: list[int] = []
    for local, cls_id in enumerate(int(c) for c in chosen):
        ids = pool.by_class[cls_id]
        picked = rng.choice(len(ids), size=need, replace=False)
        support_ids.extend(ids[i] for i in picked[: spec.shots])
        query_ids.extend(ids[i] for i in picked[spec.shots : spec.shots + spec.queries])
        heldout_ids.extend(ids[i] for i in picked[spec.shots + spec.queries :])
        support_y.extend([local] * spec.shots)
        query_y.extend([local] * spec.queries)
    ds = pool.dataset
    return Episode(
        class_map=class_map,
        support_x=ds.features_for(support_ids),
        support_y=np.array(support_y, dtype=np.int64),
        support_ids=tuple(support_ids),
        query_x=ds.features_for(query_ids),
        query_y=np.array(query_y, dtype=np.int64),
        query_ids=tuple(query_ids),
        unlabeled_x=ds.features_for(heldout_ids) if heldout_ids else np.zeros((0, ds.features.shape[1])),
        unlabeled_ids=tuple(heldout_ids),
    )


def attach_unlabeled(
    episode: Episode,
    dataset: Dataset,
    split: SemiSplit,
    spec: EpisodeSpec,
    rng: np.random.Generator,
) -> Episode:
    """Attach unlabeled samples from the split's unlabeled pool.

    practical: U*M ids drawn uniformly without replacement from the whole
    pool; hidden labels are never touched. class_aware_oracle: U ids per
    episode class via the sealed oracle accessor; the returned episode is
    flagged as oracle-tainted so downstream metrics cannot silently mix the
    two regimes.
    """
    u = spec.unlabeled_per_class
    if u <= 0 or spec.unlabeled_mode == "none":
        raise ValueError("attach_unlabeled needs unlabeled_per_class > 0 and a mode")
    pool = split.unlabeled
    if spec.unlabeled_mode == "practical":
        total = u * episode.ways
        if len(pool) < total:
            raise SamplingError(f"unlabeled pool has {len(pool)} items, need {total}")
        picked = rng.choice(len(pool), size=total, replace=False)
        ids = tuple(pool[i] for i in picked)
        tainted = episode.oracle_tainted
    elif spec.unlabeled_mode == "class_aware_oracle":
        ids_list: list[str] = []
        for cls_id in episode.class_map:
            candidates = [sid for sid in pool if split.oracle_hidden_label(sid) == cls_id]
            if len(candidates) < u:
                raise SamplingError(
                    f"class {cls_id} has {len(candidates)} unlabeled items, need {u}"
                )
            picked = rng.choice(len(candidates), size=u, replace=False)
            ids_list.extend(candidates[i] for i in picked)
        ids = tuple(ids_list)
        tainted = True
    else:
        raise ValueError(f"unsupported unlabeled_mode {spec.unlabeled_mode!r}")
    return replace(
        episode,
        unlabeled_x=dataset.features_for(ids),
        unlabeled_ids=ids,
        oracle_tainted=tainted,
    )
