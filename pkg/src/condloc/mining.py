"""Training-tuple construction: positives, negatives and per-epoch hard mining.

Reference images are matched to a query by co-visibility of landmarks;
mixed-condition images by camera pose thresholds, sampled evenly across
conditions. Negatives share no landmark with the query and are far away in
both position and orientation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MiningError
from .geometry import rotation_distance_deg, translation_distance
from .synthworld import CapturedImage, Dataset

log = logging.getLogger(__name__)


@dataclass
class MiningConfig:
    t_i: float = 0.6
    t_R: float = 10.0
    t_T: float = 8.0
    P: int = 8
    N: int = 8
    reference_resample_count: int = 200
    positives_per_condition: int = 2
    strict: bool = True
    hard_negatives: bool = True
    reference_queries: bool = True  # the epoch's reference subset also serves as queries

    def validate(self):
        if not 0 < self.t_i <= 1:
            raise MiningError("t_i must lie in (0, 1]")
        if self.t_R <= 0 or self.t_T <= 0:
            raise MiningError("t_R and t_T must be positive")
        if self.P < 1 or self.N < 1:
            raise MiningError("P and N must be >= 1")


@dataclass(frozen=True)
class TrainingTuple:
    query: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self):
        if self.query in self.positives or self.query in self.negatives:
            raise MiningError(f"query {self.query} appears inside its own tuple")
        if set(self.positives) & set(self.negatives):
            raise MiningError(f"tuple for {self.query} has overlapping positives and negatives")

    @property
    def image_ids(self) -> list[str]:
        return [self.query, *self.positives, *self.negatives]

    @property
    def labels(self) -> list[int]:
        return [1] * len(self.positives) + [0] * len(self.negatives)


def covisibility_ratio(query: CapturedImage, other: CapturedImage) -> float:
    """|p(other) & p(query)| / |p(query)|, normalized by the query's set."""
    if not query.visible_ids:
        raise MiningError(f"query {query.image_id} sees no landmark; co-visibility is undefined")
    return len(query.visible_ids & other.visible_ids) / len(query.visible_ids)


def covisibility_positives(query: CapturedImage, candidates: Iterable[CapturedImage], t_i: float = 0.6) -> set[str]:
    if not query.visible_ids:
        raise MiningError(f"query {query.image_id} sees no landmark; co-visibility is undefined")
    return {
        c.image_id
        for c in candidates
        if c.image_id != query.image_id and covisibility_ratio(query, c) > t_i
    }


def pose_close(a: CapturedImage, b: CapturedImage, t_R: float, t_T: float) -> bool:
    return (
        rotation_distance_deg(a.pose.rotation, b.pose.rotation) < t_R
        and translation_distance(a.pose.translation, b.pose.translation) < t_T
    )


def pose_positives(
    query: CapturedImage,
    candidates: Iterable[CapturedImage],
    t_R: float = 10.0,
    t_T: float = 8.0,
    condition: str | None = None,
) -> set[str]:
    """Candidates of ``condition`` within both pose thresholds (strict inequalities)."""
    return {
        c.image_id
        for c in candidates
        if c.image_id != query.image_id
        and (condition is None or c.condition == condition)
        and pose_close(query, c, t_R, t_T)
    }


def condition_balanced_positives(
    pools: Mapping[str, Sequence[str]], count: int, seed
) -> list[str]:
    """Up to ``count`` refs from every condition pool, without replacement."""
    if not any(len(p) for p in pools.values()):
        raise MiningError("every condition pool is empty")
    rng = np.random.default_rng(seed)
    out = []
    for cond in sorted(pools):
        pool = sorted(pools[cond])
        k = min(count, len(pool))
        if k:
            out.extend(pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False)))
    return out


def negatives_of(
    query: CapturedImage, candidates: Iterable[CapturedImage], t_R: float = 10.0, t_T: float = 8.0
) -> set[str]:
    """Images sharing no landmark with the query and beyond both pose thresholds."""
    out = set()
    for c in candidates:
        if c.image_id == query.image_id or query.visible_ids & c.visible_ids:
            continue
        rot = rotation_distance_deg(query.pose.rotation, c.pose.rotation)
        trans = translation_distance(query.pose.translation, c.pose.translation)
        if rot >= t_R and trans >= t_T:
            out.add(c.image_id)
    return out


def hard_negative_mine(
    query_descriptor: np.ndarray, pool_descriptors: np.ndarray, pool_ids: Sequence[str], N: int
) -> list[str]:
    """The N pool entries most similar to the query; ties go to the smaller id."""
    if len(pool_ids) == 0:
        raise MiningError("hard-negative pool is empty")
    sims = np.asarray(pool_descriptors, dtype=np.float64) @ np.asarray(query_descriptor, dtype=np.float64)
    ids = np.asarray(pool_ids)
    order = np.lexsort((ids, -sims))
    return [str(ids[i]) for i in order[:N]]


def resample_reference(reference_ids: Sequence[str], count: int, seed: int, epoch: int) -> list[str]:
    if count > len(reference_ids):
        raise MiningError(f"cannot draw {count} references from a split of {len(reference_ids)}")
    rng = np.random.default_rng([seed, epoch, 0x5EF])
    picked = np.sort(rng.choice(len(reference_ids), size=count, replace=False))
    return [reference_ids[i] for i in picked]


def build_training_tuples(
    dataset: Dataset,
    config: MiningConfig,
    epoch: int,
    seed: int,
    descriptors: Mapping[str, np.ndarray] | None = None,
    reference_ids: Sequence[str] | None = None,
) -> list[TrainingTuple]:
    """Mine one epoch of tuples for every mixed-condition query, followed by
    the epoch's reference subset when ``config.reference_queries`` is set.

    ``descriptors`` (image id -> unit descriptor of the current model) enables
    hard-negative mining; without it negatives are sampled uniformly.
    ``reference_ids`` defaults to this epoch's resampled reference subset.
    """
    config.validate()
    refs_all = dataset.split("reference")
    if reference_ids is None:
        count = min(config.reference_resample_count, len(refs_all))
        reference_ids = resample_reference([r.image_id for r in refs_all], count, seed, epoch)
    refs = [dataset.by_id[i] for i in reference_ids]
    mixed = dataset.split("mixed")
    pool = refs + mixed
    conditions = sorted({m.condition for m in mixed})

    tuples, skipped = [], []
    queries = mixed + refs if config.reference_queries else mixed
    for qi, query in enumerate(queries):
        rng = np.random.default_rng([seed, epoch, qi, 0x70])
        cov = covisibility_positives(query, refs, config.t_i) if query.visible_ids else set()
        if query.split == "reference":
            cov -= {query.image_id}
        pools = {c: sorted(pose_positives(query, mixed, config.t_R, config.t_T, c)) for c in conditions}
        balanced = (
            condition_balanced_positives(pools, config.positives_per_condition, rng)
            if any(pools.values())
            else []
        )
        candidates = sorted(cov | set(balanced))
        if len(candidates) >= config.P:
            positives = [candidates[i] for i in sorted(rng.choice(len(candidates), config.P, replace=False))]
        elif candidates and not config.strict:
            positives = [candidates[i] for i in rng.choice(len(candidates), config.P, replace=True)]
        else:
            skipped.append(query.image_id)
            continue

        negs = sorted(negatives_of(query, pool, config.t_R, config.t_T))
        if len(negs) < config.N:
            skipped.append(query.image_id)
            continue
        if descriptors is not None and config.hard_negatives:
            negatives = hard_negative_mine(
                descriptors[query.image_id], np.stack([descriptors[i] for i in negs]), negs, config.N
            )
        else:
            negatives = [negs[i] for i in sorted(rng.choice(len(negs), config.N, replace=False))]
        tuples.append(TrainingTuple(query.image_id, tuple(positives), tuple(negatives)))

    if skipped:
        log.info("epoch %d: skipped %d queries without enough positives/negatives", epoch, len(skipped))
    if not tuples:
        raise MiningError("no query produced a training tuple")
    return tuples


def write_tuples(tuples: Iterable[TrainingTuple], path, header: dict | None = None) -> Path:
    """JSON lines; an optional first line ``{"header": {...}}`` carries metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for t in tuples:
            row = asdict(t)
            row["positives"], row["negatives"] = list(t.positives), list(t.negatives)
            fh.write(json.dumps(row) + "\n")
    return path


def read_tuples(path) -> tuple[dict, list[TrainingTuple]]:
    header, tuples = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if "header" in row:
            header = row["header"]
            continue
        tuples.append(TrainingTuple(row["query"], tuple(row["positives"]), tuple(row["negatives"])))
    return header, tuples
