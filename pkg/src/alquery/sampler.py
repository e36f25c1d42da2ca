"""Query samplers: diversity-stage algorithms, the two-stage pipeline, baselines.

The two-stage pipeline first ranks unlabelled images by (optionally
difficulty-weighted) uncertainty and keeps an expanded candidate pool,
then picks a diverse and representative subset of the pool: k-center
greedy seeds a similarity-medoid kmeans whose centers become the queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import EngineConfig
from .difficulty import DifficultyState, difficulty_coefficients
from .records import DetectionRecord, RoundState
from .similarity import similarity_matrix
from .uncertainty import UncertaintyReport, score_images, select_candidate_pool

POOL_STRATEGIES = ("random", "entropy", "dcus")
DIVERSITY_STRATEGIES = ("none", "rand", "global", "fpn", "ccms", "kl")
BASELINES = ("random", "entropy", "coreset_global")


@dataclass(frozen=True)
class Provenance:
    """Why one image was selected: its score, cluster, and selection stage."""

    uncertainty: float | None
    cluster: int | None
    stage: str


@dataclass
class QuerySet:
    """Ordered selection of image ids for one annotation round."""

    round: int
    ids: list[str]
    provenance: dict[str, Provenance]

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "ids": list(self.ids),
            "provenance": {
                i: {"uncertainty": p.uncertainty, "cluster": p.cluster, "stage": p.stage}
                for i, p in sorted(self.provenance.items())
            },
        }


def _matrix_values(sim) -> np.ndarray:
    values = np.asarray(getattr(sim, "values", sim), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"similarity matrix must be square, got shape {values.shape}")
    return values


def k_center_greedy(sim, k: int, seed_index: int = 0) -> list[int]:
    """Greedy 2-approximation of the min-max coverage objective.

    Distances are ``2 - sim``. The first center is ``seed_index`` (the
    caller passes the most uncertain pool image); each following center is
    the point farthest from the chosen set, ties to the lowest index.
    """
    values = _matrix_values(sim)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed index {seed_index} out of range [0, {n})")
    dist = 2.0 - values
    centers = [int(seed_index)]
    min_dist = dist[seed_index].copy()
    min_dist[seed_index] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(min_dist))
        centers.append(nxt)
        min_dist = np.minimum(min_dist, dist[nxt])
        min_dist[nxt] = -np.inf
    return centers


def kmeans_pp_similarity(
    sim,
    num_clusters: int,
    init: Sequence[int],
    max_iter: int = 100,
    return_trace: bool = False,
):
    """Medoid kmeans on a similarity matrix, seeded with ``init``.

    Points join the center of maximal similarity (ties to the lowest
    center position); each non-empty cluster re-centers on the member with
    the largest summed intra-cluster similarity (ties to the lowest
    index); empty clusters keep their center. Stops at a fixpoint or after
    ``max_iter`` iterations and returns ``num_clusters`` distinct indices.

    With ``return_trace`` also returns the per-iteration assignment
    objective (summed point-to-center similarity) and a convergence flag.
    """
    values = _matrix_values(sim)
    n = values.shape[0]
    centers = [int(c) for c in init]
    if len(centers) != num_clusters:
        raise ValueError(f"init has {len(centers)} centers, expected {num_clusters}")
    if len(set(centers)) != len(centers):
        raise ValueError("init centers must be distinct")
    if any(not 0 <= c < n for c in centers):
        raise ValueError(f"init centers out of range [0, {n})")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")

    objectives: list[float] = []
    converged = False
    for _ in range(max_iter):
        center_sim = values[:, centers]
        assign = np.argmax(center_sim, axis=1)
        objectives.append(float(center_sim[np.arange(n), assign].sum()))

        members_of = [np.flatnonzero(assign == ci) for ci in range(num_clusters)]
        # Kept centers of empty clusters are off-limits for other medoids so
        # the returned centers stay distinct.
        taken = {centers[ci] for ci in range(num_clusters) if members_of[ci].size == 0}
        new_centers = list(centers)
        for ci in range(num_clusters):
            members = members_of[ci]
            if members.size == 0:
                continue
            sums = values[np.ix_(members, members)].sum(axis=1)
            choice = None
            for m in members[np.argsort(-sums, kind="stable")]:
                if int(m) not in taken:
                    choice = int(m)
                    break
            if choice is None:
                old = centers[ci]
                choice = old if old not in taken else next(
                    p for p in range(n) if p not in taken
                )
            new_centers[ci] = choice
            taken.add(choice)
        if new_centers == centers:
            converged = True
            break
        centers = new_centers

    if return_trace:
        return centers, objectives, converged
    return centers


def _records_by_id(dataset: Sequence[DetectionRecord]) -> dict[str, DetectionRecord]:
    by_id: dict[str, DetectionRecord] = {}
    for record in dataset:
        if record.image_id in by_id:
            raise ValueError(f"duplicate image id {record.image_id!r} in dataset")
        by_id[record.image_id] = record
    return by_id


def two_stage_select(
    dataset: Sequence[DetectionRecord],
    round_state: RoundState,
    difficulty_state: DifficultyState | None,
    config: EngineConfig,
    pool_strategy: str = "dcus",
    diversity: str = "ccms",
    budget: int | None = None,
    seed: int | None = None,
) -> QuerySet:
    """Generalized two-stage selection covering the ablation grid.

    ``pool_strategy`` picks the candidate pool (uniform / plain entropy /
    difficulty-calibrated uncertainty); ``diversity`` picks stage two
    (truncate, uniform, or k-center + medoid kmeans on a similarity kind).
    """
    if pool_strategy not in POOL_STRATEGIES:
        raise ValueError(f"unknown pool strategy {pool_strategy!r}")
    if diversity not in DIVERSITY_STRATEGIES:
        raise ValueError(f"unknown diversity strategy {diversity!r}")
    by_id = _records_by_id(dataset)
    unlabelled = sorted(round_state.unlabelled_ids)
    if not unlabelled:
        raise ValueError("unlabelled set is empty")
    budget = round_state.budget if budget is None else budget
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if budget > len(unlabelled):
        raise ValueError(f"budget {budget} exceeds unlabelled pool size {len(unlabelled)}")
    missing = [i for i in unlabelled if i not in by_id]
    if missing:
        raise ValueError(f"no detection record for unlabelled ids {missing[:5]}")
    seed = config.seed if seed is None else seed
    delta = 1.0 if diversity == "none" else config.delta

    report: UncertaintyReport | None = None
    if pool_strategy == "random":
        rng = np.random.default_rng([seed, 0])
        pool_size = min(int(np.floor(delta * budget + 0.5)), len(unlabelled))
        pool = [unlabelled[i] for i in rng.choice(len(unlabelled), size=pool_size, replace=False)]
    else:
        if pool_strategy == "dcus":
            if difficulty_state is None:
                raise ValueError("dcus pool strategy needs a difficulty state")
            coeffs = difficulty_coefficients(difficulty_state, config.alpha, config.beta)
        else:
            coeffs = None
        report = score_images((by_id[i] for i in unlabelled), coeffs, config.measure)
        pool = select_candidate_pool(report, unlabelled, budget, delta)

    def info(image_id: str, cluster: int | None, stage: str) -> Provenance:
        score = report.scores[image_id] if report is not None else None
        return Provenance(uncertainty=score, cluster=cluster, stage=stage)

    if diversity == "none":
        chosen = pool[:budget]
        provenance = {i: info(i, None, pool_strategy) for i in chosen}
    elif diversity == "rand":
        rng = np.random.default_rng([seed, 1])
        picks = rng.choice(len(pool), size=budget, replace=False)
        chosen = [pool[i] for i in picks]
        provenance = {i: info(i, None, "rand") for i in chosen}
    else:
        sim = similarity_matrix([by_id[i] for i in pool], diversity)
        init = k_center_greedy(sim, budget, seed_index=0)
        centers = kmeans_pp_similarity(sim, budget, init, config.kmeans_max_iter)
        init_set = set(init)
        chosen = [pool[c] for c in centers]
        provenance = {
            pool[c]: info(pool[c], ci, "kcenter" if c in init_set else "kmeans")
            for ci, c in enumerate(centers)
        }
    return QuerySet(round=round_state.round, ids=chosen, provenance=provenance)


def ppal_select(
    dataset: Sequence[DetectionRecord],
    round_state: RoundState,
    difficulty_state: DifficultyState,
    config: EngineConfig,
) -> QuerySet:
    """Full two-stage selection: difficulty-calibrated uncertainty pool, then
    k-center-seeded medoid kmeans on the configured similarity kind."""
    return two_stage_select(
        dataset,
        round_state,
        difficulty_state,
        config,
        pool_strategy="dcus",
        diversity=config.similarity_kind,
    )


def baseline_select(
    kind: str,
    dataset: Sequence[DetectionRecord],
    round_state: RoundState,
    budget: int | None = None,
    seed: int = 0,
    config: EngineConfig | None = None,
) -> QuerySet:
    """Reference samplers: uniform random, plain summed entropy, and k-center
    greedy on whole-image similarity over all unlabelled images."""
    config = config or EngineConfig()
    if kind == "random":
        return two_stage_select(
            dataset, round_state, None, config,
            pool_strategy="random", diversity="none", budget=budget, seed=seed,
        )
    if kind == "entropy":
        return two_stage_select(
            dataset, round_state, None, config,
            pool_strategy="entropy", diversity="none", budget=budget, seed=seed,
        )
    if kind == "coreset_global":
        by_id = _records_by_id(dataset)
        unlabelled = sorted(round_state.unlabelled_ids)
        if not unlabelled:
            raise ValueError("unlabelled set is empty")
        budget = round_state.budget if budget is None else budget
        if not 1 <= budget <= len(unlabelled):
            raise ValueError(f"budget {budget} out of range [1, {len(unlabelled)}]")
        missing = [i for i in unlabelled if i not in by_id]
        if missing:
            raise ValueError(f"no detection record for unlabelled ids {missing[:5]}")
        sim = similarity_matrix([by_id[i] for i in unlabelled], "global")
        picked = k_center_greedy(sim, budget, seed_index=0)
        ids = [unlabelled[c] for c in picked]
        provenance = {i: Provenance(None, None, "coreset") for i in ids}
        return QuerySet(round=round_state.round, ids=ids, provenance=provenance)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
