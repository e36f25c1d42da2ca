"""Synthetic multi-instance worlds and a mock detector for closed-loop benchmarks.

A world is a set of class prototypes on the unit sphere plus scenes of
1..M objects whose true features scatter around their class prototype;
per-class difficulty widens that scatter and degrades the mock detector.
The detector's per-class quality grows with the number of labelled
objects of that class, so the selection loop actually closes: querying a
class improves its detections next round.

Detector draws are keyed by (world seed, detector seed, image index), so
detections for one image are reproducible and independent of which other
images are labelled; quality enters only through deterministic per-class
schedules. Everything downstream is bit-reproducible under (config, seed).

mAP cannot be reproduced without training real detectors, so the
benchmark reports a probe-classifier accuracy instead: macro-averaged
nearest-prototype accuracy using prototypes estimated from labelled true
features. The rare-class query fraction is cumulative over selection
rounds.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .config import EngineConfig
from .difficulty import DifficultyState, update_difficulties
from .records import (
    DetectionRecord,
    MatchEvent,
    RoundState,
    advance_round,
    make_object,
    make_record,
)
from .sampler import (
    DIVERSITY_STRATEGIES,
    POOL_STRATEGIES,
    QuerySet,
    baseline_select,
    two_stage_select,
)
from .similarity import similarity_matrix

# Mock-detector schedule constants: objects of a class saturate its quality
# after a few dozen labelled examples; difficulty caps attainable quality.
_SAT_COUNT = 3.0
_DIFFICULTY_CAP = 0.5
_DETECTOR_FEATURE_NOISE = 0.3

STRATEGY_ALIASES = {
    "ppal": ("dcus", "ccms"),
    "entropy": ("entropy", "none"),
    "random": ("random", "none"),
    "dcus": ("dcus", "none"),
    "coreset": ("coreset", "global"),
}


@dataclass(frozen=True)
class WorldConfig:
    """Shape of a synthetic detection world."""

    num_classes: int = 10
    num_images: int = 1000
    feature_dim: int = 32
    min_objects: int = 2
    max_objects: int = 5
    rare_classes: tuple[int, ...] = (8, 9)
    rare_image_rate: float = 0.08
    class_difficulty: tuple[float, ...] | None = None
    feature_noise: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if any(not 0 <= c < self.num_classes for c in self.rare_classes):
            raise ValueError("rare_classes out of range")
        if len(self.rare_classes) >= self.num_classes:
            raise ValueError("at least one class must be common")
        if not 0.0 <= self.rare_image_rate < 1.0:
            raise ValueError("rare_image_rate must lie in [0, 1)")
        if self.class_difficulty is not None and (
            len(self.class_difficulty) != self.num_classes
            or any(not 0.0 <= v <= 1.0 for v in self.class_difficulty)
        ):
            raise ValueError("class_difficulty must list one value in [0, 1] per class")

    def resolve_difficulty(self) -> np.ndarray:
        """Per-class difficulty; default: easy-to-moderate commons, hard rares."""
        if self.class_difficulty is not None:
            return np.asarray(self.class_difficulty, dtype=np.float64)
        difficulty = np.zeros(self.num_classes)
        common = [c for c in range(self.num_classes) if c not in self.rare_classes]
        difficulty[common] = np.linspace(0.05, 0.3, len(common))
        for k, c in enumerate(sorted(self.rare_classes)):
            difficulty[c] = min(0.85 + 0.1 * k, 1.0)
        return difficulty

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["rare_classes"] = list(self.rare_classes)
        if out["class_difficulty"] is not None:
            out["class_difficulty"] = list(out["class_difficulty"])
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "rare_classes" in payload:
            payload["rare_classes"] = tuple(payload["rare_classes"])
        if payload.get("class_difficulty") is not None:
            payload["class_difficulty"] = tuple(payload["class_difficulty"])
        return cls(**payload)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    feature: np.ndarray


@dataclass
class SyntheticWorld:
    """Ground truth: prototypes, difficulties, and per-image object scenes."""

    config: WorldConfig
    prototypes: np.ndarray
    class_difficulty: np.ndarray
    images: list[tuple[SceneObject, ...]]
    image_ids: list[str]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def index_of(self, image_id: str) -> int:
        return int(image_id.rsplit("_", 1)[1])


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def build_world(config: WorldConfig) -> SyntheticWorld:
    """Generate a world deterministically from its config (incl. seed)."""
    rng = np.random.default_rng([config.seed, 271828])
    prototypes = _unit_rows(rng.normal(size=(config.num_classes, config.feature_dim)))
    difficulty = config.resolve_difficulty()
    common = [c for c in range(config.num_classes) if c not in config.rare_classes]
    # Easy classes separate almost perfectly however few labels they get;
    # hard ones sit on the steep part of the accuracy-vs-labels curve.
    spread = config.feature_noise * (0.45 + 0.62 * difficulty)

    images: list[tuple[SceneObject, ...]] = []
    for _ in range(config.num_images):
        classes: list[int]
        if config.rare_classes and rng.random() < config.rare_image_rate:
            # Rare scenes: one rare object in an otherwise common context.
            classes = [int(rng.choice(config.rare_classes))]
            classes += [int(c) for c in rng.choice(common, size=int(rng.integers(1, 3)))]
        else:
            count = int(rng.integers(config.min_objects, config.max_objects + 1))
            classes = [int(c) for c in rng.choice(common, size=count)]
        scene = []
        for c in classes:
            feat = prototypes[c] + spread[c] * rng.normal(size=config.feature_dim)
            scene.append(SceneObject(class_id=c, feature=feat / np.linalg.norm(feat)))
        images.append(tuple(scene))
    ids = [f"img_{i:05d}" for i in range(config.num_images)]
    return SyntheticWorld(
        config=config,
        prototypes=prototypes,
        class_difficulty=difficulty,
        images=images,
        image_ids=ids,
    )


def _labelled_class_counts(world: SyntheticWorld, labelled_ids: Iterable[str]) -> np.ndarray:
    counts = np.zeros(world.num_classes)
    for image_id in labelled_ids:
        for obj in world.images[world.index_of(image_id)]:
            counts[obj.class_id] += 1
    return counts


def _class_quality(world: SyntheticWorld, labelled_ids: Iterable[str]) -> np.ndarray:
    counts = _labelled_class_counts(world, labelled_ids)
    return (counts / (counts + _SAT_COUNT)) * (1.0 - _DIFFICULTY_CAP * world.class_difficulty)


def simulate_detector(
    world: SyntheticWorld,
    labelled_ids: Iterable[str],
    seed: int = 0,
    train_iters: int = 40,
    batch_size: int = 8,
) -> tuple[list[DetectionRecord], list[tuple[int, list[MatchEvent]]]]:
    """Mock one trained-detector pass: detections for every image plus
    per-iteration training match events over the labelled set.

    Per-class detection quality follows the labelled object counts; with
    nothing labelled the probability vectors are near uniform, and a fully
    labelled easy class approaches one-hot probabilities and IoU 1.
    """
    labelled = sorted(set(labelled_ids))
    known = set(world.image_ids)
    unknown = [i for i in labelled if i not in known]
    if unknown:
        raise ValueError(f"labelled ids not in world: {unknown[:5]}")
    quality = _class_quality(world, labelled)
    ways = world.num_classes + 1
    dim = world.config.feature_dim

    records: list[DetectionRecord] = []
    for idx, image_id in enumerate(world.image_ids):
        rng = np.random.default_rng([world.config.seed, seed, idx])
        objects = []
        mean_true = None
        for obj in world.images[idx]:
            rho = quality[obj.class_id]
            u = rng.uniform(0.95, 1.0)
            p_true = 1.0 / ways + (1.0 - 1.0 / ways) * rho * u
            # Remaining mass: near uniform when untrained, concentrating on a
            # runner-up class as quality grows (so learned classes have low
            # entropy, not just a lower peak).
            runner = int(rng.integers(0, ways - 1))
            if runner >= obj.class_id:
                runner += 1
            tilt = rng.uniform(0.8, 1.2, size=ways)
            tilt[obj.class_id] = 0.0
            tilt /= tilt.sum()
            rest = 1.0 - p_true
            concentration = 0.85 * rho
            probs = rest * (1.0 - concentration) * tilt
            probs[runner] += rest * concentration
            probs[obj.class_id] = p_true
            probs /= probs.sum()
            noise = _DETECTOR_FEATURE_NOISE * (0.15 + 0.85 * (1.0 - rho))
            feat = obj.feature + noise * rng.normal(size=dim)
            score = float(np.clip(0.2 + 0.6 * rho + rng.uniform(0.0, 0.2), 0.0, 1.0))
            predicted = int(np.argmax(probs[: world.num_classes]))
            objects.append(make_object(feat, predicted, score, probs))
        if world.images[idx]:
            mean_true = np.mean([o.feature for o in world.images[idx]], axis=0)
        else:
            mean_true = np.ones(dim)
        fpn = tuple(
            mean_true + 0.08 * (level + 1) * rng.normal(size=dim) for level in range(3)
        )
        records.append(make_record(image_id, objects, fpn_features=fpn))

    events: list[tuple[int, list[MatchEvent]]] = []
    if labelled:
        rng_e = np.random.default_rng([world.config.seed, seed, 999_983])
        for iteration in range(train_iters):
            batch = rng_e.choice(labelled, size=min(batch_size, len(labelled)), replace=False)
            matches = []
            for image_id in batch:
                for obj in world.images[world.index_of(image_id)]:
                    rho = quality[obj.class_id]
                    hard = world.class_difficulty[obj.class_id]
                    p_base = 1.0 / ways + (1.0 - 1.0 / ways) * rho
                    prob = float(np.clip(p_base * rng_e.uniform(0.75, 1.0), 0.0, 1.0))
                    miss = (1.0 - rho) * (0.25 + 0.75 * hard) * rng_e.uniform(0.5, 1.0)
                    iou = float(np.clip(1.0 - miss, 0.0, 1.0))
                    matches.append(MatchEvent(class_id=obj.class_id, prob=prob, iou=iou))
            events.append((iteration, matches))
    return records, events


def jaccard(categories_a, categories_b) -> float:
    """Category-set overlap |A & B| / |A | B|; 1 when both sets are empty."""
    a = set(categories_a)
    b = set(categories_b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def coverage_entropy(world: SyntheticWorld, image_ids: Iterable[str]) -> float:
    """Entropy (nats) of the true-class histogram over the given images."""
    counts = _labelled_class_counts(world, image_ids)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(-np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))


def rare_query_fraction(world: SyntheticWorld, queried_ids: Sequence[str]) -> float:
    """Fraction of queried images containing at least one rare-class object."""
    if not queried_ids:
        return 0.0
    rare = set(world.config.rare_classes)
    hits = sum(
        1
        for image_id in queried_ids
        if any(o.class_id in rare for o in world.images[world.index_of(image_id)])
    )
    return hits / len(queried_ids)


def probe_accuracy(world: SyntheticWorld, labelled_ids: Iterable[str]) -> float:
    """Macro-averaged nearest-prototype accuracy over all world objects.

    Prototypes are the normalized mean true features of labelled objects;
    classes with no labelled objects cannot be predicted and score 0.
    """
    sums = np.zeros((world.num_classes, world.config.feature_dim))
    counts = np.zeros(world.num_classes)
    for image_id in labelled_ids:
        for obj in world.images[world.index_of(image_id)]:
            sums[obj.class_id] += obj.feature
            counts[obj.class_id] += 1
    available = counts > 0
    if not available.any():
        return 0.0
    protos = np.zeros_like(sums)
    protos[available] = _unit_rows(sums[available])

    feats = np.array([o.feature for scene in world.images for o in scene])
    labels = np.array([o.class_id for scene in world.images for o in scene])
    scores = feats @ protos.T
    scores[:, ~available] = -2.0  # below any cosine
    preds = np.argmax(scores, axis=1)
    per_class = []
    for c in range(world.num_classes):
        mask = labels == c
        if mask.any():
            per_class.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(per_class))


def parse_strategy(name: str) -> tuple[str, str]:
    """Resolve a strategy name ('ppal', 'random', or 'pool/diversity')."""
    if name in STRATEGY_ALIASES:
        return STRATEGY_ALIASES[name]
    if "/" in name:
        pool, diversity = name.split("/", 1)
        if pool in POOL_STRATEGIES and diversity in DIVERSITY_STRATEGIES:
            return pool, diversity
    raise ValueError(
        f"unknown strategy {name!r}; expected an alias {sorted(STRATEGY_ALIASES)} "
        f"or 'pool/diversity' with pool in {POOL_STRATEGIES} and diversity in "
        f"{DIVERSITY_STRATEGIES}"
    )


@dataclass(frozen=True)
class BenchConfig:
    """Closed-loop benchmark: strategy arms sharing worlds and seeds."""

    strategies: tuple[str, ...]
    rounds: int = 6
    budget: int = 25
    seeds: tuple[int, ...] = (0, 1, 2)
    init_labelled: int = 50
    train_iters: int = 40
    batch_size: int = 8
    world: WorldConfig = field(default_factory=WorldConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if not self.strategies:
            raise ValueError("need at least one strategy")
        for name in self.strategies:
            parse_strategy(name)
        if self.rounds < 1 or self.budget < 1 or self.init_labelled < 0:
            raise ValueError("rounds and budget must be >= 1, init_labelled >= 0")
        needed = self.init_labelled + self.rounds * self.budget
        if needed > self.world.num_images:
            raise ValueError(
                f"{needed} labelled images needed but world has {self.world.num_images}"
            )

    def to_dict(self) -> dict:
        return {
            "strategies": list(self.strategies),
            "rounds": self.rounds,
            "budget": self.budget,
            "seeds": list(self.seeds),
            "init_labelled": self.init_labelled,
            "train_iters": self.train_iters,
            "batch_size": self.batch_size,
            "world": self.world.to_dict(),
            "engine": self.engine.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BenchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "strategies" in payload:
            payload["strategies"] = tuple(payload["strategies"])
        if "seeds" in payload:
            payload["seeds"] = tuple(payload["seeds"])
        if "world" in payload:
            payload["world"] = WorldConfig.from_dict(payload["world"])
        if "engine" in payload:
            payload["engine"] = EngineConfig.from_dict(payload["engine"])
        return cls(**payload)


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    seed: int
    round: int
    coverage_entropy: float
    rare_fraction: float
    probe_acc: float
    seconds: float


CSV_HEADER = ("strategy", "seed", "round", "coverage_entropy", "rare_fraction", "probe_acc", "seconds")


@dataclass
class BenchReport:
    rows: list[BenchRow]
    config: BenchConfig

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow(
                    [
                        row.strategy,
                        row.seed,
                        row.round,
                        row.coverage_entropy,
                        row.rare_fraction,
                        row.probe_acc,
                        row.seconds,
                    ]
                )

    def to_json(self, path) -> None:
        payload = {
            "config": self.config.to_dict(),
            "rows": [dataclasses.asdict(row) for row in self.rows],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    def final_round(self, strategy: str, seed: int) -> BenchRow:
        rows = [r for r in self.rows if r.strategy == strategy and r.seed == seed]
        if not rows:
            raise ValueError(f"no rows for strategy {strategy!r} seed {seed}")
        return max(rows, key=lambda r: r.round)


def _select(
    strategy: str,
    dataset: Sequence[DetectionRecord],
    round_state: RoundState,
    difficulty_state: DifficultyState,
    engine: EngineConfig,
    seed: int,
) -> QuerySet:
    pool, diversity = parse_strategy(strategy)
    if pool == "coreset":
        return baseline_select("coreset_global", dataset, round_state, seed=seed, config=engine)
    return two_stage_select(
        dataset,
        round_state,
        difficulty_state,
        engine,
        pool_strategy=pool,
        diversity=diversity,
        seed=seed,
    )


def run_al_benchmark(config: BenchConfig) -> BenchReport:
    """Run every strategy arm over shared worlds and seeds; one row per
    (strategy, seed, selection round)."""
    rows: list[BenchRow] = []
    for seed in config.seeds:
        world = build_world(dataclasses.replace(config.world, seed=seed))
        init_rng = np.random.default_rng([seed, 424242])
        init_ids = set(
            init_rng.choice(world.image_ids, size=config.init_labelled, replace=False).tolist()
            if config.init_labelled
            else []
        )
        for strategy in config.strategies:
            state = RoundState(
                round=0,
                labelled_ids=set(init_ids),
                unlabelled_ids=set(world.image_ids) - init_ids,
                budget=config.budget,
                config=config.engine.to_dict(),
            )
            queried: list[str] = []
            for r in range(1, config.rounds + 1):
                start = time.perf_counter()
                records, events = simulate_detector(
                    world,
                    state.labelled_ids,
                    seed=r,
                    train_iters=config.train_iters,
                    batch_size=config.batch_size,
                )
                # Difficulties restart from 1 each round, then track the
                # round's training stream.
                tracker = DifficultyState.fresh(
                    world.num_classes, m0=config.engine.m0, xi=config.engine.xi
                )
                for _, matches in events:
                    tracker = update_difficulties(tracker, matches)
                queries = _select(
                    strategy, records, state, tracker, config.engine,
                    seed=seed * 1_000_003 + r,
                )
                seconds = time.perf_counter() - start
                state = advance_round(state, queries)
                queried.extend(queries.ids)
                rows.append(
                    BenchRow(
                        strategy=strategy,
                        seed=seed,
                        round=r,
                        coverage_entropy=coverage_entropy(world, state.labelled_ids),
                        rare_fraction=rare_query_fraction(world, queried),
                        probe_acc=probe_accuracy(world, state.labelled_ids),
                        seconds=seconds,
                    )
                )
    return BenchReport(rows=rows, config=config)


@dataclass
class RetrievalReport:
    """Per-anchor top-k retrieval quality for one similarity kind."""

    kind: str
    k: int
    anchors: list[str]
    mean_similarity: list[float]
    mean_jaccard: list[float]
    spearman: float | None
    metadata: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def retrieval_correlation(
    records: Sequence[DetectionRecord], k: int = 20, kind: str = "ccms"
) -> RetrievalReport:
    """Retrieve each anchor's top-k most similar images and report how the
    per-anchor mean similarity tracks the mean category-set Jaccard.

    Mean similarities are min-max normalized over the anchor set (recorded
    in metadata); the rank correlation is Spearman's rho, which the
    normalization leaves unchanged.
    """
    records = list(records)
    n = len(records)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the pool size {n}")
    sim = similarity_matrix(records, kind)
    class_sets = [r.class_set() for r in records]
    mean_sims = []
    mean_jacs = []
    for i in range(n):
        row = sim.values[i].copy()
        row[i] = -np.inf
        top = np.lexsort((np.arange(n), -row))[:k]
        mean_sims.append(float(row[top].mean()))
        mean_jacs.append(float(np.mean([jaccard(class_sets[i], class_sets[j]) for j in top])))
    lo = min(mean_sims)
    hi = max(mean_sims)
    degenerate = hi <= lo
    normalized = [0.0 if degenerate else (x - lo) / (hi - lo) for x in mean_sims]
    if degenerate or min(mean_jacs) == max(mean_jacs):
        spearman = None  # rank correlation undefined for constant input
    else:
        rho = stats.spearmanr(mean_sims, mean_jacs).statistic
        spearman = None if np.isnan(rho) else float(rho)
    return RetrievalReport(
        kind=kind,
        k=k,
        anchors=[r.image_id for r in records],
        mean_similarity=normalized,
        mean_jaccard=mean_jacs,
        spearman=spearman,
        metadata={
            "normalization": "minmax over per-anchor mean similarities",
            "raw_min": lo,
            "raw_max": hi,
            "degenerate": degenerate,
        },
    )


def retrieval_benchmark(
    world_config: WorldConfig,
    k: int = 20,
    kinds: Sequence[str] = ("ccms", "global"),
    seeds: Sequence[int] = (0,),
    labelled_fraction: float = 1.0,
) -> dict:
    """Run retrieval_correlation per similarity kind over fresh worlds.

    The mock detector is conditioned on a ``labelled_fraction`` random
    subset so detection quality is realistic rather than uniform noise.
    """
    if not 0.0 <= labelled_fraction <= 1.0:
        raise ValueError("labelled_fraction must lie in [0, 1]")
    reports: dict[str, list[dict]] = {kind: [] for kind in kinds}
    for seed in seeds:
        world = build_world(dataclasses.replace(world_config, seed=seed))
        count = int(round(labelled_fraction * len(world.image_ids)))
        rng = np.random.default_rng([seed, 777])
        labelled = rng.choice(world.image_ids, size=count, replace=False).tolist()
        records, _ = simulate_detector(world, labelled, seed=1)
        for kind in kinds:
            report = retrieval_correlation(records, k=k, kind=kind)
            payload = report.to_dict()
            payload["seed"] = seed
            reports[kind].append(payload)
    summary = {
        kind: {
            "spearman_per_seed": [r["spearman"] for r in reports[kind]],
            "spearman_mean": float(
                np.mean([r["spearman"] for r in reports[kind] if r["spearman"] is not None])
            )
            if any(r["spearman"] is not None for r in reports[kind])
            else None,
        }
        for kind in kinds
    }
    return {
        "k": k,
        "kinds": list(kinds),
        "seeds": list(seeds),
        "labelled_fraction": labelled_fraction,
        "world": world_config.to_dict(),
        "summary": summary,
        "reports": reports,
    }


def brute_force_min_max_subset(sim, k: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimizer of the max pairwise similarity over size-k subsets.

    Test oracle for the diversity objective; guarded to n <= 15. Ties go to
    the lexicographically first subset; a singleton has objective 0.
    """
    values = np.asarray(getattr(sim, "values", sim), dtype=np.float64)
    n = values.shape[0]
    if n > 15:
        raise ValueError(f"brute force is guarded to n <= 15, got n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    best_subset: tuple[int, ...] | None = None
    best_obj = np.inf
    for subset in itertools.combinations(range(n), k):
        if k == 1:
            obj = 0.0
        else:
            obj = max(values[a, b] for a, b in itertools.combinations(subset, 2))
        if obj < best_obj:
            best_subset = subset
            best_obj = obj
    return best_subset, float(best_obj)
