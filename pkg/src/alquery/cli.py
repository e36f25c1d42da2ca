"""Command-line front door for the round-based selection workflow.

Commands: ``track`` (fold training events into a difficulty state),
``score`` (rank unlabelled images by uncertainty), ``select`` (produce a
query set), ``simulate`` (closed-loop benchmark) and ``retrieve-bench``
(retrieval-correlation study). Exit codes: 0 success, 1 validation
failure, 2 I/O failure. Flags override the config file, which overrides
defaults; the effective config is echoed into every output for
provenance.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import simharness
from .config import EngineConfig
from .difficulty import (
    DifficultyState,
    load_difficulty_state,
    save_difficulty_state,
    update_difficulties,
)
from .records import ingest_detections, load_round_state, read_match_events
from .sampler import baseline_select, ppal_select, two_stage_select
from .similarity import KINDS
from .uncertainty import MEASURES, score_images


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, json.JSONDecodeError) as exc:
            _fail(1, str(exc))
        except OSError as exc:
            _fail(2, str(exc))

    return wrapper


def _effective_config(config_path, **flag_overrides) -> EngineConfig:
    base = EngineConfig.load(config_path) if config_path else EngineConfig()
    return base.merged(flag_overrides)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="JSON file with engine configuration overrides.",
)


@click.group()
@click.version_option(package_name="alquery")
def main():
    """Detector-agnostic active-learning query selection over detection dumps."""


@main.command()
@click.argument("events", type=click.Path())
@click.option("--state", "state_path", type=click.Path(), required=True,
              help="Difficulty-state JSON, rewritten in place (fresh if missing).")
@click.option("--classes", type=int, default=None,
              help="Class count when creating a fresh state (default: inferred from events).")
@config_option
@handle_errors
def track(events, state_path, classes, config_path):
    """Stream training match events into the per-class difficulty state."""
    config = _effective_config(config_path)
    batches = list(read_match_events(events))
    if Path(state_path).exists():
        state = load_difficulty_state(state_path)
    else:
        if classes is None:
            highest = max(
                (m.class_id for _, matches in batches for m in matches), default=None
            )
            if highest is None:
                raise ValueError(
                    "cannot infer class count from an empty event file; pass --classes"
                )
            classes = highest + 1
        state = DifficultyState.fresh(classes, m0=config.m0, xi=config.xi)
    for _, matches in batches:
        state = update_difficulties(state, matches)
    save_difficulty_state(state, state_path, extra={"config": config.to_dict()})
    click.echo(f"tracked {len(batches)} iterations into {state_path}")


@main.command()
@click.argument("detections", type=click.Path())
@click.option("--difficulty", "difficulty_path", type=click.Path(), default=None,
              help="Difficulty-state JSON (default: fresh state, uniform weights).")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--measure", type=click.Choice(MEASURES), default=None)
@config_option
@handle_errors
def score(detections, difficulty_path, out_path, measure, config_path):
    """Write per-image uncertainties as NDJSON, most uncertain first."""
    config = _effective_config(config_path, measure=measure)
    records = ingest_detections(detections, m_cap=config.m_cap)
    coeffs = _coefficients(difficulty_path, records, config)
    report = score_images(records, coeffs, config.measure)
    with open(out_path, "w", encoding="utf-8") as fh:
        for image_id, value in report.ranked():
            fh.write(json.dumps({"image_id": image_id, "uncertainty": value}) + "\n")
    _write_json(str(out_path) + ".meta.json", {"config": config.to_dict()})
    click.echo(f"scored {len(records)} images into {out_path}")


def _check_state_covers(state: DifficultyState, records) -> None:
    highest = max((o.class_id for r in records for o in r.objects), default=None)
    if highest is not None and highest >= state.num_classes:
        raise ValueError(
            f"difficulty state tracks {state.num_classes} classes but the dump "
            f"contains class id {highest}; re-run track with --classes {highest + 1}"
        )


def _coefficients(difficulty_path, records, config: EngineConfig):
    from .difficulty import difficulty_coefficients

    if difficulty_path:
        state = load_difficulty_state(difficulty_path)
        _check_state_covers(state, records)
    else:
        highest = max(
            (o.class_id for r in records for o in r.objects), default=None
        )
        if highest is None:
            return None
        state = DifficultyState.fresh(highest + 1, m0=config.m0, xi=config.xi)
    return difficulty_coefficients(state, config.alpha, config.beta)


@main.command()
@click.argument("detections", type=click.Path())
@click.option("--round-state", "round_state_path", type=click.Path(), required=True)
@click.option("--difficulty", "difficulty_path", type=click.Path(), default=None)
@click.option("--strategy", default="ppal",
              help="'ppal', a baseline (random/entropy/coreset), or 'pool/diversity'.")
@click.option("--budget", type=int, default=None, help="Override the round-state budget.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--delta", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--measure", type=click.Choice(MEASURES), default=None)
@click.option("--similarity-kind", type=click.Choice(KINDS), default=None)
@config_option
@handle_errors
def select(detections, round_state_path, difficulty_path, strategy, budget, out_path,
           delta, seed, measure, similarity_kind, config_path):
    """Select a query set for the current round and write it as JSON."""
    if budget is not None and budget <= 0:
        raise ValueError(f"budget must be > 0, got {budget}")
    config = _effective_config(
        config_path, delta=delta, seed=seed, measure=measure, similarity_kind=similarity_kind
    )
    records = ingest_detections(detections, m_cap=config.m_cap)
    state = load_round_state(round_state_path)
    if budget is not None:
        state.budget = budget

    pool, diversity = simharness.parse_strategy(strategy)
    if pool == "coreset":
        queries = baseline_select(
            "coreset_global", records, state, seed=config.seed, config=config
        )
    elif pool == "dcus":
        tracker = _difficulty_state(difficulty_path, records, config)
        if (pool, diversity) == ("dcus", config.similarity_kind):
            queries = ppal_select(records, state, tracker, config)
        else:
            queries = two_stage_select(
                records, state, tracker, config, pool_strategy=pool, diversity=diversity
            )
    else:
        queries = two_stage_select(
            records, state, None, config, pool_strategy=pool, diversity=diversity,
            seed=config.seed,
        )
    payload = queries.to_dict()
    payload["strategy"] = strategy
    payload["config"] = config.to_dict()
    _write_json(out_path, payload)
    click.echo(f"selected {len(queries.ids)} of {len(state.unlabelled_ids)} unlabelled")


def _difficulty_state(difficulty_path, records, config: EngineConfig) -> DifficultyState:
    if difficulty_path:
        state = load_difficulty_state(difficulty_path)
        _check_state_covers(state, records)
        return state
    highest = max((o.class_id for r in records for o in r.objects), default=None)
    if highest is None:
        raise ValueError("cannot infer class count from a dump with no objects")
    return DifficultyState.fresh(highest + 1, m0=config.m0, xi=config.xi)


@main.command()
@click.argument("config_file", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), required=True)
@handle_errors
def simulate(config_file, out_dir):
    """Run the closed-loop benchmark described by CONFIG_FILE."""
    payload = json.loads(Path(config_file).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"{config_file}: benchmark config must be a JSON object")
    bench = simharness.BenchConfig.from_dict(payload)
    report = simharness.run_al_benchmark(bench)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    click.echo(f"wrote {len(report.rows)} rows to {out / 'report.csv'}")


@main.command(name="retrieve-bench")
@click.argument("config_file", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--k", type=int, default=None, help="Retrieval depth (default 20).")
@click.option("--matrix-out", type=click.Path(), default=None,
              help="Also dump the binary similarity matrix per kind (prefix path).")
@handle_errors
def retrieve_bench(config_file, out_dir, k, matrix_out):
    """Compare similarity kinds on top-k retrieval vs category overlap."""
    payload = json.loads(Path(config_file).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"{config_file}: retrieval config must be a JSON object")
    known = {"world", "k", "kinds", "seeds", "labelled_fraction"}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown retrieval config keys: {sorted(unknown)}")
    world = simharness.WorldConfig.from_dict(payload.get("world", {}))
    k = k if k is not None else int(payload.get("k", 20))
    kinds = tuple(payload.get("kinds", ("ccms", "global")))
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown similarity kind {kind!r}")
    seeds = tuple(payload.get("seeds", (0,)))
    fraction = float(payload.get("labelled_fraction", 1.0))
    result = simharness.retrieval_benchmark(
        world, k=k, kinds=kinds, seeds=seeds, labelled_fraction=fraction
    )
    result["config"] = {
        "world": world.to_dict(), "k": k, "kinds": list(kinds),
        "seeds": list(seeds), "labelled_fraction": fraction,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "retrieval.json", result)
    if matrix_out:
        _dump_matrices(world, kinds, seeds, fraction, matrix_out)
    click.echo(f"wrote retrieval report to {out / 'retrieval.json'}")


def _dump_matrices(world, kinds, seeds, fraction, prefix):
    import dataclasses

    import numpy as np

    from .similarity import similarity_matrix

    for seed in seeds:
        built = simharness.build_world(dataclasses.replace(world, seed=seed))
        count = int(round(fraction * len(built.image_ids)))
        rng = np.random.default_rng([seed, 777])
        labelled = rng.choice(built.image_ids, size=count, replace=False).tolist()
        records, _ = simharness.simulate_detector(built, labelled, seed=1)
        for kind in kinds:
            similarity_matrix(records, kind).save(f"{prefix}.{kind}.seed{seed}.bin")


if __name__ == "__main__":
    main()
