"""Command-line entry point.

Subcommands::

    corpus parse   normalize a statute file into canonical JSON
    build          build one or all strategy indexes from a run manifest
    eval           run the benchmark: retrieval, recall, latency, statistics
    stats          recompute statistics from a previous eval
    report         regenerate the CSV report and SVG figures

A run manifest is a JSON file naming the corpus, the QA dataset, the output
directory, the provider configuration, and the strategy list. ``--provider
mock`` forces fully offline deterministic providers regardless of the
manifest. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from .corpus import CorpusError, Granularity, load_corpus, parse_corpus, save_corpus
from .evalstat import (
    DatasetError,
    EvalMatrix,
    compare_to_baseline,
    evaluate_methods,
    load_qa_dataset,
    mean_gold_size,
    measure_build,
    normal_ci,
    paired_bootstrap_ci,
    strategy_slug,
)
from .index import IndexCorruptionError, IndexFormatError, load_index
from .providers import (
    ProviderConfig,
    ProviderConfigError,
    ProviderService,
    ProviderUnavailableError,
    build_provider_service,
    derive_seed,
    EMBED_API_KEY_ENV,
    LLM_API_KEY_ENV,
)
from .reporting import MethodSummary, render_figures, write_report_csv, write_report_json
from .strategies import Family, StrategyConfig

_RUNTIME_ERRORS = (
    CorpusError,
    DatasetError,
    ProviderConfigError,
    ProviderUnavailableError,
    IndexFormatError,
    IndexCorruptionError,
    ValueError,
    OSError,
)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    corpus_path: Path
    dataset_path: Path | None
    output_dir: Path
    seed: int
    strategies: list[StrategyConfig]
    embed: ProviderConfig
    gen: ProviderConfig
    k_units: int = 100
    k_sections: int = 10
    repetitions: int = 5
    aggregation: str = "max"
    beam: int = 8
    baseline: str = "Section"
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def stamp(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash(),
            "provider_kinds": {"embedding": self.embed.kind, "generation": self.gen.kind},
            "aggregation": self.aggregation,
            "tool": f"lexchunk {__version__}",
        }

    def find_strategy(self, tag: str) -> StrategyConfig | None:
        for config in self.strategies:
            if config.tag == tag:
                return config
        return None


def _provider_from_dict(raw: dict, defaults: dict) -> ProviderConfig:
    merged = {**defaults, **raw}
    return ProviderConfig(
        kind=merged.get("kind", "mock"),
        model_name=merged.get("model_name", "mock"),
        cache_dir=merged.get("cache_dir"),
        endpoint=merged.get("endpoint"),
        max_retries=int(merged.get("max_retries", 5)),
        batch_size=int(merged.get("batch_size", 32)),
        seed=int(merged.get("seed", 0)),
        dim=int(merged.get("dim", 256)),
        backoff_seconds=float(merged.get("backoff_seconds", 0.5)),
        api_key_env=merged.get("api_key_env", defaults.get("api_key_env", EMBED_API_KEY_ENV)),
    )


def load_manifest(path: str | Path, provider_override: str | None = None) -> RunManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise click.UsageError(f"manifest {path} does not exist")
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"manifest {path} is not valid JSON: {exc}")

    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    if "corpus" not in raw:
        raise click.UsageError("manifest must name a 'corpus' file")
    corpus_path = resolve(raw["corpus"])
    if not corpus_path.exists():
        raise click.UsageError(f"corpus file {corpus_path} does not exist")
    dataset_path = resolve(raw["dataset"]) if raw.get("dataset") else None
    if dataset_path is not None and not dataset_path.exists():
        raise click.UsageError(f"dataset file {dataset_path} does not exist")
    output_dir = resolve(raw.get("output_dir", "runs"))
    seed = int(raw.get("seed", 0))

    strategies = []
    tags = set()
    for i, item in enumerate(raw.get("strategies", [])):
        try:
            config = StrategyConfig(
                family=item["family"],
                granularity=item.get("granularity", "subsection"),
                window_tokens=item.get("window_tokens"),
                overlap_tokens=item.get("overlap_tokens"),
                cluster_count=item.get("cluster_count"),
                lumber_budget_tokens=item.get("lumber_budget_tokens"),
                raptor_reduction=item.get("raptor_reduction"),
                seed=int(item.get("seed", derive_seed(seed, f"strategy-{i}"))),
            )
        except (KeyError, ValueError) as exc:
            raise click.UsageError(f"strategies[{i}]: {exc}")
        if config.tag in tags:
            raise click.UsageError(f"duplicate strategy tag {config.tag!r}")
        tags.add(config.tag)
        strategies.append(config)

    providers = raw.get("providers", {})
    cache_default = str(output_dir / "cache")
    embed = _provider_from_dict(
        providers.get("embedding", {}),
        {"cache_dir": cache_default, "seed": seed, "api_key_env": EMBED_API_KEY_ENV,
         "model_name": "hash-embed-256"},
    )
    gen = _provider_from_dict(
        providers.get("generation", {}),
        {"cache_dir": cache_default, "seed": seed, "api_key_env": LLM_API_KEY_ENV,
         "model_name": "rule-gen"},
    )
    if provider_override == "mock":
        embed = ProviderConfig(
            kind="mock", model_name=embed.model_name, cache_dir=embed.cache_dir,
            batch_size=embed.batch_size, seed=seed, dim=embed.dim,
        )
        gen = ProviderConfig(
            kind="mock", model_name=gen.model_name, cache_dir=gen.cache_dir,
            batch_size=gen.batch_size, seed=seed, dim=gen.dim,
        )

    return RunManifest(
        corpus_path=corpus_path,
        dataset_path=dataset_path,
        output_dir=output_dir,
        seed=seed,
        strategies=strategies,
        embed=embed,
        gen=gen,
        k_units=int(raw.get("k_units", 100)),
        k_sections=int(raw.get("k_sections", 10)),
        repetitions=int(raw.get("repetitions", 5)),
        aggregation=raw.get("aggregation", "max"),
        beam=int(raw.get("beam", 8)),
        baseline=raw.get("baseline", "Section"),
        raw=raw,
    )


def _service_for(manifest: RunManifest) -> ProviderService:
    return build_provider_service(manifest.embed, manifest.gen)


# ---------------------------------------------------------------------------
# Command group
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(version=__version__, prog_name="lexchunk")
def cli() -> None:
    """Chunking-strategy benchmark for statutory-text retrieval."""


@cli.group("corpus")
def corpus_group() -> None:
    """Corpus inspection and normalization."""


@corpus_group.command("parse")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["plain-statute-text", "canonical-json"]),
    default="plain-statute-text",
    show_default=True,
)
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--name", default=None, help="Corpus name stored in the output file.")
def cmd_corpus_parse(input_path: Path, fmt: str, output: Path, name: str | None) -> None:
    """Parse INPUT_PATH and write the canonical JSON corpus."""
    try:
        corpus = parse_corpus(
            input_path.read_text(encoding="utf-8"), fmt, name=name or input_path.stem
        )
        output.parent.mkdir(parents=True, exist_ok=True)
        save_corpus(corpus, output)
    except _RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc))
    n_subsections = sum(len(s.subsections) for s in corpus.sections)
    n_sentences = sum(1 for s in corpus.sections for _ in s.sentences())
    click.echo(
        f"parsed {len(corpus.sections)} sections, {n_subsections} subsections, "
        f"{n_sentences} sentences -> {output}"
    )


def _select_strategies(manifest: RunManifest, strategy: str | None, flags: dict) -> list[StrategyConfig]:
    if strategy is None:
        if not manifest.strategies:
            raise click.UsageError("manifest lists no strategies and no --strategy was given")
        return manifest.strategies
    found = manifest.find_strategy(strategy)
    if found is not None:
        return [found]
    try:
        family = Family(strategy.lower())
    except ValueError:
        known = ", ".join(sorted(f.value for f in Family))
        raise click.UsageError(
            f"unknown strategy {strategy!r}: not a manifest tag and not one of {known}"
        )
    try:
        config = StrategyConfig(
            family=family,
            granularity=flags["unit"],
            window_tokens=flags["window"],
            overlap_tokens=flags["overlap"],
            cluster_count=flags["clusters"],
            lumber_budget_tokens=flags["budget"],
            raptor_reduction=flags["reduction"],
            seed=derive_seed(manifest.seed, f"strategy-{strategy}"),
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    return [config]


@cli.command("build")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--strategy", default=None, help="Manifest tag or family name; default: all.")
@click.option("--unit", type=click.Choice([g.value for g in Granularity]), default="subsection")
@click.option("--window", type=int, default=None, help="Fixed window size in tokens.")
@click.option("--overlap", type=int, default=None, help="Fixed window overlap in tokens.")
@click.option("--budget", type=int, default=None, help="Lumber token budget.")
@click.option("--clusters", type=int, default=None, help="Semantic cluster count.")
@click.option("--reduction", type=int, default=None, help="Tree reduction factor.")
@click.option("--provider", type=click.Choice(["mock"]), default=None,
              help="Force offline mock providers.")
def cmd_build(
    manifest_path: Path,
    strategy: str | None,
    unit: str,
    window: int | None,
    overlap: int | None,
    budget: int | None,
    clusters: int | None,
    reduction: int | None,
    provider: str | None,
) -> None:
    """Build strategy indexes and record build time, size, and cache use."""
    manifest = load_manifest(manifest_path, provider)
    configs = _select_strategies(
        manifest,
        strategy,
        {"unit": unit, "window": window, "overlap": overlap, "budget": budget,
         "clusters": clusters, "reduction": reduction},
    )
    try:
        corpus = load_corpus(manifest.corpus_path)
        service = _service_for(manifest)
        index_dir = manifest.output_dir / "indexes"
        builds_path = manifest.output_dir / "builds.json"
        builds = json.loads(builds_path.read_text()) if builds_path.exists() else {}
        for config in configs:
            record = measure_build(config, corpus, service, index_dir)
            builds[config.tag] = {
                "strategy_tag": record.strategy_tag,
                "index_path": record.index_path,
                "manifest_path": record.manifest_path,
                "build_seconds": record.build_seconds,
                "persisted_bytes": record.persisted_bytes,
                "unit_count": record.unit_count,
                "provider_counters": record.provider_counters,
                "stamp": manifest.stamp(),
            }
            click.echo(
                f"built {config.tag!r}: {record.unit_count} units, "
                f"{record.persisted_bytes} bytes, {record.build_seconds:.2f}s"
            )
        builds_path.parent.mkdir(parents=True, exist_ok=True)
        builds_path.write_text(json.dumps(builds, indent=2, sort_keys=True), encoding="utf-8")
    except _RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc))


def _eval_dir(manifest: RunManifest, k_sections: int) -> Path:
    suffix = "" if k_sections == manifest.k_sections else f"-k{k_sections}"
    return manifest.output_dir / f"eval{suffix}"


def _load_indexes(manifest: RunManifest) -> dict:
    indexes = {}
    for config in manifest.strategies:
        path = manifest.output_dir / "indexes" / f"{strategy_slug(config.tag)}.scix"
        if not path.exists():
            raise click.ClickException(
                f"index for {config.tag!r} not found at {path}; build it first with: "
                f"lexchunk build --manifest <manifest> --strategy {config.tag!r}"
            )
        indexes[config.tag] = load_index(path)
    return indexes


@cli.command("eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--k", "k_sections", type=int, default=None,
              help="Sections per ranking (ablation override).")
@click.option("--baseline", default=None, help="Method tag the paired tests compare against.")
@click.option("--draws", type=int, default=None, help="Resampling draws for tests and CIs.")
@click.option("--repetitions", type=int, default=None, help="Timed retrieval repetitions.")
@click.option("--provider", type=click.Choice(["mock"]), default=None)
def cmd_eval(
    manifest_path: Path,
    k_sections: int | None,
    baseline: str | None,
    draws: int | None,
    repetitions: int | None,
    provider: str | None,
) -> None:
    """Run all questions through all built indexes and write reports."""
    manifest = load_manifest(manifest_path, provider)
    if manifest.dataset_path is None:
        raise click.UsageError("manifest must name a 'dataset' file for eval")
    k = k_sections or manifest.k_sections
    baseline = baseline or manifest.baseline
    try:
        corpus = load_corpus(manifest.corpus_path)
        records = load_qa_dataset(manifest.dataset_path, corpus.section_ids())
        indexes = _load_indexes(manifest)
        service = _service_for(manifest)
        outcome = evaluate_methods(
            records,
            indexes,
            service,
            k_units=manifest.k_units,
            k_sections=k,
            repetitions=repetitions or manifest.repetitions,
            aggregation=manifest.aggregation,
            section_rank=corpus.section_rank(),
            beam=manifest.beam,
        )

        eval_dir = _eval_dir(manifest, k)
        eval_dir.mkdir(parents=True, exist_ok=True)
        with (eval_dir / "runs.jsonl").open("w", encoding="utf-8") as handle:
            for record in outcome.run_records:
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")
        matrix_payload = {
            "question_ids": outcome.recall.question_ids,
            "method_tags": outcome.recall.method_tags,
            "recall": outcome.recall.scores.tolist(),
            "latency_ms": outcome.latency_ms.scores.tolist(),
            "k_units": manifest.k_units,
            "k_sections": k,
            "aggregation": manifest.aggregation,
            "mean_gold_size": mean_gold_size(records),
            "stamp": manifest.stamp(),
        }
        (eval_dir / "matrix.json").write_text(
            json.dumps(matrix_payload, indent=2), encoding="utf-8"
        )
        _write_stats_and_report(manifest, eval_dir, matrix_payload, baseline, draws)
    except _RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc))
    click.echo(f"evaluated {len(records)} questions x {len(indexes)} methods -> {eval_dir}")


def _matrices_from_payload(payload: dict) -> tuple[EvalMatrix, EvalMatrix]:
    recall = EvalMatrix(
        payload["question_ids"], payload["method_tags"], np.asarray(payload["recall"])
    )
    latency = EvalMatrix(
        payload["question_ids"], payload["method_tags"], np.asarray(payload["latency_ms"])
    )
    return recall, latency


def _resolve_baseline(baseline: str, method_tags: list[str]) -> str:
    if baseline in method_tags:
        return baseline
    folded = [tag for tag in method_tags if tag.lower() == baseline.lower()]
    if len(folded) == 1:
        return folded[0]
    raise click.UsageError(
        f"baseline {baseline!r} is not an evaluated method; have {method_tags}"
    )


def _write_stats_and_report(
    manifest: RunManifest,
    eval_dir: Path,
    matrix_payload: dict,
    baseline: str,
    draws: int | None,
) -> None:
    recall, latency = _matrices_from_payload(matrix_payload)
    baseline = _resolve_baseline(baseline, recall.method_tags)
    n_draws = draws or 10_000
    stats = {
        "recall_tests": compare_to_baseline(recall, baseline, n_draws, manifest.seed),
        "latency_tests": compare_to_baseline(latency, baseline, n_draws, manifest.seed),
        "draws": n_draws,
        "stamp": manifest.stamp(),
    }
    (eval_dir / "stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")
    _emit_report(manifest, eval_dir, matrix_payload, stats)


def _emit_report(manifest: RunManifest, eval_dir: Path, matrix_payload: dict, stats: dict) -> None:
    recall, latency = _matrices_from_payload(matrix_payload)
    builds_path = manifest.output_dir / "builds.json"
    builds = json.loads(builds_path.read_text()) if builds_path.exists() else {}

    rows = []
    per_method = {}
    for tag in recall.method_tags:
        scores = recall.column(tag)
        ci_low, ci_high = normal_ci(scores)
        if len(scores) < 2:
            boot_low = boot_high = float(scores.mean())
        else:
            boot_low, boot_high = paired_bootstrap_ci(
                scores, seed=derive_seed(manifest.seed, f"meanboot-{tag}")
            )
        build = builds.get(tag, {})
        rows.append(
            MethodSummary(
                method=tag,
                mean_recall=float(scores.mean()),
                ci_low=ci_low,
                ci_high=ci_high,
                mean_latency_ms=float(latency.column(tag).mean()),
                build_seconds=float(build.get("build_seconds", float("nan"))),
                persisted_mb=float(build.get("persisted_bytes", 0)) / 1e6,
            )
        )
        per_method[tag] = {
            "recall_per_question": [float(x) for x in scores],
            "latency_ms_per_question": [float(x) for x in latency.column(tag)],
            "normal_ci": [ci_low, ci_high],
            "bootstrap_ci": [boot_low, boot_high],
        }

    stamp = manifest.stamp()
    write_report_csv(rows, stamp, eval_dir / "report.csv")
    write_report_json(
        {
            "stamp": stamp,
            "k_sections": matrix_payload["k_sections"],
            "k_units": matrix_payload["k_units"],
            "aggregation": matrix_payload["aggregation"],
            "mean_gold_size": matrix_payload.get("mean_gold_size"),
            "methods": per_method,
            "tests": stats,
        },
        eval_dir / "report.json",
    )
    render_figures(rows, eval_dir / "figures", k_sections=matrix_payload["k_sections"])


def _load_matrix_payload(manifest: RunManifest, k_sections: int | None) -> tuple[Path, dict]:
    eval_dir = _eval_dir(manifest, k_sections or manifest.k_sections)
    matrix_path = eval_dir / "matrix.json"
    if not matrix_path.exists():
        raise click.ClickException(
            f"no evaluation matrix at {matrix_path}; run: lexchunk eval --manifest <manifest>"
        )
    return eval_dir, json.loads(matrix_path.read_text(encoding="utf-8"))


@cli.command("stats")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--baseline", default=None)
@click.option("--draws", type=int, default=None)
@click.option("--k", "k_sections", type=int, default=None)
def cmd_stats(
    manifest_path: Path, baseline: str | None, draws: int | None, k_sections: int | None
) -> None:
    """Recompute the statistics suite from a stored evaluation matrix."""
    manifest = load_manifest(manifest_path)
    eval_dir, payload = _load_matrix_payload(manifest, k_sections)
    try:
        _write_stats_and_report(manifest, eval_dir, payload, baseline or manifest.baseline, draws)
    except _RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc))
    stats = json.loads((eval_dir / "stats.json").read_text(encoding="utf-8"))
    friedman = stats["recall_tests"].get("friedman")
    if friedman:
        click.echo(
            f"Friedman chi2={friedman['statistic']:.4f} p={friedman['p_value']:.6f} "
            f"over {len(payload['method_tags'])} methods"
        )
    click.echo(f"statistics written to {eval_dir / 'stats.json'}")


@cli.command("report")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.option("--k", "k_sections", type=int, default=None)
def cmd_report(manifest_path: Path, k_sections: int | None) -> None:
    """Regenerate report.csv, report.json, and the SVG figures."""
    manifest = load_manifest(manifest_path)
    eval_dir, payload = _load_matrix_payload(manifest, k_sections)
    stats_path = eval_dir / "stats.json"
    try:
        if stats_path.exists():
            stats = json.loads(stats_path.read_text(encoding="utf-8"))
            _emit_report(manifest, eval_dir, payload, stats)
        else:
            _write_stats_and_report(manifest, eval_dir, payload, manifest.baseline, None)
    except _RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc))
    click.echo(f"report written to {eval_dir}")


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except _RUNTIME_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
