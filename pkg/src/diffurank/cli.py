"""Command-line entry points.

Exit codes: 0 on success, 2 when some objects failed, 3 on configuration
errors.  All commands run against mock clients; real backends plug in
programmatically through ``ClientBundle``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .audit import (
    AuditThresholds,
    CaptionStats,
    clip_flag,
    dataset_stats,
    read_caption_csv,
    text_flag,
)
from .clients import MockEmbedder
from .pipeline import (
    AblationMode,
    ConfigError,
    PipelineError,
    Stage,
    ablation_run,
    load_config,
    run_pipeline,
)
from .render import job_from_json, mock_render
from .schedule import DEFAULT_SCHEDULE
from .scoring import LossMode, ScoringConfig
from .toy import generate_world, load_denoiser, load_world, save_world
from .vqa import (
    cosine_statement_scorer,
    diffusion_statement_scorer,
    evaluate_benchmark,
    load_benchmark,
)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_CONFIG = 3


@click.group()
def main() -> None:
    """Alignment-ranked view selection, captioning pipeline, and audits."""


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--objects", "objects_path", required=True, type=click.Path(),
              help="Text file with one object id per line.")
@click.option("--stop-after", type=click.Choice([s.name for s in Stage if 0 < s < Stage.FLAGGED]),
              default=None, help="Advance objects at most to this stage.")
def run_command(config_path: str, objects_path: str, stop_after: str | None) -> None:
    """Run (or resume) the captioning pipeline."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        object_ids = _read_ids(objects_path)
        report = run_pipeline(
            config, object_ids,
            stop_after=Stage[stop_after] if stop_after else None,
        )
    except PipelineError as exc:
        click.echo(f"pipeline error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(report.to_json())
    sys.exit(report.exit_code)


def _read_ids(path: str) -> list[str]:
    ids = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    return [i for i in ids if i]


@main.command("audit")
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--thresholds", "thresholds_path", type=click.Path(), default=None,
              help="JSON {mean_threshold, max_threshold}; enables the similarity flag.")
@click.option("--stats", "stats_path", type=click.Path(), default=None,
              help="CSV of identifier,mean,max cosine statistics per record.")
@click.option("--header/--no-header", default=False)
@click.option("--out", "out_path", type=click.Path(), default=None)
def audit_command(csv_path, thresholds_path, stats_path, header, out_path) -> None:
    """Flag suspect captions by term misuse and (optionally) cosine statistics."""
    try:
        records = read_caption_csv(csv_path, header=header)
        thresholds = None
        stats_by_id: dict[str, CaptionStats] = {}
        if thresholds_path:
            payload = json.loads(Path(thresholds_path).read_text(encoding="utf-8"))
            thresholds = AuditThresholds(
                mean_threshold=float(payload["mean_threshold"]),
                max_threshold=float(payload["max_threshold"]),
            )
            if not stats_path:
                raise click.ClickException("--thresholds requires --stats")
            for line in Path(stats_path).read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                identifier, mean_s, max_s = line.split(",")
                stats_by_id[identifier] = CaptionStats(float(mean_s), float(max_s))
    except (OSError, ValueError, KeyError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    flagged = []
    for record in records:
        reasons = []
        if text_flag(record.caption):
            reasons.append("text")
        if thresholds is not None and record.identifier in stats_by_id:
            if clip_flag(stats_by_id[record.identifier], thresholds):
                reasons.append("clip")
        if reasons:
            flagged.append({"identifier": record.identifier, "reasons": reasons})
    output = json.dumps({"total": len(records), "flagged": flagged}, indent=2)
    if out_path:
        Path(out_path).write_text(output, encoding="utf-8")
    click.echo(output)


@main.command("stats")
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--header/--no-header", default=False)
@click.option("--out", "out_path", type=click.Path(), default=None)
def stats_command(csv_path, header, out_path) -> None:
    """Length histogram and n-gram vocabulary sizes for a caption CSV."""
    try:
        records = read_caption_csv(csv_path, header=header)
    except (OSError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    report = dataset_stats(record.caption for record in records).to_json()
    if out_path:
        Path(out_path).write_text(report, encoding="utf-8")
    click.echo(report)


@main.command("vqa")
@click.option("--bench", "bench_path", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--scorer", type=click.Choice(["cosine", "diffusion"]), default="cosine")
@click.option("--world", "world_path", type=click.Path(), default=None,
              help="World snapshot backing the mock embedder / latents.")
@click.option("--denoiser", "denoiser_path", type=click.Path(), default=None,
              help="Trained denoiser (.npz) for the diffusion scorer.")
@click.option("--num-samples", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def vqa_command(bench_path, report_path, scorer, world_path, denoiser_path,
                num_samples, seed) -> None:
    """Evaluate a statement-selection benchmark file."""
    try:
        pairs = load_benchmark(bench_path)
        if scorer == "cosine":
            if not world_path:
                raise click.ClickException("--scorer cosine requires --world")
            embedder = MockEmbedder(load_world(world_path))
            scorer_fn = cosine_statement_scorer(embedder)
        else:
            if not denoiser_path:
                raise click.ClickException("--scorer diffusion requires --denoiser")
            denoiser = load_denoiser(denoiser_path).with_target(LossMode.EPS_PREDICTION)
            config = ScoringConfig(
                num_samples=num_samples,
                loss_mode=LossMode.EPS_PREDICTION,
                schedule=DEFAULT_SCHEDULE,
                seed=seed,
            )
            scorer_fn = diffusion_statement_scorer(denoiser, config)
    except click.ClickException:
        raise
    except (OSError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    report = evaluate_benchmark(pairs, scorer_fn)
    output = json.dumps(report, indent=2)
    if report_path:
        Path(report_path).write_text(output, encoding="utf-8")
    click.echo(output)


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--objects", "objects_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["top", "bottom", "horizontal", "all"]),
              required=True)
def ablate_command(config_path, objects_path, mode) -> None:
    """Summarize an alternative view subset for already-ranked objects."""
    modes = {
        "top": AblationMode.TOP_P,
        "bottom": AblationMode.BOTTOM_P,
        "horizontal": AblationMode.HORIZONTAL_P,
        "all": AblationMode.ALL_VIEWS,
    }
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        path = ablation_run(config, modes[mode], _read_ids(objects_path))
    except PipelineError as exc:
        click.echo(f"pipeline error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(str(path))


@main.command("render-adapter")
@click.option("--job", "job_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--world", "world_path", required=True, type=click.Path(),
              help="World snapshot providing the object to mock-render.")
def render_adapter_command(job_path, out_dir, world_path) -> None:
    """Reference renderer adapter (mock-backed): --job job.json --out dir."""
    try:
        job = job_from_json(Path(job_path).read_text(encoding="utf-8"))
        world = load_world(world_path)
        obj = world.objects_by_id.get(job.object_id)
        if obj is None:
            raise click.ClickException(f"object '{job.object_id}' not in world")
        mock_render(job, obj, out_dir)
    except click.ClickException:
        raise
    except (OSError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(str(Path(out_dir) / job.object_id))


@main.command("make-world")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--num-objects", type=int, default=10, show_default=True)
@click.option("--num-views", type=int, default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--error-rate", type=float, default=0.0, show_default=True)
def make_world_command(out_path, num_objects, num_views, seed, error_rate) -> None:
    """Write a synthetic world snapshot for the mock pipeline."""
    world = generate_world(
        num_objects=num_objects, num_views=num_views, seed=seed, error_rate=error_rate
    )
    save_world(world, out_path)
    click.echo(out_path)


if __name__ == "__main__":
    main()
