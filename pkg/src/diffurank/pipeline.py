"""Batch captioning pipeline: render, caption, encode, rank, summarize.

Each object advances through the stage ladder below; completion of a
stage is journaled (append-only JSON lines) together with the stage's
artifact paths, so an interrupted run resumes exactly where it stopped
and a completed run re-executes nothing.  A summarizer policy violation
moves the object to FLAGGED, which is absorbing and keeps the object
out of the final caption CSV; any exception moves it to FAILED without
aborting the batch.

Final outputs under the configured directory: ``captions.csv``,
``flagged.txt``, ``rankings.jsonl`` (one ranking record per object),
and ``report.json``.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audit import CaptionRecord, write_caption_csv
from .clients import (
    MockEmbedder,
    MockLatentEncoder,
    MockStatementConverter,
    MockVlmSummarizer,
    VlmResult,
    mock_captioner,
)
from .ranking import (
    CaptionCandidate,
    RankingResult,
    RenderedView,
    bottom_views,
    rank_views,
    ranking_record,
)
from .render import (
    RenderJob,
    RenderOutput,
    ViewStrategy,
    build_job,
    grey_view_azimuths,
    mock_render,
    validate_render_output,
)
from .schedule import DEFAULT_SCHEDULE
from .scoring import LossMode, NoiseSharing, ObjectLatent, ScoringConfig, Source
from .toy import BlendDenoiser, ToyWorld, generate_world, load_denoiser, load_world, save_world

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


class Stage(IntEnum):
    PENDING = 0
    RENDERED = 1
    CAPTIONED = 2
    ENCODED = 3
    RANKED = 4
    SUMMARIZED = 5
    FLAGGED = 6
    FAILED = 7


_ABSORBING = {Stage.FLAGGED, Stage.FAILED}
_LADDER = [Stage.RENDERED, Stage.CAPTIONED, Stage.ENCODED, Stage.RANKED, Stage.SUMMARIZED]


class AblationMode(IntEnum):
    TOP_P = 1
    BOTTOM_P = 2
    HORIZONTAL_P = 3
    ALL_VIEWS = 4


# The 6-of-8 horizontal selection targets these azimuths (degrees),
# nearest-match against the grey ring with ties to the lower azimuth.
HORIZONTAL_TARGET_AZIMUTHS = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)


@dataclass(frozen=True)
class WorldSpec:
    num_objects: int = 10
    seed: int = 0
    num_views: int = 6
    dim: int = 16
    error_rate: float = 0.0
    world_file: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str
    seed: int = 0
    num_grey_views: int = 8
    num_transparent_views: int = 20
    captions_per_view: int = 5
    num_samples: int = 5
    top_p: int = 6
    loss_mode: LossMode = LossMode.X0_PREDICTION
    noise_sharing: NoiseSharing = NoiseSharing.PER_OBJECT
    world: WorldSpec = field(default_factory=WorldSpec)
    clients: str = "mock"
    denoiser: str = "blend"
    policy_violation_ids: tuple[str, ...] = ()
    max_workers: int = 1

    def __post_init__(self) -> None:
        counts = {
            "num_grey_views": self.num_grey_views,
            "num_transparent_views": self.num_transparent_views,
            "captions_per_view": self.captions_per_view,
            "num_samples": self.num_samples,
            "top_p": self.top_p,
            "max_workers": self.max_workers,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.top_p > self.num_views:
            raise ConfigError(
                f"top_p ({self.top_p}) exceeds the number of views ({self.num_views})"
            )
        if self.clients != "mock":
            raise ConfigError(
                f"unsupported clients kind {self.clients!r}; pass a ClientBundle for real backends"
            )

    @property
    def num_views(self) -> int:
        return self.num_grey_views + self.num_transparent_views

    def scoring_config(self) -> ScoringConfig:
        return ScoringConfig(
            num_samples=self.num_samples,
            loss_mode=self.loss_mode,
            schedule=DEFAULT_SCHEDULE,
            noise_sharing=self.noise_sharing,
            seed=self.seed,
        )


def load_config(path: str | Path) -> PipelineConfig:
    """Read a TOML or JSON config file mirroring PipelineConfig."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            payload = json.loads(path.read_text(encoding="utf-8"))
        else:
            with open(path, "rb") as fh:
                payload = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"could not parse config {path}: {exc}") from exc
    return config_from_dict(payload)


def config_from_dict(payload: dict) -> PipelineConfig:
    payload = dict(payload)
    world_payload = payload.pop("world", {})
    known_world = {f.name for f in dataclasses.fields(WorldSpec)}
    unknown = set(world_payload) - known_world
    if unknown:
        raise ConfigError(f"unknown world config keys: {sorted(unknown)}")

    known = {f.name for f in dataclasses.fields(PipelineConfig)} - {"world"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "output_dir" not in payload:
        raise ConfigError("config requires output_dir")

    if "loss_mode" in payload:
        try:
            payload["loss_mode"] = LossMode(payload["loss_mode"])
        except ValueError as exc:
            raise ConfigError(f"invalid loss_mode {payload['loss_mode']!r}") from exc
    if "noise_sharing" in payload:
        try:
            payload["noise_sharing"] = NoiseSharing(payload["noise_sharing"])
        except ValueError as exc:
            raise ConfigError(f"invalid noise_sharing {payload['noise_sharing']!r}") from exc
    if "policy_violation_ids" in payload:
        payload["policy_violation_ids"] = tuple(payload["policy_violation_ids"])
    try:
        return PipelineConfig(world=WorldSpec(**world_payload), **payload)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ObjectState:
    object_id: str
    stage: Stage = Stage.PENDING
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    def artifact(self, stage: Stage) -> dict:
        return self.artifacts.get(stage.name, {})


class StateJournal:
    """Append-only JSON-lines record of per-object stage completions."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._seq = 0

    def load(self) -> dict[str, ObjectState]:
        states: dict[str, ObjectState] = {}
        if not self.path.exists():
            return states
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._seq = max(self._seq, entry["seq"])
                oid = entry["object_id"]
                state = states.setdefault(oid, ObjectState(object_id=oid))
                state.stage = Stage[entry["stage"]]
                state.error = entry.get("error")
                if entry.get("artifacts"):
                    state.artifacts[entry["stage"]] = entry["artifacts"]
        return states

    def append(self, state: ObjectState, stage: Stage, artifacts: dict | None = None,
               error: str | None = None) -> None:
        with self._lock:
            self._seq += 1
            entry = {
                "seq": self._seq,
                "object_id": state.object_id,
                "stage": stage.name,
                "artifacts": artifacts or {},
                "error": error,
            }
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        state.stage = stage
        state.error = error
        if artifacts:
            state.artifacts[stage.name] = artifacts


@dataclass
class ClientBundle:
    """Everything the pipeline consults; swap any member for a real backend."""

    world: ToyWorld
    captioner: object
    encoder: object
    summarizer: object
    embedder: object
    statements: object
    denoiser: object
    renderer: Callable[[RenderJob, object, str], RenderOutput]
    summarizer_unlimited: object | None = None


def mock_clients(config: PipelineConfig, world: ToyWorld | None = None) -> ClientBundle:
    world = world or _world_for(config)
    violations = frozenset(config.policy_violation_ids)
    if config.denoiser == "blend":
        denoiser = BlendDenoiser.for_world(world)
    else:
        denoiser = load_denoiser(config.denoiser)
    if config.loss_mode is not denoiser.prediction_target:
        denoiser = denoiser.with_target(config.loss_mode)
    return ClientBundle(
        world=world,
        captioner=mock_captioner(world),
        encoder=MockLatentEncoder(world, expected_views=config.num_transparent_views),
        summarizer=MockVlmSummarizer(policy_violation_ids=violations),
        embedder=MockEmbedder(world),
        statements=MockStatementConverter(),
        denoiser=denoiser,
        renderer=mock_render,
        summarizer_unlimited=MockVlmSummarizer(policy_violation_ids=violations, max_images=None),
    )


def _world_for(config: PipelineConfig) -> ToyWorld:
    spec = config.world
    if spec.world_file:
        return load_world(spec.world_file)
    return generate_world(
        num_objects=spec.num_objects,
        num_views=spec.num_views,
        seed=spec.seed,
        captions_per_view=config.captions_per_view,
        error_rate=spec.error_rate,
        dim=spec.dim,
    )


@dataclass
class RunReport:
    output_dir: str
    total: int
    completed: int
    flagged: list[str]
    failed: dict[str, str]
    stage_counts: dict[str, int]
    denoiser_calls: dict[str, int]
    captions_csv: str
    client_calls: int = 0

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "output_dir": self.output_dir,
                "total": self.total,
                "completed": self.completed,
                "flagged": sorted(self.flagged),
                "failed": dict(sorted(self.failed.items())),
                "stage_counts": dict(sorted(self.stage_counts.items())),
                "denoiser_calls": dict(sorted(self.denoiser_calls.items())),
                "captions_csv": self.captions_csv,
            },
            indent=2,
            sort_keys=True,
        )


class _Runner:
    def __init__(self, config: PipelineConfig, bundle: ClientBundle, journal: StateJournal):
        self.config = config
        self.bundle = bundle
        self.journal = journal
        self.out = Path(config.output_dir)

    # -- stage implementations -------------------------------------------

    def _stage_render(self, state: ObjectState) -> dict:
        job = build_job(
            state.object_id,
            seed=self.config.seed,
            num_grey=self.config.num_grey_views,
            num_transparent=self.config.num_transparent_views,
        )
        obj = self.bundle.world.objects_by_id.get(state.object_id)
        if obj is None:
            raise PipelineError(f"object '{state.object_id}' is not in the world")
        output = self.bundle.renderer(job, obj, str(self.out / "renders"))
        validate_render_output(job, output)
        return {
            "render_dir": str(self.out / "renders" / state.object_id),
            "views": [
                {"view_id": v.view_id, "strategy": v.strategy.value, "image_ref": v.image_ref}
                for v in output.views
            ],
        }

    def _stage_caption(self, state: ObjectState) -> dict:
        views = state.artifact(Stage.RENDERED)["views"]
        captioned = []
        for view in sorted(views, key=lambda v: v["view_id"]):
            texts = self.bundle.captioner.caption_view(
                view["image_ref"], self.config.captions_per_view
            )
            captioned.append(
                {"view_id": view["view_id"], "strategy": view["strategy"], "captions": texts}
            )
        path = self.out / "captions" / f"{state.object_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"views": captioned}, indent=2, sort_keys=True),
                        encoding="utf-8")
        return {"captions_file": str(path)}

    def _stage_encode(self, state: ObjectState) -> dict:
        views = state.artifact(Stage.RENDERED)["views"]
        transparent = [
            v["image_ref"]
            for v in sorted(views, key=lambda v: v["view_id"])
            if v["strategy"] == ViewStrategy.TRANSPARENT_REALTIME.value
        ]
        latent = self.bundle.encoder.encode(transparent)
        path = self.out / "latents" / f"{state.object_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps({"object_id": latent.object_id, "source": latent.source.value,
                        "vector": latent.vector.tolist()}, sort_keys=True),
            encoding="utf-8",
        )
        return {"latent_file": str(path)}

    def _stage_rank(self, state: ObjectState) -> dict:
        latent_payload = json.loads(
            Path(state.artifact(Stage.ENCODED)["latent_file"]).read_text(encoding="utf-8")
        )
        latent = ObjectLatent(
            object_id=latent_payload["object_id"],
            vector=np.asarray(latent_payload["vector"], dtype=np.float64),
            source=Source(latent_payload["source"]),
        )
        captioned = json.loads(
            Path(state.artifact(Stage.CAPTIONED)["captions_file"]).read_text(encoding="utf-8")
        )["views"]
        rendered = state.artifact(Stage.RENDERED)["views"]
        refs = {v["view_id"]: v["image_ref"] for v in rendered}
        views = [
            RenderedView(
                view_id=v["view_id"],
                strategy=ViewStrategy(v["strategy"]),
                image_ref=refs.get(v["view_id"], ""),
            )
            for v in captioned
        ]
        candidates = [
            CaptionCandidate(view_id=v["view_id"], caption_index=j, text=text)
            for v in captioned
            for j, text in enumerate(v["captions"])
        ]
        result = rank_views(
            latent, views, candidates, self.config.scoring_config(),
            self.bundle.denoiser, self.config.top_p,
        )
        record = ranking_record(result, views)
        path = self.out / "rankings" / f"{state.object_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
        return {"ranking_file": str(path), "selected": list(result.selected),
                "denoiser_calls": result.denoiser_calls}

    def _stage_summarize(self, state: ObjectState) -> dict | VlmResult:
        selected = state.artifact(Stage.RANKED)["selected"]
        refs = {v["view_id"]: v["image_ref"] for v in state.artifact(Stage.RENDERED)["views"]}
        result = self.bundle.summarizer.summarize([refs[vid] for vid in selected])
        if result.policy_violation:
            return result
        path = self.out / "summaries" / f"{state.object_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"caption": result.caption}, sort_keys=True),
                        encoding="utf-8")
        return {"summary_file": str(path), "caption": result.caption}

    # -- driver ------------------------------------------------------------

    def advance(self, state: ObjectState, stop_after: Stage | None) -> None:
        if state.stage in _ABSORBING:
            return
        stages = {
            Stage.RENDERED: self._stage_render,
            Stage.CAPTIONED: self._stage_caption,
            Stage.ENCODED: self._stage_encode,
            Stage.RANKED: self._stage_rank,
            Stage.SUMMARIZED: self._stage_summarize,
        }
        for stage in _LADDER:
            if state.stage >= stage:
                continue
            if stop_after is not None and stage > stop_after:
                return
            try:
                outcome = stages[stage](state)
            except Exception as exc:
                self.journal.append(state, Stage.FAILED, error=f"{stage.name}: {exc}")
                return
            if isinstance(outcome, VlmResult):
                self.journal.append(state, Stage.FLAGGED,
                                    artifacts={"policy_violation": True})
                return
            self.journal.append(state, stage, artifacts=outcome)


def run_pipeline(
    config: PipelineConfig,
    object_ids: Sequence[str],
    clients: ClientBundle | None = None,
    stop_after: Stage | None = None,
) -> RunReport:
    """Run (or resume) the pipeline over ``object_ids``.

    Per-object failures are isolated; the report lists them.  With
    ``stop_after`` set, objects advance at most to that stage (a test and
    operations hook; a later call without it resumes and completes).
    """
    if not object_ids:
        raise PipelineError("no object ids supplied")
    if len(set(object_ids)) != len(object_ids):
        raise PipelineError("duplicate object ids")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    bundle = clients or mock_clients(config)
    world_path = out / "world.json"
    if not world_path.exists():
        save_world(bundle.world, world_path)

    journal = StateJournal(out / "state.jsonl")
    states = journal.load()
    for oid in object_ids:
        states.setdefault(oid, ObjectState(object_id=oid))

    runner = _Runner(config, bundle, journal)
    todo = [states[oid] for oid in object_ids]
    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            list(pool.map(lambda s: runner.advance(s, stop_after), todo))
    else:
        for state in todo:
            runner.advance(state, stop_after)

    return _finalize(config, object_ids, states, out)


def _finalize(config: PipelineConfig, object_ids: Sequence[str],
              states: dict[str, ObjectState], out: Path) -> RunReport:
    records = []
    flagged = []
    failed = {}
    denoiser_calls = {}
    stage_counts: dict[str, int] = {}
    ranking_records = []
    for oid in sorted(object_ids):
        state = states[oid]
        stage_counts[state.stage.name] = stage_counts.get(state.stage.name, 0) + 1
        if state.stage is Stage.FLAGGED:
            flagged.append(oid)
        elif state.stage is Stage.FAILED:
            failed[oid] = state.error or "unknown error"
        if state.stage is Stage.SUMMARIZED:
            records.append(
                CaptionRecord(identifier=oid,
                              caption=state.artifact(Stage.SUMMARIZED)["caption"])
            )
        ranked = state.artifact(Stage.RANKED)
        if ranked:
            denoiser_calls[oid] = ranked.get("denoiser_calls", 0)
            ranking_path = Path(ranked["ranking_file"])
            if ranking_path.exists():
                ranking_records.append(
                    json.loads(ranking_path.read_text(encoding="utf-8"))
                )

    captions_csv = out / "captions.csv"
    write_caption_csv(captions_csv, records)
    (out / "flagged.txt").write_text(
        "".join(f"{oid}\n" for oid in sorted(flagged)), encoding="utf-8"
    )
    with open(out / "rankings.jsonl", "w", encoding="utf-8") as fh:
        for record in ranking_records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    report = RunReport(
        output_dir=str(out),
        total=len(object_ids),
        completed=len(records),
        flagged=flagged,
        failed=failed,
        stage_counts=stage_counts,
        denoiser_calls=denoiser_calls,
        captions_csv=str(captions_csv),
    )
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# View-selection comparison harness
# ---------------------------------------------------------------------------


def horizontal_view_ids(num_grey: int = 8,
                        targets: Sequence[float] = HORIZONTAL_TARGET_AZIMUTHS) -> list[int]:
    """Grey view ids nearest the target azimuths (degrees), no duplicates."""
    azimuths = [np.degrees(a) for a in grey_view_azimuths(num_grey)]
    chosen: list[int] = []
    for target in targets:
        order = sorted(range(num_grey), key=lambda k: (abs(azimuths[k] - target), azimuths[k]))
        for k in order:
            if k not in chosen:
                chosen.append(k)
                break
    return chosen


def ablation_run(
    config: PipelineConfig,
    mode: AblationMode,
    object_ids: Sequence[str],
    clients: ClientBundle | None = None,
) -> Path:
    """Summarize a per-mode view subset for objects already run through ranking.

    TOP_P / BOTTOM_P read the stored ranking; HORIZONTAL_P picks grey views
    by the azimuth rule; ALL_VIEWS passes every view through the unlimited
    summarizer.  Writes ``captions_<mode>.csv`` and returns its path.
    """
    out = Path(config.output_dir)
    journal = StateJournal(out / "state.jsonl")
    states = journal.load()
    bundle = clients or mock_clients(config)

    if mode is AblationMode.ALL_VIEWS:
        summarizer = bundle.summarizer_unlimited or bundle.summarizer
    else:
        summarizer = bundle.summarizer

    records = []
    for oid in sorted(object_ids):
        state = states.get(oid)
        if state is None or not state.artifact(Stage.RENDERED):
            raise PipelineError(f"no render artifacts for '{oid}'; run the pipeline first")
        views = state.artifact(Stage.RENDERED)["views"]
        refs = {v["view_id"]: v["image_ref"] for v in views}

        if mode in (AblationMode.TOP_P, AblationMode.BOTTOM_P):
            ranked = state.artifact(Stage.RANKED)
            if not ranked:
                raise PipelineError(f"no ranking for '{oid}'; required for {mode.name}")
            record = json.loads(Path(ranked["ranking_file"]).read_text(encoding="utf-8"))
            if mode is AblationMode.TOP_P:
                selected = record["selected"]
            else:
                result = RankingResult(
                    object_id=oid,
                    ordered_views=tuple((e["view_id"], e["score"]) for e in record["ordered"]),
                    top_p=record["top_p"],
                    selected=tuple(record["selected"]),
                )
                selected = bottom_views(result, config.top_p)
        elif mode is AblationMode.HORIZONTAL_P:
            selected = horizontal_view_ids(config.num_grey_views)
        else:
            selected = [v["view_id"] for v in sorted(views, key=lambda v: v["view_id"])]

        result = summarizer.summarize([refs[vid] for vid in selected])
        if result.policy_violation:
            continue
        records.append(CaptionRecord(identifier=oid, caption=result.caption))

    path = out / f"captions_{mode.name.lower()}.csv"
    write_caption_csv(path, records)
    return path
