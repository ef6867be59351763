"""Per-object view ranking by alignment score.

Captions are grouped by the view that produced them, every group is
scored against the object's latent (see :mod:`diffurank.scoring`), and
views are ordered by descending score with ties broken by ascending
view id.  The top ``p`` views are the ones forwarded to the summarizer;
the bottom ``p`` support the worst-views comparison harness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .render import CameraMeta, ViewStrategy
from .scoring import (
    ConditionalDenoiser,
    ObjectLatent,
    ScoringConfig,
    accumulate_scores,
)


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class RenderedView:
    view_id: int
    strategy: ViewStrategy
    image_ref: str = ""
    camera: CameraMeta | None = None


@dataclass(frozen=True)
class CaptionCandidate:
    view_id: int
    caption_index: int
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(
                f"caption {self.caption_index} for view {self.view_id} is empty"
            )


@dataclass(frozen=True)
class RankingResult:
    object_id: str
    ordered_views: tuple[tuple[int, float], ...]
    top_p: int
    selected: tuple[int, ...]
    excluded_views: tuple[int, ...] = ()
    denoiser_calls: int = 0
    seed: int = 0


def rank_views(
    latent: ObjectLatent,
    views: Sequence[RenderedView],
    captions: Sequence[CaptionCandidate],
    config: ScoringConfig,
    denoiser: ConditionalDenoiser,
    p: int = 6,
) -> RankingResult:
    """Rank ``views`` by alignment of their captions with ``latent``.

    Views without any caption are excluded from the ranking and reported in
    ``excluded_views`` (it is an error if no view has captions).  Captions
    are canonicalized to (view_id, caption_index) order before scoring, so
    shuffling the input lists does not change any score.
    """
    if p < 1:
        raise RankingError(f"p must be >= 1, got {p}")
    if not views:
        raise RankingError("views must be non-empty")
    known = {v.view_id for v in views}
    if len(known) != len(views):
        raise RankingError("duplicate view ids")

    grouped: dict[int, list[CaptionCandidate]] = {vid: [] for vid in known}
    for caption in captions:
        if caption.view_id not in grouped:
            raise RankingError(f"caption references unknown view {caption.view_id}")
        grouped[caption.view_id].append(caption)

    excluded = tuple(sorted(vid for vid, group in grouped.items() if not group))
    scored_groups = [
        (vid, [c.text for c in sorted(group, key=lambda c: c.caption_index)])
        for vid, group in sorted(grouped.items())
        if group
    ]
    if not scored_groups:
        raise RankingError(f"no view of object '{latent.object_id}' has any caption")

    outcome = accumulate_scores(denoiser, latent, scored_groups, config)
    ordered = sorted(
        ((vid, outcome.scores[vid].value) for vid, _ in scored_groups),
        key=lambda pair: (-pair[1], pair[0]),
    )
    selected = tuple(vid for vid, _ in ordered[: min(p, len(ordered))])
    return RankingResult(
        object_id=latent.object_id,
        ordered_views=tuple(ordered),
        top_p=p,
        selected=selected,
        excluded_views=excluded,
        denoiser_calls=outcome.denoiser_calls,
        seed=config.seed,
    )


def bottom_views(result: RankingResult, p: int) -> list[int]:
    """The worst min(p, M) view ids, worst-first."""
    if not result.ordered_views:
        raise RankingError("ranking result is empty")
    worst_first = [vid for vid, _ in reversed(result.ordered_views)]
    return worst_first[: min(p, len(worst_first))]


def ranking_record(result: RankingResult, views: Sequence[RenderedView] = ()) -> dict:
    """JSON-serializable per-object record; strategy tags ride along when the
    rendered views are supplied."""
    strategies = {v.view_id: v.strategy.value for v in views}
    return {
        "object_id": result.object_id,
        "top_p": result.top_p,
        "seed": result.seed,
        "denoiser_calls": result.denoiser_calls,
        "selected": list(result.selected),
        "excluded_views": list(result.excluded_views),
        "ordered": [
            {
                "view_id": vid,
                "score": score,
                **({"strategy": strategies[vid]} if vid in strategies else {}),
            }
            for vid, score in result.ordered_views
        ],
    }


def write_ranking_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_ranking_records(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
