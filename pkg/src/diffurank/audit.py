"""Caption quality auditing and corpus statistics.

Three detectors over caption records:

* CLIP-style flagging: a record is flagged only when BOTH its mean and
  its max caption-to-view cosine similarity fall below calibrated
  thresholds (a record passes if either statistic clears its bar).
  The AND is deliberate: thresholds are calibrated to encompass every
  annotated-bad record, and an OR would over-flag the rest of a corpus.
* Threshold calibration: the componentwise max of the bad records'
  statistics plus an epsilon, i.e. the tightest thresholds that still
  flag every annotated-bad record.
* Term flagging: whole-word, case-insensitive match against render
  vocabulary ("image", "rendering", ...) that describes the picture
  rather than the object.

Corpus statistics tokenize by lowercasing, stripping punctuation, and
splitting on whitespace; n-gram vocabulary sizes count distinct n-grams
over the whole corpus.
"""

from __future__ import annotations

import csv
import io
import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_FLAG_TERMS = ("image", "images", "rendering", "renderings", "render")
CALIBRATION_EPSILON = 1e-9

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


class AuditError(ValueError):
    pass


class CaptionSource(Enum):
    CAP3D = "cap3d"
    OURS = "ours"
    HUMAN = "human"


@dataclass(frozen=True)
class CaptionRecord:
    identifier: str
    caption: str
    source: CaptionSource = CaptionSource.OURS

    def __post_init__(self) -> None:
        if not self.identifier:
            raise AuditError("record identifier must be non-empty")


class CaptionStats(NamedTuple):
    """Mean and max cosine similarity of a caption against its views."""

    mean_score: float
    max_score: float


@dataclass(frozen=True)
class AuditThresholds:
    mean_threshold: float
    max_threshold: float

    def __post_init__(self) -> None:
        for name, value in (("mean", self.mean_threshold), ("max", self.max_threshold)):
            if not -1.0 <= value <= 1.0:
                raise AuditError(f"{name}_threshold must lie in [-1, 1], got {value}")


def caption_stats(caption_embedding: np.ndarray,
                  view_embeddings: Sequence[np.ndarray]) -> CaptionStats:
    """Cosine statistics between a unit caption embedding and unit view embeddings."""
    cap = np.asarray(caption_embedding, dtype=np.float64)
    if not view_embeddings:
        raise AuditError("at least one view embedding is required")
    sims = []
    for view in view_embeddings:
        view = np.asarray(view, dtype=np.float64)
        if view.shape != cap.shape:
            raise AuditError(
                f"embedding dimension mismatch: view {view.shape} vs caption {cap.shape}"
            )
        sims.append(float(cap @ view))
    return CaptionStats(mean_score=float(np.mean(sims)), max_score=float(np.max(sims)))


def clip_flag(stats: CaptionStats, thresholds: AuditThresholds) -> bool:
    """Flag iff BOTH statistics fall below their thresholds."""
    return (stats.mean_score < thresholds.mean_threshold
            and stats.max_score < thresholds.max_threshold)


def calibrate_thresholds(
    validation: Sequence[tuple[CaptionStats, bool]],
    epsilon: float = CALIBRATION_EPSILON,
) -> AuditThresholds:
    """Tightest thresholds flagging every bad record in the validation set."""
    if not validation:
        raise AuditError("validation set is empty")
    bad = [stats for stats, is_bad in validation if is_bad]
    if not bad:
        raise AuditError("validation set contains no bad records to calibrate against")
    return AuditThresholds(
        mean_threshold=max(s.mean_score for s in bad) + epsilon,
        max_threshold=max(s.max_score for s in bad) + epsilon,
    )


def text_flag(caption: str, extra_terms: Iterable[str] = ()) -> bool:
    """Whole-word, case-insensitive hit on render-process vocabulary."""
    terms = list(DEFAULT_FLAG_TERMS) + [t for t in extra_terms if t]
    pattern = r"\b(?:" + "|".join(re.escape(t) for t in terms) + r")\b"
    return re.search(pattern, caption, flags=re.IGNORECASE) is not None


def tokenize(caption: str) -> list[str]:
    return caption.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class DatasetStats:
    num_captions: int
    length_histogram: dict[int, int]
    unigrams: int
    bigrams: int
    trigrams: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_captions": self.num_captions,
                "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
                "unigrams": self.unigrams,
                "bigrams": self.bigrams,
                "trigrams": self.trigrams,
            },
            indent=2,
        )


def dataset_stats(captions: Iterable[str]) -> DatasetStats:
    """Length histogram plus distinct 1/2/3-gram counts over the corpus."""
    lengths: Counter[int] = Counter()
    grams: dict[int, set[tuple[str, ...]]] = {1: set(), 2: set(), 3: set()}
    count = 0
    for caption in captions:
        count += 1
        words = tokenize(caption)
        lengths[len(words)] += 1
        for n in (1, 2, 3):
            for i in range(len(words) - n + 1):
                grams[n].add(tuple(words[i:i + n]))
    return DatasetStats(
        num_captions=count,
        length_histogram=dict(lengths),
        unigrams=len(grams[1]),
        bigrams=len(grams[2]),
        trigrams=len(grams[3]),
    )


# ---------------------------------------------------------------------------
# CSV interchange: identifier,caption[,source]; UTF-8; no header by default.
# ---------------------------------------------------------------------------


def read_caption_csv(path, header: bool = False) -> list[CaptionRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if header and i == 0:
                continue
            if not row:
                continue
            if len(row) < 2:
                raise AuditError(f"row {i + 1} has fewer than 2 columns: {row!r}")
            source = CaptionSource(row[2].strip().lower()) if len(row) > 2 and row[2] else CaptionSource.OURS
            records.append(CaptionRecord(identifier=row[0], caption=row[1], source=source))
    return records


def caption_csv_bytes(records: Sequence[CaptionRecord], header: bool = False,
                      include_source: bool = False) -> bytes:
    # Newlines are normalized to '\n' so round trips are byte-stable.
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if header:
        writer.writerow(["identifier", "caption", "source"] if include_source
                        else ["identifier", "caption"])
    for record in records:
        row = [record.identifier, record.caption]
        if include_source:
            row.append(record.source.value)
        writer.writerow(row)
    return buffer.getvalue().encode("utf-8")


def write_caption_csv(path, records: Sequence[CaptionRecord], header: bool = False,
                      include_source: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(caption_csv_bytes(records, header=header, include_source=include_source))
