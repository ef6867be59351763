"""Statement selection for image pairs via denoising-loss alignment.

Each benchmark pair holds two images, one question, two options, and
the options rephrased as declarative statements.  A scorer assigns each
statement an alignment value per image; the higher-scoring statement is
that image's answer, and a pair counts as correct only when BOTH images
answer correctly.  The diffusion scorer runs the noise-prediction form
of the alignment estimate with draws shared across statements (common
random numbers); a cosine-similarity baseline uses an embedder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .clients import EmbedderClient
from .scoring import (
    ConditionalDenoiser,
    NoiseSharing,
    ObjectLatent,
    ScoringConfig,
    Source,
    accumulate_scores,
)

BENCHMARK_FORMAT_VERSION = 1


class VqaError(ValueError):
    pass


@dataclass(frozen=True)
class VqaImage:
    """Either a path to an image or a latent stand-in (or both)."""

    ref: str | None = None
    latent: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.ref is None and self.latent is None:
            raise VqaError("a VQA image needs a ref or a latent")
        if self.latent is not None:
            object.__setattr__(self, "latent", np.asarray(self.latent, dtype=np.float64))


@dataclass(frozen=True)
class VqaPair:
    pair_id: str
    image_a: VqaImage
    image_b: VqaImage
    question: str
    options: tuple[str, str]
    statements: tuple[str, str]
    gold_a: int
    gold_b: int

    def __post_init__(self) -> None:
        if len(self.options) != 2 or len(self.statements) != 2:
            raise VqaError(f"pair {self.pair_id}: exactly two options and statements required")
        for gold in (self.gold_a, self.gold_b):
            if gold not in (0, 1):
                raise VqaError(f"pair {self.pair_id}: gold index must be 0 or 1, got {gold}")


StatementScorer = Callable[[VqaImage, Sequence[str]], Sequence[float]]


def score_statements(
    denoiser: ConditionalDenoiser,
    image_latent: ObjectLatent | np.ndarray,
    statements: Sequence[str],
    config: ScoringConfig,
) -> list[float]:
    """Alignment score per statement, order preserved, draws shared."""
    if not isinstance(image_latent, ObjectLatent):
        image_latent = ObjectLatent(object_id="vqa-image",
                                    vector=np.asarray(image_latent, dtype=np.float64),
                                    source=Source.SYNTHETIC)
    if config.noise_sharing is not NoiseSharing.PER_OBJECT:
        # Statement scores are only comparable on common draws.
        config = ScoringConfig(
            num_samples=config.num_samples,
            loss_mode=config.loss_mode,
            schedule=config.schedule,
            noise_sharing=NoiseSharing.PER_OBJECT,
            seed=config.seed,
        )
    groups = [(i, [statement]) for i, statement in enumerate(statements)]
    outcome = accumulate_scores(denoiser, image_latent, groups, config)
    return [outcome.scores[i].value for i in range(len(statements))]


def diffusion_statement_scorer(denoiser: ConditionalDenoiser,
                               config: ScoringConfig) -> StatementScorer:
    def scorer(image: VqaImage, statements: Sequence[str]) -> list[float]:
        if image.latent is None:
            raise VqaError("diffusion scoring needs a latent stand-in for the image")
        return score_statements(denoiser, image.latent, statements, config)

    return scorer


def cosine_statement_scorer(embedder: EmbedderClient) -> StatementScorer:
    def scorer(image: VqaImage, statements: Sequence[str]) -> list[float]:
        if image.ref is not None:
            img = np.asarray(embedder.embed_image(image.ref), dtype=np.float64)
        else:
            embed_latent = getattr(embedder, "embed_latent", None)
            if embed_latent is None:
                raise VqaError("embedder cannot embed a latent stand-in")
            img = np.asarray(embed_latent(image.latent), dtype=np.float64)
        return [float(img @ np.asarray(embedder.embed_text(s), dtype=np.float64))
                for s in statements]

    return scorer


def _choose(scores: Sequence[float]) -> int:
    values = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise VqaError(f"statement scores must be finite, got {scores}")
    return int(np.argmax(values))  # argmax takes the lower index on ties


def answer_pair(pair: VqaPair, scorer: StatementScorer) -> tuple[int, int]:
    """Chosen option index per image; the two choices may coincide."""
    choice_a = _choose(scorer(pair.image_a, pair.statements))
    choice_b = _choose(scorer(pair.image_b, pair.statements))
    return choice_a, choice_b


def pair_accuracy(results: Sequence[tuple[tuple[int, int], tuple[int, int]]]) -> float:
    """Fraction of pairs whose BOTH choices match gold."""
    if not results:
        raise VqaError("no results to score")
    correct = sum(1 for (choice, gold) in results if choice == gold)
    return correct / len(results)


def evaluate_benchmark(pairs: Sequence[VqaPair], scorer: StatementScorer) -> dict:
    per_pair = []
    results = []
    for pair in pairs:
        choice_a, choice_b = answer_pair(pair, scorer)
        gold = (pair.gold_a, pair.gold_b)
        results.append(((choice_a, choice_b), gold))
        per_pair.append(
            {
                "pair_id": pair.pair_id,
                "choice_a": choice_a,
                "choice_b": choice_b,
                "gold_a": pair.gold_a,
                "gold_b": pair.gold_b,
                "correct": (choice_a, choice_b) == gold,
            }
        )
    return {"pair_accuracy": pair_accuracy(results), "per_pair": per_pair}


# ---------------------------------------------------------------------------
# Benchmark file interchange
# ---------------------------------------------------------------------------


def _image_to_json(image: VqaImage) -> dict:
    payload = {}
    if image.ref is not None:
        payload["ref"] = image.ref
    if image.latent is not None:
        payload["latent"] = image.latent.tolist()
    return payload


def _image_from_json(payload: dict) -> VqaImage:
    return VqaImage(
        ref=payload.get("ref"),
        latent=np.asarray(payload["latent"], dtype=np.float64) if "latent" in payload else None,
    )


def benchmark_to_json(pairs: Sequence[VqaPair]) -> str:
    return json.dumps(
        {
            "version": BENCHMARK_FORMAT_VERSION,
            "pairs": [
                {
                    "pair_id": p.pair_id,
                    "image_a": _image_to_json(p.image_a),
                    "image_b": _image_to_json(p.image_b),
                    "question": p.question,
                    "options": list(p.options),
                    "statements": list(p.statements),
                    "gold_a": p.gold_a,
                    "gold_b": p.gold_b,
                }
                for p in pairs
            ],
        },
        indent=2,
    )


def benchmark_from_json(text: str) -> list[VqaPair]:
    payload = json.loads(text)
    if payload.get("version") != BENCHMARK_FORMAT_VERSION:
        raise VqaError(f"unsupported benchmark version: {payload.get('version')!r}")
    return [
        VqaPair(
            pair_id=p["pair_id"],
            image_a=_image_from_json(p["image_a"]),
            image_b=_image_from_json(p["image_b"]),
            question=p["question"],
            options=tuple(p["options"]),
            statements=tuple(p["statements"]),
            gold_a=p["gold_a"],
            gold_b=p["gold_b"],
        )
        for p in payload["pairs"]
    ]


def load_benchmark(path) -> list[VqaPair]:
    with open(path, "r", encoding="utf-8") as fh:
        return benchmark_from_json(fh.read())


def save_benchmark(path, pairs: Sequence[VqaPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(benchmark_to_json(pairs))


def make_toy_vqa_pairs(world, num_pairs: int, seed: int = 0) -> list[VqaPair]:
    """Pairs of toy objects with truthful full-attribute statements.

    Statement 0 describes object A, statement 1 describes object B; objects
    are drawn so the two statements differ.  Latent stand-ins come from the
    world, so both the diffusion scorer and the embedder baseline can run.
    """
    if len(world.objects) < 2:
        raise VqaError("need at least two objects to form pairs")
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), 0x5001]))
    pairs = []
    attempts = 0
    while len(pairs) < num_pairs:
        attempts += 1
        if attempts > 100 * num_pairs:
            raise VqaError("could not find enough distinct object pairs")
        a, b = rng.choice(len(world.objects), size=2, replace=False)
        obj_a, obj_b = world.objects[int(a)], world.objects[int(b)]
        caption_a = world.full_caption(obj_a)
        caption_b = world.full_caption(obj_b)
        if caption_a == caption_b:
            continue
        pairs.append(
            VqaPair(
                pair_id=f"pair-{len(pairs):04d}",
                image_a=VqaImage(latent=obj_a.latent.vector),
                image_b=VqaImage(latent=obj_b.latent.vector),
                question="which object is shown?",
                options=(caption_a, caption_b),
                statements=(caption_a, caption_b),
                gold_a=0,
                gold_b=1,
            )
        )
    return pairs
