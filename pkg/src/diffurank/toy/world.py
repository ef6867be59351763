"""Synthetic desk-scale world: parametric objects, masked views, captions.

Objects have three attributes: a shape class, a color class, and a size
scalar in [0.5, 1.5) (verbalized as "small" below 1.0, "large" at or
above).  A view exposes a subset of the attribute slots; a captioner
describes exactly the exposed slots, optionally corrupting each mention
with a seeded error rate.

Latent derivation (deterministic given the world seed): a token
embedding matrix ``E`` of shape (vocab, dim) is drawn once from the
seed, scaled by 1/sqrt(3); an object's latent is

    E[shape] + E[color] + size * E[size_class] + 0.05 * jitter

with per-object standard-normal jitter drawn from (seed, object index).
Because a caption's token bag points at the summands, conditioning on a
truthful caption localizes the latent while a mismatched caption does
not, which is what the scoring tests exploit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..ranking import CaptionCandidate
from ..scoring import ObjectLatent, Source

SHAPES = ("cube", "sphere", "cone", "pyramid")
COLORS = ("red", "green", "blue", "yellow")
SIZE_CLASSES = ("small", "large")
VOCABULARY: tuple[str, ...] = SHAPES + COLORS + SIZE_CLASSES
TOKEN_INDEX = {token: i for i, token in enumerate(VOCABULARY)}
ATTRIBUTE_SLOTS = ("size", "color", "shape")

LATENT_JITTER = 0.05
SIZE_SPLIT = 1.0
# Class-conditional means of the size scalar under U[0.5, 1.5), split at 1.0.
SIZE_CLASS_MEANS = {"small": 0.75, "large": 1.25}

_EMBED_TAG = 0x1001
_OBJECT_TAG = 0x1002
_VIEW_TAG = 0x1003
_CAPTION_TAG = 0x1004

WORLD_FORMAT_VERSION = 1


def size_class(size: float) -> str:
    return "small" if size < SIZE_SPLIT else "large"


def token_embeddings(seed: int, dim: int) -> np.ndarray:
    """The (vocab, dim) embedding matrix the latent derivation is built on."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), _EMBED_TAG]))
    return rng.standard_normal((len(VOCABULARY), dim)) / np.sqrt(3.0)


@dataclass(frozen=True)
class ToyObject:
    object_id: str
    shape: str
    color: str
    size: float
    latent: ObjectLatent

    @property
    def tokens(self) -> tuple[str, str, str]:
        """Attribute tokens in slot order (size, color, shape)."""
        return (size_class(self.size), self.color, self.shape)


@dataclass(frozen=True)
class ToyView:
    view_id: int
    visibility_mask: frozenset[str]

    def __post_init__(self) -> None:
        unknown = self.visibility_mask - set(ATTRIBUTE_SLOTS)
        if unknown:
            raise ValueError(f"unknown attribute slots in mask: {sorted(unknown)}")

    @property
    def is_informative(self) -> bool:
        return self.visibility_mask == frozenset(ATTRIBUTE_SLOTS)


def visible_tokens(obj: ToyObject, mask: Iterable[str]) -> list[str]:
    """The object's tokens for the exposed slots, in slot order."""
    mask = set(mask)
    out = []
    for slot, token in zip(ATTRIBUTE_SLOTS, obj.tokens):
        if slot in mask:
            out.append(token)
    return out


def render_caption(tokens: Sequence[str]) -> str:
    """Phrase a token list: 'a small red cube object'; no tokens -> 'an object'."""
    if not tokens:
        return "an object"
    return "a " + " ".join(tokens) + " object"


def parse_tokens(text: str) -> list[str]:
    """Vocabulary tokens mentioned in a caption, in order of appearance."""
    words = text.lower().replace(",", " ").replace(".", " ").split()
    return [w for w in words if w in TOKEN_INDEX]


def corrupt_tokens(tokens: Sequence[str], error_rate: float, rng: np.random.Generator) -> list[str]:
    """Independently replace each token, with probability error_rate, by a
    different token from the same category."""
    if error_rate <= 0.0:
        return list(tokens)
    out = []
    for token in tokens:
        if rng.random() < error_rate:
            if token in SHAPES:
                pool = SHAPES
            elif token in COLORS:
                pool = COLORS
            else:
                pool = SIZE_CLASSES
            alternatives = [t for t in pool if t != token]
            out.append(alternatives[rng.integers(len(alternatives))])
        else:
            out.append(token)
    return out


@dataclass
class ToyCaptioner:
    """Describes a view of an object, with an optional seeded error rate.

    At error_rate 0 the caption mentions exactly the object's tokens for
    the view's exposed slots, so captions are truthful restrictions.
    """

    error_rate: float = 0.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(
            np.random.SeedSequence([self.seed & ((1 << 64) - 1), _CAPTION_TAG])
        )

    def caption(self, view: ToyView, obj: ToyObject) -> str:
        tokens = visible_tokens(obj, view.visibility_mask)
        return render_caption(corrupt_tokens(tokens, self.error_rate, self.rng))


@dataclass
class ToyWorld:
    seed: int
    dim: int
    error_rate: float
    captions_per_view: int
    objects: list[ToyObject]
    views: list[ToyView]
    captions: dict[str, list[CaptionCandidate]]
    informative: dict[str, list[int]]
    embeddings: np.ndarray = field(repr=False)

    @property
    def objects_by_id(self) -> dict[str, ToyObject]:
        return {obj.object_id: obj for obj in self.objects}

    def captions_for(self, object_id: str, view_id: int) -> list[str]:
        return [c.text for c in self.captions[object_id] if c.view_id == view_id]

    def full_caption(self, obj: ToyObject) -> str:
        """The truthful all-attributes caption for an object."""
        return render_caption(list(obj.tokens))


def _make_latent(seed: int, index: int, shape: str, color: str, size: float,
                 embeddings: np.ndarray, dim: int) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & ((1 << 64) - 1), _OBJECT_TAG, index])
    )
    vec = (
        embeddings[TOKEN_INDEX[shape]]
        + embeddings[TOKEN_INDEX[color]]
        + size * embeddings[TOKEN_INDEX[size_class(size)]]
        + LATENT_JITTER * rng.standard_normal(dim)
    )
    return vec


def _make_views(num_views: int, seed: int) -> list[ToyView]:
    # View 0 exposes everything; the last view is blind; middle views get
    # seeded proper non-empty subsets, so 'informative' is always {0}.
    full = frozenset(ATTRIBUTE_SLOTS)
    proper = [frozenset(s) for s in (
        {"size"}, {"color"}, {"shape"}, {"size", "color"}, {"size", "shape"}, {"color", "shape"},
    )]
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), _VIEW_TAG]))
    views = [ToyView(0, full)]
    for view_id in range(1, num_views - 1):
        views.append(ToyView(view_id, proper[rng.integers(len(proper))]))
    if num_views >= 2:
        views.append(ToyView(num_views - 1, frozenset()))
    return views


def generate_world(
    num_objects: int,
    num_views: int = 6,
    seed: int = 0,
    captions_per_view: int = 5,
    error_rate: float = 0.0,
    dim: int = 16,
) -> ToyWorld:
    """Deterministic synthetic dataset for a seed.

    Every object gets ``num_views`` views and ``captions_per_view`` captions
    per view; the informative manifest lists the views exposing all
    attribute slots (always view 0 by construction).
    """
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    if num_views < 2:
        raise ValueError("num_views must be >= 2")

    embeddings = token_embeddings(seed, dim)
    views = _make_views(num_views, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1)]))
    captioner = ToyCaptioner(error_rate=error_rate, seed=seed)

    objects: list[ToyObject] = []
    captions: dict[str, list[CaptionCandidate]] = {}
    informative: dict[str, list[int]] = {}
    for index in range(num_objects):
        object_id = f"obj-{index:04d}"
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size = float(rng.uniform(0.5, 1.5))
        vec = _make_latent(seed, index, shape, color, size, embeddings, dim)
        obj = ToyObject(
            object_id=object_id,
            shape=shape,
            color=color,
            size=size,
            latent=ObjectLatent(object_id=object_id, vector=vec, source=Source.SYNTHETIC),
        )
        objects.append(obj)
        object_captions = []
        for view in views:
            for j in range(captions_per_view):
                object_captions.append(
                    CaptionCandidate(
                        view_id=view.view_id,
                        caption_index=j,
                        text=captioner.caption(view, obj),
                    )
                )
        captions[object_id] = object_captions
        informative[object_id] = [v.view_id for v in views if v.is_informative]

    return ToyWorld(
        seed=seed,
        dim=dim,
        error_rate=error_rate,
        captions_per_view=captions_per_view,
        objects=objects,
        views=views,
        captions=captions,
        informative=informative,
        embeddings=embeddings,
    )


def world_to_json(world: ToyWorld) -> str:
    """Versioned snapshot; embeddings are recomputed from the seed on load."""
    payload = {
        "version": WORLD_FORMAT_VERSION,
        "seed": world.seed,
        "dim": world.dim,
        "error_rate": world.error_rate,
        "captions_per_view": world.captions_per_view,
        "objects": [
            {
                "object_id": o.object_id,
                "shape": o.shape,
                "color": o.color,
                "size": o.size,
                "latent": o.latent.vector.tolist(),
            }
            for o in world.objects
        ],
        "views": [
            {"view_id": v.view_id, "visibility_mask": sorted(v.visibility_mask)}
            for v in world.views
        ],
        "captions": {
            oid: [
                {"view_id": c.view_id, "caption_index": c.caption_index, "text": c.text}
                for c in cands
            ]
            for oid, cands in world.captions.items()
        },
        "informative": world.informative,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def world_from_json(text: str) -> ToyWorld:
    payload = json.loads(text)
    version = payload.get("version")
    if version != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world snapshot version: {version!r}")
    objects = [
        ToyObject(
            object_id=o["object_id"],
            shape=o["shape"],
            color=o["color"],
            size=o["size"],
            latent=ObjectLatent(
                object_id=o["object_id"],
                vector=np.asarray(o["latent"], dtype=np.float64),
                source=Source.SYNTHETIC,
            ),
        )
        for o in payload["objects"]
    ]
    views = [
        ToyView(v["view_id"], frozenset(v["visibility_mask"])) for v in payload["views"]
    ]
    captions = {
        oid: [CaptionCandidate(c["view_id"], c["caption_index"], c["text"]) for c in cands]
        for oid, cands in payload["captions"].items()
    }
    return ToyWorld(
        seed=payload["seed"],
        dim=payload["dim"],
        error_rate=payload["error_rate"],
        captions_per_view=payload["captions_per_view"],
        objects=objects,
        views=views,
        captions=captions,
        informative={k: list(v) for k, v in payload["informative"].items()},
        embeddings=token_embeddings(payload["seed"], payload["dim"]),
    )


def save_world(world: ToyWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(world_to_json(world))


def load_world(path) -> ToyWorld:
    with open(path, "r", encoding="utf-8") as fh:
        return world_from_json(fh.read())
