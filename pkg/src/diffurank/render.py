"""Render job construction, output validation, and the mock renderer.

A render job covers 28 views per object: 8 ray-traced views on a grey
background, placed horizontally around the default orientation, plus 20
real-time views at randomized poses on a transparent background.  Real
rendering is an external adapter honoring the job/output layout below;
the mock renderer here writes small placeholder images whose pixels
encode which attribute slots a view exposes, which is what the mock
captioner and summarizer read back.

Output layout per object: ``<object_id>/<view_id>.png`` (RGBA),
``<view_id>_depth.exr``, ``<view_id>_alpha.png``, and one
``cameras.json`` mapping view ids to ``{fov, rt}``.  The mock's depth
file is a raw float32 placeholder, not a real EXR payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

_SEED_MASK = (1 << 64) - 1
_POSE_TAG = 0x2001
_MASK_TAG = 0x2002

DEFAULT_GREY_VIEWS = 8
DEFAULT_TRANSPARENT_VIEWS = 20
DEFAULT_FOV = math.radians(40.0)
DEFAULT_RADIUS = 2.2
# Two-level elevation pattern for the horizontal grey views (radians).
GREY_ELEVATIONS = (math.radians(15.0), math.radians(30.0))
TRANSPARENT_ELEVATION_RANGE = (math.radians(-15.0), math.radians(60.0))

GREY_ENGINE_PRESET = {
    "engine": "CYCLES",
    "mode": "ray-tracing",
    "samples": 16,
    "denoiser": "OPTIX",
}
TRANSPARENT_ENGINE_PRESET = {
    "engine": "EEVEE",
    "mode": "real-time",
    "taa_render_samples": 1,
}

MOCK_IMAGE_SIZE = 32
GREY_BACKGROUND = (128, 128, 128)
# One saturated color per vocabulary token; none may look grey.
TOKEN_PALETTE = {
    "cube": (240, 120, 0),
    "sphere": (140, 0, 200),
    "cone": (0, 200, 200),
    "pyramid": (250, 0, 130),
    "red": (220, 30, 30),
    "green": (30, 200, 30),
    "blue": (30, 30, 220),
    "yellow": (230, 220, 30),
    "small": (90, 160, 255),
    "large": (160, 90, 0),
}
# Pixel block (row, col) where each attribute slot's token color is painted.
SLOT_BLOCKS = {"size": (4, 4), "color": (4, 14), "shape": (4, 24)}
SLOT_BLOCK_SIZE = 4


class RenderError(RuntimeError):
    pass


class ImageReadError(OSError):
    """The referenced image could not be read or decoded."""


class ViewStrategy(Enum):
    GREY_RAYTRACE = "grey_raytrace"
    TRANSPARENT_REALTIME = "transparent_realtime"


@dataclass(frozen=True)
class CameraMeta:
    """Intrinsic fov (radians) plus a 3x4 world-to-camera [R|t] matrix."""

    fov: float
    rt: np.ndarray

    def __post_init__(self) -> None:
        rt = np.asarray(self.rt, dtype=np.float64)
        if rt.shape != (3, 4):
            raise ValueError(f"rt must be 3x4, got {rt.shape}")
        object.__setattr__(self, "rt", rt)
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        rot = rt[:, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-5:
            raise ValueError("rotation block is not orthonormal within 1e-5")


@dataclass(frozen=True)
class ViewSpec:
    view_id: int
    strategy: ViewStrategy
    camera: CameraMeta
    engine: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RenderJob:
    object_id: str
    seed: int
    views: tuple[ViewSpec, ...]
    output_dir: str | None = None

    def __post_init__(self) -> None:
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate view ids in render job")

    def views_by_strategy(self, strategy: ViewStrategy) -> list[ViewSpec]:
        return [v for v in self.views if v.strategy is strategy]


@dataclass(frozen=True)
class RenderViewOutput:
    view_id: int
    strategy: ViewStrategy
    image_ref: str
    depth_ref: str
    alpha_ref: str
    camera: CameraMeta


@dataclass(frozen=True)
class RenderOutput:
    object_id: str
    views: tuple[RenderViewOutput, ...]

    def by_id(self) -> dict[int, RenderViewOutput]:
        return {v.view_id: v for v in self.views}


def stable_id_hash(identifier: str) -> int:
    digest = hashlib.blake2b(identifier.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _look_at_camera(azimuth: float, elevation: float, radius: float, fov: float) -> CameraMeta:
    position = radius * np.array(
        [math.cos(elevation) * math.cos(azimuth),
         math.cos(elevation) * math.sin(azimuth),
         math.sin(elevation)]
    )
    forward = -position / np.linalg.norm(position)
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(float(forward @ world_up)) > 0.999:
        world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rotation = np.stack([right, up, -forward])
    translation = -rotation @ position
    return CameraMeta(fov=fov, rt=np.hstack([rotation, translation[:, None]]))


def grey_view_azimuths(num_grey: int = DEFAULT_GREY_VIEWS) -> list[float]:
    """Evenly spaced horizontal azimuths (radians) for the grey strategy."""
    return [2.0 * math.pi * k / num_grey for k in range(num_grey)]


def build_job(
    object_id: str,
    seed: int,
    num_grey: int = DEFAULT_GREY_VIEWS,
    num_transparent: int = DEFAULT_TRANSPARENT_VIEWS,
    fov: float = DEFAULT_FOV,
    radius: float = DEFAULT_RADIUS,
    output_dir: str | None = None,
) -> RenderJob:
    """Deterministic camera set: grey views first (ids 0..num_grey-1), then
    randomized transparent views.  Pose randomization is keyed by (seed,
    object_id) so re-building is reproducible."""
    views: list[ViewSpec] = []
    for k, azimuth in enumerate(grey_view_azimuths(num_grey)):
        camera = _look_at_camera(azimuth, GREY_ELEVATIONS[k % len(GREY_ELEVATIONS)], radius, fov)
        views.append(ViewSpec(k, ViewStrategy.GREY_RAYTRACE, camera, dict(GREY_ENGINE_PRESET)))

    rng = np.random.default_rng(
        np.random.SeedSequence([seed & _SEED_MASK, _POSE_TAG, stable_id_hash(object_id)])
    )
    lo, hi = TRANSPARENT_ELEVATION_RANGE
    for k in range(num_transparent):
        azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
        elevation = float(rng.uniform(lo, hi))
        camera = _look_at_camera(azimuth, elevation, radius, fov)
        views.append(
            ViewSpec(num_grey + k, ViewStrategy.TRANSPARENT_REALTIME, camera,
                     dict(TRANSPARENT_ENGINE_PRESET))
        )
    return RenderJob(object_id=object_id, seed=seed, views=tuple(views), output_dir=output_dir)


def job_to_json(job: RenderJob) -> str:
    return json.dumps(
        {
            "object_id": job.object_id,
            "seed": job.seed,
            "views": [
                {
                    "view_id": v.view_id,
                    "strategy": v.strategy.value,
                    "fov": v.camera.fov,
                    "rt": v.camera.rt.tolist(),
                    "engine": v.engine,
                }
                for v in job.views
            ],
        },
        indent=2,
        sort_keys=True,
    )


def job_from_json(text: str) -> RenderJob:
    payload = json.loads(text)
    views = tuple(
        ViewSpec(
            view_id=v["view_id"],
            strategy=ViewStrategy(v["strategy"]),
            camera=CameraMeta(fov=v["fov"], rt=np.asarray(v["rt"], dtype=np.float64)),
            engine=dict(v.get("engine", {})),
        )
        for v in payload["views"]
    )
    return RenderJob(object_id=payload["object_id"], seed=payload["seed"], views=views)


# ---------------------------------------------------------------------------
# Mock renderer
# ---------------------------------------------------------------------------


def mock_view_masks(job: RenderJob) -> dict[int, frozenset[str]]:
    """Per-view attribute-slot exposure for the mock renderer.

    Drawn from (job.seed, object_id): roughly 30% of views expose all three
    slots, 20% are blind, the rest expose a random proper subset.  One
    seeded view is forced to full exposure so every object has at least one
    informative render.
    """
    slots = ("size", "color", "shape")
    proper = [frozenset(s) for s in (
        {"size"}, {"color"}, {"shape"}, {"size", "color"}, {"size", "shape"}, {"color", "shape"},
    )]
    rng = np.random.default_rng(
        np.random.SeedSequence([job.seed & _SEED_MASK, _MASK_TAG, stable_id_hash(job.object_id)])
    )
    masks: dict[int, frozenset[str]] = {}
    for view in job.views:
        roll = rng.random()
        if roll < 0.3:
            masks[view.view_id] = frozenset(slots)
        elif roll < 0.5:
            masks[view.view_id] = frozenset()
        else:
            masks[view.view_id] = proper[rng.integers(len(proper))]
    forced = job.views[rng.integers(len(job.views))].view_id
    masks[forced] = frozenset(slots)
    return masks


def _paint_view_image(strategy: ViewStrategy, tokens_by_slot: dict[str, str]) -> np.ndarray:
    size = MOCK_IMAGE_SIZE
    pixels = np.zeros((size, size, 4), dtype=np.uint8)
    if strategy is ViewStrategy.GREY_RAYTRACE:
        pixels[:, :, :3] = GREY_BACKGROUND
        pixels[:, :, 3] = 255
    else:
        pixels[:, :, :3] = 255
        pixels[:, :, 3] = 0
    for slot, token in tokens_by_slot.items():
        row, col = SLOT_BLOCKS[slot]
        color = TOKEN_PALETTE[token]
        pixels[row:row + SLOT_BLOCK_SIZE, col:col + SLOT_BLOCK_SIZE, :3] = color
        pixels[row:row + SLOT_BLOCK_SIZE, col:col + SLOT_BLOCK_SIZE, 3] = 255
    return pixels


def mock_render(job: RenderJob, world_object, out_dir: str | Path) -> RenderOutput:
    """Write placeholder renders for a toy object under ``out_dir/<object_id>/``.

    Each view's image carries a colored block per exposed attribute slot
    (so blind views come out all-grey), plus alpha and depth placeholders,
    plus cameras.json.  Deterministic for a fixed (job, object).
    """
    masks = mock_view_masks(job)
    obj_dir = Path(out_dir) / job.object_id
    obj_dir.mkdir(parents=True, exist_ok=True)

    slot_tokens = dict(zip(("size", "color", "shape"), world_object.tokens))
    outputs = []
    cameras = {}
    mask_record = {}
    for view in job.views:
        visible = {slot: slot_tokens[slot] for slot in masks[view.view_id]}
        pixels = _paint_view_image(view.strategy, visible)
        image_ref = obj_dir / f"{view.view_id}.png"
        Image.fromarray(pixels, mode="RGBA").save(image_ref)

        alpha_ref = obj_dir / f"{view.view_id}_alpha.png"
        Image.fromarray(pixels[:, :, 3], mode="L").save(alpha_ref)

        depth_ref = obj_dir / f"{view.view_id}_depth.exr"
        depth = np.full((MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE), DEFAULT_RADIUS, dtype=np.float32)
        with open(depth_ref, "wb") as fh:
            fh.write(b"MOCKDEPTHv1\n")
            fh.write(depth.tobytes())

        cameras[str(view.view_id)] = {"fov": view.camera.fov, "rt": view.camera.rt.tolist()}
        mask_record[str(view.view_id)] = sorted(masks[view.view_id])
        outputs.append(
            RenderViewOutput(
                view_id=view.view_id,
                strategy=view.strategy,
                image_ref=str(image_ref),
                depth_ref=str(depth_ref),
                alpha_ref=str(alpha_ref),
                camera=view.camera,
            )
        )

    with open(obj_dir / "cameras.json", "w", encoding="utf-8") as fh:
        json.dump(cameras, fh, indent=2, sort_keys=True)
    with open(obj_dir / "views.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "object_id": job.object_id,
                "views": [
                    {
                        "view_id": v.view_id,
                        "strategy": v.strategy.value,
                        "visible_slots": mask_record[str(v.view_id)],
                    }
                    for v in job.views
                ],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    return RenderOutput(object_id=job.object_id, views=tuple(outputs))


def load_image_rgb(image_ref: str | Path) -> np.ndarray:
    try:
        with Image.open(image_ref) as img:
            return np.asarray(img.convert("RGBA"), dtype=np.float64)[:, :, :3]
    except FileNotFoundError as exc:
        raise ImageReadError(f"image not found: {image_ref}") from exc
    except UnidentifiedImageError as exc:
        raise ImageReadError(f"not a readable image: {image_ref}") from exc


def detect_all_grey(image_ref: str | Path, epsilon: float = 4.0,
                    grey_fraction: float = 0.999) -> bool:
    """True iff at least ``grey_fraction`` of pixels have near-zero variance
    across their RGB channels (i.e. the pixel is a grey shade)."""
    rgb = load_image_rgb(image_ref)
    channel_variance = rgb.var(axis=-1)
    return float(np.mean(channel_variance < epsilon)) >= grey_fraction


def decode_view_tokens(image_ref: str | Path) -> dict[str, str]:
    """Recover the attribute tokens a mock render encodes, keyed by slot."""
    rgb = load_image_rgb(image_ref)
    found: dict[str, str] = {}
    for slot, (row, col) in SLOT_BLOCKS.items():
        pixel = rgb[row + SLOT_BLOCK_SIZE // 2, col + SLOT_BLOCK_SIZE // 2]
        if float(pixel.max() - pixel.min()) < 10.0:
            continue  # grey or white: slot not exposed
        best_token = None
        best_dist = float("inf")
        for token, color in TOKEN_PALETTE.items():
            dist = float(np.abs(pixel - np.asarray(color, dtype=np.float64)).max())
            if dist < best_dist:
                best_dist = dist
                best_token = token
        if best_dist > 30.0:
            raise RenderError(f"unrecognized token color {pixel} in {image_ref}")
        found[slot] = best_token
    return found


def validate_render_output(job: RenderJob, output: RenderOutput) -> None:
    """Reject outputs missing a view, duplicating ids, pointing at missing
    files, or carrying non-orthonormal rotations."""
    produced = [v.view_id for v in output.views]
    if len(set(produced)) != len(produced):
        raise RenderError(f"duplicate view ids in output for {output.object_id}")
    expected = {v.view_id for v in job.views}
    missing = expected - set(produced)
    if missing:
        raise RenderError(f"output for {output.object_id} is missing views {sorted(missing)}")
    extra = set(produced) - expected
    if extra:
        raise RenderError(f"output for {output.object_id} has unexpected views {sorted(extra)}")
    for view in output.views:
        for ref in (view.image_ref, view.depth_ref, view.alpha_ref):
            if not os.path.exists(ref):
                raise RenderError(f"missing render artifact: {ref}")
        rot = view.camera.rt[:, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-5:
            raise RenderError(f"non-orthonormal rotation for view {view.view_id}")
