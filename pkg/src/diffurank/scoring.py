"""Conditional denoising-loss scoring.

Alignment between a latent vector and candidate conditioning texts is
measured by how well a frozen conditional denoiser reconstructs its
training target from a noised version of the latent.  For each Monte
Carlo draw ``k`` a timestamp ``t_k ~ Uniform(0, 1)`` and a noise vector
``eps_k ~ N(0, I)`` are sampled, the latent is noised as

    x_t = sqrt(alpha_bar(t_k)) * x0 + sqrt(1 - alpha_bar(t_k)) * eps_k

and the per-draw loss for a candidate text ``c`` is the per-coordinate
mean squared residual between the denoiser's prediction given ``c`` and
the mode's target (``x0`` for x0-prediction, ``eps_k`` for
eps-prediction).  A candidate group's alignment score is the negative
mean loss over all its texts and draws; higher (closer to zero) means
the conditioning explains the latent better.

Within a group, every text is evaluated against the *same* noised
input per draw; under ``NoiseSharing.PER_OBJECT`` the same draw
sequence is additionally reused across groups (common random numbers),
which lowers the variance of score differences without changing the
quantity being estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .accel import forward_noise_batch
from .schedule import DEFAULT_SCHEDULE, NoiseSchedule

_SEED_MASK = (1 << 64) - 1
# Distinguishes per-group draw streams from the per-object stream.
_GROUP_STREAM_TAG = 0x9E3779B9


class ScoringError(RuntimeError):
    """A denoiser evaluation failed or produced a non-finite value."""


class Source(Enum):
    ENCODER = "encoder"
    SYNTHETIC = "synthetic"


class LossMode(Enum):
    """Which quantity the denoiser is expected to predict."""

    X0_PREDICTION = "x0"
    EPS_PREDICTION = "eps"


class NoiseSharing(Enum):
    """PER_VIEW draws an independent sequence per group; PER_OBJECT shares one."""

    PER_VIEW = "per_view"
    PER_OBJECT = "per_object"


@dataclass(frozen=True)
class ObjectLatent:
    """Encoded representation of one object, the vector losses are computed on."""

    object_id: str
    vector: np.ndarray
    source: Source = Source.SYNTHETIC

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError(f"latent for '{self.object_id}' must be a non-empty 1-D vector")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"latent for '{self.object_id}' contains non-finite entries")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class NoiseDraw:
    """One Monte Carlo sample: a timestamp and a noise vector."""

    t: float
    epsilon: np.ndarray
    index: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"draw timestamp must lie in [0, 1], got {self.t}")


@dataclass(frozen=True)
class ScoringConfig:
    num_samples: int = 5
    loss_mode: LossMode = LossMode.X0_PREDICTION
    schedule: NoiseSchedule = field(default=DEFAULT_SCHEDULE)
    noise_sharing: NoiseSharing = NoiseSharing.PER_OBJECT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")


@runtime_checkable
class ConditionalDenoiser(Protocol):
    """Frozen denoiser queried with (noised latent, timestamp, conditioning text).

    Implementations must be deterministic for fixed inputs and return a
    vector of the same dimension as the noised latent.  ``prediction_target``
    states which quantity the output estimates and must match the scoring
    config's ``loss_mode``.  An optional ``denoise_batch(noised, ts, text)``
    accepting stacked draws is used when present.
    """

    prediction_target: LossMode

    def denoise(self, noised_latent: np.ndarray, t: float, condition_text: str) -> np.ndarray:
        ...


@dataclass(frozen=True)
class AlignmentScore:
    """Negative mean denoising loss for one candidate group."""

    group_id: int
    value: float
    num_losses: int
    seed: int


@dataclass(frozen=True)
class ScoringOutcome:
    scores: dict[int, AlignmentScore]
    denoiser_calls: int


def forward_noise(latent: ObjectLatent, draw: NoiseDraw, schedule: NoiseSchedule) -> np.ndarray:
    """Noise a clean latent: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Exact at the boundaries: returns the latent unchanged at abar = 1 and
    the noise vector unchanged at abar = 0.
    """
    eps = np.asarray(draw.epsilon, dtype=np.float64)
    if eps.shape != latent.vector.shape:
        raise ValueError(
            f"noise dimension {eps.shape} does not match latent dimension {latent.vector.shape}"
        )
    if not np.all(np.isfinite(eps)):
        raise ValueError(f"noise draw {draw.index} contains non-finite entries")
    abar = float(schedule.alpha_bar(draw.t))
    return np.sqrt(abar) * latent.vector + np.sqrt(1.0 - abar) * eps


def generate_draws(config: ScoringConfig, dim: int, group_id: int | None = None) -> list[NoiseDraw]:
    """Deterministic draw sequence for a config seed.

    ``group_id=None`` yields the per-object stream; an integer yields the
    independent per-group stream used by ``NoiseSharing.PER_VIEW``.  Streams
    are keyed by the group's id, never by its position in a list.
    """
    if group_id is None:
        entropy = [config.seed & _SEED_MASK]
    else:
        entropy = [config.seed & _SEED_MASK, _GROUP_STREAM_TAG, group_id & _SEED_MASK]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    draws = []
    for k in range(config.num_samples):
        t = float(rng.random())
        epsilon = rng.standard_normal(dim)
        draws.append(NoiseDraw(t=t, epsilon=epsilon, index=k))
    return draws


def _target(latent: ObjectLatent, draw: NoiseDraw, mode: LossMode) -> np.ndarray:
    if mode is LossMode.X0_PREDICTION:
        return latent.vector
    return np.asarray(draw.epsilon, dtype=np.float64)


def _check_mode(denoiser: ConditionalDenoiser, config: ScoringConfig) -> None:
    target = getattr(denoiser, "prediction_target", None)
    if target is not None and target is not config.loss_mode:
        raise ValueError(
            f"denoiser predicts {target.value} but config.loss_mode is {config.loss_mode.value}"
        )


def _residual_loss(prediction: np.ndarray, target: np.ndarray, context: str) -> float:
    prediction = np.asarray(prediction, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ScoringError(f"denoiser output shape {prediction.shape} != {target.shape} ({context})")
    if not np.all(np.isfinite(prediction)):
        raise ScoringError(f"denoiser produced non-finite output ({context})")
    residual = prediction - target
    return float(np.mean(residual * residual))


def single_loss(
    denoiser: ConditionalDenoiser,
    latent: ObjectLatent,
    draw: NoiseDraw,
    caption: str,
    config: ScoringConfig,
) -> float:
    """Per-coordinate mean squared denoising residual for one draw and caption."""
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    _check_mode(denoiser, config)
    noised = forward_noise(latent, draw, config.schedule)
    context = f"caption={caption!r}, draw={draw.index}, t={draw.t:.4f}"
    try:
        prediction = denoiser.denoise(noised, draw.t, caption)
    except ScoringError:
        raise
    except Exception as exc:
        raise ScoringError(f"denoiser failed ({context})") from exc
    return _residual_loss(prediction, _target(latent, draw, config.loss_mode), context)


def _group_losses_batched(denoiser, latent, captions, draws, config) -> np.ndarray:
    """Loss matrix (num_samples, num_captions) via the denoiser's batch entry point."""
    ts = np.array([d.t for d in draws])
    eps = np.stack([np.asarray(d.epsilon, dtype=np.float64) for d in draws])
    if eps.shape[1] != latent.dim:
        raise ValueError(
            f"noise dimension {eps.shape[1]} does not match latent dimension {latent.dim}"
        )
    abar = np.asarray(config.schedule.alpha_bar(ts), dtype=np.float64)
    noised = forward_noise_batch(latent.vector, np.sqrt(abar), np.sqrt(1.0 - abar), eps)
    if config.loss_mode is LossMode.X0_PREDICTION:
        targets = np.broadcast_to(latent.vector, noised.shape)
    else:
        targets = eps
    losses = np.empty((len(draws), len(captions)))
    for j, caption in enumerate(captions):
        try:
            preds = np.asarray(denoiser.denoise_batch(noised, ts, caption), dtype=np.float64)
        except ScoringError:
            raise
        except Exception as exc:
            raise ScoringError(f"denoiser failed (caption={caption!r}, batched draws)") from exc
        if preds.shape != noised.shape:
            raise ScoringError(f"batched denoiser output shape {preds.shape} != {noised.shape}")
        if not np.all(np.isfinite(preds)):
            raise ScoringError(f"denoiser produced non-finite output (caption={caption!r})")
        residual = preds - targets
        losses[:, j] = np.mean(residual * residual, axis=1)
    return losses


def _group_losses(denoiser, latent, captions, draws, config) -> np.ndarray:
    losses = np.empty((len(draws), len(captions)))
    for k, draw in enumerate(draws):
        noised = forward_noise(latent, draw, config.schedule)
        target = _target(latent, draw, config.loss_mode)
        for j, caption in enumerate(captions):
            context = f"caption={caption!r}, draw={draw.index}, t={draw.t:.4f}"
            try:
                prediction = denoiser.denoise(noised, draw.t, caption)
            except ScoringError:
                raise
            except Exception as exc:
                raise ScoringError(f"denoiser failed ({context})") from exc
            losses[k, j] = _residual_loss(prediction, target, context)
    return losses


def accumulate_scores(
    denoiser: ConditionalDenoiser,
    latent: ObjectLatent,
    caption_groups: Sequence[tuple[int, Sequence[str]]],
    config: ScoringConfig,
) -> ScoringOutcome:
    """Score every caption group against the latent.

    Each group's score is the negative mean loss over all of its captions
    and all ``config.num_samples`` draws.  Per draw, all captions in a group
    see the same noised input; under PER_OBJECT sharing all groups see the
    same draw sequence.  Duplicate captions are kept and re-weight the mean.
    """
    if not caption_groups:
        raise ValueError("caption_groups must be non-empty")
    for group_id, captions in caption_groups:
        if len(captions) == 0:
            raise ValueError(f"caption group {group_id} is empty")
        for caption in captions:
            if not caption.strip():
                raise ValueError(f"caption group {group_id} contains an empty caption")
    _check_mode(denoiser, config)

    shared = None
    if config.noise_sharing is NoiseSharing.PER_OBJECT:
        shared = generate_draws(config, latent.dim)

    batched = hasattr(denoiser, "denoise_batch")
    scores: dict[int, AlignmentScore] = {}
    calls = 0
    for group_id, captions in caption_groups:
        if group_id in scores:
            raise ValueError(f"duplicate caption group id {group_id}")
        draws = shared if shared is not None else generate_draws(config, latent.dim, group_id)
        try:
            if batched:
                losses = _group_losses_batched(denoiser, latent, captions, draws, config)
            else:
                losses = _group_losses(denoiser, latent, captions, draws, config)
        except ScoringError as exc:
            raise ScoringError(f"scoring aborted for group {group_id}: {exc}") from exc
        calls += losses.size
        scores[group_id] = AlignmentScore(
            group_id=group_id,
            value=-float(np.mean(losses)),
            num_losses=losses.size,
            seed=config.seed,
        )
    return ScoringOutcome(scores=scores, denoiser_calls=calls)
