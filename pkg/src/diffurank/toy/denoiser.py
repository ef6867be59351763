"""Conditional denoisers over the toy world.

Two implementations of the scoring protocol live here:

* :class:`ToyDenoiser` — a small two-headed MLP (clean-latent head and
  noise head) trained on the synthetic distribution.  Conditioning is a
  bag-of-attribute-tokens vector parsed from the caption; timestamp
  enters through the schedule's signal level.
* :class:`BlendDenoiser` — a training-free stand-in with closed-form
  expected loss: it blends the noised input toward a caption prototype,
  ``s * x_t + (1 - s^2) * mu(bag)``.  Used where a fast deterministic
  "pre-trained" model is enough (pipeline mocks, variance tests).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import accel
from ..schedule import DEFAULT_SCHEDULE, NoiseSchedule
from ..scoring import LossMode
from .world import (
    SIZE_CLASS_MEANS,
    SIZE_CLASSES,
    TOKEN_INDEX,
    VOCABULARY,
    ToyWorld,
    parse_tokens,
)

_SEED_MASK = (1 << 64) - 1
_INIT_TAG = 0x3001
_EPOCH_TAG = 0x3002
_EVAL_TAG = 0x3003

DEFAULT_HIDDEN = 64
DEFAULT_EPOCHS = 60
DEFAULT_BATCH = 64
DEFAULT_LR = 3e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DENOISER_FORMAT_VERSION = 1


class ToyTrainingError(RuntimeError):
    """Training finished without conditional separation; carries the metrics."""


def caption_bag(text: str, scale_size: bool = True) -> np.ndarray:
    """Bag-of-attribute-tokens conditioning vector for a caption.

    Token counts over the vocabulary; unknown words are ignored.  Size-class
    tokens use their class-mean scalar so the bag matches the latent
    construction's size scaling.
    """
    bag = np.zeros(len(VOCABULARY))
    for token in parse_tokens(text):
        weight = SIZE_CLASS_MEANS[token] if scale_size and token in SIZE_CLASSES else 1.0
        bag[TOKEN_INDEX[token]] += weight
    return bag


@dataclass
class ToyDenoiser:
    """Trained conditional MLP implementing the scoring protocol."""

    params: np.ndarray
    hidden: int
    dim: int
    schedule: NoiseSchedule = field(default=DEFAULT_SCHEDULE)
    target: LossMode = LossMode.X0_PREDICTION
    training_report: dict = field(default_factory=dict)

    @property
    def prediction_target(self) -> LossMode:
        return self.target

    def with_target(self, target: LossMode) -> "ToyDenoiser":
        """A view of the same weights predicting the other head's quantity."""
        return replace(self, target=target)

    def _predict(self, noised: np.ndarray, signal: np.ndarray, bags: np.ndarray):
        x0_hat, eps_hat = accel.mlp_forward(
            self.params,
            np.ascontiguousarray(noised, dtype=np.float64),
            np.ascontiguousarray(signal, dtype=np.float64),
            np.ascontiguousarray(bags, dtype=np.float64),
            self.hidden,
        )
        return x0_hat if self.target is LossMode.X0_PREDICTION else eps_hat

    def denoise(self, noised_latent: np.ndarray, t: float, condition_text: str) -> np.ndarray:
        signal = np.array([float(np.sqrt(self.schedule.alpha_bar(t)))])
        bag = caption_bag(condition_text)[None, :]
        return self._predict(noised_latent[None, :], signal, bag)[0]

    def denoise_batch(self, noised: np.ndarray, ts: np.ndarray, condition_text: str) -> np.ndarray:
        signal = np.sqrt(np.asarray(self.schedule.alpha_bar(ts), dtype=np.float64))
        bag = caption_bag(condition_text)
        bags = np.broadcast_to(bag, (noised.shape[0], bag.size)).copy()
        return self._predict(noised, signal, bags)


@dataclass
class BlendDenoiser:
    """Training-free denoiser: s * x_t + (1 - s^2) * prototype(bag).

    The prototype is the sum of token embeddings named by the caption,
    i.e. the mean latent of objects matching the caption's attributes.
    Expected loss decomposes in closed form, which the oracle tests use.
    Predicts the clean latent only.
    """

    embeddings: np.ndarray
    schedule: NoiseSchedule = field(default=DEFAULT_SCHEDULE)
    prediction_target: LossMode = field(default=LossMode.X0_PREDICTION, init=False)

    @classmethod
    def for_world(cls, world: ToyWorld) -> "BlendDenoiser":
        return cls(embeddings=world.embeddings)

    def prototype(self, condition_text: str) -> np.ndarray:
        return caption_bag(condition_text) @ self.embeddings

    def denoise(self, noised_latent: np.ndarray, t: float, condition_text: str) -> np.ndarray:
        abar = float(self.schedule.alpha_bar(t))
        s = np.sqrt(abar)
        return s * noised_latent + (1.0 - abar) * self.prototype(condition_text)

    def denoise_batch(self, noised: np.ndarray, ts: np.ndarray, condition_text: str) -> np.ndarray:
        abar = np.asarray(self.schedule.alpha_bar(ts), dtype=np.float64)
        s = np.sqrt(abar)
        proto = self.prototype(condition_text)
        return s[:, None] * noised + (1.0 - abar)[:, None] * proto[None, :]


def _training_rows(world: ToyWorld, object_ids: list[str]):
    """(x0, bag) row per stored caption of the given objects."""
    by_id = world.objects_by_id
    x0_rows = []
    bag_rows = []
    for oid in object_ids:
        latent = by_id[oid].latent.vector
        for candidate in world.captions[oid]:
            x0_rows.append(latent)
            bag_rows.append(caption_bag(candidate.text))
    return np.ascontiguousarray(x0_rows), np.ascontiguousarray(bag_rows)


def conditional_loss(
    denoiser: ToyDenoiser,
    latents: np.ndarray,
    captions: list[str],
    num_draws: int,
    seed: int,
    target: LossMode = LossMode.X0_PREDICTION,
) -> float:
    """Mean denoising loss of (latent, caption) pairs over fixed seeded draws."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, _EVAL_TAG]))
    ts = rng.random(num_draws)
    abar = np.asarray(denoiser.schedule.alpha_bar(ts), dtype=np.float64)
    signal, sigma = np.sqrt(abar), np.sqrt(1.0 - abar)
    head = denoiser.with_target(target)
    total = 0.0
    for latent, caption in zip(latents, captions):
        eps = rng.standard_normal((num_draws, latent.size))
        noised = accel.forward_noise_batch(latent, signal, sigma, eps)
        preds = head.denoise_batch(noised, ts, caption)
        reference = latent[None, :] if target is LossMode.X0_PREDICTION else eps
        residual = preds - reference
        total += float(np.mean(residual * residual))
    return total / len(captions)


def separation_metrics(
    denoiser: ToyDenoiser, world: ToyWorld, object_ids: list[str], seed: int,
    num_draws: int = 128,
) -> dict:
    """True-caption vs mismatched-caption loss on held-out objects, both heads."""
    by_id = world.objects_by_id
    latents = np.stack([by_id[oid].latent.vector for oid in object_ids])
    true_captions = [world.full_caption(by_id[oid]) for oid in object_ids]
    shuffled = true_captions[1:] + true_captions[:1]
    metrics = {}
    for label, target in (("x0", LossMode.X0_PREDICTION), ("eps", LossMode.EPS_PREDICTION)):
        true_loss = conditional_loss(denoiser, latents, true_captions, num_draws, seed, target)
        mismatched = conditional_loss(denoiser, latents, shuffled, num_draws, seed, target)
        metrics[f"{label}_true_loss"] = true_loss
        metrics[f"{label}_mismatched_loss"] = mismatched
        metrics[f"{label}_margin"] = mismatched - true_loss
    return metrics


def train_toy_denoiser(
    world: ToyWorld,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = 0,
    hidden: int = DEFAULT_HIDDEN,
    batch_size: int = DEFAULT_BATCH,
    lr: float = DEFAULT_LR,
    holdout_fraction: float = 0.1,
    schedule: NoiseSchedule | None = None,
) -> ToyDenoiser:
    """Fit the conditional MLP on the world's (latent, caption) distribution.

    Each epoch re-draws (t, eps) per example; both heads are trained
    jointly.  Raises :class:`ToyTrainingError` if the held-out
    true-vs-mismatched margin is not positive for both heads.
    """
    if not world.objects:
        raise ValueError("world has no objects")
    schedule = schedule or DEFAULT_SCHEDULE

    object_ids = [o.object_id for o in world.objects]
    n_holdout = max(2, int(round(holdout_fraction * len(object_ids)))) if len(object_ids) > 4 else 0
    train_ids = object_ids[: len(object_ids) - n_holdout] if n_holdout else object_ids
    eval_ids = object_ids[len(object_ids) - n_holdout:] if n_holdout else object_ids

    x0, bags = _training_rows(world, train_ids)
    n, dim = x0.shape
    rng = np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, _INIT_TAG]))
    params = rng.standard_normal(accel.mlp_param_size(dim, bags.shape[1], hidden)) * 0.1
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)

    epoch_rng = np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, _EPOCH_TAG]))
    step = 0
    losses = []
    for _ in range(epochs):
        order = epoch_rng.permutation(n)
        ts = epoch_rng.random(n)
        eps = epoch_rng.standard_normal((n, dim))
        abar = np.asarray(schedule.alpha_bar(ts), dtype=np.float64)
        loss, step = accel.train_epoch(
            params, m1, m2, x0, bags,
            np.sqrt(abar), np.sqrt(1.0 - abar), eps,
            order, batch_size, step, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
        )
        losses.append(float(loss))

    denoiser = ToyDenoiser(params=params, hidden=hidden, dim=dim, schedule=schedule)
    metrics = separation_metrics(denoiser, world, eval_ids, seed)
    denoiser.training_report = {
        "epochs": epochs,
        "final_loss": losses[-1],
        "first_loss": losses[0],
        "train_objects": len(train_ids),
        "eval_objects": len(eval_ids),
        **metrics,
    }
    # Non-finite margins (diverged training) must fail too, hence the negation.
    if not (metrics["x0_margin"] > 0.0 and metrics["eps_margin"] > 0.0):
        raise ToyTrainingError(
            f"denoiser failed to separate true from mismatched captions: {metrics}"
        )
    return denoiser


def save_denoiser(denoiser: ToyDenoiser, path: str | Path) -> None:
    meta = {
        "version": DENOISER_FORMAT_VERSION,
        "hidden": denoiser.hidden,
        "dim": denoiser.dim,
        "schedule": denoiser.schedule.name,
        "training_report": denoiser.training_report,
    }
    np.savez(path, params=denoiser.params, meta=json.dumps(meta))


def load_denoiser(path: str | Path, schedule: NoiseSchedule | None = None) -> ToyDenoiser:
    with np.load(path, allow_pickle=False) as archive:
        params = np.asarray(archive["params"], dtype=np.float64)
        meta = json.loads(str(archive["meta"]))
    if meta.get("version") != DENOISER_FORMAT_VERSION:
        raise ValueError(f"unsupported denoiser format version: {meta.get('version')!r}")
    return ToyDenoiser(
        params=params,
        hidden=int(meta["hidden"]),
        dim=int(meta["dim"]),
        schedule=schedule or DEFAULT_SCHEDULE,
        training_report=dict(meta.get("training_report", {})),
    )
