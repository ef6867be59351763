"""Exact-expectation counterpart of the Monte Carlo alignment score.

The oracle integrates the expected denoising loss over a dense uniform
timestamp grid (midpoint rule) crossed with a fixed quasi-random set of
noise vectors (scrambled Sobol points mapped through the normal
inverse CDF).  The Sobol scramble seed is a documented constant so
oracle values are reproducible release to release.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from ..scoring import ConditionalDenoiser, LossMode, ObjectLatent, ScoringError
from ..schedule import DEFAULT_SCHEDULE, NoiseSchedule

ORACLE_EPS_SEED = 20240501
DEFAULT_T_GRID = 128
DEFAULT_EPS_SET = 256


def quasi_normal_set(dim: int, count: int, seed: int = ORACLE_EPS_SEED) -> np.ndarray:
    """Scrambled-Sobol standard-normal vectors, deterministic for a seed."""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    uniforms = sampler.random(count)
    return ndtri(np.clip(uniforms, 1e-12, 1.0 - 1e-12))


def oracle_alignment(
    denoiser: ConditionalDenoiser,
    latent: ObjectLatent,
    caption: str,
    t_grid_size: int = DEFAULT_T_GRID,
    eps_set_size: int = DEFAULT_EPS_SET,
    loss_mode: LossMode = LossMode.X0_PREDICTION,
    schedule: NoiseSchedule | None = None,
    eps_seed: int = ORACLE_EPS_SEED,
) -> float:
    """Low-variance reference value of the alignment score for one caption."""
    if t_grid_size < 16:
        raise ValueError(f"t_grid_size must be >= 16, got {t_grid_size}")
    schedule = schedule or DEFAULT_SCHEDULE

    t_grid = (np.arange(t_grid_size) + 0.5) / t_grid_size
    eps_set = quasi_normal_set(latent.dim, eps_set_size, seed=eps_seed)

    # All (t, eps) combinations, flattened for one batched pass.
    ts = np.repeat(t_grid, eps_set_size)
    eps = np.tile(eps_set, (t_grid_size, 1))
    abar = np.asarray(schedule.alpha_bar(ts), dtype=np.float64)
    noised = np.sqrt(abar)[:, None] * latent.vector[None, :] + np.sqrt(1.0 - abar)[:, None] * eps

    if hasattr(denoiser, "denoise_batch"):
        preds = np.asarray(denoiser.denoise_batch(noised, ts, caption), dtype=np.float64)
    else:
        preds = np.stack(
            [denoiser.denoise(noised[i], float(ts[i]), caption) for i in range(ts.size)]
        )
    if not np.all(np.isfinite(preds)):
        raise ScoringError(f"denoiser produced non-finite output (caption={caption!r})")
    targets = latent.vector[None, :] if loss_mode is LossMode.X0_PREDICTION else eps
    residual = preds - targets
    return -float(np.mean(residual * residual))
