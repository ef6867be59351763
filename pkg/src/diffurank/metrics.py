"""Embedding-based caption metrics: cosine score and retrieval precision."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .clients import EmbedderClient


def clip_score(embedder: EmbedderClient, caption: str, image_refs: Sequence[str]) -> float:
    """Mean cosine similarity between the caption and each image, scaled by 100."""
    if not image_refs:
        raise ValueError("at least one image is required")
    cap = np.asarray(embedder.embed_text(caption), dtype=np.float64)
    sims = []
    for ref in image_refs:
        img = np.asarray(embedder.embed_image(ref), dtype=np.float64)
        if img.shape != cap.shape:
            raise ValueError(f"embedding dimension mismatch: {img.shape} vs {cap.shape}")
        sims.append(float(cap @ img))
    return 100.0 * float(np.mean(sims))


def clip_r_precision(
    embedder: EmbedderClient,
    pairs: Sequence[tuple[str, str]],
    ks: Sequence[int] = (1, 5, 10),
) -> dict[int, float]:
    """Recall@k of each image retrieving its own caption among all captions.

    For every (image_ref, caption) pair, all captions in the set are ranked
    by cosine similarity to the image, ties broken by ascending caption
    index; R@k is the fraction of images whose own caption lands in the
    top k.  Duplicate captions are permitted and resolved by the tie rule.
    """
    n = len(pairs)
    if n < max(ks):
        raise ValueError(f"need at least max(ks)={max(ks)} pairs, got {n}")
    image_embs = np.stack([np.asarray(embedder.embed_image(ref), dtype=np.float64)
                           for ref, _ in pairs])
    caption_embs = np.stack([np.asarray(embedder.embed_text(text), dtype=np.float64)
                             for _, text in pairs])
    sims = image_embs @ caption_embs.T

    indices = np.arange(n)
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        # lexsort: primary key last; ascending caption index breaks ties.
        order = np.lexsort((indices, -sims[i]))
        ranks[i] = int(np.nonzero(order == i)[0][0])
    return {int(k): float(np.mean(ranks < k)) for k in ks}
