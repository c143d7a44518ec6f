"""Cosine similarities, hinge triplet loss over in-batch hard negatives, epochs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data_io import RegionSet, TokenSequence
from .errors import ArgumentError, NumericError
from .model import TERN
from .numerics import AdamState, Tensor

log = logging.getLogger(__name__)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"cosine similarity needs equal dims, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ArgumentError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(img_embs, cap_embs):
    """``S[i, c]`` = cosine(image i, caption c).

    Tensors stay on the autodiff tape (rows are re-normalized, a no-op for unit
    vectors); plain arrays give a plain array.
    """
    if isinstance(img_embs, Tensor) or isinstance(cap_embs, Tensor):
        img, cap = nx.as_tensor(img_embs), nx.as_tensor(cap_embs)
        if img.ndim != 2 or cap.ndim != 2 or img.shape[0] != cap.shape[0] or img.shape[1] != cap.shape[1]:
            raise ArgumentError(f"batch mismatch: images {img.shape} vs captions {cap.shape}")
        return nx.matmul(nx.l2_normalize(img), nx.transpose(nx.l2_normalize(cap)))
    img = np.asarray([getattr(e, "vector", e) for e in img_embs], dtype=np.float64)
    cap = np.asarray([getattr(e, "vector", e) for e in cap_embs], dtype=np.float64)
    if img.shape[0] != cap.shape[0] or img.ndim != 2 or cap.ndim != 2 or img.shape[1] != cap.shape[1]:
        raise ArgumentError(f"batch mismatch: images {img.shape} vs captions {cap.shape}")
    ni = np.linalg.norm(img, axis=1, keepdims=True)
    nc = np.linalg.norm(cap, axis=1, keepdims=True)
    if np.any(ni == 0) or np.any(nc == 0):
        raise ArgumentError("cosine similarity of a zero-norm vector")
    return np.clip((img / ni) @ (cap / nc).T, -1.0, 1.0)


def hard_negatives(S: np.ndarray, same_item: np.ndarray | None = None) -> tuple:
    """Indices of the hardest negative caption per image row and image per caption column.

    Returns ``(c_hard, i_hard, row_has, col_has)``. Ties go to the lowest
    index. ``same_item[i, c]`` marks extra pairs that are not negatives.
    """
    B = S.shape[0]
    allowed = ~np.eye(B, dtype=bool)
    if same_item is not None:
        allowed &= ~np.asarray(same_item, dtype=bool)
    masked = np.where(allowed, S, -np.inf)
    c_hard = np.argmax(masked, axis=1)
    i_hard = np.argmax(masked, axis=0)
    return c_hard, i_hard, allowed.any(axis=1), allowed.any(axis=0)


def triplet_loss_hard_negatives(S, alpha: float = 0.2, reduction: str = "sum",
                                same_item: np.ndarray | None = None) -> Tensor:
    """Hinge ranking loss where each positive pair (i, i) meets its hardest negatives.

    Per pair: [alpha + S(i, c') - S(i, i)]_+ + [alpha + S(i', i) - S(i, i)]_+.
    Gradient flows only through the selected entries; the hinge has zero
    gradient at exactly zero.
    """
    S = nx.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ArgumentError(f"similarity matrix must be square, got {S.shape}")
    if reduction not in ("sum", "mean"):
        raise ArgumentError(f"unknown reduction {reduction!r}")
    B = S.shape[0]
    if B < 2:
        return nx.tsum(S * 0.0)
    c_hard, i_hard, row_has, col_has = hard_negatives(S.data, same_item)
    idx = np.arange(B)
    pos = S[idx, idx]
    cost_c = nx.relu(S[idx, c_hard] - pos + alpha) * row_has
    cost_i = nx.relu(S[i_hard, idx] - pos + alpha) * col_has
    total = nx.tsum(cost_c + cost_i)
    return total * (1.0 / B) if reduction == "mean" else total


@dataclass
class Batch:
    region_sets: list
    captions: list


def iterate_batches(pairs: Sequence[tuple], batch_size: int, rng: np.random.Generator):
    """Shuffle (Fisher-Yates via ``rng.permutation``) and cut into batches; the last may be short."""
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chosen = [pairs[i] for i in order[start:start + batch_size]]
        yield Batch([rs for rs, _ in chosen], [ts for _, ts in chosen])


def batch_loss(model: TERN, batch: Batch, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Tensor:
    img = model.forward_images(batch.region_sets, rng)
    cap = model.forward_captions(batch.captions, rng)
    S = similarity_matrix(img, cap)
    same = None
    if cfg.exclude_same_image:
        ids = np.array([rs.image_id for rs in batch.region_sets])
        same = ids[:, None] == ids[None, :]
    return triplet_loss_hard_negatives(S, cfg.alpha, cfg.loss_reduction, same)


def train_epoch(model: TERN, pairs: Sequence[tuple], cfg: TrainConfig, adam: AdamState,
                epoch: int = 0, on_batch=None) -> float:
    """One shuffled pass with an Adam step per batch; returns mean batch loss.

    ``pairs`` holds aligned ``(RegionSet, TokenSequence)`` tuples. Shuffling and
    dropout draw from generators seeded by ``(cfg.seed, epoch)``.
    """
    if not pairs:
        return 0.0
    shuffle_rng = np.random.default_rng([cfg.seed, epoch, 0])
    dropout_rng = np.random.default_rng([cfg.seed, epoch, 1])
    params = model.parameters()
    losses = []
    for b, batch in enumerate(iterate_batches(pairs, cfg.batch_size, shuffle_rng)):
        if len(batch.region_sets) < 2:
            log.warning("epoch %d batch %d has a single pair; no negatives, skipped", epoch, b)
            losses.append(0.0)
            continue
        model.zero_grad()
        loss = batch_loss(model, batch, cfg, dropout_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
        loss.backward()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        nx.adam_step(adam, params)
        losses.append(value)
        if on_batch is not None:
            on_batch(epoch, b, value)
    model.zero_grad()
    return float(np.mean(losses))


def make_pairs(region_sets: Sequence[RegionSet], captions: Sequence[TokenSequence]) -> list:
    """Pair every caption with its image's region set, in caption order."""
    by_id = {rs.image_id: rs for rs in region_sets}
    missing = sorted({ts.image_id for ts in captions} - set(by_id))
    if missing:
        raise ArgumentError(f"captions refer to unknown images: {missing[:10]}")
    return [(by_id[ts.image_id], ts) for ts in captions]
