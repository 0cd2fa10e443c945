"""Scenario contrast, motion clustering, feature decoupling and classification losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .labelkit import NUM_CLASSES


class BatchConstructionError(ValueError):
    """A batch cannot support the scenario contrast loss."""


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.1
    lambda_m: float = 1.0

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_m < 0:
            raise ValueError("loss weights must be non-negative")


class ClusterBank(nn.Module):
    """Trainable centers, ``num_centers`` per class, stored as ``(K, 5, d)``."""

    def __init__(self, feature_dim: int, num_centers: int = 4, init_scale: float = 0.1):
        super().__init__()
        self.centers = nn.Parameter(init_scale * torch.randn(num_centers, NUM_CLASSES, feature_dim))

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]


def _group_keys(scenario_ids: Sequence[Hashable], session_ids: Sequence[Hashable] | None):
    if session_ids is None:
        return list(scenario_ids)
    return list(zip(scenario_ids, session_ids))


def designate_positives(keys: Sequence[Hashable]) -> list[int | None]:
    """Pick one positive per anchor: the next member of its group, cyclically."""
    groups: dict[Hashable, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    out: list[int | None] = [None] * len(keys)
    for members in groups.values():
        if len(members) < 2:
            continue
        for p, i in enumerate(members):
            out[i] = members[(p + 1) % len(members)]
    return out


def scenario_contrast_loss(
    s: torch.Tensor,
    scenario_ids: Sequence[Hashable],
    session_ids: Sequence[Hashable] | None = None,
    temperature: float = 1.0,
    include_positive: bool = False,
) -> torch.Tensor:
    """In-batch contrast of scenario features.

    Clips sharing ``(scenario_id, session_id)`` are positives of each other,
    everything else is a negative. Per anchor the loss is
    ``-sim(s, s+)/tau + logsumexp_{s' in negatives} sim(s, s')/tau`` with
    cosine similarity; the positive joins the denominator only when
    ``include_positive`` is set. Anchors without negatives are skipped.
    """
    keys = _group_keys(scenario_ids, session_ids)
    n = s.shape[0]
    if len(keys) != n:
        raise ValueError("one group id per feature vector is required")
    positives = designate_positives(keys)
    missing = [i for i, p in enumerate(positives) if p is None]
    if missing:
        raise BatchConstructionError(f"anchors {missing} have no same-scenario, same-session companion")
    z = F.normalize(s, dim=1)
    sim = z @ z.t() / temperature
    key_idx = {k: i for i, k in enumerate(dict.fromkeys(keys))}
    g = torch.tensor([key_idx[k] for k in keys])
    neg_mask = g[:, None] != g[None, :]
    has_neg = neg_mask.any(dim=1)
    if not bool(has_neg.any()):
        raise BatchConstructionError("no anchor has a negative sample; the batch holds a single group")
    pos_idx = torch.tensor(positives)
    pos_sim = sim[torch.arange(n), pos_idx]
    denom_mask = neg_mask.clone()
    if include_positive:
        denom_mask[torch.arange(n), pos_idx] = True
    masked = sim.masked_fill(~denom_mask, float("-inf"))
    # rows without negatives would backpropagate nan through logsumexp
    masked = torch.where(has_neg[:, None], masked, torch.zeros_like(masked))
    per_anchor = torch.logsumexp(masked, dim=1) - pos_sim
    return per_anchor[has_neg].mean()


def center_distances(m: torch.Tensor, bank: ClusterBank | torch.Tensor) -> torch.Tensor:
    """``D(m | k)`` for every sample and class, shape ``(B, 5)``.

    The minimum over a class's centers routes its gradient to the first
    index attaining it.
    """
    centers = bank.centers if isinstance(bank, ClusterBank) else bank
    diff = m[:, None, None, :] - centers[None]  # B, K, 5, d
    dist = torch.linalg.vector_norm(diff, dim=-1)  # B, K, 5
    idx = torch.argmin(dist.detach(), dim=1, keepdim=True)
    return dist.gather(1, idx).squeeze(1)


def nearest_center_distance(m: torch.Tensor, c: int, bank: ClusterBank | torch.Tensor) -> torch.Tensor:
    """Minimum Euclidean distance from a single vector ``m`` to the centers of class ``c``."""
    return center_distances(m.reshape(1, -1), bank)[0, int(c)]


def motion_clustering_loss(m: torch.Tensor, z: torch.Tensor, bank: ClusterBank | torch.Tensor) -> torch.Tensor:
    """Cross-entropy of ``softmax_k(-D(m | k))`` against the labels ``z``.

    The normalizer sums over all classes ``k``.
    """
    return F.cross_entropy(-center_distances(m, bank), z)


def feature_decoupling_loss(
    s: torch.Tensor,
    m: torch.Tensor,
    meta: dict,
    bank: ClusterBank,
    w: LossWeights = LossWeights(),
    temperature: float = 1.0,
    include_positive: bool = False,
) -> torch.Tensor:
    """``lambda_s * L_sc + lambda_m * L_mc``; a zero-weight term is not evaluated.

    ``meta`` holds ``scenario_id``, ``session_id`` and ``label`` sequences.
    """
    total = s.new_zeros(())
    if w.lambda_s > 0:
        total = total + w.lambda_s * scenario_contrast_loss(
            s, meta["scenario_id"], meta.get("session_id"), temperature, include_positive
        )
    if w.lambda_m > 0:
        total = total + w.lambda_m * motion_clustering_loss(m, torch.as_tensor(meta["label"]), bank)
    return total


def classification_loss(logits: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, z)
