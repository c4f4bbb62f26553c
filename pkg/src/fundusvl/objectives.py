"""Matching targets and training losses.

Four pieces: identity-target contrastive loss for expert pairs, co-occurrence
soft-target contrastive loss for labeled public data, the MSE revision loss
pulling prompt text features toward extracted expert knowledge, and their
weighted composite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .encoders import EmbeddingBatch, TemperatureScale, scaled_similarities

DEFAULT_ALPHA = 100.0


class TargetKind(enum.Enum):
    IDENTITY = "identity"
    COOCCURRENCE = "cooccurrence"


@dataclass(frozen=True)
class TargetMatrix:
    """Row-stochastic BxB matching targets."""

    matrix: torch.Tensor
    kind: TargetKind

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"targets must be square, got shape {tuple(m.shape)}")
        if torch.any(m < 0):
            raise ValueError("targets must be nonnegative")
        row_sums = m.sum(dim=1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-9):
            raise ValueError("target rows must sum to 1")
        if self.kind == TargetKind.IDENTITY and not torch.equal(
            m, torch.eye(m.shape[0], dtype=m.dtype, device=m.device)
        ):
            raise ValueError("IDENTITY targets must equal the identity matrix")


def identity_targets(
    batch_size: int, dtype: torch.dtype = torch.float32, device=None
) -> TargetMatrix:
    """Identity matching targets: row i matches column i only."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return TargetMatrix(torch.eye(batch_size, dtype=dtype, device=device), TargetKind.IDENTITY)


def cooccurrence_targets(
    categories: list[str], dtype: torch.dtype = torch.float32, device=None
) -> TargetMatrix:
    """Same-category matching targets, row-normalized.

    raw[i, j] = 1 when categories[i] == categories[j]; each row is then divided
    by its sum so the targets form a distribution. All-distinct labels
    degenerate to identity targets.
    """
    if len(categories) == 0:
        raise ValueError("empty category list")
    if any(not c for c in categories):
        raise ValueError("category labels must be nonempty")
    index = {c: i for i, c in enumerate(sorted(set(categories)))}
    codes = torch.tensor([index[c] for c in categories], device=device)
    raw = (codes.unsqueeze(0) == codes.unsqueeze(1)).to(dtype)
    return TargetMatrix(raw / raw.sum(dim=1, keepdim=True), TargetKind.COOCCURRENCE)


def soft_cross_entropy(logits: torch.Tensor, targets: TargetMatrix) -> torch.Tensor:
    """Mean over rows of -sum_j targets[i, j] * log_softmax(logits)[i, j]."""
    if logits.shape != targets.matrix.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)} vs targets "
            f"{tuple(targets.matrix.shape)}"
        )
    log_probs = F.log_softmax(logits, dim=1)
    return -(targets.matrix.to(log_probs.dtype) * log_probs).sum() / logits.shape[0]


def paired_cross_entropy(
    v_matrix: torch.Tensor,
    t_matrix: torch.Tensor,
    scale: TemperatureScale,
    targets: TargetMatrix,
) -> torch.Tensor:
    """Sum of both directional soft cross entropies on raw feature matrices."""
    image_to_text = scale.value() * (v_matrix @ t_matrix.T)
    return soft_cross_entropy(image_to_text, targets) + soft_cross_entropy(
        image_to_text.T, targets
    )


def expert_contrastive_loss(
    v: EmbeddingBatch, t: EmbeddingBatch, scale: TemperatureScale
) -> torch.Tensor:
    """Identity-target contrastive loss for genuine image-text pairs."""
    image_to_text, text_to_image = scaled_similarities(v, t, scale)
    targets = identity_targets(len(v), dtype=v.matrix.dtype, device=v.matrix.device)
    return soft_cross_entropy(image_to_text, targets) + soft_cross_entropy(
        text_to_image, targets
    )


def public_contrastive_loss(
    v: EmbeddingBatch,
    t: EmbeddingBatch,
    scale: TemperatureScale,
    categories: list[str],
) -> torch.Tensor:
    """Co-occurrence-target contrastive loss for prompt-mapped labeled data."""
    if len(categories) != len(v):
        raise ValueError(f"{len(categories)} categories for batch of {len(v)}")
    image_to_text, text_to_image = scaled_similarities(v, t, scale)
    targets = cooccurrence_targets(categories, dtype=v.matrix.dtype, device=v.matrix.device)
    return soft_cross_entropy(image_to_text, targets) + soft_cross_entropy(
        text_to_image, targets
    )


def revision_loss(expert_knowledge: torch.Tensor, t_public: torch.Tensor) -> torch.Tensor:
    """Mean squared difference pulling prompt text features toward knowledge."""
    if expert_knowledge.shape != t_public.shape:
        raise ValueError(
            f"shape mismatch: {tuple(expert_knowledge.shape)} vs {tuple(t_public.shape)}"
        )
    return ((expert_knowledge - t_public) ** 2).mean()


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components and their weighted total."""

    l_p: float
    l_m: float
    l_ek: float
    alpha: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.l_p + self.l_m + self.alpha * self.l_ek)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_p": self.l_p,
            "l_m": self.l_m,
            "l_ek": self.l_ek,
            "alpha": self.alpha,
            "total": self.total,
        }


def total_loss(
    l_p: float, l_m: float, l_ek: float, alpha: float = DEFAULT_ALPHA
) -> LossBreakdown:
    """Combine loss components: total = l_p + l_m + alpha * l_ek."""
    for name, value in (("l_p", l_p), ("l_m", l_m), ("l_ek", l_ek), ("alpha", alpha)):
        if value < 0:
            raise ValueError(f"{name} must be nonnegative, got {value}")
    return LossBreakdown(l_p=l_p, l_m=l_m, l_ek=l_ek, alpha=alpha)
