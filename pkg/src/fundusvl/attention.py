"""Image-similarity-guided expert knowledge extraction.

Multi-head cross-attention where public image features are queries, expert
image features are keys, and expert text features are values: each public
sample reads the expert descriptions whose images resemble it.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class KnowledgeAttention(nn.Module):
    """Multi-head cross-attention with per-head projection matrices.

    Heads use separate d -> d_h projections for queries, keys, and values
    (no biases); head outputs are concatenated and mapped back to d by an
    output projection. Scores are scaled by 1/sqrt(d_h).
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} must be divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Parameter(torch.empty(heads, dim, self.head_dim))
        self.w_k = nn.Parameter(torch.empty(heads, dim, self.head_dim))
        self.w_v = nn.Parameter(torch.empty(heads, dim, self.head_dim))
        self.w_o = nn.Parameter(torch.empty(heads * self.head_dim, dim))
        for param in (self.w_q, self.w_k, self.w_v):
            for h in range(heads):
                nn.init.xavier_uniform_(param.data[h])
        nn.init.xavier_uniform_(self.w_o.data)

    def forward(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        return_weights: bool = False,
    ):
        if keys.shape[0] == 0:
            raise ValueError("attention requires at least one key row")
        if keys.shape != values.shape:
            raise ValueError(
                f"keys {tuple(keys.shape)} and values {tuple(values.shape)} must be row-aligned"
            )
        if queries.shape[1] != self.dim or keys.shape[1] != self.dim:
            raise ValueError(f"inputs must have width {self.dim}")
        q = torch.einsum("pd,hde->hpe", queries, self.w_q)
        k = torch.einsum("md,hde->hme", keys, self.w_k)
        v = torch.einsum("md,hde->hme", values, self.w_v)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)  # (h, B_p, B_m)
        weights = F.softmax(scores, dim=-1)
        per_head = weights @ v  # (h, B_p, d_h)
        concat = per_head.permute(1, 0, 2).reshape(queries.shape[0], self.heads * self.head_dim)
        out = concat @ self.w_o
        if return_weights:
            return out, weights
        return out


def extract_expert_knowledge(
    v_public: torch.Tensor,
    v_expert: torch.Tensor,
    t_expert: torch.Tensor,
    attention: KnowledgeAttention,
) -> torch.Tensor:
    """Attend public image features over expert (image, text) rows.

    Returns one knowledge row per public query; each row depends on the whole
    expert set but only on its own query.
    """
    return attention(v_public, v_expert, t_expert)


def fuse_expert_knowledge(expert_knowledge: torch.Tensor, t_public: torch.Tensor) -> torch.Tensor:
    """Residual fusion: add extracted knowledge onto public text features."""
    if expert_knowledge.shape != t_public.shape:
        raise ValueError(
            f"shape mismatch: {tuple(expert_knowledge.shape)} vs {tuple(t_public.shape)}"
        )
    return t_public + expert_knowledge
