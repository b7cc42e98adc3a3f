"""Temporal importance rectification: gated intra-modality fusion, text
gating, masked cross-attention alignment, energy-based temporal pooling, and
inter-personal relational encoding.

All stages take (N, T, D) person/frame/feature tensors plus boolean validity
masks and keep masked positions at exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig


@dataclass
class FusedModalityFeatures:
    features: torch.Tensor            # (N, T, D)
    gate_values: list[torch.Tensor]   # per sub-cue (N, T, 1) in (0, 1)


@dataclass
class AlignedFeatures:
    features: torch.Tensor            # (N, T, D)
    attention: torch.Tensor | None    # (N, h, T, T) or None for non-attention fusion
    fully_masked_persons: torch.Tensor  # (N,) bool


@dataclass
class PersonEmbedding:
    pooled: torch.Tensor              # (N, D)
    related: torch.Tensor             # (N, D)
    pooling_weights: torch.Tensor     # (N, T)


class IntraFusion(nn.Module):
    """Sum of sub-cue embeddings, each scaled by an independent sigmoid gate
    computed against a modality-specific focal query."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.value = nn.Linear(d, d)
        self.query = nn.Parameter(torch.randn(d) / math.sqrt(d))
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, sub_cues: list[torch.Tensor]) -> FusedModalityFeatures:
        gates = []
        fused = None
        for x in sub_cues:
            logits = (self.value(x) @ self.query.to(x.dtype)).unsqueeze(-1) * self.scale
            gate = torch.sigmoid(logits)
            gates.append(gate)
            term = gate * x
            fused = term if fused is None else fused + term
        return FusedModalityFeatures(features=fused, gate_values=gates)


class SemanticGate(nn.Module):
    """Text-conditioned feature gate, broadcast over persons and frames.

    Without a text embedding the gate is a bit-exact identity.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, features: torch.Tensor, text_vec: torch.Tensor,
                text_present: bool) -> torch.Tensor:
        if not text_present:
            return features
        gate = torch.sigmoid(self.mlp(text_vec.to(features.dtype)))
        return features * gate.view(1, 1, -1)


def masked_softmax(scores: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with invalid keys at exactly zero weight.

    ``key_valid`` broadcasts against ``scores``. Rows with no valid key come
    out as all-zero (gradient-safe: the softmax runs on neutral scores there).
    """
    neg_inf = torch.tensor(float("-inf"), dtype=scores.dtype)
    masked = torch.where(key_valid, scores, neg_inf)
    row_has_valid = key_valid.expand_as(scores).any(dim=-1, keepdim=True)
    safe = torch.where(row_has_valid, masked, torch.zeros_like(scores))
    attn = torch.softmax(safe, dim=-1)
    return attn * row_has_valid.to(scores.dtype) * key_valid.to(scores.dtype)


class MaskedMultiHeadAttention(nn.Module):
    """Multi-head attention with additive -inf masking of invalid keys."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyval: torch.Tensor,
                key_valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """query (B, Lq, D), keyval (B, Lk, D), key_valid (B, Lk) bool.

        Returns (output (B, Lq, D), attention (B, h, Lq, Lk)).
        """
        B, Lq, _ = query.shape
        Lk = keyval.shape[1]

        def split(x, L):
            return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.w_q(query), Lq)
        k = split(self.w_k(keyval), Lk)
        v = split(self.w_v(keyval), Lk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = masked_softmax(scores, key_valid.view(B, 1, 1, Lk))
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, -1)
        return self.w_o(out), attn


class AlignBlock(nn.Module):
    """Spatial-stream queries attend over the temporal stream; configurable
    fusion variants replace the attention path for ablations."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.variant = config.fusion
        if self.variant == "transformer":
            self.attn = MaskedMultiHeadAttention(d, config.heads)
            self.norm = nn.LayerNorm(d, eps=1e-5)
        elif self.variant == "mlp":
            self.mlp = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, d))
        elif self.variant == "gated":
            self.gate = nn.Linear(2 * d, d)

    def forward(self, spatial: torch.Tensor, temporal: torch.Tensor,
                frame_valid: torch.Tensor) -> AlignedFeatures:
        m = frame_valid.unsqueeze(-1).to(spatial.dtype)
        fully_masked = ~frame_valid.any(dim=1)
        attn = None
        if self.variant == "transformer":
            attended, attn = self.attn(spatial, temporal, frame_valid)
            out = self.norm(spatial + attended)
        elif self.variant == "mlp":
            out = self.mlp(torch.cat([spatial, temporal], dim=-1))
        elif self.variant == "gated":
            g = torch.sigmoid(self.gate(torch.cat([spatial, temporal], dim=-1)))
            out = g * spatial + (1.0 - g) * temporal
        else:  # "none": plain sum
            out = spatial + temporal
        return AlignedFeatures(features=out * m, attention=attn,
                               fully_masked_persons=fully_masked)


class TemporalPool(nn.Module):
    """Energy-based attention pooling over valid frames."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.proj = nn.Linear(d, d)
        self.query = nn.Parameter(torch.randn(d) / math.sqrt(d))

    def forward(self, aligned: torch.Tensor,
                frame_valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, T, D), (N, T) -> pooled (N, D), weights (N, T)."""
        energy = self.proj(aligned) @ self.query.to(aligned.dtype)      # (N, T)
        weights = masked_softmax(energy.unsqueeze(1), frame_valid.unsqueeze(1)).squeeze(1)
        pooled = (weights.unsqueeze(-1) * aligned).sum(dim=1)
        return pooled, weights


class RelationLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.attn = MaskedMultiHeadAttention(d, config.heads)
        self.norm1 = nn.LayerNorm(d, eps=1e-5)
        self.norm2 = nn.LayerNorm(d, eps=1e-5)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x: torch.Tensor, person_valid: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attn(x, x, person_valid)
        h = self.norm1(x + attended)
        return self.norm2(h + self.ff(h))


class RelationEncoder(nn.Module):
    """Self-attention over the person tokens; no positional encoding, so the
    stack is permutation-equivariant."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(RelationLayer(config) for _ in range(config.relate_layers))

    def forward(self, persons: torch.Tensor, person_valid: torch.Tensor) -> torch.Tensor:
        """(N, D), (N,) -> (N, D) with invalid rows zeroed."""
        x = persons.unsqueeze(0)
        valid = person_valid.unsqueeze(0)
        for layer in self.layers:
            x = layer(x, valid)
        return x.squeeze(0) * person_valid.unsqueeze(-1).to(persons.dtype)
