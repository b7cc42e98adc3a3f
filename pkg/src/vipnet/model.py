"""The full ranking model: cue lifting, temporal rectification, and
temperature-scaled classification over persons."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig, SPATIAL_CUES, TEMPORAL_CUES
from .cues import (CueScalarSeries, LipSalience, ScalarCueLift, TextEncoder,
                   compute_cue_series)
from .data_model import Clip
from .rectifier import (AlignBlock, IntraFusion, RelationEncoder, SemanticGate,
                        TemporalPool)


class InferenceError(Exception):
    """No valid persons to rank."""


@dataclass
class ClipFeatures:
    """Model-agnostic per-clip inputs: raw cue series plus text."""
    clip_id: str
    series: dict[str, np.ndarray]     # cue -> (N, T) float
    frame_valid: np.ndarray           # (N, T) bool
    person_ids: list[int]
    scene_text: str
    vip_person_id: int
    rationale_text: str
    category: str
    split: str


def featurize(clip: Clip) -> ClipFeatures:
    series = compute_cue_series(clip)
    text = clip.scene_description
    descriptions = " ".join(t.description for t in clip.persons)
    if descriptions.strip():
        text = (text + " " + descriptions).strip()
    return ClipFeatures(
        clip_id=clip.clip_id,
        series={k: v.copy() for k, v in series.cues.items()},
        frame_valid=series.mask.frame_valid.copy(),
        person_ids=[t.person_id for t in clip.persons],
        scene_text=text,
        vip_person_id=clip.vip_person_id,
        rationale_text=clip.rationale_text,
        category=clip.category,
        split=clip.split,
    )


@dataclass
class ForwardResult:
    probabilities: torch.Tensor       # (N,) zeros at invalid persons
    logits: torch.Tensor              # (N,) -inf at invalid/zero-norm persons
    embeddings: torch.Tensor          # (N, D) relation-enhanced H
    pooled: torch.Tensor              # (N, D)
    pooling_weights: torch.Tensor     # (N, T)
    attention: Optional[torch.Tensor]
    person_valid: torch.Tensor        # (N,) bool


def classify_logits(h: torch.Tensor, weight: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled cosine-style logits; zero-norm rows get -inf."""
    norms = h.norm(dim=1)
    safe = norms.clamp(min=1e-12)
    logits = (h @ weight) / (tau * safe)
    neg_inf = torch.tensor(float("-inf"), dtype=h.dtype)
    return torch.where(norms > 0, logits, neg_inf)


def masked_probabilities(logits: torch.Tensor, person_valid: torch.Tensor) -> torch.Tensor:
    """Softmax over valid persons only; invalid persons get exactly 0."""
    if not bool(person_valid.any()):
        raise InferenceError("all persons invalid")
    idx = torch.nonzero(person_valid, as_tuple=False).squeeze(-1)
    sub = torch.softmax(logits[idx], dim=0)
    probs = torch.zeros_like(logits)
    return probs.index_put((idx,), sub)


class VIPNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(self.config.seed)
        d = self.config.dim
        self.lift = ScalarCueLift(self.config)
        self.lip = LipSalience(self.config)
        self.text_encoder = TextEncoder(self.config)
        self.fuse_spatial = IntraFusion(self.config)
        self.fuse_temporal = IntraFusion(self.config)
        self.semantic_gate = SemanticGate(self.config)
        self.align = AlignBlock(self.config)
        self.pool = TemporalPool(self.config)
        self.relate = RelationEncoder(self.config)
        self.classifier = nn.Parameter(torch.randn(d) / d**0.5)

    @property
    def dtype(self):
        return self.classifier.dtype

    def forward(self, feats: ClipFeatures,
                frame_window: Optional[np.ndarray] = None,
                series_override: Optional[dict[str, torch.Tensor]] = None) -> ForwardResult:
        """Run one clip. ``frame_window`` optionally restricts the valid
        frames (boolean over T), used for augmented contrastive views.
        ``series_override`` substitutes raw cue tensors (for gradient probes).

        Invalid persons and frame columns that are invalid for every person
        are gathered out before the learned stages and scattered back
        afterwards. Masking makes them contribute exactly zero either way;
        compacting additionally keeps the results bit-identical under padding
        (matrix kernels are not shape-stable otherwise).
        """
        dtype = self.dtype
        frame_valid = feats.frame_valid
        if frame_window is not None:
            frame_valid = frame_valid & frame_window[None, :]
        num_persons, num_frames = frame_valid.shape
        person_valid = torch.from_numpy(frame_valid.any(axis=1))
        if not bool(person_valid.any()):
            raise InferenceError("all persons invalid")

        p_idx = torch.from_numpy(np.flatnonzero(frame_valid.any(axis=1)))
        f_idx = torch.from_numpy(np.flatnonzero(frame_valid.any(axis=0)))
        fv_full = torch.from_numpy(frame_valid)

        raw = series_override if series_override is not None else feats.series
        series = {name: torch.as_tensor(arr, dtype=dtype) * fv_full.to(dtype)
                  for name, arr in raw.items()}
        # learned positive decay modulates the lip aperture series; applied
        # before compaction so lambda_t stays indexed by the original frame
        series["lip"] = self.lip.modulated(series["lip"]) * fv_full.to(dtype)

        def compact(x):
            return x.index_select(0, p_idx).index_select(1, f_idx)

        fv = compact(fv_full)
        series = {name: compact(arr) for name, arr in series.items()}

        lifted = self.lift(series, fv)
        spatial = self.fuse_spatial([lifted[c] for c in SPATIAL_CUES])
        temporal = self.fuse_temporal([lifted[c] for c in TEMPORAL_CUES])

        text_vec, text_present = self.text_encoder(feats.scene_text)
        spatial_g = self.semantic_gate(spatial.features, text_vec, text_present)
        temporal_g = self.semantic_gate(temporal.features, text_vec, text_present)

        aligned = self.align(spatial_g, temporal_g, fv)
        pooled, weights = self.pool(aligned.features, fv)
        related = self.relate(pooled, fv.any(dim=1))

        logits = classify_logits(related, self.classifier, self.config.tau_cls)
        sub_probs = masked_probabilities(logits, torch.ones(len(p_idx), dtype=torch.bool))

        d = related.shape[1]
        neg_inf = torch.tensor(float("-inf"), dtype=dtype)
        full_logits = torch.full((num_persons,), float("-inf"), dtype=dtype)
        full_logits = full_logits.index_put((p_idx,), logits)
        full_probs = torch.zeros(num_persons, dtype=dtype).index_put((p_idx,), sub_probs)
        full_emb = torch.zeros(num_persons, d, dtype=dtype).index_put((p_idx,), related)
        full_pooled = torch.zeros(num_persons, d, dtype=dtype).index_put((p_idx,), pooled)
        full_weights = torch.zeros(num_persons, num_frames, dtype=dtype).index_put(
            (p_idx.unsqueeze(1), f_idx.unsqueeze(0)), weights)
        attention = None
        if aligned.attention is not None:
            heads = aligned.attention.shape[1]
            attention = torch.zeros(num_persons, heads, num_frames, num_frames,
                                    dtype=dtype)
            attention[p_idx[:, None, None, None],
                      torch.arange(heads)[None, :, None, None],
                      f_idx[None, None, :, None],
                      f_idx[None, None, None, :]] = aligned.attention

        return ForwardResult(
            probabilities=full_probs,
            logits=full_logits,
            embeddings=full_emb,
            pooled=full_pooled,
            pooling_weights=full_weights,
            attention=attention,
            person_valid=person_valid,
        )

    def with_fusion(self, variant: str) -> "VIPNet":
        """Fresh model with a different fusion variant (same seed/config)."""
        return VIPNet(replace(self.config, fusion=variant))
