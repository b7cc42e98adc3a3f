"""Ranking, percentile-rank computation, and end-to-end clip prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .config import CUE_NAMES
from .cues import CueScalarSeries, compute_cue_series, mean_cue_scores
from .data_model import Clip
from .model import ClipFeatures, InferenceError, VIPNet, featurize, masked_probabilities
from .rationale import MARGIN_THRESHOLD, Rationale, make_rationale, refine_rationale


@dataclass
class ImportanceResult:
    clip_id: str
    probabilities: dict[int, float]      # person_id -> probability (0 for invalid)
    ranked_ids: list[int]
    vip_id: int
    per_cue_rank: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "probabilities": {str(k): self.probabilities[k] for k in sorted(self.probabilities)},
            "ranked_ids": self.ranked_ids,
            "vip_id": self.vip_id,
            "per_cue_rank": {k: self.per_cue_rank[k] for k in sorted(self.per_cue_rank)},
        }


def classify(h: torch.Tensor, person_valid: torch.Tensor, tau: float,
             weight: torch.Tensor) -> torch.Tensor:
    """Temperature-scaled softmax over valid persons of W_c h / (tau ||h||)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    from .model import classify_logits
    logits = classify_logits(h, weight, tau)
    neg_inf = torch.tensor(float("-inf"), dtype=h.dtype)
    logits = torch.where(person_valid, logits, neg_inf)
    return masked_probabilities(logits, person_valid)


def rank(probabilities, person_ids=None) -> list[int]:
    """Person ids sorted by probability descending, ties by ascending id."""
    probs = np.asarray(
        probabilities.detach().numpy() if isinstance(probabilities, torch.Tensor)
        else probabilities, dtype=np.float64)
    if not np.isfinite(probs).all():
        raise ValueError("probabilities must be finite")
    ids = list(person_ids) if person_ids is not None else list(range(len(probs)))
    return [pid for pid, _ in sorted(zip(ids, probs), key=lambda kv: (-kv[1], kv[0]))]


def percentile_rank(scores, vip_index: int, valid) -> float:
    """Fraction of other valid persons strictly below the VIP's score.

    A sole valid person gets rank 1.0 by convention.
    """
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid[vip_index]:
        raise InferenceError(f"vip index {vip_index} is not a valid person")
    others = [m for m in np.flatnonzero(valid) if m != vip_index]
    if not others:
        return 1.0
    below = sum(1 for m in others if scores[m] < scores[vip_index])
    return below / len(others)


def per_cue_percentile_ranks(series: CueScalarSeries, vip_index: int) -> dict[str, float]:
    """Percentile rank of the VIP on each cue, using per-person means over
    valid frames."""
    means = mean_cue_scores(series)
    valid = series.mask.person_valid
    return {cue: percentile_rank(means[cue], vip_index, valid) for cue in CUE_NAMES}


def predict(model: VIPNet, clip: Clip,
            feats: Optional[ClipFeatures] = None) -> ImportanceResult:
    """Forward a clip and assemble the ranked result with per-cue ranks."""
    feats = feats or featurize(clip)
    with torch.no_grad():
        result = model(feats)
    probs = result.probabilities.numpy()
    ranked = rank(probs, feats.person_ids)
    vip_id = ranked[0]
    vip_index = feats.person_ids.index(vip_id)
    series = compute_cue_series(clip)
    ranks = per_cue_percentile_ranks(series, vip_index)
    return ImportanceResult(
        clip_id=clip.clip_id,
        probabilities={pid: float(p) for pid, p in zip(feats.person_ids, probs)},
        ranked_ids=ranked,
        vip_id=vip_id,
        per_cue_rank=ranks,
    )


def explain(model: VIPNet, clip: Clip, mode: str = "baseline",
            client=None, margin_threshold: float = MARGIN_THRESHOLD) -> tuple[ImportanceResult, Rationale]:
    """Predict the VIP and generate its (optionally refined) rationale."""
    result = predict(model, clip)
    rationale = make_rationale(result.per_cue_rank, margin_threshold)
    rationale = refine_rationale(rationale, video_reference=clip.clip_id,
                                 vip_id=result.vip_id, mode=mode, client=client)
    return result, rationale
