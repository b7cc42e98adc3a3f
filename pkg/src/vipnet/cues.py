"""Social cue extraction: spatial scores (centrality, area, clarity),
temporal scores (action, lip), text embedding, and the scalar-to-embedding
lift used by the fusion stages."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import CUE_NAMES, ModelConfig
from .data_model import Clip, ValidityMask, validity_mask


class ConfigurationError(Exception):
    """A cue needs inputs (pixels or precomputed channels) the clip lacks."""


# ---------------------------------------------------------------------------
# Scalar cue scores
# ---------------------------------------------------------------------------

def centrality(box, width: int, height: int) -> float:
    """Clamped linear score of centroid distance to the frame center."""
    x1, y1, x2, y2 = box
    cx = 0.5 * (float(x1) + float(x2)) / width
    cy = 0.5 * (float(y1) + float(y2)) / height
    return max(0.0, 1.0 - 2.0 * math.hypot(cx - 0.5, cy - 0.5))


def area(box, width: int, height: int) -> float:
    x1, y1, x2, y2 = (float(v) for v in box)
    return (x2 - x1) * (y2 - y1) / (width * height)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    f = frame.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def laplacian_variance(gray: np.ndarray) -> float:
    """Population variance of the 3x3 discrete Laplacian response.

    Crops smaller than the kernel return 0.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        return 0.0
    response = (-4.0 * g[1:-1, 1:-1] + g[:-2, 1:-1] + g[2:, 1:-1]
                + g[1:-1, :-2] + g[1:-1, 2:])
    return float(np.var(response))


def face_region(track, t: int, width: int, height: int):
    """Face box for frame t, falling back to the top 30% of the person box."""
    if track.face_boxes is not None:
        x1, y1, x2, y2 = track.face_boxes[t]
    else:
        x1, y1, x2, y2 = track.boxes[t]
        y2 = y1 + 0.3 * (y2 - y1)
    x1 = int(max(0, math.floor(x1)))
    y1 = int(max(0, math.floor(y1)))
    x2 = int(min(width, math.ceil(x2)))
    y2 = int(min(height, math.ceil(y2)))
    return x1, y1, x2, y2


def clarity_from_frames(clip: Clip) -> np.ndarray:
    gray = to_grayscale(clip.frames)
    out = np.zeros((len(clip.persons), clip.num_frames))
    for i, track in enumerate(clip.persons):
        for t in np.flatnonzero(track.present):
            x1, y1, x2, y2 = face_region(track, t, clip.width, clip.height)
            out[i, t] = laplacian_variance(gray[t, y1:y2, x1:x2])
    return out


def motion_energy_from_frames(clip: Clip) -> np.ndarray:
    """Per-frame sum-of-absolute-differences inside the person box,
    normalized by box area. Frame 0 carries zero energy."""
    gray = to_grayscale(clip.frames)
    out = np.zeros((len(clip.persons), clip.num_frames))
    for i, track in enumerate(clip.persons):
        for t in range(1, clip.num_frames):
            if not (track.present[t] and track.present[t - 1]):
                continue
            x1, y1, x2, y2 = track.boxes[t]
            x1 = int(max(0, math.floor(x1)))
            y1 = int(max(0, math.floor(y1)))
            x2 = int(min(clip.width, math.ceil(x2)))
            y2 = int(min(clip.height, math.ceil(y2)))
            if x2 <= x1 or y2 <= y1:
                continue
            diff = np.abs(gray[t, y1:y2, x1:x2] - gray[t - 1, y1:y2, x1:x2])
            out[i, t] = float(diff.sum()) / ((x2 - x1) * (y2 - y1))
    return out


def aperture_series(clip: Clip) -> np.ndarray:
    """Lip aperture |upper - lower| summed over components, per person/frame."""
    out = np.zeros((len(clip.persons), clip.num_frames))
    for i, track in enumerate(clip.persons):
        if track.lip_points is None:
            continue
        diff = np.abs(track.lip_points[:, 0] - track.lip_points[:, 1]).sum(axis=1)
        diff = np.nan_to_num(diff, nan=0.0)
        out[i] = np.where(track.present, diff, 0.0)
    return out


@dataclass
class CueScalarSeries:
    cues: dict[str, np.ndarray]   # name -> (N, T) float64 raw scores
    mask: ValidityMask


def compute_cue_series(clip: Clip) -> CueScalarSeries:
    """All five raw scalar cue series for a clip.

    Pixel-derived cues (clarity, action) prefer the precomputed channels and
    fall back to the frame pixels; having neither is a configuration error.
    """
    n, T = len(clip.persons), clip.num_frames
    mask = validity_mask(clip)
    cen = np.zeros((n, T))
    ar = np.zeros((n, T))
    frame_valid = mask.frame_valid.copy()
    for i, track in enumerate(clip.persons):
        for t in np.flatnonzero(track.present):
            x1, y1, x2, y2 = track.boxes[t]
            if not (x1 < x2 and y1 < y2):
                frame_valid[i, t] = False  # degenerate box: cue contributes 0
                continue
            cen[i, t] = centrality(track.boxes[t], clip.width, clip.height)
            ar[i, t] = area(track.boxes[t], clip.width, clip.height)

    def pixel_cue(name, from_frames):
        if name in clip.cue_channels:
            return clip.cue_channels[name].astype(np.float64)
        if clip.frames is not None:
            return from_frames(clip)
        raise ConfigurationError(
            f"clip {clip.clip_id}: cue {name!r} needs frames or a precomputed channel")

    cues = {
        "centrality": cen,
        "area": ar,
        "clarity": pixel_cue("clarity", clarity_from_frames),
        "lip": aperture_series(clip),
        "action": pixel_cue("action", motion_energy_from_frames),
    }
    fv = frame_valid.astype(float)
    for name in cues:
        cues[name] = cues[name] * fv
    new_mask = ValidityMask(person_valid=frame_valid.any(axis=1), frame_valid=frame_valid)
    return CueScalarSeries(cues=cues, mask=new_mask)


def mean_cue_scores(series: CueScalarSeries) -> dict[str, np.ndarray]:
    """Per-person cue score: mean over that person's valid frames."""
    fv = series.mask.frame_valid
    counts = np.maximum(fv.sum(axis=1), 1)
    return {name: (arr * fv).sum(axis=1) / counts for name, arr in series.cues.items()}


# ---------------------------------------------------------------------------
# Tokenization and sentence embeddings
# ---------------------------------------------------------------------------

def hash_tokens(text: str, vocab_size: int, max_len: int = 128) -> list[int]:
    """Lowercase whitespace tokens hashed into a fixed id space."""
    tokens = text.lower().split()[:max_len]
    return [zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in tokens]


class HashingSentenceEmbedder:
    """Deterministic bag-of-words embedding for text similarity scoring."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in text.lower().split():
            vec[zlib.crc32(tok.encode("utf-8")) % self.dim] += 1.0
        return vec


def make_sentence_embedder(name: str = "hashing"):
    if name == "hashing":
        return HashingSentenceEmbedder()
    raise ConfigurationError(f"unknown sentence embedder {name!r}")


# ---------------------------------------------------------------------------
# Learned components
# ---------------------------------------------------------------------------

class TextEncoder(nn.Module):
    """Token + positional embeddings, a small self-attention stack, mean
    pooling, and a feed-forward projection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.vocab_size = config.vocab_size
        self.max_len = 128
        self.token_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(self.max_len, d)
        layer = nn.TransformerEncoderLayer(
            d_model=d, nhead=config.heads, dim_feedforward=2 * d,
            dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.text_layers)
        self.proj = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, text: str) -> tuple[torch.Tensor, bool]:
        ids = hash_tokens(text, self.vocab_size, self.max_len)
        dtype = self.token_emb.weight.dtype
        if not ids:
            d = self.token_emb.weight.shape[1]
            return torch.zeros(d, dtype=dtype), False
        idx = torch.tensor(ids, dtype=torch.long)
        pos = torch.arange(len(ids), dtype=torch.long)
        x = (self.token_emb(idx) + self.pos_emb(pos)).unsqueeze(0)
        enc = self.encoder(x).squeeze(0)
        return self.proj(enc.mean(dim=0)), True


class ScalarCueLift(nn.Module):
    """Learned affine map from each raw scalar cue to a D-dim embedding."""

    def __init__(self, config: ModelConfig, cue_names=CUE_NAMES):
        super().__init__()
        self.lifts = nn.ModuleDict({name: nn.Linear(1, config.dim) for name in cue_names})

    def forward(self, series: dict[str, torch.Tensor],
                frame_valid: torch.Tensor) -> dict[str, torch.Tensor]:
        """series values are (N, T); returns (N, T, D) with masked zeros."""
        m = frame_valid.unsqueeze(-1).to(next(self.parameters()).dtype)
        return {name: self.lifts[name](arr.unsqueeze(-1)) * m
                for name, arr in series.items()}


class LipSalience(nn.Module):
    """Aperture sequence scored into a nonnegative conversational-salience
    scalar per person.

    The score is mean(lambda_t * a_t over valid frames) * (1 + sigmoid(c)),
    with c produced by a small temporal attention encoder; the multiplicative
    form keeps the score at exactly zero for closed mouths and strictly
    increasing under uniform aperture scaling.
    """

    def __init__(self, config: ModelConfig, hidden: int = 16):
        super().__init__()
        # softplus(raw) == 1 at init
        init = math.log(math.e - 1.0)
        self.raw_decay = nn.Parameter(torch.full((config.max_frames - 1,), init))
        self.lift = nn.Linear(1, hidden)
        layer = nn.TransformerEncoderLayer(
            d_model=hidden, nhead=2, dim_feedforward=2 * hidden,
            dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=1)
        self.context = nn.Linear(hidden, 1, bias=False)

    def decay(self, num_frames: int) -> torch.Tensor:
        lam = torch.nn.functional.softplus(self.raw_decay)
        idx = torch.arange(num_frames).clamp(max=lam.shape[0] - 1)
        return lam[idx]

    def modulated(self, apertures: torch.Tensor) -> torch.Tensor:
        """(N, T) apertures scaled by the learned positive decay."""
        return apertures * self.decay(apertures.shape[1]).unsqueeze(0)

    def forward(self, apertures: torch.Tensor, frame_valid: torch.Tensor) -> torch.Tensor:
        """(N, T) apertures, (N, T) bool mask -> (N,) nonnegative scores."""
        scaled = self.modulated(apertures)
        valid = frame_valid.to(scaled.dtype)
        counts = valid.sum(dim=1)
        mean = (scaled * valid).sum(dim=1) / counts.clamp(min=1.0)
        ctx_in = (scaled * valid).unsqueeze(-1)
        enc = self.encoder(self.lift(ctx_in))
        pooled = (enc * valid.unsqueeze(-1)).sum(dim=1) / counts.clamp(min=1.0).unsqueeze(-1)
        gate = 1.0 + torch.sigmoid(self.context(pooled).squeeze(-1))
        score = mean * gate
        return torch.where(counts >= 2, score, torch.zeros_like(score))


class MotionEnergyProvider(nn.Module):
    """Sum-of-absolute-frame-differences per block, normalized by crop area."""

    feature_dim = 1

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        """(B, delta, h, w) -> (B, 1)"""
        if blocks.shape[1] < 2:
            return torch.zeros(blocks.shape[0], 1, dtype=blocks.dtype)
        diff = (blocks[:, 1:] - blocks[:, :-1]).abs()
        per_area = diff.sum(dim=(1, 2, 3)) / (blocks.shape[2] * blocks.shape[3])
        return per_area.unsqueeze(-1)


class Conv3DProvider(nn.Module):
    """Randomly initialized (seeded) small 3D convolutional feature provider."""

    feature_dim = 8

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv = nn.Conv3d(1, self.feature_dim, kernel_size=3, padding=1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=gen) * 0.1)
            self.conv.bias.zero_()

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        x = blocks.unsqueeze(1)  # (B, 1, delta, h, w)
        return torch.relu(self.conv(x)).mean(dim=(2, 3, 4))


def make_feature_provider(name: str, seed: int = 0) -> nn.Module:
    if name == "motion_energy":
        return MotionEnergyProvider()
    if name == "conv3d":
        return Conv3DProvider(seed)
    raise ConfigurationError(f"unknown feature provider {name!r}")


class ActionIntensity(nn.Module):
    """Mean over delta-frame blocks of the norm of projected provider features."""

    def __init__(self, config: ModelConfig, provider: nn.Module | None = None):
        super().__init__()
        self.block = config.action_block
        self.provider = provider or make_feature_provider(config.action_provider, config.seed)
        f = self.provider.feature_dim
        self.w_act = nn.Parameter(torch.randn(f, 8) / math.sqrt(f))

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """(T, h, w) crop sequence -> scalar action intensity.

        Sequences shorter than the block length form a single truncated block.
        """
        T = crops.shape[0]
        delta = min(self.block, T)
        norms = []
        for t in range(0, T, delta):
            feats = self.provider(crops[t:t + delta].unsqueeze(0))
            norms.append((feats @ self.w_act.to(feats.dtype)).norm(dim=1))
        return torch.cat(norms).mean()
