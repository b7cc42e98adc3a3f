"""Synthetic multi-person clips with scripted dominance-shift events.

Each clip is generated from a :class:`ScenarioSpec` whose schedule assigns one
dominant person and one channel (speech, gesture, spatial) to every frame
interval. The oracle VIP is the person with the largest duration-weighted
dominance, so acceptance tests can check predictions against an analytically
known answer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data_model import CATEGORIES, Clip, PersonTrack, load_clip, save_clip
from .rationale import clause_sentence, refined_style_text


class ScenarioSpecError(ValueError):
    """Scenario specification violates its invariants."""


CHANNELS = ("speech", "gesture", "spatial")

#: Duration weights turning scheduled dominance into importance ground truth.
CHANNEL_WEIGHTS = {"speech": 1.0, "gesture": 0.8, "spatial": 0.5}

#: Which rationale cue each dominance channel excites.
CHANNEL_CUE = {"speech": "lip", "gesture": "action", "spatial": "centrality"}

PROFILES = ("spatial", "speech", "gesture", "mixed", "speech_decoy")

_PROFILE_CATEGORY = {
    "spatial": "Public Space",
    "speech": "Conference",
    "gesture": "Performance",
    "speech_decoy": "Interview",
}

# Lip aperture envelope: dominant speakers stay >= 3x any background aperture.
_SPEECH_AMP = 8.0
_BACKGROUND_APERTURE_CAP = 1.5
_GESTURE_AMP = 3.0


@dataclass
class DominanceInterval:
    start: int
    end: int            # exclusive
    person_id: int
    channel: str


@dataclass
class ScenarioSpec:
    seed: int
    num_persons: int
    num_frames: int
    schedule: list[DominanceInterval]
    noise_level: float = 1.0
    center_decoy_person: Optional[int] = None
    fps: float = 5.0
    width: int = 640
    height: int = 360
    category: str = "Conference"


@dataclass
class OracleLabel:
    vip_person_id: int
    per_cue_truth: dict[str, np.ndarray]   # cue -> per-person ground scores
    rationale_cues: list[str]


def validate_spec(spec: ScenarioSpec) -> None:
    if not 2 <= spec.num_persons <= 8:
        raise ScenarioSpecError(f"num_persons must be in [2, 8], got {spec.num_persons}")
    if spec.num_frames < 1:
        raise ScenarioSpecError("num_frames must be >= 1")
    if spec.noise_level < 0:
        raise ScenarioSpecError("noise_level must be >= 0")
    if not spec.schedule:
        raise ScenarioSpecError("schedule must not be empty")
    intervals = sorted(spec.schedule, key=lambda iv: iv.start)
    cursor = 0
    for iv in intervals:
        if iv.channel not in CHANNELS:
            raise ScenarioSpecError(f"unknown channel {iv.channel!r}")
        if not 0 <= iv.person_id < spec.num_persons:
            raise ScenarioSpecError(f"dominant_person_id {iv.person_id} out of range")
        if iv.start != cursor:
            raise ScenarioSpecError(
                f"schedule gap or overlap at frame {cursor} (interval starts at {iv.start})")
        if iv.end <= iv.start:
            raise ScenarioSpecError(f"empty interval [{iv.start}, {iv.end})")
        cursor = iv.end
    if cursor != spec.num_frames:
        raise ScenarioSpecError(f"schedule covers [0, {cursor}) but T={spec.num_frames}")
    if spec.center_decoy_person is not None:
        if not 0 <= spec.center_decoy_person < spec.num_persons:
            raise ScenarioSpecError("center_decoy_person out of range")
        for iv in spec.schedule:
            if iv.person_id == spec.center_decoy_person:
                raise ScenarioSpecError("center_decoy_person must not appear in the schedule")
            if iv.channel == "spatial":
                raise ScenarioSpecError(
                    "spatial intervals conflict with a scripted center decoy")


def oracle_for(spec: ScenarioSpec) -> OracleLabel:
    """Ground truth from the schedule: duration-weighted dominance argmax."""
    n = spec.num_persons
    per_channel = {ch: np.zeros(n) for ch in CHANNELS}
    for iv in spec.schedule:
        per_channel[iv.channel][iv.person_id] += iv.end - iv.start
    total = sum(CHANNEL_WEIGHTS[ch] * per_channel[ch] for ch in CHANNELS)
    vip = int(np.argmax(total))  # argmax takes the lowest index on ties
    per_cue = {
        "centrality": per_channel["spatial"].astype(np.float64),
        "area": np.zeros(n),
        "clarity": np.zeros(n),
        "lip": per_channel["speech"].astype(np.float64),
        "action": per_channel["gesture"].astype(np.float64),
    }
    cues = [CHANNEL_CUE[ch] for ch in ("speech", "gesture", "spatial")
            if per_channel[ch][vip] > 0]
    return OracleLabel(vip_person_id=vip, per_cue_truth=per_cue, rationale_cues=cues)


def _reflect(x, lo, hi):
    if x < lo:
        return 2 * lo - x
    if x > hi:
        return 2 * hi - x
    return x


def synthesize(spec: ScenarioSpec) -> tuple[Clip, OracleLabel]:
    """Deterministically render a spec into a clip plus its oracle label."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n, T = spec.num_persons, spec.num_frames
    W, H = spec.width, spec.height
    noise = spec.noise_level

    channel_at = np.empty(T, dtype=object)
    dominant_at = np.full(T, -1)
    for iv in spec.schedule:
        channel_at[iv.start:iv.end] = iv.channel
        dominant_at[iv.start:iv.end] = iv.person_id

    # Smooth random-walk centers in normalized coordinates.
    pos = rng.uniform(0.18, 0.82, size=(n, 2))
    vel = np.zeros((n, 2))
    centers = np.zeros((n, T, 2))
    phases = rng.uniform(0, 2 * math.pi, size=n)
    for t in range(T):
        vel = 0.85 * vel + rng.normal(0.0, 0.012 * max(noise, 0.1), size=(n, 2))
        pos = pos + vel
        for i in range(n):
            pos[i, 0] = _reflect(pos[i, 0], 0.08, 0.92)
            pos[i, 1] = _reflect(pos[i, 1], 0.08, 0.92)
        frame_pos = pos.copy()
        dom, ch = dominant_at[t], channel_at[t]
        if ch == "spatial":
            # Pin the dominant person at the center, keep everyone else out.
            frame_pos[dom] = 0.5 + rng.normal(0.0, 0.012, size=2).clip(-0.035, 0.035)
            for i in range(n):
                if i == dom:
                    continue
                off = frame_pos[i] - 0.5
                dist = float(np.hypot(*off))
                if dist < 0.15:
                    direction = off / dist if dist > 1e-9 else np.array([1.0, 0.0])
                    frame_pos[i] = 0.5 + direction * 0.15
        if spec.center_decoy_person is not None:
            d = spec.center_decoy_person
            frame_pos[d] = 0.5 + rng.normal(0.0, 0.012, size=2).clip(-0.035, 0.035)
        centers[:, t] = frame_pos

    half_w = rng.uniform(0.04, 0.07, size=n)
    half_h = 2.0 * half_w

    persons = []
    apertures = np.minimum(np.abs(rng.normal(0.0, 0.3 * noise, size=(n, T))),
                           _BACKGROUND_APERTURE_CAP)
    action = np.abs(rng.normal(0.0, 0.15 * max(noise, 0.05), size=(n, T)))
    clarity = (rng.uniform(1.0, 3.0, size=(n, 1))
               + np.abs(rng.normal(0.0, 0.2 * max(noise, 0.05), size=(n, T))))

    for t in range(T):
        dom, ch = dominant_at[t], channel_at[t]
        if ch == "speech":
            apertures[dom, t] = _SPEECH_AMP * (
                0.6 + 0.4 * abs(math.sin(2 * math.pi * t / 6.0 + phases[dom])))
        elif ch == "gesture":
            action[dom, t] = _GESTURE_AMP * (
                0.5 + 0.5 * abs(math.sin(2 * math.pi * t / 5.0 + phases[dom])))

    for i in range(n):
        cx = centers[i, :, 0] * W
        cy = centers[i, :, 1] * H
        x1 = np.clip(cx - half_w[i] * W, 0, W - 2)
        x2 = np.clip(cx + half_w[i] * W, x1 + 1, W)
        y1 = np.clip(cy - half_h[i] * H, 0, H - 2)
        y2 = np.clip(cy + half_h[i] * H, y1 + 1, H)
        boxes = np.stack([x1, y1, x2, y2], axis=1).astype(np.float32)
        face_h = 0.3 * (y2 - y1)
        face_boxes = np.stack([x1, y1, x2, y1 + face_h], axis=1).astype(np.float32)
        mouth_y = y1 + 0.8 * face_h
        upper = np.stack([cx, mouth_y], axis=1)
        lower = np.stack([cx, mouth_y + apertures[i]], axis=1)
        lip_points = np.stack([upper, lower], axis=1).astype(np.float32)
        persons.append(PersonTrack(
            person_id=i,
            description=f"person {i} in a {['blue', 'red', 'green', 'gray', 'brown', 'black', 'white', 'yellow'][i]} outfit",
            boxes=boxes,
            present=np.ones(T, dtype=bool),
            face_boxes=face_boxes,
            lip_points=lip_points,
        ))

    oracle = oracle_for(spec)
    rationale = refined_style_text(clause_sentence(oracle.rationale_cues))
    clip = Clip(
        clip_id=f"synth-{spec.seed}",
        category=spec.category,
        fps=spec.fps,
        num_frames=T,
        width=W,
        height=H,
        persons=persons,
        scene_description=f"A {spec.category.lower()} scene with {n} people interacting.",
        vip_person_id=oracle.vip_person_id,
        rationale_text=rationale,
        split="train",
        cue_channels={"clarity": clarity.astype(np.float32),
                      "action": action.astype(np.float32)},
    )
    return clip, oracle


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

# Person-count mix with the 3-person mode most frequent.
_N_STRATA = ((2, 0.20), (3, 0.40), (4, 0.25), (5, 0.15))


def _largest_remainder(total: int, weights: list[float]) -> list[int]:
    raw = [total * w for w in weights]
    counts = [int(math.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _make_schedule(rng, n: int, T: int, profile: str,
                   decoy: Optional[int]) -> list[DominanceInterval]:
    if profile == "spatial":
        return [DominanceInterval(0, T, int(rng.integers(n)), "spatial")]
    candidates = [p for p in range(n) if p != decoy]
    k = int(rng.integers(1, min(3, len(candidates)) + 1))
    if k >= T:
        k = 1
    cuts = sorted(rng.choice(np.arange(1, T), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0] + cuts + [T]
    intervals = []
    prev = -1
    for j in range(k):
        person = int(rng.choice([p for p in candidates if p != prev] or candidates))
        prev = person
        if profile in ("speech", "speech_decoy"):
            channel = "speech"
        elif profile == "gesture":
            channel = "gesture"
        else:
            channel = str(rng.choice(CHANNELS))
        intervals.append(DominanceInterval(bounds[j], bounds[j + 1], person, channel))
    return intervals


def make_corpus(count: int, split_ratios=(0.6, 0.2, 0.2), seed: int = 0,
                profile: str = "mixed") -> list[tuple[Clip, OracleLabel]]:
    """Generate a stratified corpus of synthetic clips with oracle labels."""
    if profile not in PROFILES:
        raise ScenarioSpecError(f"unknown profile {profile!r}")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ScenarioSpecError("split ratios must sum to 1")
    if count < len(_N_STRATA):
        raise ScenarioSpecError(f"count must be >= {len(_N_STRATA)} (one clip per stratum)")

    strata_counts = _largest_remainder(count, [w for _, w in _N_STRATA])
    person_counts = []
    for (n, _), c in zip(_N_STRATA, strata_counts):
        person_counts.extend([n] * c)

    rng = np.random.default_rng(seed)
    order = rng.permutation(count)
    split_counts = _largest_remainder(count, list(split_ratios))
    split_of = {}
    idx = 0
    for split, c in zip(("train", "val", "test"), split_counts):
        for _ in range(c):
            split_of[int(order[idx])] = split
            idx += 1

    items = []
    for i in range(count):
        n = person_counts[i]
        clip_seed = int(rng.integers(0, 2**31 - 1))
        schedule_rng = np.random.default_rng(clip_seed + 1)
        T = int(schedule_rng.choice([16, 20, 24]))
        decoy = None
        if profile == "speech_decoy":
            decoy = int(schedule_rng.integers(n))
        spec = ScenarioSpec(
            seed=clip_seed,
            num_persons=n,
            num_frames=T,
            schedule=_make_schedule(schedule_rng, n, T, profile, decoy),
            center_decoy_person=decoy,
            category=_PROFILE_CATEGORY.get(profile, CATEGORIES[i % len(CATEGORIES)]),
        )
        clip, oracle = synthesize(spec)
        clip.clip_id = f"{profile}-{seed}-{i:05d}"
        clip.split = split_of[i]
        items.append((clip, oracle))
    return items


# ---------------------------------------------------------------------------
# Corpus I/O
# ---------------------------------------------------------------------------

def write_corpus(items: list[tuple[Clip, OracleLabel]], outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    oracle_index = {}
    for clip, oracle in items:
        save_clip(clip, outdir / clip.clip_id)
        oracle_index[clip.clip_id] = {
            "vip_person_id": oracle.vip_person_id,
            "per_cue_truth": {k: [float(x) for x in v]
                              for k, v in sorted(oracle.per_cue_truth.items())},
            "rationale_cues": oracle.rationale_cues,
        }
    (outdir / "oracle.json").write_text(
        json.dumps(oracle_index, indent=2, sort_keys=True), encoding="utf-8")


def read_corpus(path) -> list[tuple[Clip, Optional[OracleLabel]]]:
    path = Path(path)
    oracle_path = path / "oracle.json"
    oracle_index = {}
    if oracle_path.exists():
        oracle_index = json.loads(oracle_path.read_text(encoding="utf-8"))
    items = []
    for clip_dir in sorted(p for p in path.iterdir() if (p / "manifest.json").exists()):
        clip = load_clip(clip_dir)
        oracle = None
        if clip.clip_id in oracle_index:
            entry = oracle_index[clip.clip_id]
            oracle = OracleLabel(
                vip_person_id=int(entry["vip_person_id"]),
                per_cue_truth={k: np.asarray(v, dtype=np.float64)
                               for k, v in entry["per_cue_truth"].items()},
                rationale_cues=list(entry["rationale_cues"]),
            )
        items.append((clip, oracle))
    return items
