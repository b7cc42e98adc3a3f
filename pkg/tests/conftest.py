import numpy as np
import pytest

from vipnet.config import ModelConfig, TrainConfig
from vipnet.data_model import Clip, PersonTrack


def small_config(**kw):
    base = dict(dim=16, heads=2, text_layers=1, relate_layers=1,
                vocab_size=128, max_frames=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def make_clip(centers, width=100, height=100, half=5.0, present=None,
              lip_apertures=None, clarity=None, action=None, vip=0,
              category="Office", split="train", fps=5.0, scene_text="A meeting.",
              rationale_text="", frames=None):
    """Build a clip from per-person per-frame box centers.

    ``centers`` is (N, T, 2) in pixel coordinates.
    """
    centers = np.asarray(centers, dtype=np.float64)
    n, T = centers.shape[:2]
    persons = []
    for i in range(n):
        cx, cy = centers[i, :, 0], centers[i, :, 1]
        boxes = np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)
        pres = (present[i] if present is not None else np.ones(T, dtype=bool))
        lip = None
        if lip_apertures is not None:
            upper = np.stack([cx, cy], axis=1)
            lower = np.stack([cx, cy + lip_apertures[i]], axis=1)
            lip = np.stack([upper, lower], axis=1).astype(np.float32)
        persons.append(PersonTrack(
            person_id=i, description=f"person {i}",
            boxes=boxes.astype(np.float32), present=np.asarray(pres, dtype=bool),
            lip_points=lip))
    cue_channels = {}
    if clarity is not None:
        cue_channels["clarity"] = np.asarray(clarity, dtype=np.float32)
    if action is not None:
        cue_channels["action"] = np.asarray(action, dtype=np.float32)
    return Clip(
        clip_id="test-clip", category=category, fps=fps, num_frames=T,
        width=width, height=height, persons=persons,
        scene_description=scene_text, vip_person_id=vip,
        rationale_text=rationale_text, split=split, frames=frames,
        cue_channels=cue_channels)


def default_channels(n, T, rng=None):
    rng = rng or np.random.default_rng(0)
    return dict(clarity=rng.uniform(1, 3, size=(n, T)),
                action=np.abs(rng.normal(0, 0.2, size=(n, T))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
