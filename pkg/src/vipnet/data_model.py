"""Clip data model, validation, and the canonical on-disk directory format.

A clip directory holds ``manifest.json`` plus one raw little-endian binary
file per array, each with a JSON sidecar describing dtype and shape.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

CATEGORIES = (
    "Office",
    "Classroom",
    "Conference",
    "Restaurant",
    "Sports",
    "Interview",
    "Performance",
    "Public Space",
    "Home",
    "Courtroom",
    "Laboratory",
)

SPLITS = ("train", "val", "test")

_DTYPES = {"f32": np.float32, "u8": np.uint8, "bool": np.bool_}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8", np.dtype(np.bool_): "bool"}


class ClipFormatError(Exception):
    """On-disk data does not match its declared format."""


class ClipValidationError(Exception):
    """Clip violates invariants where violations are not tolerated."""


@dataclass
class PersonTrack:
    person_id: int
    description: str
    boxes: np.ndarray              # (T, 4) float32, pixel (x1, y1, x2, y2)
    present: np.ndarray            # (T,) bool
    face_boxes: Optional[np.ndarray] = None   # (T, 4) float32
    lip_points: Optional[np.ndarray] = None   # (T, 2, 2) float32: upper/lower anchor (x, y)


@dataclass
class Clip:
    clip_id: str
    category: str
    fps: float
    num_frames: int
    width: int
    height: int
    persons: list[PersonTrack]
    scene_description: str
    vip_person_id: int
    rationale_text: str
    split: str
    frames: Optional[np.ndarray] = None       # (T, H, W, 3) uint8
    cue_channels: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (N, T) float32


@dataclass
class ValidityMask:
    person_valid: np.ndarray   # (N,) bool
    frame_valid: np.ndarray    # (N, T) bool


def validity_mask(clip: Clip) -> ValidityMask:
    frame_valid = np.stack([t.present.astype(bool) for t in clip.persons])
    return ValidityMask(person_valid=frame_valid.any(axis=1), frame_valid=frame_valid)


def _clamped_box(box, width, height):
    x1, y1, x2, y2 = (float(v) for v in box)
    return (
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
        min(max(x2, 0.0), width),
        min(max(y2, 0.0), height),
    )


def validate_clip(clip: Clip) -> list[str]:
    """Return human-readable invariant violations; empty list means valid."""
    v: list[str] = []
    if clip.num_frames < 1:
        v.append(f"num_frames: must be >= 1, got {clip.num_frames}")
    if clip.width < 1 or clip.height < 1:
        v.append(f"width/height: must be >= 1, got {clip.width}x{clip.height}")
    if clip.category not in CATEGORIES:
        v.append(f"category: unknown label {clip.category!r}")
    if clip.split not in SPLITS:
        v.append(f"split: unknown split {clip.split!r}")

    ids = [t.person_id for t in clip.persons]
    if len(set(ids)) != len(ids):
        v.append("persons: duplicate person_id")
    if clip.vip_person_id not in ids:
        v.append(f"vip_person_id: {clip.vip_person_id} not among persons {sorted(ids)}")

    T = clip.num_frames
    for track in clip.persons:
        pid = track.person_id
        if track.boxes.shape != (T, 4):
            v.append(f"person {pid}: boxes shape {track.boxes.shape} != ({T}, 4)")
            continue
        if track.present.shape != (T,):
            v.append(f"person {pid}: present shape {track.present.shape} != ({T},)")
            continue
        if track.face_boxes is not None and track.face_boxes.shape != (T, 4):
            v.append(f"person {pid}: face_boxes shape {track.face_boxes.shape} != ({T}, 4)")
        if track.lip_points is not None:
            if track.lip_points.shape != (T, 2, 2):
                v.append(f"person {pid}: lip_points shape {track.lip_points.shape} != ({T}, 2, 2)")
            elif not np.isfinite(track.lip_points[track.present.astype(bool)]).all():
                v.append(f"person {pid}: lip_points contain non-finite values on present frames")
        for t in np.flatnonzero(track.present):
            x1, y1, x2, y2 = _clamped_box(track.boxes[t], clip.width, clip.height)
            if not (x1 < x2 and y1 < y2):
                v.append(f"person {pid}: frame {t}: degenerate box after clamping "
                         f"({x1:g},{y1:g},{x2:g},{y2:g})")

    if clip.frames is not None and clip.frames.shape != (T, clip.height, clip.width, 3):
        v.append(f"frames: shape {clip.frames.shape} != ({T}, {clip.height}, {clip.width}, 3)")
    n = len(clip.persons)
    for name, arr in clip.cue_channels.items():
        if arr.shape != (n, T):
            v.append(f"cue_channels[{name}]: shape {arr.shape} != ({n}, {T})")
    return v


def soft_warnings(clip: Clip) -> list[str]:
    """Non-fatal advisories (e.g. the 3-10 s duration guideline)."""
    w = []
    if clip.fps > 0:
        duration = clip.num_frames / clip.fps
        if not 3.0 <= duration <= 10.0:
            w.append(f"duration {duration:.2f}s outside the 3-10s guideline")
    return w


# ---------------------------------------------------------------------------
# Raw array I/O (little-endian, row-major, JSON sidecar per file)
# ---------------------------------------------------------------------------

def write_array(path: Path, arr: np.ndarray) -> None:
    dtype = np.dtype(arr.dtype)
    if dtype == np.dtype(np.float64):
        arr = arr.astype(np.float32)
        dtype = arr.dtype
    name = _DTYPE_NAMES.get(dtype)
    if name is None:
        raise ClipFormatError(f"unsupported dtype {dtype} for {path.name}")
    data = np.ascontiguousarray(arr)
    if name == "bool":
        data = data.astype(np.uint8)
    else:
        data = data.astype(data.dtype.newbyteorder("<"))
    path.write_bytes(data.tobytes())
    sidecar = {"dtype": name, "shape": list(arr.shape)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")


def read_array(path: Path) -> np.ndarray:
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise ClipFormatError(f"missing sidecar {sidecar_path.name}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    dtype = _DTYPES.get(sidecar.get("dtype"))
    if dtype is None:
        raise ClipFormatError(f"unknown dtype {sidecar.get('dtype')!r} in {sidecar_path.name}")
    shape = tuple(sidecar["shape"])
    raw = path.read_bytes()
    itemsize = 1 if dtype == np.bool_ else np.dtype(dtype).itemsize
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    if len(raw) != expected:
        raise ClipFormatError(
            f"{path.name}: file size {len(raw)} does not match sidecar shape {shape}")
    if dtype == np.bool_:
        return np.frombuffer(raw, dtype=np.uint8).astype(bool).reshape(shape)
    return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape).copy()


def save_clip(clip: Clip, path) -> None:
    """Write a clip directory; refuses to write invalid clips."""
    violations = validate_clip(clip)
    if violations:
        raise ClipValidationError("; ".join(violations))
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    persons_meta = []
    for track in clip.persons:
        pid = track.person_id
        meta = {"person_id": pid, "description": track.description,
                "boxes": f"p{pid}_boxes", "present": f"p{pid}_present"}
        arrays[f"p{pid}_boxes"] = track.boxes.astype(np.float32)
        arrays[f"p{pid}_present"] = track.present.astype(bool)
        if track.face_boxes is not None:
            meta["face_boxes"] = f"p{pid}_face_boxes"
            arrays[f"p{pid}_face_boxes"] = track.face_boxes.astype(np.float32)
        if track.lip_points is not None:
            meta["lip_points"] = f"p{pid}_lip_points"
            arrays[f"p{pid}_lip_points"] = track.lip_points.astype(np.float32)
        persons_meta.append(meta)

    if clip.frames is not None:
        arrays["frames"] = clip.frames.astype(np.uint8)
    cue_index = {}
    for name in sorted(clip.cue_channels):
        key = f"cue_{name}"
        arrays[key] = clip.cue_channels[name].astype(np.float32)
        cue_index[name] = key

    index = {}
    for name, arr in arrays.items():
        write_array(path / f"{name}.bin", arr)
        index[name] = {"file": f"{name}.bin"}

    manifest = {
        "format_version": FORMAT_VERSION,
        "clip_id": clip.clip_id,
        "category": clip.category,
        "fps": clip.fps,
        "num_frames": clip.num_frames,
        "width": clip.width,
        "height": clip.height,
        "scene_description": clip.scene_description,
        "vip_person_id": clip.vip_person_id,
        "rationale_text": clip.rationale_text,
        "split": clip.split,
        "has_frames": clip.frames is not None,
        "persons": persons_meta,
        "cue_channels": cue_index,
        "arrays": index,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")


def load_clip(path) -> Clip:
    """Load a clip directory written by :func:`save_clip`.

    Validation violations and soft warnings are logged, not raised.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise ClipFormatError(f"missing manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    def arr(name):
        entry = manifest["arrays"].get(name)
        if entry is None:
            raise ClipFormatError(f"manifest declares no array {name!r}")
        return read_array(path / entry["file"])

    T = int(manifest["num_frames"])
    persons = []
    for meta in manifest["persons"]:
        boxes = arr(meta["boxes"])
        if boxes.shape[0] != T:
            raise ClipFormatError(
                f"person {meta['person_id']}: boxes rows {boxes.shape[0]} != declared T={T}")
        persons.append(PersonTrack(
            person_id=int(meta["person_id"]),
            description=meta["description"],
            boxes=boxes,
            present=arr(meta["present"]),
            face_boxes=arr(meta["face_boxes"]) if "face_boxes" in meta else None,
            lip_points=arr(meta["lip_points"]) if "lip_points" in meta else None,
        ))

    clip = Clip(
        clip_id=manifest["clip_id"],
        category=manifest["category"],
        fps=float(manifest["fps"]),
        num_frames=T,
        width=int(manifest["width"]),
        height=int(manifest["height"]),
        persons=persons,
        scene_description=manifest["scene_description"],
        vip_person_id=int(manifest["vip_person_id"]),
        rationale_text=manifest["rationale_text"],
        split=manifest["split"],
        frames=arr("frames") if manifest.get("has_frames") else None,
        cue_channels={name: arr(key) for name, key in manifest.get("cue_channels", {}).items()},
    )
    for msg in validate_clip(clip) + soft_warnings(clip):
        logger.warning("%s: %s", clip.clip_id, msg)
    return clip


def clips_equal(a: Clip, b: Clip) -> bool:
    """Field-by-field equality; float arrays compared at 32-bit precision."""
    def feq(x, y):
        if x is None or y is None:
            return x is None and y is None
        return np.array_equal(np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.float32))

    if (a.clip_id, a.category, a.fps, a.num_frames, a.width, a.height,
            a.scene_description, a.vip_person_id, a.rationale_text, a.split) != \
       (b.clip_id, b.category, b.fps, b.num_frames, b.width, b.height,
            b.scene_description, b.vip_person_id, b.rationale_text, b.split):
        return False
    if len(a.persons) != len(b.persons):
        return False
    for ta, tb in zip(a.persons, b.persons):
        if ta.person_id != tb.person_id or ta.description != tb.description:
            return False
        if not (feq(ta.boxes, tb.boxes) and np.array_equal(ta.present, tb.present)
                and feq(ta.face_boxes, tb.face_boxes) and feq(ta.lip_points, tb.lip_points)):
            return False
    if not ((a.frames is None) == (b.frames is None)
            and (a.frames is None or np.array_equal(a.frames, b.frames))):
        return False
    if sorted(a.cue_channels) != sorted(b.cue_channels):
        return False
    return all(feq(a.cue_channels[k], b.cue_channels[k]) for k in a.cue_channels)


# ---------------------------------------------------------------------------
# Dataset adapter: arrays container (.npz) + annotation JSON pairing
# ---------------------------------------------------------------------------

#: Keys the adapter expects inside the .npz container. The upstream corpus is
#: not redistributed here, so the layout was written against one sample and
#: should be re-checked against real files before large ingests.
NPZ_BOXES_KEYS = ("boxes", "bboxes")
NPZ_FRAMES_KEYS = ("frames", "video")
NPZ_PRESENT_KEYS = ("present", "visibility", "valid")


def load_npz_pair(npz_path, json_path) -> Clip:
    """Read-only adapter from the dual format (npz arrays + JSON annotations)."""
    npz_path, json_path = Path(npz_path), Path(json_path)
    if not npz_path.exists():
        raise ClipFormatError(f"missing arrays container {npz_path}")
    if not json_path.exists():
        raise ClipFormatError(f"missing annotation file {json_path}")
    ann = json.loads(json_path.read_text(encoding="utf-8"))
    with np.load(npz_path) as npz:
        keys = set(npz.files)

        def pick(candidates):
            for k in candidates:
                if k in keys:
                    return npz[k]
            return None

        boxes = pick(NPZ_BOXES_KEYS)
        if boxes is None:
            raise ClipFormatError(
                f"{npz_path.name}: no bounding-box array (looked for {NPZ_BOXES_KEYS})")
        boxes = np.asarray(boxes, dtype=np.float32)
        if boxes.ndim != 3 or boxes.shape[-1] != 4:
            raise ClipFormatError(f"{npz_path.name}: boxes shape {boxes.shape}, expected (T, N, 4)")
        T, N = boxes.shape[:2]
        frames = pick(NPZ_FRAMES_KEYS)
        present = pick(NPZ_PRESENT_KEYS)
        if present is None:
            present = np.ones((T, N), dtype=bool)
        present = np.asarray(present, dtype=bool)

    descriptions = ann.get("person_descriptions", [""] * N)
    persons = [
        PersonTrack(person_id=i, description=descriptions[i] if i < len(descriptions) else "",
                    boxes=boxes[:, i], present=present[:, i])
        for i in range(N)
    ]
    if frames is not None:
        frames = np.asarray(frames, dtype=np.uint8)
        height, width = frames.shape[1:3]
    else:
        height = int(ann.get("height", int(np.ceil(boxes[..., 3].max())) or 1))
        width = int(ann.get("width", int(np.ceil(boxes[..., 2].max())) or 1))

    clip = Clip(
        clip_id=str(ann.get("clip_id", npz_path.stem)),
        category=ann.get("category", CATEGORIES[0]),
        fps=float(ann.get("fps", 25.0)),
        num_frames=T,
        width=width,
        height=height,
        persons=persons,
        scene_description=ann.get("scene_description", ""),
        vip_person_id=int(ann.get("vip_person_id", 0)),
        rationale_text=ann.get("rationale_text", ""),
        split=ann.get("split", "test"),
        frames=frames,
    )
    for msg in validate_clip(clip) + soft_warnings(clip):
        logger.warning("%s: %s", clip.clip_id, msg)
    return clip
