"""Motion files, sliding windows, dataset splits and synthetic motion."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .motion import Motion

FPS_THRESHOLD = 60.0
DEFAULT_WINDOW = 31
DEFAULT_STRIDE = 15


def motion_to_json(motion: Motion) -> dict:
    return {"fps": motion.fps, "joints": motion.n_joints, "frames": motion.frames.tolist()}


def motion_from_json(obj, source="<motion>") -> Motion:
    if not isinstance(obj, dict):
        raise FormatError(f"{source}: expected a JSON object")
    for key in ("fps", "joints", "frames"):
        if key not in obj:
            raise FormatError(f"{source}: missing field {key!r}")
    J = obj["joints"]
    frames = obj["frames"]
    if not isinstance(J, int) or J < 1:
        raise FormatError(f"{source}: 'joints' must be a positive integer")
    try:
        arr = np.array(frames, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{source}: 'frames' is not a regular numeric array") from None
    if arr.size == 0:
        arr = arr.reshape(0, J, 3)
    if arr.ndim != 3 or arr.shape[1:] != (J, 3):
        raise FormatError(f"{source}: 'frames' has shape {arr.shape}, expected (T, {J}, 3)")
    try:
        return Motion(arr, obj["fps"])
    except (InvalidInputError, TypeError) as e:
        raise FormatError(f"{source}: {e}") from None


def save_motion(motion: Motion, path) -> None:
    # json writes float repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(motion_to_json(motion)))


def load_motion(path) -> Motion:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return motion_from_json(obj, str(path))


def slice_windows(motion: Motion, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                  fps_threshold: float | None = FPS_THRESHOLD) -> list[Motion]:
    """Fixed-length windows; high-framerate motions also yield 2x-length
    windows downsampled by two (recorded at half the framerate)."""
    if window < 1 or stride < 1:
        raise InvalidInputError("window and stride must be positive")
    frames = motion.frames
    out = [Motion(frames[s:s + window], motion.fps)
           for s in range(0, len(frames) - window + 1, stride)]
    if fps_threshold is not None and motion.fps >= fps_threshold:
        long = 2 * window
        out += [Motion(frames[s:s + long:2], motion.fps / 2)
                for s in range(0, len(frames) - long + 1, stride)]
    return out


def split_dataset(items, ratios=(0.7, 0.1, 0.2), seed: int = 0, group=None):
    """Seeded split into (train, val, test) at the level of ``group(item)``
    (default: each item is its own source)."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise InvalidInputError(f"ratios must be three numbers summing to 1, got {ratios}")
    items = list(items)
    key = group or (lambda x: id(x))
    sources = list(dict.fromkeys(key(x) for x in items))
    perm = np.random.default_rng(seed).permutation(len(sources))
    n = len(sources)
    cuts = [round(n * ratios[0]), round(n * (ratios[0] + ratios[1]))]
    which = {}
    for rank, i in enumerate(perm):
        which[sources[i]] = 0 if rank < cuts[0] else 1 if rank < cuts[1] else 2
    splits = ([], [], [])
    for x in items:
        splits[which[key(x)]].append(x)
    return splits


def synth_generate(n_sequences: int, J: int, length: int, fps: float = 30.0,
                   seed: int = 0) -> list[Motion]:
    """Smooth synthetic motions: each axis-angle coordinate is a sum of 1-3
    sinusoids (0.25-2 Hz, amplitude <= 0.8 rad, random phase)."""
    if min(n_sequences, J, length) < 1 or fps <= 0:
        raise InvalidInputError("counts and fps must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / fps
    out = []
    for _ in range(n_sequences):
        frames = np.zeros((length, J, 3))
        for j in range(J):
            for a in range(3):
                for _ in range(rng.integers(1, 4)):
                    freq = rng.uniform(0.25, 2.0)
                    amp = rng.uniform(0.05, 0.8)
                    phase = rng.uniform(0, 2 * np.pi)
                    frames[:, j, a] += amp * np.sin(2 * np.pi * freq * t + phase)
        out.append(Motion(frames, fps))
    return out


def stack(motions) -> np.ndarray:
    motions = list(motions)
    if not motions:
        raise InvalidInputError("no motions to stack")
    shapes = {m.frames.shape for m in motions}
    if len(shapes) != 1:
        raise InvalidInputError(f"motions differ in shape: {sorted(shapes)}")
    return np.stack([m.frames for m in motions])


def write_manifest(entries, path) -> None:
    """``entries``: iterable of ``(path, split)``."""
    Path(path).write_text(json.dumps([{"path": str(p), "split": s} for p, s in entries], indent=1))


def read_manifest(path) -> list[tuple[Path, str]]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(obj, list):
        raise FormatError(f"{path}: manifest must be a JSON list")
    out = []
    for i, entry in enumerate(obj):
        try:
            p, s = Path(entry["path"]), entry["split"]
        except (KeyError, TypeError):
            raise FormatError(f"{path}: entry {i} needs 'path' and 'split'") from None
        out.append((p if p.is_absolute() else path.parent / p, s))
    return out
