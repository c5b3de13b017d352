"""Rotation math, pose/motion containers, skeleton forward kinematics, SLERP.

Poses are ``(J, 3)`` float64 arrays of axis-angle vectors; a motion is a
``(T, J, 3)`` array plus its framerate. Quaternions are ``(w, x, y, z)`` and
only used transiently.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

_NLERP_DOT = 1.0 - 1e-8


def _as_float(a, name="input") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def axis_angle_to_quaternion(r) -> np.ndarray:
    r = _as_float(r, "axis-angle")
    if r.shape[-1] != 3:
        raise InvalidInputError(f"axis-angle must end in 3, got shape {r.shape}")
    angle = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a, with its Taylor expansion near zero
    small = angle < 1e-6
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    q = np.concatenate([np.cos(half), r * k], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_axis_angle(q) -> np.ndarray:
    q = _as_float(q, "quaternion")
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-9
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return v * k


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_angle(q0, q1) -> np.ndarray:
    """Rotation angle (radians, in [0, pi]) between two unit quaternions."""
    d = quat_mul(quat_conj(q0), q1)
    return 2.0 * np.arctan2(np.linalg.norm(d[..., 1:], axis=-1), np.abs(d[..., 0]))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def axis_angle_to_matrix(r) -> np.ndarray:
    return quat_to_matrix(axis_angle_to_quaternion(r))


def _orthogonal_unit(q0: np.ndarray) -> np.ndarray:
    # Gram-Schmidt against q0 using the x, y, z basis quaternions as probes
    for probe in np.eye(4)[1:]:
        o = probe - np.dot(probe, q0) * q0
        n = np.linalg.norm(o)
        if n > 1e-6:
            return o / n
    raise AssertionError("unreachable: three orthogonal probes cannot all be parallel to q0")


def slerp(q0, q1, u: float, shortest: bool = True) -> np.ndarray:
    """Great-circle interpolation between unit quaternions ``q0`` and ``q1``.

    With ``shortest`` the sign of ``q1`` is flipped onto ``q0``'s hemisphere,
    so the result follows the shorter rotation. Near-parallel inputs fall
    back to normalized lerp.
    """
    q0 = _as_float(q0, "q0")
    q1 = _as_float(q1, "q1")
    if not 0.0 <= u <= 1.0:
        raise InvalidInputError(f"u must lie in [0, 1], got {u}")
    q0 = q0 / np.linalg.norm(q0)
    q1 = q1 / np.linalg.norm(q1)
    d = float(np.dot(q0, q1))
    if shortest and d < 0:
        q1, d = -q1, -d
    if d >= _NLERP_DOT:
        q = (1 - u) * q0 + u * q1
        return q / np.linalg.norm(q)
    if d <= -_NLERP_DOT:
        o = _orthogonal_unit(q0)
        theta = np.pi * u
        return np.cos(theta) * q0 + np.sin(theta) * o
    omega = np.arccos(d)
    s = np.sin(omega)
    q = (np.sin((1 - u) * omega) / s) * q0 + (np.sin(u * omega) / s) * q1
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Motion:
    frames: np.ndarray  # (T, J, 3) axis-angle
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != 3:
            raise InvalidInputError(f"motion frames must have shape (T, J, 3), got {frames.shape}")
        if not self.fps > 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.n_frames

    def __eq__(self, other):
        if not isinstance(other, Motion):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames)

    __hash__ = None


def slerp_motion(start, end, T: int, fps: float = 30.0) -> Motion:
    """``T`` in-between frames; frame ``t`` (1-based) sits at ``u = t / (T + 1)``."""
    start = _as_float(start, "start pose")
    end = _as_float(end, "end pose")
    if start.shape != end.shape or start.ndim != 2:
        raise InvalidInputError(f"start/end poses differ in shape: {start.shape} vs {end.shape}")
    J = start.shape[0]
    if T == 0:
        return Motion(np.zeros((0, J, 3)), fps)
    q0 = axis_angle_to_quaternion(start)
    q1 = axis_angle_to_quaternion(end)
    out = np.empty((T, J, 4))
    for t in range(1, T + 1):
        u = t / (T + 1)
        for j in range(J):
            out[t - 1, j] = slerp(q0[j], q1[j], u)
    frames = quaternion_to_axis_angle(out)
    # keep bitwise-equal endpoints when they coincide
    same = np.all(start == end, axis=-1)
    frames[:, same] = start[same]
    return Motion(frames, fps)


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple
    parents: np.ndarray
    offsets: np.ndarray  # (J, 3) meters

    def __post_init__(self):
        names = tuple(str(n) for n in self.joint_names)
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        J = len(names)
        if parents.shape != (J,) or offsets.shape != (J, 3):
            raise InvalidInputError(
                f"skeleton arrays disagree: {J} names, parents {parents.shape}, offsets {offsets.shape}")
        if J == 0 or parents[0] != -1:
            raise InvalidInputError("joint 0 must be the root (parent -1)")
        for i in range(1, J):
            if not 0 <= parents[i] < i:
                raise InvalidInputError(f"parent of joint {i} must precede it, got {parents[i]}")
        parents.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @classmethod
    def chain(cls, n_joints: int, bone_length: float = 0.25) -> "Skeleton":
        """Straight chain along +x; used with synthetic desk-scale data."""
        offsets = np.zeros((n_joints, 3))
        offsets[1:, 0] = bone_length
        return cls(tuple(f"joint{i}" for i in range(n_joints)),
                   np.arange(n_joints) - 1, offsets)

    def to_json(self) -> dict:
        return {"joint_names": list(self.joint_names),
                "parents": self.parents.tolist(),
                "offsets": self.offsets.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        try:
            return cls(obj["joint_names"], obj["parents"], obj["offsets"])
        except KeyError as e:
            raise FormatError(f"skeleton file is missing field {e.args[0]!r}") from None
        except (InvalidInputError, ValueError, TypeError) as e:
            raise FormatError(f"invalid skeleton: {e}") from None


def load_skeleton(path) -> Skeleton:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    return Skeleton.from_json(obj)


def save_skeleton(skeleton: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skeleton.to_json(), indent=1))


def default_skeleton() -> Skeleton:
    """22-joint body hierarchy (SMPL body joint layout, hand-authored offsets)."""
    text = resources.files("sarinterp.data").joinpath("skeleton_22.json").read_text()
    return Skeleton.from_json(json.loads(text))


def forward_kinematics(pose, skeleton: Skeleton) -> np.ndarray:
    """Joint positions for a pose ``(J, 3)`` or a stack of poses ``(..., J, 3)``.

    The root sits at the origin; there is no global translation.
    """
    pose = _as_float(pose, "pose")
    J = skeleton.n_joints
    if pose.shape[-2:] != (J, 3):
        raise InvalidInputError(f"pose has shape {pose.shape}, skeleton has {J} joints")
    local = axis_angle_to_matrix(pose)
    world = np.empty_like(local)
    pos = np.zeros(pose.shape)
    world[..., 0, :, :] = local[..., 0, :, :]
    for i in range(1, J):
        p = skeleton.parents[i]
        world[..., i, :, :] = world[..., p, :, :] @ local[..., i, :, :]
        pos[..., i, :] = pos[..., p, :] + world[..., p, :, :] @ skeleton.offsets[i]
    return pos
