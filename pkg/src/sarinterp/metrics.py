"""Evaluation metrics: MPJAE, MPJPE, Neighbour L2 distance and NPSS.

Motions are arrays ``(T, J, 3)`` of axis-angle vectors (or :class:`Motion`).
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError
from .motion import Motion, Skeleton, axis_angle_to_quaternion, forward_kinematics, quat_angle

REPORT_COLUMNS = ("model", "mpjae", "mpjpe", "neighbor_l2_gen", "neighbor_l2_gt", "neighbor_gap", "npss")


def _frames(x) -> np.ndarray:
    a = x.frames if isinstance(x, Motion) else np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise InvalidInputError(f"expected (T, J, 3) motion, got shape {a.shape}")
    return a


def _pair(gen, gt):
    gen, gt = _frames(gen), _frames(gt)
    if gen.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {gen.shape} vs {gt.shape}")
    if len(gen) == 0:
        raise InvalidInputError("no frames to compare")
    return gen, gt


def mpjae(gen, gt, geodesic: bool = False) -> float:
    """Mean over frames and joints of the axis-angle difference norm (radians).

    ``geodesic`` uses the relative rotation angle instead.
    """
    gen, gt = _pair(gen, gt)
    if geodesic:
        err = quat_angle(axis_angle_to_quaternion(gen), axis_angle_to_quaternion(gt))
    else:
        err = np.linalg.norm(gen - gt, axis=-1)
    return float(err.mean())


def mpjpe(gen, gt, skeleton: Skeleton) -> float:
    gen, gt = _pair(gen, gt)
    d = forward_kinematics(gen, skeleton) - forward_kinematics(gt, skeleton)
    return float(np.linalg.norm(d, axis=-1).mean())


def neighbor_l2(motion, space: str = "angle", skeleton: Skeleton | None = None) -> float:
    """Mean norm of consecutive-frame differences of the flattened pose."""
    P = _frames(motion)
    if len(P) < 2:
        raise InvalidInputError("neighbor L2 needs at least two frames")
    if space == "position":
        if skeleton is None:
            raise InvalidInputError("position-space neighbor L2 needs a skeleton")
        P = forward_kinematics(P, skeleton)
    elif space != "angle":
        raise InvalidInputError(f"unknown space {space!r}")
    d = P[1:] - P[:-1]
    return float(np.linalg.norm(d.reshape(len(d), -1), axis=-1).mean())


def neighbor_gap(gen, gt, **kw) -> float:
    """Signed ``neighbor_l2(gen) - neighbor_l2(gt)``; smaller magnitude is better."""
    return neighbor_l2(gen, **kw) - neighbor_l2(gt, **kw)


def power_spectrum(x: np.ndarray) -> np.ndarray:
    """``|DFT|^2`` along axis 0."""
    return np.abs(np.fft.fft(x, axis=0)) ** 2


def npss(gen, gt) -> float:
    """Power-weighted earth mover's distance between normalized power spectra.

    Each of the ``J*3`` coordinate signals is treated separately; weights are
    the ground truth's total power per signal. A signal with no power at all
    is treated as having its (zero) energy at DC.
    """
    gen, gt = _pair(gen, gt)
    if len(gen) < 2:
        raise InvalidInputError("NPSS needs at least two frames")
    g = power_spectrum(gen.reshape(len(gen), -1))
    r = power_spectrum(gt.reshape(len(gt), -1))
    g_tot, r_tot = g.sum(axis=0), r.sum(axis=0)
    keep = (g_tot > 0) | (r_tot > 0)
    if not np.any(r_tot[keep] > 0):
        raise UndefinedMetricError("ground truth has zero power in every signal")
    dc = np.zeros(len(g))
    dc[0] = 1.0

    def normalized(p, tot):
        out = np.where(tot > 0, p / np.where(tot > 0, tot, 1.0), dc[:, None])
        return out

    g_n = normalized(g[:, keep], g_tot[keep])
    r_n = normalized(r[:, keep], r_tot[keep])
    emd = np.abs(np.cumsum(g_n, axis=0) - np.cumsum(r_n, axis=0)).sum(axis=0)
    w = r_tot[keep]
    return float((emd * w).sum() / w.sum())


def evaluate(gen, gt_full, skeleton: Skeleton | None = None) -> dict:
    """Metrics for one generated sequence.

    ``gen`` holds the interior frames; ``gt_full`` is either the same length
    or includes the two given frames. Neighbour distances are measured over
    the given frames plus the interior when the given frames are available.
    """
    gen, gt = _frames(gen), _frames(gt_full)
    if len(gt) == len(gen) + 2:
        interior = gt[1:-1]
        gen_seq = np.concatenate([gt[:1], gen, gt[-1:]])
        gt_seq = gt
    elif len(gt) == len(gen):
        interior, gen_seq, gt_seq = gt, gen, gt
    else:
        raise InvalidInputError(f"generated {len(gen)} frames but ground truth has {len(gt)}")
    nl_gen, nl_gt = neighbor_l2(gen_seq), neighbor_l2(gt_seq)
    return {
        "mpjae": mpjae(gen, interior),
        "mpjpe": mpjpe(gen, interior, skeleton) if skeleton is not None else float("nan"),
        "neighbor_l2_gen": nl_gen,
        "neighbor_l2_gt": nl_gt,
        "neighbor_gap": nl_gen - nl_gt,
        "npss": npss(gen_seq, gt_seq) if len(gen_seq) >= 2 else float("nan"),
    }


def mean_report(rows) -> dict:
    """Average per-sequence metric dicts; ``neighbor_gap`` stays signed."""
    rows = list(rows)
    if not rows:
        raise InvalidInputError("no sequences to aggregate")
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
