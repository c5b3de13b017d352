"""Shuffled-autoregressive generation with write-back, then the smoothing pass.

``model`` is anything callable as ``model(P, mask, empty) -> P_gen`` on
``(B, N, J, 3)`` tensors, normally a :class:`~sarinterp.model.SARModel`.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .depgraph import FDAM, Schedule, derive_fdam
from .errors import InvalidInputError
from .motion import Motion, slerp_motion
from .nn import DTYPE


@dataclass
class Trace:
    n_forward: int = 0
    writes: Counter = field(default_factory=Counter)


def _check(model, schedule: Schedule) -> None:
    config = getattr(model, "config", None)
    if config is not None and config.N != schedule.n_positions:
        raise InvalidInputError(
            f"model expects N={config.N} positions, schedule has {schedule.n_positions}")


def _batch_endpoints(start, end):
    start = torch.as_tensor(np.asarray(start), dtype=DTYPE)
    end = torch.as_tensor(np.asarray(end), dtype=DTYPE)
    if start.shape != end.shape or start.shape[-1] != 3:
        raise InvalidInputError(f"start/end shapes differ: {tuple(start.shape)} vs {tuple(end.shape)}")
    single = start.ndim == 2
    if single:
        start, end = start[None], end[None]
    return start, end, single


def init_buffer(start, end, N: int):
    """Buffer with the given frames at 0 and N-1 and empty rows in between."""
    B, J, _ = start.shape
    buf = torch.zeros(B, N, J, 3, dtype=DTYPE)
    buf[:, 0] = start
    buf[:, N - 1] = end
    empty = torch.ones(B, N, dtype=torch.bool)
    empty[:, 0] = False
    empty[:, N - 1] = False
    return buf, empty


@torch.no_grad()
def generate_chain(model, buf, empty, schedule: Schedule, fdam: FDAM,
                   parallel_levels: bool = False, teacher=None, trace: Trace | None = None) -> dict:
    """Fill ``buf`` in place along the schedule; returns ``{target: prediction}``.

    With ``teacher`` (a full ground-truth buffer) the ground-truth frame is
    written back instead of the prediction.
    """
    mask = torch.as_tensor(fdam.mask)
    groups = schedule.levels if parallel_levels else tuple((t,) for t in schedule.order)
    preds = {}
    for group in groups:
        out = model(buf, mask, empty)
        if trace is not None:
            trace.n_forward += 1
        for t in group:
            preds[t] = out[:, schedule.source[t]].clone()
        for t in group:
            buf[:, t] = preds[t] if teacher is None else teacher[:, t]
            empty[:, t] = False
            if trace is not None:
                trace.writes[t] += 1
    return preds


@torch.no_grad()
def smoothing_pass(model, buf, fdam: FDAM, trace: Trace | None = None):
    """Regenerate every interior frame from the full trajectory, in place."""
    N = buf.shape[1]
    mask = torch.as_tensor(fdam.smoothing if fdam.smoothing is not None else np.ones((N, N), bool))
    out = model(buf, mask, torch.zeros(buf.shape[:2], dtype=torch.bool))
    buf[:, 1:N - 1] = out[:, 1:N - 1]
    if trace is not None:
        trace.n_forward += 1
        trace.writes.update(range(1, N - 1))
    return buf


def run_schedule(start, end, model, schedule: Schedule, fdam: FDAM | None = None,
                 smoothing: bool = True, parallel_levels: bool = False, return_trace: bool = False):
    """Interior frames ``1..T`` generated between ``start`` and ``end``.

    Poses may be ``(J, 3)`` or batched ``(B, J, 3)``; the result is a tensor of
    shape ``(T, J, 3)`` or ``(B, T, J, 3)`` to match.
    """
    _check(model, schedule)
    fdam = derive_fdam(schedule) if fdam is None else fdam
    start, end, single = _batch_endpoints(start, end)
    trace = Trace()
    buf, empty = init_buffer(start, end, schedule.n_positions)
    generate_chain(model, buf, empty, schedule, fdam, parallel_levels, trace=trace)
    if smoothing and schedule.smoothing:
        smoothing_pass(model, buf, fdam, trace)
    out = buf[:, 1:-1]
    out = out[0] if single else out
    return (out, trace) if return_trace else out


def run_without_smoothing(start, end, model, schedule: Schedule, fdam: FDAM | None = None,
                          parallel_levels: bool = False, return_trace: bool = False):
    return run_schedule(start, end, model, schedule, fdam, smoothing=False,
                        parallel_levels=parallel_levels, return_trace=return_trace)


def interpolate_slerp(start, end, T: int, fps: float = 30.0) -> Motion:
    return slerp_motion(start, end, T, fps)


def teacher_forced_rows(model, gt, schedule: Schedule, fdam: FDAM | None = None) -> dict:
    """One parallel pass over a ground-truth buffer; ``{target: row output}``."""
    fdam = derive_fdam(schedule) if fdam is None else fdam
    gt = torch.as_tensor(gt, dtype=DTYPE)
    with torch.no_grad():
        out = model(gt, torch.as_tensor(fdam.mask), torch.zeros(gt.shape[:2], dtype=torch.bool))
    return {t: out[:, schedule.source[t]] for t in schedule.order}


def iterate_with_ground_truth(model, gt, schedule: Schedule, fdam: FDAM | None = None) -> dict:
    """Step-by-step generation whose write-back uses ground truth; ``{target: prediction}``."""
    fdam = derive_fdam(schedule) if fdam is None else fdam
    gt = torch.as_tensor(gt, dtype=DTYPE)
    buf, empty = init_buffer(gt[:, 0], gt[:, -1], schedule.n_positions)
    return generate_chain(model, buf, empty, schedule, fdam, teacher=gt)


def generate_motion(method: str, start, end, T: int, fps: float = 30.0,
                    model=None, schedule: Schedule | None = None) -> Motion:
    """Single-sequence dispatch used by the command line: ``sar``, ``sar-nosmooth`` or ``slerp``."""
    if method == "slerp":
        return interpolate_slerp(start, end, T, fps)
    if model is None or schedule is None:
        raise InvalidInputError(f"method {method!r} needs a trained model and its schedule")
    if schedule.T != T:
        raise InvalidInputError(f"schedule generates T={schedule.T} frames, input needs {T}")
    if method == "sar":
        frames = run_schedule(start, end, model, schedule)
    elif method == "sar-nosmooth":
        frames = run_without_smoothing(start, end, model, schedule)
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return Motion(frames.numpy(), fps)
