"""Frame dependency graphs, generation schedules and attention masks.

Positions run ``0..T+1``; ``0`` and ``T+1`` are the given frames. An edge
``t -> d`` means frame ``t`` is generated conditioned on frame ``d``.

The schedule follows the shuffled-autoregression read-out rule: target
``o_i`` is read from decoder row ``o_{i-1}`` (with ``o_0 = 0``), so the mask
row of ``o_{i-1}`` lists exactly the dependencies of ``o_i``.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, CycleError, EmptyGraphError, FormatError, InvalidInputError


@dataclass(frozen=True)
class DependencyGraph:
    n_positions: int
    deps: dict  # target -> tuple of dependency positions (ascending)
    duplicates: dict = field(default_factory=dict)  # smoothing-pass targets -> deps
    # builder's intended generation order; advisory, the schedule re-derives it
    order_hint: tuple = ()

    @property
    def T(self) -> int:
        return self.n_positions - 2

    @property
    def givens(self) -> tuple:
        return (0, self.n_positions - 1)

    @property
    def has_smoothing(self) -> bool:
        return bool(self.duplicates)


def _graph(T: int, deps: dict, order: list, smoothing: bool) -> DependencyGraph:
    N = T + 2
    frozen = {t: tuple(sorted(set(ds))) for t, ds in deps.items()}
    dup = {t: tuple(range(N)) for t in range(1, T + 1)} if smoothing else {}
    return DependencyGraph(N, frozen, dup, tuple(order))


def _check_T(T: int) -> None:
    if T < 1:
        raise EmptyGraphError(f"need at least one interior frame, got T={T}")


def build_original_ar(T: int, smoothing: bool = False) -> DependencyGraph:
    """Left-to-right chain; every frame sees both given frames and all predecessors."""
    _check_T(T)
    deps = {t: [0, T + 1, *range(1, t)] for t in range(1, T + 1)}
    return _graph(T, deps, list(range(1, T + 1)), smoothing)


def build_binary_search(T: int, smoothing: bool = False) -> DependencyGraph:
    """Midpoint recursion, breadth first; each midpoint sees its interval bounds."""
    _check_T(T)
    order, deps = [], {}
    queue = deque([(0, T + 1)])
    prev = 0
    while queue:
        lo, hi = queue.popleft()
        if hi - lo < 2:
            continue
        m = (lo + hi) // 2
        deps[m] = [lo, hi, prev]
        order.append(m)
        prev = m
        queue.append((lo, m))
        queue.append((m, hi))
    return _graph(T, deps, order, smoothing)


def build_three_stage(T: int, keyframes=(), smoothing: bool = True,
                      all_keyframes: bool = True) -> DependencyGraph:
    """Keyframe interpolation, frame-by-frame generation, then smoothing.

    Keyframes form a chain after the given frames. Frames inside each interval
    between anchors are generated left to right and see the given frames,
    the keyframes (all of them, or only the interval bounds when
    ``all_keyframes`` is false) and the earlier frames of their interval.
    """
    _check_T(T)
    keyframes = [int(k) for k in keyframes]
    if any(not 1 <= k <= T for k in keyframes):
        raise InvalidInputError(f"keyframes must lie in [1, {T}], got {keyframes}")
    if any(b <= a for a, b in zip(keyframes, keyframes[1:])):
        raise InvalidInputError(f"keyframes must be strictly increasing, got {keyframes}")

    order, deps = [], {}
    prev = 0
    for j, k in enumerate(keyframes):
        deps[k] = [0, T + 1, *keyframes[:j], prev]
        order.append(k)
        prev = k

    anchors = [0, *keyframes, T + 1]
    for left, right in zip(anchors, anchors[1:]):
        context = keyframes if all_keyframes else [left, right]
        for t in range(left + 1, right):
            deps[t] = [0, T + 1, *context, *range(left + 1, t), prev]
            order.append(t)
            prev = t
    return _graph(T, deps, order, smoothing)


@dataclass(frozen=True)
class DagReport:
    ok: bool
    cycle: tuple = ()
    unresolved: tuple = ()  # dependencies that are neither given nor a target

    def __bool__(self):
        return self.ok


def _find_cycle(nodes: set, deps: dict) -> tuple:
    color = {}
    for start in sorted(nodes):
        if start in color:
            continue
        stack = [(start, iter(sorted(d for d in deps[start] if d in nodes)))]
        path = [start]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                path.pop()
            elif color.get(nxt) == 1:
                return tuple(path[path.index(nxt):])
            elif nxt not in color:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(sorted(d for d in deps[nxt] if d in nodes))))
    return ()


def _kahn(g: DependencyGraph) -> tuple[list, set]:
    """Topological order of the non-duplicate targets; ties go to the builder's
    intended order, then to the smallest position."""
    rank = {t: i for i, t in enumerate(g.order_hint)}
    done = set(g.givens)
    pending = {t: {d for d in ds if d not in done} for t, ds in g.deps.items()}
    users: dict = {}
    for t, ds in pending.items():
        for d in ds:
            users.setdefault(d, []).append(t)
    ready = sorted((t for t, ds in pending.items() if not ds),
                   key=lambda t: (rank.get(t, len(rank)), t))
    order = []
    while ready:
        t = ready.pop(0)
        order.append(t)
        for u in users.get(t, ()):
            pending[u].discard(t)
            if not pending[u]:
                ready.append(u)
        ready.sort(key=lambda t: (rank.get(t, len(rank)), t))
    return order, set(g.deps) - set(order)


def validate_dag(g: DependencyGraph) -> DagReport:
    order, left = _kahn(g)
    if not left:
        return DagReport(True)
    known = set(g.deps) | set(g.givens)
    unresolved = tuple(sorted({d for t in left for d in g.deps[t] if d not in known}))
    cycle = _find_cycle(left, g.deps)
    return DagReport(False, cycle, unresolved)


@dataclass(frozen=True)
class Schedule:
    n_positions: int
    order: tuple
    source: dict  # target -> decoder row its prediction is read from
    deps: dict  # target -> dependencies, always including its source row
    levels: tuple  # tuple of tuples, consecutive slices of ``order``
    smoothing: bool = False

    @property
    def T(self) -> int:
        return self.n_positions - 2

    def to_json(self) -> dict:
        return {
            "n_positions": self.n_positions,
            "order": list(self.order),
            "source": {str(t): s for t, s in self.source.items()},
            "deps": {str(t): list(d) for t, d in self.deps.items()},
            "levels": [list(lv) for lv in self.levels],
            "smoothing": self.smoothing,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Schedule":
        try:
            order = tuple(int(t) for t in obj["order"])
            source = {int(t): int(s) for t, s in obj["source"].items()}
            deps = {int(t): tuple(int(d) for d in ds) for t, ds in obj["deps"].items()}
            levels = tuple(tuple(int(t) for t in lv) for lv in obj["levels"])
            N = int(obj.get("n_positions", len(order) + 2))
            smoothing = bool(obj.get("smoothing", False))
        except KeyError as e:
            raise FormatError(f"schedule is missing field {e.args[0]!r}") from None
        except (TypeError, ValueError, AttributeError) as e:
            raise FormatError(f"malformed schedule: {e}") from None
        return cls(N, order, source, deps, levels, smoothing)


def save_schedule(s: Schedule, path) -> None:
    with open(path, "w") as f:
        json.dump(s.to_json(), f, indent=1)


def load_schedule(path) -> Schedule:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    return Schedule.from_json(obj)


def _levels(order, deps, source, givens) -> tuple:
    # A group may only read frames that exist before it starts, and its
    # members must be read from distinct rows.
    levels, current, valid = [], [], set(givens)
    for t in order:
        ok = set(deps[t]) <= valid and source[t] not in {source[u] for u in current}
        if current and not ok:
            levels.append(tuple(current))
            valid.update(current)
            current = []
        current.append(t)
    if current:
        levels.append(tuple(current))
    return tuple(levels)


def topological_schedule(g: DependencyGraph) -> Schedule:
    report = validate_dag(g)
    if not report.ok:
        raise CycleError(report)
    order, _ = _kahn(g)
    source, deps = {}, {}
    prev = 0
    for t in order:
        source[t] = prev
        deps[t] = tuple(sorted(set(g.deps[t]) | {prev}))
        prev = t
    levels = _levels(order, deps, source, g.givens)
    return Schedule(g.n_positions, tuple(order), source, deps, levels, g.has_smoothing)


@dataclass(frozen=True)
class FDAM:
    mask: np.ndarray  # (N, N) bool; row = source position, column = attendable
    smoothing: np.ndarray | None = None  # (N, N) full-visibility mask


def derive_fdam(s: Schedule, N: int | None = None) -> FDAM:
    N = s.n_positions if N is None else N
    if any(t >= N or d >= N for t, ds in s.deps.items() for d in ds):
        raise InvalidInputError(f"schedule references positions beyond N={N}")
    mask = np.zeros((N, N), dtype=bool)
    used = set()
    for t in s.order:
        row = s.source[t]
        if row in used:
            raise ConsistencyError(f"row {row} is the source of two targets")
        used.add(row)
        mask[row, list(s.deps[t])] = True
    for r in range(N):
        if r not in used:
            mask[r, r] = True
    smooth = np.ones((N, N), dtype=bool) if s.smoothing else None
    return FDAM(mask, smooth)


def deps_from_fdam(fdam: FDAM, s: Schedule) -> dict:
    """Inverse shuffle: row ``source(o_i)`` of the mask gives ``deps(o_i)``."""
    return {t: tuple(np.flatnonzero(fdam.mask[s.source[t]]).tolist()) for t in s.order}


def export_dot(g: DependencyGraph) -> str:
    lines = ["digraph dependencies {", "  rankdir=LR;"]
    for p in range(g.n_positions):
        shape = "doublecircle" if p in g.givens else "circle"
        lines.append(f'  "{p}" [label="{p}", shape={shape}];')
    for t in sorted(g.duplicates):
        lines.append(f'  "{t}s" [label="{t}\'", shape=circle, style=dashed];')
    for t in sorted(g.deps):
        for d in g.deps[t]:
            lines.append(f'  "{t}" -> "{d}";')
    for t in sorted(g.duplicates):
        for d in g.duplicates[t]:
            lines.append(f'  "{t}s" -> "{d}" [style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


_EDGE = re.compile(r'^\s*"(\d+)(s?)"\s*->\s*"(\d+)"')
_NODE = re.compile(r'^\s*"(\d+)"\s*\[')


def parse_dot(text: str) -> DependencyGraph:
    """Read back a graph written by :func:`export_dot`."""
    nodes, deps, dup = set(), {}, {}
    for line in text.splitlines():
        m = _EDGE.match(line)
        if m:
            t, is_dup, d = int(m[1]), m[2] == "s", int(m[3])
            (dup if is_dup else deps).setdefault(t, []).append(d)
            continue
        m = _NODE.match(line)
        if m:
            nodes.add(int(m[1]))
    if not nodes:
        raise FormatError("no nodes found in DOT text")
    return DependencyGraph(max(nodes) + 1,
                           {t: tuple(sorted(ds)) for t, ds in deps.items()},
                           {t: tuple(sorted(ds)) for t, ds in dup.items()})


BUILDERS = {
    "ar": build_original_ar,
    "binary": build_binary_search,
    "three-stage": build_three_stage,
}


def build_graph(kind: str, T: int, keyframes=(), smoothing: bool | None = None) -> DependencyGraph:
    """Builder dispatch used by the CLI and training scripts."""
    if kind == "three-stage":
        return build_three_stage(T, keyframes, smoothing=True if smoothing is None else smoothing)
    if keyframes:
        raise InvalidInputError(f"keyframes only apply to the three-stage schedule, not {kind!r}")
    try:
        builder = BUILDERS[kind]
    except KeyError:
        raise InvalidInputError(f"unknown schedule {kind!r}") from None
    return builder(T, smoothing=bool(smoothing))
