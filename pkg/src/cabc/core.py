"""Shared domain types, trajectory partitioning, and dataset persistence.

The vehicle lives in Frenet coordinates attached to a closed reference path:
arc length ``s`` (stored unwrapped so progress is monotone across laps),
lateral offset ``x_tran`` (left-positive), and heading error ``e_psi``.
Datasets are JSON-lines files so they can be appended to during iterative
collection; gzip is used transparently for ``.gz`` paths.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Optional, Union


class DatasetFormatError(ValueError):
    """Raised when a dataset file contains a malformed record."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class VehicleState:
    """Frenet-frame vehicle state.

    ``s`` is unwrapped: it keeps growing across laps.  Use :meth:`s_wrapped`
    wherever track geometry is looked up.
    """

    v_long: float   # longitudinal velocity, m/s
    v_tran: float   # lateral velocity, m/s
    omega_psi: float  # yaw rate, rad/s
    s: float        # unwrapped arc length along the reference path, m
    x_tran: float   # lateral deviation from the centerline, m (left positive)
    e_psi: float    # heading error w.r.t. the path tangent, rad

    def __post_init__(self):
        for name in ("v_long", "v_tran", "omega_psi", "s", "x_tran", "e_psi"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))

    def s_wrapped(self, lap_length: float) -> float:
        return self.s % lap_length

    def as_tuple(self) -> tuple:
        return (self.v_long, self.v_tran, self.omega_psi, self.s, self.x_tran, self.e_psi)

    @staticmethod
    def from_sequence(values) -> "VehicleState":
        v = list(values)
        if len(v) != 6:
            raise ValueError(f"expected 6 state components, got {len(v)}")
        return VehicleState(*map(float, v))


@dataclass(frozen=True)
class Action:
    """Normalized throttle/brake and steering command, each in [-1, 1]."""

    u_a: float
    u_steer: float

    def __post_init__(self):
        for name in ("u_a", "u_steer"):
            val = _require_finite(name, getattr(self, name))
            if not -1.0 <= val <= 1.0:
                raise ValueError(f"{name} out of [-1, 1]: {val}")
            object.__setattr__(self, name, val)

    @staticmethod
    def clamped(u_a: float, u_steer: float) -> "Action":
        return Action(min(1.0, max(-1.0, float(u_a))), min(1.0, max(-1.0, float(u_steer))))

    def as_tuple(self) -> tuple:
        return (self.u_a, self.u_steer)


@dataclass(frozen=True)
class Observation:
    """Noise-corrupted output: body velocities plus a lane preview.

    ``preview[i]`` is the (noisy) lateral offset of the lane center at a fixed
    arc range ahead, expressed in the vehicle frame: the geometry a forward
    lane camera reports.  The vector length is set by configuration.
    """

    v_long: float
    v_tran: float
    omega_psi: float
    preview: tuple

    def __post_init__(self):
        for name in ("v_long", "v_tran", "omega_psi"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))
        object.__setattr__(self, "preview", tuple(float(p) for p in self.preview))
        for p in self.preview:
            _require_finite("preview", p)

    def as_tuple(self) -> tuple:
        return (self.v_long, self.v_tran, self.omega_psi) + self.preview

    @staticmethod
    def from_sequence(values) -> "Observation":
        v = list(map(float, values))
        if len(v) < 3:
            raise ValueError(f"expected at least 3 observation components, got {len(v)}")
        return Observation(v[0], v[1], v[2], tuple(v[3:]))


@dataclass(frozen=True)
class Sample:
    """One closed-loop step record.

    ``u_expert`` is the expert's relabeled action at ``x``; ``u_applied`` is
    the action that actually drove the plant to ``x_next``.  Both are kept
    because cloning trains against the former while the dynamics surrogate
    trains against the latter.
    """

    x: VehicleState
    y: Observation
    u_expert: Action
    u_applied: Action
    x_next: VehicleState
    safe_label: Optional[int] = None

    def __post_init__(self):
        if self.safe_label is not None and self.safe_label not in (0, 1):
            raise ValueError(f"safe_label must be 0, 1 or None, got {self.safe_label!r}")


class Outcome(Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class TerminationReason(Enum):
    REACHED_TARGET = "reached_target"
    CONSTRAINT_VIOLATION = "constraint_violation"
    TIMEOUT = "timeout"
    # Dynamics singularity (state left the valid Frenet chart); always a failure.
    SINGULARITY = "singularity"


@dataclass(frozen=True)
class Trajectory:
    """A closed-loop rollout with a definite outcome.

    Success means exactly that the rollout terminated inside the target set;
    consecutive samples must chain (``samples[k].x_next == samples[k+1].x``).
    """

    samples: tuple
    outcome: Outcome
    termination_reason: TerminationReason

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        success = self.outcome is Outcome.SUCCESS
        reached = self.termination_reason is TerminationReason.REACHED_TARGET
        if success != reached:
            raise ValueError(
                f"outcome {self.outcome} inconsistent with reason {self.termination_reason}"
            )
        for k in range(len(self.samples) - 1):
            if self.samples[k].x_next != self.samples[k + 1].x:
                raise ValueError(f"trajectory does not chain at step {k}")

    def __len__(self) -> int:
        return len(self.samples)

    def states(self) -> list:
        return [smp.x for smp in self.samples]


@dataclass
class LabeledPool:
    """Safety-labeling pools: known-safe states, undecided states, negatives.

    ``d_minus`` always holds a subset of ``d_query``; it is rebuilt by the
    auto-labeler as the positive pool grows, never edited in place.
    """

    d_plus: list = field(default_factory=list)
    d_query: list = field(default_factory=list)
    d_minus: list = field(default_factory=list)

    def validate(self) -> None:
        query = set(st.as_tuple() for st in self.d_query)
        plus = set(st.as_tuple() for st in self.d_plus)
        for st in self.d_minus:
            if st.as_tuple() not in query:
                raise ValueError("d_minus state not present in d_query")
            if st.as_tuple() in plus:
                raise ValueError("state labeled both safe and unsafe")

    def counts(self) -> tuple:
        return (len(self.d_plus), len(self.d_query), len(self.d_minus))


def partition_trajectories(trajs: Iterable[Trajectory]) -> LabeledPool:
    """Split rollout states by outcome: successes feed ``d_plus``, failures ``d_query``.

    Every state visited on a successful trajectory is known reachable-to-target,
    hence safe; failed-trajectory states are merely undecided.  ``d_minus``
    starts empty and is populated later by the auto-labeler.
    """
    pool = LabeledPool()
    for traj in trajs:
        if len(traj) == 0:
            raise ValueError("cannot partition a trajectory with zero samples")
        dest = pool.d_plus if traj.outcome is Outcome.SUCCESS else pool.d_query
        dest.extend(traj.states())
    return pool


# --- JSON-lines persistence -------------------------------------------------

def _open(path, mode: str) -> IO:
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _state_json(x: VehicleState) -> list:
    return list(x.as_tuple())


def _traj_lines(trajs: Iterable[Trajectory]):
    for tid, traj in enumerate(trajs):
        yield {
            "kind": "traj",
            "traj_id": tid,
            "outcome": traj.outcome.value,
            "reason": traj.termination_reason.value,
        }
        for k, smp in enumerate(traj.samples):
            yield {
                "kind": "sample",
                "traj_id": tid,
                "k": k,
                "x": _state_json(smp.x),
                "y": list(smp.y.as_tuple()),
                "u_expert": list(smp.u_expert.as_tuple()),
                "u_applied": list(smp.u_applied.as_tuple()),
                "x_next": _state_json(smp.x_next),
                "safe": smp.safe_label,
            }


def _pool_lines(pool: LabeledPool):
    minus = set(st.as_tuple() for st in pool.d_minus)
    for x in pool.d_plus:
        yield {"kind": "pool", "set": "plus", "x": _state_json(x)}
    for x in pool.d_query:
        yield {"kind": "pool", "set": "query", "x": _state_json(x),
               "minus": 1 if x.as_tuple() in minus else 0}


def save_dataset(data: Union[LabeledPool, Iterable[Trajectory]], path) -> None:
    """Write trajectories or a labeled pool as one JSON object per line."""
    lines = _pool_lines(data) if isinstance(data, LabeledPool) else _traj_lines(list(data))
    with _open(path, "w") as fh:
        for obj in lines:
            fh.write(json.dumps(obj) + "\n")


class DatasetWriter:
    """Incrementally append trajectories to a JSON-lines file (single writer)."""

    def __init__(self, path):
        self._fh = _open(path, "w")
        self._next_id = 0

    def write(self, traj: Trajectory) -> int:
        tid = self._next_id
        self._next_id += 1
        for obj in _traj_lines([traj]):
            obj["traj_id"] = tid
            self._fh.write(json.dumps(obj) + "\n")
        return tid

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _field(obj: dict, line_no: int, name: str):
    if name not in obj:
        raise DatasetFormatError(line_no, f"missing field {name!r}")
    return obj[name]


def _parse_sample(obj: dict, line_no: int) -> Sample:
    try:
        return Sample(
            x=VehicleState.from_sequence(_field(obj, line_no, "x")),
            y=Observation.from_sequence(_field(obj, line_no, "y")),
            u_expert=Action(*map(float, _field(obj, line_no, "u_expert"))),
            u_applied=Action(*map(float, _field(obj, line_no, "u_applied"))),
            x_next=VehicleState.from_sequence(_field(obj, line_no, "x_next")),
            safe_label=_field(obj, line_no, "safe"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(line_no, str(exc)) from exc


def load_dataset(path) -> Union[LabeledPool, list]:
    """Load a dataset written by :func:`save_dataset`.

    Returns a list of :class:`Trajectory` for trajectory files and a
    :class:`LabeledPool` for pool files; an empty file yields an empty list.
    Malformed records raise :class:`DatasetFormatError` with the line number.
    """
    headers: dict = {}
    samples: dict = {}
    pool = LabeledPool()
    saw_pool = False
    saw_traj = False
    with _open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DatasetFormatError(line_no, "record is not a JSON object")
            kind = _field(obj, line_no, "kind")
            if kind == "traj":
                saw_traj = True
                tid = _field(obj, line_no, "traj_id")
                try:
                    headers[tid] = (
                        Outcome(_field(obj, line_no, "outcome")),
                        TerminationReason(_field(obj, line_no, "reason")),
                    )
                except ValueError as exc:
                    raise DatasetFormatError(line_no, str(exc)) from exc
                samples.setdefault(tid, [])
            elif kind == "sample":
                saw_traj = True
                tid = _field(obj, line_no, "traj_id")
                samples.setdefault(tid, []).append(
                    (_field(obj, line_no, "k"), _parse_sample(obj, line_no))
                )
            elif kind == "pool":
                saw_pool = True
                which = _field(obj, line_no, "set")
                x = VehicleState.from_sequence(_field(obj, line_no, "x"))
                if which == "plus":
                    pool.d_plus.append(x)
                elif which == "query":
                    pool.d_query.append(x)
                    if _field(obj, line_no, "minus"):
                        pool.d_minus.append(x)
                else:
                    raise DatasetFormatError(line_no, f"unknown pool set {which!r}")
            else:
                raise DatasetFormatError(line_no, f"unknown record kind {kind!r}")
    if saw_pool and saw_traj:
        raise DatasetFormatError(0, "file mixes pool and trajectory records")
    if saw_pool:
        return pool
    trajs = []
    for tid in sorted(headers):
        outcome, reason = headers[tid]
        ordered = [smp for _, smp in sorted(samples.get(tid, []), key=lambda t: t[0])]
        trajs.append(Trajectory(samples=ordered, outcome=outcome, termination_reason=reason))
    return trajs
