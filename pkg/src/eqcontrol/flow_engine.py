"""Fixed-step integration of equivariant fields and composed switching flows."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError, NumericError
from .fields import Field, LiftedField, MeanFieldKernel
from .group_action import as_points, format_float

DEFAULT_STEP = 1e-3
DEFAULT_BOUND = 1e6
MAX_STEPS_PER_LEG = 10_000_000


@dataclass(frozen=True)
class Leg:
    field_index: int
    sign: int
    duration: float

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ConfigurationError(f"leg sign must be +1 or -1, got {self.sign}")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ConfigurationError(f"leg duration must be finite and >= 0, got {self.duration}")
        object.__setattr__(self, "field_index", int(self.field_index))
        object.__setattr__(self, "duration", float(self.duration))


@dataclass(frozen=True)
class Schedule:
    """Composition of flows, applied leg by leg in time order."""

    legs: tuple[Leg, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "legs", tuple(l if isinstance(l, Leg) else Leg(*l) for l in self.legs))

    def __len__(self):
        return len(self.legs)

    def __iter__(self):
        return iter(self.legs)

    @property
    def total_time(self) -> float:
        return math.fsum(l.duration for l in self.legs)

    def validate(self, k: int) -> None:
        for j, leg in enumerate(self.legs):
            if not 0 <= leg.field_index < k:
                raise ConfigurationError(f"leg {j} uses field {leg.field_index}, tuple has {k}")

    def to_text(self) -> str:
        return "".join(f"{l.field_index} {l.sign:+d} {format_float(l.duration)}\n" for l in self.legs)

    @classmethod
    def from_text(cls, text: str) -> "Schedule":
        legs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ConfigurationError(f"schedule line {lineno}: expected 'field_index sign duration'")
            legs.append(Leg(int(parts[0]), int(parts[1]), float(parts[2])))
        return cls(tuple(legs))

    def write(self, path, provenance: Sequence[str] = ()) -> None:
        header = "".join(f"# {p}\n" for p in provenance)
        Path(path).write_text(header + self.to_text())

    @classmethod
    def read(cls, path) -> "Schedule":
        return cls.from_text(Path(path).read_text())


@dataclass
class Trajectory:
    samples: list[tuple[float, np.ndarray]] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.samples[-1][1]

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.samples]

    def to_csv(self, path, provenance: Sequence[str] = ()) -> None:
        d = self.samples[0][1].shape[1]
        lines = [f"# {p}" for p in provenance]
        lines.append(",".join(["t", "point_index"] + [f"x{k}" for k in range(d)]))
        for t, q in self.samples:
            for i, row in enumerate(q):
                lines.append(",".join([format_float(t), str(i)] + [format_float(v) for v in row]))
        Path(path).write_text("\n".join(lines) + "\n")


def _as_field(f) -> Field:
    if isinstance(f, MeanFieldKernel):
        return LiftedField(f)
    return f


def _guard(q: np.ndarray, bound: float, t: float) -> None:
    if not np.isfinite(q).all():
        raise DivergenceError(f"non-finite state at t={t!r}", time=t)
    size = float(np.abs(q).max())
    if size > bound:
        raise DivergenceError(f"state norm {size:.3g} exceeds bound {bound:.3g} at t={t!r}", time=t)


def _rk4_step(f, q: np.ndarray, h: float) -> np.ndarray:
    k1 = f(q)
    k2 = f(q + (0.5 * h) * k1)
    k3 = f(q + (0.5 * h) * k2)
    k4 = f(q + h * k3)
    return q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_sizes(duration: float, step: float) -> tuple[int, float]:
    """Number of full steps and the length of the final partial step (0 if none)."""
    full = int(math.floor(duration / step))
    rest = duration - full * step
    if rest < 0:
        full, rest = full - 1, duration - (full - 1) * step
    if rest <= 1e-12 * step:
        rest = 0.0
    return full, rest


def integrate(
    field,
    q0,
    duration: float,
    step: float = DEFAULT_STEP,
    *,
    bound: float = DEFAULT_BOUND,
    max_steps: int = MAX_STEPS_PER_LEG,
    sign: float = 1.0,
    sample_every: int | None = None,
    t0: float = 0.0,
    samples: list | None = None,
) -> np.ndarray:
    """Classical RK4 with fixed ``step``; the last step is shortened to land on ``duration``.

    ``sign=-1`` integrates the reversed field.  When ``samples`` is a list and
    ``sample_every`` is set, ``(t, q)`` pairs are appended every that many steps.
    """
    if duration < 0 or not math.isfinite(duration):
        raise ConfigurationError(f"duration must be finite and >= 0, got {duration}")
    if step <= 0:
        raise ConfigurationError(f"step must be positive, got {step}")
    f = _as_field(field)
    if sign < 0:
        f = -f
    q = np.array(as_points(q0), dtype=np.float64)
    full, rest = step_sizes(duration, step)
    if full + (rest > 0) > max_steps:
        raise ConfigurationError(f"leg needs {full + 1} steps, more than the limit {max_steps}")
    for s in range(full):
        try:
            q = _rk4_step(f, q, step)
        except NumericError as exc:
            raise DivergenceError(f"{exc} at t={t0 + s * step!r}", time=t0 + s * step, index=exc.index) from exc
        _guard(q, bound, t0 + (s + 1) * step)
        if samples is not None and sample_every and (s + 1) % sample_every == 0:
            samples.append((t0 + (s + 1) * step, q.copy()))
    if rest > 0:
        q = _rk4_step(f, q, rest)
        _guard(q, bound, t0 + duration)
    return q


def run_schedule(
    fields: Sequence,
    schedule: Schedule,
    q0,
    step: float = DEFAULT_STEP,
    *,
    bound: float = DEFAULT_BOUND,
    sample_every: int | None = None,
) -> Trajectory:
    """Apply the legs left to right; samples at t=0 and at every leg end."""
    schedule = schedule if isinstance(schedule, Schedule) else Schedule(tuple(schedule))
    schedule.validate(len(fields))
    q = np.array(as_points(q0), dtype=np.float64)
    traj = Trajectory([(0.0, q.copy())])
    t = 0.0
    for leg in schedule.legs:
        q = integrate(
            fields[leg.field_index], q, leg.duration, step,
            bound=bound, sign=leg.sign, sample_every=sample_every, t0=t, samples=traj.samples,
        )
        t += leg.duration
        if traj.samples[-1][0] != t or not np.array_equal(traj.samples[-1][1], q):
            traj.samples.append((t, q.copy()))
    return traj


def final_state(fields: Sequence, schedule: Schedule, q0, step: float = DEFAULT_STEP, *, bound: float = DEFAULT_BOUND) -> np.ndarray:
    """End point of :func:`run_schedule` without recording samples."""
    q = np.array(as_points(q0), dtype=np.float64)
    for leg in schedule.legs:
        q = integrate(fields[leg.field_index], q, leg.duration, step, bound=bound, sign=leg.sign)
    return q


def discrete_layers(kernel, q0, dt: float, steps: int, *, bound: float = DEFAULT_BOUND) -> np.ndarray:
    """Skip-connection recursion ``x_i <- x_i + dt f(x_i, mu)`` repeated ``steps`` times."""
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    f = _as_field(kernel)
    q = np.array(as_points(q0), dtype=np.float64)
    for s in range(steps):
        q = q + dt * f(q)
        _guard(q, bound, (s + 1) * dt)
    return q


def ensemble_run(
    fields: Sequence, schedule: Schedule, clouds: Sequence, step: float = DEFAULT_STEP, **kwargs
) -> list[Trajectory]:
    """Run the same schedule on each cloud independently."""
    clouds = [as_points(c) for c in clouds]
    if len({c.shape[1] for c in clouds}) > 1:
        raise ConfigurationError("ensemble clouds must share the point dimension")
    out = []
    for h, c in enumerate(clouds):
        try:
            out.append(run_schedule(fields, schedule, c, step, **kwargs))
        except DivergenceError as exc:
            raise DivergenceError(f"cloud {h}: {exc}", time=exc.time, index=h) from exc
    return out


def schedule_hash(schedule: Schedule) -> str:
    return hashlib.sha256(schedule.to_text().encode()).hexdigest()[:16]
