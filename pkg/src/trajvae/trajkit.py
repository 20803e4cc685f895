"""Trajectory containers, fixed-grid resampling, masking and the JSONL dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SPLITS = ("train", "val", "test")

DEFAULT_DT = 1.0 / 180.0
DEFAULT_STEPS = 216


class DataError(ValueError):
    """Raised for malformed trajectories or dataset files."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    dt: float = DEFAULT_DT
    steps: int = DEFAULT_STEPS
    origin: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise DataError("grid dt must be positive")
        if self.steps < 1:
            raise DataError("grid needs at least one step")

    @property
    def times(self) -> np.ndarray:
        return self.origin + self.dt * np.arange(self.steps)

    def shifted(self, origin: float) -> "TimeGrid":
        return TimeGrid(self.dt, self.steps, origin)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A time-stamped sequence of 3-D positions.

    ``truth`` optionally carries the noise-free positions of simulated data.
    """

    id: int
    t: np.ndarray
    pos: np.ndarray
    valid: np.ndarray = None
    split: str = "train"
    truth: np.ndarray | None = None

    def __post_init__(self):
        t = _frozen(self.t)
        pos = _frozen(self.pos).reshape(-1, 3) if np.size(self.pos) else _frozen(np.zeros((0, 3)))
        valid = _frozen(np.ones(len(t)) if self.valid is None else self.valid, dtype=bool)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "valid", valid)
        if self.truth is not None:
            object.__setattr__(self, "truth", _frozen(self.truth).reshape(-1, 3))
        if len(t) == 0:
            raise DataError(f"trajectory {self.id}: no samples")
        if len(pos) != len(t) or len(valid) != len(t):
            raise DataError(f"trajectory {self.id}: field lengths differ")
        if self.truth is not None and len(self.truth) != len(t):
            raise DataError(f"trajectory {self.id}: truth length differs")
        if np.any(np.diff(t) <= 0):
            raise DataError(f"trajectory {self.id}: unordered sample times")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(t)):
            raise DataError(f"trajectory {self.id}: non-finite values")
        if valid.sum() < 2:
            raise DataError(f"trajectory {self.id}: fewer than 2 valid samples")
        if self.split not in SPLITS:
            raise DataError(f"trajectory {self.id}: unknown split {self.split!r}")

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_truth = (self.truth is None and other.truth is None) or (
            self.truth is not None
            and other.truth is not None
            and np.array_equal(self.truth, other.truth)
        )
        return (
            self.id == other.id
            and self.split == other.split
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.valid, other.valid)
            and same_truth
        )


@dataclass(frozen=True, eq=False)
class MaskedTrajectory:
    """Zero-padded observations on a fixed grid plus a per-step {0,1} mask.

    ``cut`` is the first grid index that is not part of the observed prefix;
    full trajectories use ``cut == len(mask)``.
    """

    values: np.ndarray
    mask: np.ndarray
    cut: int

    def __post_init__(self):
        mask = _frozen(self.mask)
        values = np.array(self.values, dtype=float).reshape(len(mask), 3)
        if not np.all(np.isin(mask, (0.0, 1.0))):
            raise DataError("mask entries must be 0 or 1")
        if not 0 <= self.cut <= len(mask):
            raise DataError(f"cut {self.cut} outside [0, {len(mask)}]")
        values[mask == 0] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cut", int(self.cut))

    @property
    def steps(self) -> int:
        return len(self.mask)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def length(self) -> int:
        """One past the last observed step (T_n for full trajectories)."""
        idx = np.flatnonzero(self.mask)
        return int(idx[-1]) + 1 if len(idx) else 0

    def __eq__(self, other):
        if not isinstance(other, MaskedTrajectory):
            return NotImplemented
        return (
            self.cut == other.cut
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
        )


def resample_to_grid(traj: Trajectory, grid: TimeGrid) -> MaskedTrajectory:
    """Assign each grid step the nearest sample within dt/2, never interpolating."""
    if len(traj.t) == 0:
        raise DataError("no samples")
    if np.any(np.diff(traj.t) <= 0):
        raise DataError("unordered")
    times = grid.times
    j = np.searchsorted(traj.t, times)
    lo = np.clip(j - 1, 0, len(traj.t) - 1)
    hi = np.clip(j, 0, len(traj.t) - 1)
    pick = np.where(np.abs(traj.t[hi] - times) < np.abs(traj.t[lo] - times), hi, lo)
    hit = np.abs(traj.t[pick] - times) <= grid.dt / 2
    hit &= traj.valid[pick]
    values = np.zeros((grid.steps, 3))
    values[hit] = traj.pos[pick[hit]]
    return MaskedTrajectory(values, hit.astype(float), grid.steps)


def truth_on_grid(traj: Trajectory, grid: TimeGrid) -> MaskedTrajectory:
    """Grid view of the noise-free positions, or of the measurements when absent."""
    if traj.truth is None:
        return resample_to_grid(traj, grid)
    clean = Trajectory(traj.id, traj.t, traj.truth, traj.valid, traj.split)
    return resample_to_grid(clean, grid)


def make_prefix(full: MaskedTrajectory, t_cut: int) -> MaskedTrajectory:
    if not 0 <= t_cut <= full.steps:
        raise DataError(f"cut {t_cut} outside [0, {full.steps}]")
    mask = full.mask.copy()
    mask[t_cut:] = 0.0
    return MaskedTrajectory(full.values, mask, t_cut)


def first_observed_prefix(full: MaskedTrajectory, given: int) -> MaskedTrajectory:
    """Prefix holding exactly the first ``given`` observed steps."""
    idx = np.flatnonzero(full.mask)
    if given > len(idx):
        raise DataError(f"only {len(idx)} observations, {given} requested")
    cut = int(idx[given - 1]) + 1 if given > 0 else 0
    return make_prefix(full, cut)


def full_with_cut(m: MaskedTrajectory) -> MaskedTrajectory:
    return MaskedTrajectory(m.values, m.mask, m.steps)


def corrupt(
    m: MaskedTrajectory,
    p_miss: float,
    p_outlier: float,
    domain_box,
    rng: np.random.Generator,
) -> MaskedTrajectory:
    """Randomly drop observed prefix steps and replace survivors with uniform outliers.

    ``domain_box`` is a pair (low corner, high corner). Draws are made for every
    grid step so the random stream does not depend on the mask.
    """
    lo, hi = (np.asarray(c, dtype=float) for c in domain_box)
    n = m.steps
    drop_u = rng.random(n)
    out_u = rng.random(n)
    repl = rng.uniform(lo, hi, size=(n, 3))
    touch = (m.mask == 1) & (np.arange(n) < m.cut)
    drop = touch & (drop_u < p_miss)
    outlier = touch & ~drop & (out_u < p_outlier)
    values = m.values.copy()
    mask = m.mask.copy()
    mask[drop] = 0.0
    values[outlier] = repl[outlier]
    return MaskedTrajectory(values, mask, m.cut)


def window_sample(src: MaskedTrajectory, steps: int, rng: np.random.Generator) -> MaskedTrajectory:
    """Fit a grid-resampled trajectory of any length to exactly ``steps`` steps.

    Shorter sources are zero-padded (mask 0 tail); longer ones yield a uniformly
    random contiguous window.
    """
    n = src.steps
    if n < 1:
        raise DataError("empty source")
    if n <= steps:
        values = np.zeros((steps, 3))
        mask = np.zeros(steps)
        values[:n] = src.values
        mask[:n] = src.mask
        return MaskedTrajectory(values, mask, steps)
    start = int(rng.integers(0, n - steps + 1))
    return MaskedTrajectory(src.values[start:start + steps], src.mask[start:start + steps], steps)


def resample_any_length(traj: Trajectory, dt: float) -> MaskedTrajectory:
    """Resample onto a grid long enough to cover the whole trajectory."""
    steps = int(np.floor((traj.t[-1] - traj.t[0]) / dt + 0.5)) + 1
    return resample_to_grid(traj, TimeGrid(dt, steps, float(traj.t[0])))


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        ids = [tr.id for tr in self.trajectories]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate trajectory id(s): {dup[:5]}")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def split(self, name: str) -> list[Trajectory]:
        return [tr for tr in self.trajectories if tr.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def bounding_box(self, split: str | None = "train", inflate: float = 0.1):
        """Bounding box of valid positions, each side grown by ``inflate`` of its extent."""
        trs = self.trajectories if split is None else self.split(split)
        pts = np.concatenate([tr.pos[tr.valid] for tr in trs])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = inflate * (hi - lo)
        return lo - pad, hi + pad


# ---------------------------------------------------------------- file format


def _record(tr: Trajectory) -> str:
    rec = {"id": tr.id, "t": tr.t.tolist(), "pos": tr.pos.tolist()}
    if not tr.valid.all():
        rec["valid"] = tr.valid.astype(int).tolist()
    rec["split"] = tr.split
    if tr.truth is not None:
        rec["truth"] = tr.truth.tolist()
    return json.dumps(rec, separators=(",", ":"))


def parse_record(line: str, lineno: int = 0) -> Trajectory:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"line {lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: record is not an object")
    for key in ("id", "t", "pos"):
        if key not in rec:
            name = "position" if key == "pos" else key
            raise DataError(f"line {lineno}: missing {name!r} field ({key!r})")
    try:
        pos = np.asarray(rec["pos"], dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DataError("'pos' must be a list of [x, y, z]")
        return Trajectory(
            id=int(rec["id"]),
            t=rec["t"],
            pos=pos,
            valid=rec.get("valid"),
            split=rec.get("split", "train"),
            truth=rec.get("truth"),
        )
    except (DataError, ValueError, TypeError) as e:
        raise DataError(f"line {lineno}: {e}") from None


def read_dataset(path) -> Dataset:
    trajs = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            tr = parse_record(line, lineno)
            if tr.id in seen:
                raise DataError(f"line {lineno}: duplicate id {tr.id} (first on line {seen[tr.id]})")
            seen[tr.id] = lineno
            trajs.append(tr)
    return Dataset(trajs)


def write_dataset(path, ds: Dataset | Iterable[Trajectory]) -> None:
    trajs = ds.trajectories if isinstance(ds, Dataset) else list(ds)
    Path(path).write_text("".join(_record(tr) + "\n" for tr in trajs), encoding="utf-8")
