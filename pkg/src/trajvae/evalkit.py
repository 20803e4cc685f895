"""Error curves, CI ablation and latency benchmarking for trajectory predictors."""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ballsim, tvae
from .trajkit import Dataset, MaskedTrajectory, TimeGrid, Trajectory, first_observed_prefix, resample_to_grid, truth_on_grid

log = logging.getLogger(__name__)

DEFAULT_GIVENS = tuple(range(5, 201, 5))


@dataclass
class Predictor:
    """Maps an observed prefix to a whole-horizon prediction ``[N, 3]``.

    ``batch`` optionally predicts a list of prefixes in one call; it must agree
    with mapping ``fn`` over the list.
    """

    tag: str
    fn: Callable[[MaskedTrajectory], np.ndarray]
    batch: Callable[[list], np.ndarray] | None = None

    def __call__(self, prefix: MaskedTrajectory) -> np.ndarray:
        return self.fn(prefix)

    def predict_many(self, prefixes: list) -> list:
        if self.batch is not None and prefixes:
            return list(self.batch(prefixes))
        return [self.fn(p) for p in prefixes]


def physics_predictor(grid: TimeGrid, p: ballsim.PhysicsParams | None = None, n: int = 30, k: int = 2) -> Predictor:
    p = p or ballsim.PhysicsParams()
    cache: dict[bytes, np.ndarray] = {}

    def fn(prefix):
        # only the first n steps enter the fit, so longer prefixes share results
        key = prefix.values[:n].tobytes() + prefix.mask[:n].tobytes()
        if key not in cache:
            cache[key] = ballsim.physics_predict(prefix, grid, p, n, k)
        return cache[key].copy()

    return Predictor("physics", fn)


def tvae_predictor(model: tvae.TvaeModel, n_samples: int = 30, seed: int = 0, chunk: int = 64) -> Predictor:
    """Ensemble-mean predictor; draws come from one generator seeded at construction."""
    rng = np.random.default_rng(seed)

    def batch(prefixes):
        out = []
        for s in range(0, len(prefixes), chunk):
            part = prefixes[s:s + chunk]
            values = np.stack([q.values for q in part])
            mask = np.stack([q.mask for q in part])
            out.extend(tvae.predict_mean_batch(model, values, mask, n_samples, rng))
        return np.array(out)

    def fn(prefix):
        ens = tvae.predict_ensemble(model, prefix, n_samples, rng)
        return ens.samples.mean(axis=0)

    return Predictor("tvae-ci" if model.ci else "tvae", fn, batch)


@dataclass
class ErrorCurve:
    abscissa: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n: np.ndarray
    label: str = ""
    skipped: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("abscissa,mean,std,n\n")
        for a, m, s, c in zip(self.abscissa, self.mean, self.std, self.n):
            buf.write(f"{int(a)},{float(m)!r},{float(s)!r},{int(c)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "ErrorCurve":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        if not rows:
            return cls(np.array([], int), np.array([]), np.array([]), np.array([], int), label)
        cols = list(zip(*rows))
        return cls(np.array(cols[0], dtype=int), np.array(cols[1], dtype=float),
                   np.array(cols[2], dtype=float), np.array(cols[3], dtype=int), label)

    def at(self, x: int) -> float:
        return float(self.mean[np.flatnonzero(self.abscissa == x)[0]])

    def overall(self) -> float:
        """Sample-weighted mean over all reported points."""
        return float(np.sum(self.mean * self.n) / np.sum(self.n))


def _reference(tr: Trajectory, grid: TimeGrid) -> MaskedTrajectory:
    return truth_on_grid(tr, grid.shifted(float(tr.t[0])))


def _observed(tr: Trajectory, grid: TimeGrid) -> MaskedTrajectory:
    return resample_to_grid(tr, grid.shifted(float(tr.t[0])))


def _sorted(test) -> list[Trajectory]:
    trajs = test.trajectories if isinstance(test, Dataset) else list(test)
    return sorted(trajs, key=lambda tr: tr.id)


def _prefixes(test, grid, given):
    """(trajectory, observed grid, reference grid, prefix) for trajectories with a future after ``given``."""
    rows, skipped = [], 0
    for tr in _sorted(test):
        obs = _observed(tr, grid)
        ref = _reference(tr, grid)
        if obs.n_observed < max(given, 1) or given >= ref.length:
            skipped += 1
            continue
        pre = first_observed_prefix(obs, given)
        if not (ref.mask[pre.cut:] == 1).any():
            skipped += 1
            continue
        rows.append((tr, obs, ref, pre))
    return rows, skipped


def error_vs_future_step(pred: Predictor, test, given: int = 30, grid: TimeGrid | None = None) -> ErrorCurve:
    """Euclidean error by number of steps into the future (1 = first unobserved step)."""
    grid = grid or TimeGrid()
    rows, skipped = _prefixes(test, grid, given)
    if skipped:
        log.warning("error_vs_future_step: skipped %d trajectories with no future after %d observations",
                    skipped, given)
    preds = pred.predict_many([r[3] for r in rows])
    per_step = [[] for _ in range(grid.steps)]
    for (tr, obs, ref, pre), y in zip(rows, preds):
        err = np.linalg.norm(y - ref.values, axis=1)
        for i in range(pre.cut, ref.length):
            if ref.mask[i]:
                per_step[i - pre.cut].append(err[i])
    xs = [j for j, e in enumerate(per_step) if e]
    return ErrorCurve(
        np.array(xs, dtype=int) + 1,
        np.array([np.mean(per_step[j]) for j in xs]),
        np.array([np.std(per_step[j]) for j in xs]),
        np.array([len(per_step[j]) for j in xs], dtype=int),
        pred.tag,
        {given: skipped} if skipped else {},
    )


def error_vs_given(pred: Predictor, test, givens: Sequence[int] = DEFAULT_GIVENS, grid: TimeGrid | None = None,
                   region: str = "trajectory") -> ErrorCurve:
    """Per number of given observations, the mean over trajectories of the per-step error.

    ``region='trajectory'`` averages over every step of the trajectory (past
    reconstruction included); ``region='future'`` only over steps after the prefix.
    """
    if region not in ("trajectory", "future"):
        raise ValueError("region must be 'trajectory' or 'future'")
    grid = grid or TimeGrid()
    xs, means, stds, counts, skipped = [], [], [], [], {}
    for given in givens:
        rows, skip = _prefixes(test, grid, given)
        if skip:
            skipped[given] = skip
        if not rows:
            continue
        preds = pred.predict_many([r[3] for r in rows])
        per_traj = []
        for (tr, obs, ref, pre), y in zip(rows, preds):
            err = np.linalg.norm(y - ref.values, axis=1)
            sel = ref.mask.astype(bool)
            if region == "future":
                sel[:pre.cut] = False
            per_traj.append(err[sel].mean())
        xs.append(given)
        means.append(np.mean(per_traj))
        stds.append(np.std(per_traj))
        counts.append(len(per_traj))
    if skipped:
        log.warning("error_vs_given: skipped trajectories per given count: %s", skipped)
    return ErrorCurve(np.array(xs, dtype=int), np.array(means), np.array(stds), np.array(counts, dtype=int),
                      pred.tag, skipped)


@dataclass
class AblationResult:
    ci: ErrorCurve
    full: ErrorCurve
    ci_mean: float
    full_mean: float
    models: tuple = ()

    @property
    def ci_not_worse(self) -> bool:
        return self.ci_mean <= self.full_mean

    def summary(self) -> str:
        verdict = "CI <= full" if self.ci_not_worse else "CI > full"
        return (f"mean future error given 30: ci={self.ci_mean:.4f} m  full={self.full_mean:.4f} m  ({verdict}; "
                f"expected CI <= full)")


def ablation_ci(ds: Dataset, cfg: tvae.TrainConfig, given: int = 30, n_samples: int = 30) -> AblationResult:
    """Train twin models that differ only in ``ci`` and compare on the test split."""
    test = ds.split("test")
    curves, models = {}, {}
    for ci in (True, False):
        model, _ = tvae.train(ds, cfg.replace(ci=ci))
        curves[ci] = error_vs_future_step(tvae_predictor(model, n_samples, cfg.seed), test, given, cfg.grid)
        models[ci] = model
    res = AblationResult(curves[True], curves[False], curves[True].overall(), curves[False].overall(),
                         (models[True], models[False]))
    if res.ci_not_worse:
        log.info(res.summary())
    else:
        log.warning(res.summary())
    return res


@dataclass(frozen=True)
class LatencyReport:
    median_ms: float
    p95_ms: float
    max_ms: float
    ensemble_size: int
    repetitions: int

    def __str__(self):
        return (f"L={self.ensemble_size} reps={self.repetitions}: median {self.median_ms:.3f} ms, "
                f"p95 {self.p95_ms:.3f} ms, max {self.max_ms:.3f} ms")


def latency_bench(model: tvae.TvaeModel, prefix: MaskedTrajectory, n_samples: int = 30, reps: int = 30,
                  warmup: int = 10, seed: int = 0) -> LatencyReport:
    """Wall-clock of encode + ``n_samples`` decodes + moments; the first ``warmup`` calls are discarded."""
    if reps < 30:
        raise ValueError("reps must be >= 30")
    rng = np.random.default_rng(seed)
    times = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        ens = tvae.predict_ensemble(model, prefix, n_samples, rng)
        if n_samples >= 2:
            tvae.ensemble_moments(ens)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1e3)
    times = np.array(times)
    return LatencyReport(float(np.median(times)), float(np.percentile(times, 95)), float(times.max()),
                         n_samples, reps)


def plateau_reached(curve: ErrorCurve, by: int, rel: float = 0.25, abs_tol: float = 0.01) -> bool:
    """True if no later point improves on the value at ``by`` by more than ``rel`` (+ ``abs_tol`` metres)."""
    sel = curve.abscissa >= by
    if not sel.any():
        return False
    start = float(curve.mean[sel][0])
    return start <= (1 + rel) * float(curve.mean[sel].min()) + abs_tol


def write_summary(path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
