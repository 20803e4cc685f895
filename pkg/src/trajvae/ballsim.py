"""Table-tennis ball flight: drag + table bounce (no spin), synthetic data and the ODE baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .trajkit import DataError, Dataset, MaskedTrajectory, TimeGrid, Trajectory

BOUNCE_TOL = 1e-6


class DivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BallState:
    position: np.ndarray
    velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        object.__setattr__(self, "time", float(self.time))

    def energy(self, gravity: float) -> float:
        """Kinetic plus potential energy per unit mass."""
        return 0.5 * float(self.velocity @ self.velocity) + gravity * float(self.position[2])


@dataclass(frozen=True)
class PhysicsParams:
    gravity: float = 9.81
    drag_coeff: float = 0.112
    table_height: float = 0.76
    table_x_min: float = -0.7625
    table_x_max: float = 0.7625
    table_y_min: float = -1.37
    table_y_max: float = 1.37
    restitution_z: float = 0.88
    tangential_retain: float = 0.80
    floor_height: float = 0.0

    def __post_init__(self):
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be >= 0")
        if not 0 < self.restitution_z <= 1:
            raise ValueError("restitution_z must be in (0, 1]")
        if not 0 < self.tangential_retain <= 1:
            raise ValueError("tangential_retain must be in (0, 1]")

    def on_table(self, x: float, y: float) -> bool:
        return self.table_x_min <= x <= self.table_x_max and self.table_y_min <= y <= self.table_y_max

    def with_infinite_table(self) -> "PhysicsParams":
        return self.replace(table_x_min=-np.inf, table_x_max=np.inf,
                            table_y_min=-np.inf, table_y_max=np.inf)

    def without_table(self) -> "PhysicsParams":
        return self.replace(table_height=-np.inf)

    def replace(self, **kw) -> "PhysicsParams":
        return PhysicsParams(**{**asdict(self), **kw})


@dataclass(frozen=True)
class LaunchDistribution:
    """Uniform launch box, speed range and direction cone (degrees; azimuth about +y)."""

    box_low: tuple = (-0.1, -1.67, 0.95)
    box_high: tuple = (0.1, -1.47, 1.15)
    speed: tuple = (4.0, 8.0)
    elevation_deg: tuple = (5.0, 25.0)
    azimuth_deg: tuple = (-15.0, 15.0)

    def __post_init__(self):
        for lo, hi in (self.speed, self.elevation_deg, self.azimuth_deg, *zip(self.box_low, self.box_high)):
            if not lo <= hi:
                raise ValueError("empty launch range")

    def draw(self, rng: np.random.Generator) -> BallState:
        pos = rng.uniform(self.box_low, self.box_high)
        speed = rng.uniform(*self.speed)
        elev = np.radians(rng.uniform(*self.elevation_deg))
        azim = np.radians(rng.uniform(*self.azimuth_deg))
        vel = speed * np.array([np.cos(elev) * np.sin(azim), np.cos(elev) * np.cos(azim), np.sin(elev)])
        return BallState(pos, vel)


# ---------------------------------------------------------------- config files


def dump_params(p: PhysicsParams) -> str:
    return "".join(f"{f.name} = {getattr(p, f.name)!r}\n" for f in fields(p))


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def params_from_mapping(kv: dict) -> PhysicsParams:
    names = {f.name for f in fields(PhysicsParams)}
    return PhysicsParams(**{k: float(v) for k, v in kv.items() if k in names})


def load_params(path) -> PhysicsParams:
    kv = parse_key_values(Path(path).read_text(encoding="utf-8"))
    unknown = set(kv) - {f.name for f in fields(PhysicsParams)}
    if unknown:
        raise DataError(f"unknown physics parameter(s): {sorted(unknown)}")
    return params_from_mapping(kv)


# ---------------------------------------------------------------- dynamics


def ball_dynamics(s: BallState, p: PhysicsParams):
    """Time derivative of (position, velocity): gravity plus quadratic drag."""
    return _deriv(s.position, s.velocity, p)


def _deriv(pos, vel, p):
    acc = -p.drag_coeff * np.sqrt(vel @ vel) * vel
    acc[2] -= p.gravity
    return vel, acc


def _rk4(pos, vel, h, p):
    k1p, k1v = _deriv(pos, vel, p)
    k2p, k2v = _deriv(pos + 0.5 * h * k1p, vel + 0.5 * h * k1v, p)
    k3p, k3v = _deriv(pos + 0.5 * h * k2p, vel + 0.5 * h * k2v, p)
    k4p, k4v = _deriv(pos + h * k3p, vel + h * k3v, p)
    return (
        pos + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p),
        vel + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )


def bounce_velocity(vel: np.ndarray, p: PhysicsParams) -> np.ndarray:
    out = np.array(vel, dtype=float)
    out[2] = -p.restitution_z * out[2]
    out[:2] *= p.tangential_retain
    return out


def integrate_step(s: BallState, dt: float, p: PhysicsParams, _depth: int = 0) -> BallState:
    """One RK4 step; a table crossing inside the step is located by bisection and reflected."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    h = p.table_height
    pos, vel = _rk4(s.position, s.velocity, dt, p)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise DivergedError("diverged")
    if s.position[2] > h and pos[2] < h and _depth < 8:
        lo, hi = 0.0, dt
        cpos, cvel = pos, vel
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            cpos, cvel = _rk4(s.position, s.velocity, mid, p)
            if abs(cpos[2] - h) < BOUNCE_TOL:
                break
            if cpos[2] > h:
                lo = mid
            else:
                hi = mid
        if p.on_table(cpos[0], cpos[1]):
            hit = BallState(cpos, bounce_velocity(cvel, p), s.time + mid)
            rest = dt - mid
            if rest <= 0:
                return BallState(hit.position, hit.velocity, s.time + dt)
            out = integrate_step(hit, rest, p, _depth + 1)
            return BallState(out.position, out.velocity, s.time + dt)
    return BallState(pos, vel, s.time + dt)


def simulate(init: BallState, grid: TimeGrid, p: PhysicsParams, *, truncate: bool = True,
             traj_id: int = 0, split: str = "train") -> Trajectory:
    """Sample the flight at every grid step, stopping below the floor when ``truncate``."""
    pos = simulate_positions(init, grid.steps, grid.dt, p)
    if truncate:
        below = np.flatnonzero(pos[:, 2] < p.floor_height)
        if len(below):
            pos = pos[: max(int(below[0]), 2)]
    t = grid.times[: len(pos)]
    return Trajectory(traj_id, t, pos, split=split)


def simulate_positions(init: BallState, steps: int, dt: float, p: PhysicsParams) -> np.ndarray:
    out = np.empty((steps, 3))
    s = init
    out[0] = s.position
    for i in range(1, steps):
        s = integrate_step(s, dt, p)
        out[i] = s.position
    return out


def synth_dataset(
    n_train: int,
    n_test: int = 0,
    launch: LaunchDistribution | None = None,
    grid: TimeGrid | None = None,
    p: PhysicsParams | None = None,
    noise_std: float = 0.01,
    seed: int = 0,
) -> Dataset:
    """Simulated flights with i.i.d. Gaussian sensor noise; noise-free positions kept as ``truth``.

    Trajectory ``i`` draws from its own generator seeded with ``(seed, i)`` so the
    result does not depend on generation order.
    """
    if n_train + n_test < 1:
        raise ValueError("count must be >= 1")
    launch = launch or LaunchDistribution()
    grid = grid or TimeGrid()
    p = p or PhysicsParams()
    trajs = []
    for i in range(n_train + n_test):
        rng = np.random.default_rng([seed, i])
        clean = simulate(launch.draw(rng), grid, p, traj_id=i)
        noisy = clean.pos + noise_std * rng.standard_normal(clean.pos.shape)
        split = "train" if i < n_train else "test"
        trajs.append(Trajectory(i, clean.t, noisy, split=split, truth=clean.pos))
    return Dataset(trajs)


# ---------------------------------------------------------------- baseline


def _poly_fit(m: MaskedTrajectory, n: int, k: int, grid: TimeGrid):
    idx = np.flatnonzero(m.mask[:n])
    if len(idx) < k + 1:
        raise DataError("underdetermined")
    t0 = idx[0] * grid.dt
    tau = idx * grid.dt - t0
    design = np.vander(tau, k + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(design, m.values[idx], rcond=None)
    return int(idx[0]), coef


def fit_initial_state(m: MaskedTrajectory, n: int = 30, k: int = 2, grid: TimeGrid | None = None) -> BallState:
    """Least-squares polynomial per coordinate over the observed steps among the first ``n``.

    Returns position and velocity at the first observed sample.
    """
    if k < 1:
        raise ValueError("degree must be >= 1 to estimate a velocity")
    grid = grid or TimeGrid(steps=m.steps)
    j0, coef = _poly_fit(m, n, k, grid)
    return BallState(coef[0], coef[1], grid.origin + j0 * grid.dt)


def physics_predict(prefix: MaskedTrajectory, grid: TimeGrid | None = None, p: PhysicsParams | None = None,
                    n: int = 30, k: int = 2) -> np.ndarray:
    """Full-grid prediction: polynomial launch estimate then forward integration.

    Steps before the first observation are filled from the fitted polynomial.
    """
    grid = grid or TimeGrid(steps=prefix.steps)
    p = p or PhysicsParams()
    j0, coef = _poly_fit(prefix, n, k, grid)
    out = np.empty((grid.steps, 3))
    if j0 > 0:
        tau = (np.arange(j0) - j0) * grid.dt
        out[:j0] = np.vander(tau, k + 1, increasing=True) @ coef
    out[j0:] = simulate_positions(BallState(coef[0], coef[1]), grid.steps - j0, grid.dt, p)
    return out
