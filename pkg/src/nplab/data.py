"""Synthetic meta-learning data: function samplers, splits, and the
stochastic predator-prey simulator.

A :class:`Task` is a context set plus a target set.  GP-backed processes add
observation noise of variance 0.05; the sawtooth carries none.  The
predator-prey simulator integrates a pair of coupled SDEs and its
trajectories are cut into interpolation / forecasting / reconstruction
tasks.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import gp

__all__ = [
    "Task", "DataProcess", "SplitKind",
    "GP_NOISE_VAR", "sample_task", "sawtooth_eval",
    "LVParams", "sample_lv_params", "Trajectory", "lv_simulate", "lv_make_tasks",
    "task_to_csv", "task_from_csv",
    "PROCESSES", "SPLITS",
]

GP_NOISE_VAR = 0.05

_TRAIN_RANGE = (-2.0, 2.0)
_OOID_RANGE = (2.0, 6.0)


@dataclass
class Task:
    """Context set (x_c, y_c) and target set (x_t, y_t).

    `channel` arrays tag each point with an output stream (always 0 for the
    synthetic processes; 0/1 for the two predator-prey species).
    """

    x_c: np.ndarray
    y_c: np.ndarray
    x_t: np.ndarray
    y_t: np.ndarray
    channel_c: np.ndarray | None = None
    channel_t: np.ndarray | None = None

    def __post_init__(self):
        self.x_c = np.asarray(self.x_c, float)
        self.y_c = np.asarray(self.y_c, float)
        self.x_t = np.asarray(self.x_t, float)
        self.y_t = np.asarray(self.y_t, float)
        if self.x_c.shape != self.y_c.shape:
            raise ValueError(f"context sizes differ: {self.x_c.shape} vs {self.y_c.shape}")
        if self.x_t.shape != self.y_t.shape:
            raise ValueError(f"target sizes differ: {self.x_t.shape} vs {self.y_t.shape}")
        if self.x_t.shape[0] < 1:
            raise ValueError("a task needs at least one target point")
        for arr in (self.x_c, self.y_c, self.x_t, self.y_t):
            if not np.all(np.isfinite(arr)):
                raise ValueError("task values must be finite")
        if self.channel_c is None:
            self.channel_c = np.zeros(self.x_c.shape[0], dtype=int)
        if self.channel_t is None:
            self.channel_t = np.zeros(self.x_t.shape[0], dtype=int)
        self.channel_c = np.asarray(self.channel_c, int)
        self.channel_t = np.asarray(self.channel_t, int)

    @property
    def n_context(self) -> int:
        return self.x_c.shape[0]

    @property
    def n_target(self) -> int:
        return self.x_t.shape[0]


@dataclass(frozen=True)
class SplitKind:
    """Where context and target inputs live."""

    name: str
    context_range: tuple
    target_range: tuple


SPLITS = {
    "int": SplitKind("int", _TRAIN_RANGE, _TRAIN_RANGE),
    "ooid": SplitKind("ooid", _OOID_RANGE, _OOID_RANGE),
    "ext": SplitKind("ext", _TRAIN_RANGE, _OOID_RANGE),
}


@dataclass(frozen=True)
class DataProcess:
    """One of the five synthetic generators, with its scalar-input parameters."""

    name: str
    lengthscale: float = 0.25
    decay_lengthscale: float = 0.5
    periodic_lengthscale: float = 1.0
    period: float = 0.25
    freq_range: tuple = (2.0, 4.0)

    def kernel(self) -> gp.Kernel:
        if self.name == "eq":
            return gp.EQ(self.lengthscale)
        if self.name == "matern52":
            return gp.Matern52(self.lengthscale)
        if self.name == "weakly-periodic":
            return gp.WeaklyPeriodic(self.decay_lengthscale, self.periodic_lengthscale, self.period)
        raise ValueError(f"{self.name} has no Gaussian-process kernel")

    @property
    def is_gaussian(self) -> bool:
        return self.name in ("eq", "matern52", "weakly-periodic")

    @property
    def noise_var(self) -> float:
        return GP_NOISE_VAR if self.is_gaussian else 0.0

    @property
    def max_context(self) -> int:
        return 30 if self.is_gaussian else 75

    @property
    def n_target(self) -> int:
        return 50 if self.is_gaussian else 100


PROCESSES = {
    name: DataProcess(name) for name in ("eq", "matern52", "weakly-periodic", "sawtooth", "mixture")
}

_MIXTURE_COMPONENTS = ("eq", "matern52", "weakly-periodic", "sawtooth")


def mixture_component(rng) -> str:
    """The equal-probability component pick used for each mixture task."""
    return _MIXTURE_COMPONENTS[rng.integers(0, len(_MIXTURE_COMPONENTS))]


def sawtooth_eval(freq: float, direction: int, phase: float, x) -> np.ndarray:
    """y = (freq * direction * x + phase) mod 1."""
    return np.mod(freq * direction * np.asarray(x, float) + phase, 1.0)


def _sample_outputs(proc: DataProcess, x: np.ndarray, rng) -> np.ndarray:
    if proc.name == "mixture":
        return _sample_outputs(PROCESSES[mixture_component(rng)], x, rng)
    if proc.is_gaussian:
        return gp.sample_prior(proc.kernel(), x, GP_NOISE_VAR, rng)
    freq = rng.uniform(*proc.freq_range)
    direction = 1 if rng.uniform() < 0.5 else -1
    phase = rng.uniform(0.0, 1.0)
    return sawtooth_eval(freq, direction, phase, x)


def sample_task(proc: DataProcess, split: SplitKind, rng, n_context: int | None = None) -> Task:
    """Draw one task: uniform inputs on the split's ranges, joint outputs.

    Context count is uniform on {0..30} for GP processes and {0..75} for
    sawtooth/mixture unless `n_context` pins it; target counts are fixed at
    50 and 100 respectively.
    """
    if n_context is None:
        n_context = int(rng.integers(0, proc.max_context + 1))
    n_target = proc.n_target
    x_c = rng.uniform(*split.context_range, size=n_context)
    x_t = rng.uniform(*split.target_range, size=n_target)
    y_all = _sample_outputs(proc, np.concatenate([x_c, x_t]), rng)
    return Task(x_c, y_all[:n_context], x_t, y_all[n_context:])


# -- stochastic predator-prey simulator ---------------------------------------


@dataclass(frozen=True)
class LVParams:
    """Parameters of the stochastic predator-prey equations."""

    x0: float
    y0: float
    alpha: float
    beta: float
    gamma: float
    delta: float
    nu: float = 1.0 / 6.0
    sigma: float = 1.0


def sample_lv_params(rng) -> LVParams:
    """Draw parameters and initial conditions from their sampling intervals."""
    return LVParams(
        x0=rng.uniform(5.0, 100.0),
        y0=rng.uniform(5.0, 100.0),
        alpha=rng.uniform(0.2, 0.8),
        beta=rng.uniform(0.04, 0.08),
        gamma=rng.uniform(0.8, 1.2),
        delta=rng.uniform(0.04, 0.08),
        nu=1.0 / 6.0,
        sigma=rng.uniform(0.5, 10.0),
    )


@dataclass
class Trajectory:
    t: np.ndarray
    prey: np.ndarray
    predator: np.ndarray


_LV_T0, _LV_BURN_END, _LV_T1 = -10.0, 0.0, 100.0
_LV_FLOOR = 1e-6


def lv_simulate(params: LVParams, dt: float = 0.01, rng=None) -> Trajectory:
    """Euler-Maruyama integration of the stochastic predator-prey equations.

    dX = (alpha X - beta Y X) dt + sigma X^nu dW1
    dY = (-gamma Y + delta Y X) dt + sigma Y^nu dW2

    Integrated on [-10, 100]; the burn-in up to t = 0 is discarded.  States
    are clamped at 1e-6 after every step, which together with the
    state-dependent noise keeps both populations positive.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if rng is None:
        rng = np.random.default_rng()
    n_steps = int(round((_LV_T1 - _LV_T0) / dt))
    sqrt_dt = math.sqrt(dt)
    # Pre-drawing the increments keeps the inner loop in plain floats.
    dw = rng.standard_normal((n_steps, 2)) * sqrt_dt
    x, y = params.x0, params.y0
    a, b, g, d, nu, s = (params.alpha, params.beta, params.gamma,
                         params.delta, params.nu, params.sigma)
    ts = np.empty(n_steps + 1)
    xs = np.empty(n_steps + 1)
    ys = np.empty(n_steps + 1)
    ts[0], xs[0], ys[0] = _LV_T0, x, y
    for i in range(n_steps):
        x_new = x + (a * x - b * y * x) * dt + s * (x ** nu) * dw[i, 0]
        y_new = y + (-g * y + d * y * x) * dt + s * (y ** nu) * dw[i, 1]
        x = x_new if x_new > _LV_FLOOR else _LV_FLOOR
        y = y_new if y_new > _LV_FLOOR else _LV_FLOOR
        if not (math.isfinite(x) and math.isfinite(y)):
            raise FloatingPointError(f"simulation diverged at step {i} (t={_LV_T0 + (i + 1) * dt:.3f})")
        ts[i + 1] = _LV_T0 + (i + 1) * dt
        xs[i + 1] = x
        ys[i + 1] = y
    keep = ts >= _LV_BURN_END
    return Trajectory(ts[keep], xs[keep], ys[keep])


LV_TASK_KINDS = ("interpolation", "forecasting", "reconstruction")


def _subsample_species(traj: Trajectory, rng):
    """Per species, keep 150..250 observation times drawn independently."""
    out = []
    for values in (traj.prey, traj.predator):
        count = int(rng.integers(150, 251))
        idx = np.sort(rng.choice(traj.t.shape[0], size=count, replace=False))
        out.append((traj.t[idx], values[idx]))
    return out


def lv_make_tasks(traj: Trajectory, kind: str, rng) -> Task:
    """Cut a trajectory into a task.

    interpolation: per species, 100 random points become targets.
    forecasting: a cut time ~ Unif[25, 75]; earlier points are context.
    reconstruction: one species gets the forecasting split, the other is
    entirely context.
    """
    if traj.t[0] > 0.0 or traj.t[-1] < 100.0 - 1e-9:
        raise ValueError("trajectory must cover [0, 100]")
    if kind not in LV_TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {LV_TASK_KINDS}")
    species = _subsample_species(traj, rng)

    def split_forecast(t, v, cut):
        before = t < cut
        return (t[before], v[before]), (t[~before], v[~before])

    ctx, tgt = [], []
    if kind == "interpolation":
        for ch, (t, v) in enumerate(species):
            tgt_idx = rng.choice(t.shape[0], size=100, replace=False)
            mask = np.zeros(t.shape[0], dtype=bool)
            mask[tgt_idx] = True
            ctx.append((t[~mask], v[~mask], ch))
            tgt.append((t[mask], v[mask], ch))
    elif kind == "forecasting":
        while True:
            cut = rng.uniform(25.0, 75.0)
            if all(np.any(t >= cut) for t, _ in species):
                break
        for ch, (t, v) in enumerate(species):
            (tc, vc), (tt, vt) = split_forecast(t, v, cut)
            ctx.append((tc, vc, ch))
            tgt.append((tt, vt, ch))
    else:
        chosen = int(rng.integers(0, 2))
        while True:
            cut = rng.uniform(25.0, 75.0)
            if np.any(species[chosen][0] >= cut):
                break
        for ch, (t, v) in enumerate(species):
            if ch == chosen:
                (tc, vc), (tt, vt) = split_forecast(t, v, cut)
                ctx.append((tc, vc, ch))
                tgt.append((tt, vt, ch))
            else:
                ctx.append((t, v, ch))

    def interleave(parts):
        if not parts:
            return np.zeros(0), np.zeros(0), np.zeros(0, dtype=int)
        t = np.concatenate([p[0] for p in parts])
        v = np.concatenate([p[1] for p in parts])
        ch = np.concatenate([np.full(p[0].shape[0], p[2], dtype=int) for p in parts])
        order = np.argsort(t, kind="stable")
        return t[order], v[order], ch[order]

    tc, vc, cc = interleave(ctx)
    tt, vt, ct = interleave(tgt)
    return Task(tc, vc, tt, vt, channel_c=cc, channel_t=ct)


# -- serialization -------------------------------------------------------------


def task_to_csv(task: Task) -> str:
    """Render a task as CSV: role, channel, x, y; context first, sorted by x."""
    buf = io.StringIO()
    buf.write("role,channel,x,y\n")
    for role, x, y, ch in (("c", task.x_c, task.y_c, task.channel_c),
                           ("t", task.x_t, task.y_t, task.channel_t)):
        order = np.lexsort((ch, y, x))
        for i in order:
            buf.write(f"{role},{int(ch[i])},{float(x[i])!r},{float(y[i])!r}\n")
    return buf.getvalue()


def task_from_csv(text: str) -> Task:
    rows = text.strip().splitlines()
    if not rows or rows[0] != "role,channel,x,y":
        raise ValueError("expected header 'role,channel,x,y'")
    cols = {"c": ([], [], []), "t": ([], [], [])}
    for row in rows[1:]:
        role, ch, x, y = row.split(",")
        cols[role][0].append(float(x))
        cols[role][1].append(float(y))
        cols[role][2].append(int(ch))
    return Task(cols["c"][0], cols["c"][1], cols["t"][0], cols["t"][1],
                channel_c=cols["c"][2], channel_t=cols["t"][2])
