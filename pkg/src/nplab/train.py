"""Objective, optimizer, and the training/selection loop.

Training minimises the negative per-target-normalised log density, averaged
over a batch of tasks.  After every epoch the model is scored on a fixed
held-out task set with a lower-confidence-bound objective, and the best
scoring parameters are the ones returned.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as dat
from .models import Model, batch_loglik

__all__ = [
    "TrainConfig", "AdamState", "adam_step", "np_objective",
    "crossval_score", "train_loop", "TrainHistory", "seed_rng",
]

# Stream tags for deriving independent generators from one 64-bit seed.
STREAM_TRAIN = 1
STREAM_CROSSVAL = 2
STREAM_EVAL = 3
STREAM_SIM = 4

# Covariance regularisation for the Gaussian family: heavier during the
# first epoch, then dropped to a numerical floor.
WARMUP_COV_JITTER = 1e-4
BASE_COV_JITTER = 1e-8


def seed_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    """Generator for (seed, stream, counter); documented, reproducible scheme."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                                        spawn_key=(stream, counter)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_tasks: int = 16
    tasks_per_epoch: int = 2**10
    epochs: int = 20
    crossval_tasks: int = 2**9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_tasks", "tasks_per_epoch", "crossval_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def np_objective(model: Model, tasks, cov_jitter: float = BASE_COV_JITTER) -> ad.Tensor:
    """-(1/M) sum_m loglik_m / N_t,m over a batch of tasks (differentiable)."""
    if not tasks:
        raise ValueError("batch must be non-empty")
    per_task = []
    for idxs in _groups_by_target_count(tasks):
        batch = [tasks[i] for i in idxs]
        y_t = np.stack([t.y_t for t in batch])
        ll = batch_loglik(model.batch_forward(batch), y_t, cov_jitter)
        per_task.append(ad.div(ll, float(y_t.shape[1])))
    total = per_task[0] if len(per_task) == 1 else ad.concat(per_task, axis=0)
    return ad.neg(ad.tmean(total))


def _groups_by_target_count(tasks):
    by_nt: dict[int, list[int]] = {}
    for i, t in enumerate(tasks):
        by_nt.setdefault(t.n_target, []).append(i)
    return list(by_nt.values())


class AdamState:
    """First/second moment accumulators for a fixed parameter list."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, grads: dict, lr: float) -> None:
    """In-place update with bias correction; `grads` maps tensor id to array."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(state.params):
        g = grads.get(p._id)
        if g is None:
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def crossval_score(logliks) -> float:
    """Lower confidence bound mu - 1.96 sigma / sqrt(n); higher is better."""
    vals = np.asarray(logliks, float)
    if vals.size < 2:
        raise ValueError("need at least two values")
    mu = float(vals.mean())
    sigma = float(vals.std(ddof=1))
    return mu - 1.96 * sigma / math.sqrt(vals.size)


@dataclass
class TrainHistory:
    epochs: list
    best_epoch: int
    best_score: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "cv_score"])
            for epoch, loss, score in self.epochs:
                writer.writerow([epoch, repr(loss), repr(score)])


def _make_tasks(proc, split, rng, count):
    return [dat.sample_task(proc, split, rng) for _ in range(count)]


def train_loop(model: Model, proc: dat.DataProcess, config: TrainConfig,
               split: dat.SplitKind | None = None, log=None):
    """Train `model` on freshly sampled tasks; keep the best-scoring parameters.

    Per epoch: `tasks_per_epoch` new tasks in batches of `batch_tasks`, Adam
    updates, then the confidence-bound score on a task set that is generated
    once from the seed and reused every epoch.  Returns (best_params, history)
    where best_params maps parameter names to arrays.
    """
    split = split or dat.SPLITS["int"]
    gaussian_family = model.variant in ("gnp", "convgnp", "fullconvgnp")
    cv_rng = seed_rng(config.seed, STREAM_CROSSVAL)
    cv_tasks = _make_tasks(proc, split, cv_rng, config.crossval_tasks)
    cv_targets = np.array([t.n_target for t in cv_tasks], float)

    state = AdamState(model.parameters())
    named = model.named_parameters()
    best = {name: t.data.copy() for name, t in named.items()}
    best_score = -np.inf
    best_epoch = -1
    rows = []
    batches = max(config.tasks_per_epoch // config.batch_tasks, 1)

    for epoch in range(config.epochs):
        jitter = WARMUP_COV_JITTER if (gaussian_family and epoch == 0) else BASE_COV_JITTER
        task_rng = seed_rng(config.seed, STREAM_TRAIN, epoch)
        epoch_loss = 0.0
        for b in range(batches):
            tasks = _make_tasks(proc, split, task_rng, config.batch_tasks)
            loss = np_objective(model, tasks, cov_jitter=jitter)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = ad.backward(loss, model.parameters())
            for p in model.parameters():
                p.grad = None
            adam_step(state, grads, config.learning_rate)
            epoch_loss += value
        epoch_loss /= batches

        # Selection always scores at the numerical-floor jitter so epoch
        # scores are comparable across the warm-up boundary.
        logliks = model.task_logliks(cv_tasks, cov_jitter=BASE_COV_JITTER) / cv_targets
        score = crossval_score(logliks)
        rows.append((epoch, epoch_loss, score))
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best = {name: t.data.copy() for name, t in named.items()}
        if log is not None:
            log(f"epoch={epoch} train_loss={epoch_loss:.4f} cv_score={score:.4f}")

    if best_epoch >= 0:
        model.load_arrays(best)
    return best, TrainHistory(rows, best_epoch, best_score)
