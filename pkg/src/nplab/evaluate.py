"""Metrics against the exact GP reference and simple baselines.

KL divergences are reported oracle-first, KL(reference || model), in nats
per target point, with each side's observation noise folded into its
covariance.  ``mode="diagonal"`` measures distance from the exact marginal
(mean + variance) reference that mean-field models target; ``mode="full"``
measures distance from the exact joint, so for a mean-field model it
additionally pays the posterior's total correlation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import gp
from .data import DataProcess, Task
from .models import (
    FullCovGaussianPrediction,
    LowRankGaussianPrediction,
    predict_loglik,
)

__all__ = [
    "MetricReport", "kl_to_oracle", "loglik_metric", "trivial_baseline",
    "equivariance_report", "kl_metric", "oracle_posterior", "write_reports",
    "STD_FLOOR",
]

STD_FLOOR = 1e-6


@dataclass
class MetricReport:
    process: str
    split: str
    model: str
    metric: str  # "kl_per_target" or "loglik_per_target"
    value: float
    ci95: float
    n_tasks: int

    def row(self):
        return [self.process, self.split, self.model, self.metric,
                repr(self.value), repr(self.ci95), self.n_tasks]


def write_reports(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["process", "split", "model", "metric", "value", "ci95", "n_tasks"])
        for report in reports:
            writer.writerow(report.row())


def _mean_ci(values) -> tuple[float, float]:
    values = np.asarray(values, float)
    mu = float(values.mean())
    if values.size < 2:
        return mu, 0.0
    return mu, 1.96 * float(values.std(ddof=1)) / math.sqrt(values.size)


def _as_joint(pred) -> gp.GaussianJoint:
    if isinstance(pred, gp.GaussianJoint):
        return pred
    if isinstance(pred, gp.MeanFieldPrediction):
        return pred.as_joint()
    if isinstance(pred, (LowRankGaussianPrediction, FullCovGaussianPrediction)):
        return pred.as_joint()
    raise TypeError(f"cannot interpret {type(pred).__name__} as a Gaussian joint")


def kl_to_oracle(pred, oracle: gp.GaussianJoint, mode: str = "diagonal",
                 noiseless: bool = False) -> float:
    """KL(reference || prediction) / N_t in nats.

    mode="diagonal" replaces the reference joint by its marginals, the target
    of mean-field models; mode="full" keeps the exact joint (a mean-field
    prediction is densified as an independent Gaussian, so the result
    includes the dependency gap).  `noiseless` drops the observation noise
    from both sides for an epistemic-only comparison.
    """
    n = len(oracle)
    if n == 0:
        return 0.0
    if mode == "diagonal":
        ref = gp.diagonal_of(oracle)
        if noiseless:
            ref = gp.MeanFieldPrediction(ref.mean, ref.var, 0.0)
        if isinstance(pred, gp.MeanFieldPrediction):
            q = gp.MeanFieldPrediction(pred.mean, pred.var, 0.0 if noiseless else pred.noise_var)
            return gp.diagonal_kl(ref, q) / n
        return gp.gaussian_kl(ref.as_joint(), _strip_noise(_as_joint(pred), noiseless)) / n
    if mode == "full":
        p = _strip_noise(oracle, noiseless)
        q = _strip_noise(_as_joint(pred), noiseless)
        return gp.gaussian_kl(p, q) / n
    raise ValueError(f"unknown mode {mode!r}; expected 'diagonal' or 'full'")


def _strip_noise(joint: gp.GaussianJoint, noiseless: bool) -> gp.GaussianJoint:
    if not noiseless:
        return joint
    return gp.GaussianJoint(joint.mean, joint.cov, 0.0)


def oracle_posterior(proc: DataProcess, task: Task) -> gp.GaussianJoint:
    """Exact posterior joint at the task's targets under the data process."""
    if not proc.is_gaussian:
        raise ValueError(f"{proc.name} has no Gaussian reference")
    return gp.posterior(proc.kernel(), task.x_c, task.y_c, task.x_t, proc.noise_var)


def kl_metric(model, proc: DataProcess, tasks, mode: str = "diagonal",
              model_name: str | None = None, split_name: str = "int") -> MetricReport:
    """Mean per-target KL from the reference over tasks, with 95% CI."""
    preds = model.predict_tasks(tasks) if hasattr(model, "predict_tasks") else [
        model(t.x_c, t.y_c, t.x_t) for t in tasks
    ]
    values = [kl_to_oracle(pred, oracle_posterior(proc, task), mode)
              for pred, task in zip(preds, tasks)]
    value, ci = _mean_ci(values)
    name = model_name or getattr(model, "variant", type(model).__name__)
    return MetricReport(proc.name, split_name, name, "kl_per_target", value, ci, len(tasks))


def loglik_metric(model, tasks, process_name: str = "", model_name: str | None = None,
                  split_name: str = "int") -> MetricReport:
    """Mean per-target log density over tasks, with 95% CI."""
    if hasattr(model, "task_logliks"):
        values = model.task_logliks(tasks) / np.array([t.n_target for t in tasks], float)
    else:
        values = [predict_loglik(model(t.x_c, t.y_c, t.x_t), t.y_t) / t.n_target for t in tasks]
    value, ci = _mean_ci(values)
    name = model_name or getattr(model, "variant", type(model).__name__)
    return MetricReport(process_name, split_name, name, "loglik_per_target", value, ci, len(tasks))


def trivial_baseline(tasks, process_name: str = "", split_name: str = "int") -> MetricReport:
    """Score a single Gaussian fitted to the pooled target values."""
    pooled = np.concatenate([t.y_t for t in tasks])
    if pooled.size < 2:
        raise ValueError("need at least two target values to fit the baseline")
    mu = float(pooled.mean())
    std = max(float(pooled.std()), STD_FLOOR)
    var = std * std
    values = []
    for t in tasks:
        ll = -0.5 * np.sum(np.log(2.0 * np.pi * var) + (t.y_t - mu) ** 2 / var)
        values.append(ll / t.n_target)
    value, ci = _mean_ci(values)
    return MetricReport(process_name, split_name, "trivial", "loglik_per_target", value, ci, len(tasks))


def equivariance_report(model, taus, tasks) -> dict[float, float]:
    """Max |prediction shift mismatch| per translation, over means and variances.

    For each tau, every task is translated (context and targets) and the
    prediction is compared elementwise to the untranslated one.
    """
    out = {}
    for tau in taus:
        worst = 0.0
        for task in tasks:
            base = model.predict(task.x_c, task.y_c, task.x_t)
            shifted = model.predict(task.x_c + tau, task.y_c, task.x_t + tau)
            worst = max(
                worst,
                float(np.max(np.abs(np.asarray(shifted.mean) - np.asarray(base.mean)), initial=0.0)),
                float(np.max(np.abs(_variances(shifted) - _variances(base)), initial=0.0)),
            )
        out[float(tau)] = worst
    return out


def _variances(pred) -> np.ndarray:
    if isinstance(pred, gp.MeanFieldPrediction):
        return pred.var + pred.noise_var
    joint = _as_joint(pred)
    return np.diag(joint.cov) + joint.noise_var
