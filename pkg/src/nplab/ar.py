"""Autoregressive rollout of mean-field prediction maps.

A prediction map here is any callable ``(x_c, y_c, x_t) -> MeanFieldPrediction``:
a trained mean-field model's ``predict`` or the exact marginal map from the
GP reference.  Rollout samples one target at a time from the noisy marginal
and feeds the sampled (noisy) value back as context.  The chained one-point
log densities define the rollout log-likelihood; for the exact GP marginal
map the chain reproduces the joint density for any ordering, while for a
trained model different orderings generally give different values.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["ar_sample", "ar_loglik", "recover_smooth"]


def _step_marginal(pmap, x_c, y_c, x):
    pred = pmap(x_c, y_c, np.array([x]))
    return float(pred.mean[0]), float(pred.var[0] + pred.noise_var)


def ar_sample(pmap, x_c, y_c, x_t, rng) -> np.ndarray:
    """One rollout sample at `x_t`, visiting the targets in a fresh random order.

    Each step draws from the noisy one-point marginal given the context so
    far and appends the drawn value to the context.  The returned vector is
    aligned with the input target order.  Costs exactly len(x_t) forward
    passes.
    """
    x_c = np.asarray(x_c, float)
    y_c = np.asarray(y_c, float)
    x_t = np.asarray(x_t, float)
    order = rng.permutation(x_t.shape[0])
    xs = list(x_c)
    ys = list(y_c)
    out = np.empty(x_t.shape[0])
    for idx in order:
        mean, svar = _step_marginal(pmap, np.array(xs), np.array(ys), x_t[idx])
        value = mean + math.sqrt(svar) * rng.standard_normal()
        out[idx] = value
        xs.append(x_t[idx])
        ys.append(value)
    return out


def ar_loglik(pmap, x_c, y_c, x_t, y_t, ordering) -> float:
    """Chained log density of `y_t` when targets are visited in `ordering`.

    sum_n log N(y_n; m_n, v_n + noise) where the n-th marginal conditions on
    the context plus all previously visited target pairs.
    """
    x_c = np.asarray(x_c, float)
    y_c = np.asarray(y_c, float)
    x_t = np.asarray(x_t, float)
    y_t = np.asarray(y_t, float)
    ordering = np.asarray(ordering, int)
    if sorted(ordering.tolist()) != list(range(x_t.shape[0])):
        raise ValueError("ordering must be a permutation of the target indices")
    xs = list(x_c)
    ys = list(y_c)
    total = 0.0
    for idx in ordering:
        mean, svar = _step_marginal(pmap, np.array(xs), np.array(ys), x_t[idx])
        total += -0.5 * (math.log(2.0 * math.pi * svar) + (y_t[idx] - mean) ** 2 / svar)
        xs.append(x_t[idx])
        ys.append(y_t[idx])
    return total


def recover_smooth(pmap, x_sample, y_sample, x_query) -> np.ndarray:
    """De-noise a (rollout) sample: the map's posterior mean given the sample.

    Treats the noisy sample as a context set and returns the predicted mean
    at `x_query`, which approximates the smooth component when the sample is
    dense relative to the process length scale.
    """
    pred = pmap(np.asarray(x_sample, float), np.asarray(y_sample, float),
                np.asarray(x_query, float))
    return np.asarray(pred.mean, float)
