"""Shared toy instances and reference helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from looadapt import (
    Dataset,
    GaussianPrior,
    LogisticModel,
    PosteriorDraws,
    ReluOneModel,
    build_grid_posterior,
)


def make_logistic_toy(seed=42, n=6, p=3, prior_sd=2.0, num_draws=50, draw_scale=1.0):
    """Small logistic instance with seeded draws for derivative checks."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    probs = 1.0 / (1.0 + np.exp(-(features @ beta)))
    labels = (rng.uniform(size=n) < probs).astype(int)
    if labels.min() == labels.max():  # force both classes for metric tests
        labels[0] = 1 - labels[0]
    dataset = Dataset(features=features, labels=labels, feature_names=tuple(f"x{j}" for j in range(p)))
    model = LogisticModel(p=p)
    prior = GaussianPrior.isotropic(p, prior_sd)
    draws = PosteriorDraws(
        values=draw_scale * rng.normal(size=(num_draws, p)),
        param_names=tuple(f"b{j}" for j in range(p)),
    )
    return model, dataset, prior, draws


def make_relu_toy(seed=3, n=6, d=2, p=3, prior_sd=1.5, num_draws=40, kink_margin=1e-3):
    """Small one-hidden-layer instance; draws are resampled away from kinks."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, p))
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    dataset = Dataset(features=features, labels=labels, feature_names=tuple(f"x{j}" for j in range(p)))
    model = ReluOneModel(d=d, p=p)
    prior = GaussianPrior.isotropic(model.param_dim, prior_sd)
    values = np.empty((num_draws, model.param_dim))
    count = 0
    while count < num_draws:
        theta = rng.normal(size=model.param_dim)
        margins = [abs(model.relu_forward(theta, x)[1]).min() for x in features]
        if min(margins) > kink_margin:
            values[count] = theta
            count += 1
    draws = PosteriorDraws(values=values, param_names=tuple(f"w{j}" for j in range(model.param_dim)))
    return model, dataset, prior, draws


def make_grid_instance_1(seed=101):
    """Fixed 1-parameter logistic grid instance (n = 4)."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(4, 1))
    labels = np.array([1, 0, 1, 0])
    dataset = Dataset(features=features, labels=labels, feature_names=("x0",))
    model = LogisticModel(p=1)
    prior = GaussianPrior.isotropic(1, 2.0)
    grid = build_grid_posterior(model, dataset, prior, bounds=[(-12.0, 12.0)], nodes_per_dim=201)
    return model, dataset, prior, grid


def make_grid_instance_2(seed=202, nodes_per_dim=81):
    """Fixed 2-parameter logistic grid instance (n = 8)."""
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(8, 2))
    beta = np.array([1.0, -1.5])
    probs = 1.0 / (1.0 + np.exp(-(features @ beta)))
    labels = (rng.uniform(size=8) < probs).astype(int)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    dataset = Dataset(features=features, labels=labels, feature_names=("x0", "x1"))
    model = LogisticModel(p=2)
    prior = GaussianPrior.isotropic(2, 1.5)
    grid = build_grid_posterior(model, dataset, prior, bounds=[(-9.0, 9.0), (-9.0, 9.0)], nodes_per_dim=nodes_per_dim)
    return model, dataset, prior, grid


def gpd_inverse_cdf_sample(rng, k, sigma, size):
    """Reference GPD sampler: x = sigma * ((1 - u)^(-k) - 1) / k."""
    u = rng.uniform(size=size)
    if k == 0.0:
        return -sigma * np.log1p(-u)
    return sigma * ((1.0 - u) ** (-k) - 1.0) / k


def pair_count_auroc(scores, labels):
    """Exhaustive pair-counting AUROC with ties worth one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (pos.size * neg.size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
