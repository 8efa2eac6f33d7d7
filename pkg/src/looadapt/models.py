"""Sigmoidal classifier models and their derivative structure.

A model evaluates the mean function mu(theta, x) behind the outcome
probability sigma(mu), together with grad_mu and the spectral form of the
Hessian of mu, which is what the transformation Jacobians consume. Two
concrete families are provided: linear (logistic regression) and a
one-hidden-layer ReLU network. Batched variants over draw matrices back the
importance-sampling engine.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DimensionError, DomainError


def sigmoid(mu):
    """Logistic function 1 / (1 + exp(-mu)), stable over the float range."""
    return expit(mu)


def log_sigmoid(mu):
    """log sigma(mu) without underflow for very negative mu."""
    return -np.logaddexp(0.0, -np.asarray(mu, dtype=float))


def sigmoid_slope(mu):
    """sigma(mu) * (1 - sigma(mu)) computed as sigma(mu) * sigma(-mu).

    The product form stays positive far beyond the point where
    1 - sigma(mu) would round to zero.
    """
    mu = np.asarray(mu, dtype=float)
    return expit(mu) * expit(-mu)


def bernoulli_log_likelihood(mu, y):
    """log [ sigma(mu)^y (1 - sigma(mu))^(1-y) ]  =  log sigma((2y - 1) mu)."""
    sign = 2.0 * np.asarray(y, dtype=float) - 1.0
    return log_sigmoid(sign * np.asarray(mu, dtype=float))


@dataclass(frozen=True)
class GaussianPrior:
    """Independent zero-mean Gaussian prior with per-parameter scales."""

    sd: np.ndarray

    def __post_init__(self):
        sd = np.array(self.sd, dtype=float)
        if sd.ndim != 1 or sd.size < 1:
            raise DimensionError("prior sd must be a 1-d vector")
        if not np.all(np.isfinite(sd)) or np.any(sd <= 0):
            raise DomainError("prior sds must be finite and positive")
        sd.flags.writeable = False
        object.__setattr__(self, "sd", sd)

    @classmethod
    def isotropic(cls, param_dim: int, sd: float) -> "GaussianPrior":
        return cls(sd=np.full(param_dim, float(sd)))

    @property
    def param_dim(self) -> int:
        return self.sd.size

    def log_density(self, theta) -> float:
        return float(self.log_density_batch(np.asarray(theta, dtype=float)[None, :])[0])

    def grad(self, theta) -> np.ndarray:
        return -np.asarray(theta, dtype=float) / self.sd**2

    def log_density_batch(self, values) -> np.ndarray:
        z = values / self.sd
        const = -0.5 * values.shape[1] * math.log(2.0 * math.pi) - np.log(self.sd).sum()
        return const - 0.5 * np.sum(z**2, axis=1)

    def grad_batch(self, values) -> np.ndarray:
        return -values / self.sd**2


class SigmoidalModel(abc.ABC):
    """Evaluator bundle for a classifier with outcome probability sigma(mu)."""

    @property
    @abc.abstractmethod
    def param_dim(self) -> int:
        """Length P of a flattened parameter vector."""

    @property
    @abc.abstractmethod
    def num_features(self) -> int:
        """Length p of a feature vector."""

    @abc.abstractmethod
    def mu(self, theta, x) -> float:
        """Mean function at a single parameter vector and observation."""

    @abc.abstractmethod
    def grad_mu(self, theta, x) -> np.ndarray:
        """Gradient of mu with respect to theta, length P."""

    @abc.abstractmethod
    def hessian_spectrum(self, theta, x) -> list[tuple[float, np.ndarray]]:
        """Non-zero (eigenvalue, unit eigenvector) pairs of the Hessian of mu.

        An empty list means the Hessian vanishes identically; downstream
        determinant products treat missing eigenvalues as factor 1.
        """

    @abc.abstractmethod
    def mu_batch(self, values, features) -> np.ndarray:
        """mu for every (draw, observation) pair: (S, P) x (n, p) -> (S, n)."""

    @abc.abstractmethod
    def grad_mu_batch(self, values, x) -> np.ndarray:
        """grad_mu for every draw at one observation: (S, P) x (p,) -> (S, P)."""


@dataclass(frozen=True)
class LogisticModel(SigmoidalModel):
    """Linear mean function mu = x . beta; the Hessian of mu vanishes."""

    p: int

    def __post_init__(self):
        if self.p < 1:
            raise DomainError("logistic model needs at least one feature")

    @property
    def param_dim(self) -> int:
        return self.p

    @property
    def num_features(self) -> int:
        return self.p

    def mu(self, theta, x) -> float:
        return float(np.dot(np.asarray(x, dtype=float), np.asarray(theta, dtype=float)))

    def grad_mu(self, theta, x) -> np.ndarray:
        return np.array(x, dtype=float)

    def hessian_spectrum(self, theta, x) -> list[tuple[float, np.ndarray]]:
        return []

    def mu_batch(self, values, features) -> np.ndarray:
        return values @ np.asarray(features, dtype=float).T

    def grad_mu_batch(self, values, x) -> np.ndarray:
        return np.tile(np.asarray(x, dtype=float), (values.shape[0], 1))


@dataclass(frozen=True)
class ReluOneParams:
    """Unflattened one-hidden-layer parameters (W1, W2, b2)."""

    W1: np.ndarray  # (d, p)
    W2: np.ndarray  # (d,)
    b2: float


@dataclass(frozen=True)
class ReluOneModel(SigmoidalModel):
    """One-hidden-layer ReLU network: mu = W2 . relu(W1 x) + b2.

    Flattened parameter order is row-major W1, then W2, then b2, so that
    draws files interoperate across implementations. The first-layer bias is
    expected to be absorbed into a constant-1 feature column. The ReLU
    derivative at the kink is taken as 0, matching the activity mask z > 0.
    """

    d: int
    p: int

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise DomainError("relu1 model needs d >= 1 hidden units and p >= 1 features")

    @property
    def param_dim(self) -> int:
        return self.d * self.p + self.d + 1

    @property
    def num_features(self) -> int:
        return self.p

    def split(self, theta) -> ReluOneParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise DimensionError(f"expected parameter vector of length {self.param_dim}")
        d, p = self.d, self.p
        return ReluOneParams(
            W1=theta[: d * p].reshape(d, p),
            W2=theta[d * p : d * p + d],
            b2=float(theta[-1]),
        )

    def flatten(self, params: ReluOneParams) -> np.ndarray:
        return np.concatenate([params.W1.ravel(), params.W2, [params.b2]])

    def relu_forward(self, theta, x) -> tuple[float, np.ndarray, np.ndarray]:
        """Forward pass returning (mu, pre-activations z1, activity mask)."""
        params = self.split(theta)
        x = np.asarray(x, dtype=float)
        z1 = params.W1 @ x
        mask = (z1 > 0).astype(float)
        mu = float(params.W2 @ (z1 * mask) + params.b2)
        return mu, z1, mask

    def mu(self, theta, x) -> float:
        return self.relu_forward(theta, x)[0]

    def grad_mu(self, theta, x) -> np.ndarray:
        """Closed-form gradient in flattened order.

        d mu / d W1[k, j] = W2[k] * 1[z1_k > 0] * x_j
        d mu / d W2[k]    = relu(z1_k)
        d mu / d b2       = 1
        """
        params = self.split(theta)
        x = np.asarray(x, dtype=float)
        z1 = params.W1 @ x
        mask = (z1 > 0).astype(float)
        grad = np.empty(self.param_dim)
        grad[: self.d * self.p] = ((params.W2 * mask)[:, None] * x[None, :]).ravel()
        grad[self.d * self.p : self.d * self.p + self.d] = z1 * mask
        grad[-1] = 1.0
        return grad

    def hessian_spectrum(self, theta, x) -> list[tuple[float, np.ndarray]]:
        """Eigenpairs of the Hessian of mu.

        Each active unit k contributes the pair lambda = +-|x| with unit
        eigenvectors supported on (W1 row k, W2 component k); inactive units
        and x = 0 contribute nothing.
        """
        params = self.split(theta)
        x = np.asarray(x, dtype=float)
        xnorm = float(np.linalg.norm(x))
        z1 = params.W1 @ x
        pairs: list[tuple[float, np.ndarray]] = []
        if xnorm == 0.0:
            return pairs
        d, p = self.d, self.p
        for k in range(d):
            if z1[k] <= 0:
                continue
            for sign in (+1.0, -1.0):
                vec = np.zeros(self.param_dim)
                vec[k * p : (k + 1) * p] = x / (math.sqrt(2.0) * xnorm)
                vec[d * p + k] = sign / math.sqrt(2.0)
                pairs.append((sign * xnorm, vec))
        return pairs

    def _split_batch(self, values):
        d, p = self.d, self.p
        return (
            values[:, : d * p].reshape(values.shape[0], d, p),
            values[:, d * p : d * p + d],
            values[:, -1],
        )

    def forward_batch(self, values, x):
        """Per-draw (mu, z1, mask) at one observation, vectorized over draws."""
        w1, w2, b2 = self._split_batch(values)
        z1 = np.einsum("sdp,p->sd", w1, np.asarray(x, dtype=float))
        mask = (z1 > 0).astype(float)
        mu = np.einsum("sd,sd->s", w2, z1 * mask) + b2
        return mu, z1, mask

    def mu_batch(self, values, features) -> np.ndarray:
        w1, w2, b2 = self._split_batch(values)
        z1 = np.einsum("sdp,np->snd", w1, np.asarray(features, dtype=float))
        act = np.maximum(z1, 0.0)
        return np.einsum("snd,sd->sn", act, w2) + b2[:, None]

    def grad_mu_batch(self, values, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        w1, w2, b2 = self._split_batch(values)
        z1 = np.einsum("sdp,p->sd", w1, x)
        mask = (z1 > 0).astype(float)
        s = values.shape[0]
        grad = np.empty((s, self.param_dim))
        grad[:, : self.d * self.p] = ((w2 * mask)[:, :, None] * x[None, None, :]).reshape(s, -1)
        grad[:, self.d * self.p : self.d * self.p + self.d] = z1 * mask
        grad[:, -1] = 1.0
        return grad


def log_likelihood(model: SigmoidalModel, theta, x, y) -> float:
    """Bernoulli log likelihood of one observation at one parameter vector."""
    return float(bernoulli_log_likelihood(model.mu(theta, x), y))


def grad_log_likelihood(model: SigmoidalModel, theta, x, y) -> np.ndarray:
    """Chain rule: [y (1 - sigma(mu)) - (1 - y) sigma(mu)] * grad_mu."""
    mu = model.mu(theta, x)
    return (float(y) - sigmoid(mu)) * model.grad_mu(theta, x)


def log_posterior_unnorm(model: SigmoidalModel, theta, dataset: Dataset, prior: GaussianPrior) -> float:
    """log prior + sum of log likelihoods; the normalization constant is dropped.

    Differences of two such values exponentiate to exact posterior-density
    ratios.
    """
    theta = np.asarray(theta, dtype=float)
    mu = model.mu_batch(theta[None, :], dataset.features)[0]
    return float(prior.log_density(theta) + bernoulli_log_likelihood(mu, dataset.labels).sum())


def grad_log_posterior(model: SigmoidalModel, theta, dataset: Dataset, prior: GaussianPrior) -> np.ndarray:
    """Gradient of the unnormalized log posterior (prior plus all data terms)."""
    theta = np.asarray(theta, dtype=float)
    grad = prior.grad(theta).copy()
    for i in range(dataset.n):
        grad += grad_log_likelihood(model, theta, dataset.features[i], dataset.labels[i])
    return grad


@dataclass(frozen=True)
class PosteriorEvaluation:
    """Per-draw posterior quantities shared by weights and transformations.

    ``mu`` and ``log_lik`` are (S, n); ``log_post`` is the unnormalized log
    posterior per draw; ``grad_log_post`` is its gradient (None when not
    requested).
    """

    mu: np.ndarray
    log_lik: np.ndarray
    log_post: np.ndarray
    grad_log_post: np.ndarray | None

    @property
    def log_ref(self) -> float:
        """Scale anchor: the largest log posterior over the draw set."""
        return float(self.log_post.max())


def evaluate_posterior(
    model: SigmoidalModel,
    values: np.ndarray,
    dataset: Dataset,
    prior: GaussianPrior,
    with_grad: bool = True,
) -> PosteriorEvaluation:
    """Evaluate mu, log likelihood, log posterior (and optionally its gradient)
    for a whole draw matrix in one pass."""
    mu = model.mu_batch(values, dataset.features)
    log_lik = bernoulli_log_likelihood(mu, dataset.labels[None, :])
    log_post = prior.log_density_batch(values) + log_lik.sum(axis=1)
    grad = None
    if with_grad:
        grad = prior.grad_batch(values).copy()
        resid = dataset.labels[None, :] - sigmoid(mu)
        for i in range(dataset.n):
            grad += resid[:, i, None] * model.grad_mu_batch(values, dataset.features[i])
    return PosteriorEvaluation(mu=mu, log_lik=log_lik, log_post=log_post, grad_log_post=grad)
