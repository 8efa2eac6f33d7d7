"""Per-observation adaptation loop and leave-one-out summaries.

For each observation the engine builds inverse-likelihood importance
weights, smooths their tail and reads off the shape diagnostic k-hat. When
the diagnostic exceeds the configured threshold it walks the configured
(transform kind x step scale) grid, recomputing transformed weights until
one attempt brings k-hat under the threshold or the grid is exhausted, in
which case the best attempt is kept and the observation is flagged as
unreliable. The per-observation loops are independent and can run on a
thread pool; results are always assembled in observation order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import (
    Dataset,
    GRADIENT_KINDS,
    MarginalStats,
    PMM_KINDS,
    PosteriorDraws,
    RunConfig,
    marginal_stats,
)
from .errors import DomainError
from .gpd import GpdFit, WeightVector, pareto_smooth
from .metrics import auprc, auroc, pr_curve, roc_curve
from .models import (
    GaussianPrior,
    PosteriorEvaluation,
    SigmoidalModel,
    bernoulli_log_likelihood,
    evaluate_posterior,
    sigmoid,
)
from .transforms import TransformSpec, TransformedDraws, apply_transform


@dataclass(frozen=True)
class AttemptRecord:
    """Diagnostics for one (transform, step-scale) attempt."""

    spec: TransformSpec
    khat: float
    fittable: bool
    degenerate: bool
    flags: tuple[str, ...]
    h_used: float
    exact_jacobian: bool
    max_step_sd: float


@dataclass(frozen=True)
class ObservationResult:
    """Adaptation outcome and LOO quantities for a single observation.

    ``adapted`` is true exactly when ``final_khat`` is at or under the
    threshold; otherwise the reported quantities come from the best attempt
    (or the raw weights if those were best) and should be treated as
    unreliable.
    """

    index: int
    raw_khat: float
    adapted: bool
    winning_transform: TransformSpec | None
    final_khat: float
    final_weights: WeightVector
    loo_predictive_prob: float
    loo_log_predictive_density: float
    loo_predictive_prob_se: float
    loo_log_predictive_density_se: float
    attempts: tuple[AttemptRecord, ...]


@dataclass(frozen=True)
class LooReport:
    """Aggregate report: per-observation records plus ranking summaries."""

    per_observation: tuple[ObservationResult, ...]
    loo_ic: float
    loo_ic_se: float
    n_failed: int
    roc_points: tuple
    prc_points: tuple
    auroc: float | None
    auprc: float | None


def nu_weights(model: SigmoidalModel, draws: PosteriorDraws, dataset: Dataset, i: int) -> WeightVector:
    """Self-normalized inverse-likelihood weights for observation i."""
    mu = model.mu_batch(draws.values, dataset.features[i][None, :])[:, 0]
    return WeightVector.from_log_weights(-bernoulli_log_likelihood(mu, dataset.labels[i]))


def eta_weights(
    model: SigmoidalModel,
    draws: PosteriorDraws,
    transformed: TransformedDraws,
    dataset: Dataset,
    prior: GaussianPrior,
    i: int,
    evaluation: PosteriorEvaluation | None = None,
) -> WeightVector:
    """Transformed-proposal weights.

    log eta_k = log |det J_k| - log lik(phi_k | d_i)
                + [log post(phi_k) - log post(theta_k)],
    with the posterior ratio evaluated exactly through prior and likelihood
    terms. Draws with a non-finite contribution get weight zero.
    """
    if transformed.phi.shape != draws.values.shape:
        raise DomainError("transformed draws are not aligned with the proposal draws")
    if evaluation is None:
        evaluation = evaluate_posterior(model, draws.values, dataset, prior, with_grad=False)
    phi_eval = evaluate_posterior(model, transformed.phi, dataset, prior, with_grad=False)
    log_eta = (
        transformed.log_jac_det
        - phi_eval.log_lik[:, i]
        + (phi_eval.log_post - evaluation.log_post)
    )
    log_eta = np.where(np.isnan(log_eta), -np.inf, log_eta)
    return WeightVector.from_log_weights(log_eta)


def chi_weights(
    model: SigmoidalModel,
    draws: PosteriorDraws,
    transformed: TransformedDraws,
    dataset: Dataset,
    prior: GaussianPrior,
    variational_log_density: Callable[[np.ndarray], float],
    i: int,
) -> WeightVector:
    """Variational-proposal weights for draws taken from an approximation.

    log chi_k = log |det J_k| - log q(theta_k) + log prior(phi_k)
                + sum_{j != i} log lik(phi_k | d_j),
    where q is the supplied variational log density. Any constant offset in
    q cancels under self-normalization.
    """
    if transformed.phi.shape != draws.values.shape:
        raise DomainError("transformed draws are not aligned with the proposal draws")
    phi_eval = evaluate_posterior(model, transformed.phi, dataset, prior, with_grad=False)
    q_log = np.array([float(variational_log_density(theta)) for theta in draws.values])
    loo_log_lik = phi_eval.log_lik.sum(axis=1) - phi_eval.log_lik[:, i]
    log_chi = (
        transformed.log_jac_det
        - q_log
        + prior.log_density_batch(transformed.phi)
        + loo_log_lik
    )
    log_chi = np.where(np.isnan(log_chi), -np.inf, log_chi)
    return WeightVector.from_log_weights(log_chi)


def self_normalized_se(normalized_weights: np.ndarray, values: np.ndarray) -> float:
    """Delta-method standard error of a self-normalized IS estimate."""
    w = np.asarray(normalized_weights, dtype=float)
    f = np.asarray(values, dtype=float)
    estimate = float(w @ f)
    return float(math.sqrt(np.sum((w * (f - estimate)) ** 2)))


def _loo_quantities(weights: WeightVector, mu_at_phi: np.ndarray, y: int):
    """Predictive probability, log predictive density, and their MC errors."""
    w = weights.normalized
    probs = sigmoid(mu_at_phi)
    prob = float(w @ probs)
    prob_se = self_normalized_se(w, probs)
    log_lik = bernoulli_log_likelihood(mu_at_phi, y)
    # log sum_k w_k lik_k, computed in log space to dodge underflow.
    with np.errstate(divide="ignore"):
        log_w = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), -np.inf)
    lpd = float(logsumexp(log_w + log_lik))
    # Delta method on the ratio scale: se(log E) = se(E) / E.
    ratio = np.exp(log_lik - lpd)
    lpd_se = float(math.sqrt(np.sum((w * (ratio - 1.0)) ** 2)))
    return prob, prob_se, lpd, lpd_se


def adapt_observation(
    i: int,
    model: SigmoidalModel,
    draws: PosteriorDraws,
    dataset: Dataset,
    prior: GaussianPrior,
    config: RunConfig,
    stats: MarginalStats,
    evaluation: PosteriorEvaluation | None = None,
    variational_log_density: Callable[[np.ndarray], float] | None = None,
) -> ObservationResult:
    """Run the adaptation loop for one observation.

    Raw weights are smoothed first; a sub-threshold k-hat short-circuits the
    grid entirely. Otherwise transforms are tried in configuration order,
    each over the step-scale grid from largest to smallest, stopping at the
    first success. On exhaustion the lowest-k-hat candidate (including the
    raw weights) supplies the reported LOO quantities.
    """
    if evaluation is None:
        evaluation = evaluate_posterior(model, draws.values, dataset, prior, with_grad=True)
    use_chi = config.use_variational_correction
    if use_chi and variational_log_density is None:
        raise DomainError("variational correction requested but no variational log density supplied")

    threshold = config.khat_threshold
    raw = WeightVector.from_log_weights(-evaluation.log_lik[:, i])
    raw_smoothed, raw_fit = pareto_smooth(raw, config.tail_fraction_rule)
    raw_khat = raw_fit.khat

    y = int(dataset.labels[i])
    if raw_khat <= threshold:
        prob, prob_se, lpd, lpd_se = _loo_quantities(raw_smoothed, evaluation.mu[:, i], y)
        return ObservationResult(
            index=i,
            raw_khat=raw_khat,
            adapted=True,
            winning_transform=None,
            final_khat=raw_khat,
            final_weights=raw_smoothed,
            loo_predictive_prob=prob,
            loo_log_predictive_density=lpd,
            loo_predictive_prob_se=prob_se,
            loo_log_predictive_density_se=lpd_se,
            attempts=(),
        )

    attempts: list[AttemptRecord] = []
    # Candidates for "best attempt" always include the raw weights.
    best = (raw_khat, None, None, raw_smoothed)  # (khat, spec, transformed, weights)
    winner = None
    for kind in config.transform_order:
        for hbar in config.hbar_values:
            spec = TransformSpec(kind=kind, hbar=hbar, observation_index=i)
            transformed = apply_transform(
                spec, model, draws, dataset, prior, stats,
                nu_weights=raw_smoothed, evaluation=evaluation,
            )
            if transformed.degenerate:
                attempts.append(
                    AttemptRecord(
                        spec=spec, khat=math.inf, fittable=False, degenerate=True,
                        flags=transformed.flags, h_used=transformed.h_used,
                        exact_jacobian=transformed.exact_jacobian,
                        max_step_sd=transformed.max_step_sd,
                    )
                )
                continue
            flags = transformed.flags
            try:
                if use_chi:
                    weights = chi_weights(
                        model, draws, transformed, dataset, prior, variational_log_density, i
                    )
                else:
                    weights = eta_weights(model, draws, transformed, dataset, prior, i, evaluation)
            except DomainError:
                attempts.append(
                    AttemptRecord(
                        spec=spec, khat=math.inf, fittable=False, degenerate=True,
                        flags=flags + ("all-weights-zero",), h_used=transformed.h_used,
                        exact_jacobian=transformed.exact_jacobian,
                        max_step_sd=transformed.max_step_sd,
                    )
                )
                continue
            smoothed, fit = pareto_smooth(weights, config.tail_fraction_rule)
            khat = fit.khat
            attempts.append(
                AttemptRecord(
                    spec=spec, khat=khat, fittable=fit.fittable, degenerate=False,
                    flags=flags, h_used=transformed.h_used,
                    exact_jacobian=transformed.exact_jacobian,
                    max_step_sd=transformed.max_step_sd,
                )
            )
            if khat < best[0]:
                best = (khat, spec, transformed, smoothed)
            if khat <= threshold:
                winner = (khat, spec, transformed, smoothed)
                break
        if winner is not None:
            break

    final_khat, win_spec, win_transformed, final_weights = winner if winner is not None else best
    if win_transformed is not None:
        mu_at_phi = model.mu_batch(win_transformed.phi, dataset.features[i][None, :])[:, 0]
    else:
        mu_at_phi = evaluation.mu[:, i]
    prob, prob_se, lpd, lpd_se = _loo_quantities(final_weights, mu_at_phi, y)
    adapted = final_khat <= threshold
    return ObservationResult(
        index=i,
        raw_khat=raw_khat,
        adapted=adapted,
        winning_transform=win_spec,
        final_khat=final_khat,
        final_weights=final_weights,
        loo_predictive_prob=prob,
        loo_log_predictive_density=lpd,
        loo_predictive_prob_se=prob_se,
        loo_log_predictive_density_se=lpd_se,
        attempts=tuple(attempts),
    )


def loo_ic(results: Sequence[ObservationResult]) -> float:
    """-2 times the summed log LOO predictive densities."""
    return -2.0 * sum(r.loo_log_predictive_density for r in results)


def loo_ic_se(results: Sequence[ObservationResult]) -> float:
    """MC standard error of the information criterion (independent folds)."""
    return 2.0 * math.sqrt(sum(r.loo_log_predictive_density_se**2 for r in results))


def run_loo(
    model: SigmoidalModel,
    draws: PosteriorDraws,
    dataset: Dataset,
    prior: GaussianPrior,
    config: RunConfig,
    workers: int = 1,
    variational_log_density: Callable[[np.ndarray], float] | None = None,
) -> LooReport:
    """Adapt every observation and assemble the aggregate report.

    Observations are independent; with ``workers > 1`` they are mapped over
    a thread pool against the shared read-only inputs. Results are ordered
    by observation index regardless of completion order, so the report is
    deterministic for fixed inputs.
    """
    evaluation = evaluate_posterior(model, draws.values, dataset, prior, with_grad=True)
    stats = marginal_stats(draws)

    def _one(i: int) -> ObservationResult:
        return adapt_observation(
            i, model, draws, dataset, prior, config, stats,
            evaluation=evaluation, variational_log_density=variational_log_density,
        )

    indices = range(dataset.n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = tuple(pool.map(_one, indices))
    else:
        results = tuple(_one(i) for i in indices)

    scores = np.array([r.loo_predictive_prob for r in results])
    labels = dataset.labels
    roc_pts: tuple = ()
    prc_pts: tuple = ()
    roc_area = None
    pr_area = None
    if len(np.unique(labels)) == 2:
        roc_pts = tuple(roc_curve(scores, labels))
        prc_pts = tuple(pr_curve(scores, labels))
        roc_area = auroc(roc_pts)
        pr_area = auprc(prc_pts)

    return LooReport(
        per_observation=results,
        loo_ic=loo_ic(results),
        loo_ic_se=loo_ic_se(results),
        n_failed=sum(1 for r in results if not r.adapted),
        roc_points=roc_pts,
        prc_points=prc_pts,
        auroc=roc_area,
        auprc=pr_area,
    )
