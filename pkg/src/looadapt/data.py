"""Dataset, posterior-draw and run-configuration containers.

All containers are immutable after construction (arrays are copied in and
marked read-only), so instances can be shared across worker threads without
locking.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, ValidationError

#: Transformation identifiers accepted in a run configuration, in the
#: default attempt order (the moment-matching pair first, then the
#: gradient-step family, then the plain likelihood-descent baseline).
TRANSFORM_KINDS = ("PMM1", "PMM2", "KL", "Var", "LL")
PMM_KINDS = ("PMM1", "PMM2")
GRADIENT_KINDS = ("KL", "Var", "LL")

_TAIL_RULES = ("psis",)

DEFAULT_KHAT_THRESHOLD = 0.7
DEFAULT_HBAR_EXPONENTS = tuple(range(11))


def _frozen(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """n observations of (feature vector x, binary label y)."""

    features: np.ndarray            # (n, p) float
    labels: np.ndarray              # (n,) int, each exactly 0 or 1
    feature_names: tuple[str, ...]  # length p

    def __post_init__(self):
        features = _frozen(self.features)
        labels = _frozen(self.labels, dtype=int)
        if features.ndim != 2:
            raise DimensionError("features must be a 2-d matrix")
        n, p = features.shape
        if n < 1 or p < 1:
            raise DomainError("dataset needs at least one row and one feature")
        if labels.shape != (n,):
            raise DimensionError(f"expected {n} labels, got {labels.shape}")
        if not np.all(np.isfinite(features)):
            raise DomainError("features contain NaN or infinite values")
        if not np.all((labels == 0) | (labels == 1)):
            raise DomainError("labels must all be 0 or 1")
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != p:
            raise DimensionError(f"expected {p} feature names, got {len(names)}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def with_intercept(self) -> "Dataset":
        """Return a copy with a constant-1 feature column appended."""
        ones = np.ones((self.n, 1))
        return Dataset(
            features=np.hstack([self.features, ones]),
            labels=self.labels,
            feature_names=self.feature_names + ("(intercept)",),
        )


@dataclass(frozen=True)
class PosteriorDraws:
    """S sampled parameter vectors used as the importance-sampling proposal."""

    values: np.ndarray              # (S, P) float
    param_names: tuple[str, ...]    # length P

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise DimensionError("draw values must be a 2-d matrix")
        s, p = values.shape
        if s < 2:
            raise DomainError("need at least two draws for self-normalization")
        if not np.all(np.isfinite(values)):
            raise DomainError("draws contain NaN or infinite values")
        names = tuple(str(s) for s in self.param_names)
        if len(names) != p:
            raise DimensionError(f"expected {p} parameter names, got {len(names)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "param_names", names)

    @property
    def num_draws(self) -> int:
        return self.values.shape[0]

    @property
    def param_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RunConfig:
    """Knobs of the adaptation loop; every field has a usable default."""

    khat_threshold: float = DEFAULT_KHAT_THRESHOLD
    hbar_exponents: tuple[int, ...] = DEFAULT_HBAR_EXPONENTS
    transform_order: tuple[str, ...] = TRANSFORM_KINDS
    tail_fraction_rule: str = "psis"
    rng_seed: int = 0
    use_variational_correction: bool = False

    def __post_init__(self):
        if not self.khat_threshold > 0:
            raise DomainError("khat_threshold must be positive")
        exps = tuple(int(r) for r in self.hbar_exponents)
        if len(exps) == 0:
            raise DomainError("hbar_exponents must be non-empty")
        if any(r < 0 for r in exps):
            raise DomainError("hbar_exponents must be non-negative")
        order = tuple(str(k) for k in self.transform_order)
        if len(order) == 0:
            raise DomainError("transform_order must be non-empty")
        if len(set(order)) != len(order):
            raise DomainError("transform_order contains duplicates")
        unknown = [k for k in order if k not in TRANSFORM_KINDS]
        if unknown:
            raise DomainError(f"unknown transform kinds: {unknown}")
        if self.tail_fraction_rule not in _TAIL_RULES:
            raise DomainError(f"unknown tail rule {self.tail_fraction_rule!r}")
        if int(self.rng_seed) < 0:
            raise DomainError("rng_seed must be non-negative")
        object.__setattr__(self, "hbar_exponents", exps)
        object.__setattr__(self, "transform_order", order)
        object.__setattr__(self, "rng_seed", int(self.rng_seed))
        object.__setattr__(self, "use_variational_correction", bool(self.use_variational_correction))

    @property
    def hbar_values(self) -> tuple[float, ...]:
        """Step-scale grid 4**(-r), largest first."""
        return tuple(4.0 ** (-r) for r in self.hbar_exponents)

    @classmethod
    def from_json_dict(cls, payload: dict) -> "RunConfig":
        known = {
            "khat_threshold",
            "hbar_exponents",
            "transform_order",
            "tail_fraction_rule",
            "rng_seed",
            "use_variational_correction",
        }
        unknown = set(payload) - known
        if unknown:
            raise ValidationError([f"unknown config key {k!r}" for k in sorted(unknown)])
        kwargs = {k: payload[k] for k in known if k in payload}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError([f"config is not valid JSON: {exc}"]) from exc
        if not isinstance(payload, dict):
            raise ValidationError(["config JSON must be an object"])
        return cls.from_json_dict(payload)

    def to_json_dict(self) -> dict:
        return {
            "khat_threshold": self.khat_threshold,
            "hbar_exponents": list(self.hbar_exponents),
            "transform_order": list(self.transform_order),
            "tail_fraction_rule": self.tail_fraction_rule,
            "rng_seed": self.rng_seed,
            "use_variational_correction": self.use_variational_correction,
        }


@dataclass(frozen=True)
class MarginalStats:
    """Per-parameter draw statistics.

    ``mean`` and ``variance`` use the population convention (divisor S).
    The weighted variance is taken about the *unweighted* mean, matching the
    moment-matching update it feeds.
    """

    mean: np.ndarray
    sd: np.ndarray
    weighted_mean: np.ndarray
    variance: np.ndarray
    weighted_variance: np.ndarray

    def __post_init__(self):
        for name in ("mean", "sd", "weighted_mean", "variance", "weighted_variance"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


def marginal_stats(draws: PosteriorDraws, weights: np.ndarray | None = None) -> MarginalStats:
    """Column means/variances of the draws, plus their weighted counterparts.

    ``weights``, when given, must be a normalized (sum 1) non-negative vector
    of length S. Omitting it makes the weighted statistics equal the plain
    ones.
    """
    values = draws.values
    s = draws.num_draws
    mean = values.mean(axis=0)
    centered = values - mean
    variance = np.mean(centered**2, axis=0)
    sd = np.sqrt(variance)
    if weights is None:
        return MarginalStats(mean, sd, mean.copy(), variance, variance.copy())
    w = np.asarray(weights, dtype=float)
    if w.shape != (s,):
        raise DimensionError(f"expected {s} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise DomainError(f"weights must sum to 1, got {w.sum()!r}")
    weighted_mean = w @ values
    weighted_variance = w @ centered**2
    return MarginalStats(mean, sd, weighted_mean, variance, weighted_variance)


def validate_dataset(
    rows: Sequence[Sequence[object]],
    header: Sequence[str],
    label_column: str = "y",
) -> Dataset:
    """Build a :class:`Dataset` from raw (string or numeric) cells.

    Collects *every* violation (bad label, non-numeric feature, ragged row)
    before rejecting, so callers see the full damage report at once. Row
    numbers in messages are 1-based over data rows.
    """
    header = [str(h) for h in header]
    violations: list[str] = []
    if label_column not in header:
        raise ValidationError([f"label column {label_column!r} not found in header"])
    label_idx = header.index(label_column)
    feature_names = tuple(h for j, h in enumerate(header) if j != label_idx)
    if len(feature_names) < 1:
        raise ValidationError(["need at least one feature column besides the label"])
    rows = list(rows)
    if len(rows) < 1:
        raise ValidationError(["dataset has no data rows"])

    features = np.zeros((len(rows), len(feature_names)))
    labels = np.zeros(len(rows), dtype=int)
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            violations.append(f"row {r}: expected {len(header)} cells, got {len(row)}")
            continue
        col = 0
        for j, cell in enumerate(row):
            name = header[j]
            try:
                value = float(cell)
            except (TypeError, ValueError):
                violations.append(f"row {r}, column {name!r}: non-numeric value {cell!r}")
                if j != label_idx:
                    col += 1
                continue
            if j == label_idx:
                if value not in (0.0, 1.0):
                    violations.append(f"row {r}: label {cell!r} not in {{0, 1}}")
                else:
                    labels[r - 1] = int(value)
            else:
                if not math.isfinite(value):
                    violations.append(f"row {r}, column {name!r}: non-finite value {cell!r}")
                else:
                    features[r - 1, col] = value
                col += 1
    if violations:
        raise ValidationError(violations)
    return Dataset(features=features, labels=labels, feature_names=feature_names)


def load_dataset_csv(path, label_column: str = "y", add_intercept: bool = False) -> Dataset:
    """Read a dataset CSV (header row, one designated label column)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(["dataset file is empty"]) from None
        rows = list(reader)
    dataset = validate_dataset(rows, header, label_column=label_column)
    return dataset.with_intercept() if add_intercept else dataset


def load_draws_csv(path) -> PosteriorDraws:
    """Read a draws CSV (header row of parameter names, one row per draw)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(["draws file is empty"]) from None
        rows = list(reader)
    violations: list[str] = []
    values = np.zeros((len(rows), len(header)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            violations.append(f"draw row {r}: expected {len(header)} cells, got {len(row)}")
            continue
        for j, cell in enumerate(row):
            try:
                value = float(cell)
            except (TypeError, ValueError):
                violations.append(f"draw row {r}, column {header[j]!r}: non-numeric value {cell!r}")
                continue
            values[r - 1, j] = value
    if len(rows) < 2:
        violations.append(f"need at least two draws, got {len(rows)}")
    if violations:
        raise ValidationError(violations)
    return PosteriorDraws(values=values, param_names=tuple(header))
