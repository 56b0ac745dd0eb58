"""Privacy accounting: zCDP budget conversion, allocation, and the Gaussian mechanism.

The total budget rho is derived from (epsilon, delta) via the tight
conversion epsilon = rho + 2*sqrt(rho*ln(1/delta)) and split across the
three releasing stages (frequency binning, pair selection, marginal
publication). Every noisy release is logged in a ledger that refuses to
overspend.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigError

DEFAULT_FRACTIONS = (0.1, 0.1, 0.8)


def rho_to_eps(rho: float, delta: float) -> float:
    """Epsilon guaranteed by rho-zCDP at the given delta."""
    if rho < 0:
        raise ConfigError(f"rho must be non-negative, got {rho}")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def eps_delta_to_rho(epsilon: float, delta: float, tol: float = 1e-12) -> float:
    """Solve epsilon = rho + 2*sqrt(rho*ln(1/delta)) for rho by bisection.

    The map rho -> epsilon is strictly increasing, so the root is unique;
    bisection runs until the epsilon residual drops below ``tol``.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    lo, hi = 0.0, epsilon  # rho <= epsilon always
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        value = rho_to_eps(mid, delta)
        if abs(value - epsilon) <= tol:
            return mid
        if value < epsilon:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PrivacyBudget:
    """Total zCDP budget and its three-way stage allocation."""

    epsilon: float
    delta: float
    rho_total: float
    rho_binning: float
    rho_selection: float
    rho_publish: float

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "rho_total": self.rho_total,
            "rho_binning": self.rho_binning,
            "rho_selection": self.rho_selection,
            "rho_publish": self.rho_publish,
        }


def allocate_budget(rho: float, fractions=DEFAULT_FRACTIONS,
                    epsilon: float = float("nan"), delta: float = float("nan")) -> PrivacyBudget:
    """Split rho into stage budgets; the last stage takes the exact remainder."""
    if rho < 0:
        raise ConfigError(f"rho must be non-negative, got {rho}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError(f"expected three stage fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be non-negative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    rho_binning = rho * fractions[0]
    rho_selection = rho * fractions[1]
    rho_publish = rho - (rho_binning + rho_selection)
    return PrivacyBudget(epsilon, delta, rho, rho_binning, rho_selection, rho_publish)


def budget_from_epsilon_delta(epsilon: float, delta: float,
                              fractions=DEFAULT_FRACTIONS) -> PrivacyBudget:
    rho = eps_delta_to_rho(epsilon, delta)
    return allocate_budget(rho, fractions, epsilon=epsilon, delta=delta)


def per_marginal_rho(rho_stage: float, cell_counts, weighting: str = "cells23") -> np.ndarray:
    """Split a stage budget over marginals.

    ``cells23`` weights each marginal by cells**(2/3); ``equal`` splits
    evenly. The last share is the exact remainder so the parts always sum
    to rho_stage.
    """
    if rho_stage <= 0:
        raise ConfigError(f"stage budget must be positive, got {rho_stage}")
    counts = np.asarray(list(cell_counts), dtype=np.float64)
    if counts.size == 0:
        raise ConfigError("cannot split a budget over zero marginals")
    if np.any(counts < 1):
        raise ConfigError("every marginal must have at least one cell")
    if weighting == "cells23":
        weights = counts ** (2.0 / 3.0)
    elif weighting == "equal":
        weights = np.ones_like(counts)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    shares = rho_stage * weights / weights.sum()
    shares[-1] = rho_stage - shares[:-1].sum()
    return shares


def gaussian_sigma(rho: float) -> float:
    """Per-cell noise scale of the Gaussian mechanism at sensitivity 1."""
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    return math.sqrt(1.0 / (2.0 * rho))


@dataclass
class BudgetLedger:
    """Append-only record of zCDP consumption; refuses to overspend.

    Mutation is confined to ``consume``; everything downstream of
    publication is post-processing and must leave the ledger untouched.
    """

    rho_total: float
    entries: list[tuple[str, float]] = field(default_factory=list)
    sealed: bool = False

    def consume(self, stage: str, rho: float) -> None:
        if self.sealed:
            raise BudgetError(f"ledger is sealed; cannot consume {rho} for {stage!r}")
        if rho < 0:
            raise BudgetError(f"cannot consume negative budget {rho}")
        slack = 1e-9 * max(1.0, self.rho_total)
        if self.total_consumed() + rho > self.rho_total + slack:
            raise BudgetError(
                f"budget exceeded: consuming {rho} for {stage!r} on top of "
                f"{self.total_consumed()} would pass the total {self.rho_total}")
        self.entries.append((stage, float(rho)))

    def total_consumed(self) -> float:
        total = 0.0
        for _, rho in self.entries:
            total += rho
        return total

    def stage_totals(self) -> dict[str, float]:
        """Consumption grouped by the stage prefix before the first ':'."""
        totals: dict[str, float] = {}
        for stage, rho in self.entries:
            key = stage.split(":", 1)[0]
            totals[key] = totals.get(key, 0.0) + rho
        return totals

    def seal(self) -> None:
        self.sealed = True

    def as_dict(self) -> dict:
        return {
            "rho_total": self.rho_total,
            "consumed": self.total_consumed(),
            "sealed": self.sealed,
            "entries": [[stage, rho] for stage, rho in self.entries],
            "stage_totals": self.stage_totals(),
        }


def gaussian_mechanism(counts, rho: float, rng: np.random.Generator,
                       ledger: BudgetLedger | None = None, stage: str = "gm") -> np.ndarray:
    """Add N(0, 1/(2*rho)) noise to every cell of a sensitivity-1 table."""
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    counts = np.asarray(counts, dtype=np.float64)
    if ledger is not None:
        ledger.consume(stage, rho)
    return counts + rng.normal(0.0, gaussian_sigma(rho), size=counts.shape)


def substream(seed: int, *path: str) -> np.random.Generator:
    """Derive a named random substream from the master seed.

    Each (stage, name...) path gets its own generator, so the draw order of
    one stage can never perturb another.
    """
    digest = hashlib.sha256("/".join(path).encode("utf-8")).digest()
    spawn_key = tuple(int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))
