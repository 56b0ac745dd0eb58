"""Contingency tables over binned attributes: selection, publication, repair.

Pair selection trades the dependency lost by omitting a 2-way table
against the noise cost of publishing it, greedily, on DP-perturbed
dependency scores. Published tables are then repaired: projected onto
valid count tables, reconciled across shared attributes, and edited to
honour protocol rules (bytes >= packets, FTP mostly on TCP).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .binning import BinMapping, EncodedDataset, OneWayMarginal, SingletonBin, bin_bounds
from .errors import ConfigError, DataError
from .privacy import (BudgetLedger, gaussian_mechanism, gaussian_sigma,
                      per_marginal_rho)

logger = logging.getLogger(__name__)

DEFAULT_MERGE_THRESHOLD = 10_000


@dataclass
class Marginal:
    """A k-way contingency table; cells indexed by bin index tuples."""

    attrs: tuple[str, ...]
    cells: np.ndarray
    total: float
    state: str = "exact"  # exact | noisy | consistent
    rho: float | None = None  # publication budget (noisy onward)

    @property
    def n_cells(self) -> int:
        return int(self.cells.size)

    @property
    def sigma2(self) -> float:
        """Per-cell noise variance of the publication."""
        if self.rho is None:
            raise ConfigError(f"marginal {self.attrs} has no publication budget")
        return 1.0 / (2.0 * self.rho)

    def projection(self, attr: str) -> np.ndarray:
        axis = self.attrs.index(attr)
        other = tuple(i for i in range(self.cells.ndim) if i != axis)
        return self.cells.sum(axis=other)

    def normalized(self) -> np.ndarray:
        total = self.cells.sum()
        if total <= 0:
            return np.full_like(self.cells, 1.0 / self.cells.size)
        return self.cells / total


def compute_marginal(encoded: EncodedDataset, attrs: Sequence[str]) -> Marginal:
    """Exact contingency counts of the encoded dataset over ``attrs``."""
    attrs = tuple(attrs)
    if not attrs:
        raise ConfigError("marginal needs at least one attribute")
    unknown = [a for a in attrs if a not in encoded.attributes]
    if unknown:
        raise DataError(f"unknown attribute(s) {unknown}")
    attrs = tuple(sorted(attrs, key=encoded.attributes.index))
    shape = tuple(encoded.domain_sizes[encoded.attributes.index(a)] for a in attrs)
    if encoded.n == 0:
        return Marginal(attrs, np.zeros(shape, dtype=np.float64), 0.0)
    cols = [encoded.column(a) for a in attrs]
    flat = np.ravel_multi_index(cols, shape)
    cells = np.bincount(flat, minlength=int(np.prod(shape))).astype(np.float64)
    return Marginal(attrs, cells.reshape(shape), float(encoded.n))


def one_way_to_marginal(one_way: OneWayMarginal) -> Marginal:
    return Marginal((one_way.attribute,), np.asarray(one_way.counts, dtype=np.float64),
                    float(np.sum(one_way.counts)), state="noisy", rho=one_way.rho)


def dependency_error(m2: Marginal, m_a: Marginal, m_b: Marginal) -> float:
    """L1 gap between a 2-way table and the product of its 1-way projections."""
    if len(m2.attrs) != 2:
        raise ConfigError(f"dependency error is defined for 2-way marginals, got {m2.attrs}")
    if not (math.isclose(m2.total, m_a.total) and math.isclose(m2.total, m_b.total)):
        raise DataError(f"mismatched totals: {m2.total}, {m_a.total}, {m_b.total}")
    n = m2.total
    if n == 0:
        return 0.0
    expected = np.outer(m_a.cells, m_b.cells) / n
    return float(np.abs(m2.cells - expected).sum())


def noise_error(cells: int, rho_i: float) -> float:
    """Expected L1 noise mass of publishing a table of ``cells`` cells."""
    if cells < 1:
        raise ConfigError(f"cells must be >= 1, got {cells}")
    if rho_i <= 0:
        raise ConfigError(f"rho_i must be positive, got {rho_i}")
    return cells * gaussian_sigma(rho_i) * math.sqrt(2.0 / math.pi)


@dataclass
class MarginalCandidate:
    pair: tuple[str, str]
    phi: float            # dependency error of the exact data (never released)
    cells: int
    noisy_phi: float | None = None
    psi: float | None = None
    selected: bool = False
    rho: float | None = None


def build_candidates(encoded: EncodedDataset) -> list[MarginalCandidate]:
    """Dependency errors for all attribute pairs of the encoded dataset."""
    candidates = []
    for a, b in itertools.combinations(encoded.attributes, 2):
        m2 = compute_marginal(encoded, (a, b))
        m_a = Marginal((a,), m2.projection(a), m2.total)
        m_b = Marginal((b,), m2.projection(b), m2.total)
        phi = dependency_error(m2, m_a, m_b)
        candidates.append(MarginalCandidate((a, b), phi, m2.n_cells))
    return candidates


def selection_objective(phis: np.ndarray, cells: np.ndarray, chosen: Sequence[int],
                        rho_publish: float, weighting: str = "cells23") -> float:
    """Total error of a candidate subset: noise on the chosen tables plus
    dependency loss on the rest, with the publication budget re-split over
    the chosen set."""
    chosen = list(chosen)
    objective = float(phis[[i for i in range(len(phis)) if i not in set(chosen)]].sum())
    if chosen:
        shares = per_marginal_rho(rho_publish, cells[chosen], weighting=weighting)
        objective += float(sum(noise_error(int(c), r) for c, r in zip(cells[chosen], shares)))
    return objective


def greedy_select(phis, cells, rho_publish: float, weighting: str = "cells23"):
    """Greedy minimiser of the selection objective.

    Each step adds the candidate whose inclusion lowers the objective the
    most (the budget re-split couples all chosen tables, so the scores are
    re-evaluated every step); when no addition helps, a drop pass retries
    removals, since early picks can turn sour as the budget thins out.

    Returns (selected indices, per-marginal budgets, final objective).
    """
    phis = np.asarray(phis, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.float64)
    if rho_publish <= 0:
        raise ConfigError(f"publication budget must be positive, got {rho_publish}")
    chosen: set[int] = set()
    best = selection_objective(phis, cells, [], rho_publish, weighting)
    while True:
        pick, pick_value = None, best
        for i in range(len(phis)):
            if i in chosen:
                continue
            value = selection_objective(phis, cells, list(chosen | {i}),
                                        rho_publish, weighting)
            if value < pick_value - 1e-12:
                pick, pick_value = i, value
        if pick is not None:
            chosen.add(pick)
            best = pick_value
            continue
        dropped = False
        for i in sorted(chosen):
            value = selection_objective(phis, cells, list(chosen - {i}),
                                        rho_publish, weighting)
            if value < best - 1e-12:
                chosen.discard(i)
                best = value
                dropped = True
        if not dropped:
            break
    ordered = sorted(chosen, key=lambda i: (-phis[i], i))
    shares = (per_marginal_rho(rho_publish, cells[ordered], weighting=weighting)
              if ordered else np.array([]))
    return ordered, shares, best


def select_marginals(candidates: list[MarginalCandidate], rho_selection: float,
                     rho_publish: float, rng: np.random.Generator,
                     ledger: BudgetLedger | None = None,
                     weighting: str = "cells23") -> list[MarginalCandidate]:
    """DP pair selection: perturb the dependency scores, then run the greedy.

    Releasing all m scores with per-score sensitivity 4 costs rho_selection
    under the Gaussian mechanism at sigma = 4*sqrt(m/(2*rho_selection)).
    """
    if rho_selection <= 0 or rho_publish <= 0:
        raise ConfigError("selection and publication budgets must be positive")
    if not candidates:
        raise ConfigError("no candidate pairs to select from")
    m = len(candidates)
    sigma = 4.0 * math.sqrt(m / (2.0 * rho_selection))
    if ledger is not None:
        ledger.consume("selection", rho_selection)
    phis = np.array([c.phi for c in candidates], dtype=np.float64)
    noisy = phis + rng.normal(0.0, sigma, size=m)
    cells = np.array([c.cells for c in candidates], dtype=np.float64)
    chosen, shares, _ = greedy_select(noisy, cells, rho_publish, weighting)
    for c, nphi in zip(candidates, noisy):
        c.noisy_phi = float(nphi)
        c.selected = False
        c.psi = None
        c.rho = None
    for i, rho_i in zip(chosen, shares):
        candidates[i].selected = True
        candidates[i].rho = float(rho_i)
        candidates[i].psi = noise_error(candidates[i].cells, float(rho_i))
    return [candidates[i] for i in chosen]


def merge_small_marginals(selected: Iterable[Sequence[str]], domain_sizes: Mapping[str, int],
                          size_threshold: int = DEFAULT_MERGE_THRESHOLD) -> list[tuple[str, ...]]:
    """Union overlapping attribute sets while the joint table stays small.

    Repeatedly merges the pair of sets sharing an attribute whose union has
    the smallest cell count, as long as that count stays at or below the
    threshold. The result may contain multi-way attribute sets.
    """
    sets = [frozenset(s) for s in selected]

    def size(s: frozenset) -> int:
        out = 1
        for a in s:
            out *= domain_sizes[a]
        return out

    while True:
        best = None
        for i, j in itertools.combinations(range(len(sets)), 2):
            if not sets[i] & sets[j]:
                continue
            union = sets[i] | sets[j]
            cells = size(union)
            if cells <= size_threshold and (best is None or cells < best[0]):
                best = (cells, i, j, union)
        if best is None:
            break
        _, i, j, union = best
        sets = [s for k, s in enumerate(sets) if k not in (i, j)] + [union]
    order = list(domain_sizes)
    return [tuple(sorted(s, key=order.index)) for s in sets]


def publish(marginals: Sequence[Marginal], rho_publish: float, rng: np.random.Generator,
            ledger: BudgetLedger | None = None, weighting: str = "cells23") -> list[Marginal]:
    """Noise each exact marginal under its share of the publication budget."""
    if rho_publish <= 0:
        raise ConfigError(f"publication budget must be positive, got {rho_publish}")
    if not marginals:
        return []
    shares = per_marginal_rho(rho_publish, [m.n_cells for m in marginals], weighting=weighting)
    published = []
    for m, rho_i in zip(marginals, shares):
        label = "publish:" + "x".join(m.attrs)
        noisy = gaussian_mechanism(m.cells, float(rho_i), rng, ledger, stage=label)
        published.append(Marginal(m.attrs, noisy, float(noisy.sum()), state="noisy",
                                  rho=float(rho_i)))
    return published


# -- post-processing ------------------------------------------------------

def project_valid(marginal: Marginal, target_total: float, tol: float = 1e-9) -> Marginal:
    """Project noisy counts onto the nearest non-negative table with the
    target mass: find t with sum(max(0, cell - t)) = target, by bisection.
    """
    if target_total <= 0:
        raise ConfigError(f"target total must be positive, got {target_total}")
    cells = np.asarray(marginal.cells, dtype=np.float64)
    if cells.size == 0 or not np.all(np.isfinite(cells)):
        logger.warning("degenerate table for %s; falling back to uniform", marginal.attrs)
        flat = np.full(marginal.cells.shape, target_total / max(1, marginal.cells.size))
        return replace(marginal, cells=flat, total=float(target_total), state="consistent")
    lo = float(cells.min()) - target_total / cells.size - 1.0
    hi = float(cells.max())
    for _ in range(200):
        t = 0.5 * (lo + hi)
        mass = np.maximum(cells - t, 0.0).sum()
        if abs(mass - target_total) <= tol * target_total:
            break
        if mass > target_total:
            lo = t
        else:
            hi = t
    projected = np.maximum(cells - t, 0.0)
    return replace(marginal, cells=projected, total=float(target_total), state="consistent")


def consensus_total(marginals: Sequence[Marginal]) -> float:
    """Inverse-variance weighted mean of the noisy totals.

    The variance of a summed table is cells * sigma^2, so bigger, noisier
    tables count for less.
    """
    weights = np.array([1.0 / (m.n_cells * m.sigma2) for m in marginals])
    totals = np.array([m.total for m in marginals])
    return float(np.dot(weights, totals) / weights.sum())


def consistency_shared(marginals: Sequence[Marginal], tol: float = 1e-10,
                       max_passes: int = 500) -> list[Marginal]:
    """Reconcile every attribute shared by two or more tables.

    Each shared attribute gets one consensus one-way distribution: the
    1/sigma^2-weighted average of the projections implied by its tables.
    Tables are then rescaled slice-by-slice to that consensus; passes
    repeat because fixing one attribute can drift another.
    """
    out = [replace(m, cells=np.asarray(m.cells, dtype=np.float64).copy()) for m in marginals]
    owners: dict[str, list[int]] = {}
    for i, m in enumerate(out):
        for a in m.attrs:
            owners.setdefault(a, []).append(i)
    shared = {a: idxs for a, idxs in owners.items() if len(idxs) > 1}
    if not shared:
        return out

    consensus: dict[str, np.ndarray] = {}
    for a, idxs in shared.items():
        weights = np.array([1.0 / out[i].sigma2 for i in idxs])
        stack = np.stack([out[i].projection(a) for i in idxs])
        consensus[a] = (weights[:, None] * stack).sum(axis=0) / weights.sum()

    for _ in range(max_passes):
        worst = 0.0
        for a, idxs in shared.items():
            target = consensus[a]
            for i in idxs:
                m = out[i]
                axis = m.attrs.index(a)
                moved = np.moveaxis(m.cells, axis, 0)
                current = moved.reshape(moved.shape[0], -1).sum(axis=1)
                worst = max(worst, float(np.abs(current - target).max()))
                for v in range(moved.shape[0]):
                    if current[v] > 0:
                        moved[v] *= target[v] / current[v]
                    elif target[v] != 0:
                        moved[v] = target[v] / moved[v].size
        if worst <= tol:
            break
    for m in out:
        m.total = float(m.cells.sum())
    return out


# -- protocol rules -------------------------------------------------------

@dataclass(frozen=True)
class OrderingRule:
    """upper >= lower on raw values (e.g. a packet has at least one byte)."""

    lower: str
    upper: str
    kind: str = "ordering"


@dataclass(frozen=True)
class PortProtocolRule:
    """Cap the non-preferred protocol share of traffic on specific ports."""

    port_attribute: str
    proto_attribute: str
    ports: tuple[int, ...]
    proto_value: str
    tau: float = 0.1
    kind: str = "port-protocol"


def default_rules(tau: float = 0.1) -> list:
    return [
        OrderingRule(lower="pkt", upper="byt"),
        PortProtocolRule("dstport", "proto", (20, 21), "TCP", tau),
    ]


def load_rules(path, tau: float = 0.1) -> list:
    """Parse a JSON rule file: a list of {kind, ...} objects."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ConfigError("rules file must contain a JSON array")
    rules = []
    for entry in raw:
        kind = entry.get("kind")
        if kind == "ordering":
            rules.append(OrderingRule(entry["lower"], entry["upper"]))
        elif kind == "port-protocol":
            rules.append(PortProtocolRule(
                entry.get("port_attribute", "dstport"),
                entry.get("proto_attribute", "proto"),
                tuple(entry.get("ports", (20, 21))),
                entry.get("proto_value", "TCP"),
                float(entry.get("tau", tau))))
        else:
            raise ConfigError(f"unknown rule kind {kind!r}")
    return rules


def _apply_ordering(marginal: Marginal, rule: OrderingRule, mapping: BinMapping) -> Marginal:
    lo_axis = marginal.attrs.index(rule.lower)
    up_axis = marginal.attrs.index(rule.upper)
    lo_bins = mapping.specs[rule.lower].bins
    up_bins = mapping.specs[rule.upper].bins
    lo_lo = np.array([bin_bounds(b)[0] for b in lo_bins])
    up_hi = np.array([bin_bounds(b)[1] for b in up_bins])

    work = np.moveaxis(marginal.cells, (lo_axis, up_axis), (0, 1)).copy()  # (L, U, rest...)
    flat = work.reshape(work.shape[0], work.shape[1], -1)
    for l in range(flat.shape[0]):
        invalid = up_hi < lo_lo[l]
        if not invalid.any():
            continue
        sub = flat[l]
        bad_mass = sub[invalid].sum(axis=0)
        sub[invalid] = 0.0
        valid = ~invalid
        valid_mass = sub[valid].sum(axis=0)
        for r in np.nonzero(bad_mass > 0)[0]:
            if valid_mass[r] > 0:
                sub[valid, r] += sub[valid, r] / valid_mass[r] * bad_mass[r]
            elif valid.any():
                sub[valid, r] += bad_mass[r] / valid.sum()
    cells = np.ascontiguousarray(np.moveaxis(work, (0, 1), (lo_axis, up_axis)))
    return replace(marginal, cells=cells, total=float(cells.sum()))


def _apply_port_protocol(marginal: Marginal, rule: PortProtocolRule,
                         mapping: BinMapping) -> Marginal:
    port_axis = marginal.attrs.index(rule.port_attribute)
    proto_axis = marginal.attrs.index(rule.proto_attribute)
    port_bins = mapping.specs[rule.port_attribute].bins
    proto_bins = mapping.specs[rule.proto_attribute].bins
    port_rows = [i for i, b in enumerate(port_bins)
                 if isinstance(b, SingletonBin) and b.value in rule.ports]
    proto_idx = next((i for i, b in enumerate(proto_bins)
                      if isinstance(b, SingletonBin) and b.value == rule.proto_value), None)
    if not port_rows or proto_idx is None:
        logger.warning("port-protocol rule skipped for %s: port/protocol bins not found",
                       marginal.attrs)
        return marginal

    work = np.moveaxis(marginal.cells, (port_axis, proto_axis), (0, 1)).copy()
    flat = work.reshape(work.shape[0], work.shape[1], -1)
    for p in port_rows:
        sub = flat[p]
        row_mass = sub.sum(axis=0)
        preferred = sub[proto_idx].copy()
        others = row_mass - preferred
        cap = rule.tau * row_mass
        excess = np.maximum(others - cap, 0.0)
        scale = np.divide(others - excess, others, out=np.ones_like(others), where=others > 0)
        mask = np.ones(sub.shape[0], dtype=bool)
        mask[proto_idx] = False
        sub[mask] *= scale
        sub[proto_idx] = preferred + excess
    cells = np.ascontiguousarray(np.moveaxis(work, (0, 1), (port_axis, proto_axis)))
    return replace(marginal, cells=cells, total=float(cells.sum()))


def apply_protocol_rules(marginals: Sequence[Marginal], rules: Sequence,
                         mapping: BinMapping) -> list[Marginal]:
    """Edit tables so protocol-impossible cells carry (almost) no mass.

    Ordering rules zero cells whose upper-attribute bin lies entirely below
    the lower-attribute bin and push the mass onto the surviving cells of
    the same row. Rules naming attributes absent from every table are
    skipped with a warning. Total mass per table is preserved exactly.
    """
    out = list(marginals)
    for rule in rules:
        if isinstance(rule, OrderingRule):
            needed = {rule.lower, rule.upper}
        else:
            needed = {rule.port_attribute, rule.proto_attribute}
        hit = False
        for i, m in enumerate(out):
            if not needed <= set(m.attrs):
                continue
            hit = True
            if isinstance(rule, OrderingRule):
                out[i] = _apply_ordering(m, rule, mapping)
            else:
                out[i] = _apply_port_protocol(m, rule, mapping)
        if not hit:
            logger.warning("rule %s skipped: attributes %s not jointly published",
                           rule, sorted(needed))
    return out


def post_process(published: Sequence[Marginal], mapping: BinMapping,
                 rules: Sequence = ()) -> tuple[list[Marginal], float]:
    """Full repair chain: project, reconcile shared attributes, apply
    protocol rules, then re-project to undo any negativity the edits
    reintroduced. Returns the consistent tables and the consensus total."""
    target = consensus_total(published)
    projected = [project_valid(m, target) for m in published]
    reconciled = consistency_shared(projected)
    ruled = apply_protocol_rules(reconciled, rules, mapping)
    final = [project_valid(m, target) for m in ruled]
    return final, target
