"""Record synthesis: marginal-seeded initialization, gradual updates, decoding.

The candidate dataset starts from the published tables that involve the
designated key attribute (ordered by Pearson correlation of bin indices),
then is iteratively nudged until its own marginals match every published
table. All of it is post-processing: no raw data, no budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .binning import (BinMapping, TSDIFF_ATTRIBUTE, _group_inverse, bin_bounds,
                      decode_column)
from .errors import ConfigError, DataError
from .marginals import Marginal, OrderingRule
from .privacy import substream
from .trace import FieldSchema, TraceDataset

logger = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    n_records: int | None = None          # None: rounded consensus noisy total
    key_attribute: str | None = None
    n_init_marginals: int | str = "all"
    max_iterations: int = 200
    alpha0: float = 1.0                   # initial per-table update fraction
    alpha_decay: float = 0.84             # cooling factor applied when progress stalls
    convergence_tol: float = 1e-3         # stall threshold on mean L1 improvement
    init_mode: str = "marginal"           # "marginal" (seeded) or "uniform"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not 0 < self.alpha_decay < 1:
            raise ConfigError("alpha_decay must lie in (0, 1)")
        if self.init_mode not in ("marginal", "uniform"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class SynthState:
    attributes: tuple[str, ...]
    domain_sizes: tuple[int, ...]
    codes: np.ndarray  # (n, d) bin indices
    distance_history: dict[tuple[str, ...], list[float]] = field(default_factory=dict)
    iterations_run: int = 0

    @property
    def n(self) -> int:
        return self.codes.shape[0]


def pearson_from_marginal(marginal: Marginal) -> float:
    """Pearson correlation of the two bin-index axes of a 2-way table.

    Computed on the published (noisy) cells, clamped non-negative, so it
    costs no privacy budget. Zero variance on either axis gives 0.
    """
    if len(marginal.attrs) != 2:
        raise ConfigError(f"Pearson needs a 2-way marginal, got {marginal.attrs}")
    w = np.clip(marginal.cells, 0.0, None).astype(np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0
    w /= total
    i = np.arange(w.shape[0], dtype=np.float64)
    j = np.arange(w.shape[1], dtype=np.float64)
    pi, pj = w.sum(axis=1), w.sum(axis=0)
    mi, mj = float(i @ pi), float(j @ pj)
    vi = float((i - mi) ** 2 @ pi)
    vj = float((j - mj) ** 2 @ pj)
    if vi <= 0 or vj <= 0:
        return 0.0
    cov = float(((i - mi)[:, None] * (j - mj)[None, :] * w).sum())
    return float(np.clip(cov / math.sqrt(vi * vj), -1.0, 1.0))


def _key_correlation(marginal: Marginal, key: str) -> float:
    """|Pearson| of a key-bearing table; multi-way tables score by their
    strongest (key, other) 2-way projection."""
    if len(marginal.attrs) == 2:
        return abs(pearson_from_marginal(marginal))
    key_axis = marginal.attrs.index(key)
    best = 0.0
    for axis, attr in enumerate(marginal.attrs):
        if attr == key:
            continue
        keep = (key_axis, axis)
        drop = tuple(i for i in range(marginal.cells.ndim) if i not in keep)
        pair_cells = marginal.cells.sum(axis=drop)
        if key_axis > axis:
            pair_cells = pair_cells.T
        pair = Marginal((key, attr), pair_cells, marginal.total)
        best = max(best, abs(pearson_from_marginal(pair)))
    return best


def _sample_cells(cells: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    p = np.clip(cells, 0.0, None).ravel()
    total = p.sum()
    if total <= 0:
        p = np.ones_like(p)
        total = p.sum()
    return rng.choice(p.size, size=size, p=p / total)


def initialize_dataset(published: Sequence[Marginal], mapping: BinMapping,
                       config: SynthConfig, rng: np.random.Generator) -> SynthState:
    """Seed the candidate dataset.

    Marginal mode: rank key-bearing multi-way tables by |Pearson|, sample
    the strongest one jointly, then fill each further table's new
    attributes conditionally on what the row already has (falling back to
    the table's own projection when a conditional slice is empty).
    Attributes no seeding table covers are drawn from their one-way
    tables. Uniform mode draws every attribute uniformly; it exists as the
    un-seeded baseline.
    """
    if config.n_records is None or config.n_records <= 0:
        raise ConfigError("n_records must be resolved to a positive count before initialization")
    attrs = mapping.attributes
    sizes = tuple(mapping.specs[a].domain_size for a in attrs)
    n, d = config.n_records, len(attrs)
    codes = np.full((n, d), -1, dtype=np.int64)
    state = SynthState(attrs, sizes, codes)

    if config.init_mode == "uniform":
        for j, k in enumerate(sizes):
            codes[:, j] = rng.integers(0, k, size=n)
        return state

    key = config.key_attribute
    seeds = [m for m in published if len(m.attrs) >= 2 and key is not None and key in m.attrs]
    if key is not None and not seeds:
        logger.warning("no published table contains key attribute %r; "
                       "falling back to independent one-way initialization", key)
    seeds.sort(key=lambda m: -_key_correlation(m, key))
    if config.n_init_marginals != "all":
        seeds = seeds[: int(config.n_init_marginals)]

    filled: list[str] = []
    for m in seeds:
        new = [a for a in m.attrs if a not in filled]
        if not new:
            continue
        shared = [a for a in m.attrs if a in filled]
        m_shape = m.cells.shape
        s_axes = tuple(m.attrs.index(a) for a in shared)
        n_axes = tuple(m.attrs.index(a) for a in new)
        table = np.transpose(np.clip(m.cells, 0.0, None), s_axes + n_axes)
        s_shape = tuple(m_shape[i] for i in s_axes)
        n_shape = tuple(m_shape[i] for i in n_axes)
        table = table.reshape(int(np.prod(s_shape, dtype=np.int64)) if s_shape else 1, -1)

        if not shared:
            draws = _sample_cells(table[0], n, rng)
        else:
            s_cols = [codes[:, attrs.index(a)] for a in shared]
            row_slice = np.ravel_multi_index(s_cols, s_shape)
            draws = np.empty(n, dtype=np.int64)
            fallback = table.sum(axis=0)
            for s in np.unique(row_slice):
                rows = np.nonzero(row_slice == s)[0]
                weights = table[s]
                if weights.sum() <= 0:
                    weights = fallback
                draws[rows] = _sample_cells(weights, rows.size, rng)
        for axis_values, a in zip(np.unravel_index(draws, n_shape), new):
            codes[:, attrs.index(a)] = axis_values
        filled.extend(new)

    one_ways = {m.attrs[0]: m for m in published if len(m.attrs) == 1}
    for j, a in enumerate(attrs):
        if a in filled:
            continue
        if a in one_ways:
            codes[:, j] = _sample_cells(one_ways[a].cells, n, rng)
        else:
            codes[:, j] = rng.integers(0, sizes[j], size=n)
    return state


def _marginal_axes(state: SynthState, marginal: Marginal) -> tuple[tuple[int, ...], tuple[int, ...]]:
    axes = tuple(state.attributes.index(a) for a in marginal.attrs)
    shape = tuple(state.domain_sizes[ax] for ax in axes)
    return axes, shape


def _current_counts(state: SynthState, axes, shape) -> tuple[np.ndarray, np.ndarray]:
    flat = np.ravel_multi_index([state.codes[:, ax] for ax in axes], shape)
    return np.bincount(flat, minlength=int(np.prod(shape))).astype(np.float64), flat


def normalized_l1(state: SynthState, marginal: Marginal) -> float:
    """L1 gap between the state's marginal and the published one, over n."""
    axes, shape = _marginal_axes(state, marginal)
    cur, _ = _current_counts(state, axes, shape)
    target = np.clip(marginal.cells, 0.0, None).ravel()
    if target.sum() > 0:
        target = target * (state.n / target.sum())
    return float(np.abs(cur - target).sum() / state.n)


def _service_marginal(state: SynthState, marginal: Marginal, budget: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """One repair step for one table; returns (gap before, gap after).

    Rows move from over-represented to under-represented cells: a donor
    slot from an over cell is overwritten either with a full copy of an
    existing row of the needy cell (duplicate, keeps that cell's joint
    profile intact and so spares the other tables) or, when the needy
    combination has no rows yet, by rewriting just the serviced
    attributes (replace). When integral donors run out, the remaining
    slots come from the cells with the largest fractional excess, but
    only while the swap still shrinks this table's gap.
    """
    n = state.n
    axes, shape = _marginal_axes(state, marginal)
    cur, cell_of_row = _current_counts(state, axes, shape)
    target = np.clip(marginal.cells, 0.0, None).ravel()
    if target.sum() > 0:
        target = target * (n / target.sum())
    diff = target - cur
    d_before = float(np.abs(diff).sum())
    need = np.floor(np.clip(diff, 0.0, None) + 0.5).astype(np.int64)
    surplus = np.floor(np.clip(-diff, 0.0, None) + 0.5).astype(np.int64)
    moves = int(min(need.sum(), budget))
    if moves == 0:
        return d_before, d_before

    # Rows grouped by cell, randomly ordered within each cell.
    perm = rng.permutation(n)
    order = np.argsort(cell_of_row[perm], kind="stable")
    rows_by_cell = perm[order]
    counts = np.bincount(cell_of_row, minlength=len(target)).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)))

    donor_rows = []
    for c in np.nonzero(surplus)[0]:
        take = int(surplus[c])
        donor_rows.append(rows_by_cell[offsets[c]: offsets[c] + take])
    donor_rows = (np.concatenate(donor_rows) if donor_rows
                  else np.empty(0, dtype=np.int64))
    donor_rows = donor_rows[rng.permutation(donor_rows.size)]

    recipients = np.repeat(np.arange(len(target)), need)
    recipients = recipients[rng.permutation(recipients.size)]

    paired = min(moves, donor_rows.size, recipients.size)
    slots = donor_rows[:paired]
    needed = recipients[:paired]
    if paired:
        populated = counts[needed] > 0
        if populated.any():
            dup_slots = slots[populated]
            dup_cells = needed[populated]
            picks = offsets[dup_cells] + rng.integers(0, counts[dup_cells])
            state.codes[dup_slots] = state.codes[rows_by_cell[picks]]
        if (~populated).any():
            rep_slots = slots[~populated]
            rep_cells = needed[~populated]
            for axis_values, ax in zip(np.unravel_index(rep_cells, shape), axes):
                state.codes[rep_slots, ax] = axis_values
        np.subtract.at(diff, cell_of_row[slots], -1.0)  # donors leave their cells
        np.subtract.at(diff, needed, 1.0)

    shortfall = moves - paired
    if shortfall > 0:
        used = set(slots.tolist())
        leftovers = recipients[paired:moves]
        excess_order = np.argsort(diff, kind="stable")  # most negative first
        slot_iter = iter(
            row for c in excess_order if diff[c] < 0
            for row in rows_by_cell[offsets[c]: offsets[c + 1]] if row not in used)
        for c in leftovers:
            gain = abs(diff[c]) - abs(diff[c] - 1.0)
            slot = next(slot_iter, None)
            if slot is None:
                break
            source_cell = cell_of_row[slot]
            penalty = abs(diff[source_cell] + 1.0) - abs(diff[source_cell])
            if gain <= penalty:
                continue
            c_rows = rows_by_cell[offsets[c]: offsets[c + 1]]
            c_rows = c_rows[c_rows != slot]
            if c_rows.size:
                state.codes[slot] = state.codes[c_rows[rng.integers(0, c_rows.size)]]
            else:
                for axis_values, ax in zip(np.unravel_index(int(c), shape), axes):
                    state.codes[slot, ax] = axis_values
            diff[source_cell] += 1.0
            diff[c] -= 1.0
            used.add(int(slot))

    d_after = float(np.abs(diff).sum())
    return d_before, d_after


def gum_update(state: SynthState, marginals: Sequence[Marginal], config: SynthConfig,
               rng: np.random.Generator) -> SynthState:
    """Iteratively repair the candidate dataset against every published table.

    Per pass each table may move up to alpha * n rows. Overlapping tables
    contend (fixing one disturbs another), so instead of a fixed cooling
    schedule, alpha shrinks by alpha_decay whenever the mean normalized-L1
    improvement across tables stalls below the tolerance, and the loop
    ends once the budget bottoms out at a single row (or at
    max_iterations). The state with the smallest worst-table gap seen
    along the way is what gets returned; contention makes the raw
    trajectory oscillate, and there is no reason to keep a late iterate
    that a mid-run one beats.

    History entry 0 is post-initialization, entries 1..T follow the
    passes, and a final entry records the returned snapshot.
    """
    if not marginals:
        return state
    history = state.distance_history
    for m in marginals:
        history.setdefault(m.attrs, []).append(normalized_l1(state, m))
    prev = np.array([history[m.attrs][-1] for m in marginals])

    best_codes = state.codes.copy()
    best_dists = prev.copy()
    best_score = (float(prev.max()), float(prev.mean()))
    alpha = config.alpha0
    for t in range(config.max_iterations):
        budget = max(1, int(round(alpha * state.n)))
        for m in marginals:
            d_before, d_after = _service_marginal(state, m, budget, rng)
            if d_after > d_before + 1e-6:
                raise AssertionError(
                    f"update on {m.attrs} increased its own gap: {d_before} -> {d_after}")
        dists = np.array([normalized_l1(state, m) for m in marginals])
        for m, d in zip(marginals, dists):
            history[m.attrs].append(float(d))
        state.iterations_run = t + 1
        score = (float(dists.max()), float(dists.mean()))
        if score < best_score:
            best_score = score
            best_codes = state.codes.copy()
            best_dists = dists.copy()
        if best_score[0] == 0.0:
            break
        improvement = float((prev - dists).mean())
        prev = dists
        if improvement < config.convergence_tol:
            alpha *= config.alpha_decay
            if alpha * state.n < 1.0:
                break
    state.codes = best_codes
    for m, d in zip(marginals, best_dists):
        history[m.attrs].append(float(d))
    return state


# -- decoding and timestamp reconstruction --------------------------------

def _tsdiff_bin_params(spec):
    los, his = [], []
    for b in spec.bins:
        bounds = bin_bounds(b)
        los.append(bounds[0])
        his.append(bounds[1])
    los = np.asarray(los, dtype=np.float64)
    his = np.asarray(his, dtype=np.float64)
    widths = his - los + 1.0
    mids = 0.5 * (los + his)
    return los, his, mids, widths


def reconstruct_timestamps(tsdiff_codes: np.ndarray | None, cluster_ids: np.ndarray,
                           mapping: BinMapping, rng: np.random.Generator) -> np.ndarray:
    """Rebuild timestamps from per-group gap bins.

    The first record of each group draws a base time from the published
    base-window table; every later record adds a Gaussian draw centred on
    its gap bin's midpoint (sigma = width/4), clamped into the bin and
    rounded to integer milliseconds.
    """
    spec = mapping.base_ts_spec
    if spec is None:
        raise ConfigError("mapping carries no base-time windows")
    n = len(cluster_ids)
    n_clusters = int(cluster_ids.max()) + 1 if n else 0

    weights = mapping.base_ts_noisy
    weights = (np.clip(weights, 0.0, None) if weights is not None
               else np.ones(spec.domain_size))
    if weights.sum() <= 0:
        weights = np.ones(spec.domain_size)
    win = rng.choice(spec.domain_size, size=n_clusters, p=weights / weights.sum())
    win_lo = np.array([bin_bounds(b)[0] for b in spec.bins], dtype=np.int64)
    win_hi = np.array([bin_bounds(b)[1] for b in spec.bins], dtype=np.int64)
    bases = rng.integers(win_lo[win], win_hi[win] + 1)

    if tsdiff_codes is not None:
        los, his, mids, widths = _tsdiff_bin_params(mapping.specs[TSDIFF_ATTRIBUTE])
        raw = rng.normal(mids[tsdiff_codes], widths[tsdiff_codes] / 4.0)
        inc = np.rint(np.clip(raw, los[tsdiff_codes], his[tsdiff_codes])).astype(np.int64)
    else:
        inc = np.zeros(n, dtype=np.int64)

    order = np.argsort(cluster_ids, kind="stable")
    sorted_clusters = cluster_ids[order]
    firsts = np.ones(n, dtype=bool)
    firsts[1:] = sorted_clusters[1:] != sorted_clusters[:-1]
    vals = inc[order].astype(np.int64)
    vals[firsts] = bases[sorted_clusters[firsts]]
    cums = np.cumsum(vals)
    start_idx = np.nonzero(firsts)[0]
    seg_offsets = cums[start_idx] - vals[start_idx]
    counts = np.diff(np.append(start_idx, n))
    ts_sorted = cums - np.repeat(seg_offsets, counts)
    ts = np.empty(n, dtype=np.int64)
    ts[order] = ts_sorted
    return ts


def decode_state(state: SynthState, mapping: BinMapping, schema: Sequence[FieldSchema],
                 group_key: Sequence[str], seed: int, rules: Sequence = ()) -> TraceDataset:
    """Turn bin indices back into raw values.

    Group-identifier attributes decode once per encoded cluster when
    timestamps are being reconstructed, so synthetic flows keep a shared
    identity. Ordering rules clamp the dependent attribute row by row so
    no output record can violate them.
    """
    rng = substream(seed, "synth", "decode")
    attrs = state.attributes
    reconstruct = mapping.base_ts_spec is not None
    cluster_ids = None
    if reconstruct:
        key_axes = [attrs.index(a) for a in group_key if a in attrs]
        if key_axes:
            cluster_ids = _group_inverse([state.codes[:, ax] for ax in key_axes])
        else:
            cluster_ids = np.arange(state.n, dtype=np.int64)

    order = list(attrs)
    for rule in rules:
        if isinstance(rule, OrderingRule) and rule.lower in order and rule.upper in order:
            li, ui = order.index(rule.lower), order.index(rule.upper)
            if li > ui:
                order[li], order[ui] = order[ui], order[li]

    lower_of = {r.upper: r.lower for r in rules if isinstance(r, OrderingRule)}
    key_set = set(group_key) if reconstruct else set()
    columns: dict[str, np.ndarray] = {}
    for a in order:
        if a == TSDIFF_ATTRIBUTE:
            continue
        spec = mapping.specs[a]
        codes = state.codes[:, attrs.index(a)]
        clamp = None
        if a in lower_of and lower_of[a] in columns:
            clamp = columns[lower_of[a]]
        if a in key_set and cluster_ids is not None and clamp is None:
            first_rows = np.unique(cluster_ids, return_index=True)[1]
            per_cluster = decode_column(spec, codes[first_rows], rng)
            columns[a] = per_cluster[cluster_ids]
        else:
            columns[a] = decode_column(spec, codes, rng, lower_clamp=clamp)

    if reconstruct:
        ts_attr = next(f.name for f in schema if f.kind == "timestamp")
        tsdiff_codes = (state.codes[:, attrs.index(TSDIFF_ATTRIBUTE)]
                        if TSDIFF_ATTRIBUTE in attrs else None)
        columns[ts_attr] = reconstruct_timestamps(
            tsdiff_codes, cluster_ids, mapping, substream(seed, "synth", "ts"))

    out_schema = tuple(f for f in schema if f.name != TSDIFF_ATTRIBUTE)
    missing = [f.name for f in out_schema if f.name not in columns]
    if missing:
        raise DataError(f"decode produced no values for: {missing}")
    return TraceDataset(out_schema, {f.name: columns[f.name] for f in out_schema},
                        provenance="synthetic")


def synthesize(marginals: Sequence[Marginal], mapping: BinMapping,
               schema: Sequence[FieldSchema], config: SynthConfig, seed: int,
               group_key: Sequence[str] = (), rules: Sequence = ()):
    """Full synthesis: initialize, update until matched, decode, rebuild time.

    Returns (synthetic dataset, final state); the state carries the
    per-iteration distance history.
    """
    state = initialize_dataset(marginals, mapping, config, substream(seed, "synth", "init"))
    state = gum_update(state, marginals, config, substream(seed, "synth", "gum"))
    dataset = decode_state(state, mapping, schema, group_key, seed, rules)
    return dataset, state
