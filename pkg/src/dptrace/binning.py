"""Invertible per-attribute binning and dataset encoding.

Type-dependent rules build an initial partition of each attribute's
observed domain (IP /30 prefixes, width-10 port ranges above the common
range, log(1+x) ranges for counters). A DP frequency pass then merges
low-count bins using noisy one-way tables, which double as the published
one-way marginals. Timestamps are never binned directly: inter-record
gaps within a flow group enter as the auxiliary ``tsdiff`` attribute, and
group base times are kept as fixed-width windows for reconstruction.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .privacy import BudgetLedger, gaussian_mechanism, gaussian_sigma, per_marginal_rho
from .trace import FieldSchema, TraceDataset, PORT_MAX, int_to_ip

logger = logging.getLogger(__name__)

TSDIFF_ATTRIBUTE = "tsdiff"
PREFIX_SPAN = 4  # /30 prefix covers four addresses


# -- bin descriptors -----------------------------------------------------

@dataclass(frozen=True)
class SingletonBin:
    value: object


@dataclass(frozen=True)
class IntRangeBin:
    lo: int
    hi: int  # inclusive


@dataclass(frozen=True)
class FloatRangeBin:
    lo: float
    hi: float
    closed_hi: bool = False  # last bin of a partition includes its upper edge


@dataclass(frozen=True)
class IpPrefixBin:
    base: int  # low two bits zero
    excluded: tuple = ()  # member addresses carved out as singleton bins


@dataclass(frozen=True)
class OtherBin:
    """Catch-all bin produced by the frequency merge; members stay disjoint."""

    members: tuple


def ip_prefix_bin(addr: int) -> int:
    """Base address of the /30 prefix containing ``addr`` (low 2 bits masked)."""
    return int(addr) & ~0x3


def bin_cardinality(descriptor) -> float:
    if isinstance(descriptor, SingletonBin):
        return 1
    if isinstance(descriptor, IntRangeBin):
        return descriptor.hi - descriptor.lo + 1
    if isinstance(descriptor, FloatRangeBin):
        return math.inf
    if isinstance(descriptor, IpPrefixBin):
        return PREFIX_SPAN - len(descriptor.excluded)
    if isinstance(descriptor, OtherBin):
        return sum(bin_cardinality(m) for m in descriptor.members)
    raise TypeError(f"not a bin descriptor: {descriptor!r}")


def bin_bounds(descriptor) -> tuple[float, float] | None:
    """Numeric (lo, hi) of a bin, or None for non-numeric categories."""
    if isinstance(descriptor, SingletonBin):
        v = descriptor.value
        if isinstance(v, (int, float, np.integer, np.floating)):
            return float(v), float(v)
        return None
    if isinstance(descriptor, IntRangeBin):
        return float(descriptor.lo), float(descriptor.hi)
    if isinstance(descriptor, FloatRangeBin):
        return descriptor.lo, descriptor.hi
    if isinstance(descriptor, IpPrefixBin):
        return float(descriptor.base), float(descriptor.base + PREFIX_SPAN - 1)
    if isinstance(descriptor, OtherBin):
        bounds = [bin_bounds(m) for m in descriptor.members]
        if any(b is None for b in bounds):
            return None
        return min(b[0] for b in bounds), max(b[1] for b in bounds)
    raise TypeError(f"not a bin descriptor: {descriptor!r}")


def bin_contains(descriptor, value) -> bool:
    if isinstance(descriptor, SingletonBin):
        return descriptor.value == value
    if isinstance(descriptor, IntRangeBin):
        return descriptor.lo <= value <= descriptor.hi
    if isinstance(descriptor, FloatRangeBin):
        if descriptor.closed_hi:
            return descriptor.lo <= value <= descriptor.hi
        return descriptor.lo <= value < descriptor.hi
    if isinstance(descriptor, IpPrefixBin):
        return ip_prefix_bin(value) == descriptor.base and value not in descriptor.excluded
    if isinstance(descriptor, OtherBin):
        return any(bin_contains(m, value) for m in descriptor.members)
    raise TypeError(f"not a bin descriptor: {descriptor!r}")


def bin_label(descriptor) -> str:
    if isinstance(descriptor, SingletonBin):
        return f"={descriptor.value}"
    if isinstance(descriptor, IntRangeBin):
        return f"[{descriptor.lo},{descriptor.hi}]"
    if isinstance(descriptor, FloatRangeBin):
        closer = "]" if descriptor.closed_hi else ")"
        return f"[{descriptor.lo:.6g},{descriptor.hi:.6g}{closer}"
    if isinstance(descriptor, IpPrefixBin):
        return f"{int_to_ip(descriptor.base)}/30"
    if isinstance(descriptor, OtherBin):
        return "other{" + ",".join(bin_label(m) for m in descriptor.members[:4]) + (
            ",..." if len(descriptor.members) > 4 else "") + "}"
    raise TypeError(f"not a bin descriptor: {descriptor!r}")


def decode_value(descriptor, rng: np.random.Generator, kind: str | None = None):
    """Sample one raw value uniformly from a bin.

    Port ranges are capped at 65535 regardless of the stored upper bound.
    """
    if isinstance(descriptor, SingletonBin):
        return descriptor.value
    if isinstance(descriptor, IntRangeBin):
        hi = descriptor.hi
        if kind == "port":
            hi = min(hi, PORT_MAX)
        return int(rng.integers(descriptor.lo, hi + 1))
    if isinstance(descriptor, FloatRangeBin):
        return float(rng.uniform(descriptor.lo, descriptor.hi))
    if isinstance(descriptor, IpPrefixBin):
        choices = [descriptor.base + i for i in range(PREFIX_SPAN)
                   if descriptor.base + i not in descriptor.excluded]
        return int(choices[rng.integers(0, len(choices))])
    if isinstance(descriptor, OtherBin):
        weights = np.array([bin_cardinality(m) for m in descriptor.members], dtype=np.float64)
        if not np.all(np.isfinite(weights)):
            weights = np.ones_like(weights)
        weights /= weights.sum()
        member = descriptor.members[rng.choice(len(descriptor.members), p=weights)]
        return decode_value(member, rng, kind)
    raise TypeError(f"not a bin descriptor: {descriptor!r}")


# -- per-attribute specs -------------------------------------------------

@dataclass(frozen=True)
class BinSpec:
    attribute: str
    kind: str
    bins: tuple

    @property
    def domain_size(self) -> int:
        return len(self.bins)


class _ColumnEncoder:
    """Value -> bin index lookup for one spec.

    Exact values (singletons, prefix bases, catch-all members) resolve via
    dictionaries; range bins via binary search over sorted interval edges.
    """

    def __init__(self, spec: BinSpec):
        self.spec = spec
        self.exact: dict = {}
        self.masked: dict = {}
        lows, highs, idxs = [], [], []

        def register(descriptor, index):
            if isinstance(descriptor, SingletonBin):
                self.exact[descriptor.value] = index
            elif isinstance(descriptor, IpPrefixBin):
                self.masked[descriptor.base] = index
            elif isinstance(descriptor, (IntRangeBin, FloatRangeBin)):
                lows.append(descriptor.lo)
                highs.append(descriptor)
                idxs.append(index)
            elif isinstance(descriptor, OtherBin):
                for member in descriptor.members:
                    register(member, index)
            else:
                raise TypeError(f"not a bin descriptor: {descriptor!r}")

        for i, b in enumerate(spec.bins):
            register(b, i)
        order = np.argsort(np.asarray(lows, dtype=np.float64)) if lows else []
        self.lows = [lows[i] for i in order]
        self.ranges = [highs[i] for i in order]
        self.range_idx = [idxs[i] for i in order]

    def encode_one(self, value):
        hit = self.exact.get(value)
        if hit is not None:
            return hit
        if self.spec.kind == "ip":
            # Excluded prefix members are singletons, caught by the exact map above.
            hit = self.masked.get(ip_prefix_bin(value))
            if hit is not None:
                return hit
        if self.lows:
            pos = bisect.bisect_right(self.lows, value) - 1
            if pos >= 0 and bin_contains(self.ranges[pos], value):
                return self.range_idx[pos]
        return None


def encode_column(spec: BinSpec, values: np.ndarray) -> np.ndarray:
    """Map a raw column to bin indices; unmapped values are a hard error."""
    encoder = _ColumnEncoder(spec)
    uniques, inverse = np.unique(values, return_inverse=True)
    codes = np.empty(len(uniques), dtype=np.int64)
    missing = []
    for i, v in enumerate(uniques):
        v = v if spec.kind == "categorical" else v.item()
        code = encoder.encode_one(v)
        if code is None:
            missing.append(v)
            code = -1
        codes[i] = code
    if missing:
        raise DataError(
            f"attribute {spec.attribute!r}: {len(missing)} value(s) outside every bin "
            f"(first few: {missing[:5]}); mapping and data disagree")
    return codes[inverse]


def decode_column(spec: BinSpec, indices: np.ndarray, rng: np.random.Generator,
                  lower_clamp: np.ndarray | None = None) -> np.ndarray:
    """Vectorised inverse of encode_column: one sampled raw value per row.

    ``lower_clamp`` (ordering rules such as byt >= pkt) raises each row's
    admissible lower edge; rows whose bin lies entirely below the clamp get
    the clamp value itself.
    """
    indices = np.asarray(indices, dtype=np.int64)
    return _sample_flat(tuple(spec.bins), spec.kind, indices, rng, lower_clamp)


def _sample_flat(bins: tuple, kind: str, indices: np.ndarray, rng: np.random.Generator,
                 lower: np.ndarray | None) -> np.ndarray:
    """Draw one value per row for a flat descriptor list, O(n).

    Rows are grouped by descriptor type and sampled with array bounds;
    only catch-all bins and prefix exclusions need scalar handling.
    """
    n = len(indices)
    k = len(bins)
    if kind == "categorical":
        out = np.empty(n, dtype=object)
    elif kind == "float":
        out = np.empty(n, dtype=np.float64)
    else:
        out = np.empty(n, dtype=np.int64)

    type_code = np.empty(k, dtype=np.int64)  # 0 single, 1 int range, 2 float, 3 prefix, 4 other
    lo = np.zeros(k, dtype=np.float64)
    hi = np.zeros(k, dtype=np.float64)
    singles = np.empty(k, dtype=object)
    plain_prefix = np.zeros(k, dtype=bool)
    for b, d in enumerate(bins):
        if isinstance(d, SingletonBin):
            type_code[b] = 0
            singles[b] = d.value
        elif isinstance(d, IntRangeBin):
            type_code[b] = 1
            lo[b] = d.lo
            hi[b] = min(d.hi, PORT_MAX) if kind == "port" else d.hi
        elif isinstance(d, FloatRangeBin):
            type_code[b] = 2
            lo[b], hi[b] = d.lo, d.hi
        elif isinstance(d, IpPrefixBin):
            type_code[b] = 3
            lo[b] = d.base
            plain_prefix[b] = not d.excluded
        elif isinstance(d, OtherBin):
            type_code[b] = 4
        else:
            raise TypeError(f"not a bin descriptor: {d!r}")

    row_type = type_code[indices]

    rows = np.nonzero(row_type == 0)[0]
    if rows.size:
        if kind == "categorical":
            out[rows] = singles[indices[rows]]
        else:
            values = singles[indices[rows]].astype(out.dtype)
            if lower is not None:
                values = np.maximum(values, lower[rows])
            out[rows] = values

    rows = np.nonzero(row_type == 1)[0]
    if rows.size:
        row_lo = lo[indices[rows]].astype(np.int64)
        row_hi = hi[indices[rows]].astype(np.int64)
        if lower is not None:
            row_lo = np.maximum(row_lo, lower[rows])
        blocked = row_lo > row_hi
        draws = np.where(blocked, row_lo, 0)
        free = ~blocked
        if free.any():
            draws[free] = rng.integers(row_lo[free], row_hi[free] + 1)
        out[rows] = draws

    rows = np.nonzero(row_type == 2)[0]
    if rows.size:
        row_lo = lo[indices[rows]]
        row_hi = hi[indices[rows]]
        if lower is not None:
            row_lo = np.maximum(row_lo, lower[rows])
        blocked = row_lo >= row_hi
        draws = np.where(blocked, row_lo, 0.0)
        free = ~blocked
        if free.any():
            draws[free] = rng.uniform(row_lo[free], row_hi[free])
        out[rows] = draws

    rows = np.nonzero(row_type == 3)[0]
    if rows.size:
        bases = lo[indices[rows]].astype(np.int64)
        draws = bases + rng.integers(0, PREFIX_SPAN, size=rows.size)
        fix = ~plain_prefix[indices[rows]]
        for r in np.nonzero(fix)[0]:  # exclusions are rare; scalar path
            draws[r] = decode_value(bins[indices[rows[r]]], rng)
        out[rows] = draws

    rows = np.nonzero(row_type == 4)[0]
    if rows.size:
        for b in np.unique(indices[rows]):
            sub = rows[indices[rows] == b]
            out[sub] = _sample_other(bins[b], kind, sub.size, rng,
                                     None if lower is None else lower[sub])
    return out


def _sample_other(descriptor: OtherBin, kind: str, size: int, rng: np.random.Generator,
                  lower: np.ndarray | None) -> np.ndarray:
    """Uniform draw over a catch-all's member union: pick members weighted by
    cardinality, then sample inside each, reusing the flat vector path."""
    weights = np.array([bin_cardinality(m) for m in descriptor.members], dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        weights = np.ones_like(weights)
    picks = rng.choice(len(descriptor.members), size=size, p=weights / weights.sum())
    return _sample_flat(descriptor.members, kind, picks, rng, lower)


# -- mapping construction ------------------------------------------------

@dataclass
class BinningConfig:
    ip_singleton_min: int = 8       # raw count keeping an address un-prefixed
    cat_max_domain: int = 64        # categorical domains above this get a catch-all
    log_bin_edges: int = 32         # edges of the log(1+x) grid per counter
    port_bin_width: int = 10
    port_singleton_max: int = 1023  # common ports kept away from binning
    base_ts_window_ms: int = 1000
    freq_threshold_sigmas: float = 3.0
    budget_weighting: str = "cells23"


@dataclass
class BinMapping:
    """One BinSpec per non-timestamp attribute (tsdiff included).

    ``base_ts_spec`` holds the fixed-width windows of per-group first
    timestamps; its noisy counts are attached by the frequency pass and
    consumed only by timestamp reconstruction.
    """

    specs: dict[str, BinSpec]
    base_ts_spec: BinSpec | None = None
    base_ts_noisy: np.ndarray | None = None

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(self.specs)

    @property
    def domain_sizes(self) -> dict[str, int]:
        return {a: s.domain_size for a, s in self.specs.items()}

    def as_dict(self) -> dict:
        def desc(d):
            if isinstance(d, SingletonBin):
                return {"type": "singleton", "value": _jsonable(d.value)}
            if isinstance(d, IntRangeBin):
                return {"type": "int_range", "lo": d.lo, "hi": d.hi}
            if isinstance(d, FloatRangeBin):
                return {"type": "float_range", "lo": d.lo, "hi": d.hi, "closed_hi": d.closed_hi}
            if isinstance(d, IpPrefixBin):
                return {"type": "ip_prefix", "base": d.base,
                        "excluded": [int(x) for x in d.excluded]}
            if isinstance(d, OtherBin):
                return {"type": "other", "members": [desc(m) for m in d.members]}
            raise TypeError(repr(d))

        payload = {
            "attributes": {
                a: {"kind": s.kind, "bins": [desc(b) for b in s.bins]}
                for a, s in self.specs.items()
            }
        }
        if self.base_ts_spec is not None:
            payload["base_ts"] = {
                "bins": [desc(b) for b in self.base_ts_spec.bins],
                "noisy_counts": None if self.base_ts_noisy is None
                else [float(x) for x in self.base_ts_noisy],
            }
        return payload


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _ip_bins(column: np.ndarray, cfg: BinningConfig) -> tuple:
    values, counts = np.unique(column, return_counts=True)
    keep = counts >= cfg.ip_singleton_min
    singles = [int(v) for v in values[keep]]
    prefixes = sorted({ip_prefix_bin(int(v)) for v in values[~keep]})
    single_set = set(singles)
    bins = [SingletonBin(v) for v in singles]
    for base in prefixes:
        excluded = tuple(a for a in range(base, base + PREFIX_SPAN) if a in single_set)
        bins.append(IpPrefixBin(base, excluded))
    return tuple(bins)


def _port_bins(column: np.ndarray, cfg: BinningConfig) -> tuple:
    values = np.unique(column)
    low = values[values <= cfg.port_singleton_max]
    high = values[values > cfg.port_singleton_max]
    bins = [SingletonBin(int(v)) for v in low]
    width = cfg.port_bin_width
    first_lo = cfg.port_singleton_max + 1
    seen = set()
    for v in high:
        v = int(v)
        lo = (v // width) * width
        if lo < first_lo:
            lo = first_lo
        hi = min((v // width) * width + width - 1, PORT_MAX)
        if (lo, hi) not in seen:
            seen.add((lo, hi))
            bins.append(IntRangeBin(lo, hi))
    bins[len(low):] = sorted(bins[len(low):], key=lambda b: b.lo)
    return tuple(bins)


def _categorical_bins(column: np.ndarray, cfg: BinningConfig) -> tuple:
    values, counts = np.unique(column, return_counts=True)
    if len(values) <= cfg.cat_max_domain:
        return tuple(SingletonBin(v) for v in values)
    # Oversized domain: keep the most frequent values, pool the tail.
    order = np.argsort(-counts, kind="stable")
    head = sorted(values[order[: cfg.cat_max_domain - 1]])
    tail = sorted(values[order[cfg.cat_max_domain - 1:]])
    bins = [SingletonBin(v) for v in head]
    bins.append(OtherBin(tuple(SingletonBin(v) for v in tail)))
    return tuple(bins)


def _log_int_bins(column: np.ndarray, edges: int) -> tuple:
    vmin = int(column.min())
    vmax = int(column.max())
    if vmin < 0:
        raise DataError("log binning requires non-negative values")
    if vmin == vmax:
        return (SingletonBin(vmin),)
    grid = np.linspace(math.log1p(vmin), math.log1p(vmax), edges)
    cuts = np.ceil(np.expm1(grid)).astype(np.int64)
    cuts[0] = vmin
    cuts = np.unique(cuts)
    cuts = np.append(cuts, vmax + 1)
    bins = []
    for lo, nxt in zip(cuts[:-1], cuts[1:]):
        if nxt - 1 >= lo:
            bins.append(IntRangeBin(int(lo), int(nxt - 1)))
    return tuple(bins)


def _log_float_bins(column: np.ndarray, edges: int) -> tuple:
    vmin = float(column.min())
    vmax = float(column.max())
    if vmin < 0:
        raise DataError("log binning requires non-negative values")
    if vmin == vmax:
        return (SingletonBin(vmin),)
    grid = np.linspace(math.log1p(vmin), math.log1p(vmax), edges)
    cuts = np.unique(np.expm1(grid))
    cuts[0], cuts[-1] = vmin, vmax
    bins = []
    for i, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
        bins.append(FloatRangeBin(float(lo), float(hi), closed_hi=(i == len(cuts) - 2)))
    return tuple(bins)


def _group_inverse(columns: Sequence[np.ndarray]) -> np.ndarray:
    """Group id per row for rows agreeing on every key column."""
    if not columns:
        raise ConfigError("group key must name at least one attribute")
    codes = []
    for col in columns:
        _, inv = np.unique(col, return_inverse=True)
        codes.append(inv)
    order = np.lexsort(tuple(reversed(codes)))
    fresh = np.zeros(len(order), dtype=bool)
    fresh[0] = True
    for c in codes:
        sorted_c = c[order]
        fresh[1:] |= sorted_c[1:] != sorted_c[:-1]
    ids_sorted = np.cumsum(fresh) - 1
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = ids_sorted
    return inverse


def add_tsdiff(dataset: TraceDataset, group_key: Sequence[str] | None = None) -> TraceDataset:
    """Append the per-group inter-record timestamp gap attribute.

    Records sharing the group key are ordered by timestamp (stable for
    ties); the first record of each group gets 0 so that group membership
    does not leak into an extra category.
    """
    ts_attr = dataset.timestamp_attribute
    if ts_attr is None:
        raise DataError("dataset has no timestamp attribute")
    group_key = tuple(group_key) if group_key else dataset.group_key_attributes()
    missing = [a for a in group_key if a not in dataset.columns]
    if missing:
        raise DataError(f"group key attributes missing from dataset: {missing}")
    ts = dataset.columns[ts_attr]
    groups = _group_inverse([dataset.columns[a] for a in group_key])
    order = np.lexsort((ts, groups))
    sorted_groups = groups[order]
    sorted_ts = ts[order]
    diffs = np.empty(dataset.n, dtype=np.int64)
    diffs[0] = 0
    diffs[1:] = sorted_ts[1:] - sorted_ts[:-1]
    firsts = np.zeros(dataset.n, dtype=bool)
    firsts[0] = True
    firsts[1:] = sorted_groups[1:] != sorted_groups[:-1]
    diffs[firsts] = 0
    tsdiff = np.empty(dataset.n, dtype=np.int64)
    tsdiff[order] = diffs
    return dataset.with_column(FieldSchema(TSDIFF_ATTRIBUTE, "integer", "feature"), tsdiff)


def type_dependent_bins(dataset: TraceDataset, config: BinningConfig | None = None,
                        group_key: Sequence[str] | None = None) -> BinMapping:
    """Build the initial per-attribute partitions from the attribute kinds."""
    cfg = config or BinningConfig()
    specs: dict[str, BinSpec] = {}
    ts_attr = dataset.timestamp_attribute
    for f in dataset.schema:
        col = dataset.columns[f.name]
        if f.kind == "timestamp":
            continue
        if f.kind == "ip":
            bins = _ip_bins(col, cfg)
        elif f.kind == "port":
            bins = _port_bins(col, cfg)
        elif f.kind == "categorical":
            bins = _categorical_bins(col, cfg)
        elif f.kind == "integer":
            bins = _log_int_bins(col, cfg.log_bin_edges)
        elif f.kind == "float":
            bins = _log_float_bins(col, cfg.log_bin_edges)
        else:
            raise ConfigError(f"unknown field kind {f.kind!r}")
        specs[f.name] = BinSpec(f.name, f.kind, bins)

    mapping = BinMapping(specs)
    if ts_attr is not None:
        key = tuple(group_key) if group_key else dataset.group_key_attributes()
        key = tuple(a for a in key if a != TSDIFF_ATTRIBUTE)
        ts = dataset.columns[ts_attr]
        groups = _group_inverse([dataset.columns[a] for a in key])
        n_groups = int(groups.max()) + 1
        bases = np.full(n_groups, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(bases, groups, ts)
        width = cfg.base_ts_window_ms
        starts = np.unique((bases // width) * width)
        windows = tuple(IntRangeBin(int(s), int(s) + width - 1) for s in starts)
        mapping.base_ts_spec = BinSpec(ts_attr, "timestamp", windows)
    return mapping


# -- frequency-dependent refinement --------------------------------------

@dataclass(frozen=True)
class OneWayMarginal:
    """Noisy per-attribute bin counts published by the frequency pass."""

    attribute: str
    counts: np.ndarray
    rho: float


def merge_ordered_bins(bins: Sequence, noisy: np.ndarray, threshold: float):
    """Coalesce runs of adjacent low-count bins of an ordered attribute.

    Maximal runs of bins below the threshold merge into one range; an
    isolated low bin absorbs whichever neighbour has the smaller count.
    Returns (new bins, new noisy counts).
    """
    k = len(bins)
    if k <= 1:
        return tuple(bins), np.asarray(noisy, dtype=np.float64)
    small = np.asarray(noisy) < threshold
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        parent[find(j)] = find(i)

    i = 0
    while i < k:
        if not small[i]:
            i += 1
            continue
        j = i
        while j + 1 < k and small[j + 1]:
            j += 1
        if j > i:
            for m in range(i, j):
                union(m, m + 1)
        else:
            left = noisy[i - 1] if i > 0 else math.inf
            right = noisy[i + 1] if i + 1 < k else math.inf
            if right <= left:
                union(i, i + 1)
            else:
                union(i - 1, i)
        i = j + 1

    groups: dict[int, list[int]] = {}
    for idx in range(k):
        groups.setdefault(find(idx), []).append(idx)
    new_bins, new_counts = [], []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = sorted(groups[root])
        if len(members) == 1:
            new_bins.append(bins[members[0]])
        else:
            lo_bounds = bin_bounds(bins[members[0]])
            hi_bounds = bin_bounds(bins[members[-1]])
            first, last = bins[members[0]], bins[members[-1]]
            if isinstance(first, FloatRangeBin) or isinstance(last, FloatRangeBin):
                new_bins.append(FloatRangeBin(lo_bounds[0], hi_bounds[1],
                                              closed_hi=getattr(last, "closed_hi", False)))
            else:
                new_bins.append(IntRangeBin(int(lo_bounds[0]), int(hi_bounds[1])))
        new_counts.append(float(sum(noisy[m] for m in members)))
    return tuple(new_bins), np.asarray(new_counts, dtype=np.float64)


def merge_unordered_bins(bins: Sequence, noisy: np.ndarray, threshold: float):
    """Pool the low-count bins of a nominal attribute into one catch-all.

    Needs at least two low bins to act; a single low bin pooled with
    itself would change nothing.
    """
    small = [i for i, c in enumerate(noisy) if c < threshold]
    if len(small) < 2:
        return tuple(bins), np.asarray(noisy, dtype=np.float64)
    small_set = set(small)
    members = []
    for i in small:
        b = bins[i]
        members.extend(b.members if isinstance(b, OtherBin) else (b,))
    new_bins = [b for i, b in enumerate(bins) if i not in small_set]
    new_counts = [float(noisy[i]) for i in range(len(bins)) if i not in small_set]
    new_bins.append(OtherBin(tuple(members)))
    new_counts.append(float(sum(noisy[i] for i in small)))
    return tuple(new_bins), np.asarray(new_counts, dtype=np.float64)


def frequency_dependent_merge(mapping: BinMapping, dataset: TraceDataset, rho1: float,
                              rng: np.random.Generator, ledger: BudgetLedger | None = None,
                              config: BinningConfig | None = None):
    """Publish noisy one-way tables and merge bins the noise would drown.

    The stage budget is split across attributes (base-time windows
    included) by cell count; each attribute's merge threshold defaults to
    three times its own noise scale. Returns the refined mapping together
    with the noisy one-way marginals re-expressed over the merged bins, so
    they can be reused downstream without a second spend.
    """
    if rho1 <= 0:
        raise ConfigError(f"rho1 must be positive, got {rho1}")
    cfg = config or BinningConfig()
    names = list(mapping.specs)
    sizes = [mapping.specs[a].domain_size for a in names]
    has_base = mapping.base_ts_spec is not None
    if has_base:
        names.append("__base_ts__")
        sizes.append(mapping.base_ts_spec.domain_size)
    shares = per_marginal_rho(rho1, sizes, weighting=cfg.budget_weighting)

    new_specs: dict[str, BinSpec] = {}
    one_way: dict[str, OneWayMarginal] = {}
    base_spec, base_noisy = mapping.base_ts_spec, None
    ordered_kinds = {"integer", "float"}

    for name, rho_a in zip(names, shares):
        if name == "__base_ts__":
            spec = mapping.base_ts_spec
            counts = _base_ts_counts(dataset, spec, cfg)
        else:
            spec = mapping.specs[name]
            counts = np.bincount(encode_column(spec, dataset.columns[name]),
                                 minlength=spec.domain_size).astype(np.float64)
        noisy = gaussian_mechanism(counts, rho_a, rng, ledger, stage=f"binning:{name}")
        threshold = cfg.freq_threshold_sigmas * gaussian_sigma(rho_a)
        if spec.kind in ordered_kinds or name == "__base_ts__":
            bins, merged = merge_ordered_bins(spec.bins, noisy, threshold)
        else:
            bins, merged = merge_unordered_bins(spec.bins, noisy, threshold)
        refined = BinSpec(spec.attribute, spec.kind, bins)
        if name == "__base_ts__":
            base_spec, base_noisy = refined, merged
        else:
            new_specs[name] = refined
            one_way[name] = OneWayMarginal(name, merged, float(rho_a))

    refined_mapping = BinMapping(new_specs, base_spec, base_noisy)
    return refined_mapping, one_way


def _base_ts_counts(dataset: TraceDataset, spec: BinSpec, cfg: BinningConfig) -> np.ndarray:
    ts_attr = dataset.timestamp_attribute
    key = tuple(a for a in dataset.group_key_attributes() if a != TSDIFF_ATTRIBUTE)
    groups = _group_inverse([dataset.columns[a] for a in key])
    n_groups = int(groups.max()) + 1
    bases = np.full(n_groups, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(bases, groups, dataset.columns[ts_attr])
    return np.bincount(encode_column(spec, bases), minlength=spec.domain_size).astype(np.float64)


# -- encoding ------------------------------------------------------------

@dataclass
class EncodedDataset:
    """Rows of bin indices over the mapping's attribute order."""

    attributes: tuple[str, ...]
    codes: np.ndarray  # (n, d) int64
    domain_sizes: tuple[int, ...]
    group_key: tuple[str, ...]
    ts: np.ndarray | None = None  # raw timestamps held aside, never encoded

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    def column(self, attribute: str) -> np.ndarray:
        return self.codes[:, self.attributes.index(attribute)]


def encode(dataset: TraceDataset, mapping: BinMapping,
           group_key: Sequence[str] | None = None) -> EncodedDataset:
    """Replace every value by its bin index; timestamps ride along unencoded."""
    names = mapping.attributes
    missing = [a for a in dataset.attribute_names
               if a not in names and dataset.kind_of(a) != "timestamp"]
    if missing:
        raise DataError(f"mapping does not cover attributes: {missing}")
    codes = np.empty((dataset.n, len(names)), dtype=np.int64)
    for j, a in enumerate(names):
        codes[:, j] = encode_column(mapping.specs[a], dataset.columns[a])
    key = tuple(group_key) if group_key else dataset.group_key_attributes()
    key = tuple(a for a in key if a in names)
    ts_attr = dataset.timestamp_attribute
    ts = dataset.columns[ts_attr].copy() if ts_attr else None
    return EncodedDataset(tuple(names), codes, tuple(mapping.specs[a].domain_size for a in names),
                          key, ts)
