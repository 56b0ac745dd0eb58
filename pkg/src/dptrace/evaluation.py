"""Fidelity scoring of synthetic traces against the raw originals.

Nominal-valued attributes (addresses, ports, categories) are compared by
Jensen-Shannon divergence of their value histograms; numeric attributes
by 1-D Earth Mover's Distance. Sketch-based heavy-hitter estimation
errors compare how usable each dataset is for streaming measurement.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .privacy import substream
from .sketches import CountMinSketch, CountSketch, SketchConfig
from .trace import TraceDataset

logger = logging.getLogger(__name__)

SKETCH_RUNS = 10

JSD_KINDS = ("ip", "port", "categorical")
EMD_KINDS = ("integer", "float", "timestamp")


def _align(p: Mapping, q: Mapping) -> tuple[np.ndarray, np.ndarray]:
    support = sorted(set(p) | set(q))
    return (np.array([p.get(v, 0.0) for v in support], dtype=np.float64),
            np.array([q.get(v, 0.0) for v in support], dtype=np.float64))


def jsd(p, q) -> float:
    """Base-2 Jensen-Shannon divergence; 0 iff equal, at most 1.

    Accepts aligned arrays or value->count mappings (aligned on the union
    of supports with zero fill).
    """
    if isinstance(p, Mapping) or isinstance(q, Mapping):
        p, q = _align(dict(p), dict(q))
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError("histograms must share a support; align them first")
    if p.sum() <= 0 or q.sum() <= 0:
        raise ConfigError("histograms must have positive mass")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def emd_1d(p_values, q_values, p_weights=None, q_weights=None) -> float:
    """1-D Earth Mover's Distance between two weighted point masses.

    Both sides are normalized to unit mass; the distance is the integral
    of the absolute CDF difference.
    """
    pv = np.asarray(p_values, dtype=np.float64)
    qv = np.asarray(q_values, dtype=np.float64)
    pw = np.ones_like(pv) if p_weights is None else np.asarray(p_weights, dtype=np.float64)
    qw = np.ones_like(qv) if q_weights is None else np.asarray(q_weights, dtype=np.float64)
    if pv.size == 0 or qv.size == 0 or pw.sum() <= 0 or qw.sum() <= 0:
        raise ConfigError("both distributions need positive mass")
    pw = pw / pw.sum()
    qw = qw / qw.sum()
    support = np.concatenate([pv, qv])
    order = np.argsort(support, kind="stable")
    support = support[order]
    deltas = np.concatenate([pw, -qw])[order]
    cdf_gap = np.cumsum(deltas)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(support)))


def rescale_emds(values: Sequence[float], low: float = 0.1, high: float = 0.9) -> list[float]:
    """Min-max rescale a batch of EMDs into [low, high] for joint plots.

    A constant batch maps to the midpoint. Only meaningful when comparing
    several synthetic outputs; single-run reports keep raw EMDs.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return []
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return [0.5 * (low + high)] * arr.size
    return list(low + (arr - lo) / (hi - lo) * (high - low))


def relative_error(v_syn: float, v_raw: float) -> float:
    """|v_syn - v_raw| / |v_raw|; infinity when the reference is zero."""
    if v_raw == 0:
        return 0.0 if v_syn == 0 else math.inf
    return abs(v_syn - v_raw) / abs(v_raw)


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("score lists must be 1-D and of equal length")
    if a.size < 2:
        raise ConfigError("need at least two scores")
    ra, rb = _rank_with_ties(a), _rank_with_ties(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        return 0.0
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


# -- sketch-based heavy hitter comparison ----------------------------------

def _int_keys(raw: np.ndarray, syn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factorize both columns over their union so keys agree across sets."""
    union = np.unique(np.concatenate([raw, syn]))
    return np.searchsorted(union, raw), np.searchsorted(union, syn)


def _sketch_error(keys: np.ndarray, fraction: float, algorithm: str,
                  config: SketchConfig, seed: int, runs: int = SKETCH_RUNS) -> float:
    """Mean absolute estimation error on the stream's heavy hitters,
    averaged over seeded sketch builds."""
    values, counts = np.unique(keys, return_counts=True)
    threshold = fraction * keys.size
    heavy = values[counts >= threshold]
    if heavy.size == 0:
        return math.nan
    true = counts[counts >= threshold].astype(np.float64)
    errors = []
    for run in range(runs):
        rng = substream(seed, "sketch", algorithm, str(run))
        sketch = (CountMinSketch(config, rng) if algorithm == "cms"
                  else CountSketch(config, rng))
        sketch.insert(keys)
        estimates = sketch.query(heavy).astype(np.float64)
        errors.append(float(np.mean(np.abs(estimates - true))))
    return float(np.mean(errors))


def heavy_hitter_error(raw: TraceDataset, syn: TraceDataset, attr: str,
                       algorithm: str = "cms", config: SketchConfig | None = None,
                       seed: int = 0) -> float:
    """Relative gap between the sketch's error on synthetic vs raw data.

    Each dataset is sketched over its own heavy hitters (keys above the
    configured frequency fraction) with the same seeds, so identical
    inputs give exactly zero.
    """
    if attr not in raw.columns or attr not in syn.columns:
        raise DataError(f"attribute {attr!r} missing from raw or synthetic data")
    if algorithm not in ("cms", "cs"):
        raise ConfigError(f"unknown sketch algorithm {algorithm!r}")
    cfg = config or SketchConfig()
    raw_keys, syn_keys = _int_keys(raw.columns[attr], syn.columns[attr])
    err_raw = _sketch_error(raw_keys, cfg.heavy_hitter_fraction, algorithm, cfg, seed)
    err_syn = _sketch_error(syn_keys, cfg.heavy_hitter_fraction, algorithm, cfg, seed)
    if math.isnan(err_raw) or math.isnan(err_syn):
        logger.warning("no heavy hitters for %r; reporting NaN", attr)
        return math.nan
    return relative_error(err_syn, err_raw)


# -- report ---------------------------------------------------------------

@dataclass
class FidelityReport:
    jsd: dict[str, float] = field(default_factory=dict)
    emd: dict[str, float] = field(default_factory=dict)
    sketch: dict[str, dict[str, float]] = field(default_factory=dict)
    # Reserved for additional sketching algorithms.
    univmon: dict | None = None
    nitrosketch: dict | None = None
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "jsd": self.jsd,
            "emd": self.emd,
            "sketch": self.sketch,
            "univmon": self.univmon,
            "nitrosketch": self.nitrosketch,
            "metadata": self.metadata,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, allow_nan=True) + "\n",
                              encoding="utf-8")

    def write_csv(self, path) -> None:
        lines = ["metric,attribute,value"]
        for attr, v in self.jsd.items():
            lines.append(f"jsd,{attr},{v}")
        for attr, v in self.emd.items():
            lines.append(f"emd,{attr},{v}")
        for algo, attrs in self.sketch.items():
            for attr, v in attrs.items():
                lines.append(f"sketch_{algo},{attr},{v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _histogram(column: np.ndarray) -> dict:
    values, counts = np.unique(column, return_counts=True)
    return dict(zip(values.tolist(), counts.astype(float).tolist()))


def score_datasets(raw: TraceDataset, syn: TraceDataset,
                   metrics: Sequence[str] = ("jsd", "emd", "sketch"),
                   sketch_attrs: Sequence[str] = (), sketch_config: SketchConfig | None = None,
                   seed: int = 0) -> FidelityReport:
    """Compute the selected fidelity metrics attribute by attribute."""
    if [f.name for f in raw.schema] != [f.name for f in syn.schema]:
        raise DataError("raw and synthetic schemas disagree")
    report = FidelityReport(metadata={"seed": seed, "n_raw": raw.n, "n_syn": syn.n})
    if "jsd" in metrics:
        for f in raw.schema:
            if f.kind in JSD_KINDS:
                report.jsd[f.name] = jsd(_histogram(raw.columns[f.name]),
                                         _histogram(syn.columns[f.name]))
    if "emd" in metrics:
        for f in raw.schema:
            if f.kind in EMD_KINDS:
                report.emd[f.name] = emd_1d(raw.columns[f.name].astype(np.float64),
                                            syn.columns[f.name].astype(np.float64))
    if "sketch" in metrics:
        attrs = list(sketch_attrs)
        if not attrs:
            attrs = [f.name for f in raw.schema if f.kind == "ip"][:1]
        for algo in ("cms", "cs"):
            report.sketch[algo] = {}
            for attr in attrs:
                if raw.kind_of(attr) == "categorical":
                    raw_col = raw.columns[attr]
                    syn_col = syn.columns[attr]
                    union = {v: i for i, v in enumerate(
                        sorted(set(raw_col.tolist()) | set(syn_col.tolist())))}
                    raw_ds = _with_int_column(raw, attr, union)
                    syn_ds = _with_int_column(syn, attr, union)
                    value = heavy_hitter_error(raw_ds, syn_ds, attr, algo,
                                               sketch_config, seed)
                else:
                    value = heavy_hitter_error(raw, syn, attr, algo, sketch_config, seed)
                report.sketch[algo][attr] = value
    return report


def _with_int_column(dataset: TraceDataset, attr: str, mapping: dict) -> TraceDataset:
    columns = dict(dataset.columns)
    columns[attr] = np.array([mapping[v] for v in dataset.columns[attr]], dtype=np.int64)
    schema = tuple(f if f.name != attr else
                   type(f)(f.name, "integer", f.role) for f in dataset.schema)
    return TraceDataset(schema, columns, dataset.provenance)
