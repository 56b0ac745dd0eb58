"""End-to-end orchestration: raw CSV in, synthetic CSV plus run report out.

The synthesis run follows a fixed stage order: temporal augmentation,
type-dependent binning, noisy one-way publication with frequency
merging, pair selection, merging and publication of joint tables,
validity/consistency/protocol repair, record synthesis, decoding, and
timestamp reconstruction. Every noisy release goes through the budget
ledger, which is sealed before synthesis starts.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path


from . import binning as bn
from . import marginals as mg
from .errors import BudgetError, ConfigError, DataError
from .evaluation import FidelityReport, score_datasets
from .privacy import BudgetLedger, budget_from_epsilon_delta, substream
from .sketches import SketchConfig
from .synth import SynthConfig, synthesize
from .trace import TraceDataset, load_csv, load_schema, validate_schema, write_csv

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run bit-for-bit (plus the seed)."""

    input: str = ""
    schema: str = ""
    output: str = ""
    epsilon: float = 2.0
    delta: float = 1e-5
    seed: int = 0
    budget_fractions: tuple[float, float, float] = (0.1, 0.1, 0.8)
    group_key: tuple[str, ...] | None = None
    tau: float = 0.1
    rules: str | None = None           # JSON rule file; None uses the defaults
    merge_threshold: int = mg.DEFAULT_MERGE_THRESHOLD
    binning: bn.BinningConfig = field(default_factory=bn.BinningConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    report: str | None = None
    distance_log: str | None = None
    # eval-only settings
    raw: str = ""
    syn: str = ""
    metrics: tuple[str, ...] = ("jsd", "emd", "sketch")
    sketch_attrs: tuple[str, ...] = ()
    sketch: SketchConfig = field(default_factory=SketchConfig)

    def as_dict(self) -> dict:
        payload = asdict(self)
        payload["budget_fractions"] = list(self.budget_fractions)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        payload = dict(payload)
        if "binning" in payload and isinstance(payload["binning"], dict):
            payload["binning"] = bn.BinningConfig(**payload["binning"])
        if "synth" in payload and isinstance(payload["synth"], dict):
            payload["synth"] = SynthConfig(**payload["synth"])
        if "sketch" in payload and isinstance(payload["sketch"], dict):
            payload["sketch"] = SketchConfig(**payload["sketch"])
        for key in ("budget_fractions", "group_key", "metrics", "sketch_attrs"):
            if key in payload and isinstance(payload[key], list):
                payload[key] = tuple(payload[key])
        unknown = set(payload) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(payload)


@dataclass
class RunResult:
    synthetic: TraceDataset
    report: dict


class _StageClock:
    def __init__(self):
        self.timings: dict[str, float] = {}
        self._t0 = None
        self._name = None

    def start(self, name: str):
        self._name, self._t0 = name, time.perf_counter()
        logger.info("stage %s ...", name)

    def stop(self):
        self.timings[self._name] = round(time.perf_counter() - self._t0, 4)


def run_synthesize(config: RunConfig) -> RunResult:
    """Execute the whole publication-and-synthesis sequence."""
    clock = _StageClock()

    clock.start("load")
    schema = load_schema(config.schema)
    raw = load_csv(config.input, schema)
    validation = validate_schema(raw)
    if not validation.ok:
        raise DataError(f"input fails validation: {validation.summary()}")
    clock.stop()

    group_key = tuple(config.group_key) if config.group_key else raw.group_key_attributes()
    rules = (mg.load_rules(config.rules, tau=config.tau) if config.rules
             else mg.default_rules(tau=config.tau))

    clock.start("budget")
    budget = budget_from_epsilon_delta(config.epsilon, config.delta, config.budget_fractions)
    ledger = BudgetLedger(budget.rho_total)
    clock.stop()

    clock.start("binning")
    augmented = bn.add_tsdiff(raw, group_key) if raw.timestamp_attribute else raw
    mapping = bn.type_dependent_bins(augmented, config.binning, group_key)
    mapping, one_way = bn.frequency_dependent_merge(
        mapping, augmented, budget.rho_binning, substream(config.seed, "binning"),
        ledger, config.binning)
    encoded = bn.encode(augmented, mapping, group_key)
    clock.stop()

    clock.start("selection")
    candidates = mg.build_candidates(encoded)
    selected = mg.select_marginals(candidates, budget.rho_selection, budget.rho_publish,
                                   substream(config.seed, "selection"), ledger,
                                   weighting=config.binning.budget_weighting)
    merged_sets = mg.merge_small_marginals([c.pair for c in selected], mapping.domain_sizes,
                                           config.merge_threshold)
    clock.stop()

    clock.start("publish")
    exact = [mg.compute_marginal(encoded, attrs) for attrs in merged_sets]
    multiway = mg.publish(exact, budget.rho_publish, substream(config.seed, "publish"),
                          ledger, weighting=config.binning.budget_weighting)
    ledger.seal()
    clock.stop()

    clock.start("post_process")
    published = multiway + [mg.one_way_to_marginal(one_way[a]) for a in mapping.attributes]
    consistent, consensus = mg.post_process(published, mapping, rules)
    clock.stop()

    clock.start("synthesis")
    synth_cfg = config.synth
    if synth_cfg.n_records is None:
        synth_cfg = SynthConfig(**{**asdict(synth_cfg), "n_records": int(round(consensus))})
    if synth_cfg.key_attribute is None and raw.key_attribute:
        synth_cfg = SynthConfig(**{**asdict(synth_cfg), "key_attribute": raw.key_attribute})
    synthetic, state = synthesize(consistent, mapping, raw.schema, synth_cfg,
                                  config.seed, group_key, rules)
    clock.stop()

    clock.start("write")
    if config.output:
        write_csv(synthetic, config.output)
    clock.stop()

    ledger_audit = ledger.as_dict()
    drift = abs(ledger_audit["consumed"] - budget.rho_total)
    if drift > 1e-9 * max(1.0, budget.rho_total):
        raise BudgetError(f"ledger audit failed: consumed {ledger_audit['consumed']} "
                          f"of {budget.rho_total}")

    report = {
        "config": config.as_dict(),
        "budget": budget.as_dict(),
        "ledger": ledger_audit,
        "binning": mapping.as_dict(),
        "selection": {
            "candidates": len(candidates),
            "pairs": [
                {"pair": list(c.pair), "noisy_phi": c.noisy_phi, "cells": c.cells,
                 "selected": c.selected, "psi": c.psi, "rho": c.rho}
                for c in candidates
            ],
            "merged": [list(s) for s in merged_sets],
        },
        "published": [
            {"attrs": list(m.attrs), "cells": m.n_cells, "rho": m.rho, "total": m.total}
            for m in consistent
        ],
        "consensus_total": consensus,
        "synthesis": {
            "n_records": synth_cfg.n_records,
            "key_attribute": synth_cfg.key_attribute,
            "iterations_run": state.iterations_run,
            "final_distances": {"x".join(k): v[-1] for k, v in state.distance_history.items()},
            "distance_history": {"x".join(k): v for k, v in state.distance_history.items()},
        },
        "timings": clock.timings,
    }
    if config.report:
        Path(config.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if config.distance_log:
        _write_distance_log(state.distance_history, config.distance_log)
    return RunResult(synthetic, report)


def _write_distance_log(history: dict, path) -> None:
    names = ["x".join(k) for k in history]
    series = list(history.values())
    depth = max(len(s) for s in series)
    lines = ["iteration," + ",".join(names)]
    for t in range(depth):
        row = [str(t)]
        for s in series:
            row.append(repr(s[t]) if t < len(s) else "")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_eval(config: RunConfig) -> FidelityReport:
    """Score a synthetic trace against its raw original."""
    schema = load_schema(config.schema)
    t0 = time.perf_counter()
    raw = load_csv(config.raw, schema)
    syn = load_csv(config.syn, schema)
    report = score_datasets(raw, syn, config.metrics, config.sketch_attrs,
                            config.sketch, config.seed)
    report.metadata["epsilon"] = config.epsilon
    report.metadata["runtime_s"] = round(time.perf_counter() - t0, 4)
    if config.report:
        report.write_json(config.report)
    return report
