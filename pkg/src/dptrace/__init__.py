"""Differentially private synthesis of network flow/packet header traces."""

from .binning import (BinMapping, BinSpec, BinningConfig, EncodedDataset, add_tsdiff,
                      decode_value, encode, frequency_dependent_merge, ip_prefix_bin,
                      type_dependent_bins)
from .errors import BudgetError, ConfigError, DataError
from .evaluation import (FidelityReport, emd_1d, heavy_hitter_error, jsd, relative_error,
                         rescale_emds, score_datasets, spearman_rank)
from .marginals import (Marginal, MarginalCandidate, OrderingRule, PortProtocolRule,
                        apply_protocol_rules, build_candidates, compute_marginal,
                        consistency_shared, dependency_error, merge_small_marginals,
                        noise_error, project_valid, publish, select_marginals)
from .pipeline import RunConfig, RunResult, run_eval, run_synthesize
from .privacy import (BudgetLedger, PrivacyBudget, allocate_budget,
                      budget_from_epsilon_delta, eps_delta_to_rho, gaussian_mechanism,
                      per_marginal_rho, rho_to_eps, substream)
from .sketches import CountMinSketch, CountSketch, SketchConfig
from .synth import (SynthConfig, SynthState, gum_update, initialize_dataset,
                    pearson_from_marginal, reconstruct_timestamps, synthesize)
from .trace import (FieldSchema, TraceDataset, TraceRecord, load_csv, load_schema,
                    validate_schema, write_csv)

__version__ = "0.1.0"
