"""Experiment driver: configs, seeded trials, CSV traces and summaries.

A JSON config fully describes an experiment: the ground-truth model, the
candidate interventions, the risk spec, kernels, the policies to run, metric
settings and the run shape. Unknown keys anywhere are errors, since a silent
typo can invalidate a whole study.

Each (policy, trial) starts from an empty dataset. A step selects an
intervention with the policy, draws one sample from the true model under it,
refits the belief and appends a trace row; metric columns are filled on the
configured stride (step 0 and the final step always included when due).
Random streams are derived from (seed, policy, trial, step, purpose), so a
config plus seed determines every emitted byte. Wall-clock timing is only
recorded when explicitly enabled, because it would break that guarantee.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .belief import BeliefState, RiskSpec, expected_total_risk
from .gp import Kernel
from .metrics import MetricReport, evaluate
from .scm import Graph, Intervention, InterventionFamily, ScmSpec, parse_expression, sample_scm
from .strategy import (
    POLICIES,
    CandidateSet,
    CostModel,
    PolicyParams,
    SelectionResult,
    chain_order,
    select_intervention,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CandidateConfig",
    "MetricsConfig",
    "RunConfig",
    "TraceRow",
    "SummaryRow",
    "RunResult",
    "TRACE_COLUMNS",
    "SUMMARY_COLUMNS",
    "OUTPUT_DIR_ENV",
    "load_config",
    "parse_config",
    "validate_config",
    "build_candidates",
    "run_trial",
    "run_experiment",
    "summarize",
    "write_trace_csv",
    "read_trace_csv",
    "write_summary_csv",
]

OUTPUT_DIR_ENV = "SCMLEARN_OUTPUT_DIR"
CONFIG_VERSION = 1

# Stream purposes, so no two uses of the seed space collide.
_TAG_SELECT = 0
_TAG_DRAW = 1
_TAG_METRICS = 2


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class CandidateConfig:
    family: str
    low: float = -6.0
    high: float = 6.0
    values_per_node: int = 50
    include_null: bool = True

    def __post_init__(self):
        if self.family not in ("single-variable", "upstream-chain"):
            raise ConfigError(f"unknown candidate family {self.family!r}")
        if not self.low < self.high:
            raise ConfigError("candidate range needs low < high")
        if self.values_per_node < 1:
            raise ConfigError("values_per_node must be positive")


@dataclass(frozen=True)
class MetricsConfig:
    kl_samples: int = 2000
    mmd_samples: int = 400
    mmd_bandwidth: float = 1.0
    stride: int = 1

    def __post_init__(self):
        if self.kl_samples < 1 or self.mmd_samples < 2:
            raise ConfigError("metric sample counts too small")
        if self.mmd_bandwidth <= 0:
            raise ConfigError("mmd bandwidth must be positive")
        if self.stride < 1:
            raise ConfigError("metrics stride must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    trials: int = 10
    steps: int = 30
    seed: int = 0
    output_dir: str | None = None
    record_timing: bool = False

    def __post_init__(self):
        if self.trials < 1 or self.steps < 0:
            raise ConfigError("need trials >= 1 and steps >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    scm: ScmSpec
    candidates: CandidateConfig
    risk: RiskSpec
    kernel: Kernel
    policy_names: tuple[str, ...]
    policy_params: PolicyParams
    metrics: MetricsConfig
    run: RunConfig

    def kernels(self) -> tuple[Kernel, ...]:
        return tuple(self.kernel for _ in range(self.scm.n_nodes))


def _require_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _block(raw: dict, name: str, required: bool = True) -> dict:
    block = raw.get(name)
    if block is None:
        if required:
            raise ConfigError(f"missing config block {name!r}")
        return {}
    if not isinstance(block, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    return block


def _broadcast(value, n: int, what: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return tuple(float(value) for _ in range(n))
    if isinstance(value, list) and len(value) == n:
        return tuple(float(v) for v in value)
    raise ConfigError(f"{what} must be a number or a list of {n} numbers")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping and build the typed experiment config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(
        raw,
        {"version", "scm", "candidates", "risk", "kernel", "policy", "metrics", "run"},
        "config",
    )
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}")

    scm_block = _block(raw, "scm")
    _require_keys(scm_block, {"nodes", "edges", "functions", "noise_vars"}, "scm")
    try:
        n_nodes = int(scm_block["nodes"])
        graph = Graph.from_edges(n_nodes, scm_block.get("edges", []))
        exprs = scm_block["functions"]
        if not isinstance(exprs, list) or len(exprs) != n_nodes:
            raise ConfigError("scm.functions must list one expression per node")
        functions = tuple(
            parse_expression(str(src), graph.arity(n)) for n, src in enumerate(exprs)
        )
        noise = _broadcast(scm_block["noise_vars"], n_nodes, "scm.noise_vars")
        scm = ScmSpec(graph=graph, functions=functions, noise_vars=noise)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid scm block: {exc}") from exc

    cand_block = _block(raw, "candidates")
    _require_keys(
        cand_block, {"family", "low", "high", "values_per_node", "include_null"}, "candidates"
    )
    try:
        candidates = CandidateConfig(**cand_block)
    except TypeError as exc:
        raise ConfigError(f"invalid candidates block: {exc}") from exc
    scm = dataclasses.replace(
        scm,
        intervention_family=InterventionFamily(
            kind=candidates.family, low=candidates.low, high=candidates.high
        ),
    )

    risk_block = _block(raw, "risk")
    _require_keys(risk_block, {"low", "high", "alpha", "grid_1d", "grid_2d", "grid_nd"}, "risk")
    try:
        alpha = risk_block.get("alpha", 1.0)
        if isinstance(alpha, list):
            alpha = tuple(float(a) for a in alpha)
            if len(alpha) != n_nodes:
                raise ConfigError("risk.alpha list must have one entry per node")
        risk = RiskSpec(
            low=float(risk_block.get("low", -6.0)),
            high=float(risk_block.get("high", 6.0)),
            alphas=alpha,
            grid_1d=int(risk_block.get("grid_1d", 200)),
            grid_2d=int(risk_block.get("grid_2d", 60)),
            grid_nd=int(risk_block.get("grid_nd", 12)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid risk block: {exc}") from exc

    kernel_block = _block(raw, "kernel", required=False)
    _require_keys(kernel_block, {"bandwidth", "amplitude"}, "kernel")
    try:
        kernel = Kernel(
            bandwidth=float(kernel_block.get("bandwidth", 1.0)),
            amplitude=float(kernel_block.get("amplitude", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid kernel block: {exc}") from exc

    policy_block = _block(raw, "policy")
    _require_keys(policy_block, {"name", "samples_per_candidate", "dp_grid_size"}, "policy")
    names = policy_block.get("name")
    if isinstance(names, str):
        names = [names]
    if not isinstance(names, list) or not names:
        raise ConfigError("policy.name must be a policy name or a nonempty list of them")
    for name in names:
        if name not in POLICIES:
            raise ConfigError(f"unknown policy {name!r} (choose from {', '.join(POLICIES)})")
    if len(set(names)) != len(names):
        raise ConfigError("policy.name lists a policy twice")
    try:
        params = PolicyParams(
            samples_per_candidate=int(policy_block.get("samples_per_candidate", 64)),
            dp_grid_size=int(policy_block.get("dp_grid_size", 101)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid policy block: {exc}") from exc

    metrics_block = _block(raw, "metrics", required=False)
    _require_keys(
        metrics_block, {"kl_samples", "mmd_samples", "mmd_bandwidth", "stride"}, "metrics"
    )
    metrics = MetricsConfig(
        kl_samples=int(metrics_block.get("kl_samples", 2000)),
        mmd_samples=int(metrics_block.get("mmd_samples", 400)),
        mmd_bandwidth=float(metrics_block.get("mmd_bandwidth", 1.0)),
        stride=int(metrics_block.get("stride", 1)),
    )

    run_block = _block(raw, "run")
    _require_keys(
        run_block, {"trials", "steps", "seed", "output_dir", "record_timing"}, "run"
    )
    try:
        run = RunConfig(
            trials=int(run_block.get("trials", 10)),
            steps=int(run_block.get("steps", 30)),
            seed=int(run_block.get("seed", 0)),
            output_dir=run_block.get("output_dir"),
            record_timing=bool(run_block.get("record_timing", False)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid run block: {exc}") from exc

    cfg = ExperimentConfig(
        scm=scm,
        candidates=candidates,
        risk=risk,
        kernel=kernel,
        policy_names=tuple(names),
        policy_params=params,
        metrics=metrics,
        run=run,
    )
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    import json

    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw)


def validate_config(cfg: ExperimentConfig) -> dict:
    """Cross-check the blocks against each other; returns a short summary."""
    cands = build_candidates(cfg)
    needs_chain = {"dp_upstream", "dp_single"} & set(cfg.policy_names)
    if needs_chain:
        try:
            chain_order(cfg.scm.graph)
        except ValueError as exc:
            raise ConfigError(f"policies {sorted(needs_chain)} require a chain graph") from exc
    if "dp_upstream" in cfg.policy_names and cfg.candidates.family != "upstream-chain":
        raise ConfigError("dp_upstream prices upstream-chain candidates only")
    if "dp_single" in cfg.policy_names and cfg.candidates.family != "single-variable":
        raise ConfigError("dp_single prices single-variable candidates only")
    return {
        "nodes": cfg.scm.n_nodes,
        "candidates": len(cands),
        "policies": list(cfg.policy_names),
        "trials": cfg.run.trials,
        "steps": cfg.run.steps,
    }


def build_candidates(cfg: ExperimentConfig) -> CandidateSet:
    """Evenly spaced clamp values per node, in node-major ascending order.

    The upstream-chain family clamps a node and all its chain predecessors
    to the candidate value; the single-variable family clamps one node. The
    null intervention, when included, comes last.
    """
    cand_cfg = cfg.candidates
    values = np.linspace(cand_cfg.low, cand_cfg.high, cand_cfg.values_per_node)
    interventions: list[Intervention] = []
    if cand_cfg.family == "upstream-chain":
        try:
            chain = chain_order(cfg.scm.graph)
        except ValueError as exc:
            raise ConfigError("upstream-chain candidates require a chain graph") from exc
        for position in range(len(chain)):
            for v in values:
                clamps = tuple((chain[q], float(v)) for q in range(position + 1))
                interventions.append(Intervention(clamps))
    else:
        for node in range(cfg.scm.n_nodes):
            for v in values:
                interventions.append(Intervention(((node, float(v)),)))
    if cand_cfg.include_null:
        interventions.append(Intervention.null())
    return CandidateSet(tuple(interventions))


# ---------------------------------------------------------------------------
# Trace rows
# ---------------------------------------------------------------------------

TRACE_COLUMNS = (
    "trial",
    "step",
    "policy",
    "intervention_nodes",
    "intervention_values",
    "expected_total_risk",
    "true_total_risk",
    "kl_max",
    "kl_median",
    "mmd_max",
    "mmd_median",
    "candidates_evaluated",
    "elapsed_ms",
)

SUMMARY_COLUMNS = (
    "policy",
    "step",
    "trials",
    "expected_total_risk",
    "true_total_risk",
    "kl_max",
    "kl_median",
    "mmd_max",
    "mmd_median",
)

_METRIC_FIELDS = ("true_total_risk", "kl_max", "kl_median", "mmd_max", "mmd_median")


@dataclass(frozen=True)
class TraceRow:
    trial: int
    step: int
    policy: str
    intervention_nodes: str
    intervention_values: str
    expected_total_risk: float
    true_total_risk: float | None
    kl_max: float | None
    kl_median: float | None
    mmd_max: float | None
    mmd_median: float | None
    candidates_evaluated: int
    elapsed_ms: float


@dataclass(frozen=True)
class SummaryRow:
    policy: str
    step: int
    trials: int
    expected_total_risk: float | None
    true_total_risk: float | None
    kl_max: float | None
    kl_median: float | None
    mmd_max: float | None
    mmd_median: float | None


@dataclass
class RunResult:
    rows: list[TraceRow]
    trace_path: Path | None
    summary_path: Path | None
    failures: list[str]


def _encode_intervention(intervention: Intervention | None) -> tuple[str, str]:
    if intervention is None or intervention.is_null:
        return "", ""
    nodes = ";".join(str(n) for n, _ in intervention.clamps)
    values = ";".join(f"{v:.17g}" for _, v in intervention.clamps)
    return nodes, values


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


def _metrics_due(step: int, cfg: ExperimentConfig) -> bool:
    return step % cfg.metrics.stride == 0 or step == cfg.run.steps


def run_trial(
    cfg: ExperimentConfig,
    policy: str,
    policy_index: int,
    trial: int,
    candidates: CandidateSet,
    costs: CostModel,
    collect: list[TraceRow] | None = None,
) -> tuple[list[TraceRow], BeliefState]:
    """One seeded trial of one policy; returns its rows and the final belief.

    Rows are appended to ``collect`` as they are produced when given, so a
    caller isolating failures keeps the part of the trial that completed.
    """
    truth = cfg.scm
    belief = BeliefState(truth.graph, cfg.kernels(), truth.noise_vars)
    seed = cfg.run.seed
    rows: list[TraceRow] = collect if collect is not None else []

    def emit(step: int, selection: SelectionResult | None, elapsed: float) -> None:
        report: MetricReport | None = None
        if _metrics_due(step, cfg):
            report = evaluate(
                truth,
                belief,
                candidates,
                cfg.risk,
                cfg.metrics.kl_samples,
                _rng(seed, policy_index, trial, step, _TAG_METRICS),
                mmd_samples=cfg.metrics.mmd_samples,
                mmd_bandwidth=cfg.metrics.mmd_bandwidth,
            )
        nodes, values = _encode_intervention(selection.intervention if selection else None)
        rows.append(
            TraceRow(
                trial=trial,
                step=step,
                policy=policy,
                intervention_nodes=nodes,
                intervention_values=values,
                expected_total_risk=expected_total_risk(belief, cfg.risk),
                true_total_risk=report.true_total_risk if report else None,
                kl_max=report.kl_max if report else None,
                kl_median=report.kl_median if report else None,
                mmd_max=report.mmd_max if report else None,
                mmd_median=report.mmd_median if report else None,
                candidates_evaluated=selection.candidates_evaluated if selection else 0,
                elapsed_ms=elapsed,
            )
        )

    emit(0, None, 0.0)
    for step in range(1, cfg.run.steps + 1):
        started = time.perf_counter()
        selection = select_intervention(
            policy,
            belief,
            candidates,
            costs,
            cfg.risk,
            cfg.policy_params,
            _rng(seed, policy_index, trial, step, _TAG_SELECT),
        )
        draw = sample_scm(
            truth, selection.intervention, _rng(seed, policy_index, trial, step, _TAG_DRAW)
        )
        belief = belief.with_draw(draw)
        elapsed = (time.perf_counter() - started) * 1000.0 if cfg.run.record_timing else 0.0
        emit(step, selection, elapsed)
    return rows, belief


def _diagnostic_row(trial: int, step: int, policy: str, exc: Exception) -> TraceRow:
    message = f"{type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
    return TraceRow(
        trial=trial,
        step=step,
        policy=policy,
        intervention_nodes="error",
        intervention_values=message,
        expected_total_risk=math.nan,
        true_total_risk=None,
        kl_max=None,
        kl_median=None,
        mmd_max=None,
        mmd_median=None,
        candidates_evaluated=0,
        elapsed_ms=0.0,
    )


def resolve_output_dir(cfg: ExperimentConfig, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.run.output_dir:
        return Path(cfg.run.output_dir)
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def run_experiment(
    cfg: ExperimentConfig, output_dir: str | Path | None = None, write: bool = True
) -> RunResult:
    """Run every configured policy for every trial; optionally write both CSVs.

    A failing trial is cut short with a diagnostic row (its error message in
    the intervention columns) and reported in ``failures``; remaining trials
    still run. The trace keeps the aborted trial's partial rows, the summary
    averages over completed trials only.
    """
    candidates = build_candidates(cfg)
    costs = CostModel()
    rows: list[TraceRow] = []
    failures: list[str] = []
    failed_keys: set[tuple[str, int]] = set()
    for policy_index, policy in enumerate(cfg.policy_names):
        for trial in range(cfg.run.trials):
            trial_rows: list[TraceRow] = []
            try:
                run_trial(cfg, policy, policy_index, trial, candidates, costs, trial_rows)
            except Exception as exc:  # noqa: BLE001 - trial isolation is the contract
                trial_rows.append(_diagnostic_row(trial, len(trial_rows), policy, exc))
                failures.append(f"policy={policy} trial={trial}: {exc}")
                failed_keys.add((policy, trial))
            rows.extend(trial_rows)
    trace_path = summary_path = None
    if write:
        out = resolve_output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / "trace.csv"
        write_trace_csv(rows, trace_path)
        summary_path = out / "summary.csv"
        completed = [r for r in rows if (r.policy, r.trial) not in failed_keys]
        write_summary_csv(summarize(completed), summary_path)
    return RunResult(rows=rows, trace_path=trace_path, summary_path=summary_path, failures=failures)


def summarize(rows: Sequence[TraceRow]) -> list[SummaryRow]:
    """Mean of every metric across trials, per (policy, step).

    Requires each trial of a policy to cover the same steps; diagnostic rows
    are excluded. Metric cells missing in all trials stay empty.
    """
    clean = [r for r in rows if r.intervention_nodes != "error"]
    steps_seen: dict[tuple[str, int], set[int]] = {}
    for row in clean:
        steps_seen.setdefault((row.policy, row.trial), set()).add(row.step)
    by_policy: dict[str, set[frozenset[int]]] = {}
    for (policy, _), steps in steps_seen.items():
        by_policy.setdefault(policy, set()).add(frozenset(steps))
    for policy, step_sets in by_policy.items():
        if len(step_sets) > 1:
            raise ValueError(f"trials of policy {policy!r} cover different steps")

    policies: list[str] = []
    for row in clean:
        if row.policy not in policies:
            policies.append(row.policy)
    out: list[SummaryRow] = []
    for policy in policies:
        group = [r for r in clean if r.policy == policy]
        for step in sorted({r.step for r in group}):
            at_step = [r for r in group if r.step == step]
            means: dict[str, float | None] = {}
            for name in ("expected_total_risk",) + _METRIC_FIELDS:
                values = [getattr(r, name) for r in at_step if getattr(r, name) is not None]
                means[name] = float(np.mean(values)) if values else None
            out.append(
                SummaryRow(
                    policy=policy,
                    step=step,
                    trials=len(at_step),
                    expected_total_risk=means["expected_total_risk"],
                    true_total_risk=means["true_total_risk"],
                    kl_max=means["kl_max"],
                    kl_median=means["kl_median"],
                    mmd_max=means["mmd_max"],
                    mmd_median=means["mmd_median"],
                )
            )
    return out


# ---------------------------------------------------------------------------
# CSV serialisation: comma separated, header row, floats at 17 significant
# digits, "\n" line endings, missing metrics as empty cells.
# ---------------------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{value:.17g}"
    return str(value)


def write_trace_csv(rows: Sequence[TraceRow], path: str | Path) -> None:
    _write_csv(rows, TRACE_COLUMNS, path)


def write_summary_csv(rows: Sequence[SummaryRow], path: str | Path) -> None:
    _write_csv(rows, SUMMARY_COLUMNS, path)


def _write_csv(rows, columns: tuple[str, ...], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(getattr(row, c)) for c in columns) + "\n")


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    import csv

    rows: list[TraceRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns in {path}")
        for rec in reader:
            rows.append(
                TraceRow(
                    trial=int(rec["trial"]),
                    step=int(rec["step"]),
                    policy=rec["policy"],
                    intervention_nodes=rec["intervention_nodes"],
                    intervention_values=rec["intervention_values"],
                    expected_total_risk=float(rec["expected_total_risk"]),
                    true_total_risk=_parse_optional(rec["true_total_risk"]),
                    kl_max=_parse_optional(rec["kl_max"]),
                    kl_median=_parse_optional(rec["kl_median"]),
                    mmd_max=_parse_optional(rec["mmd_max"]),
                    mmd_median=_parse_optional(rec["mmd_median"]),
                    candidates_evaluated=int(rec["candidates_evaluated"]),
                    elapsed_ms=float(rec["elapsed_ms"]),
                )
            )
    return rows


def _parse_optional(cell: str) -> float | None:
    return None if cell == "" else float(cell)
