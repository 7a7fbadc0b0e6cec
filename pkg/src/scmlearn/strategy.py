"""Scoring candidate interventions and picking the next one.

The value of a candidate is the expected drop in the belief's total risk
after observing one draw under it, divided by the candidate's cost. The
expectation runs over the belief's own predictive distribution, and because
GP posterior variances depend only on input locations, the risk after a
hypothetical draw is computable without knowing the outputs it would carry.

Two estimators are provided besides the observe-only and uniform-random
baselines:

* ``sampling``: Monte Carlo. Draw T vectors from the predictive under the
  candidate, average the refitted risk over them. Works on any DAG.
* ``dp_upstream`` / ``dp_single``: dynamic programming on chain graphs.
  Discretise each variable's domain, precompute per-node risk contributions
  after one new input at each grid point together with row-normalised
  predictive transition matrices, then fold expectations backwards through
  the chain. One pass prices every clamp value of every position at once.
  ``dp_upstream`` prices candidates that clamp a node and everything before
  it; ``dp_single`` prices single-node clamps, where upstream nodes are
  still observed and keep contributing information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .belief import (
    BeliefState,
    RiskSpec,
    expected_total_risk,
    node_risk_contribution,
    risk_after_inputs,
    risk_after_observation,
)
from .gp import ConstantPosterior
from .scm import Draw, Graph, Intervention, topo_order

__all__ = [
    "POLICIES",
    "CandidateSet",
    "CostModel",
    "PolicyParams",
    "DpTables",
    "SelectionResult",
    "chain_order",
    "value_of",
    "risk_after_datum",
    "estimate_post_risk_sampling",
    "build_dp_tables",
    "dp_upstream_post_risks",
    "dp_single_post_risks",
    "dp_null_post_risk",
    "select_intervention",
]

POLICIES = ("observe", "random", "sampling", "dp_upstream", "dp_single")


@dataclass(frozen=True)
class CandidateSet:
    """An ordered, duplicate-free set of candidate interventions."""

    interventions: tuple[Intervention, ...]

    def __post_init__(self):
        object.__setattr__(self, "interventions", tuple(self.interventions))
        if len(set(self.interventions)) != len(self.interventions):
            raise ValueError("candidate set contains duplicates")

    def __len__(self) -> int:
        return len(self.interventions)

    def __iter__(self):
        return iter(self.interventions)

    def __getitem__(self, idx: int) -> Intervention:
        return self.interventions[idx]


@dataclass
class CostModel:
    """Positive cost per intervention, keyed by the set of clamped nodes."""

    default_cost: float = 1.0
    overrides: dict[frozenset[int], float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.default_cost > 0:
            raise ValueError("costs must be positive")
        if any(not c > 0 for c in self.overrides.values()):
            raise ValueError("costs must be positive")

    def cost(self, intervention: Intervention) -> float:
        return self.overrides.get(intervention.nodes, self.default_cost)


@dataclass(frozen=True)
class PolicyParams:
    """Tuning knobs for the estimating policies."""

    samples_per_candidate: int = 64
    dp_grid_size: int = 101

    def __post_init__(self):
        if self.samples_per_candidate < 1 or self.dp_grid_size < 2:
            raise ValueError("invalid policy parameters")


def value_of(current_risk: float, post_risk: float, cost: float) -> float:
    """Per-cost expected risk reduction of one intervention."""
    if not cost > 0:
        raise ValueError("cost must be positive")
    return (current_risk - post_risk) / cost


def risk_after_datum(
    belief: BeliefState, intervention: Intervention, x: Sequence[float], spec: RiskSpec
) -> float:
    """Expected total risk once the pair (intervention, x) joins the dataset.

    Routes the draw, refits the affected nodes and re-integrates. Only the
    input coordinates of the new pair matter; the outputs are placeholders
    as far as the risk is concerned.
    """
    return expected_total_risk(belief.with_draw(Draw(intervention, tuple(x))), spec)


def estimate_post_risk_sampling(
    belief: BeliefState,
    intervention: Intervention,
    samples: int,
    spec: RiskSpec,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo estimate of the expected risk after one draw.

    Averages :func:`risk_after_datum` over ``samples`` predictive draws,
    evaluated via the shared covariance-update identity instead of one
    refit per draw. Returns (estimate, standard error); the standard error
    is NaN for a single sample.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    graph = belief.graph
    intervention.validate_for(graph.n_nodes)
    clamped = dict(intervention.clamps)
    base = 0.0
    per_draw = np.zeros(samples)
    x = np.empty((samples, graph.n_nodes))
    for n in belief.order:
        noise = belief.noise_vars[n]
        if n in clamped:
            x[:, n] = clamped[n]
            base += node_risk_contribution(belief, n, spec)
            continue
        post = belief.posteriors[n]
        if isinstance(post, ConstantPosterior):
            x[:, n] = post.mean + math.sqrt(post.var + noise) * rng.standard_normal(samples)
            base += risk_after_observation(belief, n, spec)
            continue
        z = x[:, graph.parents[n]]
        mu, var = post.mean_var(z)
        x[:, n] = mu + np.sqrt(var + noise) * rng.standard_normal(samples)
        per_draw += risk_after_inputs(belief, n, z, spec, var_z=var)
    totals = base + per_draw
    estimate = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / math.sqrt(samples)) if samples > 1 else math.nan
    return estimate, se


# ---------------------------------------------------------------------------
# Chain dynamic programming
# ---------------------------------------------------------------------------


def chain_order(graph: Graph) -> list[int]:
    """Node ids in chain order; raises if the graph is not a simple chain."""
    order = topo_order(graph)
    if graph.parents[order[0]] != ():
        raise ValueError("graph is not a chain")
    for prev, node in zip(order, order[1:]):
        if graph.parents[node] != (prev,):
            raise ValueError("graph is not a chain")
    return order


@dataclass(frozen=True)
class DpTables:
    """Discretised quantities the chain recursions run on.

    ``grids[j]`` discretises the domain of the chain's j-th variable.
    ``trans[j]`` (j >= 1) holds the belief's predictive density of variable j
    on ``grids[j]`` given each value of ``grids[j-1]``, rows normalised to
    sum to one; ``root_probs`` plays the same role for the root marginal.
    ``u_after[j]`` is node j's risk contribution after one new observation
    whose input is each point of ``grids[j-1]``; ``u_curr`` the contributions
    as they stand; ``root_after`` the root's after one more observation.
    """

    chain: tuple[int, ...]
    grids: tuple[np.ndarray, ...]
    root_probs: np.ndarray
    trans: tuple[np.ndarray | None, ...]
    u_after: tuple[np.ndarray | None, ...]
    u_curr: np.ndarray
    root_after: float

    @property
    def n_nodes(self) -> int:
        return len(self.chain)


def _normalise_rows(log_density: np.ndarray) -> np.ndarray:
    shifted = np.exp(log_density - np.max(log_density, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def build_dp_tables(
    belief: BeliefState, grids: int | Sequence[np.ndarray], spec: RiskSpec
) -> DpTables:
    """Precompute grids, transition rows and per-node risk vectors.

    ``grids`` is either a point count (grids then span the importance box
    extended by two kernel bandwidths on each side, capturing predictive
    mass that leaks past the box) or explicit per-node increasing arrays.
    """
    chain = chain_order(belief.graph)
    n = len(chain)
    if isinstance(grids, int):
        pad = 2.0 * max(k.bandwidth for k in belief.kernels)
        axis = np.linspace(spec.low - pad, spec.high + pad, grids)
        grid_list = [axis.copy() for _ in range(n)]
    else:
        grid_list = [np.asarray(g, dtype=float).ravel() for g in grids]
        if len(grid_list) != n:
            raise ValueError("need one grid per chain node")
    for g in grid_list:
        if len(g) < 2 or np.any(np.diff(g) <= 0):
            raise ValueError("grids must be strictly increasing")

    root = chain[0]
    root_post = belief.posteriors[root]
    root_var = root_post.var + belief.noise_vars[root]
    root_logd = -((grid_list[0] - root_post.mean) ** 2) / (2.0 * root_var)
    root_probs = _normalise_rows(root_logd)

    u_curr = np.empty(n)
    u_curr[0] = node_risk_contribution(belief, root, spec)
    root_after = risk_after_observation(belief, root, spec)
    trans: list[np.ndarray | None] = [None]
    u_after: list[np.ndarray | None] = [None]
    for j in range(1, n):
        node = chain[j]
        inputs = grid_list[j - 1][:, None]
        mu, var = belief.posteriors[node].mean_var(inputs)
        total = var + belief.noise_vars[node]
        logd = -((grid_list[j][None, :] - mu[:, None]) ** 2) / (2.0 * total[:, None])
        trans.append(_normalise_rows(logd))
        u_after.append(risk_after_inputs(belief, node, inputs, spec, var_z=var))
        u_curr[j] = node_risk_contribution(belief, node, spec)
    return DpTables(
        chain=tuple(chain),
        grids=tuple(grid_list),
        root_probs=root_probs,
        trans=tuple(trans),
        u_after=tuple(u_after),
        u_curr=u_curr,
        root_after=root_after,
    )


def _downstream(tables: DpTables) -> list[np.ndarray]:
    """down[j][i]: expected sum of post-draw contributions of nodes after
    position j, given the j-th variable equals grids[j][i]."""
    n = tables.n_nodes
    down: list[np.ndarray] = [np.zeros(len(g)) for g in tables.grids]
    for j in range(n - 2, -1, -1):
        down[j] = tables.u_after[j + 1] + tables.trans[j + 1] @ down[j + 1]
    return down


def dp_upstream_post_risks(tables: DpTables) -> list[np.ndarray]:
    """Expected total risk after clamping positions 0..m, per clamp value.

    Entry ``[m][i]`` prices the intervention that clamps the chain up to
    position m with the m-th variable at ``grids[m][i]`` (upstream values are
    irrelevant, clamped nodes learn nothing). Clamped nodes keep their
    current contributions; everything downstream is priced by the backward
    recursion over the predictive transitions.
    """
    down = _downstream(tables)
    cumulative = np.cumsum(tables.u_curr)
    return [cumulative[m] + down[m] for m in range(tables.n_nodes)]


def dp_single_post_risks(tables: DpTables) -> list[np.ndarray]:
    """Expected total risk after clamping only position m, per clamp value.

    Unlike the upstream family, nodes before the clamp remain observed: the
    root gains an observation and each intermediate node gains a pair at a
    random input distributed per the observational predictive, folded
    through the root marginal. Node m itself learns nothing; nodes after it
    reuse the downstream recursion.
    """
    down = _downstream(tables)
    n = tables.n_nodes
    out: list[np.ndarray] = []
    for m in range(n):
        if m == 0:
            out.append(tables.u_curr[0] + down[0])
            continue
        upstream = 0.0
        if m >= 2:
            fold = tables.u_after[m - 1]
            for q in range(m - 3, -1, -1):
                fold = tables.u_after[q + 1] + tables.trans[q + 1] @ fold
            upstream = float(tables.root_probs @ fold)
        out.append(tables.root_after + upstream + tables.u_curr[m] + down[m])
    return out


def dp_null_post_risk(tables: DpTables) -> float:
    """Expected total risk after one purely observational draw."""
    down = _downstream(tables)
    return float(tables.root_after + tables.root_probs @ down[0])


def _locate_on_chain(
    intervention: Intervention, tables: DpTables, upstream: bool
) -> tuple[int, float]:
    """Map a candidate to (chain position, clamp value) for table lookup."""
    nodes = intervention.nodes
    if upstream:
        m = len(nodes) - 1
        if m < 0 or nodes != frozenset(tables.chain[: m + 1]):
            raise ValueError(f"candidate {intervention} is not an upstream-chain clamp")
        return m, intervention.value_of(tables.chain[m])
    if len(nodes) != 1:
        raise ValueError(f"candidate {intervention} is not a single-node clamp")
    (node,) = nodes
    try:
        m = tables.chain.index(node)
    except ValueError:
        raise ValueError(f"candidate clamps {node}, which is not on the chain") from None
    return m, intervention.value_of(node)


@dataclass(frozen=True)
class SelectionResult:
    """Chosen intervention plus the per-candidate diagnostics for the trace."""

    intervention: Intervention
    index: int | None
    values: tuple[float, ...] | None
    post_risks: tuple[float, ...] | None
    current_risk: float

    @property
    def candidates_evaluated(self) -> int:
        return 0 if self.values is None else len(self.values)


def select_intervention(
    policy: str,
    belief: BeliefState,
    candidates: CandidateSet,
    costs: CostModel,
    spec: RiskSpec,
    params: PolicyParams | None = None,
    rng: np.random.Generator | None = None,
) -> SelectionResult:
    """Pick the next intervention under ``policy``.

    ``observe`` always returns the null intervention and ``random`` draws a
    candidate uniformly. The estimating policies score every candidate and
    take the argmax of :func:`value_of`, ties going to the earliest
    candidate; the DP policies snap clamp values to the nearest grid point.
    Candidate scoring consumes independent per-candidate substreams spawned
    from ``rng`` in candidate order, so selections are reproducible.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if len(candidates) == 0:
        raise ValueError("candidate set is empty")
    params = params or PolicyParams()
    current = expected_total_risk(belief, spec)
    if policy == "observe":
        return SelectionResult(Intervention.null(), None, None, None, current)
    if policy == "random":
        if rng is None:
            raise ValueError("random policy needs a generator")
        idx = int(rng.integers(len(candidates)))
        return SelectionResult(candidates[idx], idx, None, None, current)

    if policy == "sampling":
        if rng is None:
            raise ValueError("sampling policy needs a generator")
        streams = rng.spawn(len(candidates))
        post = np.array(
            [
                estimate_post_risk_sampling(
                    belief, cand, params.samples_per_candidate, spec, stream
                )[0]
                for cand, stream in zip(candidates, streams)
            ]
        )
    else:
        tables = build_dp_tables(belief, params.dp_grid_size, spec)
        estimates = (
            dp_upstream_post_risks(tables)
            if policy == "dp_upstream"
            else dp_single_post_risks(tables)
        )
        post = np.empty(len(candidates))
        null_value: float | None = None
        for i, cand in enumerate(candidates):
            if cand.is_null:
                if null_value is None:
                    null_value = dp_null_post_risk(tables)
                post[i] = null_value
                continue
            m, value = _locate_on_chain(cand, tables, upstream=policy == "dp_upstream")
            post[i] = estimates[m][int(np.argmin(np.abs(tables.grids[m] - value)))]

    values = np.array([
        value_of(current, p, costs.cost(cand)) for p, cand in zip(post, candidates)
    ])
    idx = int(np.argmax(values))
    return SelectionResult(
        candidates[idx], idx, tuple(float(v) for v in values), tuple(float(p) for p in post), current
    )
