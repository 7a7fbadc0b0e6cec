"""Structural causal models over known directed acyclic graphs.

A model couples a DAG with one mechanism per node: the node's value is a
fixed function of its parents plus independent zero-mean Gaussian noise.
A do-intervention overrides a subset of nodes with constant clamp values;
the empty clamp set is the purely observational regime.

Mechanisms are small expression trees over parent references ``p0..p(k-1)``,
real constants and the operators ``+ - *`` with unary ``sin``/``cos``. The
grammar deliberately excludes division and exponentiation so that every
expression evaluates to a finite value at every finite input.

Everything here is an immutable value after construction, and sampling is
pure given an explicit numpy generator, so models can be shared freely
across threads.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ExpressionError",
    "GraphError",
    "StructuralFunction",
    "parse_expression",
    "Graph",
    "topo_order",
    "Intervention",
    "InterventionFamily",
    "ScmSpec",
    "Draw",
    "sample_scm",
    "sample_scm_array",
    "log_density",
    "log_density_array",
]

_LOG_2PI = math.log(2.0 * math.pi)


class ExpressionError(ValueError):
    """Malformed mechanism expression; ``position`` is the offset in the source."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class GraphError(ValueError):
    """Invalid graph structure (bad parent ids or a directed cycle)."""


# ---------------------------------------------------------------------------
# Expression trees
#
# Nodes are plain nested tuples, which keeps them hashable and trivially
# comparable in tests:
#   ("const", value) ("parent", index) ("neg", a)
#   ("add", a, b) ("sub", a, b) ("mul", a, b) ("sin", a) ("cos", a)
# ---------------------------------------------------------------------------

_NUMBER_RE = re.compile(r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def _tokenize(source: str) -> list[tuple[str, object, int]]:
    tokens: list[tuple[str, object, int]] = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or c == ".":
            m = _NUMBER_RE.match(source, i)
            if m is None:
                raise ExpressionError("malformed number", i)
            tokens.append(("num", float(m.group()), i))
            i = m.end()
            continue
        if c.isalpha() or c == "_":
            m = _NAME_RE.match(source, i)
            tokens.append(("name", m.group(), i))
            i = m.end()
            continue
        if c in "+-*()":
            tokens.append((c, c, i))
            i += 1
            continue
        raise ExpressionError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    """Recursive-descent parser for the mechanism grammar.

    Precedence, loosest first: additive (+ -), multiplicative (*),
    unary minus, atoms. All binary operators are left associative.
    """

    def __init__(self, source: str, arity: int):
        self.tokens = _tokenize(source)
        self.pos = 0
        self.arity = arity

    def peek(self) -> tuple[str, object, int]:
        return self.tokens[self.pos]

    def advance(self) -> tuple[str, object, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> tuple[str, object, int]:
        tok = self.peek()
        if tok[0] != kind:
            raise ExpressionError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        return self.advance()

    def parse(self) -> tuple:
        tree = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionError(f"unexpected trailing {tok[1]!r}", tok[2])
        return tree

    def expr(self) -> tuple:
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.advance()[0]
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self) -> tuple:
        node = self.factor()
        while self.peek()[0] == "*":
            self.advance()
            node = ("mul", node, self.factor())
        return node

    def factor(self) -> tuple:
        if self.peek()[0] == "-":
            self.advance()
            inner = self.factor()
            if inner[0] == "const":
                return ("const", -inner[1])
            return ("neg", inner)
        return self.atom()

    def atom(self) -> tuple:
        kind, value, pos = self.advance()
        if kind == "num":
            return ("const", float(value))
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            name = str(value)
            if name in ("sin", "cos"):
                self.expect("(")
                inner = self.expr()
                self.expect(")")
                return (name, inner)
            if re.fullmatch(r"p\d+", name):
                index = int(name[1:])
                if index >= self.arity:
                    raise ExpressionError(
                        f"parent reference p{index} out of range for arity {self.arity}", pos
                    )
                return ("parent", index)
            raise ExpressionError(f"unknown name {name!r}", pos)
        raise ExpressionError(f"unexpected token {value!r}", pos)


def _eval_tree(node: tuple, x: np.ndarray) -> np.ndarray:
    kind = node[0]
    if kind == "const":
        return np.full(x.shape[0], node[1])
    if kind == "parent":
        return x[:, node[1]]
    if kind == "neg":
        return -_eval_tree(node[1], x)
    if kind == "add":
        return _eval_tree(node[1], x) + _eval_tree(node[2], x)
    if kind == "sub":
        return _eval_tree(node[1], x) - _eval_tree(node[2], x)
    if kind == "mul":
        return _eval_tree(node[1], x) * _eval_tree(node[2], x)
    if kind == "sin":
        return np.sin(_eval_tree(node[1], x))
    if kind == "cos":
        return np.cos(_eval_tree(node[1], x))
    raise AssertionError(f"unknown expression node {kind!r}")


_PREC = {"add": 1, "sub": 1, "mul": 2, "neg": 3}


def _render(node: tuple, min_prec: int = 1) -> str:
    kind = node[0]
    if kind == "const":
        text = repr(float(node[1]))
        if node[1] < 0 and min_prec > 1:
            return f"({text})"
        return text
    if kind == "parent":
        return f"p{node[1]}"
    if kind in ("sin", "cos"):
        return f"{kind}({_render(node[1], 1)})"
    if kind == "neg":
        text = "-" + _render(node[1], 3)
        return f"({text})" if min_prec > 3 else text
    prec = _PREC[kind]
    if kind == "mul":
        text = f"{_render(node[1], 2)}*{_render(node[2], 3)}"
    elif kind == "add":
        text = f"{_render(node[1], 1)} + {_render(node[2], 2)}"
    else:
        text = f"{_render(node[1], 1)} - {_render(node[2], 2)}"
    return f"({text})" if prec < min_prec else text


@dataclass(frozen=True)
class StructuralFunction:
    """One node's mechanism: an expression over its parents' values.

    ``arity`` is the number of parents; a parentless node has arity 0 and a
    constant expression. Evaluation is vectorised over rows of the input.
    """

    expr: tuple
    arity: int

    def __post_init__(self):
        if self.arity < 0:
            raise ExpressionError("arity must be nonnegative")
        _check_refs(self.expr, self.arity)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on an (m, arity) array of parent values; returns shape (m,)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.arity:
            raise ValueError(f"expected input of shape (m, {self.arity}), got {x.shape}")
        return _eval_tree(self.expr, x)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)

    def to_source(self) -> str:
        """Canonical text form; re-parsing it reproduces this tree."""
        return _render(self.expr)


def _check_refs(node: tuple, arity: int) -> None:
    if node[0] == "parent":
        if not 0 <= node[1] < arity:
            raise ExpressionError(f"parent reference p{node[1]} out of range for arity {arity}")
    elif node[0] in ("neg", "sin", "cos"):
        _check_refs(node[1], arity)
    elif node[0] in ("add", "sub", "mul"):
        _check_refs(node[1], arity)
        _check_refs(node[2], arity)


def parse_expression(source: str, arity: int) -> StructuralFunction:
    """Parse mechanism text into a :class:`StructuralFunction`.

    Raises :class:`ExpressionError` with the offending source position on
    syntax errors or parent references at or beyond ``arity``.
    """
    tree = _Parser(source, arity).parse()
    return StructuralFunction(expr=tree, arity=arity)


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Graph:
    """A DAG on nodes ``0..n_nodes-1``.

    ``parents[n]`` is ordered and duplicate free; its order fixes the input
    coordinate order of node ``n``'s mechanism.
    """

    n_nodes: int
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.n_nodes <= 0:
            raise GraphError("graph needs at least one node")
        if len(self.parents) != self.n_nodes:
            raise GraphError("parents must list every node")
        object.__setattr__(
            self, "parents", tuple(tuple(int(p) for p in ps) for ps in self.parents)
        )
        for n, ps in enumerate(self.parents):
            if len(set(ps)) != len(ps):
                raise GraphError(f"node {n} has duplicate parents")
            for p in ps:
                if not 0 <= p < self.n_nodes:
                    raise GraphError(f"node {n} has invalid parent {p}")
                if p == n:
                    raise GraphError(f"node {n} lists itself as a parent")
        topo_order(self)  # raises GraphError on cycles

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Sequence[Sequence[int]]) -> Graph:
        """Build from a parent->child edge list; edge order fixes parent order."""
        parents: list[list[int]] = [[] for _ in range(n_nodes)]
        for edge in edges:
            if len(edge) != 2:
                raise GraphError(f"edge {edge!r} is not a (parent, child) pair")
            p, c = int(edge[0]), int(edge[1])
            if not (0 <= c < n_nodes):
                raise GraphError(f"edge {edge!r} has invalid child")
            parents[c].append(p)
        return cls(n_nodes=n_nodes, parents=tuple(tuple(ps) for ps in parents))

    def arity(self, node: int) -> int:
        return len(self.parents[node])


def topo_order(graph: Graph) -> list[int]:
    """Topological order of the graph, ties broken by ascending node id.

    The tie break makes the output deterministic: among all nodes whose
    parents have been placed, the smallest id goes next.
    """
    indegree = [len(ps) for ps in graph.parents]
    children: list[list[int]] = [[] for _ in range(graph.n_nodes)]
    for n, ps in enumerate(graph.parents):
        for p in ps:
            children[p].append(n)
    ready = [n for n in range(graph.n_nodes) if indegree[n] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for c in children[n]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != graph.n_nodes:
        raise GraphError("graph contains a directed cycle")
    return order


# ---------------------------------------------------------------------------
# Interventions and model specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intervention:
    """A set of hard clamps ``(node, value)``; the empty set is observational."""

    clamps: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        clamps = tuple((int(n), float(v)) for n, v in self.clamps)
        object.__setattr__(self, "clamps", clamps)
        nodes = [n for n, _ in clamps]
        if len(set(nodes)) != len(nodes):
            raise ValueError("intervention clamps the same node twice")
        if any(n < 0 for n in nodes):
            raise ValueError("intervention clamps an invalid node id")
        if any(not math.isfinite(v) for _, v in clamps):
            raise ValueError("intervention values must be finite")

    @classmethod
    def null(cls) -> Intervention:
        return cls(())

    @classmethod
    def do(cls, *clamps: tuple[int, float]) -> Intervention:
        return cls(tuple(clamps))

    @property
    def is_null(self) -> bool:
        return not self.clamps

    @property
    def nodes(self) -> frozenset[int]:
        return frozenset(n for n, _ in self.clamps)

    def value_of(self, node: int) -> float:
        for n, v in self.clamps:
            if n == node:
                return v
        raise KeyError(f"node {node} is not clamped")

    def validate_for(self, n_nodes: int) -> None:
        for n, _ in self.clamps:
            if n >= n_nodes:
                raise ValueError(f"intervention clamps node {n} outside the graph")


@dataclass(frozen=True)
class InterventionFamily:
    """Descriptor of the interventions a model admits.

    ``single-variable`` clamps one node; ``upstream-chain`` clamps a node and
    everything before it on a chain. Clamp values range over [low, high].
    """

    kind: str
    low: float = -6.0
    high: float = 6.0

    def __post_init__(self):
        if self.kind not in ("single-variable", "upstream-chain"):
            raise ValueError(f"unknown intervention family {self.kind!r}")
        if not self.low < self.high:
            raise ValueError("intervention range must have low < high")


@dataclass(frozen=True)
class ScmSpec:
    """Ground-truth model: graph, per-node mechanisms and noise variances.

    ``noise_vars[n]`` may be zero, which makes node ``n`` deterministic given
    its parents; densities are only defined when every unclamped node has
    strictly positive noise.
    """

    graph: Graph
    functions: tuple[StructuralFunction, ...]
    noise_vars: tuple[float, ...]
    intervention_family: InterventionFamily | None = None

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "noise_vars", tuple(float(v) for v in self.noise_vars))
        if len(self.functions) != self.graph.n_nodes:
            raise ValueError("need one mechanism per node")
        if len(self.noise_vars) != self.graph.n_nodes:
            raise ValueError("need one noise variance per node")
        for n, fn in enumerate(self.functions):
            if fn.arity != self.graph.arity(n):
                raise ValueError(
                    f"node {n} mechanism arity {fn.arity} != parent count {self.graph.arity(n)}"
                )
        if any(v < 0 or not math.isfinite(v) for v in self.noise_vars):
            raise ValueError("noise variances must be finite and nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def node_mean(self, node: int, parent_values: np.ndarray) -> np.ndarray:
        """Mechanism value of ``node`` at an (m, arity) array of parent values."""
        return self.functions[node].evaluate(parent_values)


@dataclass(frozen=True)
class Draw:
    """One sample vector tagged with the intervention it was drawn under."""

    intervention: Intervention
    x: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if any(not math.isfinite(v) for v in self.x):
            raise ValueError("draw contains non-finite values")
        for n, v in self.intervention.clamps:
            if n >= len(self.x):
                raise ValueError("intervention clamps a node outside the draw")
            if self.x[n] != v:
                raise ValueError(f"draw coordinate {n} does not equal its clamp value")


# ---------------------------------------------------------------------------
# Sampling and densities
# ---------------------------------------------------------------------------


def sample_scm(scm: ScmSpec, intervention: Intervention, rng: np.random.Generator) -> Draw:
    """Draw one vector from the model under ``intervention``.

    Nodes are filled in topological order: clamped nodes take their clamp
    value exactly, every other node gets its mechanism value at the already
    realised parents plus Gaussian noise.
    """
    x = sample_scm_array(scm, intervention, rng, 1)[0]
    return Draw(intervention=intervention, x=tuple(x))


def sample_scm_array(
    model, intervention: Intervention, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Vectorised ancestral sampling; returns an array of shape (size, n_nodes).

    ``model`` needs ``graph``, ``noise_vars`` and ``node_mean``; this covers
    both ground-truth specs and plug-in estimates. One block of standard
    normals is consumed per unclamped node, in topological order.
    """
    graph = model.graph
    intervention.validate_for(graph.n_nodes)
    clamped = dict(intervention.clamps)
    x = np.empty((size, graph.n_nodes))
    for n in topo_order(graph):
        if n in clamped:
            x[:, n] = clamped[n]
            continue
        mean = model.node_mean(n, x[:, graph.parents[n]])
        sd = math.sqrt(model.noise_vars[n])
        x[:, n] = mean + sd * rng.standard_normal(size)
    return x


def log_density(model, intervention: Intervention, x) -> float:
    """Log density of ``x`` under the intervened model.

    Clamped coordinates carry point masses and are excluded: the value is the
    sum of Gaussian log densities of the unclamped coordinates given their
    parents. Clamping everything yields 0 by the empty-sum convention. The
    clamped coordinates of ``x`` must equal the clamp values exactly.
    """
    arr = np.asarray(x, dtype=float).reshape(1, -1)
    return float(log_density_array(model, intervention, arr)[0])


def log_density_array(model, intervention: Intervention, x: np.ndarray) -> np.ndarray:
    """Row-wise :func:`log_density` for an (m, n_nodes) array."""
    graph = model.graph
    intervention.validate_for(graph.n_nodes)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != graph.n_nodes:
        raise ValueError(f"expected shape (m, {graph.n_nodes}), got {x.shape}")
    clamped = dict(intervention.clamps)
    for n, v in clamped.items():
        if np.any(x[:, n] != v):
            raise ValueError(f"coordinate {n} differs from its clamp value")
    total = np.zeros(x.shape[0])
    for n in range(graph.n_nodes):
        if n in clamped:
            continue
        var = model.noise_vars[n]
        if var <= 0:
            raise ValueError(f"node {n} has no density (noise variance {var})")
        mean = model.node_mean(n, x[:, graph.parents[n]])
        total += -0.5 * (_LOG_2PI + math.log(var)) - (x[:, n] - mean) ** 2 / (2.0 * var)
    return total
