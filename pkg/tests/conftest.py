import numpy as np
import pytest

from scmlearn.gp import Kernel
from scmlearn.scm import Graph, ScmSpec, parse_expression


def make_chain(expressions, noise=0.1):
    n = len(expressions)
    graph = Graph.from_edges(n, [[i, i + 1] for i in range(n - 1)])
    fns = tuple(
        parse_expression(src, graph.arity(i)) for i, src in enumerate(expressions)
    )
    return ScmSpec(graph, fns, tuple([noise] * n))


def unit_kernels(n, bandwidth=1.0, amplitude=1.0):
    return tuple(Kernel(bandwidth=bandwidth, amplitude=amplitude) for _ in range(n))


@pytest.fixture
def square_chain():
    """Constant root, squared child, affine-plus-sine grandchild."""
    return make_chain(["3", "p0*p0", "2*p0 + sin(p0)"])


@pytest.fixture
def sine_chain3():
    return make_chain(["0", "2*sin(p0)", "cos(p0) + p0"])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
