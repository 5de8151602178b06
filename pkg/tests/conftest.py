import numpy as np
import pytest

from dlnmclust.graph import grid_graph, path_graph
from dlnmclust.model import ModelData, ModelSpec, PanelDataset, ParameterState, Variant
from dlnmclust.splines import build_crossbasis, default_crossbasis_spec


def random_state(rng, n, T, p, C=1, variant=Variant.STANDARD):
    st = ParameterState.zeros(n, T, p, C, variant)
    st.alpha = rng.normal(-1, 0.5)
    st.log_r = rng.normal(1.0, 0.5)
    st.eta = rng.normal(0, 0.3, (C, p))
    st.u = rng.normal(0, 0.3, n)
    st.v = rng.normal(0, 0.3, n)
    st.gamma = rng.normal(0, 0.2, T)
    st.sigma_u, st.sigma_v, st.sigma_gamma = rng.uniform(0.1, 2, 3)
    st.z = rng.integers(C, size=n)
    q = rng.dirichlet(np.ones(C), size=n)
    st.q = q
    if Variant.parse(variant) is Variant.MIXTURE_SPATIAL:
        st.assignment_u = rng.normal(0, 1, (C - 1, n))
        st.assignment_v = rng.normal(0, 1, (C - 1, n))
        st.sigma_uc = rng.uniform(0.2, 2, C - 1)
        st.sigma_vc = rng.uniform(0.2, 2, C - 1)
        logits = st.assignment_logits()
        e = np.exp(logits - logits.max(axis=0))
        st.q = (e / e.sum(axis=0)).T
    return st


def small_panel(rng, rows=3, cols=3, T=20, L=3, offset=50.0):
    graph = grid_graph(rows, cols)
    n = graph.n
    X = rng.gamma(4.0, 0.25, (n, T))
    Y = rng.poisson(offset * 0.05, (n, T))
    return PanelDataset(Y, X, np.full(n, offset), graph)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def panel(rng):
    return small_panel(rng)


@pytest.fixture
def model_data(panel):
    spec = default_crossbasis_spec(panel.X, max_lag=3)
    return ModelData(panel, build_crossbasis(panel, spec))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
