import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from varmcmc.model import BeliefNetwork, Dataset, GaussianPrior, generate, single_child_network

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def _sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


def naive_log_likelihood(net: BeliefNetwork, data: Dataset, theta_flat) -> float:
    """Sum over every hidden configuration of every slice, one product at a time."""
    theta = net.split_theta(theta_flat)
    hidden = net.hidden_nodes
    vals = np.ma.getdata(data.values)
    total = 0.0
    for t in range(data.T):
        terms = []
        for combo in itertools.product((-1, 1), repeat=len(hidden)):
            x = {n: int(vals[t, net.index(n)]) for n in net.nodes}
            x.update(zip(hidden, combo))
            p = 1.0
            for node in net.nodes:
                if net.parents[node]:
                    a = net.alpha + sum(w * x[q] for w, q in zip(theta[node], net.parents[node]))
                    p *= _sigmoid(x[node] * a)
                else:
                    pr = net.root_prob.get(node, _sigmoid(net.alpha))
                    p *= pr if x[node] == 1 else 1.0 - pr
            terms.append(p)
        total += math.log(math.fsum(terms))
    return total


def small_network(n_parents=2, n_hidden=1, alpha=0.5, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, 1.5, n_parents)
    return single_child_network(n_parents, theta, alpha, parent_prob=rng.uniform(0.2, 0.8, n_parents),
                                hidden_parents=tuple(range(n_hidden)))


def two_layer_network(seed=0):
    """Hidden root h, hidden middle m (parent h) and observed leaves below both."""
    rng = np.random.default_rng(seed)
    nodes = ["h", "m", "a", "b"]
    parents = {"h": [], "m": ["h"], "a": ["h", "m"], "b": ["m"]}
    theta = {"m": rng.normal(size=1), "a": rng.normal(size=2), "b": rng.normal(size=1)}
    hidden = {"h": True, "m": True, "a": False, "b": False}
    return BeliefNetwork(nodes, parents, theta, 0.3, hidden, {"h": 0.55})


@pytest.fixture
def tiny_problem():
    net = small_network(2, 1, seed=3)
    data = generate(net, 40, seed=11)
    prior = GaussianPrior.isotropic(net, 0.0, 4.0)
    return net, prior, data


# criterion number -> report line, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
