"""Run-level invariants shared by the driver and acceptance tests."""

import numpy as np

from slimjoint import drivers, pareto
from slimjoint.archspec import cost_function


def audit_history(art, dataset):
    """Every H entry has an in-box width, its exact cost, and (after the final
    reevaluation) its exact full-train cross-entropy."""
    cost = cost_function(art.spec, art.config.cost_objective)
    train = dataset.train
    W = art.history.widths()
    assert W.shape == (len(art.history), art.spec.d)
    assert np.all(W >= art.lower) and np.all(W <= art.upper)
    for e in art.history:
        assert e.cost == float(cost(e.width))
        assert 0 <= e.iteration_added <= art.config.F
    ce = drivers._ce_on(art.weights, art.spec, list(W), train.inputs, train.labels)
    assert np.array_equal(ce, art.history.ce())


def audit_pareto(art):
    """The reported front is exactly front 0 of H, and it covers every other entry."""
    ce, costs = art.history.ce(), art.history.costs()
    assert art.pareto == pareto.pareto_front(ce, costs)
    front = set(art.pareto)
    for i in range(len(ce)):
        if i in front:
            continue
        assert any(pareto.dominates((ce[j], costs[j]), (ce[i], costs[i])) for j in front)
    assert list(np.argsort(costs[art.pareto], kind="stable")) == list(range(len(front)))
