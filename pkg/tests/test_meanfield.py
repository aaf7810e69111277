import math
from datetime import datetime
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from econsandbox.backends import MockAgentParams, MockLinearAgent
from econsandbox.data import CustomerRecord, DataError, ProductRecord, TransactionRecord
from econsandbox.meanfield import (
    FieldDecision, MeanFieldError, MeanFieldState, WindowConfig, aggregate_decisions,
    embed_meanfield, init_meanfield, linear_response_runner, meanfield_step, run_meanfield,
    sup_distance, window_average,
)
from econsandbox.prompts import build_retail_prompt, decode_sidecar


def _catalog(spec):
    """``spec``: {category: [product ids]}"""
    return {p: ProductRecord(p, (cat,), Decimal("2")) for cat, ps in spec.items() for p in ps}


def _txn(month, pid, q):
    return TransactionRecord(datetime(2024, month, 10), "C1", "retail", pid, q,
                             Decimal("2"), Decimal("0"), "web")


def test_window_average_examples():
    series = [("2024-01", 9), ("2024-02", 2), ("2024-03", 4), ("2024-04", 6)]
    assert window_average(series, 3, "2024-05") == 4
    assert window_average(series, 1, "2024-05") == 6
    assert window_average([("2024-01", 6), ("2024-03", 6)], 3, "2024-04") == 4
    assert window_average([], 3, "2024-04", return_flag=True) == (0.0, True)
    assert window_average([("2024-05", 3)], 2, "2024-04", return_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        window_average(series, 0, "2024-05")


def test_window_config_invariants():
    with pytest.raises(ValueError):
        WindowConfig(W=0)
    for eta in (0.0, 1.5):
        with pytest.raises(ValueError):
            WindowConfig(eta=eta)


def test_init_single_product():
    mu = init_meanfield([_txn(1, "P1", 2)], _catalog({"A": ["P1"]}), 3, "2024-02")
    assert mu.shares == {"A": {"P1": 1.0}} and mu.t == 0


def test_init_75_25_split():
    cat = _catalog({"A": ["P1", "P2"]})
    txns = [_txn(2, "P1", 3), _txn(3, "P2", 1)]
    mu = init_meanfield(txns, cat, 3, "2024-04", smoothing=0.0)
    assert mu.shares["A"] == {"P1": 0.75, "P2": 0.25}
    assert mu.mean_quantity["A"] == 2.0
    smoothed = init_meanfield(txns, cat, 3, "2024-04", smoothing=1.0)
    assert smoothed.shares["A"] == {"P1": 4 / 6, "P2": 2 / 6}


def test_init_errors():
    cat = _catalog({"A": ["P1"]})
    with pytest.raises(DataError):
        init_meanfield([], cat, 3, "2024-04")
    with pytest.raises(DataError):
        init_meanfield([_txn(5, "P1", 1)], cat, 3, "2024-04")


def test_state_invariants():
    with pytest.raises(ValueError):
        MeanFieldState({"A": -1.0}, {"A": {"P1": 1.0}})
    with pytest.raises(ValueError):
        MeanFieldState({"A": 1.0}, {"A": {"P1": 0.5, "P2": 0.6}})


def _mu(q, shares):
    return MeanFieldState({"A": q}, {"A": shares})


def test_eta_one_identity():
    cat = _catalog({"A": ["P1", "P2"]})
    mu = _mu(5.0, {"P1": 0.5, "P2": 0.5})
    batch = [FieldDecision("P1", 3), FieldDecision("P2", 1)]
    nu = aggregate_decisions(batch, cat, smoothing=0.0)
    nxt = meanfield_step(mu, lambda m: batch, 1.0, cat, smoothing=0.0)
    assert nxt.mean_quantity == nu.mean_quantity and nxt.shares == nu.shares and nxt.t == 1


def test_fixed_point():
    cat = _catalog({"A": ["P1", "P2"]})
    batch = [FieldDecision("P1", 3), FieldDecision("P2", 1)]
    mu = aggregate_decisions(batch, cat, smoothing=0.0)
    nxt = meanfield_step(mu, lambda m: batch, 0.3, cat, smoothing=0.0)
    assert sup_distance(mu, nxt) < 1e-15


def test_constant_runner_immediate_fixed_point():
    cat = _catalog({"A": ["P1"]})
    run = lambda m: [FieldDecision("P1", 4)]  # noqa: E731
    mu1 = meanfield_step(_mu(1.0, {"P1": 1.0}), run, 1.0, cat)
    mu2 = meanfield_step(mu1, run, 1.0, cat)
    assert sup_distance(mu1, mu2) == 0


def test_all_failed_batch():
    with pytest.raises(MeanFieldError):
        meanfield_step(_mu(1.0, {"P1": 1.0}), lambda m: [None, None], 1.0, _catalog({"A": ["P1"]}))


def test_barrier_semantics():
    seen = []

    def runner(mu):
        seen.append(mu)
        return [FieldDecision("P1", 2)] * 3

    run_meanfield(WindowConfig(eta=0.5), _mu(1.0, {"P1": 1.0}), runner, 1e-6, 5,
                  _catalog({"A": ["P1"]}))
    assert all(seen[i].t == i for i in range(len(seen)))


def test_linear_convergence_to_closed_form():
    a, lam = 2.0, 0.5
    cat = _catalog({"A": ["P1"], "B": ["P2"]})
    runner = linear_response_runner(a, lam, ["P1", "P2"], n_agents=2)
    mu0 = MeanFieldState({"A": 0.0, "B": 10.0}, {"A": {"P1": 1.0}, "B": {"P2": 1.0}})
    tol = 1e-6
    mu, traj = run_meanfield(WindowConfig(eta=1.0), mu0, runner, tol, 100, cat)
    gap = abs(a / (1 - lam) - 10.0)
    assert traj.converged
    assert len(traj.deltas) <= math.ceil(math.log(tol / gap) / math.log(lam)) + 1
    for q in mu.mean_quantity.values():
        assert q == pytest.approx(a / (1 - lam), abs=1e-5)


@pytest.mark.parametrize("eta", [1.0, 0.8, 0.5, 0.3])
@pytest.mark.parametrize("lam", [0.2, 0.5, 0.8])
def test_contraction_factor(eta, lam):
    cat = _catalog({"A": ["P1"]})
    runner = linear_response_runner(1.0, lam, ["P1"])
    _, traj = run_meanfield(WindowConfig(eta=eta), _mu(20.0, {"P1": 1.0}), runner, 1e-300, 10, cat)
    expected = abs(1 - eta * (1 - lam))
    for f in traj.contraction_factors():
        assert f == pytest.approx(expected, rel=0.05)


def test_max_iter_and_loose_tol():
    cat = _catalog({"A": ["P1"]})
    runner = linear_response_runner(1.0, 0.5, ["P1"])
    _, traj = run_meanfield(WindowConfig(eta=1.0), _mu(5.0, {"P1": 1.0}), runner, 1e-9, 1, cat)
    assert len(traj.states) == 2 and not traj.converged
    _, traj = run_meanfield(WindowConfig(eta=1.0), _mu(5.0, {"P1": 1.0}), runner, 100.0, 50, cat)
    assert traj.converged and len(traj.deltas) == 1
    with pytest.raises(ValueError):
        run_meanfield(WindowConfig(), _mu(5.0, {"P1": 1.0}), runner, 0.0, 5, cat)
    with pytest.raises(ValueError):
        run_meanfield(WindowConfig(), _mu(5.0, {"P1": 1.0}), runner, 1e-3, 0, cat)


def test_runner_failure_keeps_trajectory():
    calls = []

    def runner(mu):
        calls.append(1)
        if len(calls) == 3:
            raise RuntimeError("backend down")
        return [FieldDecision("P1", 2)]

    with pytest.raises(MeanFieldError) as info:
        run_meanfield(WindowConfig(eta=0.5), _mu(1.0, {"P1": 1.0}), runner, 1e-9, 10,
                      _catalog({"A": ["P1"]}))
    assert len(info.value.trajectory.states) == 3


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["P1", "P2", "P3"]), st.integers(0, 50)), min_size=1,
                max_size=20),
       st.floats(0.05, 1.0), st.floats(0.0, 2.0))
def test_simplex_after_every_step(batch, eta, smoothing):
    cat = _catalog({"A": ["P1", "P2"], "B": ["P3"]})
    mu = MeanFieldState({"A": 1.0, "B": 1.0}, {"A": {"P1": 0.5, "P2": 0.5}, "B": {"P3": 1.0}})
    decisions = [FieldDecision(p, q, buy=q > 0) for p, q in batch]
    for _ in range(3):
        mu = meanfield_step(mu, lambda m: decisions, eta, cat, smoothing)
        for c, s in mu.shares.items():
            assert abs(sum(s.values()) - 1) <= 1e-9
            assert min(s.values()) >= 0
        assert min(mu.mean_quantity.values()) >= 0


def test_embed_rewrites_trends_only():
    cat = {"P1": ProductRecord("P1", ("A",), Decimal("3"), {"brand": "x"})}
    prompt = build_retail_prompt(CustomerRecord("C1", "low", "retail", ()), ["P1"], [0], cat)
    mu = _mu(2.5, {"P1": 1.0})
    out = embed_meanfield(prompt, mu)
    assert "2.50 units" in out.market_trends
    assert out.candidates == prompt.candidates and out.persona == prompt.persona
    assert decode_sidecar(out.rendered_text)["market_field"] == {"A": 2.5}
    agent = MockLinearAgent(MockAgentParams(10, 2, 0))
    assert agent.complete([("user", out.rendered_text)]) == agent.complete([("user", prompt.rendered_text)])
