import math
from datetime import datetime
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from econsandbox.backends import (
    BackendError, EchoBackend, FunctionBackend, MockAgentParams, MockLinearAgent, ParseError,
    PlantedPopulationMock,
)
from econsandbox.data import CustomerRecord, ProductRecord, StyleParams, planted_quantity
from econsandbox.prompts import build_retail_prompt, decode_sidecar, iter_instances, summarize_profile
from econsandbox.retail import (
    ECONOMIC_PRIOR, EpisodeError, FeatureEmphasis, PerturbationConfig, Strategy,
    attention_divergence, elicit_feature_emphasis, generate_candidate_strategies,
    multi_sample_consistency, parse_emphasis, perturb_prices, run_retail_episode,
    score_and_select_strategy,
)


def _setup(prices, discounts=None, seed=0, history=(), ratings=None):
    ratings = ratings or ["4.0"] * len(prices)
    cat = {f"P{i}": ProductRecord(f"P{i}", ("A",), Decimal(str(p)),
                                  {"brand": f"B{i}", "rating": ratings[i]})
           for i, p in enumerate(prices)}
    cust = CustomerRecord("C1", "low", "retail", tuple(history))
    prompt = build_retail_prompt(cust, list(cat), discounts or [0] * len(cat), cat, seed=seed)
    return cust, prompt, cat


def test_episode_matches_planted_oracle(small_market):
    mock = PlantedPopulationMock(small_market.planted_params)
    idx = list(range(0, len(small_market.transactions), 5))
    for inst in iter_instances(small_market.transactions, small_market.catalog,
                               small_market.customers, idx, seed=1):
        t = inst.transaction
        ep = run_retail_episode(small_market.customers[t.customer_id], inst.prompt, None, mock)
        assert ep.valid
        assert (ep.decision.product_id, ep.decision.quantity) == (t.product_id, t.quantity)


def test_style_changes_persona_not_sidecar():
    cust, prompt, _ = _setup([3, 4])
    rho = StyleParams(1.0, 1.0, 0.5)
    rho2 = StyleParams(2.0, 1.0, 0.5)
    agent = EchoBackend('{"buy": false}')
    a = run_retail_episode(cust, prompt, rho, agent).prompt
    b = run_retail_episode(cust, prompt, rho2, agent).prompt
    assert a.persona != b.persona
    assert decode_sidecar(a.rendered_text) == decode_sidecar(b.rendered_text)
    assert a.style_tags["discount_sensitivity"] == 1.0 and b.style_tags["discount_sensitivity"] == 2.0


def test_invalid_response_marks_episode_invalid():
    cust, prompt, _ = _setup([3])
    ep = run_retail_episode(cust, prompt, None, EchoBackend("hmm, hard to say"))
    assert not ep.valid and "NoDecisionFound" in ep.error
    assert ep.audit()["parse_status"].startswith("error")


def test_backend_error_carries_context():
    def boom(messages):
        raise BackendError("down")

    cust, prompt, _ = _setup([3])
    with pytest.raises(EpisodeError, match="C1"):
        run_retail_episode(cust, prompt, None, FunctionBackend(boom), seed=7)


def _mock(alpha, beta, sigma=0.0, seed=0, gamma=0.0):
    return MockLinearAgent(MockAgentParams(alpha, beta, gamma, {"price": -1.0}, sigma, seed))


def test_lcons_zero_without_perturbation():
    cust, prompt, _ = _setup([3, 4])
    _, l = multi_sample_consistency(cust, prompt, PerturbationConfig(0.0, K=4), _mock(10, 2))
    assert l == 0


def test_lcons_zero_for_price_insensitive_mock():
    cust, prompt, _ = _setup([3, 4])
    for sigma in (0.1, 0.5, 2.0):
        _, l = multi_sample_consistency(cust, prompt, PerturbationConfig(sigma, K=6, seed=3),
                                        _mock(10, 0, sigma=0.7))
        assert l == 0


def test_lcons_hand_evaluated():
    cust, prompt, _ = _setup([3])
    cfg = PerturbationConfig(0.1, K=2, offsets=(0.5 / 3, -0.5 / 3))
    samples, l = multi_sample_consistency(cust, prompt, cfg, _mock(10, 2))
    assert sorted(s.quantity for s in samples) == [3, 5]
    assert l == 1.0


def test_lcons_too_many_failures():
    cust, prompt, _ = _setup([3])
    calls = []

    def flaky(messages):
        calls.append(1)
        return '{"buy": true, "product_id": "P0", "quantity": 2}' if len(calls) == 1 else "??"

    with pytest.raises(EpisodeError):
        multi_sample_consistency(cust, prompt, PerturbationConfig(0.1, K=4), FunctionBackend(flaky))


def test_perturbation_config_invariants():
    with pytest.raises(ValueError):
        PerturbationConfig(-1.0)
    with pytest.raises(ValueError):
        PerturbationConfig(0.1, K=1)


def test_perturb_prices_only_touches_display():
    cust, prompt, _ = _setup([10])
    p = perturb_prices(prompt, 0.1)
    assert p.candidates[0].unit_price == Decimal("11.00")
    assert p.history_summary == prompt.history_summary


def test_attention_identity_and_direct_sum():
    assert attention_divergence(ECONOMIC_PRIOR, ECONOMIC_PRIOR) == 0.0
    A = FeatureEmphasis.normalized([0.5, 0.5, 0, 0, 0, 0], smoothing=1e-3)
    U = FeatureEmphasis.normalized([1] * 6)
    direct = sum(a * math.log(a / (1 / 6)) for a in A.weights)
    assert attention_divergence(A, U) == pytest.approx(direct, abs=1e-12)


def test_attention_asymmetric():
    A = FeatureEmphasis((0.5, 0.3, 0.1, 0.05, 0.03, 0.02))
    B = FeatureEmphasis((0.1, 0.1, 0.2, 0.2, 0.2, 0.2))
    assert attention_divergence(A, B) != pytest.approx(attention_divergence(B, A))


def test_attention_rejects_zero_prior():
    A = FeatureEmphasis.normalized([1, 1, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        attention_divergence(A, FeatureEmphasis((1, 0, 0, 0, 0, 0)))


def test_attention_nonnegative_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = FeatureEmphasis(tuple(rng.dirichlet(np.ones(6))))
        b = FeatureEmphasis(tuple(rng.dirichlet(np.ones(6))))
        assert attention_divergence(a, b) >= -1e-15


def test_emphasis_invariants():
    with pytest.raises(ValueError):
        FeatureEmphasis((0.5, 0.5, 0.5, 0, 0, 0))


def test_elicit_mock_price_only():
    cust, prompt, _ = _setup([3, 4])
    A = elicit_feature_emphasis(_mock(10, 1), prompt)
    assert A.as_dict()["price"] == 1.0
    S = elicit_feature_emphasis(_mock(10, 1), prompt, smoothing=0.01)
    assert max(S.weights) == S.as_dict()["price"] and min(S.weights) > 0


def test_parse_emphasis_variants():
    assert parse_emphasis('{"price": 50, "discount": 50}').weights == (0.5, 0.5, 0, 0, 0, 0)
    three = parse_emphasis('{"price": 40, "discount": 40, "brand": 40}')
    assert three.weights[:3] == pytest.approx((1 / 3,) * 3, abs=1e-15)
    assert parse_emphasis("price: 40, brand: 40, trends: 20").as_dict()["trends"] == 0.2
    with pytest.raises(ParseError):
        parse_emphasis("no idea")


def test_strategies_with_and_without_history(small_market):
    cust = next(c for c in small_market.customers.values() if len(c.purchase_history) > 2)
    cutoff = cust.purchase_history[-1].timestamp
    z = summarize_profile(cust, cutoff, small_market.catalog)
    hist = cust.history_before(cutoff)
    full = generate_candidate_strategies(z, hist)
    assert [s.name for s in full] == ["repeat-last-purchase", "cheapest-candidate", "highest-review",
                                       "brand-loyal", "discount-chaser"]
    assert full == generate_candidate_strategies(z, hist)
    empty = generate_candidate_strategies(summarize_profile(CustomerRecord("N", "low", "retail", ()),
                                                            cutoff, small_market.catalog), ())
    assert len(empty) == 4 and "brand-loyal" not in [s.name for s in empty]


def test_mock_scoring_prefers_cheapest():
    cust, prompt, _ = _setup([3, 9, 6], discounts=[0, Decimal("0.2"), 0])
    z = summarize_profile(cust, datetime(2030, 1, 1), {})
    strategies = generate_candidate_strategies(z, ())
    chosen, ep = score_and_select_strategy(strategies, prompt, _mock(10, 0.1), cust)
    assert chosen.name in ("cheapest-candidate", "repeat-last-purchase")
    # repeat-last-purchase with no history falls back to max utility (= cheapest here) and ties
    # earlier in list order, so compare the picked product instead
    assert ep.decision.product_id == "P0"


def test_cheapest_wins_when_unique():
    cust, prompt, _ = _setup([3, 9, 6], ratings=["3.0", "4.8", "4.0"])
    strategies = [Strategy("highest-review", "x"), Strategy("cheapest-candidate", "y"),
                  Strategy("discount-chaser", "z")]
    agent = MockLinearAgent(MockAgentParams(10, 0.1, 0, {"reviews": 1.0}))
    chosen, ep = score_and_select_strategy(strategies, prompt, agent, cust)
    assert chosen.name == "cheapest-candidate"
    assert ep.decision.product_id == "P0"


def test_single_strategy_and_tie_break():
    cust, prompt, _ = _setup([3, 4])
    s = [Strategy("a", "x"), Strategy("b", "y"), Strategy("c", "z")]
    chosen, _ = score_and_select_strategy(s[:1], prompt, EchoBackend('{"scores": {"a": 1}}'), cust)
    assert chosen.name == "a"
    tie = EchoBackend('{"scores": {"a": 2, "b": 1, "c": 2}}')
    chosen, _ = score_and_select_strategy(s, prompt, tie, cust)
    assert chosen.name == "a"


def test_unparseable_scores_fall_back():
    cust, prompt, _ = _setup([3, 4])
    chosen, ep = score_and_select_strategy([Strategy("a", "x")], prompt,
                                           EchoBackend("I like them all"), cust)
    assert chosen is None and not ep.valid


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=6, unique=True), st.integers(0, 10**9))
def test_episode_choice_invariant_to_shuffle(prices, seed):
    a = run_retail_episode(*_setup(prices, seed=0)[:2], None, _mock(30, 0.5))
    b = run_retail_episode(*_setup(prices, seed=seed)[:2], None, _mock(30, 0.5))
    assert a.decision == b.decision
