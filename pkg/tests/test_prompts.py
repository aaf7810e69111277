import json
from collections import Counter
from datetime import datetime
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from econsandbox.backends import parse_retail
from econsandbox.data import CustomerRecord, DataError, ProductRecord, TransactionRecord
from econsandbox.prompts import (
    NO_HISTORY_MARKER, SECTION_HEADERS, build_alignment_dataset, build_retail_prompt,
    decode_sidecar, discounted_price, iter_instances, read_alignment_jsonl, shuffle_candidates,
    summarize_profile, write_alignment_jsonl,
)


def _cat():
    return {
        "A1": ProductRecord("A1", ("A",), Decimal("10.00"), {"brand": "X", "rating": "4.5"}),
        "A2": ProductRecord("A2", ("A",), Decimal("4.00"), {"brand": "Y", "rating": "3.9"}),
        "A3": ProductRecord("A3", ("A",), Decimal("6.50"), {"brand": "X"}),
        "B1": ProductRecord("B1", ("B",), Decimal("2.00"), {"brand": "Z"}),
    }


def _t(pid, qty, disc, day):
    return TransactionRecord(datetime(2024, 1, day), "C1", "retail", pid, qty, Decimal("1.00"),
                             Decimal(disc), "store")


def test_category_preferences_single_category():
    c = CustomerRecord("C1", "low", "retail", (_t("A1", 2, "0", 1), _t("A2", 1, "0", 2)))
    z = summarize_profile(c, datetime(2024, 2, 1), _cat())
    assert z.features["category_preferences"] == {"A": 1.0}


def test_promotion_sensitivity_is_quantity_share():
    hist = (_t("A1", 1, "0.1", 1), _t("A1", 1, "0.2", 2), _t("A2", 1, "0.3", 3), _t("A2", 1, "0", 4))
    z = summarize_profile(CustomerRecord("C1", "low", "retail", hist), datetime(2024, 2, 1), _cat())
    assert z.features["promotion_sensitivity"] == 0.75


def test_no_history_marker():
    z = summarize_profile(CustomerRecord("C9", "low", "retail", ()), datetime(2024, 2, 1), _cat())
    assert NO_HISTORY_MARKER in z.text


def test_profile_uses_only_history_before_cutoff():
    hist = (_t("A1", 1, "0", 1), _t("B1", 5, "0", 20))
    z = summarize_profile(CustomerRecord("C1", "low", "retail", hist), datetime(2024, 1, 10), _cat())
    assert z.features["category_preferences"] == {"A": 1.0}
    assert "B1" not in z.text


def test_profile_with_backend_keeps_features():
    from econsandbox.backends import EchoBackend

    c = CustomerRecord("C1", "low", "retail", (_t("A1", 2, "0", 1),))
    z = summarize_profile(c, datetime(2024, 2, 1), _cat(), backend=EchoBackend("A loyal shopper."))
    assert z.text == "A loyal shopper."
    assert z.features["category_preferences"] == {"A": 1.0}


def test_three_candidates_numbered():
    c = CustomerRecord("C1", "low", "retail", ())
    p = build_retail_prompt(c, ["A1", "A2", "A3"], [0, 0, 0], _cat(), seed=4)
    body = p.rendered_text.split(SECTION_HEADERS[1])[0]
    assert [ln.split(".")[0] for ln in body.splitlines() if ln[:1].isdigit()] == ["1", "2", "3"]


def test_discounted_display_price():
    assert discounted_price(Decimal("10.00"), Decimal("0.2")) == Decimal("8.00")
    c = CustomerRecord("C1", "low", "retail", ())
    p = build_retail_prompt(c, ["A1"], [Decimal("0.2")], _cat())
    assert "after discount 8.00" in p.rendered_text
    assert p.candidates[0].price_after_discount == Decimal("8.00")


def test_unknown_candidate_rejected():
    with pytest.raises(DataError):
        build_retail_prompt(CustomerRecord("C1", "low", "retail", ()), ["Q"], [0], _cat())


def test_sections_in_order_over_generated_prompts(small_market):
    idx = list(range(min(100, len(small_market.transactions))))
    for inst in iter_instances(small_market.transactions, small_market.catalog,
                               small_market.customers, idx, seed=2):
        text = inst.prompt.rendered_text
        positions = [text.index(h) for h in SECTION_HEADERS]
        assert positions == sorted(positions)
        assert len(inst.prompt.discounts) == len(inst.prompt.candidates) == len(inst.prompt.review_ratings)


def test_shuffle_deterministic_and_preserves_multiset():
    items = ["a", "b", "c", "d", "e"]
    out1, perm1 = shuffle_candidates(items, 17)
    out2, perm2 = shuffle_candidates(items, 17)
    assert out1 == out2 and perm1 == perm2
    assert sorted(out1) == sorted(items)
    assert [items[i] for i in perm1] == out1


def test_shuffle_frequencies_uniform():
    counts = Counter(shuffle_candidates([0, 1, 2], s)[1] for s in range(10_000))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 10_000 - 1 / 6) <= 0.02


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(), min_size=1, max_size=12), st.integers(0, 2**32))
def test_shuffle_is_permutation(items, seed):
    out, perm = shuffle_candidates(items, seed)
    assert sorted(perm) == list(range(len(items)))
    assert Counter(out) == Counter(items)


def test_permutation_maps_back_to_original_ids():
    c = CustomerRecord("C1", "low", "retail", ())
    cands = ["A1", "A2", "A3"]
    p = build_retail_prompt(c, cands, [0, 0, 0], _cat(), seed=9)
    assert [cands[i] for i in p.permutation] == p.candidate_ids


def test_sidecar_matches_prompt():
    c = CustomerRecord("C1", "low", "retail", ())
    p = build_retail_prompt(c, ["A1", "A2"], [0, Decimal("0.1")], _cat(), seed=1)
    sc = decode_sidecar(p.rendered_text)
    assert [r["product_id"] for r in sc["candidates"]] == p.candidate_ids
    assert sc["customer_id"] == "C1"


def test_alignment_dataset_counts_and_round_trip(small_market, tmp_path):
    txns = small_market.transactions[:10]
    examples, report = build_alignment_dataset(txns, small_market.catalog, small_market.customers, k=4)
    assert len(examples) == 10 == report["n_examples"]
    for ex, t in zip(examples, txns):
        d = parse_retail(ex.output, [t.product_id])
        assert (d.product_id, d.quantity) == (t.product_id, t.quantity)
        assert ex.input.count("\n- [") >= 1
        n_cands = len(decode_sidecar(ex.input)["candidates"])
        assert n_cands <= 5
        assert t.product_id in [r["product_id"] for r in decode_sidecar(ex.input)["candidates"]]
    path = tmp_path / "alignment.jsonl"
    write_alignment_jsonl(examples, path)
    assert read_alignment_jsonl(path) == examples
    first = path.read_bytes()
    write_alignment_jsonl(read_alignment_jsonl(path), path)
    assert path.read_bytes() == first
    assert set(json.loads(first.splitlines()[0])) == {"input", "output"}


def test_short_category_flagged():
    cat = _cat()
    t = TransactionRecord(datetime(2024, 3, 1), "C1", "retail", "B1", 1, Decimal("2"), Decimal("0"), "s")
    examples, report = build_alignment_dataset([t], cat, None, k=4)
    assert len(examples) == 1
    assert report["short_candidate_sets"] == ["T000000"]


def test_split_restricts_eligible(small_market):
    from econsandbox.data import build_ood_split

    cats = sorted({p.category for p in small_market.catalog.values()})
    split = build_ood_split(small_market.catalog, cats[:1], cats[1:2])
    examples, _ = build_alignment_dataset(small_market.transactions, small_market.catalog,
                                          small_market.customers, split, k=2)
    expected = sum(1 for t in small_market.transactions
                   if small_market.catalog[t.product_id].category == cats[0])
    assert len(examples) == expected


def test_no_temporal_leakage(small_market):
    idx = list(range(0, len(small_market.transactions), 7))
    for inst in iter_instances(small_market.transactions, small_market.catalog,
                               small_market.customers, idx, seed=0):
        ts = inst.transaction.timestamp
        customer = small_market.customers[inst.transaction.customer_id]
        earlier = [t for t in customer.purchase_history if t.timestamp < ts]
        z = summarize_profile(customer, ts, small_market.catalog)
        assert z.features["n_purchases"] == len(earlier)
        assert z.text == inst.prompt.history_summary


def test_prompts_are_pure(small_market):
    idx = list(range(20))
    a = [i.prompt.rendered_text for i in iter_instances(
        small_market.transactions, small_market.catalog, small_market.customers, idx, seed=5)]
    b = [i.prompt.rendered_text for i in iter_instances(
        small_market.transactions, small_market.catalog, small_market.customers, idx, seed=5)]
    assert a == b


def test_shuffle_seed_reorders_only(small_market):
    idx = list(range(0, 60, 3))
    base = list(iter_instances(small_market.transactions, small_market.catalog,
                               small_market.customers, idx, 5))
    orders_differ = False
    for s in (1, 2, 3):
        other = list(iter_instances(small_market.transactions, small_market.catalog,
                                    small_market.customers, idx, 5, shuffle_seed=s))
        for a, b in zip(base, other):
            assert sorted(a.prompt.candidate_ids) == sorted(b.prompt.candidate_ids)
            orders_differ |= a.prompt.candidate_ids != b.prompt.candidate_ids
    assert orders_differ
