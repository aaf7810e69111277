"""Retail decision prompts, customer profile summaries, and alignment datasets."""
from __future__ import annotations

import bisect
import dataclasses
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from ._seeding import derive_seed
from .data import (
    CENT, CustomerRecord, DataError, OodSplit, StyleParams, TransactionRecord,
    _customers_from_transactions, add_months, month_key,
)

logger = logging.getLogger(__name__)

SECTION_HEADERS = (
    "## Candidates & Pricing",
    "## Purchase History",
    "## Market Trends",
    "## Reviews",
    "## Promotions",
)
SIDECAR_OPEN = "<sidecar>"
SIDECAR_CLOSE = "</sidecar>"
NO_HISTORY_MARKER = "no purchase history"
RESPONSE_INSTRUCTION = (
    "Decide whether to buy. Reply with a single JSON object on its own line: "
    '{"buy": true, "product_id": "<id>", "quantity": <units>} '
    'or {"buy": false}.'
)


def money(x) -> str:
    return str(Decimal(x).quantize(CENT, rounding=ROUND_HALF_UP))


def discounted_price(unit_price, discount) -> Decimal:
    return (Decimal(unit_price) * (1 - Decimal(discount))).quantize(CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class CandidateView:
    product_id: str
    display_name: str
    unit_price: Decimal
    discount: Decimal
    price_after_discount: Decimal
    attributes_summary: str = ""
    image_ref: str | None = None
    list_price: Decimal | None = None
    review: str | None = None
    brand: str | None = None
    category: str | None = None

    def sidecar_row(self) -> dict:
        return {
            "product_id": self.product_id,
            "unit_price": money(self.unit_price),
            "discount": str(self.discount),
            "price_after_discount": money(self.price_after_discount),
            "list_price": money(self.list_price if self.list_price is not None else self.unit_price),
            "review": self.review,
            "brand": self.brand,
            "category": self.category,
        }


@dataclass(frozen=True)
class ProfileSummary:
    customer_id: str
    text: str
    features: dict


@dataclass(frozen=True)
class RetailPrompt:
    customer_id: str
    demand: str
    candidates: tuple[CandidateView, ...]
    discounts: tuple[Decimal, ...]
    history_summary: str
    market_trends: str
    review_ratings: tuple[str | None, ...]
    permutation: tuple[int, ...]
    persona: str = ""
    style_tags: dict = field(default_factory=dict, hash=False)
    nonce: int = 0
    extra: dict = field(default_factory=dict, hash=False)
    rendered_text: str = ""

    @property
    def candidate_ids(self) -> list[str]:
        return [c.product_id for c in self.candidates]

    @property
    def sidecar(self) -> dict:
        sc = {
            "task": "retail",
            "customer_id": self.customer_id,
            "nonce": self.nonce,
            "candidates": [c.sidecar_row() for c in self.candidates],
        }
        sc.update(self.extra)
        return sc

    def messages(self) -> list[tuple[str, str]]:
        msgs = []
        if self.persona:
            msgs.append(("system", self.persona))
        msgs.append(("user", self.rendered_text))
        return msgs

    def replace(self, **changes) -> "RetailPrompt":
        """Copy with some parts changed; the text is re-rendered."""
        new = dataclasses.replace(self, **changes)
        return dataclasses.replace(new, rendered_text=render_prompt(new))


def encode_sidecar(data: dict) -> str:
    return SIDECAR_OPEN + json.dumps(data, sort_keys=True, separators=(",", ":")) + SIDECAR_CLOSE


def render_prompt(p: RetailPrompt) -> str:
    lines = [f"Customer: {p.customer_id}", f"Demand: {p.demand}", "", SECTION_HEADERS[0]]
    for i, c in enumerate(p.candidates, 1):
        line = (f"{i}. [{c.product_id}] {c.display_name} | list {money(c.list_price or c.unit_price)}"
                f" | price {money(c.unit_price)} | after discount {money(c.price_after_discount)}")
        if c.attributes_summary:
            line += f" | {c.attributes_summary}"
        if c.image_ref:
            line += f" | image {c.image_ref}"
        lines.append(line)
    lines += ["", SECTION_HEADERS[1], p.history_summary]
    lines += ["", SECTION_HEADERS[2], p.market_trends or "no trend data"]
    lines += ["", SECTION_HEADERS[3]]
    for c, r in zip(p.candidates, p.review_ratings):
        lines.append(f"- [{c.product_id}] rating {r if r is not None else 'n/a'}")
    lines += ["", SECTION_HEADERS[4]]
    promos = [(c, d) for c, d in zip(p.candidates, p.discounts) if d > 0]
    if promos:
        for c, d in promos:
            lines.append(f"- [{c.product_id}] {Decimal(d) * 100:.0f}% off")
    else:
        lines.append("no active promotions")
    if p.extra.get("strategy_instruction"):
        lines += ["", f"Strategy: {p.extra['strategy_instruction']}"]
    lines += ["", RESPONSE_INSTRUCTION, encode_sidecar(p.sidecar)]
    return "\n".join(lines)


def decode_sidecar(text: str) -> dict | None:
    start = text.rfind(SIDECAR_OPEN)
    if start < 0:
        return None
    end = text.find(SIDECAR_CLOSE, start)
    if end < 0:
        return None
    return json.loads(text[start + len(SIDECAR_OPEN):end])


def persona_text(style: StyleParams | None) -> str:
    if style is None:
        return "You are a retail customer choosing what to buy."
    text = (
        "You are a retail customer choosing what to buy. "
        f"Your discount sensitivity is {style.discount_sensitivity:.2f} "
        f"(1 = typical), your loss aversion is {style.loss_aversion:.2f}, "
        f"and your brand loyalty is {style.brand_loyalty:.2f} on a 0-1 scale."
    )
    if style.traits:
        text += " Traits: " + ", ".join(style.traits) + "."
    return text


# ---------------------------------------------------------------------------
# Profile summaries
# ---------------------------------------------------------------------------


def _shares(counter: Counter) -> dict:
    total = sum(counter.values())
    return {k: counter[k] / total for k in sorted(counter)} if total else {}


def _communication_style(history) -> str:
    mean_q = sum(t.quantity for t in history) / len(history)
    channels = Counter(t.channel for t in history)
    top_channel = sorted(channels.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    size = "bulk-oriented" if mean_q >= 6 else "small-basket"
    return f"{size}, mostly via {top_channel or 'unspecified channel'}"


def summarize_profile(customer: CustomerRecord, cutoff: datetime, catalog: dict,
                      backend=None) -> ProfileSummary:
    """Long-term profile of ``customer`` built only from purchases before ``cutoff``."""
    history = customer.history_before(cutoff)
    if not history:
        return ProfileSummary(
            customer.customer_id,
            f"Customer {customer.customer_id}: {NO_HISTORY_MARKER} (new customer).",
            {"category_preferences": {}, "promotion_sensitivity": 0.0,
             "brand_affinities": {}, "communication_style": "unknown", "n_purchases": 0},
        )
    cats, brands = Counter(), Counter()
    promo_qty = 0
    for t in history:
        prod = catalog.get(t.product_id)
        cats[prod.category if prod else "unknown"] += t.quantity
        brands[(prod.brand if prod else None) or "unbranded"] += t.quantity
        if t.discount > 0:
            promo_qty += t.quantity
    total = sum(t.quantity for t in history)
    features = {
        "category_preferences": _shares(cats),
        "promotion_sensitivity": promo_qty / total,
        "brand_affinities": _shares(brands),
        "communication_style": _communication_style(history),
        "n_purchases": len(history),
    }
    pct = lambda d: ", ".join(f"{k} {v:.0%}" for k, v in d.items())  # noqa: E731
    recent = history[-5:]
    lines = [
        f"Customer {customer.customer_id} (income {customer.income_bracket}), "
        f"{len(history)} purchases, {total} units before {cutoff.date().isoformat()}.",
        f"Category preferences: {pct(features['category_preferences'])}.",
        f"Promotion sensitivity: {features['promotion_sensitivity']:.2f}.",
        f"Brand affinities: {pct(features['brand_affinities'])}.",
        f"Communication style: {features['communication_style']}.",
        "Recent purchases: " + "; ".join(
            f"{t.timestamp.date().isoformat()} {t.product_id} x{t.quantity} at "
            f"{money(t.unit_price)}" + (f" ({Decimal(t.discount) * 100:.0f}% off)" if t.discount > 0 else "")
            for t in recent
        ) + ".",
    ]
    text = "\n".join(lines)
    if backend is not None:
        from .backends import chat

        text = chat(backend, [
            ("system", "Summarise this customer's purchasing profile in a short paragraph."),
            ("user", text),
        ]).strip()
    return ProfileSummary(customer.customer_id, text, features)


# ---------------------------------------------------------------------------
# Market context
# ---------------------------------------------------------------------------


class MarketIndex:
    """Lookup tables over a transaction log used while building prompts."""

    def __init__(self, transactions, catalog):
        self.catalog = catalog
        self.monthly = defaultdict(int)
        prices = defaultdict(list)
        for t in transactions:
            prod = catalog.get(t.product_id)
            if prod is not None:
                self.monthly[(prod.category, t.month)] += t.quantity
            prices[t.product_id].append((t.timestamp, t.unit_price, t.discount))
        self._price_times = {}
        self._prices = {}
        for pid, rows in prices.items():
            rows.sort(key=lambda r: r[0])
            self._price_times[pid] = [r[0] for r in rows]
            self._prices[pid] = [(r[1], r[2]) for r in rows]

    def price_before(self, product_id: str, ts: datetime):
        """Most recent observed (unit_price, discount) strictly before ``ts``."""
        times = self._price_times.get(product_id)
        if times:
            i = bisect.bisect_left(times, ts)
            if i > 0:
                return self._prices[product_id][i - 1]
        return self.catalog[product_id].base_price, Decimal("0")

    def trends_text(self, categories, as_of_month: str, window: int) -> str:
        lines = []
        for cat in sorted(set(categories)):
            total = sum(self.monthly.get((cat, add_months(as_of_month, -k)), 0)
                        for k in range(1, window + 1))
            lines.append(f"category {cat}: {total} units last {window} months")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------


def shuffle_candidates(candidates, seed):
    """Seeded shuffle; ``permutation[i]`` is the original index shown at position ``i``."""
    items = list(candidates)
    if not items:
        raise DataError("cannot shuffle an empty candidate list")
    perm = tuple(int(i) for i in np.random.default_rng(derive_seed(seed, "shuffle")).permutation(len(items)))
    return [items[i] for i in perm], perm


def build_retail_prompt(customer: CustomerRecord, candidates, discounts, catalog: dict,
                        trends_window: int = 3, seed: int = 0, *, prices=None,
                        cutoff: datetime | None = None, market: MarketIndex | None = None,
                        demand: str | None = None, style: StyleParams | None = None,
                        profile: ProfileSummary | None = None, shuffle: bool = True,
                        extra: dict | None = None) -> RetailPrompt:
    """Render a decision prompt for ``customer`` over ``candidates`` (product ids).

    ``prices`` gives per-candidate unit prices (default: catalog base price);
    ``discounts`` are aligned fractions.  History and trends use only data strictly
    before ``cutoff``.
    """
    candidates = list(candidates)
    if not candidates:
        raise DataError("no candidates")
    if len(discounts) != len(candidates):
        raise DataError("discounts not aligned with candidates")
    for pid in candidates:
        if pid not in catalog:
            raise DataError(f"candidate not in catalog: {pid}")
    if prices is None:
        prices = [catalog[pid].base_price for pid in candidates]
    cutoff = cutoff or datetime.max
    if profile is None:
        profile = summarize_profile(customer, cutoff, catalog)

    views = []
    for pid, price, disc in zip(candidates, prices, discounts):
        prod = catalog[pid]
        price, disc = Decimal(price), Decimal(disc)
        views.append(CandidateView(
            product_id=pid,
            display_name=prod.display_name,
            unit_price=price,
            discount=disc,
            price_after_discount=discounted_price(price, disc),
            attributes_summary=", ".join(f"{k}: {v}" for k, v in sorted(prod.attributes.items())
                                         if k not in ("name", "rating")),
            image_ref=f"emb:{pid}" if prod.image_embedding is not None else None,
            list_price=prod.base_price,
            review=prod.attributes.get("rating"),
            brand=prod.brand,
            category=prod.category,
        ))
    order = list(range(len(views)))
    if shuffle:
        _, perm = shuffle_candidates(order, seed)
    else:
        perm = tuple(order)
    shown = [views[i] for i in perm]

    cats = [v.category for v in shown]
    if market is not None and cutoff is not datetime.max:
        trends = market.trends_text(cats, month_key(cutoff), trends_window)
    else:
        trends = ""
    if demand is None:
        demand = f"restock {cats[0]} products" if len(set(cats)) == 1 else "restock household products"
    prompt = RetailPrompt(
        customer_id=customer.customer_id,
        demand=demand,
        candidates=tuple(shown),
        discounts=tuple(v.discount for v in shown),
        history_summary=profile.text,
        market_trends=trends,
        review_ratings=tuple(v.review for v in shown),
        permutation=perm,
        persona=persona_text(style if style is not None else customer.style_params),
        style_tags=(style or customer.style_params).to_dict(),
        nonce=derive_seed(seed, "nonce"),
        extra=dict(extra or {}),
    )
    return dataclasses.replace(prompt, rendered_text=render_prompt(prompt))


# ---------------------------------------------------------------------------
# Alignment dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentExample:
    input: str
    output: str


@dataclass(frozen=True)
class DecisionInstance:
    """One historical purchase turned into a prompt plus its ground truth."""

    instance_id: str
    transaction: TransactionRecord
    prompt: RetailPrompt
    n_distractors: int


def encode_output(product_id: str, quantity: int) -> str:
    return json.dumps({"product_id": product_id, "quantity": int(quantity)})


def build_instance(index: int, txn: TransactionRecord, customer: CustomerRecord, catalog: dict,
                   market: MarketIndex, by_category: dict, seed: int, k: int = 4,
                   trends_window: int = 3, shuffle_seed: int | None = None) -> DecisionInstance:
    """``seed`` fixes the distractors; ``shuffle_seed`` (default: ``seed``) only their order."""
    ex_seed = derive_seed(seed, index)
    prod = catalog[txn.product_id]
    pool = [pid for pid in by_category[prod.category] if pid != txn.product_id]

    rng = np.random.default_rng(derive_seed(ex_seed, "distractors"))
    n = min(k, len(pool))
    distractors = [pool[int(i)] for i in sorted(rng.choice(len(pool), size=n, replace=False))] if n else []
    cands = [txn.product_id] + distractors
    prices, discounts = [txn.unit_price], [txn.discount]
    for pid in distractors:
        p, d = market.price_before(pid, txn.timestamp)
        prices.append(p)
        discounts.append(d)
    prompt = build_retail_prompt(
        customer, cands, discounts, catalog, trends_window,
        ex_seed if shuffle_seed is None else derive_seed(shuffle_seed, index),
        prices=prices, cutoff=txn.timestamp, market=market,
    )
    return DecisionInstance(f"T{index:06d}", txn, prompt, n)


def eligible_transactions(transactions, catalog, split: OodSplit | None = None, side: str = "train"):
    """Indices of transactions whose first-level category is on ``side`` of ``split``."""
    if split is None:
        return [i for i, t in enumerate(transactions) if t.product_id in catalog]
    cats = split.train_categories if side == "train" else split.test_categories
    return [i for i, t in enumerate(transactions)
            if t.product_id in catalog and catalog[t.product_id].category in cats]


def iter_instances(transactions, catalog, customers, indices, seed, k=4, trends_window=3,
                   shuffle_seed=None):
    market = MarketIndex(transactions, catalog)
    by_category = defaultdict(list)
    for pid in sorted(catalog):
        by_category[catalog[pid].category].append(pid)
    customers = customers or _customers_from_transactions(transactions)
    for i in indices:
        txn = transactions[i]
        yield build_instance(i, txn, customers[txn.customer_id], catalog, market,
                             by_category, seed, k, trends_window, shuffle_seed)


def build_alignment_dataset(transactions, catalog, customers, split: OodSplit | None = None,
                            seed: int = 0, k: int = 4, trends_window: int = 3,
                            side: str = "train"):
    """One input/output pair per eligible purchase.

    Returns ``(examples, report)``; the report counts examples and lists
    instances whose category had fewer than ``k`` distractors.
    """
    indices = eligible_transactions(transactions, catalog, split, side)
    examples, short = [], []
    for inst in iter_instances(transactions, catalog, customers, indices, seed, k, trends_window):
        if inst.n_distractors < k:
            short.append(inst.instance_id)
        examples.append(AlignmentExample(
            input=inst.prompt.rendered_text,
            output=encode_output(inst.transaction.product_id, inst.transaction.quantity),
        ))
    if short:
        logger.warning("%d examples have fewer than %d distractors", len(short), k)
    report = {"n_examples": len(examples), "k": k, "short_candidate_sets": short}
    return examples, report


def write_alignment_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"input": ex.input, "output": ex.output}) + "\n")


def read_alignment_jsonl(path) -> list[AlignmentExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(AlignmentExample(d["input"], d["output"]))
    return out
