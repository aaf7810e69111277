"""Market data: canonical records, ingestion, and a seeded synthetic market.

Money and discounts are held as :class:`~decimal.Decimal` so that files written
by :func:`write_transactions_csv` / :func:`write_products_jsonl` read back
exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, NamedTuple

from ._seeding import rng_for

logger = logging.getLogger(__name__)

CUSTOMER_TYPES = ("retail", "wholesale")
CENT = Decimal("0.01")

TRANSACTION_FIELDS = (
    "timestamp", "customer_id", "customer_type", "product_id", "quantity",
    "unit_price", "discount", "channel", "review_score",
)
PRODUCT_FIELDS = (
    "product_id", "category_path", "base_price", "attributes",
    "image_embedding", "sales_series",
)


class DataError(ValueError):
    pass


class SchemaError(DataError):
    """File layout does not match the schema config (or most rows are bad)."""


def month_key(ts: datetime) -> str:
    return f"{ts.year:04d}-{ts.month:02d}"


def add_months(month: str, k: int) -> str:
    y, m = (int(x) for x in month.split("-"))
    idx = y * 12 + (m - 1) + k
    return f"{idx // 12:04d}-{idx % 12 + 1:02d}"


def month_diff(a: str, b: str) -> int:
    """Number of months from ``b`` to ``a``."""
    ya, ma = (int(x) for x in a.split("-"))
    yb, mb = (int(x) for x in b.split("-"))
    return (ya * 12 + ma) - (yb * 12 + mb)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransactionRecord:
    timestamp: datetime
    customer_id: str
    customer_type: str
    product_id: str
    quantity: int
    unit_price: Decimal
    discount: Decimal
    channel: str
    review_score: Decimal | None = None

    def __post_init__(self):
        if self.quantity < 1:
            raise DataError("quantity must be a positive integer")
        if not 0 <= self.discount <= 1:
            raise DataError("discount out of range")
        if self.unit_price < 0:
            raise DataError("negative unit_price")
        if self.review_score is not None and not 0 <= self.review_score <= 5:
            raise DataError("review_score out of range")

    @property
    def month(self) -> str:
        return month_key(self.timestamp)


@dataclass(frozen=True)
class ProductRecord:
    product_id: str
    category_path: tuple[str, ...]
    base_price: Decimal
    attributes: dict = field(default_factory=dict, hash=False)
    image_embedding: tuple[float, ...] | None = None
    sales_series: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not self.category_path:
            raise DataError("empty category_path")
        if self.base_price < 0:
            raise DataError("negative base_price")
        months = [m for m, _ in self.sales_series]
        if any(b <= a for a, b in zip(months, months[1:])):
            raise DataError("sales_series months not strictly increasing")

    @property
    def category(self) -> str:
        return self.category_path[0]

    @property
    def brand(self) -> str | None:
        return self.attributes.get("brand")

    @property
    def display_name(self) -> str:
        return self.attributes.get("name", self.product_id)


@dataclass(frozen=True)
class StyleParams:
    """Behavioural style of a simulated buyer (discount sensitivity etc.)."""

    discount_sensitivity: float = 1.0
    loss_aversion: float = 1.0
    brand_loyalty: float = 0.5
    traits: tuple[str, ...] = ()

    def __post_init__(self):
        if self.discount_sensitivity < 0 or self.loss_aversion < 0:
            raise DataError("discount_sensitivity and loss_aversion must be >= 0")
        if not 0 <= self.brand_loyalty <= 1:
            raise DataError("brand_loyalty must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "discount_sensitivity": self.discount_sensitivity,
            "loss_aversion": self.loss_aversion,
            "brand_loyalty": self.brand_loyalty,
            "traits": list(self.traits),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleParams":
        return cls(
            discount_sensitivity=float(d.get("discount_sensitivity", 1.0)),
            loss_aversion=float(d.get("loss_aversion", 1.0)),
            brand_loyalty=float(d.get("brand_loyalty", 0.5)),
            traits=tuple(d.get("traits", ())),
        )


@dataclass(frozen=True)
class CustomerRecord:
    customer_id: str
    income_bracket: str
    buyer_type: str
    purchase_history: tuple[TransactionRecord, ...] = ()
    style_params: StyleParams = field(default_factory=StyleParams)

    def __post_init__(self):
        if self.buyer_type not in CUSTOMER_TYPES:
            raise DataError(f"unknown buyer_type {self.buyer_type!r}")
        for t in self.purchase_history:
            if t.customer_type != self.buyer_type:
                raise DataError(
                    f"customer {self.customer_id}: transaction type "
                    f"{t.customer_type!r} != buyer_type {self.buyer_type!r}"
                )

    def history_before(self, cutoff: datetime) -> tuple[TransactionRecord, ...]:
        return tuple(t for t in self.purchase_history if t.timestamp < cutoff)


@dataclass(frozen=True)
class DialogueLog:
    dialogue_id: str
    turns: tuple[tuple[str, datetime, str], ...]
    negotiated_outcome: object | None = None

    def __post_init__(self):
        stamps = [t[1] for t in self.turns]
        if stamps != sorted(stamps):
            raise DataError("dialogue turns must be ordered by timestamp")


@dataclass(frozen=True)
class OodSplit:
    train_categories: frozenset
    test_categories: frozenset
    train_products: frozenset = frozenset()
    test_products: frozenset = frozenset()

    def __post_init__(self):
        overlap = self.train_categories & self.test_categories
        if overlap:
            raise DataError(f"train/test categories overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class PlantedRule:
    """Ground-truth behaviour of one synthetic customer.

    Quantity follows ``max(0, round(alpha - beta*p + gamma*discount*p))`` and the
    product is the candidate maximising :func:`planted_utility`.
    """

    alpha: float
    beta: float
    gamma: float
    utility_weights: dict
    favorite_brand: str | None = None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "utility_weights": dict(self.utility_weights),
            "favorite_brand": self.favorite_brand,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedRule":
        return cls(float(d["alpha"]), float(d["beta"]), float(d["gamma"]),
                   dict(d["utility_weights"]), d.get("favorite_brand"))


def planted_quantity(alpha, beta, gamma, price, discount, eps=0.0) -> int:
    price = float(price)
    value = alpha - beta * price + gamma * float(discount) * price + eps
    return max(0, int(round(value)))


def planted_utility(weights: dict, favorite_brand, view: dict) -> float:
    """Linear utility over a candidate view with keys list_price/discount/review/brand."""
    u = weights.get("price", 0.0) * float(view["list_price"])
    u += weights.get("discount", 0.0) * float(view.get("discount", 0))
    u += weights.get("reviews", 0.0) * float(view.get("review") or 0)
    if favorite_brand is not None and view.get("brand") == favorite_brand:
        u += weights.get("brand", 0.0)
    return u


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass
class SchemaConfig:
    """Maps canonical field names to file columns.

    Fields absent from ``columns`` are looked up under their canonical name.
    """

    columns: dict = field(default_factory=dict)
    date_range: tuple[datetime, datetime] | None = None
    format: str | None = None
    max_reject_fraction: float = 0.5

    def column(self, name: str) -> str:
        return self.columns.get(name, name)


def _detect_format(path: Path, schema: SchemaConfig) -> str:
    if schema.format:
        return schema.format
    return "jsonl" if path.suffix in (".jsonl", ".json", ".ndjson") else "csv"


def _read_rows(path, schema: SchemaConfig):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    fmt = _detect_format(path, schema)
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = list(reader.fieldnames or [])
    else:
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line, parse_float=Decimal))
        header = list(rows[0]) if rows else []
    return rows, header


def _check_columns(header, schema: SchemaConfig, required, kind):
    missing = [f for f in required if schema.column(f) not in header]
    if missing:
        raise SchemaError(
            f"{kind}: cannot map column(s) {missing} (file has {header})"
        )


def _dec(value) -> Decimal:
    if isinstance(value, float):
        value = repr(value)
    return Decimal(str(value).strip())


def _blank(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip() == "")


def _parse_transaction(row, schema: SchemaConfig) -> TransactionRecord:
    get = lambda f: row.get(schema.column(f))  # noqa: E731
    try:
        ts = datetime.fromisoformat(str(get("timestamp")).strip())
    except ValueError:
        raise DataError("unparseable timestamp")
    if schema.date_range and not (schema.date_range[0] <= ts <= schema.date_range[1]):
        raise DataError("timestamp out of range")
    cid, pid = get("customer_id"), get("product_id")
    if _blank(cid):
        raise DataError("missing customer_id")
    if _blank(pid):
        raise DataError("missing product_id")
    ctype = str(get("customer_type")).strip()
    if ctype not in CUSTOMER_TYPES:
        raise DataError("invalid customer_type")
    try:
        qty_dec = _dec(get("quantity"))
        price = _dec(get("unit_price"))
        disc = _dec(get("discount"))
    except (InvalidOperation, TypeError):
        raise DataError("unparseable numeric field")
    if qty_dec != qty_dec.to_integral_value() or qty_dec < 1:
        raise DataError("quantity must be a positive integer")
    if price < 0:
        raise DataError("negative unit_price")
    if not (0 <= disc <= 1):
        raise DataError("discount out of range")
    review = get("review_score")
    if _blank(review):
        review = None
    else:
        try:
            review = _dec(review)
        except InvalidOperation:
            raise DataError("unparseable review_score")
        if not (0 <= review <= 5):
            raise DataError("review_score out of range")
    channel = get("channel")
    return TransactionRecord(
        timestamp=ts, customer_id=str(cid).strip(), customer_type=ctype,
        product_id=str(pid).strip(), quantity=int(qty_dec), unit_price=price,
        discount=disc, channel="" if channel is None else str(channel),
        review_score=review,
    )


def _enforce_reject_rate(n_rows, rejects, schema, kind):
    if n_rows and len(rejects) / n_rows > schema.max_reject_fraction:
        raise SchemaError(
            f"{kind}: {len(rejects)} of {n_rows} rows rejected; schema mismatch?"
        )


def write_reject_report(rejects: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"row_index": r["row_index"], "reason": r["reason"]}) + "\n")


def ingest_transactions(path, schema: SchemaConfig | None = None):
    """Read transactions from CSV or JSON-lines.

    Returns ``(records, rejects)`` where ``rejects`` is a list of
    ``{"row_index", "reason"}`` dicts for rows that failed validation.
    """
    schema = schema or SchemaConfig()
    rows, header = _read_rows(path, schema)
    required = [f for f in TRANSACTION_FIELDS if f != "review_score"]
    if rows:
        _check_columns(header, schema, required, "transactions")
    records, rejects = [], []
    for i, row in enumerate(rows):
        try:
            records.append(_parse_transaction(row, schema))
        except DataError as exc:
            rejects.append({"row_index": i, "reason": str(exc)})
    _enforce_reject_rate(len(rows), rejects, schema, "transactions")
    if rejects:
        logger.info("transactions: rejected %d of %d rows", len(rejects), len(rows))
    return records, rejects


def _maybe_json(value):
    if isinstance(value, str):
        s = value.strip()
        if s.startswith(("[", "{")):
            return json.loads(s, parse_float=Decimal)
    return value


def _parse_product(row, schema: SchemaConfig) -> ProductRecord:
    get = lambda f: row.get(schema.column(f))  # noqa: E731
    pid = get("product_id")
    if _blank(pid):
        raise DataError("missing product_id")
    path = _maybe_json(get("category_path"))
    if isinstance(path, str):
        path = [p.strip() for p in path.split(">") if p.strip()]
    if not path:
        raise DataError("empty category_path")
    try:
        base = _dec(get("base_price"))
    except (InvalidOperation, TypeError):
        raise DataError("unparseable base_price")
    if base < 0:
        raise DataError("negative base_price")
    attrs = _maybe_json(get("attributes")) or {}
    if not isinstance(attrs, dict):
        raise DataError("attributes must be a mapping")
    emb = _maybe_json(get("image_embedding"))
    if _blank(emb):
        emb = None
    else:
        emb = tuple(float(x) for x in emb)
    series = _maybe_json(get("sales_series")) or []
    series = tuple((str(m), int(q)) for m, q in series)
    months = [m for m, _ in series]
    if any(b <= a for a, b in zip(months, months[1:])):
        raise DataError("sales_series months not strictly increasing")
    return ProductRecord(
        product_id=str(pid).strip(),
        category_path=tuple(str(p) for p in path),
        base_price=base,
        attributes={str(k): str(v) for k, v in attrs.items()},
        image_embedding=emb,
        sales_series=series,
    )


def ingest_products(path, schema: SchemaConfig | None = None):
    """Read a product catalog; returns ``(catalog, rejects)``.

    Duplicate product ids are an error, not a reject.
    """
    schema = schema or SchemaConfig()
    rows, header = _read_rows(path, schema)
    if rows:
        _check_columns(header, schema, ["product_id", "category_path", "base_price"],
                       "products")
    catalog: dict[str, ProductRecord] = {}
    rejects = []
    for i, row in enumerate(rows):
        try:
            prod = _parse_product(row, schema)
        except DataError as exc:
            rejects.append({"row_index": i, "reason": str(exc)})
            continue
        if prod.product_id in catalog:
            raise DataError(f"duplicate id: {prod.product_id}")
        catalog[prod.product_id] = prod
    _enforce_reject_rate(len(rows), rejects, schema, "products")
    return catalog, rejects


def ingest_customers(path, transactions: Iterable[TransactionRecord] = (),
                     schema: SchemaConfig | None = None):
    """Read customer profiles and attach their purchase histories.

    Returns ``(customers, rejects)``; a customer whose buyer type disagrees with
    one of its transactions is rejected.
    """
    schema = schema or SchemaConfig()
    rows, header = _read_rows(path, schema)
    if rows:
        _check_columns(header, schema, ["customer_id", "income_bracket", "buyer_type"],
                       "customers")
    by_customer = defaultdict(list)
    for t in transactions:
        by_customer[t.customer_id].append(t)
    customers, rejects = {}, []
    for i, row in enumerate(rows):
        get = lambda f: row.get(schema.column(f))  # noqa: E731
        cid = str(get("customer_id")).strip()
        try:
            style = _maybe_json(get("style_params")) or {}
            customers[cid] = CustomerRecord(
                customer_id=cid,
                income_bracket=str(get("income_bracket")),
                buyer_type=str(get("buyer_type")).strip(),
                purchase_history=tuple(sorted(by_customer.get(cid, ()),
                                              key=lambda t: t.timestamp)),
                style_params=StyleParams.from_dict(
                    {k: (float(v) if isinstance(v, Decimal) else v)
                     for k, v in style.items()}),
            )
        except DataError as exc:
            rejects.append({"row_index": i, "reason": str(exc)})
    _enforce_reject_rate(len(rows), rejects, schema, "customers")
    return customers, rejects


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def write_transactions_csv(records: Iterable[TransactionRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSACTION_FIELDS)
        for t in records:
            w.writerow([
                t.timestamp.isoformat(), t.customer_id, t.customer_type, t.product_id,
                t.quantity, str(t.unit_price), str(t.discount), t.channel,
                "" if t.review_score is None else str(t.review_score),
            ])


def _num(d: Decimal):
    return int(d) if d == d.to_integral_value() and d.as_tuple().exponent >= 0 else float(d)


def write_products_jsonl(catalog: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in catalog.values():
            fh.write(json.dumps({
                "product_id": p.product_id,
                "category_path": list(p.category_path),
                "base_price": _num(p.base_price),
                "attributes": p.attributes,
                "image_embedding": None if p.image_embedding is None else list(p.image_embedding),
                "sales_series": [[m, q] for m, q in p.sales_series],
            }) + "\n")


def write_customers_jsonl(customers: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in customers.values():
            fh.write(json.dumps({
                "customer_id": c.customer_id,
                "income_bracket": c.income_bracket,
                "buyer_type": c.buyer_type,
                "style_params": c.style_params.to_dict(),
            }) + "\n")


# ---------------------------------------------------------------------------
# Derived views
# ---------------------------------------------------------------------------


def first_level_categories(catalog: dict) -> set[str]:
    return {p.category for p in catalog.values()}


def build_ood_split(catalog: dict, train_names, test_names) -> OodSplit:
    train, test = frozenset(train_names), frozenset(test_names)
    if train & test:
        raise DataError(f"train/test categories overlap: {sorted(train & test)}")
    known = first_level_categories(catalog)
    unknown = (train | test) - known
    if unknown:
        raise DataError(f"unknown category: {sorted(unknown)}")
    return OodSplit(
        train_categories=train,
        test_categories=test,
        train_products=frozenset(p.product_id for p in catalog.values() if p.category in train),
        test_products=frozenset(p.product_id for p in catalog.values() if p.category in test),
    )


def customer_volumes(transactions: Iterable[TransactionRecord]) -> dict[str, int]:
    vol: Counter = Counter()
    for t in transactions:
        vol[t.customer_id] += t.quantity
    return dict(vol)


def sample_bottom_half_customers(transactions, seed=None) -> set[str]:
    """The ``floor(N/2)`` customers with the smallest purchase volume.

    Ties are broken by ascending customer id, so ``seed`` has no effect; it is
    accepted for call-site symmetry with the other samplers.
    """
    vol = customer_volumes(transactions)
    if not vol:
        raise DataError("no transactions")
    if len(vol) < 2:
        raise DataError("need at least 2 distinct customers")
    ranked = sorted(vol, key=lambda c: (vol[c], c))
    return set(ranked[: len(ranked) // 2])


def inertia_weights(history, catalog: dict, brands=None, smoothing: float = 1.0) -> dict:
    """Brand weights from historical quantity share with additive smoothing.

    ``brands`` is the brand scope (e.g. brands in the candidate set); it always
    includes brands seen in the history.
    """
    if not history:
        raise DataError("empty purchase history")
    counts: Counter = Counter()
    for t in history:
        brand = catalog[t.product_id].brand if t.product_id in catalog else None
        counts[brand or "unbranded"] += t.quantity
    scope = set(counts) | set(brands or ())
    total = sum(counts.values()) + smoothing * len(scope)
    return {b: (counts.get(b, 0) + smoothing) / total for b in sorted(scope)}


# ---------------------------------------------------------------------------
# Synthetic market
# ---------------------------------------------------------------------------

CATEGORY_NAMES = (
    "Surface Cleaners", "Tissues & Wipes", "Detergents", "Household Basics",
    "Fabric Care", "Paper Towels", "Personal Care", "Kitchen Supplies", "Beverages", "Snacks",
)
BRANDS = ("Aster", "Birch", "Cobalt", "Dune", "Ember")
INCOME_BRACKETS = ("low", "middle", "high")
CHANNELS = ("online", "store")
DISCOUNT_LEVELS = ("0", "0", "0", "0.05", "0.1", "0.2", "0.3")


class SyntheticMarket(NamedTuple):
    transactions: list
    catalog: dict
    customers: dict
    planted_params: dict


def _category_names(n: int) -> list[str]:
    names = list(CATEGORY_NAMES[:n])
    names += [f"Category {i:02d}" for i in range(len(names), n)]
    return names


def market_price(base: Decimal, factor: float) -> Decimal:
    return (base * Decimal(repr(round(factor, 4)))).quantize(CENT)


def generate_synthetic_market(
    seed: int,
    n_customers: int,
    n_categories: int,
    months: int,
    *,
    products_per_category: int = 6,
    start_month: str = "2024-01",
    price_range: tuple[float, float] = (1.0, 20.0),
    events_per_month: float = 1.0,
    beta: float | None = None,
) -> SyntheticMarket:
    """Seeded market whose buyers follow a planted linear-elasticity rule.

    Passing ``beta`` overrides every customer's price elasticity (``beta=0``
    makes quantities price-independent).
    """
    if min(n_customers, n_categories, months, products_per_category) < 1:
        raise DataError("all counts must be >= 1")
    categories = _category_names(n_categories)
    lo, hi = math.log(price_range[0]), math.log(price_range[1])

    catalog: dict[str, ProductRecord] = {}
    rng = rng_for(seed, "catalog")
    for ci, cat in enumerate(categories):
        for j in range(products_per_category):
            pid = f"P{ci:02d}{j:02d}"
            base = Decimal(repr(round(math.exp(rng.uniform(lo, hi)), 2))).quantize(CENT)
            brand = BRANDS[int(rng.integers(len(BRANDS)))]
            rating = round(float(rng.uniform(3.0, 5.0)), 1)
            emb = tuple(round(float(x), 6) for x in rng.normal(size=8))
            catalog[pid] = ProductRecord(
                product_id=pid,
                category_path=(cat, f"{cat} / line {j % 2 + 1}"),
                base_price=base,
                attributes={"brand": brand, "name": f"{brand} {cat} #{j + 1}",
                            "rating": f"{rating:.1f}"},
                image_embedding=emb,
            )
    by_category = defaultdict(list)
    for p in catalog.values():
        by_category[p.category].append(p)

    rng = rng_for(seed, "customers")
    profiles = {}
    planted: dict[str, PlantedRule] = {}
    for i in range(n_customers):
        cid = f"C{i:04d}"
        n_pref = int(min(n_categories, rng.integers(1, 4)))
        prefs = sorted(int(x) for x in rng.choice(n_categories, size=n_pref, replace=False))
        profiles[cid] = {
            "income": INCOME_BRACKETS[int(rng.integers(3))],
            "categories": [categories[k] for k in prefs],
            "style": StyleParams(
                discount_sensitivity=round(float(rng.uniform(0, 2)), 3),
                loss_aversion=round(float(rng.uniform(1, 3)), 3),
                brand_loyalty=round(float(rng.uniform(0, 1)), 3),
            ),
        }
        planted[cid] = PlantedRule(
            alpha=round(float(rng.uniform(6, 14)), 3),
            beta=round(float(rng.uniform(0.05, 0.5)), 3) if beta is None else float(beta),
            gamma=round(float(rng.uniform(0, 1)), 3),
            utility_weights={
                "price": -round(float(rng.uniform(0.2, 1.0)), 3),
                "discount": 0.0,
                "reviews": round(float(rng.uniform(0, 1)), 3),
                "brand": round(float(rng.uniform(0, 1.5)), 3),
            },
            favorite_brand=BRANDS[int(rng.integers(len(BRANDS)))],
        )

    month_list = [add_months(start_month, k) for k in range(months)]
    price_factor = {}
    rng = rng_for(seed, "prices")
    for m in month_list:
        for pid in catalog:
            price_factor[(pid, m)] = float(rng.uniform(0.9, 1.1))

    transactions = []
    for m in month_list:
        y, mo = (int(x) for x in m.split("-"))
        for cid, prof in profiles.items():
            rule = planted[cid]
            rng = rng_for(seed, "events", cid, m)
            for _ in range(int(rng.poisson(events_per_month))):
                cat = prof["categories"][int(rng.integers(len(prof["categories"])))]
                views = [
                    {"product_id": p.product_id, "list_price": p.base_price,
                     "review": p.attributes["rating"], "brand": p.brand}
                    for p in by_category[cat]
                ]
                best = max(views, key=lambda v: planted_utility(
                    rule.utility_weights, rule.favorite_brand, v))
                prod = catalog[best["product_id"]]
                price = market_price(prod.base_price, price_factor[(prod.product_id, m)])
                disc = Decimal(DISCOUNT_LEVELS[int(rng.integers(len(DISCOUNT_LEVELS)))])
                qty = planted_quantity(rule.alpha, rule.beta, rule.gamma, price, disc)
                ts = datetime(y, mo, int(rng.integers(1, 29)), int(rng.integers(8, 21)),
                              int(rng.integers(0, 60)))
                review = (Decimal(prod.attributes["rating"])
                          if rng.uniform() < 0.3 else None)
                channel = CHANNELS[int(rng.integers(2))]
                if qty >= 1:
                    transactions.append(TransactionRecord(
                        timestamp=ts, customer_id=cid, customer_type="retail",
                        product_id=prod.product_id, quantity=qty, unit_price=price,
                        discount=disc, channel=channel, review_score=review,
                    ))
    transactions.sort(key=lambda t: (t.timestamp, t.customer_id, t.product_id))

    sales = defaultdict(Counter)
    for t in transactions:
        sales[t.product_id][t.month] += t.quantity
    catalog = {
        pid: ProductRecord(
            product_id=p.product_id, category_path=p.category_path,
            base_price=p.base_price, attributes=p.attributes,
            image_embedding=p.image_embedding,
            sales_series=tuple(sorted(sales[pid].items())),
        )
        for pid, p in catalog.items()
    }

    history = defaultdict(list)
    for t in transactions:
        history[t.customer_id].append(t)
    customers = {
        cid: CustomerRecord(
            customer_id=cid, income_bracket=prof["income"], buyer_type="retail",
            purchase_history=tuple(history[cid]), style_params=prof["style"],
        )
        for cid, prof in profiles.items()
    }
    return SyntheticMarket(transactions, catalog, customers, planted)


def write_planted_params(planted: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({cid: r.to_dict() for cid, r in planted.items()}, fh, indent=1, sort_keys=True)


def read_planted_params(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return {cid: PlantedRule.from_dict(d) for cid, d in json.load(fh).items()}


def write_market(market: SyntheticMarket, out_dir) -> dict:
    """Write a generated market to ``out_dir``; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "transactions": out / "transactions.csv",
        "products": out / "products.jsonl",
        "customers": out / "customers.jsonl",
        "planted": out / "planted.json",
    }
    write_transactions_csv(market.transactions, paths["transactions"])
    write_products_jsonl(market.catalog, paths["products"])
    write_customers_jsonl(market.customers, paths["customers"])
    write_planted_params(market.planted_params, paths["planted"])
    return paths


def load_market(transactions_path, products_path, customers_path=None, planted_path=None):
    """Ingest a market directory written by :func:`write_market`."""
    transactions, _ = ingest_transactions(transactions_path)
    catalog, _ = ingest_products(products_path)
    if customers_path is not None and Path(customers_path).exists():
        customers, _ = ingest_customers(customers_path, transactions)
    else:
        customers = _customers_from_transactions(transactions)
    planted = (read_planted_params(planted_path)
               if planted_path is not None and Path(planted_path).exists() else {})
    return SyntheticMarket(transactions, catalog, customers, planted)


def _customers_from_transactions(transactions) -> dict:
    history = defaultdict(list)
    for t in transactions:
        history[t.customer_id].append(t)
    return {
        cid: CustomerRecord(customer_id=cid, income_bracket="unknown",
                            buyer_type=ts[0].customer_type,
                            purchase_history=tuple(sorted(ts, key=lambda t: t.timestamp)))
        for cid, ts in sorted(history.items())
    }

