"""Chat backends (HTTP and mock) and parsing of agent replies into decisions."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from decimal import Decimal

import httpx
import numpy as np

from ._seeding import derive_seed
from .data import PlantedRule, planted_quantity, planted_utility
from .prompts import RetailPrompt, decode_sidecar

logger = logging.getLogger(__name__)

FEATURE_GROUPS = ("price", "discount", "brand", "reviews", "history", "trends")


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendStatusError(BackendError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"backend returned HTTP {status}")
        self.status = status
        self.body = body


class MalformedResponse(BackendError):
    pass


class ParseError(ValueError):
    """Agent reply could not be turned into a decision; ``raw_text`` kept for audit."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class NoDecisionFound(ParseError):
    pass


class UnknownCandidate(ParseError):
    pass


class InvalidQuantity(ParseError):
    pass


class WrongFinalRole(ParseError):
    pass


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    endpoint: str
    model: str
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2
    api_key_env: str | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class ChatBackend:
    name = "backend"

    def complete(self, messages: list[tuple[str, str]]) -> str:
        raise NotImplementedError


class HTTPChatBackend(ChatBackend):
    """Chat-completion style endpoint: POST {model, messages, temperature}."""

    def __init__(self, descriptor: BackendDescriptor, client: httpx.Client | None = None,
                 backoff: float = 1.0, sleep=time.sleep):
        self.descriptor = descriptor
        self.name = descriptor.name
        self._client = client
        self.backoff = backoff
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        env = self.descriptor.api_key_env
        if env and os.environ.get(env):
            headers["Authorization"] = f"Bearer {os.environ[env]}"
        return headers

    def complete(self, messages):
        d = self.descriptor
        body = {
            "model": d.model,
            "messages": [{"role": r, "content": c} for r, c in messages],
            "temperature": d.temperature,
        }
        client = self._client or httpx.Client(timeout=d.timeout)
        try:
            last_exc = None
            for attempt in range(d.max_retries + 1):
                if attempt:
                    self._sleep(self.backoff * 2 ** (attempt - 1))
                try:
                    resp = client.post(d.endpoint, json=body, headers=self._headers())
                except httpx.TransportError as exc:
                    last_exc = exc
                    logger.warning("%s: attempt %d failed: %s", d.name, attempt + 1, exc)
                    continue
                if resp.status_code >= 400:
                    raise BackendStatusError(resp.status_code, resp.text)
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise MalformedResponse(f"{d.name}: unexpected response body") from exc
            raise BackendTimeout(
                f"{d.name}: no response after {d.max_retries + 1} attempts"
            ) from last_exc
        finally:
            if self._client is None:
                client.close()


class EchoBackend(ChatBackend):
    """Returns a canned reply."""

    def __init__(self, text: str, name: str = "echo"):
        self.text = text
        self.name = name

    def complete(self, messages):
        return self.text


class FunctionBackend(ChatBackend):
    def __init__(self, fn, name: str = "function"):
        self.fn = fn
        self.name = name

    def complete(self, messages):
        return self.fn(messages)


def chat(backend: ChatBackend, messages) -> str:
    msgs = [(str(r), str(t)) for r, t in messages]
    if not msgs:
        raise ValueError("empty message list")
    return backend.complete(msgs)


@dataclass(frozen=True)
class ModelPool:
    backends: tuple
    selection_seed: int = 0

    def __post_init__(self):
        if not self.backends:
            raise ValueError("model pool must not be empty")


def select_backend(pool: ModelPool, inference_index: int):
    """Uniform draw keyed on (selection_seed, inference_index)."""
    rng = np.random.default_rng([int(pool.selection_seed) & (2**63 - 1), int(inference_index)])
    return pool.backends[int(rng.integers(len(pool.backends)))]


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def audit_record(inference_index, backend_name, prompt_text, response_text, parse_status) -> dict:
    return {
        "inference_index": inference_index,
        "backend_name": backend_name,
        "prompt_hash": prompt_hash(prompt_text),
        "response_text": response_text,
        "parse_status": parse_status,
    }


_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def average_parsed_scores(texts) -> float | None:
    """Mean of the first number found in each text; unparseable texts are skipped."""
    values = []
    for t in texts:
        m = _NUMBER.search(t or "")
        if m:
            values.append(float(m.group()))
    return sum(values) / len(values) if values else None


# ---------------------------------------------------------------------------
# Decisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetailDecision:
    buy: bool
    product_id: str | None = None
    quantity: int = 0
    fallback: bool = False

    def __post_init__(self):
        if not self.buy and (self.quantity != 0 or self.product_id is not None):
            raise ValueError("a no-buy decision has no product and zero quantity")
        if self.buy and (self.quantity < 1 or self.product_id is None):
            raise ValueError("a buy decision needs a product and quantity >= 1")


@dataclass(frozen=True)
class WholesaleDecision:
    product_id: str
    quantity: int
    fallback: bool = False

    def __post_init__(self):
        if self.quantity < 1:
            raise ValueError("wholesale quantity must be >= 1")


def render_decision(decision) -> str:
    if isinstance(decision, WholesaleDecision):
        return json.dumps({"product_id": decision.product_id, "quantity": decision.quantity})
    if not decision.buy:
        return json.dumps({"buy": False})
    return json.dumps({"buy": True, "product_id": decision.product_id,
                       "quantity": decision.quantity})


_DECISION_KEYS = {"buy", "product_id", "quantity"}


def _strict_block(text: str) -> dict | None:
    for line in text.splitlines():
        s = line.strip().strip("`").strip()
        if not (s.startswith("{") and s.endswith("}")):
            continue
        try:
            obj = json.loads(s)
        except ValueError:
            continue
        if isinstance(obj, dict) and _DECISION_KEYS & obj.keys():
            return obj
    return None


_INLINE_JSON = re.compile(r"\{[^{}]*\}")
_NEGATIVE = re.compile(
    r"\b(?:not\s+(?:to\s+)?(?:buy|purchase)|won'?t\s+(?:buy|purchase)|will\s+not\s+(?:buy|purchase)|"
    r"no\s+purchase|skip(?:ping)?\s+(?:this|the)\s+purchase|pass\s+on\s+(?:all|these|this))\b",
    re.I,
)
_QTY_PATTERNS = (
    re.compile(r"quantity\s*(?:of|:|=|is|would\s+be)?\s*(\d+)", re.I),
    re.compile(r"(\d+)\s*(?:units?|pcs|pieces|packs?|items?|boxes|bottles|cases)\b", re.I),
    re.compile(r"\bx\s*(\d+)\b", re.I),
)


def _int_quantity(value, raw):
    if isinstance(value, bool):
        raise InvalidQuantity("quantity must be an integer", raw)
    try:
        q = Decimal(str(value))
    except Exception:
        raise InvalidQuantity(f"quantity not numeric: {value!r}", raw)
    if q != q.to_integral_value():
        raise InvalidQuantity(f"quantity not an integer: {value!r}", raw)
    return int(q)


def _fallback_extract(text: str, candidate_ids) -> dict | None:
    for m in _INLINE_JSON.finditer(text):
        try:
            obj = json.loads(m.group())
        except ValueError:
            continue
        if isinstance(obj, dict) and _DECISION_KEYS & obj.keys():
            return obj
    if _NEGATIVE.search(text):
        return {"buy": False}
    mentions = []
    for cid in candidate_ids:
        for m in re.finditer(rf"(?<![\w-]){re.escape(cid)}(?![\w-])", text):
            mentions.append((m.start(), m.end(), cid))
    if not mentions:
        return None
    mentions.sort()
    kw = re.search(r"\b(?:buy|purchase|choose|select|pick|go\s+with|order|take)\w*\b", text, re.I)
    if kw:
        after = [m for m in mentions if m[0] >= kw.start()]
        start, end, pid = (after or mentions)[0]
    else:
        start, end, pid = mentions[0]
    qty = None
    for pat in _QTY_PATTERNS:
        found = list(pat.finditer(text))
        if found:
            qty = int(min(found, key=lambda f: abs(f.start() - end)).group(1))
            break
    if qty is None:
        nums = [(abs(n.start() - end), int(n.group())) for n in re.finditer(r"\b\d+\b", text[end:])]
        if nums:
            qty = nums[0][1]
    if qty is None:
        return None
    return {"buy": True, "product_id": pid, "quantity": qty}


def parse_retail(text: str, candidate_ids, fallback: bool = True) -> RetailDecision:
    """Strict JSON-line decision first; keyword extraction only if that fails."""
    block = _strict_block(text)
    used_fallback = False
    if block is None and fallback:
        block = _fallback_extract(text, list(candidate_ids))
        used_fallback = block is not None
    if block is None:
        raise NoDecisionFound("no decision block found", text)
    buy = block.get("buy", block.get("product_id") is not None)
    if isinstance(buy, str):
        buy = buy.strip().lower() in ("true", "yes", "1")
    if not buy:
        return RetailDecision(False, None, 0, fallback=used_fallback)
    pid = block.get("product_id")
    if pid is None or str(pid) not in set(candidate_ids):
        raise UnknownCandidate(f"product {pid!r} is not a candidate", text)
    qty = _int_quantity(block.get("quantity"), text)
    if qty <= 0:
        raise InvalidQuantity(f"quantity {qty} <= 0 for a purchase", text)
    return RetailDecision(True, str(pid), qty, fallback=used_fallback)


def parse_wholesale(history, candidate_ids=None) -> WholesaleDecision:
    """Decision from the final dealer turn of a dialogue history (earlier turns ignored)."""
    if not history:
        raise NoDecisionFound("empty history")
    role, text = history[-1][0], history[-1][1]
    if role != "dealer":
        raise WrongFinalRole(f"final turn is by {role!r}, not dealer", text)
    block = _strict_block(text)
    used_fallback = False
    if block is None and candidate_ids:
        block = _fallback_extract(text, list(candidate_ids))
        used_fallback = block is not None
    if block is None or block.get("product_id") is None:
        raise NoDecisionFound("no decision block in final dealer turn", text)
    pid = str(block["product_id"])
    if candidate_ids is not None and pid not in set(candidate_ids):
        raise UnknownCandidate(f"product {pid!r} is not a candidate", text)
    qty = _int_quantity(block.get("quantity"), text)
    if qty < 1:
        raise InvalidQuantity(f"wholesale quantity {qty} < 1", text)
    return WholesaleDecision(pid, qty, fallback=used_fallback)


# ---------------------------------------------------------------------------
# Mock agents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MockAgentParams:
    alpha: float
    beta: float
    gamma: float
    utility_weights: dict = field(default_factory=lambda: {"price": -1.0}, hash=False)
    noise_sigma: float = 0.0
    seed: int = 0
    favorite_brand: str | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def from_planted(cls, rule: PlantedRule, noise_sigma: float = 0.0, seed: int = 0):
        return cls(rule.alpha, rule.beta, rule.gamma, dict(rule.utility_weights),
                   noise_sigma, seed, rule.favorite_brand)


def _view(row: dict) -> dict:
    return {"list_price": Decimal(row["list_price"]), "discount": Decimal(row["discount"]),
            "review": row.get("review"), "brand": row.get("brand")}


def strategy_pick(strategy: dict | None, rows: list[dict], utility) -> dict:
    """Candidate row selected under a named strategy (``None``: max utility)."""
    name = (strategy or {}).get("name")
    key_id = lambda r: r["product_id"]  # noqa: E731
    if name == "cheapest-candidate":
        return min(rows, key=lambda r: (Decimal(r["price_after_discount"]), key_id(r)))
    if name == "highest-review":
        return min(rows, key=lambda r: (-float(r.get("review") or 0), key_id(r)))
    if name == "discount-chaser":
        return min(rows, key=lambda r: (-Decimal(r["discount"]), key_id(r)))
    if name == "brand-loyal":
        same = [r for r in rows if r.get("brand") == strategy.get("brand")]
        if same:
            rows = same
    if name == "repeat-last-purchase":
        same = [r for r in rows if r["product_id"] == strategy.get("product_id")]
        if same:
            return same[0]
    return min(rows, key=lambda r: (-utility(r), key_id(r)))


class MockLinearAgent(ChatBackend):
    """Deterministic agent following the planted linear rule.

    It reads only the JSON sidecar embedded in the last user message, never the
    prose around it.
    """

    def __init__(self, params: MockAgentParams, name: str = "mock-linear"):
        self.params = params
        self.name = name

    def params_for(self, sidecar: dict) -> MockAgentParams:
        return self.params

    def complete(self, messages):
        sidecar = None
        for role, text in reversed(messages):
            sidecar = decode_sidecar(text)
            if sidecar is not None:
                break
        if sidecar is None:
            return "I need a structured candidate table to decide."
        params = self.params_for(sidecar)
        task = sidecar.get("task", "retail")
        if task == "emphasis":
            return self._emphasis(params)
        if task == "score_strategies":
            return self._score(params, sidecar)
        return self._decide(params, sidecar)

    def _utility(self, params):
        return lambda row: planted_utility(params.utility_weights, params.favorite_brand, _view(row))

    def _decide(self, params, sidecar) -> str:
        rows = sidecar["candidates"]
        chosen = strategy_pick(sidecar.get("strategy"), rows, self._utility(params))
        eps = 0.0
        if params.noise_sigma > 0:
            rng = np.random.default_rng(derive_seed(params.seed, sidecar.get("nonce", 0),
                                                    sidecar.get("customer_id")))
            eps = float(rng.normal(0.0, params.noise_sigma))
        q = planted_quantity(params.alpha, params.beta, params.gamma,
                             Decimal(chosen["unit_price"]), Decimal(chosen["discount"]), eps)
        if q < 1:
            return "Not worth it at these prices.\n" + json.dumps({"buy": False})
        return "Decision:\n" + json.dumps(
            {"buy": True, "product_id": chosen["product_id"], "quantity": q})

    def _emphasis(self, params) -> str:
        w = {g: abs(float(params.utility_weights.get(g, 0.0))) for g in FEATURE_GROUPS}
        total = sum(w.values()) or 1.0
        return json.dumps({g: round(100 * v / total, 6) for g, v in w.items()})

    def _score(self, params, sidecar) -> str:
        rows = sidecar["candidates"]
        scores = {}
        for strat in sidecar["strategies"]:
            pick = strategy_pick(strat, rows, self._utility(params))
            scores[strat["name"]] = -float(Decimal(pick["price_after_discount"]))
        return json.dumps({"scores": scores})


class PlantedPopulationMock(MockLinearAgent):
    """One mock agent per synthetic customer, dispatched on the sidecar's customer id."""

    def __init__(self, planted: dict, noise_sigma: float = 0.0, seed: int = 0,
                 name: str = "mock-planted"):
        self.population = {cid: MockAgentParams.from_planted(r, noise_sigma, seed)
                           for cid, r in planted.items()}
        self.name = name

    def params_for(self, sidecar):
        try:
            return self.population[sidecar["customer_id"]]
        except KeyError:
            raise BackendError(f"no planted params for customer {sidecar.get('customer_id')!r}")


def mock_linear_agent(params: MockAgentParams):
    """Callable mapping a :class:`RetailPrompt` to the mock's reply text."""
    agent = MockLinearAgent(params)

    def respond(prompt: RetailPrompt) -> str:
        return agent.complete(prompt.messages())

    return respond
