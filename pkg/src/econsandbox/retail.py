"""Single-agent retail episodes, strategy scoring, and stability diagnostics."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from ._seeding import derive_seed
from .backends import (
    FEATURE_GROUPS, BackendError, ParseError, RetailDecision, audit_record, chat,
    parse_retail,
)
from .data import CENT, StyleParams
from .prompts import (
    CandidateView, ProfileSummary, RetailPrompt, discounted_price, persona_text,
)

SIMPLEX_TOL = 1e-9


class EpisodeError(BackendError):
    pass


@dataclass(frozen=True)
class FeatureEmphasis:
    """Weights over the six feature groups, on the probability simplex."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != len(FEATURE_GROUPS):
            raise ValueError(f"expected {len(FEATURE_GROUPS)} weights, got {len(w)}")
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > SIMPLEX_TOL:
            raise ValueError("feature emphasis must lie on the simplex")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_mapping(cls, m: dict) -> "FeatureEmphasis":
        return cls(tuple(float(m.get(g, 0.0)) for g in FEATURE_GROUPS))

    @classmethod
    def normalized(cls, raw, smoothing: float = 0.0) -> "FeatureEmphasis":
        raw = np.asarray(raw, dtype=float) + smoothing
        if raw.sum() <= 0:
            raise ValueError("feature emphasis has no mass")
        return cls(tuple(raw / raw.sum()))

    def as_dict(self) -> dict:
        return dict(zip(FEATURE_GROUPS, self.weights))


ECONOMIC_PRIOR = FeatureEmphasis((0.35, 0.25, 0.1, 0.1, 0.1, 0.1))


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float
    K: int = 4
    seed: int = 0
    offsets: tuple[float, ...] | None = None  # explicit relative shocks, overrides sigma

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.offsets is not None and len(self.offsets) != self.K:
            raise ValueError("offsets must have K entries")

    def shocks(self) -> list[float]:
        if self.offsets is not None:
            return [float(x) for x in self.offsets]
        return [float(np.random.default_rng(derive_seed(self.seed, k)).normal(0.0, self.sigma))
                if self.sigma > 0 else 0.0 for k in range(self.K)]


@dataclass(frozen=True)
class RetailEpisode:
    prompt: RetailPrompt
    style: StyleParams | None
    decision: RetailDecision | None
    backend_name: str
    seed: int = 0
    samples: tuple = ()
    response_text: str = ""
    error: str | None = None
    inference_index: int = 0

    @property
    def valid(self) -> bool:
        return self.decision is not None

    @property
    def quantity(self) -> int:
        return self.decision.quantity if self.decision is not None else 0

    def audit(self) -> dict:
        status = "ok" if self.valid else f"error: {self.error}"
        if self.valid and self.decision.fallback:
            status = "fallback"
        return audit_record(self.inference_index, self.backend_name,
                            self.prompt.rendered_text, self.response_text, status)


def with_style(prompt: RetailPrompt, style: StyleParams | None) -> RetailPrompt:
    """Persona preamble and style tags for ``style``; the sidecar is untouched."""
    if style is None:
        return prompt
    return prompt.replace(persona=persona_text(style), style_tags=style.to_dict())


def run_retail_episode(customer, prompt: RetailPrompt, style: StyleParams | None, backend,
                       *, seed: int = 0, inference_index: int = 0) -> RetailEpisode:
    prompt = with_style(prompt, style)
    try:
        text = chat(backend, prompt.messages())
    except BackendError as exc:
        cid = getattr(customer, "customer_id", customer)
        raise EpisodeError(f"episode for customer {cid} (seed {seed}): {exc}") from exc
    try:
        decision = parse_retail(text, prompt.candidate_ids)
        error = None
    except ParseError as exc:
        decision, error = None, f"{type(exc).__name__}: {exc}"
    return RetailEpisode(prompt, style, decision, getattr(backend, "name", "backend"), seed,
                         response_text=text, error=error, inference_index=inference_index)


def sample_episodes(customer, prompt: RetailPrompt, style, backend, K: int, seed: int = 0):
    """K independent replies to the same prompt (distinct per-sample nonces)."""
    out = []
    for k in range(K):
        p = prompt.replace(nonce=derive_seed(seed, prompt.nonce, k))
        out.append(run_retail_episode(customer, p, style, backend, seed=derive_seed(seed, k)))
    return out


def perturb_prices(prompt: RetailPrompt, shock: float) -> RetailPrompt:
    """Scale every displayed unit price by ``1 + shock``; history is not touched."""
    factor = Decimal(repr(1.0 + shock))
    views = []
    for c in prompt.candidates:
        price = max(Decimal(0), (c.unit_price * factor).quantize(CENT))
        views.append(CandidateView(
            c.product_id, c.display_name, price, c.discount, discounted_price(price, c.discount),
            c.attributes_summary, c.image_ref, c.list_price, c.review, c.brand, c.category,
        ))
    return prompt.replace(candidates=tuple(views))


def multi_sample_consistency(customer, prompt: RetailPrompt, cfg: PerturbationConfig, backend,
                             style: StyleParams | None = None):
    """Returns ``(samples, l_cons)``.

    ``l_cons`` is the mean squared quantity gap between each price-perturbed reply
    and the unperturbed one.  Failed samples are dropped from the mean; at least
    half failing is an error.
    """
    base = run_retail_episode(customer, prompt, style, backend, seed=cfg.seed)
    if not base.valid:
        raise EpisodeError(f"unperturbed episode failed: {base.error}")
    samples, failures = [], 0
    for k, shock in enumerate(cfg.shocks()):
        ep = run_retail_episode(customer, perturb_prices(prompt, shock), style, backend,
                                seed=derive_seed(cfg.seed, k))
        if ep.valid:
            samples.append(ep)
        else:
            failures += 1
    if failures >= cfg.K / 2:
        raise EpisodeError(f"{failures} of {cfg.K} perturbed samples failed")
    l_cons = sum((ep.quantity - base.quantity) ** 2 for ep in samples) / len(samples)
    return samples, l_cons


def attention_divergence(A: FeatureEmphasis, A_star: FeatureEmphasis) -> float:
    """KL(A || A_star) in nats."""
    p = np.asarray(A.weights)
    q = np.asarray(A_star.weights)
    if np.any(q <= 0):
        raise ValueError("prior emphasis must be strictly positive")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


_GROUP_VALUE = re.compile(r"\b(price|discount|brand|reviews?|history|trends?)\b\s*[:=]?\s*(\d+(?:\.\d+)?)",
                          re.I)


def parse_emphasis(text: str, smoothing: float = 0.0) -> FeatureEmphasis:
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("{") and s.endswith("}"):
            try:
                obj = json.loads(s)
            except ValueError:
                continue
            if isinstance(obj, dict):
                obj = {("reviews" if k == "review" else "trends" if k == "trend" else k): v
                       for k, v in obj.items()}
                if set(obj) & set(FEATURE_GROUPS):
                    return FeatureEmphasis.normalized(
                        [float(obj.get(g, 0.0)) for g in FEATURE_GROUPS], smoothing)
    named = _GROUP_VALUE.findall(text)
    if named:
        raw = dict.fromkeys(FEATURE_GROUPS, 0.0)
        for g, v in named:
            g = g.lower()
            g = {"review": "reviews", "trend": "trends"}.get(g, g)
            raw[g] = float(v)
        return FeatureEmphasis.normalized([raw[g] for g in FEATURE_GROUPS], smoothing)
    nums = [float(x) for x in re.findall(r"\d+(?:\.\d+)?", text)]
    if nums and len(nums) <= len(FEATURE_GROUPS):
        nums += [0.0] * (len(FEATURE_GROUPS) - len(nums))
        return FeatureEmphasis.normalized(nums, smoothing)
    raise ParseError("could not parse feature emphasis", text)


def elicit_feature_emphasis(backend, prompt: RetailPrompt, smoothing: float = 0.0) -> FeatureEmphasis:
    """Ask the agent to self-report percentage weights over the feature groups."""
    p = prompt.replace(extra={**prompt.extra, "task": "emphasis"})
    question = (
        p.rendered_text + "\n\nBefore deciding, report how much weight (in percent) you put on "
        "each of: " + ", ".join(FEATURE_GROUPS) + ". Reply with one JSON object."
    )
    msgs = p.messages()[:-1] + [("user", question)]
    return parse_emphasis(chat(backend, msgs), smoothing)


@dataclass(frozen=True)
class Strategy:
    name: str
    instruction: str
    params: dict = field(default_factory=dict, hash=False)

    def sidecar(self) -> dict:
        return {"name": self.name, **self.params}


def generate_candidate_strategies(profile: ProfileSummary, history) -> list[Strategy]:
    """Template strategy set; brand-loyal is dropped when no brand affinity exists."""
    history = list(history)
    last = history[-1].product_id if history else None
    out = [
        Strategy("repeat-last-purchase",
                 f"Buy the product you bought last time ({last})." if last
                 else "Buy what you bought last time, if it is offered.",
                 {"product_id": last}),
        Strategy("cheapest-candidate", "Buy the cheapest option after discounts."),
        Strategy("highest-review", "Buy the best-reviewed option."),
    ]
    affinities = {b: w for b, w in profile.features.get("brand_affinities", {}).items()
                  if b != "unbranded"}
    if history and affinities:
        top = sorted(affinities.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        out.append(Strategy("brand-loyal", f"Stay with your usual brand, {top}.", {"brand": top}))
    out.append(Strategy("discount-chaser", "Buy whatever carries the deepest discount."))
    return out


def _parse_scores(text: str, strategies) -> list[float] | None:
    names = [s.name for s in strategies]
    for line in text.splitlines():
        s = line.strip()
        if not (s.startswith("{") and s.endswith("}")):
            continue
        try:
            obj = json.loads(s)
        except ValueError:
            continue
        scores = obj.get("scores") if isinstance(obj, dict) else None
        if isinstance(scores, list) and len(scores) == len(names):
            return [float(x) for x in scores]
        if isinstance(scores, dict) and all(n in scores for n in names):
            return [float(scores[n]) for n in names]
    return None


def score_and_select_strategy(strategies, prompt: RetailPrompt, backend, customer=None,
                              style: StyleParams | None = None):
    """Returns ``(strategy, episode)``; ``strategy`` is ``None`` when scoring failed
    and the decision came from a plain episode instead."""
    if not strategies:
        raise ValueError("no strategies to score")
    p = prompt.replace(extra={**prompt.extra, "task": "score_strategies",
                              "strategies": [s.sidecar() for s in strategies]})
    listing = "\n".join(f"{i}. {s.name}: {s.instruction}" for i, s in enumerate(strategies, 1))
    question = (p.rendered_text + "\n\nScore each purchasing strategy below; reply with "
                '{"scores": {"<name>": <score>, ...}}.\n' + listing)
    text = chat(backend, p.messages()[:-1] + [("user", question)])
    scores = _parse_scores(text, strategies)
    if scores is None or any(math.isnan(x) for x in scores):
        return None, run_retail_episode(customer, prompt, style, backend)
    best = max(range(len(strategies)), key=lambda i: (scores[i], -i))
    chosen = strategies[best]
    decided = prompt.replace(extra={**prompt.extra, "strategy": chosen.sidecar(),
                                    "strategy_instruction": chosen.instruction})
    return chosen, run_retail_episode(customer, decided, style, backend)


def episode_record(ep: RetailEpisode, instance_id: str | None = None, **extra) -> dict:
    rec = {"instance_id": instance_id, **ep.audit(), "valid": ep.valid}
    if ep.valid:
        rec.update(buy=ep.decision.buy, product_id=ep.decision.product_id,
                   quantity=ep.decision.quantity)
    else:
        rec.update(buy=None, product_id=None, quantity=None, error=ep.error)
    rec.update(extra)
    return rec

