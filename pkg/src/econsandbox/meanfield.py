"""Mean-field market context and the alternating micro/macro update loop."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from .data import DataError, add_months, month_key

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


class MeanFieldError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class WindowConfig:
    W: int = 3
    eta: float = 0.5

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("window length must be >= 1")
        if not 0 < self.eta <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class MeanFieldState:
    """Per-category mean purchase quantity and per-product selection shares."""

    mean_quantity: dict
    shares: dict
    t: int = 0

    def __post_init__(self):
        for cat, q in self.mean_quantity.items():
            if q < 0:
                raise ValueError(f"negative mean quantity for {cat}")
        for cat, s in self.shares.items():
            if s and abs(sum(s.values()) - 1.0) > SIMPLEX_TOL:
                raise ValueError(f"shares for {cat} do not sum to 1")

    def components(self) -> dict:
        out = {("q", c): v for c, v in self.mean_quantity.items()}
        for c, s in self.shares.items():
            out.update({("s", c, p): v for p, v in s.items()})
        return out

    def to_dict(self) -> dict:
        return {"t": self.t, "mean_quantity": dict(sorted(self.mean_quantity.items())),
                "shares": {c: dict(sorted(s.items())) for c, s in sorted(self.shares.items())}}


def sup_distance(a: MeanFieldState, b: MeanFieldState) -> float:
    ca, cb = a.components(), b.components()
    keys = set(ca) | set(cb)
    return max((abs(ca.get(k, 0.0) - cb.get(k, 0.0)) for k in keys), default=0.0)


def window_average(sales_series, W: int, as_of_month: str, return_flag: bool = False):
    """Mean of the ``W`` monthly totals strictly before ``as_of_month``.

    Months missing from the series count as zero.  With no data at all before
    ``as_of_month`` the result is 0 and the flag is set.
    """
    if W < 1:
        raise ValueError("window length must be >= 1")
    totals = dict(sales_series)
    window = [add_months(as_of_month, -k) for k in range(1, W + 1)]
    empty = not any(m < as_of_month for m in totals)
    value = 0.0 if empty else sum(float(totals.get(m, 0)) for m in window) / W
    if empty:
        logger.debug("window_average: no data before %s", as_of_month)
    return (value, empty) if return_flag else value


def _products_by_category(catalog) -> dict:
    out = defaultdict(list)
    for pid in sorted(catalog):
        out[catalog[pid].category].append(pid)
    return out


def _aggregate(items, catalog, smoothing: float, prior: MeanFieldState | None = None,
               t: int = 0) -> MeanFieldState:
    """Aggregate ``(product_id, quantity)`` purchases into a field state.

    Categories with no purchases keep ``prior``'s values (or zeros/uniform).
    """
    by_cat = _products_by_category(catalog)
    qty = defaultdict(float)
    count = defaultdict(int)
    per_product = defaultdict(float)
    for pid, q in items:
        if q is None or q <= 0 or pid not in catalog:
            continue
        cat = catalog[pid].category
        qty[cat] += q
        count[cat] += 1
        per_product[pid] += q
    mean_q, shares = {}, {}
    for cat, pids in by_cat.items():
        if count[cat] == 0 and prior is not None and cat in prior.mean_quantity:
            mean_q[cat] = prior.mean_quantity[cat]
            shares[cat] = dict(prior.shares[cat])
            continue
        mean_q[cat] = qty[cat] / count[cat] if count[cat] else 0.0
        denom = qty[cat] + smoothing * len(pids)
        if denom > 0:
            shares[cat] = {p: (per_product[p] + smoothing) / denom for p in pids}
        else:
            shares[cat] = {p: 1.0 / len(pids) for p in pids}
    return MeanFieldState(mean_q, shares, t)


def init_meanfield(transactions, catalog, W: int, as_of_month: str,
                   smoothing: float = 1.0) -> MeanFieldState:
    """mu_0 from purchases in the ``W`` months before ``as_of_month``."""
    if W < 1:
        raise ValueError("window length must be >= 1")
    window = {add_months(as_of_month, -k) for k in range(1, W + 1)}
    txns = list(transactions)
    if not txns:
        raise DataError("no transactions")
    if not any(month_key(t.timestamp) < as_of_month for t in txns):
        raise DataError(f"no data before {as_of_month}")
    items = [(t.product_id, t.quantity) for t in txns if month_key(t.timestamp) in window]
    return _aggregate(items, catalog, smoothing, t=0)


def aggregate_decisions(decisions, catalog, smoothing: float = 1.0,
                        prior: MeanFieldState | None = None, t: int = 0) -> MeanFieldState:
    """The raw field implied by one batch of decisions (same rule as :func:`init_meanfield`)."""
    items = []
    for d in decisions:
        if d is None or not getattr(d, "buy", True):
            continue
        items.append((d.product_id, d.quantity))
    return _aggregate(items, catalog, smoothing, prior, t)


@dataclass(frozen=True)
class FieldDecision:
    """A purchase whose quantity may be fractional (used by analytic mock runners)."""

    product_id: str
    quantity: float
    buy: bool = True


def blend(mu: MeanFieldState, nu: MeanFieldState, eta: float) -> MeanFieldState:
    mean_q = {c: (1 - eta) * mu.mean_quantity.get(c, 0.0) + eta * nu.mean_quantity[c]
              for c in nu.mean_quantity}
    shares = {}
    for c, s in nu.shares.items():
        old = mu.shares.get(c, s)
        shares[c] = {p: (1 - eta) * old.get(p, 0.0) + eta * v for p, v in s.items()}
    return MeanFieldState(mean_q, shares, mu.t + 1)


def meanfield_step(mu: MeanFieldState, runner, eta: float, catalog,
                   smoothing: float = 1.0) -> MeanFieldState:
    """One alternating update: agents act under ``mu``; their aggregate is blended in.

    ``runner(mu)`` returns the batch's decisions (``None`` for a failed episode).
    Every episode in the batch sees the same ``mu``.
    """
    if not 0 < eta <= 1:
        raise ValueError("damping must lie in (0, 1]")
    decisions = list(runner(mu))
    if not decisions or all(d is None for d in decisions):
        raise MeanFieldError("every episode in the batch failed")
    nu = aggregate_decisions(decisions, catalog, smoothing, prior=mu, t=mu.t + 1)
    return blend(mu, nu, eta)


@dataclass
class MeanFieldTrajectory:
    states: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    converged: bool = False

    def contraction_factors(self) -> list[float]:
        d = self.deltas
        return [d[i + 1] / d[i] for i in range(len(d) - 1) if d[i] > 0]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, s in enumerate(self.states):
                rec = {"iteration": i, "delta": self.deltas[i - 1] if i else None, **s.to_dict()}
                fh.write(json.dumps(rec) + "\n")


def run_meanfield(config: WindowConfig, mu0: MeanFieldState, runner, tol: float, max_iter: int,
                  catalog, smoothing: float = 1.0):
    """Iterate until the sup-norm change drops below ``tol``; returns ``(mu, trajectory)``."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    traj = MeanFieldTrajectory([mu0])
    mu = mu0
    for _ in range(max_iter):
        try:
            nxt = meanfield_step(mu, runner, config.eta, catalog, smoothing)
        except Exception as exc:
            raise MeanFieldError(f"iteration {mu.t + 1} failed: {exc}", traj) from exc
        delta = sup_distance(mu, nxt)
        traj.states.append(nxt)
        traj.deltas.append(delta)
        mu = nxt
        if delta < tol:
            traj.converged = True
            break
    return mu, traj


def field_context_text(mu: MeanFieldState, categories, top: int = 3) -> str:
    lines = []
    for cat in sorted(set(categories)):
        if cat not in mu.mean_quantity:
            continue
        best = sorted(mu.shares.get(cat, {}).items(), key=lambda kv: (-kv[1], kv[0]))[:top]
        lines.append(
            f"category {cat}: average order {mu.mean_quantity[cat]:.2f} units; top sellers "
            + ", ".join(f"{p} {s:.0%}" for p, s in best)
        )
    return "\n".join(lines)


def embed_meanfield(prompt, mu: MeanFieldState, top: int = 3):
    """Rewrite the prompt's market-trends section (and sidecar) from ``mu``."""
    cats = [c.category for c in prompt.candidates]
    field_q = {c: mu.mean_quantity[c] for c in sorted(set(cats)) if c in mu.mean_quantity}
    return prompt.replace(market_trends=field_context_text(mu, cats, top),
                          extra={**prompt.extra, "market_field": field_q})


def linear_response_runner(a: float, lam: float, product_ids, n_agents: int = 1):
    """Analytic mock: every agent orders ``a + lam * x`` where ``x`` is the field's
    current mean quantity for the product's category."""
    product_ids = list(product_ids)

    def runner(mu: MeanFieldState):
        out = []
        for i in range(n_agents):
            pid = product_ids[i % len(product_ids)]
            cat = next((c for c, s in mu.shares.items() if pid in s), None)
            x = mu.mean_quantity.get(cat, 0.0)
            out.append(FieldDecision(pid, a + lam * x))
        return out

    return runner


def retail_batch_runner(instances, backend, style=None):
    """Runner that replays decision instances under the current field context."""
    from .backends import BackendError
    from .retail import run_retail_episode

    def runner(mu: MeanFieldState):
        out = []
        for inst in instances:
            prompt = embed_meanfield(inst.prompt, mu)
            try:
                ep = run_retail_episode(inst.transaction.customer_id, prompt, style, backend)
            except BackendError:
                out.append(None)
                continue
            out.append(ep.decision)
        return out

    return runner
