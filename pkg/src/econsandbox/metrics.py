"""Evaluation metrics and run-level reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


class InstanceMismatch(MetricError):
    def __init__(self, instance_id, message):
        super().__init__(f"{message}: {instance_id}")
        self.instance_id = instance_id


@dataclass(frozen=True)
class EvalInstance:
    instance_id: str
    true_product: str
    true_quantity: int
    predicted_product: str | None = None
    predicted_quantity: int | None = None
    valid: bool = True
    buy: bool = True
    samples: tuple = ()
    cost: float = 0.0

    def __post_init__(self):
        if self.true_quantity < 1:
            raise MetricError(f"{self.instance_id}: ground-truth quantity must be >= 1")


def _valid(instances):
    return [i for i in instances if i.valid]


def hit_rate(instances) -> float:
    """Share of all instances whose predicted product matches; invalid ones are misses."""
    instances = list(instances)
    if not _valid(instances):
        raise MetricError("no valid instances")
    hits = sum(1 for i in instances if i.valid and i.buy and i.predicted_product == i.true_product)
    return hits / len(instances)


def quantity_error(instances) -> float:
    """Mean |q_hat - q| / max(q, 1) over valid purchase predictions."""
    eligible = [i for i in instances if i.valid and i.buy and i.predicted_quantity is not None]
    if not eligible:
        raise MetricError("no valid purchase predictions")
    return float(np.mean([abs(i.predicted_quantity - i.true_quantity) / max(i.true_quantity, 1)
                          for i in eligible]))


def stability(instances) -> float:
    """Mean per-instance sample variance of quantities, divided by max(sample mean, 1)."""
    instances = list(instances)
    if not instances:
        raise MetricError("no instances")
    values = []
    for inst in instances:
        s = np.asarray(inst.samples, dtype=float)
        if len(s) < 2:
            raise MetricError(f"{inst.instance_id}: need at least 2 samples, got {len(s)}")
        values.append(s.var(ddof=1) / max(s.mean(), 1.0))
    return float(np.mean(values))


def normalize_time_costs(values) -> list[float]:
    v = np.asarray(list(values), dtype=float)
    if len(v) < 2:
        raise MetricError("need at least 2 values to normalise")
    span = v.max() - v.min()
    if span == 0:
        return [0.0] * len(v)
    return [float(x) for x in (v - v.min()) / span]


@dataclass
class RunReport:
    hit_rate: float
    quantity_error: float | None
    stability: float | None
    loss: dict
    time_cost_raw: float
    time_cost_normalized: float | None
    n_valid: int
    n_invalid: int
    ood: bool = False
    config_id: str = ""
    categories: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def instances_from_records(episodes, truth: dict) -> list[EvalInstance]:
    """Join episode records with ``truth`` (``{id: (product, quantity)}``) by instance id."""
    episodes = list(episodes)
    if not episodes:
        raise MetricError("no predictions to evaluate")
    seen = set()
    out = []
    for rec in episodes:
        iid = rec["instance_id"]
        if iid not in truth:
            raise InstanceMismatch(iid, "prediction has no ground truth")
        if iid in seen:
            raise InstanceMismatch(iid, "duplicate prediction")
        seen.add(iid)
        product, qty = truth[iid]
        valid = bool(rec.get("valid", True))
        buy = bool(rec.get("buy")) if valid else False
        out.append(EvalInstance(
            instance_id=iid, true_product=product, true_quantity=int(qty),
            predicted_product=rec.get("product_id") if valid else None,
            predicted_quantity=rec.get("quantity") if valid and buy else None,
            valid=valid, buy=buy, samples=tuple(rec.get("samples") or ()),
            cost=float(rec.get("cost", 1.0)),
        ))
    missing = sorted(set(truth) - seen)
    if missing:
        raise InstanceMismatch(missing[0], "ground truth has no prediction")
    return out


def evaluate_run(episodes, truth: dict, config_id: str = "", ood: bool = False,
                 categories=()) -> RunReport:
    """All metrics plus mean squared-error and 0/1 losses.

    ``time_cost_raw`` is the total backend-call count recorded on the episodes,
    which keeps reports reproducible; wall-clock time lives in run manifests.
    """
    instances = sorted(instances_from_records(episodes, truth), key=lambda i: i.instance_id)
    hr = hit_rate(instances)
    try:
        qe = quantity_error(instances)
    except MetricError:
        qe = None
    with_samples = [i for i in instances if len(i.samples) >= 2]
    st = stability(with_samples) if with_samples else None
    valid = _valid(instances)
    sq = float(np.mean([((i.predicted_quantity or 0) - i.true_quantity) ** 2 for i in valid]))
    return RunReport(
        hit_rate=hr,
        quantity_error=qe,
        stability=st,
        loss={"squared_error": sq, "zero_one": 1.0 - hr},
        time_cost_raw=float(sum(i.cost for i in instances)),
        time_cost_normalized=None,
        n_valid=len(valid),
        n_invalid=len(instances) - len(valid),
        ood=ood,
        config_id=config_id,
        categories=sorted(categories),
    )


def with_normalized_costs(reports) -> list[RunReport]:
    reports = list(reports)
    norm = normalize_time_costs([r.time_cost_raw for r in reports])
    return [RunReport(**{**r.to_dict(), "time_cost_normalized": n}) for r, n in zip(reports, norm)]


_COMPARED = ("hit_rate", "quantity_error", "stability")


def ood_report(train: RunReport, test: RunReport, split=None) -> dict:
    if train.config_id != test.config_id:
        raise MetricError(f"reports come from different configurations "
                          f"({train.config_id!r} vs {test.config_id!r})")
    rows = {}
    for name in _COMPARED:
        a, b = getattr(train, name), getattr(test, name)
        rows[name] = {"train": a, "test": b,
                      "delta": None if a is None or b is None else b - a}
    return {
        "config_id": train.config_id,
        "metrics": rows,
        "train_categories": sorted(split.train_categories) if split else list(train.categories),
        "test_categories": sorted(split.test_categories) if split else list(test.categories),
    }


def write_report(report: RunReport, json_path, md_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    if md_path is not None:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        lines = [
            "| Metric | Value |", "|---|---|",
            f"| Hit Rate | {fmt(report.hit_rate)} |",
            f"| Quantity Error | {fmt(report.quantity_error)} |",
            f"| Stability | {fmt(report.stability)} |",
            f"| Valid / Invalid | {report.n_valid} / {report.n_invalid} |",
            f"| Time Cost (backend calls) | {report.time_cost_raw:.0f} |",
        ]
        with open(md_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
