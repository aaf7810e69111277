"""Population-level calibration: conditional histograms, KL, quantile maps,
importance weights, bottleneck detection, and target feedback."""
from __future__ import annotations

import dataclasses
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

N_BUCKETS = 11  # quantities 0..9 and a 10+ tail
DEFAULT_DELTA = 0.15
SIMPLEX_TOL = 1e-9


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class BinningConfig:
    discount_edges: tuple[float, float] = (0.05, 0.2)
    n_buckets: int = N_BUCKETS
    smoothing: float = 1.0
    min_count: int = 5


def bucket_of(quantity, n_buckets: int = N_BUCKETS) -> int:
    return int(min(max(int(quantity), 0), n_buckets - 1))


def discount_tercile(discount, edges) -> str:
    d = float(discount)
    if d < edges[0]:
        return "low"
    return "mid" if d < edges[1] else "high"


def bin_key(record: dict, binning: BinningConfig) -> str:
    return "|".join((str(record["category"]), str(record["income_bracket"]),
                     discount_tercile(record["discount"], binning.discount_edges)))


@dataclass
class ConditionalHistogram:
    probs: dict
    counts: dict
    low_confidence: set = field(default_factory=set)
    n_buckets: int = N_BUCKETS

    def __post_init__(self):
        for k, p in self.probs.items():
            p = np.asarray(p, dtype=float)
            if abs(p.sum() - 1.0) > SIMPLEX_TOL or np.any(p < 0):
                raise CalibrationError(f"histogram for bin {k!r} is not on the simplex")
            self.probs[k] = p

    @classmethod
    def single(cls, probs, count: int = 0, key: str = "all") -> "ConditionalHistogram":
        return cls({key: np.asarray(probs, dtype=float)}, {key: count})


def smooth_counts(counts, smoothing: float = 1.0) -> np.ndarray:
    c = np.asarray(counts, dtype=float) + smoothing
    return c / c.sum()


def estimate_conditional(decisions, binning: BinningConfig | None = None) -> ConditionalHistogram:
    """Per-bin outcome histograms with additive smoothing.

    ``decisions`` are mappings with category, income_bracket, discount, quantity.
    """
    binning = binning or BinningConfig()
    decisions = list(decisions)
    if not decisions:
        raise CalibrationError("no decisions to estimate from")
    raw = defaultdict(lambda: np.zeros(binning.n_buckets))
    for d in decisions:
        raw[bin_key(d, binning)][bucket_of(d["quantity"], binning.n_buckets)] += 1
    probs = {k: smooth_counts(v, binning.smoothing) for k, v in sorted(raw.items())}
    counts = {k: int(v.sum()) for k, v in sorted(raw.items())}
    low = {k for k, n in counts.items() if n < binning.min_count}
    return ConditionalHistogram(probs, counts, low, binning.n_buckets)


def kl_divergence(P, Q) -> float:
    """sum p*log(p/q) in nats.  Q must be positive wherever P is."""
    p = np.asarray(P, dtype=float)
    q = np.asarray(Q, dtype=float)
    if p.shape != q.shape:
        raise CalibrationError(f"dimension mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise CalibrationError("Q has no mass where P does; smooth it first")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


# ---------------------------------------------------------------------------
# Quantile maps
# ---------------------------------------------------------------------------


def _cdf(p: np.ndarray):
    edges = np.arange(len(p) + 1, dtype=float)
    F = np.concatenate([[0.0], np.cumsum(p)])
    F[-1] = 1.0
    return edges, F


@dataclass(frozen=True)
class PiecewiseLinearMap:
    """Monotone map given by knots; slope 1 outside the knot range, floored at 0."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise CalibrationError("need matching knot lists of length >= 2")
        if np.any(np.diff(self.xs) <= 0) or np.any(np.diff(self.ys) < 0):
            raise CalibrationError("knots must be increasing and the map monotone")

    @classmethod
    def identity(cls, upper: float = N_BUCKETS) -> "PiecewiseLinearMap":
        return cls((0.0, float(upper)), (0.0, float(upper)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        y = np.interp(x, xs, ys)
        y = np.where(x > xs[-1], ys[-1] + (x - xs[-1]), y)
        y = np.where(x < xs[0], ys[0] - (xs[0] - x), y)
        return np.maximum(y, 0.0)

    def pushforward(self, p) -> np.ndarray:
        """Histogram of f(X) when X is uniform within each bucket of ``p``."""
        p = np.asarray(p, dtype=float)
        n = len(p)
        pts = np.unique(np.concatenate([np.arange(n + 1, dtype=float),
                                        [x for x in self.xs if 0 < x < n]]))
        out = np.zeros(n)
        for a, b in zip(pts[:-1], pts[1:]):
            mass = p[min(int(a), n - 1)] * (b - a)
            ya, yb = float(self(a)), float(self(b))
            if yb - ya < 1e-15:
                out[min(max(int(ya), 0), n - 1)] += mass
                continue
            for j in range(n):
                lo = -math.inf if j == 0 else j
                hi = math.inf if j == n - 1 else j + 1
                overlap = min(yb, hi) - max(ya, lo)
                if overlap > 0:
                    out[j] += mass * overlap / (yb - ya)
        return out / out.sum()


def quantile_map(p_sim, p_real) -> PiecewiseLinearMap:
    """``F_real^-1 o F_sim`` for histograms read as piecewise-uniform densities."""
    p_sim = np.asarray(p_sim, dtype=float)
    p_real = np.asarray(p_real, dtype=float)
    edges, Fs = _cdf(p_sim)
    _, Fr = _cdf(p_real)
    if np.any(np.diff(Fs) <= 0) or np.any(np.diff(Fr) <= 0):
        raise CalibrationError("quantile maps need strictly positive (smoothed) histograms")
    extra = np.interp(Fr, Fs, edges)  # sim positions whose CDF hits a real edge
    xs = np.unique(np.concatenate([edges, extra]))
    ys = np.interp(np.interp(xs, edges, Fs), Fr, edges)
    ys = np.maximum.accumulate(ys)
    return PiecewiseLinearMap(tuple(float(x) for x in xs), tuple(float(y) for y in ys))


@dataclass
class CalibrationMap:
    maps: dict
    kl_before: dict = field(default_factory=dict)
    kl_after: dict = field(default_factory=dict)

    def for_bin(self, key=None) -> PiecewiseLinearMap:
        if key is None:
            if len(self.maps) != 1:
                raise CalibrationError("bin key required for a multi-bin map")
            return next(iter(self.maps.values()))
        return self.maps.get(key) or PiecewiseLinearMap.identity()

    def to_dict(self) -> dict:
        return {k: {"x": list(m.xs), "y": list(m.ys),
                    "kl_before": self.kl_before.get(k), "kl_after": self.kl_after.get(k)}
                for k, m in sorted(self.maps.items())}


def fit_calibration(P_sim: ConditionalHistogram, P_real: ConditionalHistogram) -> CalibrationMap:
    """Per-bin quantile maps, falling back to identity wherever a map would not
    lower KL(P_real || f(P_sim))."""
    maps, before, after = {}, {}, {}
    for key, real in sorted(P_real.probs.items()):
        if key not in P_sim.probs or P_sim.counts.get(key, 1) == 0:
            raise CalibrationError(f"bin {key!r} has no simulated mass")
        sim = P_sim.probs[key]
        kl_id = kl_divergence(real, sim)
        f = quantile_map(sim, real)
        try:
            kl_f = kl_divergence(real, f.pushforward(sim))
        except CalibrationError:
            kl_f = math.inf
        if not kl_f <= kl_id:
            f, kl_f = PiecewiseLinearMap.identity(len(sim)), kl_id
        maps[key], before[key], after[key] = f, kl_id, kl_f
    return CalibrationMap(maps, before, after)


def calibrated_quantity(f: PiecewiseLinearMap, quantity) -> int:
    """Map an integer quantity through ``f`` at its bucket midpoint; round half up."""
    y = float(f(float(quantity) + 0.5)) - 0.5
    return max(0, int(math.floor(y + 0.5)))


def apply_calibration(f, decision, bin_key: str | None = None):
    """Decision with its quantity remapped; the selected product is untouched.

    A purchase never drops below one unit, so a buy decision stays a buy.
    """
    m = f.for_bin(bin_key) if isinstance(f, CalibrationMap) else f
    if isinstance(decision, dict):
        return {**decision, "quantity": calibrated_quantity(m, decision["quantity"])}
    q = calibrated_quantity(m, decision.quantity)
    if getattr(decision, "buy", False):
        q = max(q, 1)
    elif hasattr(decision, "buy"):
        return decision
    return dataclasses.replace(decision, quantity=q)


class QuantileCalibrator(BaseEstimator, TransformerMixin):
    """Single-bin quantity calibrator: ``fit(sim_quantities, real_quantities)``."""

    def __init__(self, n_buckets=N_BUCKETS, smoothing=1.0):
        self.n_buckets = n_buckets
        self.smoothing = smoothing

    def _hist(self, q):
        counts = np.bincount(np.clip(np.asarray(q, dtype=int).ravel(), 0, self.n_buckets - 1),
                             minlength=self.n_buckets)
        return smooth_counts(counts, self.smoothing)

    def fit(self, X, y):
        sim, real = self._hist(X), self._hist(y)
        fitted = fit_calibration(ConditionalHistogram.single(sim, len(np.ravel(X))),
                                 ConditionalHistogram.single(real, len(np.ravel(y))))
        self.map_ = fitted.for_bin()
        self.kl_before_ = fitted.kl_before["all"]
        self.kl_after_ = fitted.kl_after["all"]
        return self

    def transform(self, X):
        check_is_fitted(self, "map_")
        X = np.asarray(X)
        return np.array([calibrated_quantity(self.map_, q) for q in X.ravel()]).reshape(X.shape)


# ---------------------------------------------------------------------------
# Reweighting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReweightTable:
    weights: dict
    expected_sim_weight: float
    w_min: float
    w_max: float


def _bin_probs(h, keys) -> dict:
    if isinstance(h, ConditionalHistogram):
        total = sum(h.counts.get(k, 0) for k in keys)
        return {k: (h.counts.get(k, 0) + 1) / (total + len(keys)) for k in keys}
    return {k: float(h.get(k, 0.0)) for k in keys}


def reweight(P_real, P_sim, w_min: float = 0.2, w_max: float = 5.0) -> ReweightTable:
    """Clipped per-bin ratios P_real(bin) / P_sim(bin).

    Accepts histograms (bin mass from smoothed counts) or plain ``{bin: prob}``.
    """
    keys = sorted(set(P_real.probs if isinstance(P_real, ConditionalHistogram) else P_real)
                  | set(P_sim.probs if isinstance(P_sim, ConditionalHistogram) else P_sim))
    pr, ps = _bin_probs(P_real, keys), _bin_probs(P_sim, keys)
    weights = {}
    for k in keys:
        ratio = pr[k] / ps[k] if ps[k] > 0 else math.inf
        weights[k] = float(min(max(ratio, w_min), w_max))
    expected = float(sum(ps[k] * weights[k] for k in keys))
    return ReweightTable(weights, expected, w_min, w_max)


# ---------------------------------------------------------------------------
# Bottlenecks and targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackSignal:
    kpi: str
    observed: float
    baseline: float
    deviation: float
    threshold: float


def detect_bottleneck(kpis: dict, baseline: dict, deltas: dict | None = None,
                      default_delta: float = DEFAULT_DELTA, eps: float = 1e-12) -> list:
    """Signals for KPIs whose relative deviation from baseline exceeds its threshold."""
    deltas = deltas or {}
    unknown = set(deltas) - set(kpis)
    if unknown:
        raise CalibrationError(f"threshold given for unknown KPI(s): {sorted(unknown)}")
    missing = set(kpis) - set(baseline)
    if missing:
        raise CalibrationError(f"no baseline for KPI(s): {sorted(missing)}")
    out = []
    for name in sorted(kpis):
        v, b = float(kpis[name]), float(baseline[name])
        dev = abs(v - b) / max(abs(b), eps)
        thr = float(deltas.get(name, default_delta))
        if dev > thr:
            out.append(FeedbackSignal(name, v, b, dev, thr))
    return out


@dataclass(frozen=True)
class TargetNode:
    name: str
    target: float
    tolerance: float = 0.0
    children: tuple = ()
    aggregation: str = "sum"
    achieved: float | None = None


def decompose_targets(parent: TargetNode, shares, names=None) -> list[TargetNode]:
    shares = [float(s) for s in shares]
    if abs(sum(shares) - 1.0) > 1e-9:
        raise CalibrationError(f"shares sum to {sum(shares)}, not 1")
    names = names or [f"{parent.name}.{i}" for i in range(len(shares))]
    if parent.aggregation == "mean":
        return [TargetNode(n, parent.target, parent.tolerance) for n in names]
    return [TargetNode(n, parent.target * s, parent.tolerance * s) for n, s in zip(names, shares)]


def feedback_adjust(targets, signals, iteration: int, r0: float = 0.5,
                    decay: float = 0.5) -> list[TargetNode]:
    """Move signalled targets toward the observed value by ``r0 * decay**iteration``."""
    step = r0 * decay ** iteration
    observed = {s.kpi: s.observed for s in signals}
    out = []
    for t in targets:
        if t.name in observed:
            t = dataclasses.replace(t, target=t.target + step * (observed[t.name] - t.target))
        out.append(t)
    return out


def generalization_gain_lower_bound(d_model, n_target, n_full, lam, r_transfer) -> float:
    """sqrt(d/n_target) - sqrt(d/n_full) + lam * r_transfer."""
    if d_model < 1 or n_target < 1 or n_full < n_target or lam < 0 or r_transfer < 0:
        raise ValueError("need d_model >= 1, 1 <= n_target <= n_full, lam >= 0, r_transfer >= 0")
    return math.sqrt(d_model / n_target) - math.sqrt(d_model / n_full) + lam * r_transfer


def write_calibration_json(path, cmap: CalibrationMap, table: ReweightTable | None,
                           binning: BinningConfig) -> None:
    doc = {
        "maps": cmap.to_dict(),
        "reweight": None if table is None else {
            "weights": dict(sorted(table.weights.items())),
            "expected_sim_weight": table.expected_sim_weight,
            "w_min": table.w_min, "w_max": table.w_max,
        },
        "config": dataclasses.asdict(binning),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
