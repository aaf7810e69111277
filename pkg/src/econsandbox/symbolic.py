"""Symbolic regression over a small purchasing-formula grammar.

Trees are nested tuples: ``("const", v)``, ``("var", name)``, ``("log", a)`` and
``(op, a, b)`` for op in add/sub/mul/div.  Division and log are protected so
every tree evaluates to a finite-or-inf array without raising.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass

import numpy as np
import sympy
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FEATURES = ("price", "discount", "hist_volume", "trend", "review")
BINARY = ("add", "sub", "mul", "div")
UNARY = ("log",)
DIV_EPS = 1e-9
LOG_EPS = 1e-9
COMPLEXITY_PENALTY = 0.01
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def const(v):
    return ("const", float(v))


def var(name):
    return ("var", name)


def size(tree) -> int:
    if tree[0] in ("const", "var"):
        return 1
    return 1 + sum(size(c) for c in tree[1:])


def depth(tree) -> int:
    if tree[0] in ("const", "var"):
        return 0
    return 1 + max(depth(c) for c in tree[1:])


def to_string(tree, top=True) -> str:
    kind = tree[0]
    if kind == "const":
        return repr(tree[1])
    if kind == "var":
        return tree[1]
    if kind == "log":
        return f"log({to_string(tree[1])})"
    s = f"{to_string(tree[1], False)} {_SYMBOL[kind]} {to_string(tree[2], False)}"
    return s if top else f"({s})"


def evaluate_tree(tree, cols: dict, n: int) -> np.ndarray:
    kind = tree[0]
    if kind == "const":
        return np.full(n, tree[1])
    if kind == "var":
        return cols[tree[1]]
    a = evaluate_tree(tree[1], cols, n)
    if kind == "log":
        return np.log(np.abs(a) + LOG_EPS)
    b = evaluate_tree(tree[2], cols, n)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    safe = np.where(np.abs(b) > DIV_EPS, b, 1.0)
    return np.where(np.abs(b) > DIV_EPS, a / safe, 1.0)


def _to_sympy(tree, symbols):
    kind = tree[0]
    if kind == "const":
        return sympy.nsimplify(tree[1], rational=False) if tree[1] == int(tree[1]) else sympy.Float(tree[1])
    if kind == "var":
        return symbols[tree[1]]
    if kind == "log":
        return sympy.log(sympy.Abs(_to_sympy(tree[1], symbols)) + LOG_EPS)
    a, b = _to_sympy(tree[1], symbols), _to_sympy(tree[2], symbols)
    return {"add": a + b, "sub": a - b, "mul": a * b, "div": a / b}[kind]


@dataclass(frozen=True)
class Expression:
    tree: tuple

    @property
    def complexity(self) -> int:
        return size(self.tree)

    @property
    def depth(self) -> int:
        return depth(self.tree)

    @property
    def features(self) -> set[str]:
        out = set()

        def walk(t):
            if t[0] == "var":
                out.add(t[1])
            elif t[0] != "const":
                for c in t[1:]:
                    walk(c)

        walk(self.tree)
        return out

    def evaluate(self, cols: dict) -> np.ndarray:
        cols = {k: np.asarray(v, dtype=float) for k, v in cols.items()}
        n = len(next(iter(cols.values()))) if cols else 1
        with np.errstate(all="ignore"):
            return evaluate_tree(self.tree, cols, n)

    def to_sympy(self):
        return _to_sympy(self.tree, {f: sympy.Symbol(f) for f in FEATURES})

    def __str__(self) -> str:
        return to_string(self.tree)


class ExpressionSyntaxError(ValueError):
    pass


def parse_expression(text: str) -> Expression:
    """Parse an infix formula such as ``10 - 2*price`` into an :class:`Expression`."""
    text = text.strip()
    if "=" in text:
        text = text.split("=", 1)[1].strip()
    try:
        node = ast.parse(text, mode="eval").body
    except SyntaxError as exc:
        raise ExpressionSyntaxError(f"cannot parse {text!r}") from exc

    def conv(n):
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)) and not isinstance(n.value, bool):
            return const(n.value)
        if isinstance(n, ast.Name):
            if n.id not in FEATURES:
                raise ExpressionSyntaxError(f"unknown feature {n.id!r}")
            return var(n.id)
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, (ast.USub, ast.UAdd)):
            inner = conv(n.operand)
            if isinstance(n.op, ast.UAdd):
                return inner
            return const(-inner[1]) if inner[0] == "const" else ("mul", const(-1.0), inner)
        if isinstance(n, ast.BinOp):
            ops = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}
            op = ops.get(type(n.op))
            if op is None:
                raise ExpressionSyntaxError(f"unsupported operator {type(n.op).__name__}")
            return (op, conv(n.left), conv(n.right))
        if (isinstance(n, ast.Call) and isinstance(n.func, ast.Name) and n.func.id == "log"
                and len(n.args) == 1 and not n.keywords):
            return ("log", conv(n.args[0]))
        raise ExpressionSyntaxError(f"unsupported syntax in {text!r}")

    return Expression(conv(node))


def algebraically_equivalent(a: Expression, b: Expression, tol: float = 1e-6) -> bool:
    """Expand both sides and compare coefficients term by term."""
    diff = sympy.expand(a.to_sympy() - b.to_sympy())
    if diff == 0:
        return True
    syms = sorted(diff.free_symbols, key=str)
    if not syms:
        return abs(float(diff)) <= tol
    try:
        poly = sympy.Poly(diff, *syms)
    except sympy.PolynomialError:
        return False
    return all(abs(float(c)) <= tol for c in poly.coeffs())


@dataclass(frozen=True)
class RuleFit:
    expression: Expression
    rmse: float
    complexity: int
    dataset_id: str = ""

    def penalized_score(self, penalty: float = COMPLEXITY_PENALTY) -> float:
        return self.rmse + penalty * self.complexity

    def to_dict(self) -> dict:
        return {"expression": str(self.expression), "rmse": self.rmse,
                "complexity": self.complexity, "dataset_id": self.dataset_id}


def _columns(dataset, features=None):
    rows = list(dataset)
    if not rows:
        raise ValueError("empty dataset")
    names = features or sorted(set().union(*(r[0].keys() for r in rows)))
    cols = {}
    for f in names:
        try:
            cols[f] = np.array([float(r[0][f]) for r in rows])
        except KeyError:
            raise ValueError(f"feature {f!r} missing from a data point")
    y = np.array([float(r[1]) for r in rows])
    return cols, y


def evaluate_rule(expression: Expression, dataset) -> tuple[float, float]:
    """(rmse, mean absolute error) of ``expression`` over ``(features, target)`` pairs."""
    cols, y = _columns(dataset, sorted(expression.features))
    pred = expression.evaluate(cols) if cols else np.full(len(y), expression.evaluate({"_": [0.0]})[0])
    if pred.shape != y.shape:
        pred = np.broadcast_to(pred, y.shape)
    err = pred - y
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _scaled(tree, f: np.ndarray, y: np.ndarray):
    """Least-squares ``a + b*tree``; returns (expression tree, predictions)."""
    if not np.all(np.isfinite(f)):
        return None, None
    fm = f.mean()
    fc = f - fm
    var_f = float(fc @ fc)
    ym = float(y.mean())
    if var_f <= 1e-18 * max(1.0, fm * fm) * len(f):
        return const(ym), np.full_like(y, ym)
    b = float(fc @ (y - ym)) / var_f
    a = ym - b * fm
    if abs(b) < 1e-15:
        return const(ym), np.full_like(y, ym)
    out = tree if b == 1.0 else ("mul", const(b), tree)
    if abs(a) > 1e-12:
        out = ("add", const(a), out)
    return out, a + b * f


class SymbolicRegressor(BaseEstimator, RegressorMixin):
    """Genetic-programming search for a compact formula ``y ~ f(X)``.

    Each candidate tree gets least-squares constants ``a + b*tree`` before
    scoring; the score is ``rmse + complexity_penalty * nodes``.  The
    constant-mean model and every bare feature are always in the first
    generation.
    """

    def __init__(self, feature_names=FEATURES, population_size=200, max_depth=4,
                 budget=100_000, complexity_penalty=COMPLEXITY_PENALTY, tournament_size=5,
                 p_crossover=0.7, p_mutation=0.25, tol=1e-12, random_state=0):
        self.feature_names = feature_names
        self.population_size = population_size
        self.max_depth = max_depth
        self.budget = budget
        self.complexity_penalty = complexity_penalty
        self.tournament_size = tournament_size
        self.p_crossover = p_crossover
        self.p_mutation = p_mutation
        self.tol = tol
        self.random_state = random_state

    # -- tree generation -------------------------------------------------
    def _random_tree(self, rng, max_d, full):
        names = self._names
        if max_d == 0 or (not full and rng.random() < 0.3):
            if rng.random() < 0.7:
                return var(names[int(rng.integers(len(names)))])
            return const(round(float(rng.uniform(-5, 5)), 3))
        if rng.random() < 0.1:
            return ("log", self._random_tree(rng, max_d - 1, full))
        op = BINARY[int(rng.integers(len(BINARY)))]
        return (op, self._random_tree(rng, max_d - 1, full), self._random_tree(rng, max_d - 1, full))

    @staticmethod
    def _paths(tree, prefix=()):
        yield prefix
        if tree[0] not in ("const", "var"):
            for i, c in enumerate(tree[1:], 1):
                yield from SymbolicRegressor._paths(c, prefix + (i,))

    @staticmethod
    def _get(tree, path):
        for i in path:
            tree = tree[i]
        return tree

    @staticmethod
    def _put(tree, path, sub):
        if not path:
            return sub
        i = path[0]
        return tree[:i] + (SymbolicRegressor._put(tree[i], path[1:], sub),) + tree[i + 1:]

    def _crossover(self, rng, a, b):
        pa = list(self._paths(a))
        pb = list(self._paths(b))
        child = self._put(a, pa[int(rng.integers(len(pa)))], self._get(b, pb[int(rng.integers(len(pb)))]))
        return child if depth(child) <= self.max_depth else a

    def _mutate(self, rng, a):
        pa = list(self._paths(a))
        path = pa[int(rng.integers(len(pa)))]
        sub = self._random_tree(rng, int(rng.integers(0, 3)), full=False)
        child = self._put(a, path, sub)
        return child if depth(child) <= self.max_depth else a

    # -- fitting ---------------------------------------------------------
    def _score(self, tree):
        key = to_string(tree)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.n_evaluations_ >= self.budget:
            return None
        self.n_evaluations_ += 1
        with np.errstate(all="ignore"):
            f = evaluate_tree(tree, self._cols, len(self._y))
            scaled, pred = _scaled(tree, f, self._y)
        if scaled is None or not np.all(np.isfinite(pred)):
            res = (math.inf, math.inf, tree)
        else:
            rmse = float(np.sqrt(np.mean((pred - self._y) ** 2)))
            res = (rmse + self.complexity_penalty * size(scaled), rmse, scaled)
        self._cache[key] = res
        if res[0] < self._best[0]:
            self._best = res
        return res

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if len(y) == 0:
            raise ValueError("empty dataset")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        names = list(self.feature_names)
        if len(names) != X.shape[1]:
            raise ValueError(f"got {X.shape[1]} columns for {len(names)} feature names")
        self._names = names
        self._cols = {n: X[:, i] for i, n in enumerate(names)}
        self._y = y
        self._cache = {}
        self._best = (math.inf, math.inf, const(float(y.mean())))
        self.n_evaluations_ = 0
        rng = np.random.default_rng(self.random_state)

        seeds = [const(1.0)] + [var(n) for n in names]
        population = list(seeds)
        while len(population) < self.population_size:
            d = 1 + len(population) % self.max_depth
            population.append(self._random_tree(rng, d, full=len(population) % 2 == 0))
        scored = []
        for t in population:
            s = self._score(t)
            if s is None:
                break
            scored.append((s[0], t))
        self.n_generations_ = 0
        while self.n_evaluations_ < self.budget and self._best[1] > self.tol and scored:
            self.n_generations_ += 1
            nxt = [min(scored, key=lambda s: s[0])[1]]

            def pick():
                idx = rng.integers(len(scored), size=min(self.tournament_size, len(scored)))
                return min((scored[int(i)] for i in idx), key=lambda s: s[0])[1]

            while len(nxt) < self.population_size:
                r = rng.random()
                if r < self.p_crossover:
                    nxt.append(self._crossover(rng, pick(), pick()))
                elif r < self.p_crossover + self.p_mutation:
                    nxt.append(self._mutate(rng, pick()))
                else:
                    nxt.append(pick())
            new_scored = []
            before = self.n_evaluations_
            for t in nxt:
                s = self._score(t)
                if s is None:
                    break
                new_scored.append((s[0], t))
            if not new_scored or (self.n_evaluations_ == before and len(new_scored) < len(nxt)):
                break
            scored = new_scored

        _, rmse, tree = self._best
        self.expression_ = Expression(tree)
        self.rmse_ = float(rmse)
        self.complexity_ = size(tree)
        for attr in ("_cols", "_y", "_cache"):
            delattr(self, attr)
        return self

    def predict(self, X):
        check_is_fitted(self, "expression_")
        X = check_array(X, dtype=float)
        cols = {n: X[:, i] for i, n in enumerate(self.feature_names)}
        with np.errstate(all="ignore"):
            out = evaluate_tree(self.expression_.tree, cols, X.shape[0])
        return np.asarray(out, dtype=float)


def discover_rule(dataset, budget: int = 100_000, seed: int = 0, max_depth: int = 4,
                  dataset_id: str = "", **kwargs) -> RuleFit:
    """Search for a formula predicting the target of ``(features, target)`` pairs."""
    rows = list(dataset)
    if not rows:
        raise ValueError("empty dataset")
    if len(rows) < 10:
        raise ValueError("need at least 10 data points")
    names = [f for f in FEATURES if f in rows[0][0]] or sorted(rows[0][0])
    X = np.array([[float(r[0][f]) for f in names] for r in rows])
    y = np.array([float(r[1]) for r in rows])
    est = SymbolicRegressor(feature_names=tuple(names), budget=budget, max_depth=max_depth,
                            random_state=seed, **kwargs).fit(X, y)
    rmse, _ = evaluate_rule(est.expression_, rows)
    return RuleFit(est.expression_, rmse, est.complexity_, dataset_id)
