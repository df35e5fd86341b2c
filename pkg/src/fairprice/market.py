"""Market economics: willingness to pay, demand, perceived unfairness, fairness gap, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffengine import sigmoid
from .graphcore import Graph, NodeTable

LINEAR = "linear"
EXPONENTIAL = "exponential"


class MarketError(ValueError):
    pass


@dataclass(frozen=True)
class DemandModel:
    """Demand family plus the affine score t(x, s) = intercept + w.x + w_s * s.

    Linear: g = max(0, t), demand max(0, 1 - p/g).
    Exponential: g = a + b * sigmoid(t), demand exp(-g p).
    """

    family: str
    weights: tuple[float, ...]
    s_weight: float = 0.0
    intercept: float = 0.0
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.family not in (LINEAR, EXPONENTIAL):
            raise MarketError(f"unknown demand family {self.family!r}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.family == EXPONENTIAL and not (self.a > 0 and self.b >= 0):
            raise MarketError(f"exponential demand needs a > 0 and b >= 0, got a={self.a}, b={self.b}")

    def score(self, X, s) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.weights):
            raise MarketError(f"feature dimension {X.shape[1]} does not match {len(self.weights)} weights")
        return self.intercept + X @ np.asarray(self.weights) + self.s_weight * np.asarray(s, dtype=float)

    def wtp_param(self, X, s) -> np.ndarray:
        t = self.score(X, s)
        if self.family == LINEAR:
            return np.maximum(0.0, t)
        return self.a + self.b * sigmoid(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class PerceptionParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 < self.alpha < self.beta:
            raise MarketError(f"need 0 < alpha < beta, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class MarketConfig:
    cost: float
    p_max: float

    def __post_init__(self):
        if not self.cost > 0:
            raise MarketError(f"marginal cost must be positive, got {self.cost}")
        if not self.p_max > self.cost:
            raise MarketError(f"p_max ({self.p_max}) must exceed cost ({self.cost})")


@dataclass(frozen=True)
class Market:
    """Demand, perception, and cost/bound bundled for one simulated market."""

    demand: DemandModel
    perception: PerceptionParams
    config: MarketConfig


@dataclass
class MetricsReport:
    pi_avg: float
    p_diff: float
    delta_avg: float
    eta_avg: float
    mean_price_0: float
    mean_price_1: float
    n_0: int
    n_1: int
    extra: dict = field(default_factory=dict)

    FIELDS = ("pi_avg", "p_diff", "delta_avg", "eta_avg", "mean_price_0", "mean_price_1", "n_0", "n_1")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def wtp_param(model: DemandModel, x_row, s_value) -> float:
    """Distribution parameter g for a single customer."""
    return float(model.wtp_param(np.atleast_2d(x_row), np.atleast_1d(s_value))[0])


def base_demand(family: str, g, p) -> np.ndarray:
    """Expected demand 1 - F(p) before any unfairness adjustment."""
    g = np.asarray(g, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise MarketError("prices must be non-negative")
    if family == LINEAR:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.maximum(0.0, 1.0 - p / g)
        # g = 0: nothing sells at a positive price; p = 0 always sells
        d = np.where(g > 0, d, 0.0)
        return np.where(p == 0, 1.0, d)
    if family == EXPONENTIAL:
        return np.exp(-g * p)
    raise MarketError(f"unknown demand family {family!r}")


def price_difference(graph: Graph, p) -> np.ndarray:
    """Own price minus mean neighbor price; zero for isolated customers."""
    p = np.asarray(p, dtype=float)
    if p.shape != (graph.n,):
        raise MarketError(f"price vector length {p.shape} does not match graph size {graph.n}")
    # mean of per-edge differences, not p - mean(p_j): exact zeros for uniform prices
    rows = np.repeat(np.arange(graph.n), graph.degree)
    total = np.bincount(rows, weights=p[rows] - p[graph.col_idx], minlength=graph.n)
    return np.divide(total, graph.degree, out=np.zeros(graph.n), where=graph.degree > 0)


def perception(delta, params: PerceptionParams) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    k = np.where(delta <= 0, params.alpha, params.beta)
    return np.tanh(k * delta)


def adjusted_demand(d, eta) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if d.shape != eta.shape:
        raise MarketError(f"demand {d.shape} and perception {eta.shape} shapes differ")
    return (1.0 - eta) * d


def group_price_gap(p, s) -> float:
    p = np.asarray(p, dtype=float)
    s = np.asarray(s)
    in0, in1 = s == 0, s == 1
    if not in0.any() or not in1.any():
        raise MarketError("group price gap is undefined when a protected group is empty")
    return float(abs(p[in0].mean() - p[in1].mean()))


def metrics(graph: Graph, table: NodeTable, market: Market, p, eval_mask=None) -> MetricsReport:
    """Average profit, realized price difference, perception, and group gap.

    Delta uses every neighbor in ``graph``; averages run over ``eval_mask``
    (all nodes when omitted).
    """
    p = np.asarray(p, dtype=float)
    mask = np.ones(graph.n, dtype=bool) if eval_mask is None else np.asarray(eval_mask, dtype=bool)
    g = market.demand.wtp_param(table.X, table.s)
    delta = price_difference(graph, p)
    eta = perception(delta, market.perception)
    d_bar = adjusted_demand(base_demand(market.demand.family, g, p), eta)
    profit = (p - market.config.cost) * d_bar
    s = table.s[mask]
    pm = p[mask]
    return MetricsReport(
        pi_avg=float(profit[mask].mean()),
        p_diff=group_price_gap(pm, s),
        delta_avg=float(delta[mask].mean()),
        eta_avg=float(eta[mask].mean()),
        mean_price_0=float(pm[s == 0].mean()),
        mean_price_1=float(pm[s == 1].mean()),
        n_0=int((s == 0).sum()),
        n_1=int((s == 1).sum()),
    )


def uniform_price_grid(p_max: float, step: float) -> np.ndarray:
    if not step > 0:
        raise MarketError(f"grid step must be positive, got {step}")
    k = int(np.floor(p_max / step + 1e-9))
    return step * np.arange(k + 1)


def optimal_uniform_price(table: NodeTable, market: Market, grid_step: float = 0.1) -> tuple[float, float]:
    """Best single price on the grid {0, step, ..., p_max}; returns (price, average profit).

    Uniform prices make every Delta zero, so adjusted demand equals base demand
    and the graph does not enter. Ties go to the lower price.
    """
    grid = uniform_price_grid(market.config.p_max, grid_step)
    g = market.demand.wtp_param(table.X, table.s)
    profits = np.empty(grid.size)
    for k, price in enumerate(grid):
        d = base_demand(market.demand.family, g, np.full(g.shape, price))
        profits[k] = ((price - market.config.cost) * d).mean()
    best = int(np.argmax(profits))  # first maximum = lowest price
    return float(grid[best]), float(profits[best])
