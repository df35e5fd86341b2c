"""Finite-difference checks for every tape op and the end-to-end policy/loss compositions."""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from .diffengine import GradCheckReport, ParamStore, Tape, Tensor, grad_check
from .graphcore import FeatureSpec, SbmConfig, sbm_generate
from .market import DemandModel, Market, MarketConfig, PerceptionParams
from .policy import ARCHITECTURES, EncoderConfig, Policy
from .training import Adversary, loss_adv, loss_profit, loss_reg

Builder = Callable[[Tape, ParamStore], Tensor]


def _away_from_zero(rng, shape, low=0.2):
    """Entries with |x| >= low, so kinks at 0 stay outside the FD stencil."""
    x = rng.uniform(low, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _reduce(tape: Tape, x: Tensor, wseed: int) -> Tensor:
    """Scalar w . vec(x) with fixed random weights, so every entry's gradient differs."""
    w = np.random.default_rng(wseed).normal(size=x.shape)
    col = tape.matmul(tape.mul(x, tape.constant(w)), tape.constant(np.ones((x.shape[1], 1))))
    return tape.sum_all(col)


def op_cases(seed: int = 0) -> dict[str, tuple[ParamStore, Builder, bool]]:
    """name -> (store, builder, training) for each primitive op."""
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[ParamStore, Builder, bool]] = {}

    def case(name, shapes: dict, fn, training=False, init=None):
        store = ParamStore()
        for pname, shape in shapes.items():
            value = init(pname, shape) if init else rng.normal(size=shape)
            store.add(pname, value, "op")
        wseed = int(rng.integers(1 << 31))

        def builder(tape, st):
            args = {k: tape.param(st, k) for k in shapes}
            return _reduce(tape, fn(tape, **args), wseed)

        cases[name] = (store, builder, training)

    A = sp.random(6, 5, density=0.5, random_state=np.random.RandomState(seed), format="csr")
    pattern = sp.random(6, 6, density=0.4, random_state=np.random.RandomState(seed + 1), format="csr") + sp.eye(6)
    pattern = sp.csr_matrix(pattern)
    pattern.sort_indices()
    idx = rng.integers(0, 5, size=9)

    case("matmul", {"a": (4, 3), "b": (3, 2)}, lambda t, a, b: t.matmul(a, b))
    case("sparse_matmul", {"x": (5, 3)}, lambda t, x: t.sparse_matmul(A, x))
    case("sparse_matmul_weighted", {"x": (5, 3), "v": (A.nnz, 1)}, lambda t, x, v: t.sparse_matmul(A, x, values=v))
    case("add_bias", {"x": (4, 3), "b": (1, 3)}, lambda t, x, b: t.add_bias(x, b))
    case("concat_cols", {"a": (4, 2), "b": (4, 3)}, lambda t, a, b: t.concat_cols([a, b]))
    case("gather_rows", {"x": (5, 3)}, lambda t, x: t.gather_rows(x, idx))
    case("add", {"a": (3, 2), "b": (3, 2)}, lambda t, a, b: t.add(a, b))
    case("sub", {"a": (3, 2), "b": (3, 2)}, lambda t, a, b: t.sub(a, b))
    case("mul", {"a": (3, 2), "b": (3, 2)}, lambda t, a, b: t.mul(a, b))
    case("scale", {"a": (3, 2)}, lambda t, a: t.scale(a, -2.5))
    case("mul_const", {"a": (3, 2)}, lambda t, a: t.mul_const(a, np.arange(6.0).reshape(3, 2)))
    case("add_const", {"a": (3, 2)}, lambda t, a: t.add_const(a, 3.0))
    case("sigmoid", {"a": (4, 3)}, lambda t, a: t.sigmoid(a))
    case("tanh_act", {"a": (4, 3)}, lambda t, a: t.tanh_act(a))
    case("relu", {"a": (4, 3)}, lambda t, a: t.relu(a), init=lambda n, s: _away_from_zero(rng, s))
    case("leaky_relu", {"a": (4, 3)}, lambda t, a: t.leaky_relu(a, 0.05), init=lambda n, s: _away_from_zero(rng, s))
    case("exp", {"a": (4, 3)}, lambda t, a: t.exp(a))
    case("log", {"a": (4, 3)}, lambda t, a: t.log(a), init=lambda n, s: rng.uniform(0.5, 2.0, size=s))
    case("abs_act", {"a": (4, 3)}, lambda t, a: t.abs_act(a), init=lambda n, s: _away_from_zero(rng, s))
    case("clip", {"a": (4, 3)}, lambda t, a: t.clip(a, -0.5, 0.5),
         init=lambda n, s: rng.choice([-1.0, -0.2, 0.1, 0.3, 1.2], size=s) + rng.uniform(-0.05, 0.05, size=s))
    case("dropout", {"a": (6, 5)}, lambda t, a: t.dropout(a, 0.3), training=True)
    case("row_softmax_masked", {"e": (pattern.nnz, 1)}, lambda t, e: t.row_softmax_masked(pattern, e))
    case("sum_all", {"a": (3, 2)}, lambda t, a: t.mul(t.sum_all(a), t.sum_all(a)))
    case("mean_all", {"a": (3, 2)}, lambda t, a: t.mul(t.mean_all(a), t.mean_all(a)))
    case("weighted_sum", {"a": (5, 1)}, lambda t, a: t.mul(t.weighted_sum(a, np.arange(5.0)[:, None]), t.weighted_sum(a, np.ones((5, 1)))))
    return cases


def _small_market(family: str) -> Market:
    if family == "linear":
        demand = DemandModel("linear", (20.0, -10.0, 5.0), s_weight=15.0, intercept=90.0)
    else:
        demand = DemandModel("exponential", (0.5, -0.3, 0.2), s_weight=0.4, a=0.008, b=0.022)
    return Market(demand, PerceptionParams(0.1, 0.2), MarketConfig(20.0, 150.0))


def composition_cases(seed: int = 0) -> dict[str, tuple[ParamStore, Builder, bool]]:
    """End-to-end checks: each encoder through the pricing head into the full objective."""
    graph, table = sbm_generate(SbmConfig((7, 7), 0.5, 0.15), FeatureSpec(means=((0, 0, 0), (1, 0.5, 0))), seed)
    cases: dict[str, tuple[ParamStore, Builder, bool]] = {}
    for arch in ARCHITECTURES:
        for family in ("linear", "exponential"):
            market = _small_market(family)
            store = ParamStore()
            enc = EncoderConfig(arch, 3, hidden_dim=4, output_dim=3, heads=2, dropout=0.2)
            policy = Policy(enc, market.config.p_max, store, seed=seed + 1)
            adversary = Adversary(3, store, seed=seed + 2)

            def builder(tape, st, policy=policy, adversary=adversary, market=market):
                H = policy.encode(tape, table.X, graph)
                p = policy.price_head(tape, H)
                total = tape.add(loss_profit(tape, p, graph, table, market), tape.scale(loss_reg(tape, p, table.s), 0.3))
                return tape.sub(total, tape.scale(loss_adv(tape, adversary.predict(tape, H), table.s), 0.7))

            cases[f"{arch}+objective[{family}]"] = (store, builder, True)
    return cases


def run_suite(tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0) -> dict[str, GradCheckReport]:
    reports = {}
    for name, (store, builder, training) in {**op_cases(seed), **composition_cases(seed)}.items():
        reports[name] = grad_check(store, builder, tolerance=tolerance, h=h, training=training, seed=seed)
    return reports
