import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairprice.diffengine import ParamStore, Tape, backward, grad_check
from fairprice.graphcore import FeatureSpec, NodeTable, SbmConfig, build_graph, sbm_generate
from fairprice.market import DemandModel, Market, MarketConfig, MarketError, PerceptionParams, metrics
from fairprice.policy import EncoderConfig, Policy
from fairprice.training import (
    Adversary, Candidate, NoFeasibleCandidate, TrainConfig, TrainingError, game_value, jsd_diagnostic, loss_adv,
    loss_profit, loss_reg, probe_adversary, select_candidate, train, write_log, LOG_COLUMNS,
)

PERC = PerceptionParams(0.1, 0.2)


def _linear_market(g=100.0, cost=20.0):
    return Market(DemandModel("linear", (0.0,), intercept=g), PERC, MarketConfig(cost, 400.0))


def _const(values):
    store = ParamStore()
    store.add("p", np.asarray(values, dtype=float).reshape(-1, 1), "policy")
    return store


def test_profit_loss_zero_margin():
    g = build_graph([(0, 1)], 2)
    table = NodeTable(np.zeros((2, 1)), np.array([0, 1]))
    t = Tape()
    assert loss_profit(t, t.constant([[20.0], [20.0]]), g, table, _linear_market()).value[0, 0] == 0.0


def test_profit_loss_single_isolated_customer():
    table = NodeTable(np.zeros((1, 1)), np.array([0]))
    t = Tape()
    val = loss_profit(t, t.constant([[60.0]]), build_graph([], 1), table, _linear_market()).value[0, 0]
    assert val == pytest.approx(-16.0)


def test_profit_loss_gradient_two_nodes():
    g = build_graph([(0, 1)], 2)
    table = NodeTable(np.zeros((2, 1)), np.array([0, 1]))
    store = _const([55.0, 70.0])
    report = grad_check(store, lambda t, s: loss_profit(t, t.param(s, "p"), g, table, _linear_market()))
    assert report.worst < 1e-4


def test_profit_loss_matches_metrics():
    graph, table = sbm_generate(SbmConfig((15, 15), 0.3, 0.1), FeatureSpec(means=((0.0, 1.0), (1.0, 0.0))), 0)
    market = Market(DemandModel("linear", (20.0, 10.0), s_weight=5.0, intercept=90.0), PERC, MarketConfig(20.0, 400.0))
    p = np.random.default_rng(0).uniform(20, 120, 30)
    t = Tape()
    assert -loss_profit(t, t.constant(p), graph, table, market).value[0, 0] == pytest.approx(
        metrics(graph, table, market, p).pi_avg, rel=1e-12)


def test_profit_loss_empty_mask():
    t = Tape()
    with pytest.raises(TrainingError, match="empty"):
        loss_profit(t, t.constant([[1.0]]), build_graph([], 1), NodeTable(np.zeros((1, 1)), np.array([0])),
                    _linear_market(), mask=np.array([False]))


def test_reg_loss_value_and_gradient():
    store = _const([10.0, 12.0, 12.0])
    s = np.array([0, 1, 1])
    t = Tape()
    loss = loss_reg(t, t.param(store, "p"), s)
    assert loss.value[0, 0] == 2.0
    backward(t, loss)
    assert np.allclose(store.grads["p"][:, 0], [-1.0, 0.5, 0.5])
    t = Tape()
    assert loss_reg(t, t.constant([[4.0], [4.0]]), np.array([0, 1])).value[0, 0] == 0.0
    with pytest.raises(MarketError):
        loss_reg(Tape(), Tape().constant([[1.0], [2.0]]), np.array([0, 0]))


def test_adversary_loss_examples():
    s = np.array([0, 1, 1, 0])
    t = Tape()
    assert loss_adv(t, t.constant(np.full((4, 1), 0.5)), s).value[0, 0] == pytest.approx(math.log(2))
    assert loss_adv(t, t.constant(s[:, None].astype(float)), s).value[0, 0] == pytest.approx(0.0, abs=1e-6)
    worst = loss_adv(t, t.constant(1.0 - s[:, None]), s).value[0, 0]
    assert np.isfinite(worst) and worst == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_selection_example():
    pool = [Candidate(5, 10.0, 0.6), Candidate(10, 9.0, 0.3), Candidate(15, 8.0, 0.2)]
    assert select_candidate(pool, 0.5) == 1


def test_selection_ties_go_to_earliest():
    pool = [Candidate(5, 9.0, 0.1), Candidate(10, 9.0, 0.2)]
    assert select_candidate(pool, 0.5) == 0


def test_no_feasible_candidate_carries_lowest_gap():
    pool = [Candidate(5, 10.0, 0.9), Candidate(10, 9.0, 0.7)]
    with pytest.raises(NoFeasibleCandidate) as err:
        select_candidate(pool, 0.5)
    assert err.value.best.epoch == 10 and "0.7000" in str(err.value)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 2)), min_size=1, max_size=40), st.floats(0, 2))
@settings(max_examples=200, deadline=None)
def test_selection_is_exhaustive_argmax(pairs, tau):
    pool = [Candidate(5 * (k + 1), pi, gap) for k, (pi, gap) in enumerate(pairs)]
    feasible = [c for c in pool if c.p_diff <= tau]
    if not feasible:
        with pytest.raises(NoFeasibleCandidate):
            select_candidate(pool, tau)
        return
    chosen = pool[select_candidate(pool, tau)]
    assert chosen.p_diff <= tau
    assert chosen.pi_avg == max(c.pi_avg for c in feasible)


def test_min_pdiff_rule():
    pool = [Candidate(5, 10.0, 3.0), Candidate(10, 9.6, 1.0), Candidate(15, 9.0, 0.1)]
    assert select_candidate(pool, 0.5, "min_pdiff") == 1  # floor 9.5
    assert select_candidate(pool, 0.5, "min_pdiff", profit_floor=8.0) == 2
    assert select_candidate(pool, 0.5, "min_pdiff", profit_floor=20.0) == 0


def test_jsd_examples():
    s = np.repeat([0, 1], 50)
    assert game_value(np.full(100, 0.5), s) == pytest.approx(-2 * math.log(2))
    assert jsd_diagnostic(-2 * math.log(2)) == pytest.approx(0.0, abs=1e-15)
    assert jsd_diagnostic(0.0) == pytest.approx(math.log(2))


def test_probe_identical_distributions_near_zero_jsd():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(2000, 4))
    s = rng.integers(0, 2, 2000)
    res = probe_adversary(H, s)
    assert abs(res.accuracy - 0.5) < 0.05
    assert res.jsd < 0.01
    assert res.value == pytest.approx(-math.log(4), abs=0.02)


def test_probe_separable_reaches_log2():
    s = np.repeat([0, 1], 200)
    H = np.column_stack([s * 10.0 - 5.0, np.random.default_rng(1).normal(size=400)])
    res = probe_adversary(H, s, l2=1e-6)
    assert res.accuracy == 1.0
    assert res.jsd == pytest.approx(math.log(2), abs=0.01)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(selection="best")
    with pytest.raises(ValueError):
        TrainConfig(adv_steps=0)


def _single_customer_run(family, epochs=1500):
    table = NodeTable(np.zeros((1, 1)), np.array([0]))
    if family == "linear":
        demand = DemandModel("linear", (0.0,), intercept=100.0)
    else:
        demand = DemandModel("exponential", (0.0,), a=0.005, b=0.01)  # g = 0.01 at t = 0
    market = Market(demand, PERC, MarketConfig(20.0, 400.0))
    policy = Policy(EncoderConfig("mlp", 1, hidden_dim=4, output_dim=4, dropout=0.0), 400.0, seed=0)
    # start at p = 40: above the wtp ceiling linear demand is flat at zero and so is the gradient
    policy.store.params["head.b"][...] = math.log(40.0 / 360.0)
    cfg = TrainConfig(lam=0, phi=0, adversarial=False, lr=0.02, weight_decay=0, max_epochs=epochs,
                      tau=math.inf, track_jsd=False)
    res = train(policy, None, build_graph([], 1), table, market, cfg)
    return policy.assign_prices(table.X, build_graph([], 1))[0], res


def test_single_customer_converges_to_linear_optimum():
    price, res = _single_customer_run("linear")
    assert abs(price - 60.0) < 1.0
    assert res.selected.pi_avg == pytest.approx(16.0, abs=0.01)


def test_single_customer_converges_to_exponential_optimum():
    price, _ = _single_customer_run("exponential")
    assert abs(price - 120.0) < 1.0


def _small_problem(seed=0):
    graph, table = sbm_generate(SbmConfig((20, 20), 0.3, 0.05),
                                FeatureSpec(means=((0, 0, 0), (1, 0.5, 0)), std=0.5), seed)
    market = Market(DemandModel("linear", (20.0, 10.0, -5.0), s_weight=30.0, intercept=100.0), PERC,
                    MarketConfig(20.0, 400.0))
    return graph, table, market


def _fit(seed, **kw):
    graph, table, market = _small_problem()
    store = ParamStore()
    policy = Policy(EncoderConfig("gcn", 3, hidden_dim=8, output_dim=8), 400.0, store, seed=seed)
    adversary = Adversary(8, store, seed=seed + 1)
    cfg = TrainConfig(**{"lam": 0.5, "phi": 0.1, "tau": 50.0, "max_epochs": 30, "seed": seed, **kw})
    return train(policy, adversary, graph, table, market, cfg), graph, table


def test_training_is_reproducible(tmp_path):
    a, graph, table = _fit(3)
    b, _, _ = _fit(3)
    assert a.selected.epoch == b.selected.epoch
    assert np.array_equal(a.policy.assign_prices(table.X, graph), b.policy.assign_prices(table.X, graph))
    write_log(a.log, tmp_path / "a.csv")
    write_log(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    a.policy.save(tmp_path / "a.json")
    b.policy.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_training_log_and_candidates():
    res, _, _ = _fit(0, max_epochs=12, eval_every=5)
    assert [row["epoch"] for row in res.log] == list(range(1, 13))
    assert [c.epoch for c in res.candidates] == [5, 10, 12]
    assert set(res.log[0]) == set(LOG_COLUMNS)
    assert np.isfinite(res.log[4]["jsd_estimate"]) and math.isnan(res.log[0]["jsd_estimate"])
    assert sum(c.state is not None for c in res.candidates) == 1


def test_selected_candidate_respects_tau():
    res, _, _ = _fit(1, tau=50.0)
    assert res.selected.p_diff <= 50.0
    feasible = [c.pi_avg for c in res.candidates if c.p_diff <= 50.0]
    assert res.selected.pi_avg == max(feasible)


def test_infeasible_training_reports_log():
    with pytest.raises(NoFeasibleCandidate) as err:
        _fit(0, tau=0.0, max_epochs=10)
    assert err.value.log is not None and len(err.value.log) == 10


def test_policy_step_leaves_adversary_alone_when_phi_zero():
    graph, table, market = _small_problem()
    store = ParamStore()
    policy = Policy(EncoderConfig("mlp", 3, hidden_dim=4, output_dim=4), 400.0, store)
    adversary = Adversary(4, store, seed=1)
    before = store.snapshot("adversary")
    train(policy, adversary, graph, table, market, TrainConfig(phi=0.0, adversarial=False, tau=1e9, max_epochs=5))
    after = store.snapshot("adversary")
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_adversarial_training_needs_adversary():
    graph, table, market = _small_problem()
    policy = Policy(EncoderConfig("mlp", 3, hidden_dim=4, output_dim=4), 400.0)
    with pytest.raises(TrainingError):
        train(policy, None, graph, table, market, TrainConfig(max_epochs=2))
