"""Losses, the linear adversary, alternating minimax training, and model selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .diffengine import ParamStore, Tape, Tensor, adam_step, backward, sigmoid
from .graphcore import Graph, NodeTable, induced_subgraph
from .market import (
    EXPONENTIAL, LINEAR, Market, MarketError, adjusted_demand, base_demand, metrics, perception, price_difference,
)
from .policy import POLICY_GROUP, Policy

ADVERSARY_GROUP = "adversary"
BCE_EPS = 1e-7
LOG_COLUMNS = (
    "epoch", "loss_profit", "loss_reg", "loss_adv", "loss_total",
    "sel_pi_avg", "sel_p_diff", "jsd_estimate",
)


class TrainingError(RuntimeError):
    pass


class NoFeasibleCandidate(TrainingError):
    """No checkpoint met the group-fairness threshold; carries the lowest-gap one."""

    def __init__(self, tau: float, best: "Candidate | None", candidates: list["Candidate"], log=None):
        gap = f"{best.p_diff:.4f}" if best is not None else "n/a"
        super().__init__(f"no feasible candidate: lowest p_diff {gap} exceeds tau={tau}")
        self.tau = tau
        self.best = best
        self.candidates = candidates
        self.log = log


class Adversary:
    """Linear classifier s_hat = sigmoid(H w + b) in parameter group ``adversary``."""

    def __init__(self, dim: int, store: ParamStore, seed: int = 0):
        self.store = store
        rng = np.random.default_rng(seed)
        store.add_glorot("adv.w", (dim, 1), ADVERSARY_GROUP, rng)
        store.add("adv.b", np.zeros((1, 1)), ADVERSARY_GROUP)

    def predict(self, tape: Tape, H: Tensor) -> Tensor:
        z = tape.add_bias(tape.matmul(H, tape.param(self.store, "adv.w")), tape.param(self.store, "adv.b"))
        return tape.sigmoid(z)


def _mask(mask, n) -> np.ndarray:
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise TrainingError(f"mask length {mask.shape} does not match {n} nodes")
    if not mask.any():
        raise TrainingError("empty training mask")
    return mask


def loss_profit(tape: Tape, p: Tensor, graph: Graph, table: NodeTable, market: Market, mask=None) -> Tensor:
    """Negative mean unfairness-adjusted profit over ``mask``.

    Delta references all neighbors in ``graph``. The perception branch
    (alpha at Delta <= 0, beta above) is a constant selector with no gradient.
    """
    mask = _mask(mask, graph.n)
    cost = market.config.cost
    params = market.perception
    g = market.demand.wtp_param(table.X, table.s)[:, None]

    ref = tape.sparse_matmul(graph.mean_operator, p)
    delta = tape.mul_const(tape.sub(p, ref), (graph.degree > 0)[:, None])
    k = np.where(delta.value <= 0, params.alpha, params.beta)
    eta = tape.tanh_act(tape.mul_const(delta, k))

    if market.demand.family == LINEAR:
        pos = g > 0
        inv_g = np.where(pos, 1.0 / np.where(pos, g, 1.0), 0.0)
        d = tape.mul_const(tape.relu(tape.add_const(tape.mul_const(p, -inv_g), 1.0)), pos)
    elif market.demand.family == EXPONENTIAL:
        d = tape.exp(tape.mul_const(p, -g))
    else:
        raise MarketError(f"unknown demand family {market.demand.family!r}")

    profit = tape.mul(tape.mul(tape.add_const(p, -cost), tape.add_const(tape.scale(eta, -1.0), 1.0)), d)
    return tape.scale(tape.weighted_sum(profit, mask / mask.sum()), -1.0)


def group_weights(s, mask=None) -> np.ndarray:
    """Weights w with w.p = mean(p | s=0) - mean(p | s=1) over ``mask``."""
    s = np.asarray(s)
    mask = _mask(mask, s.shape[0])
    in0, in1 = mask & (s == 0), mask & (s == 1)
    if not in0.any() or not in1.any():
        raise MarketError("group regularizer is undefined when a protected group is empty")
    return (in0 / in0.sum() - in1 / in1.sum())[:, None]


def loss_reg(tape: Tape, p: Tensor, s, mask=None) -> Tensor:
    """|mean price of group 0 - mean price of group 1|, subgradient 0 at equality."""
    return tape.abs_act(tape.weighted_sum(p, group_weights(s, mask)))


def loss_adv(tape: Tape, s_hat: Tensor, s, mask=None, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of the adversary, with s_hat clamped to [eps, 1 - eps]."""
    s = np.asarray(s, dtype=float)
    mask = _mask(mask, s.shape[0])
    w = mask / mask.sum()
    q = tape.clip(s_hat, eps, 1.0 - eps)
    pos = tape.weighted_sum(tape.log(q), (w * s)[:, None])
    neg = tape.weighted_sum(tape.log(tape.add_const(tape.scale(q, -1.0), 1.0)), (w * (1.0 - s))[:, None])
    return tape.scale(tape.add(pos, neg), -1.0)


@dataclass
class TrainConfig:
    lam: float = 0.1
    phi: float = 0.01
    tau: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 5e-4
    adv_lr: float | None = None
    adv_weight_decay: float | None = None
    adv_steps: int = 1
    max_epochs: int = 400
    eval_every: int = 5
    seed: int = 0
    adversarial: bool = True
    selection: str = "tau"
    profit_floor: float | None = None
    profit_slack: float = 0.05
    track_jsd: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.phi < 0 or self.tau < 0:
            raise ValueError("lam, phi and tau must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1 or self.eval_every < 1 or self.adv_steps < 1:
            raise ValueError("max_epochs, eval_every and adv_steps must be >= 1")
        if not 0.0 <= self.profit_slack < 1.0:
            raise ValueError("profit_slack must be in [0, 1)")
        if self.selection not in ("tau", "min_pdiff"):
            raise ValueError(f"selection must be 'tau' or 'min_pdiff', got {self.selection!r}")


@dataclass
class Candidate:
    epoch: int
    pi_avg: float
    p_diff: float
    state: dict[str, np.ndarray] | None = field(default=None, repr=False)


def select_candidate(
    candidates: list[Candidate],
    tau: float,
    rule: str = "tau",
    profit_floor: float | None = None,
    profit_slack: float = 0.05,
) -> int:
    """Index of the selected candidate.

    ``tau``: highest pi_avg among candidates with p_diff <= tau (earliest on
    ties); raises :class:`NoFeasibleCandidate` when none qualify.
    ``min_pdiff``: lowest p_diff among candidates with pi_avg >= profit_floor,
    falling back to the highest pi_avg when none reach the floor. Without an
    explicit floor the pool's best pi_avg less ``profit_slack`` of its
    magnitude is used.
    """
    if not candidates:
        raise NoFeasibleCandidate(tau, None, [])
    if rule == "tau":
        feasible = [i for i, c in enumerate(candidates) if c.p_diff <= tau]
        if not feasible:
            best = min(candidates, key=lambda c: c.p_diff)
            raise NoFeasibleCandidate(tau, best, candidates)
        return max(feasible, key=lambda i: (candidates[i].pi_avg, -i))
    if rule == "min_pdiff":
        if profit_floor is None:
            top = max(c.pi_avg for c in candidates)
            floor = top - profit_slack * abs(top)
        else:
            floor = profit_floor
        ok = [i for i, c in enumerate(candidates) if c.pi_avg >= floor]
        if not ok:
            return max(range(len(candidates)), key=lambda i: (candidates[i].pi_avg, -i))
        return min(ok, key=lambda i: (candidates[i].p_diff, i))
    raise ValueError(f"unknown selection rule {rule!r}")


@dataclass
class TrainResult:
    policy: Policy
    selected: Candidate
    candidates: list[Candidate]
    log: list[dict]

    def write_log(self, path) -> None:
        write_log(self.log, path)


def write_log(log: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in LOG_COLUMNS})


def train(
    policy: Policy,
    adversary: Adversary | None,
    graph: Graph,
    table: NodeTable,
    market: Market,
    cfg: TrainConfig,
    train_mask=None,
    select_mask=None,
) -> TrainResult:
    """Alternating minimax training with checkpoint selection.

    Each epoch first takes an Adam step on the policy against
    L_profit + lam L_reg - phi L_adv (adversary fixed), then an Adam step on
    the adversary minimizing L_adv on freshly recomputed representations.
    The policy trains on the subgraph induced by ``train_mask``; every
    ``eval_every`` epochs it is scored in eval mode on the subgraph induced by
    ``select_mask``. ``policy`` is left holding the selected parameters.
    """
    train_mask = _mask(train_mask, graph.n)
    select_mask = _mask(select_mask, graph.n)
    if cfg.adversarial and adversary is None:
        raise TrainingError("adversarial training needs an adversary")
    use_adv = cfg.adversarial and adversary is not None

    g_tr, _ = induced_subgraph(graph, train_mask)
    t_tr = table.subset(train_mask)
    g_sel, _ = induced_subgraph(graph, select_mask)
    t_sel = table.subset(select_mask)
    both_groups = bool((t_tr.s == 0).any() and (t_tr.s == 1).any())
    if cfg.lam > 0 and not both_groups:
        raise TrainingError("price regularization needs both protected groups in the training set")

    policy_rng, adv_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    store = policy.store
    adv_lr = cfg.adv_lr if cfg.adv_lr is not None else cfg.lr
    adv_wd = cfg.adv_weight_decay if cfg.adv_weight_decay is not None else cfg.weight_decay
    reg_w = group_weights(t_tr.s) if both_groups else None

    log: list[dict] = []
    candidates: list[Candidate] = []
    for epoch in range(1, cfg.max_epochs + 1):
        tape = Tape(training=True, rng=policy_rng)
        H = policy.encode(tape, t_tr.X, g_tr)
        p = policy.price_head(tape, H)
        lp = loss_profit(tape, p, g_tr, t_tr, market)
        total = lp
        lr_val = float(abs(reg_w[:, 0] @ p.value[:, 0])) if reg_w is not None else math.nan
        if cfg.lam > 0:
            total = tape.add(total, tape.scale(loss_reg(tape, p, t_tr.s), cfg.lam))
        la_val = math.nan
        if use_adv:
            la = loss_adv(tape, adversary.predict(tape, H), t_tr.s)
            la_val = float(la.value[0, 0])
            total = tape.sub(total, tape.scale(la, cfg.phi))
        backward(tape, total)
        adam_step(store, POLICY_GROUP, cfg.lr, cfg.weight_decay)
        if use_adv:
            H_now = policy.encode(Tape(training=True, rng=adv_rng), t_tr.X, g_tr).value
            for _ in range(cfg.adv_steps):
                store.zero_grad(ADVERSARY_GROUP)
                adv_tape = Tape()
                la2 = loss_adv(adv_tape, adversary.predict(adv_tape, adv_tape.constant(H_now)), t_tr.s)
                backward(adv_tape, la2)
                adam_step(store, ADVERSARY_GROUP, adv_lr, adv_wd)

        row = {
            "epoch": epoch,
            "loss_profit": float(lp.value[0, 0]),
            "loss_reg": lr_val,
            "loss_adv": la_val,
            "loss_total": float(total.value[0, 0]),
            "sel_pi_avg": math.nan,
            "sel_p_diff": math.nan,
            "jsd_estimate": math.nan,
        }
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            prices = policy.assign_prices(t_sel.X, g_sel)
            rep = metrics(g_sel, t_sel, market, prices) if _has_both(t_sel.s) else None
            pi = rep.pi_avg if rep else _profit_only(g_sel, t_sel, market, prices)
            gap = rep.p_diff if rep else 0.0
            candidates.append(Candidate(epoch, pi, gap, policy.state()))
            row["sel_pi_avg"], row["sel_p_diff"] = pi, gap
            if cfg.track_jsd and both_groups:
                H_eval = policy.representations(t_tr.X, g_tr)
                row["jsd_estimate"] = probe_adversary(H_eval, t_tr.s).jsd
        log.append(row)

    try:
        idx = select_candidate(candidates, cfg.tau, cfg.selection, cfg.profit_floor, cfg.profit_slack)
    except NoFeasibleCandidate as exc:
        exc.log = log
        raise
    selected = candidates[idx]
    policy.load_state(selected.state)
    for c in candidates:
        if c is not selected:
            c.state = None
    return TrainResult(policy, selected, candidates, log)


def _has_both(s) -> bool:
    return bool((s == 0).any() and (s == 1).any())


def _profit_only(graph, table, market, prices) -> float:
    g = market.demand.wtp_param(table.X, table.s)
    eta = perception(price_difference(graph, prices), market.perception)
    return float(((prices - market.config.cost) * adjusted_demand(base_demand(market.demand.family, g, prices), eta)).mean())


@dataclass
class ProbeResult:
    accuracy: float
    value: float
    jsd: float


def jsd_diagnostic(value: float) -> float:
    """JSD implied by the optimal-adversary game value: (V + log 4) / 2, floored at 0."""
    return max(0.0, (value + math.log(4.0)) / 2.0)


def game_value(prob, s) -> float:
    """Empirical E[log q | s=1] + E[log(1 - q) | s=0]."""
    q = np.clip(np.asarray(prob, dtype=float), BCE_EPS, 1.0 - BCE_EPS)
    s = np.asarray(s)
    return float(np.log(q[s == 1]).mean() + np.log(1.0 - q[s == 0]).mean())


def fit_probe(H, s, l2: float = 1e-2) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Fresh linear probe maximizing the group-balanced game value on (H, s).

    Features are standardized with the fit-set statistics. Returns
    (weights, bias, mean, scale).
    """
    H = np.asarray(H, dtype=float)
    s = np.asarray(s)
    mu = H.mean(axis=0)
    sd = H.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (H - mu) / sd
    w1 = (s == 1) / max((s == 1).sum(), 1)
    w0 = (s == 0) / max((s == 0).sum(), 1)

    def objective(theta):
        w, b = theta[:-1], theta[-1]
        z = Z @ w + b
        # -log sigmoid(z) = logaddexp(0, -z)
        loss = w1 @ np.logaddexp(0.0, -z) + w0 @ np.logaddexp(0.0, z) + l2 * (w @ w)
        q = sigmoid(z)
        r = -w1 * (1.0 - q) + w0 * q
        grad = np.concatenate([Z.T @ r + 2.0 * l2 * w, [r.sum()]])
        return loss, grad

    res = minimize(objective, np.zeros(Z.shape[1] + 1), jac=True, method="L-BFGS-B")
    return res.x[:-1], float(res.x[-1]), mu, sd


def probe_adversary(H, s, fit_idx=None, eval_idx=None, l2: float = 1e-2) -> ProbeResult:
    """Train a fresh probe on ``fit_idx`` rows and score it on ``eval_idx`` rows.

    Defaults split rows alternately (even rows fit, odd rows evaluate).
    """
    H = np.asarray(H, dtype=float)
    s = np.asarray(s)
    n = H.shape[0]
    if fit_idx is None:
        fit_idx = np.arange(0, n, 2)
    if eval_idx is None:
        eval_idx = np.arange(1, n, 2)
    w, b, mu, sd = fit_probe(H[fit_idx], s[fit_idx], l2)
    q = sigmoid(((H[eval_idx] - mu) / sd) @ w + b)
    s_eval = s[eval_idx]
    acc = float(((q >= 0.5).astype(int) == s_eval).mean())
    if not _has_both(s_eval):
        return ProbeResult(acc, math.nan, math.nan)
    v = game_value(q, s_eval)
    return ProbeResult(acc, v, jsd_diagnostic(v))
