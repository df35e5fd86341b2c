"""Experimental protocol: splits, main comparison, generalization, ablation, sweeps, degree deciles.

Every cell (method x seed x grid point) is an independent job keyed by its
seed; a cell's numbers depend only on (setup, cell key), never on which
worker ran it or in what order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .diffengine import ParamStore
from .graphcore import Graph, NodeTable, induced_subgraph
from .market import Market, MetricsReport, metrics, optimal_uniform_price
from .policy import ARCHITECTURES, EncoderConfig, Policy
from .training import Adversary, NoFeasibleCandidate, TrainConfig, TrainResult, probe_adversary, train

UNIFORM = "uniform"
METHODS = (UNIFORM,) + ARCHITECTURES
METRICS = ("pi_avg", "p_diff", "delta_avg", "eta_avg")

OK, INFEASIBLE, FAILED = "ok", "infeasible", "error"


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ExperimentError("split ratios must be positive")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ExperimentError(f"split ratios must sum to 1, got {self.train + self.val + self.test}")


def split_nodes(n: int, spec: SplitSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random disjoint train/val/test masks; rounding residue goes to train."""
    if n < 3:
        raise ExperimentError(f"need at least 3 nodes to split, got {n}")
    n_val = int(math.floor(n * spec.val + 1e-9))
    n_test = int(math.floor(n * spec.test + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise ExperimentError(f"split of {n} nodes by {spec} leaves an empty mask")
    perm = np.random.default_rng(seed).permutation(n)
    masks = []
    for idx in (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]):
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        masks.append(m)
    return masks[0], masks[1], masks[2]


@dataclass(frozen=True)
class Dataset:
    graph: Graph
    table: NodeTable
    name: str = "dataset"


@dataclass(frozen=True)
class Setup:
    """Everything a cell needs besides its own key.

    ``overrides`` maps a method name to TrainConfig field overrides, so
    e.g. GCN and MLP can carry their own lam/phi.
    """

    dataset: Dataset
    market: Market
    encoder: EncoderConfig
    train: TrainConfig
    split: SplitSpec = SplitSpec()
    grid_step: float = 0.1
    overrides: dict = field(default_factory=dict)

    def train_config(self, method: str, seed: int, **extra) -> TrainConfig:
        fields = dict(self.overrides.get(method, {}))
        fields.update(extra)
        return replace(self.train, seed=seed, **fields)

    def encoder_config(self, architecture: str) -> EncoderConfig:
        return replace(self.encoder, architecture=architecture, input_dim=self.dataset.table.X.shape[1])


@dataclass
class CellResult:
    key: dict
    status: str
    metrics: dict = field(default_factory=dict)
    selected_epoch: int | None = None
    message: str = ""

    def as_row(self) -> dict:
        row = dict(self.key)
        row.update(status=self.status, selected_epoch=self.selected_epoch, message=self.message)
        row.update(self.metrics)
        return row


def mean_stderr(values) -> tuple[float, float]:
    """Mean and sample-std / sqrt(k); stderr is nan for a single value."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def format_cell(mean: float, stderr: float, digits: int = 4) -> str:
    if math.isnan(mean):
        return "n/a"
    se = "-" if math.isnan(stderr) else f"{stderr:.{digits}f}"
    return f"{mean:.{digits}f} ({se})"


@dataclass
class ExperimentResult:
    name: str
    cells: list[CellResult]
    group_by: tuple[str, ...]
    metric_names: tuple[str, ...] = METRICS
    meta: dict = field(default_factory=dict)

    def groups(self) -> dict[tuple, list[CellResult]]:
        out: dict[tuple, list[CellResult]] = {}
        for c in self.cells:
            out.setdefault(tuple(c.key[k] for k in self.group_by), []).append(c)
        return out

    def values(self, metric: str, **key) -> np.ndarray:
        """Per-seed values of ``metric`` over ok cells matching ``key``."""
        return np.array([
            c.metrics[metric] for c in self.cells
            if c.status == OK and all(c.key.get(k) == v for k, v in key.items())
        ])

    def aggregate(self) -> list[dict]:
        rows = []
        for gkey, cells in self.groups().items():
            ok = [c for c in cells if c.status == OK]
            row = dict(zip(self.group_by, gkey))
            row["n_ok"] = len(ok)
            row["n_failed"] = len(cells) - len(ok)
            for m in self.metric_names:
                mean, se = mean_stderr([c.metrics[m] for c in ok if m in c.metrics])
                row[m] = format_cell(mean, se)
                row[f"{m}_mean"] = mean
                row[f"{m}_stderr"] = se
            rows.append(row)
        return rows

    def write(self, directory) -> Path:
        """cells.csv (one row per cell) and aggregate.csv (one row per group)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cell_cols = list(self.cells[0].key) + ["status", "selected_epoch", "message"] + list(self.metric_names)
        _write_csv(directory / "cells.csv", [c.as_row() for c in self.cells], cell_cols)
        agg_cols = list(self.group_by) + ["n_ok", "n_failed"]
        agg_cols += list(self.metric_names)
        agg_cols += [f"{m}_{s}" for m in self.metric_names for s in ("mean", "stderr")]
        _write_csv(directory / "aggregate.csv", self.aggregate(), agg_cols)
        return directory


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


# ---------------------------------------------------------------- runs


def fit(setup: Setup, architecture: str, cfg: TrainConfig, train_mask, select_mask) -> TrainResult:
    """Train one policy (and its adversary) on ``train_mask``, selecting on ``select_mask``."""
    store = ParamStore()
    enc = setup.encoder_config(architecture)
    policy = Policy(enc, setup.market.config.p_max, store, seed=cfg.seed)
    adversary = Adversary(enc.output_dim, store, seed=cfg.seed + 7919) if cfg.adversarial else None
    return train(policy, adversary, setup.dataset.graph, setup.dataset.table, setup.market, cfg, train_mask, select_mask)


def evaluate(setup: Setup, policy: Policy, mask) -> MetricsReport:
    """Metrics of ``policy`` on the subgraph induced by ``mask``."""
    sub, _ = induced_subgraph(setup.dataset.graph, mask)
    table = setup.dataset.table.subset(mask)
    return metrics(sub, table, setup.market, policy.assign_prices(table.X, sub))


def _guard(key: dict, fn) -> CellResult:
    try:
        return fn()
    except NoFeasibleCandidate as exc:
        return CellResult(key, INFEASIBLE, message=str(exc))
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        return CellResult(key, FAILED, message=f"{type(exc).__name__}: {exc}")


def main_cell(setup: Setup, method: str, seed: int) -> CellResult:
    key = {"method": method, "seed": seed}

    def run():
        tr, va, te = split_nodes(setup.dataset.graph.n, setup.split, seed)
        if method == UNIFORM:
            sel = tr | va
            price, _ = optimal_uniform_price(setup.dataset.table.subset(sel), setup.market, setup.grid_step)
            ev = tr | te
            sub, _ = induced_subgraph(setup.dataset.graph, ev)
            rep = metrics(sub, setup.dataset.table.subset(ev), setup.market, np.full(sub.n, price))
            return CellResult(key, OK, {**rep.as_row(), "price": price})
        res = fit(setup, method, setup.train_config(method, seed), tr, tr | va)
        rep = evaluate(setup, res.policy, tr | te)
        return CellResult(key, OK, {**rep.as_row(), "sel_p_diff": res.selected.p_diff}, res.selected.epoch)

    return _guard(key, run)


def run_cells(jobs: list[tuple], workers: int = 1) -> list[CellResult]:
    """Run ``(fn, *args)`` jobs, in a process pool when ``workers > 1``; order is preserved."""
    if workers <= 1:
        return [fn(*args) for fn, *args in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for fn, *args in jobs]
        return [f.result() for f in futures]


def run_main(setup: Setup, methods, seeds, workers: int = 1) -> ExperimentResult:
    for m in methods:
        if m not in METHODS:
            raise ExperimentError(f"unknown method {m!r}; choose from {METHODS}")
    cells = run_cells([(main_cell, setup, m, s) for m in methods for s in seeds], workers)
    return ExperimentResult("main", cells, ("method",), meta={"methods": list(methods), "seeds": list(seeds)})


def generalization_cell(setup: Setup, architecture: str, proportion: float, seed: int) -> CellResult:
    key = {"proportion": proportion, "seed": seed}

    def run():
        rest = (1.0 - proportion) / 2.0
        n = setup.dataset.graph.n
        if rest * n < 1:
            # degenerate: nothing held out, both arms are the same policy on the full graph
            full = np.ones(n, dtype=bool)
            res = fit(setup, architecture, setup.train_config(architecture, seed), full, full)
            rep = evaluate(setup, res.policy, full)
            return CellResult(key, OK, _gen_row(rep, rep), res.selected.epoch)
        tr, va, te = split_nodes(n, SplitSpec(proportion, rest, 1.0 - proportion - rest), seed)
        cfg = setup.train_config(architecture, seed)
        gen = fit(setup, architecture, cfg, tr, tr | va)
        gen_rep = evaluate(setup, gen.policy, tr | te)
        ret = fit(setup, architecture, cfg, tr | te, tr | te)
        ret_rep = evaluate(setup, ret.policy, tr | te)
        return CellResult(key, OK, _gen_row(gen_rep, ret_rep), gen.selected.epoch)

    return _guard(key, run)


GENERALIZATION_METRICS = (
    "ratio", "p_diff_generalized", "p_diff_retrained", "pi_avg_generalized", "pi_avg_retrained",
    "delta_avg_generalized", "eta_avg_generalized", "delta_avg_retrained", "eta_avg_retrained",
)


def _gen_row(gen: MetricsReport, ret: MetricsReport) -> dict:
    ratio = gen.pi_avg / ret.pi_avg if ret.pi_avg > 0 else math.nan
    return {
        "ratio": ratio,
        "p_diff_generalized": gen.p_diff, "p_diff_retrained": ret.p_diff,
        "pi_avg_generalized": gen.pi_avg, "pi_avg_retrained": ret.pi_avg,
        "delta_avg_generalized": gen.delta_avg, "eta_avg_generalized": gen.eta_avg,
        "delta_avg_retrained": ret.delta_avg, "eta_avg_retrained": ret.eta_avg,
    }


def run_generalization(setup: Setup, proportions, seeds, architecture: str = "gcn", workers: int = 1) -> ExperimentResult:
    for p in proportions:
        if not 0.0 < p <= 1.0:
            raise ExperimentError(f"training proportion must be in (0, 1], got {p}")
    jobs = [(generalization_cell, setup, architecture, p, s) for p in proportions for s in seeds]
    return ExperimentResult("generalize", run_cells(jobs, workers), ("proportion",), GENERALIZATION_METRICS,
                            meta={"architecture": architecture, "proportions": list(proportions), "seeds": list(seeds)})


ABLATION_ARMS = ("full", "wo_adv", "wo_reg", "wo_adv_reg")


def ablation_config(setup: Setup, arm: str, seed: int, architecture: str = "gcn") -> TrainConfig:
    base = setup.train_config(architecture, seed)
    if arm == "full":
        return base
    if arm == "wo_adv":
        return replace(base, phi=0.0, adversarial=False)
    if arm == "wo_reg":
        return replace(base, lam=0.0, selection="min_pdiff")
    if arm == "wo_adv_reg":
        return replace(base, lam=0.0, phi=0.0, adversarial=False, selection="min_pdiff")
    raise ExperimentError(f"unknown ablation arm {arm!r}")


def ablation_cell(setup: Setup, arm: str, seed: int, architecture: str = "gcn") -> CellResult:
    key = {"arm": arm, "seed": seed}

    def run():
        tr, va, te = split_nodes(setup.dataset.graph.n, setup.split, seed)
        res = fit(setup, architecture, ablation_config(setup, arm, seed, architecture), tr, tr | va)
        rep = evaluate(setup, res.policy, tr | te)
        return CellResult(key, OK, {**rep.as_row(), "sel_p_diff": res.selected.p_diff}, res.selected.epoch)

    return _guard(key, run)


def run_ablation(setup: Setup, seeds, architecture: str = "gcn", arms=ABLATION_ARMS, workers: int = 1) -> ExperimentResult:
    jobs = [(ablation_cell, setup, a, s, architecture) for a in arms for s in seeds]
    return ExperimentResult("ablate", run_cells(jobs, workers), ("arm",),
                            meta={"architecture": architecture, "arms": list(arms), "seeds": list(seeds)})


def sweep_cell(setup: Setup, architecture: str, lam: float, phi: float, seed: int, fallback_tau: float | None) -> CellResult:
    key = {"lam": lam, "phi": phi, "seed": seed, "flag": ""}
    tr, va, te = split_nodes(setup.dataset.graph.n, setup.split, seed)
    cfg = setup.train_config(architecture, seed, lam=lam, phi=phi)
    if phi == 0:
        cfg = replace(cfg, adversarial=False)
    if lam == 0:
        cfg = replace(cfg, selection="min_pdiff")

    def run(c: TrainConfig, flag: str = ""):
        res = fit(setup, architecture, c, tr, tr | va)
        rep = evaluate(setup, res.policy, tr | te)
        return CellResult({**key, "flag": flag}, OK, {**rep.as_row(), "sel_p_diff": res.selected.p_diff}, res.selected.epoch)

    first = _guard(key, lambda: run(cfg))
    if first.status != INFEASIBLE or fallback_tau is None:
        return first
    # tau as a knob: retry once at the relaxed threshold and flag the cell
    second = _guard(key, lambda: run(replace(cfg, tau=fallback_tau), flag=f"tau={fallback_tau}"))
    if second.status != OK:
        second.key["flag"] = f"tau={fallback_tau}"
    return second


def run_sweep(setup: Setup, lams, phis, seeds, architecture: str = "gcn", fallback_tau: float | None = None,
              workers: int = 1) -> ExperimentResult:
    """Full lam x phi grid; pass a single value on one axis for a one-dimensional sweep."""
    if not lams or not phis:
        raise ExperimentError("sweep grid is empty")
    jobs = [(sweep_cell, setup, architecture, l, p, s, fallback_tau) for l in lams for p in phis for s in seeds]
    return ExperimentResult("sweep", run_cells(jobs, workers), ("lam", "phi"),
                            meta={"architecture": architecture, "lams": list(lams), "phis": list(phis),
                                  "seeds": list(seeds), "fallback_tau": fallback_tau})


# ---------------------------------------------------------------- post-hoc


def decile_segments(order_key, n_segments: int = 10) -> list[np.ndarray]:
    """Node indices ranked by ``order_key`` (ties by index) in equal-count segments.

    Sizes differ by at most one; the extra nodes go to the lowest segments.
    """
    order_key = np.asarray(order_key)
    n = order_key.size
    if n < n_segments:
        raise ExperimentError(f"need at least {n_segments} nodes, got {n}")
    order = np.lexsort((np.arange(n), order_key))
    base, extra = divmod(n, n_segments)
    sizes = [base + (1 if k < extra else 0) for k in range(n_segments)]
    return np.split(order, np.cumsum(sizes)[:-1])


def posthoc_deciles(prices, graph: Graph) -> list[dict]:
    """Average price per degree decile of ``graph``."""
    prices = np.asarray(prices, dtype=float)
    rows = []
    for k, seg in enumerate(decile_segments(graph.degree)):
        rows.append({
            "decile": k + 1,
            "size": int(seg.size),
            "min_degree": int(graph.degree[seg].min()),
            "max_degree": int(graph.degree[seg].max()),
            "mean_price": float(prices[seg].mean()),
        })
    return rows


def decile_trend(rows: list[dict]) -> float:
    """Spearman correlation between decile index and average price."""
    if len({r["mean_price"] for r in rows}) == 1:
        return 0.0
    return float(spearmanr([r["decile"] for r in rows], [r["mean_price"] for r in rows])[0])


# ---------------------------------------------------------------- debiasing check


def debias_cell(setup: Setup, phi: float, seed: int, architecture: str = "gcn") -> CellResult:
    """Probe accuracy and JSD estimate on held-out representations for one phi."""
    key = {"phi": phi, "seed": seed}

    def run():
        tr, va, te = split_nodes(setup.dataset.graph.n, setup.split, seed)
        cfg = setup.train_config(architecture, seed, phi=phi)
        if phi == 0:
            cfg = replace(cfg, adversarial=False)
        res = fit(setup, architecture, cfg, tr, tr | va)
        ev = tr | te
        sub, _ = induced_subgraph(setup.dataset.graph, ev)
        table = setup.dataset.table.subset(ev)
        H = res.policy.representations(table.X, sub)
        probe = probe_adversary(H, table.s)
        rep = metrics(sub, table, setup.market, res.policy.assign_prices(table.X, sub))
        return CellResult(key, OK, {"probe_accuracy": probe.accuracy, "jsd": probe.jsd, **rep.as_row()},
                          res.selected.epoch)

    return _guard(key, run)


def run_debias(setup: Setup, phis, seeds, architecture: str = "gcn", workers: int = 1) -> ExperimentResult:
    jobs = [(debias_cell, setup, p, s, architecture) for p in phis for s in seeds]
    return ExperimentResult("debias", run_cells(jobs, workers), ("phi",), ("probe_accuracy", "jsd") + METRICS)


# ---------------------------------------------------------------- benchmark


def describe(setup: Setup) -> dict:
    """JSON-ready summary of a setup for manifests."""
    return {
        "dataset": setup.dataset.name,
        "nodes": setup.dataset.graph.n,
        "edges": setup.dataset.graph.num_edges,
        "market": asdict(setup.market),
        "encoder": asdict(setup.encoder),
        "train": asdict(setup.train),
        "split": asdict(setup.split),
        "grid_step": setup.grid_step,
        "overrides": setup.overrides,
    }
