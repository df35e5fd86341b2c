"""Command-line entry point: ``fairprice <subcommand> CONFIG [--out DIR]``.

Every run writes into ``<output root>/<subcommand>-<config hash>/`` and leaves a
``manifest.json`` there, on failure too. The output root is the config's
``output.directory`` unless ``FAIRPRICE_OUTPUT`` is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .experiments import (
    ABLATION_ARMS, ExperimentError, Setup, decile_trend, evaluate, fit, posthoc_deciles,
    run_ablation, run_generalization, run_main, run_sweep, split_nodes,
)
from .graphcore import GraphInputError, ParseError, induced_subgraph
from .gradsuite import run_suite
from .policy import Policy
from .training import NoFeasibleCandidate

EXIT_OK = 0
EXIT_FAILED = 1  # a check ran and did not pass (gradcheck)
EXIT_USAGE = 2  # argparse's own code
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_INFEASIBLE = 5  # no candidate met p_diff <= tau

OUTPUT_ENV = "FAIRPRICE_OUTPUT"
SUBCOMMANDS = ("generate", "train", "evaluate", "main", "generalize", "ablate", "sweep", "posthoc", "gradcheck")


class Infeasible(Exception):
    pass


class CheckFailed(Exception):
    pass


def config_hash(config: RunConfig, *extra: str) -> str:
    h = hashlib.sha256(config.to_text().encode())
    for e in extra:
        h.update(b"\0" + e.encode())
    return h.hexdigest()[:12]


def output_root(config: RunConfig | None, environ=None) -> Path:
    environ = os.environ if environ is None else environ
    default = config["output"]["directory"] if config is not None else "runs"
    return Path(environ.get(OUTPUT_ENV) or default)


def _write_rows(path: Path, rows: list[dict], columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items() if k in columns})


def _split(setup: Setup, seed: int):
    return split_nodes(setup.dataset.graph.n, setup.split, seed)


# ---------------------------------------------------------------- subcommands


def cmd_generate(config: RunConfig, out: Path, args) -> dict:
    ds = config.dataset()
    g, t = ds.graph, ds.table
    with (out / "edges.txt").open("w") as fh:
        fh.write(f"# {g.n} nodes, {g.num_edges} undirected edges\n")
        for i, j in g.edge_list():
            fh.write(f"{i} {j}\n")
    names = list(t.feature_names)
    with (out / "nodes.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "s"] + names)
        for i in range(g.n):
            w.writerow([i, int(t.s[i])] + [repr(float(v)) for v in t.X[i]])
    return {"nodes": g.n, "edges": g.num_edges, "group_sizes": [int((t.s == 0).sum()), int((t.s == 1).sum())]}


def cmd_train(config: RunConfig, out: Path, args) -> dict:
    setup = config.setup()
    arch = config["encoder"]["architecture"]
    seed = config["train"]["seed"]
    tr, va, te = _split(setup, seed)
    cfg = setup.train_config(arch, seed)
    try:
        res = fit(setup, arch, cfg, tr, tr | va)
    except NoFeasibleCandidate as exc:
        if exc.log:
            from .training import write_log
            write_log(exc.log, out / "train_log.csv")
        raise Infeasible(str(exc)) from None
    res.write_log(out / "train_log.csv")
    res.policy.save(out / "policy.json", meta={"split_seed": seed, "architecture": arch})
    rep = evaluate(setup, res.policy, tr | te)
    selected = {"epoch": res.selected.epoch, "sel_pi_avg": res.selected.pi_avg, "sel_p_diff": res.selected.p_diff}
    _write_rows(out / "metrics.csv", [{"mask": "evaluation", **rep.as_row()}], ["mask", *rep.FIELDS])
    return {"selected": selected, "evaluation": rep.as_row()}


def cmd_evaluate(config: RunConfig, out: Path, args) -> dict:
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    try:
        policy = Policy.load(args.checkpoint)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from None
    setup = config.setup()
    seed = policy.meta.get("split_seed", config["train"]["seed"])
    tr, va, te = _split(setup, seed)
    rows = []
    for name, mask in (("selection", tr | va), ("evaluation", tr | te)):
        rows.append({"mask": name, **evaluate(setup, policy, mask).as_row()})
    _write_rows(out / "metrics.csv", rows, ["mask", "pi_avg", "p_diff", "delta_avg", "eta_avg",
                                            "mean_price_0", "mean_price_1", "n_0", "n_1"])
    return {"split_seed": seed, "metrics": rows}


def _finish(result, out: Path) -> dict:
    result.write(out)
    bad = [c.as_row() for c in result.cells if c.status != "ok"]
    return {"experiment": result.name, "meta": result.meta, "cells": len(result.cells), "failed_cells": bad}


def cmd_main(config: RunConfig, out: Path, args) -> dict:
    x = config["experiment"]
    return _finish(run_main(config.setup(), x["methods"], x["seeds"], x["workers"]), out)


def cmd_generalize(config: RunConfig, out: Path, args) -> dict:
    x = config["experiment"]
    res = run_generalization(config.setup(), x["proportions"], x["seeds"], x["architecture"], x["workers"])
    return _finish(res, out)


def cmd_ablate(config: RunConfig, out: Path, args) -> dict:
    x = config["experiment"]
    return _finish(run_ablation(config.setup(), x["seeds"], x["architecture"], ABLATION_ARMS, x["workers"]), out)


def cmd_sweep(config: RunConfig, out: Path, args) -> dict:
    x = config["experiment"]
    res = run_sweep(config.setup(), x["lams"], x["phis"], x["seeds"], x["architecture"], x["fallback_tau"], x["workers"])
    return _finish(res, out)


def cmd_posthoc(config: RunConfig, out: Path, args) -> dict:
    setup = config.setup()
    if args.checkpoint:
        policy = Policy.load(args.checkpoint)
        seed = policy.meta.get("split_seed", config["train"]["seed"])
    else:
        arch = config["experiment"]["architecture"]
        seed = config["train"]["seed"]
        tr, va, _ = _split(setup, seed)
        try:
            policy = fit(setup, arch, setup.train_config(arch, seed), tr, tr | va).policy
        except NoFeasibleCandidate as exc:
            raise Infeasible(str(exc)) from None
        policy.save(out / "policy.json", meta={"split_seed": seed, "architecture": arch})
    tr, _, te = _split(setup, seed)
    sub, _ = induced_subgraph(setup.dataset.graph, tr | te)
    table = setup.dataset.table.subset(tr | te)
    rows = posthoc_deciles(policy.assign_prices(table.X, sub), sub)
    _write_rows(out / "deciles.csv", rows, ["decile", "size", "min_degree", "max_degree", "mean_price"])
    return {"spearman": decile_trend(rows)}


def cmd_gradcheck(config: RunConfig | None, out: Path, args) -> dict:
    reports = run_suite()
    rows = [{"case": name, "max_rel_error": r.worst, "passed": r.passed} for name, r in reports.items()]
    _write_rows(out / "gradcheck.csv", rows, ["case", "max_rel_error", "passed"])
    width = max(len(r["case"]) for r in rows)
    for r in rows:
        print(f"{r['case']:<{width}}  {r['max_rel_error']:.3e}  {'ok' if r['passed'] else 'FAIL'}")
    failed = [r["case"] for r in rows if not r["passed"]]
    if failed:
        raise CheckFailed(f"finite-difference mismatch in {', '.join(failed)}")
    return {"cases": len(rows), "worst": max(r["max_rel_error"] for r in rows)}


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "main": cmd_main,
    "generalize": cmd_generalize, "ablate": cmd_ablate, "sweep": cmd_sweep, "posthoc": cmd_posthoc,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairprice", description="Fair personalized pricing on social networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?" if name == "gradcheck" else None, help="run configuration (INI)")
        p.add_argument("--out", help="run directory (default: <output root>/<subcommand>-<config hash>)")
        if name in ("evaluate", "posthoc"):
            p.add_argument("--checkpoint", help="policy checkpoint (JSON)")
    return parser


def _manifest(args, config: RunConfig | None, status: str, code: int, message: str, details: dict) -> dict:
    return {
        "subcommand": args.command,
        "status": status,
        "exit_code": code,
        "message": message,
        "config_path": args.config,
        "checkpoint": getattr(args, "checkpoint", None),
        "config_hash": config_hash(config) if config is not None else None,
        "config": config.to_text() if config is not None else None,
        "versions": {"fairprice": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "result": details,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = None
    out = None
    code, status, message, details = EXIT_OK, "ok", "", {}
    try:
        if args.config:
            config = parse_config(args.config)
        elif args.command != "gradcheck":
            raise ConfigError("a config file is required")
        if args.out:
            out = Path(args.out)
        elif config is not None:
            extra = (str(Path(args.checkpoint).resolve()),) if getattr(args, "checkpoint", None) else ()
            out = output_root(config) / f"{args.command}-{config_hash(config, *extra)}"
        else:
            out = output_root(None) / args.command
        out.mkdir(parents=True, exist_ok=True)
        if config is not None:
            (out / "config.ini").write_text(config.to_text())
        details = COMMANDS[args.command](config, out, args) or {}
    except Infeasible as exc:
        code, status, message = EXIT_INFEASIBLE, "infeasible", str(exc)
    except CheckFailed as exc:
        code, status, message = EXIT_FAILED, "failed", str(exc)
    except (ConfigError, ExperimentError, GraphInputError, ParseError) as exc:
        code, status, message = EXIT_CONFIG, "config-error", str(exc)
    except OSError as exc:
        code, status, message = EXIT_IO, "io-error", f"{exc.filename or ''} {exc.strerror or exc}".strip()
    except ValueError as exc:
        code, status, message = EXIT_CONFIG, "config-error", str(exc)
    if out is None:
        # failed before a run directory existed: fall back to the output root
        out = output_root(None) / f"{args.command}-failed"
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError:
            out = None
    if out is not None:
        doc = _manifest(args, config, status, code, message, details)
        (out / "manifest.json").write_text(json.dumps(doc, indent=1, default=_json_default) + "\n")
    if code != EXIT_OK:
        print(f"fairprice {args.command}: {message}", file=sys.stderr)
    elif out is not None:
        print(f"fairprice {args.command}: wrote {out}")
    return code


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
