"""Run configuration: an INI file parsed against a typed schema.

Every key has a type and, unless marked required, a default. Unknown
sections or keys are rejected. ``[method.<name>]`` sections carry per-method
overrides of ``[train]`` keys. The resolved configuration serializes back to
INI (the manifest copy) and parses to an identical object.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .graphcore import FeatureSpec, SbmConfig, load_edge_list, load_node_table, sbm_generate
from .market import DemandModel, Market, MarketConfig, MarketError, PerceptionParams
from .policy import ARCHITECTURES, EncoderConfig
from .training import TrainConfig
from .experiments import METHODS, Dataset, Setup, SplitSpec

REQUIRED = object()


class ConfigError(ValueError):
    pass


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _list(conv):
    def parse(s: str):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    parse.is_list = True
    return parse


def _optional(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)
    parse.is_optional = True
    return parse


floats, ints, strs = _list(_float), _list(int), _list(str)

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "graph": {
        "source": (str, REQUIRED),
        "blocks": (ints, (250, 250)),
        "p_intra": (_float, 0.04),
        "p_inter": (_float, 0.01),
        "degree_spread": (_float, 0.0),
        "seed": (int, 0),
        "means_0": (floats, (0.0,)),
        "means_1": (floats, (1.0,)),
        "std": (floats, (1.0,)),
        "edges": (str, ""),
        "nodes": (str, ""),
        "protected": (str, "s"),
        "features": (strs, ()),
        "id_column": (str, ""),
    },
    "demand": {
        "family": (str, REQUIRED),
        "weights": (floats, REQUIRED),
        "s_weight": (_float, 0.0),
        "intercept": (_float, 0.0),
        "a": (_float, 0.0),
        "b": (_float, 0.0),
    },
    "perception": {
        "alpha": (_float, REQUIRED),
        "beta": (_float, REQUIRED),
    },
    "market": {
        "cost": (_float, REQUIRED),
        "p_max": (_float, REQUIRED),
    },
    "encoder": {
        "architecture": (str, "gcn"),
        "hidden_dim": (int, 128),
        "output_dim": (int, 128),
        "num_hidden_layers": (int, 1),
        "heads": (int, 4),
        "negative_slope": (_float, 0.05),
        "dropout": (_float, 0.1),
        "dropout_inputs": (_bool, False),
    },
    "train": {
        "lam": (_float, 0.1),
        "phi": (_float, 0.01),
        "tau": (_float, 0.5),
        "lr": (_float, 0.001),
        "weight_decay": (_float, 0.0005),
        "adv_lr": (_optional(_float), None),
        "adv_weight_decay": (_optional(_float), None),
        "adv_steps": (int, 1),
        "max_epochs": (int, 400),
        "eval_every": (int, 5),
        "seed": (int, 0),
        "selection": (str, "tau"),
        "profit_slack": (_float, 0.05),
        "track_jsd": (_bool, True),
        "grid_step": (_float, 0.1),
    },
    "experiment": {
        "seeds": (ints, (0, 1, 2, 3, 4)),
        "ratios": (floats, (0.8, 0.1, 0.1)),
        "methods": (strs, METHODS),
        "architecture": (str, "gcn"),
        "lams": (floats, (0.1, 0.2, 0.5, 1.0, 2.0)),
        "phis": (floats, (0.001, 0.01, 0.1, 1.0)),
        "proportions": (floats, (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)),
        "fallback_tau": (_optional(_float), None),
        "workers": (int, 1),
    },
    "output": {
        "directory": (str, "runs"),
    },
}

METHOD_KEYS = ("lam", "phi", "tau", "lr", "weight_decay", "adv_lr", "adv_weight_decay", "adv_steps",
               "max_epochs", "eval_every", "profit_slack")
TRAIN_FIELDS = tuple(k for k in SCHEMA["train"] if k != "grid_step")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration: ``sections`` maps section -> key -> typed value."""

    sections: dict
    source_dir: str = "."

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.sections == other.sections

    __hash__ = None

    def to_text(self) -> str:
        lines = []
        for name, values in self.sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_render(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    # builders
    def market(self) -> Market:
        d, p, m = self["demand"], self["perception"], self["market"]
        demand = DemandModel(d["family"], d["weights"], d["s_weight"], d["intercept"], d["a"], d["b"])
        return Market(demand, PerceptionParams(p["alpha"], p["beta"]), MarketConfig(m["cost"], m["p_max"]))

    def encoder(self, input_dim: int = 1) -> EncoderConfig:
        return EncoderConfig(input_dim=input_dim, **self["encoder"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self["train"][k] for k in TRAIN_FIELDS})

    def overrides(self) -> dict:
        return {name.split(".", 1)[1]: dict(v) for name, v in self.sections.items() if name.startswith("method.")}

    def split(self) -> SplitSpec:
        return SplitSpec(*self["experiment"]["ratios"])

    def _path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.source_dir) / p

    def dataset(self) -> Dataset:
        g = self["graph"]
        if g["source"] == "sbm":
            spec = FeatureSpec(means=(g["means_0"], g["means_1"]), std=g["std"] if len(g["std"]) > 1 else g["std"][0])
            cfg = SbmConfig(g["blocks"], g["p_intra"], g["p_inter"], g["degree_spread"])
            graph, table = sbm_generate(cfg, spec, g["seed"])
            return Dataset(graph, table, "sbm")
        graph, _ = load_edge_list(self._path(g["edges"]))
        table, id_map = load_node_table(self._path(g["nodes"]), g["protected"], list(g["features"]) or None,
                                        id_column=g["id_column"] or None)
        if id_map is not None:
            graph, _ = load_edge_list(self._path(g["edges"]), id_map=id_map)
        if table.X.shape[0] != graph.n:
            raise ConfigError(f"graph.nodes has {table.X.shape[0]} rows but graph.edges has {graph.n} nodes")
        return Dataset(graph, table, Path(g["edges"]).stem)

    def setup(self, dataset: Dataset | None = None) -> Setup:
        dataset = dataset if dataset is not None else self.dataset()
        market = self.market()
        if dataset.table.X.shape[1] != len(market.demand.weights):
            raise ConfigError(
                f"demand.weights has {len(market.demand.weights)} entries but the features have "
                f"{dataset.table.X.shape[1]} columns"
            )
        return Setup(dataset, market, self.encoder(dataset.table.X.shape[1]), self.train_config(), self.split(),
                     self["train"]["grid_step"], self.overrides())


def parse_text(text: str, source_dir: str = ".", origin: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None

    sections: dict[str, dict] = {}
    for name in SCHEMA:
        raw = parser[name] if parser.has_section(name) else {}
        sections[name] = _resolve(name, SCHEMA[name], raw)
    for name in parser.sections():
        if name in SCHEMA:
            continue
        if name.startswith("method."):
            method = name.split(".", 1)[1]
            if method not in ARCHITECTURES:
                raise ConfigError(f"[{name}]: unknown method {method!r}; choose from {ARCHITECTURES}")
            schema = {k: SCHEMA["train"][k] for k in METHOD_KEYS}
            sections[name] = {k: v for k, v in _resolve(name, schema, parser[name], defaults=False).items()}
            continue
        raise ConfigError(f"unknown section [{name}]")
    config = RunConfig(sections, str(source_dir))
    validate(config)
    return config


def _resolve(section: str, schema: dict, raw, defaults: bool = True) -> dict:
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}")
    out = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: cannot parse {raw[key]!r} ({exc})") from None
        elif not defaults:
            continue
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {section}.{key}")
        else:
            out[key] = default
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(config: RunConfig) -> None:
    """Cross-field constraints, each reported with the offending key."""
    g, d, p, m = config["graph"], config["demand"], config["perception"], config["market"]
    e, t, x = config["encoder"], config["train"], config["experiment"]
    _check(g["source"] in ("sbm", "files"), f"graph.source must be 'sbm' or 'files', got {g['source']!r}")
    if g["source"] == "sbm":
        _check(len(g["blocks"]) == 2 and min(g["blocks"]) > 0, "graph.blocks must be two positive sizes")
        _check(0 <= g["p_inter"] <= g["p_intra"] <= 1, "graph.p_inter must be <= graph.p_intra, both in [0, 1]")
        _check(g["degree_spread"] >= 0, "graph.degree_spread must be >= 0")
        _check(len(g["means_0"]) == len(g["means_1"]), "graph.means_0 and graph.means_1 must have equal length")
        _check(len(g["std"]) in (1, len(g["means_0"])), "graph.std must be one value or one per feature")
        _check(min(g["std"]) >= 0, "graph.std must be >= 0")
        _check(len(d["weights"]) == len(g["means_0"]), "demand.weights must have one entry per feature")
    else:
        _check(bool(g["edges"]) and bool(g["nodes"]), "graph.edges and graph.nodes are required when graph.source = files")
    _check(d["family"] in ("linear", "exponential"), f"demand.family must be 'linear' or 'exponential', got {d['family']!r}")
    if d["family"] == "exponential":
        _check(d["a"] > 0, "demand.a must be > 0 for exponential demand")
        _check(d["b"] >= 0, "demand.b must be >= 0 for exponential demand")
    _check(p["alpha"] > 0, "perception.alpha must be > 0")
    _check(p["alpha"] < p["beta"], "perception.alpha must be < perception.beta")
    _check(m["cost"] > 0, "market.cost must be > 0")
    _check(m["p_max"] > m["cost"], "market.p_max must be > market.cost")
    _check(e["architecture"] in ARCHITECTURES, f"encoder.architecture must be one of {ARCHITECTURES}")
    for k in ("hidden_dim", "output_dim", "heads"):
        _check(e[k] > 0, f"encoder.{k} must be > 0")
    _check(e["num_hidden_layers"] >= 0, "encoder.num_hidden_layers must be >= 0")
    _check(0 <= e["dropout"] < 1, "encoder.dropout must be in [0, 1)")
    for name in ["train"] + [s for s in config.sections if s.startswith("method.")]:
        sec = config[name]
        for k in ("lam", "phi", "tau"):
            if k in sec:
                _check(sec[k] >= 0, f"{name}.{k} must be >= 0")
        for k in ("lr", "adv_lr"):
            if sec.get(k) is not None:
                _check(sec[k] > 0, f"{name}.{k} must be > 0")
        for k in ("max_epochs", "eval_every", "adv_steps"):
            if k in sec:
                _check(sec[k] >= 1, f"{name}.{k} must be >= 1")
        if "profit_slack" in sec:
            _check(0 <= sec["profit_slack"] < 1, f"{name}.profit_slack must be in [0, 1)")
    _check(t["selection"] in ("tau", "min_pdiff"), "train.selection must be 'tau' or 'min_pdiff'")
    _check(t["grid_step"] > 0, "train.grid_step must be > 0")
    _check(len(x["seeds"]) >= 1, "experiment.seeds must list at least one seed")
    _check(len(x["ratios"]) == 3 and min(x["ratios"]) > 0 and abs(sum(x["ratios"]) - 1) < 1e-9,
           "experiment.ratios must be three positive numbers summing to 1")
    for meth in x["methods"]:
        _check(meth in METHODS, f"experiment.methods: unknown method {meth!r}")
    _check(x["architecture"] in ARCHITECTURES, f"experiment.architecture must be one of {ARCHITECTURES}")
    _check(all(0 < q <= 1 for q in x["proportions"]), "experiment.proportions must lie in (0, 1]")
    _check(all(v >= 0 for v in x["lams"]), "experiment.lams must be >= 0")
    _check(all(v >= 0 for v in x["phis"]), "experiment.phis must be >= 0")
    _check(x["workers"] >= 1, "experiment.workers must be >= 1")
    try:
        config.market()
    except MarketError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> RunConfig:
    """Parse a config file; an unreadable file raises OSError, a bad one ConfigError."""
    path = Path(path)
    return parse_text(path.read_text(), str(path.parent), str(path))


def preset(name: str = "benchmark") -> str:
    """Text of a bundled configuration."""
    return resources.files("fairprice").joinpath("presets", f"{name}.ini").read_text()


def with_overrides(config: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``config`` with keys of one section replaced (and re-validated)."""
    sections = {k: dict(v) for k, v in config.sections.items()}
    sections.setdefault(section, {}).update(values)
    out = replace(config, sections=sections)
    validate(out)
    return out
