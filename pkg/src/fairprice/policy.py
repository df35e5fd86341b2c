"""Pricing policies: MLP/GCN/GAT/GraphSAGE encoders with a sigmoid pricing head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffengine import DimensionError, ParamStore, Tape, Tensor, load_params, save_params
from .graphcore import Graph

ARCHITECTURES = ("mlp", "gcn", "gat", "sage")
POLICY_GROUP = "policy"


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str
    input_dim: int
    hidden_dim: int = 128
    output_dim: int = 128
    num_hidden_layers: int = 1
    heads: int = 4
    negative_slope: float = 0.05
    dropout: float = 0.1
    dropout_inputs: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for name in ("input_dim", "hidden_dim", "output_dim", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_hidden_layers < 0:
            raise ValueError("num_hidden_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def layer_dims(self) -> list[tuple[int, int, int]]:
        """(in_dim, per-head out_dim, heads) per layer; the output layer has one head."""
        dims = []
        d_in = self.input_dim
        for _ in range(self.num_hidden_layers):
            heads = self.heads if self.architecture == "gat" else 1
            dims.append((d_in, self.hidden_dim, heads))
            d_in = self.hidden_dim * heads
        dims.append((d_in, self.output_dim, 1))
        return dims


class Policy:
    """Encoder parameters plus the linear pricing head, stored in group ``policy``.

    The policy only ever reads features and topology; the protected attribute
    is not an input.
    """

    def __init__(self, config: EncoderConfig, p_max: float, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.p_max = float(p_max)
        self.meta: dict = {}
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        add = lambda name, shape: self.store.add_glorot(name, shape, POLICY_GROUP, rng)  # noqa: E731
        zero = lambda name, shape: self.store.add(name, np.zeros(shape), POLICY_GROUP)  # noqa: E731
        for k, (d_in, d_out, heads) in enumerate(config.layer_dims()):
            if config.architecture == "gat":
                for h in range(heads):
                    add(f"enc.{k}.h{h}.W", (d_in, d_out))
                    add(f"enc.{k}.h{h}.a_src", (d_out, 1))
                    add(f"enc.{k}.h{h}.a_dst", (d_out, 1))
                zero(f"enc.{k}.b", (1, d_out * heads))
            elif config.architecture == "sage":
                add(f"enc.{k}.W", (2 * d_in, d_out))
                zero(f"enc.{k}.b", (1, d_out))
            else:
                add(f"enc.{k}.W", (d_in, d_out))
                zero(f"enc.{k}.b", (1, d_out))
        add("head.w", (config.output_dim, 1))
        zero("head.b", (1, 1))

    @property
    def param_names(self) -> list[str]:
        return self.store.names(POLICY_GROUP)

    def _layer(self, tape: Tape, k: int, h: Tensor, graph: Graph, heads: int) -> Tensor:
        arch = self.config.architecture
        P = lambda name: tape.param(self.store, f"enc.{k}.{name}")  # noqa: E731
        if arch == "mlp":
            z = tape.matmul(h, P("W"))
        elif arch == "gcn":
            z = tape.sparse_matmul(graph.gcn_operator, tape.matmul(h, P("W")))
        elif arch == "sage":
            neigh = tape.sparse_matmul(graph.mean_operator, h)
            z = tape.matmul(tape.concat_cols([h, neigh]), P("W"))
        else:
            pattern = graph.attention_pattern
            dst = np.repeat(np.arange(graph.n), np.diff(pattern.indptr))
            src = pattern.indices
            outs = []
            for j in range(heads):
                wh = tape.matmul(h, P(f"h{j}.W"))
                s_src = tape.matmul(wh, P(f"h{j}.a_src"))
                s_dst = tape.matmul(wh, P(f"h{j}.a_dst"))
                e = tape.add(tape.gather_rows(s_dst, dst), tape.gather_rows(s_src, src))
                att = tape.row_softmax_masked(pattern, tape.leaky_relu(e, self.config.negative_slope))
                outs.append(tape.sparse_matmul(pattern, wh, values=att))
            z = outs[0] if heads == 1 else tape.concat_cols(outs)
        return tape.add_bias(z, P("b"))

    def encode(self, tape: Tape, X, graph: Graph) -> Tensor:
        """Final-layer representations H (n, output_dim), recorded on ``tape``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise DimensionError(f"features {X.shape} do not match input_dim {self.config.input_dim}")
        if X.shape[0] != graph.n:
            raise DimensionError(f"features have {X.shape[0]} rows but graph has {graph.n} nodes")
        h = tape.constant(X)
        if self.config.dropout_inputs:
            h = tape.dropout(h, self.config.dropout)
        layers = self.config.layer_dims()
        for k, (_, _, heads) in enumerate(layers):
            h = self._layer(tape, k, h, graph, heads)
            if k < len(layers) - 1:
                h = tape.dropout(tape.relu(h), self.config.dropout)
        return h

    def price_head(self, tape: Tape, H: Tensor) -> Tensor:
        """p = p_max * sigmoid(H w + b), shape (n, 1)."""
        z = tape.add_bias(tape.matmul(H, tape.param(self.store, "head.w")), tape.param(self.store, "head.b"))
        return tape.scale(tape.sigmoid(z), self.p_max)

    def representations(self, X, graph: Graph) -> np.ndarray:
        return self.encode(Tape(training=False), X, graph).value

    def assign_prices(self, X, graph: Graph) -> np.ndarray:
        tape = Tape(training=False)
        return self.price_head(tape, self.encode(tape, X, graph)).value[:, 0].copy()

    # checkpoints
    def state(self) -> dict[str, np.ndarray]:
        return self.store.snapshot(POLICY_GROUP)

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        self.store.load_values(values)

    def save(self, path, meta: dict | None = None) -> None:
        extra = {"kind": "policy", "encoder": asdict(self.config), "p_max": self.p_max}
        if meta:
            extra["meta"] = meta
        save_params(self.state(), path, extra=extra)

    @classmethod
    def load(cls, path) -> "Policy":
        values, extra = load_params(path)
        if extra.get("kind") != "policy":
            raise ValueError(f"{path}: not a policy checkpoint")
        policy = cls(EncoderConfig(**extra["encoder"]), extra["p_max"])
        policy.load_state(values)
        policy.meta = extra.get("meta", {})
        return policy
