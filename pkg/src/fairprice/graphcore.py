"""Social-network graphs: CSR adjacency, synthetic two-block SBM markets, file loading."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphInputError(ValueError):
    """Raised for malformed or out-of-range graph input."""


class ParseError(GraphInputError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class LoadReport:
    """Plain-text summary of what a loader kept and dropped."""

    source: str = ""
    nodes: int = 0
    edges: int = 0
    dropped_self_loops: int = 0
    duplicate_entries: int = 0
    id_map: dict[int, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"source: {self.source}",
            f"nodes: {self.nodes}",
            f"edges: {self.edges}",
            f"dropped_self_loops: {self.dropped_self_loops}",
            f"duplicate_entries: {self.duplicate_entries}",
        ]
        lines += [f"warning: {w}" for w in self.warnings]
        if self.id_map and any(k != v for k, v in self.id_map.items()):
            lines.append("id_map:")
            lines += [f"  {k} -> {v}" for k, v in sorted(self.id_map.items(), key=lambda kv: kv[1])]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph in CSR form.

    Rows are sorted and symmetric, with no self-loops. Treat the arrays as
    read-only; derived operators are cached on first use.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    degree: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.col_idx.size // 2)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[i]:self.row_ptr[i + 1]]

    def edge_list(self) -> np.ndarray:
        """Unordered edges as an (E, 2) array with i < j."""
        rows = np.repeat(np.arange(self.n), np.diff(self.row_ptr))
        keep = rows < self.col_idx
        return np.column_stack([rows[keep], self.col_idx[keep]])

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.col_idx.size)
        return sp.csr_matrix((data, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        """Row-normalized adjacency D^-1 A; isolated rows are zero."""
        inv = np.zeros(self.n)
        nz = self.degree > 0
        inv[nz] = 1.0 / self.degree[nz]
        return sp.csr_matrix(sp.diags(inv) @ self.adjacency)

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        """Symmetric normalization with self-loops, D^-1/2 (A + I) D^-1/2."""
        a_hat = self.adjacency + sp.identity(self.n, format="csr")
        d_inv_sqrt = 1.0 / np.sqrt(self.degree + 1.0)
        out = sp.csr_matrix(sp.diags(d_inv_sqrt) @ a_hat @ sp.diags(d_inv_sqrt))
        out.sort_indices()
        return out

    @cached_property
    def attention_pattern(self) -> sp.csr_matrix:
        """Pattern of A + I (unit data), used as GAT neighborhoods."""
        out = sp.csr_matrix(self.adjacency + sp.identity(self.n, format="csr"))
        out.sort_indices()
        out.data[:] = 1.0
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class NodeTable:
    """Per-node features X (n, m), binary protected attribute s (n,)."""

    X: np.ndarray
    s: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.s.shape[0]:
            raise GraphInputError(f"X shape {self.X.shape} does not match s length {self.s.shape[0]}")
        if not np.all((self.s == 0) | (self.s == 1)):
            raise GraphInputError("protected attribute must be binary (0/1)")
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{k}" for k in range(self.X.shape[1])))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, index: np.ndarray) -> "NodeTable":
        return NodeTable(self.X[index], self.s[index], self.feature_names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NodeTable):
            return NotImplemented
        return np.array_equal(self.X, other.X) and np.array_equal(self.s, other.s)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SbmConfig:
    """Two-block stochastic block model keyed to the protected attribute.

    ``degree_spread`` > 0 switches on degree correction: node propensities are
    log-normal with that sigma (mean 1 per block) and pair probabilities become
    ``min(1, p * theta_i * theta_j)``. At 0 every pair in a block shares one
    probability.
    """

    block_sizes: tuple[int, int]
    p_intra: float
    p_inter: float
    degree_spread: float = 0.0

    def __post_init__(self):
        if len(self.block_sizes) != 2:
            raise ValueError("block_sizes must have exactly two entries")
        if min(self.block_sizes) <= 0:
            raise ValueError(f"block sizes must be positive, got {self.block_sizes}")
        if not 0.0 <= self.p_inter <= self.p_intra <= 1.0:
            raise ValueError(
                f"need 0 <= p_inter <= p_intra <= 1, got p_inter={self.p_inter}, p_intra={self.p_intra}"
            )
        if self.degree_spread < 0:
            raise ValueError("degree_spread must be non-negative")

    @property
    def n(self) -> int:
        return int(sum(self.block_sizes))


@dataclass(frozen=True)
class FeatureSpec:
    """Gaussian node features with per-group means.

    ``means`` holds one row per group (s=0, s=1). A column whose means are
    (0, 1) and whose std is small is a noisy copy of the protected attribute.
    """

    means: tuple[tuple[float, ...], tuple[float, ...]]
    std: tuple[float, ...] | float = 1.0
    names: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def __post_init__(self):
        if len(self.means) != 2 or len(self.means[0]) != len(self.means[1]):
            raise ValueError("means must be two rows of equal length")
        if not isinstance(self.std, (int, float)) and len(self.std) != self.dim:
            raise ValueError("std must be a scalar or one value per feature")


def build_graph(edges: Iterable[Sequence[int]] | np.ndarray, n: int, report: LoadReport | None = None) -> Graph:
    """Deduplicated, symmetrized CSR graph from node-index pairs.

    Self-loops are dropped and counted in ``report`` when one is given.
    """
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphInputError(f"edges must be pairs, got array of shape {arr.shape}")
    if n < 0:
        raise GraphInputError("n must be non-negative")
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        bad = arr[(arr < 0).any(axis=1) | (arr >= n).any(axis=1)][0]
        raise GraphInputError(f"edge {tuple(int(v) for v in bad)} has an index outside [0, {n})")

    loops = arr[:, 0] == arr[:, 1]
    if report is not None:
        report.dropped_self_loops += int(loops.sum())
        if loops.any():
            report.warnings.append(f"dropped {int(loops.sum())} self-loop(s)")
    arr = arr[~loops]

    both = np.concatenate([arr, arr[:, ::-1]]) if arr.size else arr
    # unique over (row, col) pairs, sorted row-major
    keys = np.unique(both[:, 0] * n + both[:, 1]) if both.size else np.empty(0, dtype=np.int64)
    if report is not None:
        report.duplicate_entries += int(both.shape[0] - keys.size)
    rows = keys // n if n else keys
    cols = keys % n if n else keys
    degree = np.bincount(rows, minlength=n).astype(np.int64)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degree, out=row_ptr[1:])
    g = Graph(n=n, row_ptr=row_ptr, col_idx=cols.astype(np.int64), degree=degree)
    if report is not None:
        report.nodes = n
        report.edges = g.num_edges
    return g


def sbm_generate(cfg: SbmConfig, features: FeatureSpec, seed: int) -> tuple[Graph, NodeTable]:
    """Sample a two-block SBM market.

    Nodes ``0 .. block_sizes[0]-1`` have s = 0, the rest s = 1. Every unordered
    pair is an independent Bernoulli draw with ``p_intra`` inside a block and
    ``p_inter`` across blocks.
    """
    rng = np.random.default_rng(seed)
    n = cfg.n
    s = np.repeat(np.array([0, 1], dtype=np.int64), cfg.block_sizes)

    iu, ju = np.triu_indices(n, k=1)
    probs = np.where(s[iu] == s[ju], cfg.p_intra, cfg.p_inter)
    if cfg.degree_spread > 0:
        theta = np.exp(cfg.degree_spread * rng.standard_normal(n))
        for grp in (0, 1):
            theta[s == grp] /= theta[s == grp].mean()
        probs = np.minimum(1.0, probs * theta[iu] * theta[ju])
    hit = rng.random(iu.size) < probs
    graph = build_graph(np.column_stack([iu[hit], ju[hit]]), n)

    means = np.asarray(features.means, dtype=float)[s]
    std = np.broadcast_to(np.asarray(features.std, dtype=float), (features.dim,))
    X = means + std * rng.standard_normal((n, features.dim))
    return graph, NodeTable(X, s, tuple(features.names))


def induced_subgraph(g: Graph, mask: np.ndarray) -> tuple[Graph, np.ndarray]:
    """Subgraph on the masked nodes.

    Returns the subgraph and an old->new index map (-1 for dropped nodes).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (g.n,):
        raise GraphInputError(f"mask length {mask.shape} does not match graph size {g.n}")
    if not mask.any():
        raise GraphInputError("empty mask: no nodes to keep")
    remap = np.full(g.n, -1, dtype=np.int64)
    remap[mask] = np.arange(int(mask.sum()))
    edges = g.edge_list()
    keep = mask[edges[:, 0]] & mask[edges[:, 1]]
    sub = build_graph(remap[edges[keep]], int(mask.sum()))
    return sub, remap


def _remap_ids(raw: np.ndarray, id_map: dict[int, int] | None, report: LoadReport) -> tuple[np.ndarray, int]:
    if id_map is None:
        ids = np.unique(raw)
        if ids.size == 0 or (ids[0] >= 0 and ids[-1] == ids.size - 1):
            # already dense 0-based
            n = int(ids[-1]) + 1 if ids.size else 0
            report.id_map = {int(i): int(i) for i in ids}
            return raw, n
        id_map = {int(v): k for k, v in enumerate(ids)}
    report.id_map = dict(id_map)
    try:
        mapped = np.vectorize(id_map.__getitem__, otypes=[np.int64])(raw) if raw.size else raw
    except KeyError as exc:
        raise GraphInputError(f"edge endpoint {exc.args[0]} not present in the node table") from None
    return mapped, len(id_map)


def load_edge_list(path, id_map: dict[int, int] | None = None) -> tuple[Graph, LoadReport]:
    """Read whitespace-separated integer pairs, one edge per line.

    Blank lines and ``#`` comments are skipped. Non-dense IDs are remapped to
    0-based indices in sorted order unless ``id_map`` is given.
    """
    path = Path(path)
    report = LoadReport(source=str(path))
    pairs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected two integers, got {line.rstrip()!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(path, lineno, f"non-integer node id in {line.rstrip()!r}") from None
    raw = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    mapped, n = _remap_ids(raw, id_map, report)
    if id_map is not None:
        n = len(id_map)
    graph = build_graph(mapped, n, report)
    return graph, report


def load_node_table(
    path,
    protected: str,
    features: Sequence[str] | None = None,
    delimiter: str = ",",
    id_column: str | None = None,
) -> tuple[NodeTable, dict[int, int] | None]:
    """Read a delimited node table with a header row.

    Returns the table and, when ``id_column`` is set, the external-id -> row
    map to pass to :func:`load_edge_list`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        if protected not in header:
            raise GraphInputError(f"{path}: protected column {protected!r} not in header {header}")
        if features is None:
            features = [c for c in header if c not in (protected, id_column)]
        missing = [c for c in features if c not in header]
        if missing:
            raise GraphInputError(f"{path}: feature columns {missing} not in header")
        rows_X, rows_s, ids = [], [], []
        for rowno, row in enumerate(reader, start=2):
            try:
                s_val = float(row[protected])
            except (TypeError, ValueError):
                raise ParseError(path, rowno, f"protected value {row[protected]!r} is not numeric") from None
            if s_val not in (0.0, 1.0):
                raise GraphInputError(
                    f"{path}:{rowno}: protected column {protected!r} must be 0 or 1, got {row[protected]!r}"
                )
            try:
                rows_X.append([float(row[c]) for c in features])
            except (TypeError, ValueError):
                raise ParseError(path, rowno, "non-numeric feature value") from None
            rows_s.append(int(s_val))
            if id_column is not None:
                ids.append(int(row[id_column]))
    X = np.asarray(rows_X, dtype=float).reshape(len(rows_s), len(features))
    table = NodeTable(X, np.asarray(rows_s, dtype=np.int64), tuple(features))
    id_map = {ext: k for k, ext in enumerate(ids)} if id_column is not None else None
    return table, id_map
