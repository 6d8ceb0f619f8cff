"""Plain-text dataset format, synthetic SBM graphs and kernel export.

Dataset files are UTF-8 and line oriented::

    n d c
    N <id> <label> <d floats>        one per node, ids 0..n-1 in order
    E <i> <j> [weight]               one per undirected edge, i < j
    M <train|val|test> <id ...>      optional fixed masks

Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, GraphError, SparseMatrix, normalized_adjacency
from .train import SplitMasks

MASK_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class DatasetBundle:
    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    graph: Graph
    masks: SplitMasks | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.graph.n:
            raise ValueError(f"features {self.x.shape} do not match n={self.graph.n}")
        if self.labels.shape != (self.graph.n,):
            raise ValueError("one label per node required")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def y(self) -> np.ndarray:
        """One-hot labels."""
        return np.eye(self.num_classes)[self.labels]

    def a_hat(self) -> SparseMatrix:
        return normalized_adjacency(self.graph)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(bundle: DatasetBundle, path) -> None:
    lines = [f"{bundle.n} {bundle.x.shape[1]} {bundle.num_classes}"]
    for i in range(bundle.n):
        feats = " ".join(_fmt(v) for v in bundle.x[i])
        lines.append(f"N {i} {bundle.labels[i]} {feats}".rstrip())
    for i, j, w in bundle.graph.edges:
        lines.append(f"E {i} {j}" if w == 1.0 else f"E {i} {j} {_fmt(w)}")
    if bundle.masks is not None:
        for name in MASK_NAMES:
            idx = np.flatnonzero(getattr(bundle.masks, name))
            lines.append(f"M {name} " + " ".join(map(str, idx)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> DatasetBundle:
    text = Path(path).read_text(encoding="utf-8")
    header = None
    x = labels = None
    next_id = 0
    edges: list[tuple[int, int, float]] = []
    seen: dict[tuple[int, int], int] = {}
    masks: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if header is None:
                if len(tok) != 3:
                    raise DatasetFormatError(lineno, "header must be 'n d c'")
                n, d, c = (int(t) for t in tok)
                if n < 1 or d < 1 or c < 1:
                    raise DatasetFormatError(lineno, "n, d and c must be positive")
                header = (n, d, c)
                x = np.zeros((n, d))
                labels = np.zeros(n, dtype=np.int64)
                continue
            n, d, c = header
            kind = tok[0]
            if kind == "N":
                if len(tok) != 3 + d:
                    raise DatasetFormatError(lineno, f"node line needs id, label and {d} features")
                i = int(tok[1])
                if i != next_id:
                    raise DatasetFormatError(lineno, f"expected node id {next_id}, got {i}")
                lab = int(tok[2])
                if not 0 <= lab < c:
                    raise DatasetFormatError(lineno, f"label {lab} out of range [0, {c})")
                x[i] = [float(t) for t in tok[3:]]
                if not np.all(np.isfinite(x[i])):
                    raise DatasetFormatError(lineno, "non-finite feature")
                labels[i] = lab
                next_id += 1
            elif kind == "E":
                if len(tok) not in (3, 4):
                    raise DatasetFormatError(lineno, "edge line is 'E i j [weight]'")
                i, j = int(tok[1]), int(tok[2])
                w = float(tok[3]) if len(tok) == 4 else 1.0
                if not (0 <= i < j < n):
                    raise DatasetFormatError(lineno, f"edge ({i}, {j}) needs 0 <= i < j < {n}")
                if not (w > 0 and np.isfinite(w)):
                    raise DatasetFormatError(lineno, f"edge weight {w} must be positive")
                if (i, j) in seen:
                    raise DatasetFormatError(lineno, f"duplicate edge ({i}, {j}), first on line {seen[(i, j)]}")
                seen[(i, j)] = lineno
                edges.append((i, j, w))
            elif kind == "M":
                if len(tok) < 2 or tok[1] not in MASK_NAMES:
                    raise DatasetFormatError(lineno, "mask line is 'M <train|val|test> ids...'")
                if tok[1] in masks:
                    raise DatasetFormatError(lineno, f"mask {tok[1]} given twice")
                idx = np.array([int(t) for t in tok[2:]], dtype=np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise DatasetFormatError(lineno, "mask id out of range")
                m = np.zeros(n, dtype=bool)
                m[idx] = True
                masks[tok[1]] = m
            else:
                raise DatasetFormatError(lineno, f"unknown record type {kind!r}")
        except ValueError as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(lineno, str(exc)) from exc
    if header is None:
        raise DatasetFormatError(0, "empty file")
    if next_id != header[0]:
        raise DatasetFormatError(0, f"expected {header[0]} node lines, found {next_id}")
    split = None
    if masks:
        if set(masks) != set(MASK_NAMES):
            raise DatasetFormatError(0, "mask lines must give all of train, val and test")
        split = SplitMasks(masks["train"], masks["val"], masks["test"])
    return DatasetBundle(x, labels, header[2], Graph(header[0], edges), split)


def gen_sbm(n: int, c: int, p_in: float, p_out: float, feature_dim: int = 16,
            signal: float = 1.0, seed: int = 0, train_per_class: int = 20,
            val_fraction: float = 0.25) -> DatasetBundle:
    """Stochastic block model with Gaussian class-conditional features.

    Nodes are split into ``c`` near-equal contiguous blocks. Each class
    mean is ``signal`` times a random unit vector; features add standard
    normal noise. Fixed masks: ``train_per_class`` nodes per class (at
    most a quarter of the smallest block) for training, ``val_fraction`` of the nodes for validation, the rest test.
    """
    if c < 2:
        raise ValueError("need at least two classes")
    if not 0 <= p_out < p_in <= 1:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    if feature_dim < 1 or n < c:
        raise ValueError("need feature_dim >= 1 and n >= c")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * c) // n
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    graph = Graph(n, zip(iu[keep].tolist(), ju[keep].tolist()))

    dirs = rng.normal(size=(c, feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    x = signal * dirs[labels] + rng.normal(size=(n, feature_dim))

    masks = None
    n_val = int(round(val_fraction * n))
    # small graphs: shrink the labeled set so every mask stays non-empty
    train_per_class = min(train_per_class, max(1, (n // c) // 4))
    if n - c * train_per_class - n_val > 0 and n_val > 0:
        train = np.concatenate([
            rng.choice(np.flatnonzero(labels == k), size=train_per_class, replace=False)
            for k in range(c)
        ])
        rest = rng.permutation(np.setdiff1d(np.arange(n), train))
        masks = SplitMasks.from_indices(n, train, rest[:n_val], rest[n_val:])
    return DatasetBundle(x, labels, c, graph, masks)


# -- kernel vs adjacency export -------------------------------------------

def export_kernel_comparison(k_hat: SparseMatrix, a_hat: SparseMatrix, path) -> dict:
    """Write ``i j k_hat a_hat abs_diff`` rows after a ``#`` summary header."""
    if not k_hat.same_pattern(a_hat):
        raise GraphError("K_hat and A_hat patterns differ")
    diff = np.abs(k_hat.values - a_hat.values)
    summary = {
        "nnz": k_hat.nnz,
        "mean_abs_diff": float(diff.mean()) if diff.size else 0.0,
        "max_abs_diff": float(diff.max()) if diff.size else 0.0,
    }
    lines = ["# " + " ".join(f"{k}={v!r}" for k, v in summary.items()), "# i\tj\tk_hat\ta_hat\tabs_diff"]
    for i, j, kv, av, dv in zip(a_hat.rows, a_hat.col_idx, k_hat.values, a_hat.values, diff):
        lines.append(f"{i}\t{j}\t{_fmt(kv)}\t{_fmt(av)}\t{_fmt(dv)}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write kernel comparison to {path}: {exc}") from exc
    return summary


def read_kernel_comparison(path, n: int) -> tuple[SparseMatrix, SparseMatrix, dict]:
    summary: dict = {}
    rows, cols, kv, av = [], [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            for item in line[1:].split():
                if "=" in item:
                    key, val = item.split("=", 1)
                    summary[key] = float(val)
            continue
        i, j, k, a, _ = line.split("\t")
        rows.append(int(i))
        cols.append(int(j))
        kv.append(float(k))
        av.append(float(a))
    k_hat = SparseMatrix.from_triplets(n, rows, cols, kv)
    a_hat = SparseMatrix.from_triplets(n, rows, cols, av)
    return k_hat, a_hat, summary
