"""GCN, GAT and their composite-kernel variants.

All four return pre-softmax logits from ``forward``; ``predict_proba``
applies the row softmax. Every model aggregates over the self-looped
pattern of the normalized adjacency ``a_hat``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphError, SparseMatrix
from .kernel import (KernelModel, SparseKernel, autoencoder_forward,
                     composite_kernel, glorot, kernel_on_edges)

MODEL_KINDS = ("gcn", "gat", "ckgcn", "ckgat")


@dataclass
class AttentionHead:
    """Scores [h_i W || h_j W] . theta. Column 0 of ``theta`` weighs the
    receiving node i, column 1 the neighbor j."""

    theta: Tensor
    slope: float = ad.LEAKY_SLOPE


@dataclass
class Forward:
    logits: Tensor
    kernel: SparseKernel | None = None
    z: Tensor | None = None
    x_bar: Tensor | None = None
    attention: list[Tensor] = field(default_factory=list)   # per layer, per head, (nnz, 1)
    composite: list[Tensor] = field(default_factory=list)   # K (.) A_hat or K (.) T values


def _check_pattern(x: Tensor, pattern: SparseMatrix) -> None:
    if x.shape[0] != pattern.n:
        raise ValueError(f"{x.shape[0]} feature rows for a {pattern.n}-node graph")


def gat_attention(hw: Tensor, head: AttentionHead, pattern: SparseMatrix) -> Tensor:
    """Row-normalized attention values on ``pattern`` (nnz x 1)."""
    f = hw.shape[1]
    if head.theta.shape != (f, 2):
        raise ValueError(f"attention vector shape {head.theta.shape} != ({f}, 2)")
    scores = ad.matmul(hw, head.theta)
    own = ad.matmul(ad.gather_rows(scores, pattern.rows), np.array([[1.0], [0.0]]))
    nbr = ad.matmul(ad.gather_rows(scores, pattern.col_idx), np.array([[0.0], [1.0]]))
    logits = ad.leaky_relu(ad.add(own, nbr), head.slope)
    return ad.segment_softmax(logits, pattern.row_ptr)


def attention_matrix(hw: Tensor, head: AttentionHead, pattern: SparseMatrix) -> SparseMatrix:
    return pattern.with_values(gat_attention(hw, head, pattern).data[:, 0], symmetric=False)


class GNN:
    """Shared parameter bookkeeping for the four models."""

    kind: str = ""

    def __init__(self) -> None:
        self.weights: list[Tensor] = []
        self.heads: list[AttentionHead] = []
        self.kernel: KernelModel | None = None
        self.kernel_dropout = False

    def decay_parameters(self) -> list[Tensor]:
        return self.weights + [h.theta for h in self.heads]

    def parameters(self) -> list[Tensor]:
        extra = self.kernel.parameters() if self.kernel is not None else []
        return self.decay_parameters() + extra

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def forward(self, x: Tensor, a_hat: SparseMatrix, train: bool = False,
                rng: np.random.Generator | None = None, dropout: float = 0.0) -> Forward:
        raise NotImplementedError

    def predict_proba(self, x, a_hat: SparseMatrix) -> np.ndarray:
        return ad.row_softmax(self.forward(ad._t(x), a_hat).logits).data

    def _kernel(self, x: Tensor, a_hat: SparseMatrix) -> tuple[SparseKernel, Tensor, Tensor]:
        z, x_bar = autoencoder_forward(x, self.kernel)
        return kernel_on_edges(z, a_hat), z, x_bar

    def _kdrop(self, vals: Tensor, train, rng, rate) -> Tensor:
        return ad.dropout(vals, rate, train, rng) if self.kernel_dropout else vals


class GCN(GNN):
    kind = "gcn"

    def __init__(self, d: int, hidden: int, c: int, rng: np.random.Generator):
        super().__init__()
        self.weights = [Tensor(glorot(rng, d, hidden), True, "W0"),
                        Tensor(glorot(rng, hidden, c), True, "W1")]

    def forward(self, x, a_hat, train=False, rng=None, dropout=0.0) -> Forward:
        _check_pattern(x, a_hat)
        w0, w1 = self.weights
        h = ad.dropout(x, dropout, train, rng)
        h = ad.relu(ad.spmm_diff(a_hat, None, ad.matmul(h, w0)))
        h = ad.dropout(h, dropout, train, rng)
        return Forward(ad.spmm_diff(a_hat, None, ad.matmul(h, w1)))


class CKGCN(GNN):
    kind = "ckgcn"

    def __init__(self, d: int, hidden: int, c: int, rng: np.random.Generator,
                 kernel: KernelModel):
        super().__init__()
        self.weights = [Tensor(glorot(rng, d, hidden), True, "W0"),
                        Tensor(glorot(rng, 2 * hidden, c), True, "W1")]
        self.kernel = kernel

    def forward(self, x, a_hat, train=False, rng=None, dropout=0.0) -> Forward:
        _check_pattern(x, a_hat)
        w0, w1 = self.weights
        k, z, x_bar = self._kernel(x, a_hat)
        k_hat = composite_kernel(k, a_hat)
        if not k_hat.pattern.same_pattern(a_hat):
            raise GraphError("composite kernel pattern differs from A_hat")
        kv = self._kdrop(k_hat.values, train, rng, dropout)

        h = ad.dropout(x, dropout, train, rng)
        hw = ad.matmul(h, w0)
        h = ad.relu(ad.concat_cols([ad.spmm_diff(a_hat, kv, hw), ad.spmm_diff(a_hat, None, hw)]))
        h = ad.dropout(h, dropout, train, rng)
        hw = ad.matmul(h, w1)
        logits = ad.add(ad.spmm_diff(a_hat, kv, hw), ad.spmm_diff(a_hat, None, hw))
        return Forward(logits, k, z, x_bar, composite=[k_hat.values])


class GAT(GNN):
    kind = "gat"

    def __init__(self, d: int, head_width: int, heads: int, c: int, rng: np.random.Generator,
                 output_heads: int = 1, concat_factor: int = 1):
        super().__init__()
        self.n_heads = heads
        self.n_out_heads = output_heads
        for m in range(heads):
            self.weights.append(Tensor(glorot(rng, d, head_width), True, f"W0.{m}"))
            self.heads.append(AttentionHead(Tensor(glorot(rng, head_width, 2), True, f"theta0.{m}")))
        hidden = concat_factor * heads * head_width
        for m in range(output_heads):
            self.weights.append(Tensor(glorot(rng, hidden, c), True, f"W1.{m}"))
            self.heads.append(AttentionHead(Tensor(glorot(rng, c, 2), True, f"theta1.{m}")))

    def _layer(self, layer: int):
        if layer == 0:
            return list(zip(self.weights[:self.n_heads], self.heads[:self.n_heads]))
        return list(zip(self.weights[self.n_heads:], self.heads[self.n_heads:]))

    def forward(self, x, a_hat, train=False, rng=None, dropout=0.0) -> Forward:
        _check_pattern(x, a_hat)
        out = Forward(None)
        h = ad.dropout(x, dropout, train, rng)
        parts = []
        for w, head in self._layer(0):
            hw = ad.matmul(h, w)
            t = gat_attention(hw, head, a_hat)
            out.attention.append(t)
            parts.append(ad.relu(ad.spmm_diff(a_hat, ad.dropout(t, dropout, train, rng), hw)))
        h = ad.dropout(ad.concat_cols(parts), dropout, train, rng)
        logits = None
        for w, head in self._layer(1):
            hw = ad.matmul(h, w)
            t = gat_attention(hw, head, a_hat)
            out.attention.append(t)
            y = ad.spmm_diff(a_hat, ad.dropout(t, dropout, train, rng), hw)
            logits = y if logits is None else ad.add(logits, y)
        out.logits = logits
        return out


class CKGAT(GAT):
    kind = "ckgat"

    def __init__(self, d: int, head_width: int, heads: int, c: int, rng: np.random.Generator,
                 kernel: KernelModel, output_heads: int = 1):
        super().__init__(d, head_width, heads, c, rng, output_heads, concat_factor=2)
        self.kernel = kernel

    def _branches(self, a_hat, k: SparseKernel, hw, head, out, train, rng, dropout):
        t = gat_attention(hw, head, a_hat)
        km_vals = ad.mul(k.values, t)  # K (.) T for this head
        out.attention.append(t)
        out.composite.append(km_vals)
        kbr = ad.spmm_diff(a_hat, self._kdrop(km_vals, train, rng, dropout), hw)
        tbr = ad.spmm_diff(a_hat, ad.dropout(t, dropout, train, rng), hw)
        return kbr, tbr

    def forward(self, x, a_hat, train=False, rng=None, dropout=0.0) -> Forward:
        _check_pattern(x, a_hat)
        k, z, x_bar = self._kernel(x, a_hat)
        out = Forward(None, k, z, x_bar)
        h = ad.dropout(x, dropout, train, rng)
        parts = []
        for w, head in self._layer(0):
            hw = ad.matmul(h, w)
            kbr, tbr = self._branches(a_hat, k, hw, head, out, train, rng, dropout)
            parts.append(ad.relu(ad.concat_cols([kbr, tbr])))
        h = ad.dropout(ad.concat_cols(parts), dropout, train, rng)
        logits = None
        for w, head in self._layer(1):
            hw = ad.matmul(h, w)
            kbr, tbr = self._branches(a_hat, k, hw, head, out, train, rng, dropout)
            y = ad.add(kbr, tbr)
            logits = y if logits is None else ad.add(logits, y)
        out.logits = logits
        return out


def build_model(kind: str, d: int, c: int, *, seed: int = 0, hidden: int = 16,
                heads: int = 8, head_width: int = 8, output_heads: int = 1,
                latent_z: int = 16, encoder_depth: int = 4,
                kernel_dropout: bool = False) -> GNN:
    """Initialise a model. GNN weights and the kernel autoencoder draw from
    separate streams of ``seed`` so they do not perturb each other."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")
    w_seq, k_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(w_seq)
    kernel = None
    if kind.startswith("ck"):
        kernel = KernelModel.init(d, min(latent_z, d), encoder_depth, np.random.default_rng(k_seq))
    if kind == "gcn":
        model = GCN(d, hidden, c, rng)
    elif kind == "ckgcn":
        model = CKGCN(d, hidden, c, rng, kernel)
    elif kind == "gat":
        model = GAT(d, head_width, heads, c, rng, output_heads)
    else:
        model = CKGAT(d, head_width, heads, c, rng, kernel, output_heads)
    model.kernel_dropout = kernel_dropout
    return model
