"""Learnable feature kernel and the losses that shape it.

The kernel is a Gaussian on autoencoder codes,
``k(x_i, x_j) = exp(-||enc(x_i) - enc(x_j)||^2)``, evaluated only on the
stored entries of the self-looped adjacency pattern. Multiplying it
entrywise with the normalized adjacency gives the composite aggregation
weights used by the CK models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphError, SparseMatrix

# exp(-d) underflows to 0 past d ~ 745; clipping keeps kernel values in (0, 1]
MAX_SQDIST = 700.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def layer_widths(d: int, z: int, depth: int) -> list[int]:
    """Widths d -> ... -> z, geometrically interpolated over ``depth`` layers."""
    if depth < 1:
        raise ValueError("need at least one affine layer per side")
    if not 1 <= z <= d:
        raise ValueError(f"latent width z={z} must satisfy 1 <= z <= d={d}")
    ratio = z / d
    inner = [max(z, int(round(d * ratio ** (k / depth)))) for k in range(1, depth)]
    return [d, *inner, z]


@dataclass
class KernelModel:
    """Encoder/decoder MLP pair; ReLU between affine layers, none at the ends."""

    encoder: list[tuple[Tensor, Tensor]]
    decoder: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, d: int, z: int, depth: int = 4,
             rng: np.random.Generator | None = None) -> "KernelModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = layer_widths(d, z, depth)

        def stack(ws, prefix):
            layers = []
            for k, (a, b) in enumerate(zip(ws[:-1], ws[1:])):
                layers.append((Tensor(glorot(rng, a, b), True, f"{prefix}{k}.W"),
                               Tensor(np.zeros((1, b)), True, f"{prefix}{k}.b")))
            return layers

        return cls(stack(widths, "enc"), stack(widths[::-1], "dec"))

    @property
    def in_width(self) -> int:
        return self.encoder[0][0].shape[0]

    @property
    def latent_width(self) -> int:
        return self.encoder[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for layer in (*self.encoder, *self.decoder) for t in layer]


def _mlp(h: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    for k, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if k < len(layers) - 1:
            h = ad.relu(h)
    return h


def encode(x: Tensor, model: KernelModel) -> Tensor:
    if x.shape[1] != model.in_width:
        raise ValueError(f"feature width {x.shape[1]} != kernel input width {model.in_width}")
    return _mlp(x, model.encoder)


def autoencoder_forward(x: Tensor, model: KernelModel) -> tuple[Tensor, Tensor]:
    z = encode(x, model)
    return z, _mlp(z, model.decoder)


def reconstruction_loss(x: Tensor, x_bar: Tensor) -> Tensor:
    """Sum over nodes of the squared reconstruction error."""
    r = ad.sub(x, x_bar)
    return ad.sum(ad.mul(r, r))


# -- kernels on a sparse pattern ------------------------------------------

@dataclass(frozen=True)
class SparseValues:
    """Differentiable entries laid out on a fixed sparse pattern."""

    pattern: SparseMatrix
    values: Tensor

    def __post_init__(self) -> None:
        if self.values.shape != (self.pattern.nnz, 1):
            raise ValueError(f"values must be ({self.pattern.nnz}, 1), got {self.values.shape}")

    def to_matrix(self) -> SparseMatrix:
        return self.pattern.with_values(self.values.data[:, 0], symmetric=False)


@dataclass(frozen=True)
class SparseKernel(SparseValues):
    """Feature kernel on the edge support: symmetric, unit diagonal, values in (0, 1]."""

    def __post_init__(self) -> None:
        super().__post_init__()
        v = self.values.data[:, 0]
        if np.any(v <= 0.0) or np.any(v > 1.0):
            raise ValueError("kernel values must lie in (0, 1]")
        if np.any(v[self.pattern.diagonal_positions()] != 1.0):
            raise ValueError("kernel diagonal must be exactly 1")
        perm = self.pattern.transpose_perm()
        if perm is None or not np.array_equal(v[perm], v):
            raise ValueError("kernel values are not symmetric")


def kernel_on_edges(z: Tensor, pattern: SparseMatrix) -> SparseKernel:
    """exp(-||z_i - z_j||^2) for each stored (i, j); O(nnz) work."""
    if z.shape[0] != pattern.n:
        raise ValueError(f"{z.shape[0]} codes for a {pattern.n}-node pattern")
    if pattern.transpose_perm() is None:
        raise GraphError("kernel pattern must be structurally symmetric")
    neg = ad.clip_min(ad.neg_sqdist_on_pairs(z, pattern.rows, pattern.col_idx), -MAX_SQDIST)
    return SparseKernel(pattern, ad.exp(neg))


def composite_kernel(k: SparseValues, a_hat: SparseMatrix) -> SparseValues:
    """K (.) A_hat, entrywise on the shared pattern."""
    if not k.pattern.same_pattern(a_hat):
        raise GraphError("kernel and adjacency patterns differ")
    return SparseValues(a_hat, ad.mul(k.values, a_hat.values[:, None]))


# -- MMD ------------------------------------------------------------------

def gaussian_gram(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = np.asarray(x, dtype=np.float64)[:, None, :] - np.asarray(y, dtype=np.float64)[None, :, :]
    return np.exp(-np.sum(diff * diff, axis=-1))


def mmd_squared(sa, sb, kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = gaussian_gram) -> float:
    """Biased (V-statistic) estimate of squared MMD between two samples."""
    sa = np.atleast_2d(np.asarray(sa, dtype=np.float64))
    sb = np.atleast_2d(np.asarray(sb, dtype=np.float64))
    if sa.shape[0] == 0 or sb.shape[0] == 0:
        raise ValueError("mmd_squared needs two non-empty samples")
    return float(kernel(sa, sa).mean() + kernel(sb, sb).mean() - 2.0 * kernel(sa, sb).mean())


@dataclass(frozen=True)
class ClassPartition:
    """Labeled training nodes grouped by class (empty classes dropped)."""

    classes: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("kernel losses need at least two labeled classes")
        allidx = np.concatenate(self.classes)
        if any(len(c) == 0 for c in self.classes):
            raise ValueError("every class needs at least one labeled node")
        if np.unique(allidx).size != allidx.size:
            raise ValueError("class index sets overlap")

    @classmethod
    def from_labels(cls, labels, mask) -> "ClassPartition":
        labels = np.asarray(labels)
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        groups = [idx[labels[idx] == c] for c in np.unique(labels[idx])]
        return cls(tuple(g for g in groups if g.size))

    @property
    def nodes(self) -> np.ndarray:
        return np.concatenate(self.classes)

    def mmd_pair_weights(self) -> np.ndarray:
        """Weights w with sum(w * K) = sum over ordered class pairs a != b of MMD^2(a, b),
        K being the Gram matrix over ``nodes`` in partition order."""
        sizes = np.array([len(c) for c in self.classes], dtype=np.float64)
        c = len(sizes)
        block = -2.0 / np.outer(sizes, sizes)
        np.fill_diagonal(block, 2.0 * (c - 1) / sizes ** 2)
        owner = np.repeat(np.arange(c), sizes.astype(np.int64))
        return block[owner[:, None], owner[None, :]]


def labeled_gram(z: Tensor, partition: ClassPartition) -> Tensor:
    """Kernel values over all ordered pairs of labeled nodes, flattened to (m*m, 1)."""
    nodes = partition.nodes
    m = nodes.size
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    zl = ad.gather_rows(z, nodes)
    return ad.exp(ad.clip_min(ad.neg_sqdist_on_pairs(zl, ii.ravel(), jj.ravel()), -MAX_SQDIST))


def mmd_class_sum(gram: Tensor, partition: ClassPartition) -> Tensor:
    w = partition.mmd_pair_weights().reshape(-1, 1)
    return ad.sum(ad.mul(gram, w))


def upper_pairs(gram: Tensor, m: int) -> Tensor:
    """Entries i < j of a flattened m x m Gram column."""
    iu, ju = np.triu_indices(m, k=1)
    return ad.gather_rows(gram, iu * m + ju)


def difference_regularizer(values: Tensor) -> Tensor:
    """-(max k - min k)^2 over the given kernel values."""
    if values.data.size < 2:
        raise ValueError("difference_regularizer needs at least two kernel values")
    gap = ad.sub(ad.reduce_max(values), ad.reduce_min(values))
    return ad.scale(ad.mul(gap, gap), -1.0)


@dataclass
class KernelLosses:
    kernel: Tensor          # reconstruction - beta * MMD sum
    difference: Tensor      # -(max - min)^2 over labeled pairs
    reconstruction: Tensor
    mmd: Tensor


def kernel_losses(x: Tensor, z: Tensor, x_bar: Tensor, partition: ClassPartition,
                  beta: float) -> KernelLosses:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rec = reconstruction_loss(x, x_bar)
    gram = labeled_gram(z, partition)
    mmd = mmd_class_sum(gram, partition)
    lk = ad.sub(rec, ad.scale(mmd, beta))
    m = partition.nodes.size
    ld = difference_regularizer(upper_pairs(gram, m)) if m >= 3 else Tensor(0.0)
    return KernelLosses(lk, ld, rec, mmd)


def kernel_loss(x: Tensor, model: KernelModel, partition: ClassPartition, beta: float) -> Tensor:
    z, x_bar = autoencoder_forward(x, model)
    return kernel_losses(x, z, x_bar, partition, beta).kernel


def total_loss(ce, lk, ld, lambda1: float, lambda2: float) -> Tensor:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.add(ad.add(ce, ad.scale(lk, lambda1)), ad.scale(ld, lambda2))
