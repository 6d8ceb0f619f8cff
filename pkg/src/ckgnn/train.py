"""Splits, full-batch training with early stopping, and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tape, Tensor
from .graph import SparseMatrix
from .kernel import ClassPartition, kernel_losses, total_loss
from .models import MODEL_KINDS, GNN, build_model

log = logging.getLogger(__name__)

SPLITS = ("semi", "super", "file")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "gcn"
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.1
    beta: float = 1.0
    epochs: int = 300
    patience: int = 30
    seed: int = 0
    latent_z: int = 16
    hidden: int = 16
    heads: int = 8
    head_width: int = 8
    output_heads: int = 1
    encoder_depth: int = 4
    warmup_epochs: int = 0
    kernel_dropout: bool = False
    split: str = "semi"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if min(self.lambda1, self.lambda2, self.beta, self.weight_decay) < 0:
            raise ValueError("lambda1, lambda2, beta and weight_decay must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 1 or not 0 < self.patience <= self.epochs:
            raise ValueError("need epochs >= 1 and 0 < patience <= epochs")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        self.train, self.val, self.test = (np.asarray(m, dtype=bool) for m in
                                           (self.train, self.val, self.test))
        if not (self.train.shape == self.val.shape == self.test.shape):
            raise ValueError("masks differ in length")
        if np.any(self.train & self.val) or np.any(self.train & self.test) or np.any(self.val & self.test):
            raise ValueError("train/val/test masks overlap")
        if not (self.train.any() and self.val.any() and self.test.any()):
            raise ValueError("every mask must select at least one node")

    @classmethod
    def from_indices(cls, n: int, train, val, test) -> "SplitMasks":
        masks = [np.zeros(n, dtype=bool) for _ in range(3)]
        for m, idx in zip(masks, (train, val, test)):
            m[np.asarray(idx, dtype=np.int64)] = True
        return cls(*masks)


def make_semi_supervised_split(labels, rng: np.random.Generator, per_class: int = 20,
                               n_val: int = 500, n_test: int = 1000) -> SplitMasks:
    """``per_class`` labeled nodes per class; val and test drawn from the rest."""
    labels = np.asarray(labels)
    n = labels.size
    classes = np.unique(labels)
    if n < per_class * classes.size + n_val + n_test:
        raise ValueError(f"n={n} too small for {classes.size} classes x {per_class} "
                         f"+ {n_val} val + {n_test} test")
    train = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < per_class:
            raise ValueError(f"class {c} has {members.size} nodes, need {per_class}")
        train.append(rng.choice(members, size=per_class, replace=False))
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.arange(n), train))
    return SplitMasks.from_indices(n, train, rest[:n_val], rest[n_val:n_val + n_test])


def make_supervised_split(n: int, rng: np.random.Generator, n_val: int = 500,
                          n_test: int = 1000) -> SplitMasks:
    """Fixed-size val/test sets; every other node is labeled for training."""
    if n <= n_val + n_test:
        raise ValueError(f"n={n} must exceed {n_val + n_test}")
    perm = rng.permutation(n)
    return SplitMasks.from_indices(n, perm[n_val + n_test:], perm[:n_val],
                                   perm[n_val:n_val + n_test])


def evaluate_accuracy(proba: np.ndarray, labels, mask) -> float:
    """Share of masked nodes whose argmax (lowest index on ties) hits the label."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate_accuracy: empty mask")
    pred = np.argmax(np.asarray(proba)[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    lk: float
    ld: float
    train_acc: float
    val_acc: float


@dataclass
class Metrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    test_acc: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def l2_penalty(params) -> Tensor:
    total = None
    for p in params:
        sq = ad.sum(ad.mul(p, p))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, 0.5)


def _objective(model: GNN, x: Tensor, a_hat: SparseMatrix, labels, masks: SplitMasks,
               partition: ClassPartition | None, cfg: TrainConfig, rng, warmup: bool):
    out = model.forward(x, a_hat, train=True, rng=rng, dropout=cfg.dropout)
    ce = ad.masked_cross_entropy(out.logits, labels, masks.train)
    lk = ld = None
    if model.kernel is not None and partition is not None:
        kl = kernel_losses(x, out.z, out.x_bar, partition, cfg.beta)
        lk, ld = kl.kernel, kl.difference
    if warmup:
        if lk is None:
            raise TrainingError("warmup epochs need a kernel model")
        loss = lk
    else:
        loss = ce
        if lk is not None and (cfg.lambda1 > 0 or cfg.lambda2 > 0):
            loss = total_loss(ce, lk, ld, cfg.lambda1, cfg.lambda2)
        if cfg.weight_decay > 0:
            loss = ad.add(loss, ad.scale(l2_penalty(model.decay_parameters()), cfg.weight_decay))
    return loss, ce, lk, ld


def fit(model: GNN, x, a_hat: SparseMatrix, labels, masks: SplitMasks, cfg: TrainConfig,
        on_epoch=None) -> Metrics:
    """Full-batch Adam with early stopping on validation accuracy.

    On return the model holds the parameters of the best-validation epoch.
    ``on_epoch`` (if given) receives every :class:`EpochRecord` as it is made.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    drop_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    partition = None
    if model.kernel is not None:
        partition = ClassPartition.from_labels(labels, masks.train)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=0.9, beta2=0.999)

    metrics = Metrics()
    best_state = model.state_dict()
    bad = 0
    for epoch in range(cfg.epochs):
        warmup = epoch < cfg.warmup_epochs
        try:
            with Tape() as tape:
                loss, ce, lk, ld = _objective(model, x, a_hat, labels, masks, partition, cfg,
                                              drop_rng, warmup)
            tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at epoch {epoch}: {exc}") from exc
        opt.step()

        proba = ad.row_softmax(model.forward(x, a_hat).logits).data
        rec = EpochRecord(
            epoch, loss.item(), ce.item(),
            lk.item() if lk is not None else 0.0, ld.item() if ld is not None else 0.0,
            evaluate_accuracy(proba, labels, masks.train),
            evaluate_accuracy(proba, labels, masks.val),
        )
        metrics.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if warmup:
            continue
        if rec.val_acc > metrics.best_val_acc or metrics.best_epoch < 0:
            metrics.best_val_acc = rec.val_acc
            metrics.best_epoch = epoch
            best_state = model.state_dict()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, metrics.best_epoch)
                break

    model.load_state_dict(best_state)
    proba = ad.row_softmax(model.forward(x, a_hat).logits).data
    metrics.test_acc = evaluate_accuracy(proba, labels, masks.test)
    return metrics


def model_for(cfg: TrainConfig, d: int, c: int) -> GNN:
    return build_model(cfg.model, d, c, seed=cfg.seed, hidden=cfg.hidden, heads=cfg.heads,
                       head_width=cfg.head_width, output_heads=cfg.output_heads,
                       latent_z=cfg.latent_z, encoder_depth=cfg.encoder_depth,
                       kernel_dropout=cfg.kernel_dropout)


def masks_for(bundle, cfg: TrainConfig) -> SplitMasks:
    split_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    if cfg.split == "file":
        if bundle.masks is None:
            raise ValueError("split=file but the dataset has no mask lines")
        return bundle.masks
    if cfg.split == "semi":
        return make_semi_supervised_split(bundle.labels, split_rng)
    return make_supervised_split(bundle.n, split_rng)


def train(bundle, cfg: TrainConfig, on_epoch=None) -> tuple[GNN, Metrics, SplitMasks]:
    cfg.validate()
    masks = masks_for(bundle, cfg)
    model = model_for(cfg, bundle.x.shape[1], bundle.num_classes)
    metrics = fit(model, bundle.x, bundle.a_hat(), bundle.labels, masks, cfg, on_epoch)
    return model, metrics, masks
