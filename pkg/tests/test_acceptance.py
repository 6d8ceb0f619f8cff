"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``CRITERION <k>: PASS|FAIL|SKIP ...`` line; the
lines are collected in the terminal summary. Run alone with
``pytest tests/test_acceptance.py -v``.
"""
import json
import os
import time

import numpy as np
import pytest

from ckgnn import autodiff as ad, cli
from ckgnn.autodiff import Tensor, grad_check
from ckgnn.data import gen_sbm, load_dataset, save_dataset
from ckgnn.graph import Graph, check_psd_decomposition, normalized_adjacency
from ckgnn.kernel import (ClassPartition, KernelModel, encode, gaussian_gram, kernel_losses,
                          mmd_squared, total_loss)
from ckgnn.models import MODEL_KINDS, build_model
from ckgnn.train import TrainConfig, fit, l2_penalty, model_for, train

import conftest
from test_train import DuplicatedGCN


def report(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_indefinite_kernel_decomposition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = np.inf
    for k in range(20):
        n = int(rng.integers(10, 201))
        p = float(rng.uniform(1.0, 8.0)) / n
        weighted = k % 2 == 1
        edges = [(i, j, float(rng.uniform(0.05, 5.0)) if weighted else 1.0)
                 for i in range(n) for j in range(i + 1, n) if rng.random() < p]
        worst = min(worst, check_psd_decomposition(normalized_adjacency(Graph(n, edges))).min_eig_I_minus_S)
    dt = time.perf_counter() - t0
    report(1, worst >= -1e-8 and dt < 10, f"min eig(I - A_hat) over 20 graphs = {worst:.3e}, {dt:.2f}s")


def test_criterion_2_learned_kernel_validity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(50, 12))
    z = encode(Tensor(x), KernelModel.init(12, 8, 4, rng)).data
    g = gaussian_gram(z, z)
    min_eig = np.linalg.eigvalsh(g).min()
    in_range = bool(np.all((g > 0) & (g <= 1)))
    unit_diag = bool(np.all(np.diag(g) == 1.0))
    dt = time.perf_counter() - t0
    report(2, min_eig >= -1e-8 and in_range and unit_diag and dt < 5,
           f"min eig = {min_eig:.3e}, values in (0,1]: {in_range}, diagonal == 1: {unit_diag}, {dt:.2f}s")


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n, d, c = 10, 6, 3
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
    a_hat = normalized_adjacency(Graph(n, edges))
    x = Tensor(rng.normal(size=(n, d)))
    labels = np.arange(n) % c
    mask = np.arange(n) < 7
    part = ClassPartition.from_labels(labels, mask)
    errs, margins = {}, {}
    for kind in MODEL_KINDS:
        model = build_model(kind, d, c, seed=0, hidden=4, heads=2, head_width=3, latent_z=3,
                            encoder_depth=2)

        def loss():
            out = model.forward(x, a_hat)
            obj = ad.masked_cross_entropy(out.logits, labels, mask)
            if model.kernel is not None:
                kl = kernel_losses(x, out.z, out.x_bar, part, 1.0)
                obj = total_loss(obj, kl.kernel, kl.difference, 0.5, 0.1)
            return ad.add(obj, ad.scale(l2_penalty(model.decay_parameters()), 5e-4))

        rep = grad_check(loss, model.parameters(), eps=1e-4, n_coords=10**6)
        errs[kind], margins[kind] = rep.max_rel_error, rep.kink_margin
    dt = time.perf_counter() - t0
    # a kink within a few eps of the base point would make the comparison meaningless
    ok = max(errs.values()) <= 1e-4 and min(margins.values()) > 1e-3 and dt < 60
    detail = ", ".join(f"{k} {errs[k]:.1e}" for k in MODEL_KINDS)
    report(3, ok, f"max rel error {detail}; min kink margin {min(margins.values()):.1e}, {dt:.2f}s")


def test_criterion_4_mmd_oracle():
    rng = np.random.default_rng(4)
    worst = worst_self = 0.0
    for _ in range(50):
        a = rng.normal(size=(int(rng.integers(1, 16)), 3))
        b = rng.normal(size=(int(rng.integers(1, 16)), 3)) + rng.normal(scale=0.5)
        brute = 0.0
        for xs, ys, w in ((a, a, 1.0), (b, b, 1.0), (a, b, -2.0)):
            acc = 0.0
            for u in xs:
                for v in ys:
                    acc += np.exp(-np.sum((u - v) ** 2))
            brute += w * acc / (len(xs) * len(ys))
        worst = max(worst, abs(mmd_squared(a, b) - brute))
        worst_self = max(worst_self, abs(mmd_squared(a, a)))
    x, y = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    singleton_exact = mmd_squared(x, y) == 2 - 2 * np.exp(-np.sum((x - y) ** 2))
    report(4, worst <= 1e-12 and worst_self <= 1e-12 and singleton_exact,
           f"brute-force gap {worst:.1e}, MMD(S,S) {worst_self:.1e}, singleton exact: {singleton_exact}")


def test_criterion_5_reduction_identity():
    bundle = gen_sbm(120, 3, 0.15, 0.01, feature_dim=8, signal=1.5, seed=3)
    x, a_hat = bundle.x, bundle.a_hat()
    cfg = TrainConfig(model="ckgcn", split="file", lambda1=0.0, lambda2=0.0, seed=11,
                      epochs=50, patience=50, hidden=8, latent_z=4, encoder_depth=2)

    def pair():
        ck = model_for(cfg, x.shape[1], 3)
        ck.kernel.encoder[-1][0].data[:] = 0.0   # constant encoder output -> K == 1
        return ck, DuplicatedGCN(x.shape[1], cfg.hidden, 3, cfg.seed)

    ck, ref = pair()
    fwd = np.max(np.abs(ck.forward(Tensor(x), a_hat).logits.data - ref.forward(Tensor(x), a_hat).logits.data))
    m_ck = fit(ck, x, a_hat, bundle.labels, bundle.masks, cfg)
    m_ref = fit(ref, x, a_hat, bundle.labels, bundle.masks, cfg)
    traj = max(max(abs(a.loss - b.loss), abs(a.ce - b.ce)) for a, b in zip(m_ck.epochs, m_ref.epochs))
    params = max(np.max(np.abs(p.data - q.data)) for p, q in zip(ck.weights, ref.weights))
    same_len = len(m_ck.epochs) == len(m_ref.epochs)
    report(5, fwd <= 1e-12 and traj <= 1e-10 and params <= 1e-10 and same_len,
           f"forward gap {fwd:.1e}, loss trajectory gap {traj:.1e}, final weight gap {params:.1e} "
           f"over {len(m_ck.epochs)} epochs")


def test_criterion_6_attention_normalization():
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(10):
        n = int(rng.integers(5, 40))
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.2]
        a_hat = normalized_adjacency(Graph(n, edges))
        x = Tensor(rng.normal(size=(n, 5)))
        for kind in ("gat", "ckgat"):
            model = build_model(kind, 5, 3, seed=k, heads=3, head_width=4, output_heads=2,
                                latent_z=3, encoder_depth=2)
            for t in model.forward(x, a_hat).attention:
                sums = np.add.reduceat(t.data[:, 0], a_hat.row_ptr[:-1])
                worst = max(worst, np.max(np.abs(sums - 1.0)))
    uniform = True
    for kind in ("gat", "ckgat"):
        model = build_model(kind, 5, 3, seed=0, heads=3, head_width=4, latent_z=3, encoder_depth=2)
        for h in model.heads:
            h.theta.data[:] = 0.0
        deg = np.diff(a_hat.row_ptr)
        for t in model.forward(x, a_hat).attention:
            uniform &= bool(np.array_equal(t.data[:, 0], 1.0 / np.repeat(deg, deg)))
    report(6, worst <= 1e-12 and uniform, f"max |row sum - 1| = {worst:.1e}, theta=0 uniform exactly: {uniform}")


# Frozen before the first calibration run: 16 feature dimensions, default
# TrainConfig, fixed masks from the generator, seeds 0-4 (graph and model).
SYNTH = dict(n=400, c=4, p_in=0.05, p_out=0.005, feature_dim=16, signal=1.0)


def test_criterion_7_synthetic_end_to_end():
    t0 = time.perf_counter()
    accs = {"gcn": [], "ckgcn": []}
    for seed in range(5):
        bundle = gen_sbm(seed=seed, **SYNTH)
        for kind in accs:
            _, metrics, _ = train(bundle, TrainConfig(model=kind, split="file", seed=seed))
            accs[kind].append(metrics.test_acc)
    dt = time.perf_counter() - t0
    gcn, ck = np.mean(accs["gcn"]), np.mean(accs["ckgcn"])
    ok = gcn >= 0.85 and ck >= gcn - 0.01 and dt < 120
    report(7, ok, f"GCN mean {gcn:.4f} (>= 0.85), CKGCN mean {ck:.4f} (>= {gcn - 0.01:.4f}), "
                  f"per-seed GCN {np.round(accs['gcn'], 3).tolist()} CKGCN {np.round(accs['ckgcn'], 3).tolist()}, "
                  f"{dt:.1f}s")


CORA = os.environ.get("CKGNN_CORA")


def test_criterion_8_citation_spot_check():
    if not CORA or not os.path.exists(CORA):
        conftest.ACCEPTANCE_LINES.append(
            "CRITERION 8: SKIP no converted Cora file (set CKGNN_CORA; see scripts/convert_cora.py)")
        pytest.skip("set CKGNN_CORA to a converted Cora file")
    t0 = time.perf_counter()
    bundle = load_dataset(CORA)
    accs = {"gcn": [], "ckgcn": []}
    for kind in accs:
        for seed in range(5):
            _, metrics, _ = train(bundle, TrainConfig(model=kind, split="semi", seed=seed))
            accs[kind].append(100 * metrics.test_acc)
    dt = time.perf_counter() - t0
    gcn, ck = np.mean(accs["gcn"]), np.mean(accs["ckgcn"])
    ok = abs(gcn - 81.5) <= 2.0 and ck >= gcn and dt <= 1800
    report(8, ok, f"GCN {gcn:.1f} (81.5 +/- 2.0), CKGCN {ck:.1f} (>= GCN), {dt:.0f}s")


def test_criterion_9_determinism(tmp_path, capsys):
    data = tmp_path / "d.txt"
    save_dataset(gen_sbm(80, 3, 0.2, 0.02, feature_dim=6, seed=1), data)
    identical = True
    for kind in MODEL_KINDS:
        argv = ["train", "--data", str(data), "--model", kind, "--split", "file", "--seed", "5",
                "--epochs", "20", "--patience", "20", "--heads", "2"]
        runs = []
        for _ in range(2):
            assert cli.main(argv) == 0
            lines = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
            runs.append(([r for r in lines if r["record"] == "epoch"], lines[-1]["epochs"]))
        identical &= runs[0] == runs[1]
    report(9, identical, f"repeated train invocations, epoch metrics bit-identical for {', '.join(MODEL_KINDS)}: "
                         f"{identical}")
