"""End-to-end acceptance battery.

Eleven numbered checks covering the whole toolkit: quantizer exactness,
curvature oracles, sensitivity and grouping rules, size accounting,
direction-level fine-tuning comparisons, attention-divergence ordering,
landscape grids, and byte-level pipeline determinism. Each test prints
one ``ACCEPTANCE <n>: ... PASS|FAIL`` line (see conftest).
"""

import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hessq import allocation as A
from hessq import kernels
from hessq import tensor as T
from hessq.allocation import BitAllocation, EmbeddingBits, LayerShape
from hessq.data import synth_dataset
from hessq.groups import (
    GroupPolicy,
    build_group_spec,
    group_ranges,
    groupwise_dequantize,
    groupwise_quantize,
)
from hessq.hessian import (
    eig_distribution,
    landscape_grid,
    power_iteration,
    sensitivity,
    top2_eigen,
)
from hessq.model import ModelConfig, build_model
from hessq.quantizer import QuantRange, QuantSpec, dequantize, quantize_forward
from hessq.reporting import attention_kl
from hessq.training import QuantSettings, TrainConfig, qat_finetune, train_baseline

SEEDS = (0, 1, 2)


# -- shared fixtures ----------------------------------------------------------------


def quadratic_graph(A_mat):
    """loss(w) = 0.5 w^T A w with symmetric A: the Hessian is exactly A."""
    A_mat = np.asarray(A_mat, dtype=np.float64)
    n = A_mat.shape[0]
    params = {"w": T.parameter(np.zeros((n, 1)))}

    def loss_fn(p, inputs, labels):
        quad = T.sum_all(T.mul(p["w"], T.matmul(T.constant(A_mat), p["w"])))
        return T.mul(quad, T.constant(np.asarray(0.5)))

    return T.Graph(params, {"w": ["w"]}, loss_fn)


def mlp_graph(seed=7):
    """A 26-parameter two-layer tanh classifier over the autodiff graph."""
    rng = np.random.default_rng(seed)
    params = {
        "w1": T.parameter(rng.standard_normal((4, 3)) * 0.7),
        "b1": T.parameter(rng.standard_normal(4) * 0.1),
        "w2": T.parameter(rng.standard_normal((2, 4)) * 0.7),
        "b2": T.parameter(rng.standard_normal(2) * 0.1),
    }

    def loss_fn(p, inputs, labels):
        h = T.tanh(T.add(T.matmul(T.constant(inputs), T.transpose(p["w1"], (1, 0))), p["b1"]))
        logits = T.add(T.matmul(h, T.transpose(p["w2"], (1, 0))), p["b2"])
        return T.cross_entropy_logits(logits, labels)

    graph = T.Graph(params, {"mlp": ["w1", "b1", "w2", "b2"]}, loss_fn)
    inputs = rng.standard_normal((16, 3))
    labels = rng.integers(0, 2, size=16)
    return graph, (inputs, labels)


def layer_grad(graph, batch, layer):
    gs = T.grad(graph.loss(*batch), graph.group_params(layer))
    return np.concatenate([g.data.ravel() for g in gs])


def dense_hessian(graph, batch, layer):
    n = graph.group_size(layer)
    mat = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        mat[:, i] = T.hvp(graph, batch, layer, e)
    return mat


@pytest.fixture(scope="module")
def trained():
    """Per-seed trained baselines shared by the fine-tuning and KL checks."""
    t0 = time.monotonic()
    state = {}
    for seed in SEEDS:
        mcfg = ModelConfig(seed=seed)
        model = build_model(mcfg)
        tr = synth_dataset("contains_pattern", 768, mcfg, seed + 10)
        ev = synth_dataset("contains_pattern", 256, mcfg, seed + 20)
        metrics = train_baseline(model, tr, ev, TrainConfig(epochs=12, lr=0.01, seed=seed + 30))
        state[seed] = {
            "cfg": mcfg,
            "model": model,
            "train": tr,
            "eval": ev,
            "base_acc": metrics[-1]["eval_acc"],
        }
    state["elapsed"] = time.monotonic() - t0
    return state


# -- criteria -----------------------------------------------------------------------


def test_criterion_01_quantizer_exactness(record_property):
    record_property("acceptance", (1, "quantizer worked example and property suite"))
    t0 = time.monotonic()

    qr = QuantRange.from_bounds(0.0, 1.0, 2)
    qt = quantize_forward(np.array([-1.0, 0.25, 0.9, 2.0]), qr, 2)
    assert qt.codes.tolist() == [0, 1, 3, 3]
    np.testing.assert_array_equal(dequantize(qt), [0.0, 1.0 / 3.0, 1.0, 1.0])

    # property suite over 10^4 independent tensors (rows of one grouped matrix)
    rng = np.random.default_rng(11)
    n_tensors, width = 10_000, 24
    x = rng.standard_normal((n_tensors, width)) * rng.uniform(0.1, 10.0, (n_tensors, 1))
    x += rng.uniform(-3.0, 3.0, (n_tensors, 1))
    gspec = build_group_spec(n_tensors, 1, "bucketed", bucket_size=1)
    starts = np.asarray(gspec.starts, dtype=np.int64)
    prev_deltas = None
    for bits in (2, 3, 4, 8):
        gq = groupwise_quantize(x, gspec, QuantSpec(bits))
        deq = groupwise_dequantize(gq)
        deltas = np.array([r.delta for r in gq.ranges])
        # codes live in [0, 2^k - 1]
        assert gq.codes.min() >= 0
        assert gq.codes.max() <= 2**bits - 1
        # error is bounded by half a step everywhere inside the range
        assert np.all(np.abs(deq - x).max(axis=1) <= deltas / 2)
        # requantizing against the same ranges is a fixed point, bit for bit
        lo = np.array([r.q0 for r in gq.ranges])
        hi = np.array([r.q_max for r in gq.ranges])
        codes2, deq2 = kernels.fake_quant_grouped(deq, starts, lo, hi, 2**bits)
        np.testing.assert_array_equal(codes2, gq.codes)
        np.testing.assert_array_equal(deq2, deq)
        # refinement: every extra bit strictly shrinks the step size
        if prev_deltas is not None:
            assert np.all(deltas < prev_deltas)
        prev_deltas = deltas

    assert time.monotonic() - t0 < 5.0


def test_criterion_02_hvp_matches_finite_differences(record_property):
    record_property("acceptance", (2, "exact HVP vs finite-difference gradient"))
    t0 = time.monotonic()
    graph, batch = mlp_graph()
    n = graph.group_size("mlp")
    assert n <= 50
    base = graph.get_flat("mlp").copy()
    rng = np.random.default_rng(3)
    eps = 1e-4
    for _ in range(3):
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        hv = T.hvp(graph, batch, "mlp", v)
        graph.set_flat("mlp", base + eps * v)
        g_plus = layer_grad(graph, batch, "mlp")
        graph.set_flat("mlp", base - eps * v)
        g_minus = layer_grad(graph, batch, "mlp")
        graph.set_flat("mlp", base)
        fd = (g_plus - g_minus) / (2 * eps)
        assert np.linalg.norm(hv - fd) <= 1e-6 * np.linalg.norm(fd)

    # symmetry: v . Hu == u . Hv
    for _ in range(3):
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        s1 = float(v @ T.hvp(graph, batch, "mlp", u))
        s2 = float(u @ T.hvp(graph, batch, "mlp", v))
        assert abs(s1 - s2) <= 1e-8 * max(abs(s1), abs(s2))

    assert time.monotonic() - t0 < 10.0


def test_criterion_03_power_iteration_matches_dense_eigensolve(record_property):
    record_property("acceptance", (3, "power iteration vs dense eigensolve"))
    t0 = time.monotonic()

    graph, batch = mlp_graph()
    hess = dense_hessian(graph, batch, "mlp")
    hess = (hess + hess.T) / 2
    eigs = np.linalg.eigvalsh(hess)
    lam_star = eigs[np.argmax(np.abs(eigs))]
    est = power_iteration(graph, batch, "mlp", max_iters=2000, tol=1e-9, seed=0)
    assert abs(est.eigenvalue - lam_star) <= 1e-3 * abs(lam_star)

    # negative dominant eigenvalue must come out signed
    neg = quadratic_graph(np.diag([-5.0, 2.0, 1.0]))
    est_neg = power_iteration(neg, (None, None), "w", max_iters=500, tol=1e-9, seed=0)
    assert abs(est_neg.eigenvalue - (-5.0)) <= 1e-3 * 5.0

    assert time.monotonic() - t0 < 30.0


def test_criterion_04_sensitivity_metric_exact(record_property):
    record_property("acceptance", (4, "sensitivity = |mean| + std, exact cases"))
    assert sensitivity([-1.0, 3.0]) == 3.0
    assert sensitivity([5.0, 5.0]) == 5.0  # zero variance
    assert sensitivity([-2.0, -2.0]) == 2.0  # sign folds into magnitude
    assert sensitivity([-3.0, 1.0]) == 3.0


def test_criterion_05_group_counts_and_error_dominance(record_property):
    record_property("acceptance", (5, "group counts and error-bound dominance"))
    assert build_group_spec(768, 12, "per_head").n_groups == 12
    assert build_group_spec(768, 12, "bucketed", bucket_size=6).n_groups == 128

    # dominance over 10^3 random tensors: each tensor is a 16-row block, and
    # splitting it into four 4-row groups never widens any quantization step
    rng = np.random.default_rng(5)
    n_tensors, rows_per, cols = 1000, 16, 8
    big = rng.standard_normal((n_tensors * rows_per, cols))
    big *= rng.uniform(0.2, 5.0, (n_tensors * rows_per, 1))
    spec_layer = build_group_spec(n_tensors * rows_per, 1, "bucketed", bucket_size=rows_per)
    spec_group = build_group_spec(n_tensors * rows_per, 1, "bucketed", bucket_size=4)
    q = QuantSpec(3)
    d_layer = np.array([r.delta for r in group_ranges(big, spec_layer, q)])
    d_group = np.array([r.delta for r in group_ranges(big, spec_group, q)])
    assert np.all(d_group.reshape(n_tensors, 4).max(axis=1) <= d_layer)

    gq = groupwise_quantize(big, spec_group, q)
    deq = groupwise_dequantize(gq)
    err_rows = np.abs(deq - big).max(axis=1)
    assert np.all(err_rows <= np.repeat(d_group / 2, 4))


def test_criterion_06_size_table_reproduction(record_property):
    record_property("acceptance", (6, "published size table within 2%"))
    t0 = time.monotonic()
    shapes = (
        [LayerShape("embedding", "embedding", 23_800_000)]
        + [LayerShape(f"encoder.{i}", "encoder", 7_100_000) for i in range(12)]
        + [LayerShape("output", "output", 10_000)]
    )

    def size(layer_bits):
        alloc = BitAllocation(layer_bits, EmbeddingBits(8, 8), 8)
        rep = A.model_size(alloc, shapes)
        return rep.total_mb, rep.no_embedding_mb

    def close(got, want):
        return abs(got - want) <= 0.02 * want

    expected = {8: (103.9, 81.2), 4: (63.4, 40.6), 3: (53.2, 30.5), 2: (43.1, 20.4)}
    for bits, (want_total, want_no_emb) in expected.items():
        total, no_emb = size({f"encoder.{i}": bits for i in range(12)})
        assert close(total, want_total), (bits, total, want_total)
        assert close(no_emb, want_no_emb), (bits, no_emb, want_no_emb)

    # two-level 2/3-bit mixes: six high-precision layers on one task, four on the other
    for high, want_total in ((6, 48.1), (4, 46.1)):
        total, _ = size({f"encoder.{i}": (3 if i < high else 2) for i in range(12)})
        assert close(total, want_total), (high, total, want_total)

    assert time.monotonic() - t0 < 1.0


def test_criterion_07_reverse_allocation_size_parity(record_property):
    record_property("acceptance", (7, "reversed allocation keeps size exactly"))
    n = 5
    shapes = (
        [LayerShape("embedding", "embedding", 23_800_000)]
        + [LayerShape(f"encoder.{i}", "encoder", 7_000_000) for i in range(n)]
        + [LayerShape("output", "output", 10_000)]
    )
    rng = np.random.default_rng(17)
    omegas = {f"encoder.{i}": float(v) for i, v in enumerate(rng.uniform(0.5, 9.0, n))}
    for high_count in range(n + 1):
        alloc = A.allocate_bits(omegas, [2, 3], high_count=high_count)
        rev = A.reverse_allocation(alloc, omegas)
        fwd_rep = A.model_size(alloc, shapes)
        rev_rep = A.model_size(rev, shapes)
        assert rev_rep.total_mb == fwd_rep.total_mb
        assert rev_rep.no_embedding_mb == fwd_rep.no_embedding_mb
        assert sorted(rev.layer_bits.values()) == sorted(alloc.layer_bits.values())


def test_criterion_08_qat_direction_checks(trained, record_property):
    record_property("acceptance", (8, "QAT accuracy direction checks over 3 seeds"))
    t0 = time.monotonic()
    rows = []
    for seed in SEEDS:
        st = trained[seed]
        model, tr, ev = st["model"], st["train"], st["eval"]
        qc = TrainConfig(epochs=4, lr=0.005, seed=seed + 30)

        def qat(layer_bits, policy):
            alloc = BitAllocation(dict(layer_bits), EmbeddingBits(8, 8), 8)
            res = qat_finetune(model.clone(), tr, ev, qc, QuantSettings(alloc, policy))
            return res.eval_acc

        enc = [f"encoder.{i}" for i in range(st["cfg"].n_layers)]
        acc8 = qat({k: 8 for k in enc}, GroupPolicy("per_head"))

        # probe curvature and let the allocator place the 3-bit budget
        graph = model.astype(np.float64).as_graph()
        omegas = {
            layer: sensitivity(eig_distribution(graph, tr, layer, runs=10, seed=seed + 40))
            for layer in enc
        }
        mp_bits = A.allocate_bits(omegas, [2, 3], high_count=1).layer_bits
        acc_mp = qat(mp_bits, GroupPolicy("per_head"))

        acc_d2 = qat({k: 2 for k in enc}, GroupPolicy("layerwise"))
        acc_g4 = qat({k: 3 for k in enc}, GroupPolicy("per_head"))
        acc_g1 = qat({k: 3 for k in enc}, GroupPolicy("layerwise"))
        rows.append((st["base_acc"], acc8, acc_mp, acc_d2, acc_g4, acc_g1))

    base, qat8, mp, d2, g4, g1 = np.array(rows).mean(axis=0)
    # (a) 8-bit fine-tuning stays within 2 accuracy points of full precision
    assert abs(qat8 - base) <= 0.02, (qat8, base)
    # (b) sensitivity-ranked 2/3-bit mix beats uniform 2-bit single-group
    assert mp >= d2, (mp, d2)
    # (c) more groups do not hurt at 3 bits (within half a point)
    assert g4 >= g1 - 0.005, (g4, g1)
    assert trained["elapsed"] + (time.monotonic() - t0) < 300.0


def test_criterion_09_attention_divergence_ordering(trained, record_property):
    record_property("acceptance", (9, "attention KL: group-wise below single-group"))
    vals = []
    for seed in SEEDS:
        st = trained[seed]
        model, ev, mcfg = st["model"], st["eval"], st["cfg"]

        def baked(policy):
            m2 = model.clone()
            arrays = m2.param_arrays()
            for name in m2.quantizable_names():
                if not name.startswith("encoder."):
                    continue
                arr = arrays[name]
                spec = policy.resolve(
                    arr.shape[0], mcfg.n_heads, name.endswith((".wq", ".wk", ".wv", ".wo"))
                )
                gq = groupwise_quantize(arr, spec, QuantSpec(3))
                arrays[name] = groupwise_dequantize(gq, dtype=arr.dtype)
            m2.load_arrays(arrays)
            return m2

        grouped = baked(GroupPolicy("per_head"))
        single = baked(GroupPolicy("layerwise"))
        kg = attention_kl(grouped.attention_traces, model.attention_traces, ev, 0.10, seed + 50)
        kd = attention_kl(single.attention_traces, model.attention_traces, ev, 0.10, seed + 50)
        vals.append((kg.per_layer.mean(), kd.per_layer.mean()))

    a = np.array(vals)
    assert a[:, 0].mean() <= a[:, 1].mean(), a

    # identical distributions diverge by exactly zero
    st = trained[SEEDS[0]]
    model, ev = st["model"], st["eval"]
    self_kl = attention_kl(model.attention_traces, model.attention_traces, ev, 0.10, 99)
    assert self_kl.per_head.max() == 0.0
    assert self_kl.per_layer.max() == 0.0


def test_criterion_10_landscape_grid(record_property):
    record_property("acceptance", (10, "landscape grid: exact center, quadratic form"))
    lam1, lam2 = 6.0, -4.0
    graph = quadratic_graph(np.diag([lam1, lam2, 1.0]))

    # the estimated top-2 pair is orthogonal after deflation
    e1, e2 = top2_eigen(graph, (None, None), "w", max_iters=2000, tol=1e-10, seed=0)
    assert abs(e1.eigenvalue - lam1) <= 1e-3 * abs(lam1)
    assert abs(e2.eigenvalue - lam2) <= 1e-3 * abs(lam2)
    assert abs(float(e1.eigenvector @ e2.eigenvector)) <= 1e-6

    # along the exact eigenplane the surface is the closed-form quadratic
    v1 = np.array([1.0, 0.0, 0.0])
    v2 = np.array([0.0, 1.0, 0.0])
    grid = landscape_grid(graph, (None, None), "w", v1, v2, extent=1.5, resolution=7)
    a = grid.offsets[:, None]
    b = grid.offsets[None, :]
    closed = 0.5 * lam1 * a**2 + 0.5 * lam2 * b**2
    assert np.abs(grid.losses - closed).max() <= 1e-8
    assert grid.center_loss == 0.0

    # center cell of an off-origin surface is bit-equal to the standalone loss
    graph.set_flat("w", np.array([0.3, -0.2, 0.5]))
    with T.no_grad():
        standalone = float(graph.loss(None, None).data)
    grid2 = landscape_grid(graph, (None, None), "w", v1, v2, extent=0.7, resolution=5)
    assert grid2.center_loss == standalone
    assert grid2.losses[2, 2] == standalone
    np.testing.assert_array_equal(graph.get_flat("w"), [0.3, -0.2, 0.5])


def test_criterion_11_pipeline_byte_determinism(tmp_path, record_property):
    record_property("acceptance", (11, "pipeline reruns are byte-identical"))
    cfg = {
        "model": {
            "vocab": 12,
            "max_len": 6,
            "d_model": 8,
            "n_heads": 2,
            "n_layers": 2,
            "ffn_dim": 12,
            "seed": 0,
        },
        "task": {"name": "majority_token", "train_size": 96, "eval_size": 48, "seed": 1},
        "train": {"epochs": 1},
        "qat": {"epochs": 1},
        "probe": {"shard_fraction": 0.25, "runs": 2, "max_iters": 15},
        "landscape": {"resolution": 3, "batch": 24, "extent": 0.5},
        "kl": {"fraction": 0.5},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))

    def tree_hashes(out):
        res = subprocess.run(
            [sys.executable, "-m", "hessq.cli", "pipeline", "--config", str(cfg_path), "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert res.returncode == 0, res.stderr
        return {
            str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(out).rglob("*"))
            if p.is_file()
        }

    first = tree_hashes(tmp_path / "run_a")
    second = tree_hashes(tmp_path / "run_b")
    assert first
    assert first == second
