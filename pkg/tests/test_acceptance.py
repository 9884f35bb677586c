"""Acceptance suite: twelve headline criteria, one printed verdict each.

Criteria 7, 8, 9, and 11 share one desk-scale experiment sweep (module
fixture `sweep`): three seeds of MiniResNet-8 on the bundled digit set,
IMP to 91.4% sparsity, vanilla / tweaked / swish-only retrains at the two
top levels, one-shot counterparts, and curvature probes. Expect about
fifteen minutes of CPU time on first use.
"""

import dataclasses
import hashlib
import math
import sys
import time
from types import SimpleNamespace

import numpy as np
import pytest

from ticketlab.archive import load_archive, save_archive
from ticketlab.autograd import Graph, Tensor, grad_check
from ticketlab.config import parse_config_text
from ticketlab.datasets import load_dataset
from ticketlab.diagnostics import (
    CurvatureProbe,
    hvp,
    power_iteration,
    probe_batches,
    top_eigenvalue,
)
from ticketlab.models import (
    ArchSpec,
    Layer,
    activation_sparsity,
    build_graph,
    build_model,
    make_arch,
)
from ticketlab.pruning import (
    PruneSchedule,
    apply_mask,
    full_mask,
    global_magnitude_prune,
    imp_schedule,
)
from ticketlab.recipe import kd_loss, smooth_labels
from ticketlab.report import build_report, load_checkpoint, save_checkpoint
from ticketlab.training import (
    find_masks,
    model_logits,
    retrain_level,
    run_pipeline,
    train_dense,
)
import ticketlab.training as training_mod


def verdict(capsys, num, text, ok):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {text}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def say(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness on random graphs


def _rand_dense_graph(rng):
    g = Graph()
    x = g.input("x")
    node = x
    in_w = 5
    width = int(rng.integers(3, 7))
    for layer in range(int(rng.integers(1, 4))):
        w = g.param(f"w{layer}", Tensor(rng.standard_normal((in_w, width)) * 0.6))
        node = g.matmul(node, w)
        if rng.random() < 0.7:
            b = g.param(f"b{layer}", Tensor(rng.standard_normal(width) * 0.1))
            node = g.add(node, b)
        act = ("swish", "mish", "none")[int(rng.integers(0, 3))]
        if act == "swish":
            node = g.swish(node)
        elif act == "mish":
            node = g.mish(node)
        in_w = width
    if rng.random() < 0.5:
        node = g.log_softmax(node, axis=1)
    else:
        node = g.softmax(node, axis=1)
    node = g.mul(node, g.const(rng.standard_normal((4, width))))
    if rng.random() < 0.5:
        node = g.neg(node)
    g.mark_loss(g.mean(g.sum(node, axis=1)))
    return g, {"x": rng.standard_normal((4, 5)).astype(np.float32)}


def _rand_conv_graph(rng):
    g = Graph()
    x = g.input("x")
    cin = int(rng.integers(1, 3))
    cout = int(rng.integers(2, 4))
    w = g.param("w", Tensor(rng.standard_normal((cout, cin, 3, 3)) * 0.5))
    h = g.conv2d(x, w, stride=int(rng.integers(1, 3)), pad=1)
    if rng.random() < 0.7:
        gamma = g.param("gamma", Tensor(np.ones(cout)))
        beta = g.param("beta", Tensor(np.zeros(cout)))
        h = g.batchnorm(h, gamma, beta, Tensor(np.zeros(cout)), Tensor(np.ones(cout)))
    h = g.swish(h) if rng.random() < 0.5 else g.mish(h)
    if rng.random() < 0.5:
        h = g.global_avg_pool(h)
    else:
        h = g.flatten(h)
    h = g.scale(h, 0.5)
    g.mark_loss(g.mean(h))
    return g, {"x": rng.standard_normal((2, cin, 6, 6)).astype(np.float32)}


def _rand_relu_graph(rng):
    g = Graph()
    x = g.input("x")
    w1 = g.param("w1", Tensor(rng.standard_normal((5, 6)) * 0.6))
    w2 = g.param("w2", Tensor(rng.standard_normal((6, 3)) * 0.6))
    h = g.relu(g.matmul(x, w1))
    h = g.matmul(h, w2)
    g.mark_loss(g.neg(g.mean(g.sum(g.mul(h, h), axis=1))))
    return g, {"x": rng.standard_normal((4, 5)).astype(np.float32)}


def test_criterion_01_gradient_correctness(capsys):
    rng = np.random.default_rng(20240817)
    t0 = time.time()
    errs = []
    ops_seen = set()
    builders = [_rand_dense_graph] * 10 + [_rand_conv_graph] * 6 + [_rand_relu_graph] * 4
    for i, build in enumerate(builders):
        g, xs = build(rng)
        ops_seen |= {n.op for n in g.nodes}
        # eps small enough that O(eps^2) truncation stays below the bound
        # even for the worst-conditioned batchnorm graph in the set
        err = grad_check(g, xs, eps=1e-4)
        errs.append(err)
        assert err < 1e-4, f"graph {i}: {err}"
    assert len(builders) == 20
    required = {"matmul", "conv2d", "add", "mul", "neg", "scale", "relu",
                "swish", "mish", "softmax", "log_softmax", "sum", "mean",
                "batchnorm", "flatten", "global_avg_pool"}
    missing = required - ops_seen
    assert not missing, f"op kinds never exercised: {missing}"

    # pure quadratics: central differences are exact up to roundoff
    qerrs = []
    for seed in (1, 2):
        q = np.random.default_rng(seed)
        g = Graph()
        w = g.param("w", Tensor(q.standard_normal((4, 4))))
        a = g.const(q.standard_normal((4, 4)))
        g.mark_loss(g.mean(g.mul(g.add(w, a), g.add(w, a))))
        qerrs.append(grad_check(g, eps=1e-4))
        assert qerrs[-1] < 1e-6
    dt = time.time() - t0
    assert dt < 60.0
    verdict(capsys, 1,
            f"grad_check on 20 random graphs: max err {max(errs):.2e} < 1e-4, "
            f"quadratics {max(qerrs):.2e} < 1e-6 ({dt:.1f}s)", True)


# ---------------------------------------------------------------------------
# criterion 2: HVP against an explicit finite-difference Hessian oracle


def _tiny_mlp(seed=4):
    spec = ArchSpec(
        name="tiny", input_shape=(2,), num_classes=3, activation_kind="swish",
        layers=[
            Layer(kind="dense", name="fc1", units=4, bias=True),
            Layer(kind="activation", name="fc1.act", act="swish"),
            Layer(kind="dense", name="head", units=3, bias=True),
        ])
    return build_model(spec, seed)


class _FlatProblem:
    """Independent flat view of the hard-CE loss for the oracle Hessian."""

    def __init__(self, model, batch):
        x, y = batch
        self.x = np.asarray(x)
        self.t = np.eye(model.spec.num_classes)[np.asarray(y, dtype=np.int64)]
        g, logits = build_graph(model)
        tn = g.input("t")
        ls = g.log_softmax(logits, axis=1)
        g.mark_loss(g.neg(g.mean(g.sum(g.mul(ls, tn), axis=1))))
        self.g = g
        self.leaves = g.trainable_leaves()
        self.shapes = [l.tensor.data.shape for l in self.leaves]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.w0 = np.concatenate(
            [l.tensor.data.astype(np.float64).reshape(-1) for l in self.leaves])

    def grad(self, w):
        pos = 0
        for leaf, shape, size in zip(self.leaves, self.shapes, self.sizes):
            leaf.tensor.data = w[pos:pos + size].reshape(shape)
            pos += size
        self.g.forward({"x": self.x, "t": self.t}, training=False,
                       update_stats=False, dtype=np.float64)
        self.g.backward()
        return np.concatenate(
            [np.asarray(l.grad, dtype=np.float64).reshape(-1)
             for l in self.leaves])


def _explicit_hessian(problem, eps=1e-5):
    n = problem.w0.size
    H = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        H[:, i] = (problem.grad(problem.w0 + e) - problem.grad(problem.w0 - e)) / (2 * eps)
    return 0.5 * (H + H.T)


def test_criterion_02_hvp_oracle(capsys):
    t0 = time.time()
    model = _tiny_mlp()
    n_params = sum(p.data.size for p in model.params.values())
    assert n_params <= 60
    rng = np.random.default_rng(11)
    x = rng.standard_normal((16, 2)).astype(np.float32)
    y = rng.integers(0, 3, size=16)
    batch = (x, y)

    H = _explicit_hessian(_FlatProblem(build_model(model.spec, 4), batch))

    worst = 0.0
    for k in range(5):
        v = {name: np.random.default_rng(100 + k).standard_normal(p.data.shape)
             for name, p in model.params.items()}
        hv = hvp(model, None, batch, v)
        flat_v = np.concatenate([np.asarray(v[l.name], dtype=np.float64).reshape(-1)
                                 for l in _FlatProblem(model, batch).leaves])
        flat_hv = np.concatenate(
            [np.asarray(hv[l.name], dtype=np.float64).reshape(-1)
             for l in _FlatProblem(model, batch).leaves])
        ref = H @ flat_v
        rel = np.abs(flat_hv - ref).max() / max(np.abs(ref).max(), 1e-12)
        worst = max(worst, rel)
        assert rel < 1e-3, f"probe {k}: {rel}"

    oracle_top = float(np.linalg.eigvalsh(H).max())
    probe = CurvatureProbe(batches=[batch], seed=0, tol=1e-8, max_iters=500)
    est = top_eigenvalue(model, None, probe)
    eig_rel = abs(est.value - oracle_top) / abs(oracle_top)
    assert eig_rel < 0.01, f"{est.value} vs oracle {oracle_top}"
    dt = time.time() - t0
    assert dt < 60.0
    verdict(capsys, 2,
            f"hvp vs explicit Hessian: max rel err {worst:.2e} < 1e-3; "
            f"top eigenvalue off by {eig_rel:.2%} < 1% ({dt:.1f}s)", True)


# ---------------------------------------------------------------------------
# criterion 3: IMP schedule algebra


def test_criterion_03_imp_schedule(capsys):
    got = imp_schedule(0.2, 11)
    want = [1.0 - 0.8 ** n for n in range(1, 12)]
    diff = max(abs(a - b) for a, b in zip(got, want))
    assert len(got) == 11
    assert diff <= 1e-12
    # the sparsity grid the sweep walks: 20%, 36%, ..., 91%
    assert got[0] == pytest.approx(0.20, abs=1e-12)
    assert got[1] == pytest.approx(0.36, abs=1e-12)
    assert round(got[3], 2) == 0.59
    assert round(got[10], 2) == 0.91
    verdict(capsys, 3,
            f"imp_schedule(0.2, 11) == 1-0.8^n to {diff:.1e} <= 1e-12 "
            "(grid 20/36/.../91%)", True)


# ---------------------------------------------------------------------------
# criterion 4: mask discipline over a full pipeline


def test_criterion_04_mask_discipline(capsys, monkeypatch):
    leak = {"max": 0.0, "steps": 0}
    real_step = training_mod.sgd_step

    def watched(model, grads, mask, opt, lr):
        real_step(model, grads, mask, opt, lr)
        if mask is not None:
            for name in mask.prunable:
                w = model.params[name].data
                off = mask.blocks[name] == 0
                leak["max"] = max(leak["max"], float(np.abs(w[off]).sum()))
            leak["steps"] += 1

    monkeypatch.setattr(training_mod, "sgd_step", watched)
    cfg = parse_config_text(
        "model.arch = mlp-300-100\ndata.dataset = blobs\n"
        "trainer.epochs = 2\ntrainer.batch_size = 256\n"
        "prune.per_round = 0.5\nprune.rounds = 3\ntrainer.seed = 1\n"
    )
    result = run_pipeline(cfg)
    assert leak["steps"] > 0
    assert leak["max"] == 0.0

    masks = [m for _, m in result.masks]
    assert len(masks) == 3
    nested = all(masks[i + 1].is_subset_of(masks[i]) for i in range(len(masks) - 1))
    assert nested
    verdict(capsys, 4,
            f"masked |w| sum stayed 0 across {leak['steps']} optimizer steps; "
            "IMP masks nested across 3 rounds", True)


# ---------------------------------------------------------------------------
# criterion 5: BN absorbs linear scaling of bias-free convs


def test_criterion_05_bn_absorption(capsys):
    ds = load_dataset("digits")
    x = ds.x_pool[:64]
    model = build_model(make_arch("miniresnet-8", ds.input_shape,
                                  ds.num_classes), 0)

    def batch_logits(m):
        g, logits = build_graph(m)
        g.mark_loss(g.mean(logits))
        # normalization mode: batch statistics drive BN
        g.forward({"x": x}, training=True, update_stats=False)
        return g.value_of(g.nodes[logits.id]).copy()

    y0 = batch_logits(model)
    scale_y0 = float(np.abs(y0).max())
    worst = 0.0
    for block in ("stem.conv.w", "b2.conv1.w"):
        orig = model.params[block].data.copy()
        for c in (0.25, 4.0):
            model.params[block].data = orig * c
            yc = batch_logits(model)
            rel = float(np.abs(yc - y0).max()) / scale_y0
            worst = max(worst, rel)
            assert rel < 1e-5, f"{block} x{c}: {rel}"
        model.params[block].data = orig
    verdict(capsys, 5,
            f"scaling bias-free convs by 0.25/4 moved outputs by "
            f"{worst:.2e} < 1e-5 relative", True)


# ---------------------------------------------------------------------------
# criterion 6: label math


def test_criterion_06_label_math(capsys):
    onehot = np.zeros(100)
    onehot[7] = 1.0
    t = smooth_labels(onehot, 0.1, 100)
    assert float(t.probs.sum()) == 1.0
    assert t.probs[7] == pytest.approx(0.901, abs=1e-12)
    off = np.delete(t.probs, 7)
    assert np.allclose(off, 0.001, atol=1e-12)

    z = np.array([1.0, -2.0, 0.5])
    self_kl = kd_loss(z, z, tau=4.0)
    assert abs(self_kl) < 1e-12

    worked = kd_loss(np.array([0.0, 0.0]), np.array([math.log(3.0), 0.0]), 1.0)
    want = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert worked == pytest.approx(want, abs=1e-12)
    assert worked == pytest.approx(0.130812, abs=1e-5)
    verdict(capsys, 6,
            f"smooth labels 0.901/0.001 summing to 1; kd self-loss 0; "
            f"worked value {worked:.6f} within 1e-5 of 0.130812", True)


# ---------------------------------------------------------------------------
# the shared desk-scale sweep for criteria 7, 8, 9, 11

# eleven rounds of 20% put the top two levels at 89.3% and 91.4% sparsity,
# where the retraining tweaks are expected to earn their keep
BASE_CFG = """
model.arch = miniresnet-8
data.dataset = digits
trainer.epochs = 20
prune.per_round = 0.2
prune.rounds = 11
"""

TWEAKS_CFG = (
    "recipe.skips = true\nrecipe.activation = swish\n"
    "recipe.rescale_init = true\nrecipe.loss = ls\n"
)


@pytest.fixture(scope="module")
def sweep():
    t_total = time.time()
    ds = load_dataset("digits")
    van0 = parse_config_text(BASE_CFG)
    twk0 = parse_config_text(BASE_CFG + TWEAKS_CFG)
    swish0 = parse_config_text(BASE_CFG + "recipe.activation = swish\n")
    # the one-shot comparison gets the whole toolbox, rewind included
    omp0 = parse_config_text(BASE_CFG + TWEAKS_CFG + "recipe.rewind = true\n")

    seeds = (0, 1, 2)
    per_seed = {}
    act7 = None
    t_c7 = 0.0
    for seed in seeds:
        t_seed = time.time()
        cfg_v = dataclasses.replace(van0, seed=seed)
        cfg_t = dataclasses.replace(twk0, seed=seed)
        cfg_s = dataclasses.replace(swish0, seed=seed)
        say(f"[sweep] seed {seed}: dense + 11 IMP rounds")
        dense = train_dense(cfg_v, ds)
        masks = find_masks(cfg_v, dense, ds)
        t_find = time.time() - t_seed

        levels = {}
        for r in (10, 11):
            sp, mask = masks[r - 1]
            say(f"[sweep] seed {seed}: retrain round {r} (sparsity {sp:.3f})")
            levels[r] = SimpleNamespace(
                sparsity=sp,
                vanilla=retrain_level(cfg_v, dense, mask, r, ds),
                tweaked=retrain_level(cfg_t, dense, mask, r, ds),
            )

        # curvature is an activation story: compare a hard-label swish
        # retrain against the vanilla relu one so nothing else differs
        say(f"[sweep] seed {seed}: curvature probes")
        sp_top, mask_top = masks[10]
        lv_swish = retrain_level(cfg_s, dense, mask_top, 11, ds)
        batches = probe_batches(ds.x_pool, ds.y_pool, n=10, batch_size=128,
                                seed=0)
        probe = CurvatureProbe(batches=batches, seed=0)
        mv = build_model(make_arch("miniresnet-8", ds.input_shape,
                                   ds.num_classes), seed)
        mv.load_state(levels[11].vanilla.train_result.best_state)
        mt = build_model(make_arch("miniresnet-8", ds.input_shape,
                                   ds.num_classes,
                                   activation_kind="swish"), seed)
        mt.load_state(lv_swish.train_result.best_state)
        eig_relu = top_eigenvalue(mv, mask_top, probe)
        eig_swish = top_eigenvalue(mt, mask_top, probe)

        say(f"[sweep] seed {seed}: one-shot counterpart")
        omp_sched = PruneSchedule(mode="omp", per_round_fraction=0.2,
                                  rounds=1, target_sparsity=0.89)
        cfg_vo = dataclasses.replace(cfg_v, prune=omp_sched)
        cfg_to = dataclasses.replace(
            dataclasses.replace(omp0, seed=seed), prune=omp_sched)
        (osp, omask), = find_masks(cfg_vo, dense, ds)
        omp = SimpleNamespace(
            sparsity=osp,
            cfg_vanilla=cfg_vo,
            vanilla=retrain_level(cfg_vo, dense, omask, 1, ds),
            tweaked=retrain_level(cfg_to, dense, omask, 1, ds),
            dense=dense,
            mask=omask,
        )

        per_seed[seed] = SimpleNamespace(
            dense=dense, masks=masks, levels=levels,
            eig_relu=eig_relu, eig_swish=eig_swish, omp=omp)

        if seed == 0:
            # criterion 7 add-on: relu vs swish-only retrains at round 8
            t7 = time.time()
            sp8, mask8 = masks[7]
            lv_r = retrain_level(cfg_v, dense, mask8, 8, ds)
            lv_s = retrain_level(cfg_s, dense, mask8, 8, ds)
            mr = build_model(make_arch("miniresnet-8", ds.input_shape,
                                       ds.num_classes), seed)
            mr.load_state(lv_r.train_result.best_state)
            ms = build_model(make_arch("miniresnet-8", ds.input_shape,
                                       ds.num_classes,
                                       activation_kind="swish"), seed)
            ms.load_state(lv_s.train_result.best_state)
            act7 = SimpleNamespace(
                sparsity=sp8,
                relu=activation_sparsity(mr, ds.x_test),
                swish=activation_sparsity(ms, ds.x_test),
                relu_acc=lv_r.test_accuracy,
                swish_acc=lv_s.test_accuracy,
            )
            t_c7 = t_find + (time.time() - t7)
        say(f"[sweep] seed {seed} done in {time.time() - t_seed:.0f}s")

    return SimpleNamespace(seeds=seeds, runs=per_seed, act7=act7,
                           t_c7=t_c7, wall=time.time() - t_total)


@pytest.mark.slow
def test_criterion_07_activation_sparsity_ordering(capsys, sweep):
    a = sweep.act7
    assert a.sparsity >= 0.80
    layers = sorted(a.relu)
    assert layers == sorted(a.swish)
    for name in layers:
        assert a.swish[name] < 0.05, f"{name}: swish {a.swish[name]:.4f}"
        assert a.relu[name] > 10.0 * a.swish[name], (
            f"{name}: relu {a.relu[name]:.4f} vs swish {a.swish[name]:.6f}")
    assert sweep.t_c7 < 30 * 60
    min_ratio = min(
        a.relu[n] / a.swish[n] if a.swish[n] > 0 else float("inf")
        for n in layers)
    shown = "infinite" if math.isinf(min_ratio) else f"{min_ratio:.0f}x"
    verdict(capsys, 7,
            f"at {a.sparsity:.1%} sparsity ReLU act-sparsity > 10x Swish in "
            f"all {len(layers)} layers (min ratio {shown}), Swish < 5% "
            f"everywhere ({sweep.t_c7:.0f}s < 30min)", True)


@pytest.mark.slow
def test_criterion_08_tweak_benefit(capsys, sweep):
    assert sweep.runs[0].levels[11].sparsity >= 0.89
    means = {}
    for r in (10, 11):
        mv = np.mean([sweep.runs[s].levels[r].vanilla.test_accuracy
                      for s in sweep.seeds])
        mt = np.mean([sweep.runs[s].levels[r].tweaked.test_accuracy
                      for s in sweep.seeds])
        means[r] = (mv, mt)
        assert mt >= mv, f"round {r}: tweaked mean {mt:.4f} < vanilla {mv:.4f}"
    gaps = []
    for s in sweep.seeds:
        gap = np.mean([sweep.runs[s].levels[r].tweaked.test_accuracy
                       - sweep.runs[s].levels[r].vanilla.test_accuracy
                       for r in (10, 11)])
        gaps.append(gap)
    nonneg = sum(g >= 0 for g in gaps)
    assert nonneg >= 2, f"per-seed gaps {gaps}"
    assert sweep.wall < 2 * 3600
    summary = ", ".join(
        f"r{r}: {means[r][1]:.3f} vs {means[r][0]:.3f}" for r in (10, 11))
    verdict(capsys, 8,
            f"tweaked mean >= vanilla at both top levels ({summary}); gap >= 0 "
            f"in {nonneg}/3 seeds ({sweep.wall:.0f}s < 2h)", True)


@pytest.mark.slow
def test_criterion_09_curvature_ordering(capsys, sweep):
    wins = 0
    pairs = []
    for s in sweep.seeds:
        relu = sweep.runs[s].eig_relu.value
        swish = sweep.runs[s].eig_swish.value
        pairs.append((relu, swish))
        if swish < relu:
            wins += 1
    assert wins >= 2, f"eigenvalue pairs (relu, swish): {pairs}"
    sp = sweep.runs[0].levels[11].sparsity
    shown = "; ".join(f"s{s}: {r:.1f} vs {w:.1f}"
                      for s, (r, w) in zip(sweep.seeds, pairs))
    verdict(capsys, 9,
            f"activation-only swish retrain has lower top eigenvalue than "
            f"relu at {sp:.1%} sparsity in {wins}/3 seeds ({shown})", True)


def test_criterion_10_tweaks_isolation(capsys, tmp_path):
    cfg_v = parse_config_text(
        "model.arch = mlp-300-100\ndata.dataset = blobs\n"
        "trainer.epochs = 2\ntrainer.batch_size = 256\n"
        "prune.per_round = 0.5\nprune.rounds = 2\ntrainer.seed = 3\n"
    )
    # every retraining knob on at once, rewind included
    cfg_t = parse_config_text(
        "model.arch = mlp-300-100\ndata.dataset = blobs\n"
        "trainer.epochs = 2\ntrainer.batch_size = 256\n"
        "prune.per_round = 0.5\nprune.rounds = 2\ntrainer.seed = 3\n"
        + TWEAKS_CFG + "recipe.rewind = true\n"
    )
    res_v = run_pipeline(cfg_v)
    res_t = run_pipeline(cfg_t)

    ds = load_dataset("blobs")
    model = build_model(make_arch("mlp-300-100", ds.input_shape,
                                  ds.num_classes), 3)

    def dense_hashes(res, tag):
        out = []
        stage = res.dense
        states = {
            "init": (stage.init_state, 0),
            "rewind": (stage.rewind_state, stage.rewind_epoch),
            "best": (stage.result.best_state, stage.result.best_epoch),
            "final": (stage.result.final_state, 2),
        }
        for key, (state, epoch) in states.items():
            model.load_state(state)
            p = tmp_path / f"{tag}_{key}.ltkt"
            save_checkpoint(str(p), model, epoch=epoch, seed=3,
                            dataset="blobs")
            out.append(hashlib.sha256(p.read_bytes()).hexdigest())
        return out

    hv = dense_hashes(res_v, "v")
    ht = dense_hashes(res_t, "t")
    assert hv == ht
    # mask finding is part of the pre-tweak stages too
    for (sa, ma), (sb, mb) in zip(res_v.masks, res_t.masks):
        assert sa == sb
        for name in ma.prunable:
            assert np.array_equal(ma.blocks[name], mb.blocks[name])
    verdict(capsys, 10,
            "vanilla and tweaked pipelines (same seed) wrote byte-identical "
            "dense checkpoints (4/4 hash matches) and identical masks", True)


@pytest.mark.slow
def test_criterion_11_omp_hook(capsys, sweep):
    wins = 0
    rows = []
    for s in sweep.seeds:
        o = sweep.runs[s].omp
        assert o.sparsity == pytest.approx(0.89, abs=0.002)
        if o.tweaked.test_accuracy >= o.vanilla.test_accuracy:
            wins += 1
        rows.append((o.vanilla.test_accuracy, o.tweaked.test_accuracy))
    assert wins >= 2, f"omp accuracy pairs: {rows}"

    # the omp run emits the same report shape as imp runs
    o = sweep.runs[0].omp
    pipelike = training_mod.PipelineResult(
        config=o.cfg_vanilla, dense=o.dense, masks=[(o.sparsity, o.mask)],
        levels=[o.vanilla], dense_test_accuracy=float("nan"), wall_clock=0.0)
    rep = build_report(pipelike, "prune.mode = omp\n")
    assert len(rep.rows) == 1
    assert rep.rows[0]["sparsity"] == pytest.approx(0.89, abs=0.002)
    assert rep.partial is False
    shown = "; ".join(f"s{s}: {t:.3f} vs {v:.3f}"
                      for s, (v, t) in zip(sweep.seeds, rows))
    verdict(capsys, 11,
            f"one-shot 89% runs report cleanly; tweaked >= vanilla in "
            f"{wins}/3 seeds ({shown})", True)


# ---------------------------------------------------------------------------
# criterion 12: persistence


def test_criterion_12_persistence(capsys, tmp_path):
    # checkpoint save -> load -> forward, bit for bit
    ds = load_dataset("digits")
    model = build_model(make_arch("miniresnet-8", ds.input_shape,
                                  ds.num_classes), 5)
    mask = global_magnitude_prune(model, full_mask(model), 0.5)
    apply_mask(model, mask)
    path = str(tmp_path / "ck.ltkt")
    save_checkpoint(path, model, epoch=2, seed=5, mask=mask, dataset="digits")
    back, back_mask, _ = load_checkpoint(path)
    x = ds.x_test[:64]
    bit_identical = np.array_equal(model_logits(model, x),
                                   model_logits(back, x))
    assert bit_identical
    assert back_mask is not None and back_mask.sparsity() == mask.sparsity()

    # archive fuzz: 1000 randomized round trips, bit-exact payloads
    rng = np.random.default_rng(77)
    cases = 0
    for i in range(1000):
        entries = {}
        for j in range(int(rng.integers(1, 4))):
            name = f"t{i}_{j}_" + "".join(
                chr(c) for c in rng.integers(0x61, 0x7B, size=3))
            rank = int(rng.integers(0, 4))
            shape = tuple(int(e) for e in rng.integers(1, 5, size=rank))
            if rng.random() < 0.5:
                # arbitrary bit patterns: subnormals, infs, NaNs included
                bits = rng.integers(0, 2 ** 32, size=shape, dtype=np.uint32)
                entries[name] = bits.view(np.float32).reshape(shape)
            else:
                entries[name] = rng.integers(
                    0, 256, size=shape, dtype=np.uint8).reshape(shape)
        p = str(tmp_path / "fuzz.ltkt")
        save_archive(p, entries)
        loaded = load_archive(p)
        assert set(loaded) == set(entries)
        for name, a in entries.items():
            b = loaded[name]
            assert a.dtype == b.dtype and a.shape == b.shape
            assert a.tobytes() == b.tobytes(), name
        cases += 1
    assert cases == 1000
    verdict(capsys, 12,
            "checkpoint forward bit-identical after reload; 1000 archive "
            "round trips bit-exact", True)
