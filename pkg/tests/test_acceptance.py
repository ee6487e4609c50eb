"""Acceptance suite: one or more tests per criterion, each tagged with ``criterion(n)``.

The terminal summary prints one PASS/FAIL line per criterion.  Criteria 7 and 8
share one full desk-scale run (gen, train, screen), which takes most of an hour
on a single core.  Set ``S4C_E2E_DIR`` to keep its outputs.
"""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    dsc_by_sets,
    finite_difference,
    flood_fill_partition,
    naive_strided_conv4x4,
    partition_from_ids,
    rel_err,
    window_origins_oracle,
)
from s4c.cascade import CascadeConfig, enumerate_windows
from s4c.cli import main
from s4c.metrics import dsc
from s4c.nn import kernels, layers
from s4c.nn.network import NetworkConfig, build_network, load_weights
from s4c.phantom import PhantomSpec, case_seed, generate_case
from s4c.postprocess import (
    ScreeningResult,
    classify,
    confidence_score,
    connected_components,
    filter_components,
)
from s4c.screening import ScreenConfig, screen_case
from s4c.training import (
    TrainConfig,
    deep_supervision_loss,
    load_training_cases,
    lr_schedule,
    train_scale,
)
from s4c.volume import LabelVolume, ProbVolume, save_volume

LN3 = math.log(3)


def _detail(record_property, text):
    record_property("detail", text)


# criterion 1: gradients


def _layer_fd_errors(layer, x, rng, trials):
    out = layer.forward(x, True)
    r = rng.standard_normal(out.shape)
    gx = layer.backward(r)

    def f():
        return float((layer.forward(x, True) * r).sum())

    errs = []
    targets = [("input", x, gx)] + [(n, p, layer.grads[n]) for n, p in layer.params.items()]
    for k in range(trials):
        _, arr, grad = targets[k % len(targets)]
        idx = tuple(rng.integers(s) for s in arr.shape)
        errs.append(rel_err(grad[idx], finite_difference(f, arr, idx)))
    return errs


def _layer_cases(rng):
    bn = layers.BatchNorm3d(3, np.float64)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][:] = rng.standard_normal(3)
    relu_x = rng.standard_normal((1, 2, 3, 3, 3))
    relu_x[np.abs(relu_x) < 0.1] = 0.5
    return {
        "conv3x3": (layers.Conv3x3(2, 3, rng, np.float64), rng.standard_normal((2, 2, 4, 4, 4))),
        "deconv4x4": (layers.Deconv4x4(3, 2, rng, np.float64), rng.standard_normal((1, 3, 2, 3, 2))),
        "conv1x1": (layers.Conv1x1(4, 3, rng, np.float64), rng.standard_normal((2, 4, 3, 3, 3))),
        "batchnorm": (bn, rng.standard_normal((2, 3, 3, 3, 3)) * 2 + 1),
        "relu": (layers.ReLU(), relu_x),
        "maxpool": (layers.MaxPool(), rng.permutation(128).reshape(1, 2, 4, 4, 4).astype(np.float64) / 7),
    }


@pytest.mark.criterion(1)
def test_c1_layer_gradients(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}
    for name, (layer, x) in _layer_cases(rng).items():
        worst[name] = max(_layer_fd_errors(layer, x, rng, trials=24))
    logits = rng.standard_normal((2, 3, 2, 3, 2))
    target = rng.integers(0, 3, (2, 2, 3, 2))
    _, g = layers.softmax_cross_entropy(logits, target)
    ce = []
    for _ in range(24):
        idx = tuple(rng.integers(s) for s in logits.shape)
        ce.append(rel_err(g[idx], finite_difference(lambda: layers.softmax_cross_entropy(logits, target)[0], logits, idx)))
    worst["cross_entropy"] = max(ce)
    secs = time.perf_counter() - t0
    _detail(record_property, "layers max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) < 1e-4 and secs < 120


@pytest.mark.criterion(1)
def test_c1_full_network_gradients(record_property):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    cfg = NetworkConfig.for_scale(16, base_channels=2)
    net = build_network(cfg, seed=3, dtype=np.float64).train()
    x = rng.standard_normal((2, 1, 16, 16, 16))
    t = rng.integers(0, 3, (2, 16, 16, 16))
    w = np.asarray(cfg.loss_weights) / sum(cfg.loss_weights)

    def loss():
        main_, aux_ = net.forward(x)
        return deep_supervision_loss(main_, aux_, t, w)[0]

    main, aux = net.forward(x)
    _, _, g_main, g_aux = deep_supervision_loss(main, aux, t, w)
    gx = net.backward(g_main, g_aux)
    params, grads = net.parameters(), {k: v.copy() for k, v in net.gradients().items()}
    names = sorted(params)
    errs = []
    for k in range(40):
        if k % 4 == 0:
            idx = tuple(rng.integers(s) for s in x.shape)
            errs.append(rel_err(gx[idx], finite_difference(loss, x, idx)))
        else:
            name = names[rng.integers(len(names))]
            idx = tuple(rng.integers(s) for s in params[name].shape)
            errs.append(rel_err(grads[name][idx], finite_difference(loss, params[name], idx)))
    secs = time.perf_counter() - t0
    _detail(record_property, f"16^3 net: {len(errs)} trials, max rel err {max(errs):.1e}, {secs:.1f}s")
    assert max(errs) < 1e-4 and secs < 120


# criterion 2: adjoint


@pytest.mark.criterion(2)
def test_c2_deconv_adjoint(record_property):
    rng = np.random.default_rng(202)
    errs = []
    for _ in range(12):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        d, h, w_ = rng.integers(1, 5, 3)
        x = rng.standard_normal((n, ci, d, h, w_))
        w = rng.standard_normal((ci, co, 4, 4, 4))
        y = rng.standard_normal((n, co, 2 * d, 2 * h, 2 * w_))
        lhs = float((kernels.deconv4x4(x, w) * y).sum())
        rhs_oracle = float((x * naive_strided_conv4x4(y, w)).sum())
        rhs_kernel = float((x * kernels.deconv4x4_backward(x, w, y)[0]).sum())
        errs += [rel_err(lhs, rhs_oracle), rel_err(lhs, rhs_kernel)]
    _detail(record_property, f"12 draws, max rel err {max(errs):.1e}")
    assert max(errs) < 1e-5


# criterion 3: loss sanity


@pytest.mark.criterion(3)
def test_c3_fresh_network_loss(record_property):
    rng = np.random.default_rng(303)
    seen = {}
    for size, n in ((16, 4), (32, 2), (64, 1)):
        net = build_network(NetworkConfig.for_scale(size), seed=size)
        x = rng.random((n, 1, size, size, size)).astype(np.float32)
        t = rng.integers(0, 3, (n, size, size, size))
        main, _ = net.forward(x, with_aux=False)
        seen[size] = layers.softmax_cross_entropy(main, t)[0]
    _detail(record_property, "fresh loss " + ", ".join(f"{s}^3 {v:.4f}" for s, v in seen.items()) + f" (ln 3 = {LN3:.4f})")
    assert all(abs(v - LN3) <= 0.2 for v in seen.values())


@pytest.mark.criterion(3)
def test_c3_single_case_overfit(tmp_path, record_property):
    spec = PhantomSpec(abnormal=True, tumor_volume_range=(800, 1500))
    ct, mask, _ = generate_case(7, spec)
    save_volume(ct, tmp_path / "i.s4cvol")
    save_volume(mask, tmp_path / "m.s4cvol")
    cases = load_training_cases([{"id": "c", "image": tmp_path / "i.s4cvol", "mask": tmp_path / "m.s4cvol", "label": 1}])
    res = train_scale(cases, TrainConfig(scale=16, total_iters=50, batch_size=3, seed=1, log_every=0))
    losses = [r["loss"] for r in res.trace]
    head, tail = np.mean(losses[:10]), np.mean(losses[-10:])
    _detail(record_property, f"50-iter overfit: first-10 mean {head:.4f} -> last-10 mean {tail:.4f}")
    assert tail < head


# criterion 4: oracle equivalence


@pytest.mark.criterion(4)
def test_c4_connected_components_oracle(record_property):
    rng = np.random.default_rng(404)
    for k in range(100):
        mask = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.6)
        labels = mask.astype(np.uint8) * rng.integers(1, 3, mask.shape).astype(np.uint8)
        cs = connected_components(LabelVolume(labels))
        assert partition_from_ids(cs.ids) == flood_fill_partition(mask), k
    _detail(record_property, "100 random 16^3 masks match flood fill")


@pytest.mark.criterion(4)
def test_c4_dsc_oracle(record_property):
    rng = np.random.default_rng(405)
    for _ in range(100):
        shape = tuple(rng.integers(1, 12, 3))
        a = rng.integers(0, 3, shape).astype(np.uint8)
        b = rng.integers(0, 3, shape).astype(np.uint8)
        if rng.random() < 0.2:
            b[:] = 0
        for cls in (1, 2):
            assert dsc(LabelVolume(a), LabelVolume(b), cls) == pytest.approx(dsc_by_sets(a, b, cls), abs=1e-12)
    _detail(record_property, "100 random pairs match set counting")


@pytest.mark.criterion(4)
def test_c4_window_oracle(record_property):
    rng = np.random.default_rng(406)
    triples = [((100, 100, 100), 64, 20)]
    while len(triples) < 50:
        size = int(rng.choice([4, 8, 16, 32, 64]))
        dims = tuple(int(d) for d in rng.integers(size, size + 60, 3))
        triples.append((dims, size, int(rng.integers(1, size + 1))))
    for dims, size, stride in triples:
        plan = enumerate_windows(dims, size, stride)
        axes = [window_origins_oracle(d, size, stride) for d in dims]
        assert plan.origins == [(x, y, z) for z, y, x in itertools.product(axes[2], axes[1], axes[0])]
        cover = np.zeros(dims[::-1], int)
        for x, y, z in plan.origins:
            cover[z:z + size, y:y + size, x:x + size] += 1
        assert cover.min() >= 1
    assert enumerate_windows((100, 100, 100), 64, 20).origins[:3] == [(0, 0, 0), (20, 0, 0), (36, 0, 0)]
    _detail(record_property, "50 triples match the enumeration oracle with full coverage; dim 100 / 64 / 20 -> {0, 20, 36}")


# criterion 5: rule fidelity


@pytest.mark.criterion(5)
def test_c5_rules(record_property):
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[0:4, 0:5, 0:5] = 1  # 100 voxels
    labels[10:12, 10:12, 10:15] = 2  # 20 voxels
    labels[15:18, 2:9, 15] = 1  # 21 voxels
    cs = connected_components(LabelVolume(labels))
    assert sorted(cs.sizes.tolist()) == [20, 21, 100]
    out = filter_components(LabelVolume(labels)).data
    assert not out[10:12, 10:12, 10:15].any()
    assert out[15:18, 2:9, 15].all() and out[0:4, 0:5, 0:5].all()

    flips = []
    for n in (48, 49, 50, 51):
        m = np.zeros(64, np.uint8)
        m[:n] = 2
        flips.append(classify(LabelVolume(m.reshape(4, 4, 4)), K=50))
    assert flips == [0, 0, 1, 1]

    m = np.zeros((10, 10, 10), np.uint8)
    m.ravel()[:750] = 2
    p = np.zeros((10, 10, 10, 3), np.float64)
    p[..., 2] = 0.8
    p[..., 0] = 0.2
    c = confidence_score(LabelVolume(m), ProbVolume(p.astype(np.float32)))
    assert c == pytest.approx(0.65, abs=1e-6)
    assert ScreeningResult("x", 750, c, 1).confidence == c
    _detail(record_property, f"size 20 vs max 100 removed, 21 kept; classify flips at 50; confidence {c:.6f}")


# criterion 6: schedule


@pytest.mark.criterion(6)
def test_c6_schedule(record_property):
    cfg = TrainConfig(scale=64, total_iters=2000)
    lrs = [lr_schedule(i, cfg) for i in range(cfg.total_iters)]
    assert lrs[0] == 0.01
    assert abs(lrs[1000] - 0.01 * 0.5 ** 0.9) <= 1e-9
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    _detail(record_property, f"lr(0) {lrs[0]}, lr(T/2) {lrs[1000]:.12f}, strictly decreasing over {len(lrs)} steps")


# criteria 7 and 8: desk-scale end-to-end run


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    root = Path(os.environ["S4C_E2E_DIR"]) if os.environ.get("S4C_E2E_DIR") else tmp_path_factory.mktemp("e2e")
    data, run = root / "data", root / "run"
    t0 = time.perf_counter()
    codes = [
        main(["gen", "--out", str(data), "--normal", "30", "--abnormal", "80", "--seed", "0"]),
        main(["train", "--data", str(data), "--run", str(run), "--deterministic"]),
        main(["screen", "--data", str(data), "--run", str(run), "--deterministic"]),
    ]
    minutes = (time.perf_counter() - t0) / 60
    return {"root": root, "data": data, "run": run, "codes": codes, "minutes": minutes}


@pytest.mark.criterion(7)
def test_c7_end_to_end(e2e, record_property):
    assert e2e["codes"] == [0, 0, 0]
    report = json.loads((e2e["run"] / "screen-cascade-fold0" / "eval_K50.json").read_text())
    labels = [c["label"] for c in report["cases"]]
    mean_dsc = report["tumor_dsc"][0]
    _detail(record_property, (
        f"{labels.count(1)} abnormal + {labels.count(0)} normal test cases: tumor DSC {mean_dsc:.4f}, "
        f"sensitivity {report['sensitivity']:.4f}, specificity {report['specificity']:.4f}, "
        f"misses {report['misses']}, {e2e['minutes']:.1f} min"
    ))
    assert labels.count(1) == 20 and labels.count(0) == 20
    assert mean_dsc >= 0.40
    assert report["sensitivity"] >= 0.90 and report["specificity"] >= 0.90
    assert e2e["minutes"] <= 60


TINY_SPEC = PhantomSpec(abnormal=True, tumor_volume_range=(60, 299))


@pytest.mark.criterion(8)
def test_c8_fine_scale_misses_no_more_tiny_tumors(e2e, record_property):
    nets = {s: load_weights(e2e["run"] / f"net{s}.w", expect=s).eval() for s in (64, 16)}
    misses = {64: 0, 16: 0}
    sizes = []
    for i in range(10):
        ct, gt, _ = generate_case(case_seed(8080, i), TINY_SPEC)
        sizes.append(int((gt.data == 2).sum()))
        for s in (64, 16):
            out = screen_case(nets, f"t{i}", ct, gt, ScreenConfig(cascade=CascadeConfig.single_scale(s)))
            misses[s] += out.result.dsc_tumor == 0.0
    _detail(record_property, f"tiny tumors {min(sizes)}-{max(sizes)} voxels: misses 64^3 {misses[64]}/10, 16^3 {misses[16]}/10")
    assert max(sizes) < 300
    assert misses[16] <= misses[64]


# criterion 9: determinism


def _tiny_pipeline(root):
    data, run = root / "data", root / "run"
    root.mkdir()
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"base_channels": 2, "batch": {"64": 1, "32": 2, "16": 2}}}))
    assert main(["gen", "--out", str(data), "--normal", "1", "--abnormal", "4", "--seed", "9"]) == 0
    assert main(["train", "--data", str(data), "--run", str(run), "--iters", "4", "--deterministic",
                 "--config", str(cfg), "--log-every", "0"]) == 0
    assert main(["screen", "--data", str(data), "--run", str(run), "--deterministic", "--config", str(cfg)]) == 0
    return run


@pytest.mark.criterion(9)
def test_c9_determinism(tmp_path, record_property):
    a = _tiny_pipeline(tmp_path / "a")
    b = _tiny_pipeline(tmp_path / "b")
    files = [f"net{s}.w" for s in (64, 32, 16)]
    masks = sorted(p.relative_to(a) for p in (a / "screen-cascade-fold0" / "masks").iterdir())
    files += [str(m) for m in masks] + ["screen-cascade-fold0/eval_K50.json", "screen-cascade-fold0/results.json"]
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    _detail(record_property, f"{len(files)} artifacts compared ({len(masks)} masks), {len(differ)} differ")
    assert masks and not differ
