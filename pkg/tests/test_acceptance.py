"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criterion 7 trains the full desk-scale experiment (about half an hour on one
core).  Deselect it with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest

from disconet.boxes import Box, box_iou
from disconet.channel import broadcast_round
from disconet.cli import main
from disconet.config import load_config
from disconet.distill import detection_loss, kd_loss, train_student, train_teacher, compute_loss, teacher_targets
from disconet.evaluation import average_precision, nms
from disconet.experiments import directional_experiment
from disconet.geometry import BEVGridSpec, Pose, relative_pose, warp_feature_map, wrap_angle
from disconet.graph import Collaboration, EdgeEncoder, aggregate, edge_weights, transmit
from disconet.networks import Compressor
from disconet.pipeline import StudentModel, prepare_sample
from disconet.scene import SceneConfig, generate_scene
from disconet.tensor import (RunningStats, Tensor, batchnorm2d, concat_channels, conv2d, relu, reshape, softmax,
                             softmax_over_axis, take, tsum)

from helpers import away_from_zero, check_grads

RESULTS = {}
GRAD_TOL = 1e-4
SEEDS = range(10)


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _case_conv2d(rng):
    x, k, b = _leaf(rng, (2, 5, 5)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    w = rng.standard_normal((3, 3, 3))
    return lambda: tsum(conv2d(x, k, b, stride=2, padding=1) * w), [x, k, b]


def _case_batchnorm(rng):
    x, g, b = _leaf(rng, (3, 4, 4)), _leaf(rng, (3,)), _leaf(rng, (3,))
    w = rng.standard_normal((3, 4, 4))
    return lambda: tsum(batchnorm2d(x, g, b, RunningStats(np.zeros(3), np.ones(3))) * w), [x, g, b]


def _case_relu(rng):
    x = Tensor(away_from_zero(rng, (3, 4, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4, 4))
    return lambda: tsum(relu(x) * w), [x]


def _case_softmax(rng):
    xs = [_leaf(rng, (3, 3), 2.0) for _ in range(3)]
    ws = [rng.standard_normal((3, 3)) for _ in range(3)]
    return lambda: sum((tsum(o * w) for o, w in zip(softmax_over_axis(xs), ws)), start=Tensor(0.0)), xs


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (3, 3, 3))
    w = rng.standard_normal((5, 3, 3))
    return lambda: tsum(concat_channels(a, b) * w), [a, b]


def _case_warp(rng):
    spec = BEVGridSpec(size=8)
    x = _leaf(rng, (2, 8, 8))
    rel = Pose(*rng.uniform(-6, 6, 2), rng.uniform(-math.pi, math.pi))
    w = rng.standard_normal((2, 8, 8))
    return lambda: tsum(warp_feature_map(x, rel, spec) * w), [x]


def _case_edge_weights(rng):
    enc = EdgeEncoder(2, rng=rng)
    fs = [_leaf(rng, (2, 3, 3)) for _ in range(3)]
    ws = [rng.standard_normal((3, 3)) for _ in range(3)]

    def f():
        out = edge_weights(fs, fs[0], enc)
        return sum((tsum(o * w) for o, w in zip(out, ws)), start=Tensor(0.0))

    return f, fs + [enc.layers[0].conv.weight, enc.layers[-1].bn.gamma]


def _case_aggregate(rng):
    fs = [_leaf(rng, (2, 3, 3)) for _ in range(3)]
    logits = _leaf(rng, (3, 3, 3))
    w = rng.standard_normal((2, 3, 3))

    def f():
        s = softmax(logits, axis=0)
        return tsum(aggregate(fs, [reshape(take(s, j), (3, 3)) for j in range(3)]) * w)

    return f, fs + [logits]


def _case_kd(rng):
    s = _leaf(rng, (4, 3, 3), 2.0)
    t = rng.standard_normal((4, 3, 3)) * 2.0
    return lambda: kd_loss(s, t), [s]


def _case_detection(rng):
    cls = (rng.random((1, 4, 4)) < 0.25).astype(float)
    cls[0, 0, 0] = 1.0
    reg_t = rng.standard_normal((6, 4, 4))
    logits = _leaf(rng, (1, 4, 4), 2.0)
    # residuals kept away from the smooth-L1 knee
    mag = rng.uniform(0.1, 0.8, reg_t.shape) + rng.choice([0.0, 1.5], reg_t.shape)
    reg = Tensor(reg_t + rng.choice([-1.0, 1.0], reg_t.shape) * mag, requires_grad=True)

    def f():
        c, r = detection_loss(logits, reg, cls, reg_t, pos_weight=4.0)
        return c + r

    return f, [logits, reg]


GRAD_CASES = {
    "conv2d": _case_conv2d, "batchnorm": _case_batchnorm, "relu": _case_relu, "softmax_over_axis": _case_softmax,
    "concat": _case_concat, "warp_feature_map": _case_warp, "edge_weights": _case_edge_weights,
    "aggregate": _case_aggregate, "kd_loss": _case_kd, "detection_loss": _case_detection,
}


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, case in GRAD_CASES.items():
        errs = []
        for seed in SEEDS:
            f, leaves = case(np.random.default_rng(1000 + seed))
            errs.append(check_grads(f, leaves))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 120
    top = max(worst, key=worst.get)
    record(1, ok, f"{len(GRAD_CASES)} ops x {len(SEEDS)} seeds, worst rel err {worst[top]:.2e} ({top}), "
                  f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. attention normalisation
# ---------------------------------------------------------------------------

def test_criterion_2_attention_normalisation():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c = int(rng.choice([4, 8, 16]))
        m = int(rng.integers(2, 6))
        collab = Collaboration("disco", c, rng=rng)
        maps = [Tensor(rng.standard_normal((c, 8, 8)) * rng.uniform(0.1, 10)) for _ in range(m)]
        _, w = collab.fuse(maps)
        worst = max(worst, float(np.max(np.abs(sum(x.data for x in w) - 1.0))))
    f = Tensor(rng.standard_normal((16, 8, 8)))
    h, _ = Collaboration("disco", 16, rng=rng).fuse([f])
    single = float(np.max(np.abs(h.data - f.data)))
    record(2, worst < 1e-6 and single < 1e-12,
           f"max |sum W - 1| = {worst:.1e} over 100 frames, M=1 |H - F| = {single:.1e}")


# ---------------------------------------------------------------------------
# 3. fusion oracle
# ---------------------------------------------------------------------------

def test_criterion_3_fusion_oracle():
    rng = np.random.default_rng(3)
    f1, f2 = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    w1 = np.array([[1.0, 0.0], [0.5, 0.25]])
    w2 = 1.0 - w1
    h = aggregate([Tensor(f1), Tensor(f2)], [Tensor(w1), Tensor(w2)]).data
    ref = np.zeros((3, 2, 2))
    for c in range(3):
        for x in range(2):
            for y in range(2):
                ref[c, x, y] = w1[x, y] * f1[c, x, y] + w2[x, y] * f2[c, x, y]
    err = float(np.max(np.abs(h - ref)))
    feats = [Tensor(rng.standard_normal((3, 4, 4)) * 10.0 ** rng.integers(-2, 3)) for _ in range(4)]
    raw = rng.random((4, 4, 4))
    raw /= raw.sum(0)
    ws = [Tensor(w) for w in raw]
    base = aggregate(feats, ws).data
    perm_ok = all(np.array_equal(base, aggregate([feats[i] for i in p], [ws[i] for i in p]).data)
                  for p in ([1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]))
    record(3, err < 1e-12 and perm_ok, f"oracle error {err:.1e}, permutation bit-exact: {perm_ok}")


# ---------------------------------------------------------------------------
# 4. geometry
# ---------------------------------------------------------------------------

def test_criterion_4_geometry():
    rng = np.random.default_rng(4)
    spec = BEVGridSpec(size=32)
    f = rng.standard_normal((4, 32, 32))
    ident = np.array_equal(warp_feature_map(Tensor(f), Pose(), spec).data, f)
    rot = float(np.max(np.abs(warp_feature_map(Tensor(f), Pose(0, 0, math.pi / 2), spec).data
                              - np.rot90(f, 1, axes=(-2, -1)))))
    rt = 0.0
    for _ in range(1000):
        a = Pose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        b = Pose(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        c = relative_pose(a, b) @ relative_pose(b, a)
        rt = max(rt, abs(c.x), abs(c.y), abs(wrap_angle(c.yaw)))
    record(4, ident and rot < 1e-9 and rt < 1e-12,
           f"identity exact: {ident}, 90 deg error {rot:.1e}, round trip {rt:.1e}")


# ---------------------------------------------------------------------------
# 5. evaluation oracle
# ---------------------------------------------------------------------------

def test_criterion_5_evaluation_oracle():
    gts = [[Box(0, 0, 4, 2, 0), Box(20, 0, 4, 2, 0)]]
    dets = [[Box(0, 0, 4, 2, 0, 0.9), Box(-20, 0, 4, 2, 0, 0.8), Box(20, 0, 4, 2, 0, 0.7)]]
    ap = average_precision(dets, gts, 0.5)
    a, b, c = Box(0, 0, 4, 2, 0, 0.9), Box(2, 0, 4, 2, 0, 0.8), Box(4, 0, 4, 2, 0, 0.7)
    kept = nms([b, c, a], 0.3)
    iou = box_iou(Box(0, 0, 2, 2, 0), Box(1, 0, 2, 2, 0))
    ok = abs(ap - 5 / 6) < 1e-9 and kept == [a, c] and abs(iou - 1 / 3) < 1e-9
    record(5, ok, f"AP {ap:.10f} (5/6), NMS kept {['ABC'[[a, b, c].index(k)] for k in kept]}, IoU {iou:.10f}")


# ---------------------------------------------------------------------------
# 6. bandwidth accounting
# ---------------------------------------------------------------------------

TINY = {
    "scene": {"agent_count": [2, 2], "box_count": [10, 12], "rays": 360, "train_scenes": 3, "test_scenes": 2},
    "grid": {"size": 16},
    "network": {"widths": [2, 3, 4, 64, 6]},
    "train": {"teacher_epochs": 1, "epochs": 1, "lr": 0.01, "pos_weight": 20.0},
}


def _tiny_config(tmp_path, **train):
    doc = json.loads(json.dumps(TINY))
    doc["train"].update(train)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_criterion_6_bandwidth(tmp_path):
    rng = np.random.default_rng(6)
    k_bar = 32
    feats = [Tensor(rng.standard_normal((256, k_bar, k_bar))) for _ in range(2)]
    exact = True
    for r in (1, 4, 16, 32, 64):
        comp = Compressor(256, r, rng=rng)
        msgs = [transmit(f, Pose(), comp, j) for j, f in enumerate(feats)]
        _, log = broadcast_round(msgs)
        want = (256 // r) * k_bar * k_bar * 4
        exact &= all(m.byte_size == want for m in msgs) and log.payload_per_frame_per_agent() == want
    cfg = _tiny_config(tmp_path)
    code = main(["tradeoff", "--config", cfg, "--out", str(tmp_path / "t"), "--kd", "off", "--ratios", "1,64"])
    rows = {}
    for line in (tmp_path / "t" / "tradeoff.csv").read_text().splitlines()[1:]:
        method, ratio, nbytes = line.split(",")[:3]
        rows[ratio] = int(nbytes)
    ratio_ok = code == 0 and rows["1"] == 64 * rows["64"] and rows["0"] == 0
    record(6, exact and ratio_ok,
           f"payload bytes exact for r in {{1,4,16,32,64}}: {exact}; CSV ratio-1 {rows.get('1')} B vs "
           f"ratio-64 {rows.get('64')} B")


# ---------------------------------------------------------------------------
# 7. desk-scale directional experiment
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_directional():
    cfg = load_config(profile="desk")
    t0 = time.perf_counter()
    rows = directional_experiment(cfg, seeds=(0, 1, 2),
                                  callback=lambda r: print("  seed", r["seed"], {k: round(v, 4) for k, v in r.items()
                                                                                  if k != "seed"}))
    minutes = (time.perf_counter() - t0) / 60
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("upper", "disco_kd", "disco_no_kd", "lower")}
    order = mean["upper"] >= mean["disco_kd"] >= mean["lower"] + 0.05
    gain = mean["disco_kd"] - mean["disco_no_kd"]
    record(7, order and gain >= 0 and minutes <= 45,
           f"mean AP50 upper {mean['upper']:.4f}, disco {mean['disco_kd']:.4f}, lower {mean['lower']:.4f}, "
           f"KD gain {gain:+.4f}, {minutes:.1f} min")


# ---------------------------------------------------------------------------
# 8. KD sanity
# ---------------------------------------------------------------------------

def test_criterion_8_kd_sanity():
    rng = np.random.default_rng(8)
    zero = all(kd_loss(Tensor(x), x).item() == 0.0 for x in (rng.standard_normal((8, 4, 4)) * 5 for _ in range(20)))
    spec = BEVGridSpec(size=16)
    samples = [prepare_sample(generate_scene(SceneConfig(agent_count=(2, 3), box_count=(10, 12), rays=360), s), spec)
               for s in range(3)]
    cfg = load_config(profile="desk").model_copy(deep=True)
    cfg.grid.size = 16
    cfg.network.widths = (2, 3, 4, 8, 6)
    cfg.train.teacher_epochs = cfg.train.epochs = 1
    teacher, _ = train_teacher(samples, cfg)
    layers = ["H", "M1", "M2", "M3", "M4"]
    student = StudentModel(13, cfg.network.widths, "disco", 1, seed=1)
    s = samples[0]
    tm = teacher_targets(teacher, s, layers)
    lb = compute_loss(student(s.inputs(), s.poses, spec), s, cfg.train, tm, layers, replace_with_teacher=True)
    hook = all(v == 0.0 for v in lb.kd.values()) and len(lb.kd) == 5
    for p in teacher.parameters():
        p.grad = None
    train_student(samples, teacher, cfg)
    frozen = all(p.grad is None or not p.grad.any() for p in teacher.parameters())
    record(8, zero and hook and frozen, f"kd(x,x)=0: {zero}, hook zeroes {len(lb.kd)} layers: {hook}, "
                                         f"teacher grads zero: {frozen}")


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    cfg = _tiny_config(tmp_path, lambda_kd=0.0)
    ckpts, reports = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train-student", "--config", cfg, "--out", str(out / "train"), "--seed", "11",
                     "--ratio", "4"]) == 0
        assert main(["evaluate", "--config", cfg, "--out", str(out / "eval"),
                     "--checkpoint", str(out / "train" / "student.ckpt")]) == 0
        ckpts.append((out / "train" / "student.ckpt").read_bytes())
        reports.append((out / "eval" / "eval_report.csv").read_text())
    same_ckpt = ckpts[0] == ckpts[1]
    same_report = reports[0] == reports[1]
    record(9, same_ckpt and same_report,
           f"checkpoints byte-identical ({len(ckpts[0])} B): {same_ckpt}, EvalReport CSVs identical: {same_report}")
