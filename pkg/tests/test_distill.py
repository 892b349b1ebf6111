import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disconet.config import config_from_dict
from disconet.distill import (LOG_HEADER, compute_loss, detection_loss, kd_loss, log_csv, teacher_targets,
                              train_student, train_teacher)
from disconet.geometry import BEVGridSpec
from disconet.networks import encode_checkpoint
from disconet.pipeline import StudentModel, prepare_sample
from disconet.scene import SceneConfig, generate_scene
from disconet.tensor import ShapeError, Tensor

from helpers import check_grads

SPEC = BEVGridSpec(size=16)
WIDTHS = [2, 3, 4, 8, 6]


def _cfg(**train):
    base = {"grid": {"size": 16}, "network": {"widths": WIDTHS},
            "train": {"teacher_epochs": 1, "epochs": 1, "lr": 0.01, **train}}
    return config_from_dict(base)


def _samples(n, agents=(2, 3), seed=0):
    cfg = SceneConfig(agent_count=agents, box_count=(10, 14), rays=360)
    return [prepare_sample(generate_scene(cfg, seed + i), SPEC) for i in range(n)]


@pytest.fixture(scope="module")
def samples():
    return _samples(4)


@pytest.fixture(scope="module")
def teacher(samples):
    net, _ = train_teacher(samples, _cfg())
    return net


class TestDetectionLoss:
    def test_perfect_prediction(self):
        cls = np.zeros((1, 4, 4))
        cls[0, 1, 2] = 1.0
        reg = np.random.default_rng(0).standard_normal((6, 4, 4))
        logits = np.where(cls > 0, 20.0, -20.0)
        c, r = detection_loss(Tensor(logits), Tensor(reg), cls, reg)
        assert c.item() + r.item() < 1e-6

    def test_zero_logits_ln2(self):
        c, _ = detection_loss(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((6, 4, 4))), np.zeros((1, 4, 4)),
                              np.zeros((6, 4, 4)))
        assert c.item() == pytest.approx(math.log(2), abs=1e-12)
        assert c.item() == pytest.approx(0.6931, abs=1e-4)

    def test_half_residual(self):
        cls = np.zeros((1, 4, 4))
        cls[0, 0, 0] = 1.0
        pred = np.zeros((6, 4, 4))
        pred[3, 0, 0] = 0.5
        pred[3, 1, 1] = 9.0  # negative cells carry no regression loss
        _, r = detection_loss(Tensor(np.zeros((1, 4, 4))), Tensor(pred), cls, np.zeros((6, 4, 4)))
        assert r.item() == pytest.approx(0.125, abs=1e-12)

    def test_normalised_by_positive_count(self):
        cls = np.zeros((1, 4, 4))
        cls[0, 0, :] = 1.0
        pred = np.zeros((6, 4, 4))
        pred[0, 0, :] = 0.5
        _, r = detection_loss(Tensor(np.zeros((1, 4, 4))), Tensor(pred), cls, np.zeros((6, 4, 4)))
        assert r.item() == pytest.approx(0.125, abs=1e-12)

    def test_pos_weight(self):
        cls = np.ones((1, 2, 2))
        c1, _ = detection_loss(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((6, 2, 2))), cls, np.zeros((6, 2, 2)))
        c5, _ = detection_loss(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((6, 2, 2))), cls, np.zeros((6, 2, 2)),
                               pos_weight=5.0)
        assert c5.item() == pytest.approx(5 * c1.item(), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            detection_loss(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((6, 4, 4))), np.zeros((1, 3, 3)),
                           np.zeros((6, 4, 4)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        cls = (rng.random((2, 1, 3, 3)) < 0.3).astype(float)
        reg_t = rng.standard_normal((2, 6, 3, 3))
        logits = Tensor(rng.standard_normal((2, 1, 3, 3)) * 2, requires_grad=True)
        # keep residuals away from the smooth-L1 knee at |d| = 1
        reg = Tensor(reg_t + rng.choice([-1, 1], reg_t.shape) * rng.uniform(0.1, 0.8, reg_t.shape)
                     + rng.choice([0, 2.5], reg_t.shape), requires_grad=True)

        def loss():
            c, r = detection_loss(logits, reg, cls, reg_t, pos_weight=3.0)
            return c + r

        assert check_grads(loss, [logits, reg]) < 1e-4


class TestKDLoss:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).standard_normal((5, 4, 4))
        assert kd_loss(Tensor(x), x).item() == 0.0

    def test_closed_form(self):
        s = np.zeros((2, 1, 1))
        t = np.array([math.log(3.0), 0.0]).reshape(2, 1, 1)
        expected = 0.5 * math.log(2 / 3) + 0.5 * math.log(2)
        assert kd_loss(Tensor(s), t).item() == pytest.approx(expected, abs=1e-12)
        assert kd_loss(Tensor(s), t).item() == pytest.approx(0.14384, abs=1e-5)

    def test_sum_over_cells_and_mean(self):
        s = np.zeros((2, 3, 3))
        t = np.broadcast_to(np.array([math.log(3.0), 0.0])[:, None, None], (2, 3, 3)).copy()
        total = kd_loss(Tensor(s), t).item()
        assert total == pytest.approx(9 * 0.14384103622589045, abs=1e-12)
        assert kd_loss(Tensor(s), t, reduce="mean").item() == pytest.approx(total / 9, abs=1e-12)

    def test_shift_invariant_per_cell(self):
        rng = np.random.default_rng(2)
        s, t = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
        shifted = s + rng.standard_normal((1, 3, 3)) * 5
        assert kd_loss(Tensor(shifted), t).item() == pytest.approx(kd_loss(Tensor(s), t).item(), abs=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 30.0))
    def test_nonnegative(self, seed, scale):
        rng = np.random.default_rng(seed)
        s, t = rng.standard_normal((3, 2, 2)) * scale, rng.standard_normal((3, 2, 2)) * scale
        assert kd_loss(Tensor(s), t).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kd_loss(Tensor(np.zeros((2, 2, 2))), np.zeros((3, 2, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        s = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        t = rng.standard_normal((2, 4, 3, 3))
        assert check_grads(lambda: kd_loss(s, t), [s]) < 1e-4


class TestComputeLoss:
    def test_replace_hook_zeroes_kd(self, samples, teacher):
        cfg = _cfg()
        model = StudentModel(13, WIDTHS, "disco", 1, seed=1)
        s = samples[0]
        tm = teacher_targets(teacher, s, cfg.train.kd_layers)
        out = model(s.inputs(), s.poses, SPEC)
        lb = compute_loss(out, s, cfg.train, tm, replace_with_teacher=True)
        assert set(lb.kd) == {"H", "M1", "M2", "M3"}
        assert all(v == 0.0 for v in lb.kd.values())
        live = compute_loss(out, s, cfg.train, tm)
        assert all(v > 0.0 for v in live.kd.values())

    def test_total_recomposes(self, samples, teacher):
        cfg = _cfg()
        model = StudentModel(13, WIDTHS, "disco", 1, seed=1)
        s = samples[1]
        out = model(s.inputs(), s.poses, SPEC)
        lb = compute_loss(out, s, cfg.train, teacher_targets(teacher, s, cfg.train.kd_layers))
        assert abs(lb.total - lb.recomposed()) <= 1e-12 * max(1.0, abs(lb.total))
        assert lb.cls >= 0 and lb.reg >= 0 and min(lb.kd.values()) >= 0

    def test_missing_teacher_layer(self, samples, teacher):
        cfg = _cfg(kd_layers=["H", "M4"])
        s = samples[0]
        model = StudentModel(13, WIDTHS, "disco", 1, seed=1)
        out = model(s.inputs(), s.poses, SPEC)
        with pytest.raises(ValueError):
            compute_loss(out, s, cfg.train, teacher_targets(teacher, s, ["H"]))
        with pytest.raises(ValueError):
            compute_loss(out, s, cfg.train, None)

    def test_single_agent_matches_lower(self):
        (s,) = _samples(1, agents=(1, 1), seed=40)
        cfg = _cfg(lambda_kd=0.0, kd_layers=[])
        disco = StudentModel(13, WIDTHS, "disco", 1, seed=5)
        lower = StudentModel(13, WIDTHS, "none", 1, seed=5)
        a = compute_loss(disco(s.inputs(), s.poses, SPEC), s, cfg.train)
        b = compute_loss(lower(s.inputs(), s.poses, SPEC), s, cfg.train)
        assert a.total == b.total


class TestTraining:
    def test_teacher_input_superset(self, samples):
        s = samples[0]
        assert (s.holistic >= s.single).all()
        assert (s.holistic > s.single).any()

    def test_teacher_loss_decreases(self):
        data = _samples(10, seed=100)
        cfg = _cfg(teacher_epochs=5, lr=0.01)
        _, rows = train_teacher(data, cfg)
        totals = np.array([r["total"] for r in rows])
        assert len(totals) == 50 and np.isfinite(totals).all()
        ma = np.convolve(totals, np.ones(10) / 10, mode="valid")
        assert ma[-1] < ma[0]

    def test_teacher_frozen_during_student_training(self, samples, teacher):
        before = {n: p.data.copy() for n, p in teacher.named_parameters()}
        for p in teacher.parameters():
            p.grad = None
        train_student(samples[:2], teacher, _cfg())
        for n, p in teacher.named_parameters():
            assert p.grad is None or not p.grad.any()
            np.testing.assert_array_equal(p.data, before[n])

    def test_kd_without_teacher(self, samples):
        with pytest.raises(ValueError):
            train_student(samples, None, _cfg())

    def test_empty(self):
        with pytest.raises(ValueError):
            train_teacher([], _cfg())

    def test_deterministic(self, samples, teacher):
        a, rows_a = train_student(samples[:2], teacher, _cfg(seed=3))
        b, rows_b = train_student(samples[:2], teacher, _cfg(seed=3))
        assert encode_checkpoint(a.state_dict()) == encode_checkpoint(b.state_dict())
        assert log_csv(rows_a) == log_csv(rows_b)

    def test_log_columns(self, samples):
        _, rows = train_teacher(samples[:1], _cfg())
        text = log_csv(rows).splitlines()
        assert text[0].split(",") == LOG_HEADER
        assert len(text) == 2

    def test_no_kd_path(self, samples):
        _, rows = train_student(samples[:2], None, _cfg(lambda_kd=0.0))
        assert all(r[f"kd_{k}"] == 0.0 for r in rows for k in ("H", "M1", "M2", "M3", "M4"))
