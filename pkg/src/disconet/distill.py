"""Detection and distillation losses; teacher and student training loops."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import KD_LAYERS, ExperimentConfig, TrainSection
from .networks import PerceptionNet
from .nn import Adam
from .pipeline import ForwardResult, SceneSample, StudentModel, teacher_forward
from .tensor import ShapeError, Tensor, backward, bce_with_logits, kl_cells, no_grad, smooth_l1

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "lr", "cls_loss", "reg_loss", "kd_H", "kd_M1", "kd_M2", "kd_M3", "kd_M4", "total"]


def detection_loss(logits: Tensor, regression: Tensor, cls_target: np.ndarray, reg_target: np.ndarray,
                   pos_weight: float = 1.0, beta: float = 1.0) -> tuple[Tensor, Tensor]:
    """Classification and regression terms summed over the agents in the batch.

    Per agent: BCE averaged over cells, plus smooth-L1 over the regression
    channels at positive cells divided by that agent's positive count.
    """
    if logits.shape != cls_target.shape or regression.shape != reg_target.shape:
        raise ShapeError(f"prediction {logits.shape}/{regression.shape} vs target {cls_target.shape}/{reg_target.shape}")
    squeeze = logits.ndim == 3
    n_agents = 1 if squeeze else logits.shape[0]
    cls = bce_with_logits(logits, cls_target, pos_weight) * float(n_agents)
    pos = cls_target if not squeeze else cls_target[None]
    npos = np.maximum(pos.sum(axis=(1, 2, 3), keepdims=True), 1.0)
    weight = pos / npos
    if squeeze:
        weight = weight[0]
    reg = smooth_l1(regression, reg_target, weight, beta)
    return cls, reg


def kd_loss(student_map: Tensor, teacher_map: np.ndarray, reduce: str = "sum") -> Tensor:
    """Sum over cells of KL(softmax_c(student) || softmax_c(teacher)); teacher is a constant.

    With ``reduce="mean"`` each agent's term is averaged over its cells instead.
    """
    teacher_map = teacher_map.data if isinstance(teacher_map, Tensor) else np.asarray(teacher_map)
    if student_map.shape != teacher_map.shape:
        raise ShapeError(f"student map {student_map.shape} vs teacher map {teacher_map.shape}")
    if reduce == "sum":
        return kl_cells(student_map, teacher_map, axis=-3, reduce="sum")
    n_agents = 1 if student_map.ndim == 3 else student_map.shape[0]
    return kl_cells(student_map, teacher_map, axis=-3, reduce="mean") * float(n_agents)


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    kd: dict[str, float]
    lambda_kd: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False)

    def recomposed(self) -> float:
        return self.cls + self.reg + self.lambda_kd * sum(self.kd.values())


def compute_loss(out: ForwardResult, sample: SceneSample, train: TrainSection,
                 teacher_maps: dict[str, np.ndarray] | None = None, kd_layers=None,
                 replace_with_teacher: bool = False) -> LossBreakdown:
    """Detection loss plus weighted KD terms for the requested layers.

    ``replace_with_teacher`` feeds the teacher maps in place of the student
    maps to the KD terms (test hook: every KD term must then vanish).
    """
    kd_layers = list(train.kd_layers if kd_layers is None else kd_layers)
    cls, reg = detection_loss(out.raster.logits, out.raster.regression, sample.cls, sample.reg,
                              train.pos_weight, train.smooth_l1_beta)
    total = cls + reg
    kd_vals: dict[str, float] = {}
    if kd_layers and train.lambda_kd > 0:
        if teacher_maps is None:
            raise ValueError("KD layers requested without teacher maps")
        for name in kd_layers:
            if name not in teacher_maps:
                raise ValueError(f"KD layer {name!r} has no teacher counterpart")
            student = Tensor(teacher_maps[name]) if replace_with_teacher else out.layer(name)
            term = kd_loss(student, teacher_maps[name], train.kd_reduce)
            kd_vals[name] = term.item()
            total = total + term * train.lambda_kd
    return LossBreakdown(cls.item(), reg.item(), kd_vals, train.lambda_kd, total.item(), total)


def teacher_targets(teacher: PerceptionNet, sample: SceneSample, layers, dtype=np.float64) -> dict[str, np.ndarray]:
    """Frozen teacher maps on the ego-aligned holistic input of every agent."""
    teacher.eval()
    with no_grad():
        out = teacher_forward(teacher, sample.inputs(holistic=True, dtype=dtype))
    return {name: out.layer(name).data for name in layers}


def _lr_at(train: TrainSection, step: int, total_steps: int) -> float:
    if train.lr_final_fraction >= 1.0 or total_steps <= 1:
        return train.lr
    frac = step / (total_steps - 1)
    floor = train.lr * train.lr_final_fraction
    return floor + 0.5 * (train.lr - floor) * (1.0 + math.cos(math.pi * frac))


def _log_row(step: int, lr: float, parts: list[LossBreakdown]) -> dict:
    row = {"step": step, "lr": lr, "cls_loss": sum(p.cls for p in parts), "reg_loss": sum(p.reg for p in parts)}
    for name in KD_LAYERS:
        row[f"kd_{name}"] = sum(p.kd.get(name, 0.0) for p in parts)
    row["total"] = sum(p.total for p in parts)
    return row


def log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if k not in ("step",) else v) for k, v in r.items()})
    return buf.getvalue()


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def train_teacher(samples: list[SceneSample], cfg: ExperimentConfig, seed: int | None = None,
                  callback=None) -> tuple[PerceptionNet, list[dict]]:
    """Early-collaboration teacher trained on holistic, ego-aligned inputs with the detection loss only."""
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    train = cfg.train
    seed = train.seed if seed is None else seed
    net = PerceptionNet(cfg.grid.height_bins, cfg.network.widths, seed)
    net.train()
    opt = Adam(net.parameters(), lr=train.lr)
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(samples) / train.batch_size)
    total_steps = steps_per_epoch * train.teacher_epochs
    rows, step = [], 0
    no_kd = train.model_copy(update={"lambda_kd": 0.0, "kd_layers": []})
    for _ in range(train.teacher_epochs):
        for batch in _batches(rng.permutation(len(samples)), train.batch_size):
            opt.state.lr = _lr_at(train, step, total_steps)
            opt.zero_grad()
            parts = []
            for idx in batch:
                s = samples[idx]
                out = teacher_forward(net, s.inputs(holistic=True))
                lb = compute_loss(out, s, no_kd)
                backward(lb.tensor)
                lb.tensor = None
                parts.append(lb)
            opt.step()
            rows.append(_log_row(step, opt.state.lr, parts))
            if callback:
                callback(rows[-1])
            step += 1
    net.eval()
    return net, rows


def train_student(samples: list[SceneSample], teacher: PerceptionNet | None, cfg: ExperimentConfig,
                  seed: int | None = None, callback=None) -> tuple[StudentModel, list[dict]]:
    """Intermediate-collaboration student trained with detection + KD losses.

    The teacher is frozen: its maps are computed once per sample without a
    gradient path.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    train = cfg.train
    seed = train.seed if seed is None else seed
    kd_layers = list(train.kd_layers) if train.lambda_kd > 0 else []
    if kd_layers and teacher is None:
        raise ValueError("KD is enabled but no teacher was given")
    model = StudentModel(cfg.grid.height_bins, cfg.network.widths, train.fusion, train.ratio, seed,
                         cfg.network.warp_mode)
    model.train()
    opt = Adam(model.parameters(), lr=train.lr)
    rng = np.random.default_rng(seed)
    spec = cfg.grid.to_spec()
    targets = [teacher_targets(teacher, s, kd_layers) for s in samples] if kd_layers else [None] * len(samples)
    steps_per_epoch = math.ceil(len(samples) / train.batch_size)
    total_steps = steps_per_epoch * train.epochs
    rows, step = [], 0
    for _ in range(train.epochs):
        for batch in _batches(rng.permutation(len(samples)), train.batch_size):
            opt.state.lr = _lr_at(train, step, total_steps)
            opt.zero_grad()
            parts = []
            for idx in batch:
                s = samples[idx]
                out = model(s.inputs(), s.poses, spec)
                lb = compute_loss(out, s, train, targets[idx], kd_layers)
                backward(lb.tensor)
                lb.tensor = None
                parts.append(lb)
            opt.step()
            rows.append(_log_row(step, opt.state.lr, parts))
            if callback:
                callback(rows[-1])
            step += 1
    model.eval()
    return model, rows
