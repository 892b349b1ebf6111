"""Datasets, model persistence and the evaluation protocols.

Modes understood by :func:`evaluate_model`:

* ``lower``       single-agent inference of a student (no collaboration)
* ``upper``       teacher on the holistic, ego-aligned input
* ``late_lower``  ``lower`` boxes pooled in the global frame, global NMS
* ``late_upper``  ``upper`` boxes pooled in the global frame, global NMS
* ``disco``       graph-attention student, one broadcast round per frame
* ``baseline:K``  student trained with fusion kind ``K``
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box
from .channel import ChannelLog
from .config import ExperimentConfig
from .evaluation import EvalReport, build_report, decode_raster, nms, transform_boxes
from .geometry import BEVGridSpec
from .graph import FUSION_KINDS
from .networks import PerceptionNet, load_checkpoint, save_checkpoint
from .pipeline import SceneSample, StudentModel, prepare_sample, teacher_forward
from .scene import Scene, SceneConfig, generate_scene, load_scene
from .tensor import no_grad

logger = logging.getLogger(__name__)

MODES = ("lower", "upper", "late_lower", "late_upper", "disco")
SPLIT_OFFSETS = {"train": 0, "test": 1_000_000}


class ModeError(ValueError):
    """A checkpoint cannot be evaluated in the requested mode."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("DISCO_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def scene_seed(base: int, split: str, index: int) -> int:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    return base * 10_000_019 + SPLIT_OFFSETS[split] + index


def _gen(args) -> Scene:
    config, seed = args
    return generate_scene(config, seed)


def _pmap(fn, items: list, workers: int | None = None) -> list:
    """Order-preserving map over a bounded process pool."""
    workers = num_workers() if workers is None else workers
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def generate_split(config: SceneConfig, base_seed: int, split: str, count: int, start: int = 0) -> list[Scene]:
    seeds = [scene_seed(base_seed, split, start + i) for i in range(count)]
    return _pmap(_gen, [(config, s) for s in seeds])


def load_scene_dir(path: str | Path) -> list[Scene]:
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no scene files in {path}")
    return [load_scene(f) for f in files]


def _prep(args) -> SceneSample:
    scene, spec = args
    return prepare_sample(scene, spec)


def prepare_samples(scenes: list[Scene], spec: BEVGridSpec) -> list[SceneSample]:
    return _pmap(_prep, [(s, spec) for s in scenes])


def dataset(cfg: ExperimentConfig, split: str, scene_dir: str | Path | None = None) -> list[SceneSample]:
    """Samples for ``split``, read from ``scene_dir`` or regenerated from the config seed."""
    if scene_dir is not None:
        scenes = load_scene_dir(scene_dir)
    else:
        count = cfg.scene.train_scenes if split == "train" else cfg.scene.test_scenes
        scenes = generate_split(cfg.scene.to_scene_config(), cfg.seed, split, count)
    return prepare_samples(scenes, cfg.grid.to_spec())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@dataclass
class ModelMeta:
    role: str            # "teacher" or "student"
    widths: tuple
    in_channels: int
    fusion: str = "none"
    ratio: int = 1
    kd: bool = False
    seed: int = 0
    warp_mode: str = "bilinear"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["widths"] = list(self.widths)
        return d


def meta_path(ckpt: str | Path) -> Path:
    return Path(ckpt).with_suffix(".json")


def save_model(model, meta: ModelMeta, path: str | Path) -> list[Path]:
    """Checkpoint bytes plus a JSON sidecar describing how to rebuild the model."""
    path = Path(path)
    save_checkpoint(model.state_dict(), path)
    side = meta_path(path)
    side.write_text(json.dumps(meta.to_dict(), sort_keys=True, indent=1) + "\n")
    return [path, side]


def build_model(meta: ModelMeta):
    if meta.role == "teacher":
        return PerceptionNet(meta.in_channels, meta.widths, meta.seed)
    if meta.role == "student":
        return StudentModel(meta.in_channels, meta.widths, meta.fusion, meta.ratio, meta.seed, meta.warp_mode)
    raise ModeError(f"unknown model role {meta.role!r}")


def load_model(path: str | Path):
    side = meta_path(path)
    if not side.exists():
        raise FileNotFoundError(f"checkpoint metadata {side} missing")
    d = json.loads(side.read_text())
    d["widths"] = tuple(d["widths"])
    meta = ModelMeta(**d)
    model = build_model(meta)
    model.load_state_dict(load_checkpoint(path))
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def check_mode(meta: ModelMeta, mode: str) -> None:
    if mode in ("upper", "late_upper"):
        ok = meta.role == "teacher"
    elif mode in ("lower", "late_lower"):
        ok = meta.role == "student"
    elif mode == "disco":
        ok = meta.role == "student" and meta.fusion == "disco"
    elif mode.startswith("baseline:"):
        kind = mode.split(":", 1)[1]
        if kind not in FUSION_KINDS:
            raise ModeError(f"unknown baseline fusion kind {kind!r}")
        ok = meta.role == "student" and meta.fusion == kind
    else:
        raise ModeError(f"unknown evaluation mode {mode!r}; expected one of {MODES} or baseline:<kind>")
    if not ok:
        raise ModeError(f"{meta.role} checkpoint (fusion={meta.fusion}) cannot run in mode {mode!r}")


def _agent_boxes(raster, spec: BEVGridSpec, eval_cfg) -> list[list[Box]]:
    out = []
    for i in range(raster.logits.shape[0]):
        boxes = decode_raster(raster.logits.data[i], raster.regression.data[i], spec,
                              eval_cfg.score_threshold, eval_cfg.max_boxes)
        out.append(nms(boxes, eval_cfg.nms_iou))
    return out


def late_fusion(per_agent: list[list[Box]], sample: SceneSample, spec: BEVGridSpec, nms_iou: float) -> list[list[Box]]:
    """Pool every agent's boxes in the global frame, run one NMS, re-crop per agent."""
    pooled = []
    for boxes, pose in zip(per_agent, sample.poses):
        pooled.extend(transform_boxes(boxes, pose))
    kept = nms(pooled, nms_iou)
    out = []
    for pose in sample.poses:
        local = transform_boxes(kept, pose.inverse())
        out.append([b for b in local if spec.contains(b.cx, b.cy)])
    return out


def detect(model, meta: ModelMeta, sample: SceneSample, mode: str, spec: BEVGridSpec, eval_cfg,
           log: ChannelLog | None = None) -> list[list[Box]]:
    """Per-agent boxes (agent frames) for one scene."""
    with no_grad():
        if meta.role == "teacher":
            raster = teacher_forward(model, sample.inputs(holistic=True)).raster
        else:
            collaborate = mode not in ("lower", "late_lower")
            raster = model(sample.inputs(), sample.poses, spec, collaborate=collaborate, log=log).raster
    boxes = _agent_boxes(raster, spec, eval_cfg)
    if mode.startswith("late_"):
        boxes = late_fusion(boxes, sample, spec, eval_cfg.nms_iou)
    return boxes


def evaluate_model(model, meta: ModelMeta, samples: list[SceneSample], mode: str, spec: BEVGridSpec, eval_cfg,
                   log: ChannelLog | None = None, label: str | None = None) -> tuple[EvalReport, list[list[Box]]]:
    """AP@0.5/0.7 over every agent of every sample; each agent view counts as one scene."""
    check_mode(meta, mode)
    model.eval()
    dets, gts = [], []
    for s in samples:
        dets.extend(detect(model, meta, s, mode, spec, eval_cfg, log))
        gts.extend(s.gt)
    return build_report(label or mode, dets, gts), dets


def default_mode(meta: ModelMeta) -> str:
    if meta.role == "teacher":
        return "upper"
    if meta.fusion == "none":
        return "lower"
    if meta.fusion == "disco":
        return "disco"
    return f"baseline:{meta.fusion}"


# ---------------------------------------------------------------------------
# directional experiment
# ---------------------------------------------------------------------------

def directional_experiment(cfg: ExperimentConfig, seeds=(0, 1, 2), train: list[SceneSample] | None = None,
                           test: list[SceneSample] | None = None, callback=None) -> list[dict]:
    """Upper bound, lower bound and the graph-attention student with and without KD, once per training seed.

    The scenes are fixed by ``cfg.seed``; only initialisation and sample order
    change with the training seed.  Returns one dict of AP@0.5 per seed.
    """
    from .distill import train_student, train_teacher

    train = dataset(cfg, "train") if train is None else train
    test = dataset(cfg, "test") if test is None else test
    spec = cfg.grid.to_spec()
    widths = tuple(cfg.network.widths)
    results = []
    for seed in seeds:
        row = {"seed": seed}

        def variant(**update):
            return cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed, **update})})

        teacher, _ = train_teacher(train, variant())
        row["upper"] = evaluate_model(teacher, ModelMeta("teacher", widths, cfg.grid.height_bins, seed=seed), test,
                                      "upper", spec, cfg.eval)[0].ap50
        runs = [("lower", "none", False), ("disco_kd", "disco", True), ("disco_no_kd", "disco", False)]
        for name, fusion, kd in runs:
            c = variant(fusion=fusion, lambda_kd=cfg.train.lambda_kd if kd else 0.0)
            model, _ = train_student(train, teacher if kd else None, c)
            meta = ModelMeta("student", widths, cfg.grid.height_bins, fusion, c.train.ratio, kd, seed,
                             cfg.network.warp_mode)
            row[name] = evaluate_model(model, meta, test, default_mode(meta), spec, c.eval)[0].ap50
        if callback:
            callback(row)
        results.append(row)
    return results
