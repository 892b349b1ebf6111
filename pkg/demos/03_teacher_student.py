"""Train a teacher, a lower-bound student and a distilled student on a small dataset, then compare.

Training uses the full desk profile (200 scenes, three epochs); only the test
set is cut to 10 scenes. Expect about six minutes on one core. Smaller
training sets leave the scores under the 0.3 report threshold.
"""

import time

from disconet.config import load_config
from disconet.distill import train_student, train_teacher
from disconet.experiments import ModelMeta, dataset, evaluate_model

cfg = load_config(profile="desk")
cfg = cfg.model_copy(update={
    "scene": cfg.scene.model_copy(update={"test_scenes": 10}),
})
spec = cfg.grid.to_spec()
train, test = dataset(cfg, "train"), dataset(cfg, "test")
print(f"{len(train)} training scenes, {len(test)} test scenes")

t0 = time.time()
teacher, log = train_teacher(train, cfg)
print(f"teacher: {len(log)} steps, last loss {log[-1]['total']:.3f} ({time.time() - t0:.0f}s)")

widths = tuple(cfg.network.widths)
report, _ = evaluate_model(teacher, ModelMeta("teacher", widths, 13), test, "upper", spec, cfg.eval)
print(f"upper bound (holistic input)   AP@0.5 {report.ap50:.3f}  AP@0.7 {report.ap70:.3f}")

# Lower bound: same network, no messages at all.
no_kd = cfg.model_copy(update={"train": cfg.train.model_copy(update={"fusion": "none", "lambda_kd": 0.0})})
lower, _ = train_student(train, None, no_kd)
report, _ = evaluate_model(lower, ModelMeta("student", widths, 13, "none"), test, "lower", spec, cfg.eval)
print(f"lower bound (own scan only)    AP@0.5 {report.ap50:.3f}  AP@0.7 {report.ap70:.3f}")

# The distilled student: graph attention fusion, teacher features as targets.
disco, log = train_student(train, teacher, cfg)
kd = {k: round(v, 4) for k, v in log[-1].items() if k.startswith("kd_") and v}
print("last-step KD terms:", kd)
report, _ = evaluate_model(disco, ModelMeta("student", widths, 13, "disco", kd=True), test, "disco", spec, cfg.eval)
print(f"distilled collaboration        AP@0.5 {report.ap50:.3f}  AP@0.7 {report.ap70:.3f}")
