"""Command-line entry point.

Every command reads an optional JSON config (``--config``) on top of a
profile (``--profile``, default ``desk``), writes its artifacts under
``--out`` and drops a ``manifest.json`` there describing what it produced.

Exit codes: 0 on success, 1 when a library call fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .channel import ChannelLog, bandwidth_report, tradeoff_csv
from .config import PROFILES, ConfigError, ExperimentConfig, load_config
from .distill import log_csv, train_student, train_teacher
from .evaluation import EvalReport, dump_detections, reports_csv
from .experiments import (ModelMeta, dataset, default_mode, evaluate_model, generate_split, load_model,
                          save_model)
from .graph import FUSION_KINDS
from .networks import VALID_RATIOS
from .scene import save_scene

logger = logging.getLogger("disconet")

ABLATION_HEADER = ["fusion", "kd", "ap50", "ap70"]
SUMMARY_HEADER = ["run", "command", "method", "config_hash", "seed", "ratio", "bytes_per_frame_per_agent",
                  "ap50", "ap70", "duplicate"]


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seed: int
    artifacts: dict[str, int] = field(default_factory=dict)  # relative path -> size in bytes
    timings: dict[str, float] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def add(self, root: Path, path: Path) -> None:
        self.artifacts[str(Path(path).relative_to(root))] = Path(path).stat().st_size

    def write(self, root: Path) -> Path:
        out = root / "manifest.json"
        out.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return out


def read_manifest(path: Path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text()))


def verify_manifest(root: Path) -> RunManifest:
    """Load ``root/manifest.json`` and check every listed artifact exists with its recorded size."""
    man = read_manifest(root / "manifest.json")
    for rel, size in man.artifacts.items():
        p = root / rel
        if not p.exists():
            raise FileNotFoundError(f"{p} listed in manifest is missing")
        if p.stat().st_size != size:
            raise ValueError(f"{p} has {p.stat().st_size} bytes, manifest says {size}")
    return man


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.profile)
    train = {}
    if getattr(args, "fusion", None) is not None:
        train["fusion"] = args.fusion
    if getattr(args, "ratio", None) is not None:
        train["ratio"] = args.ratio
    if getattr(args, "kd", None) == "off":
        train["lambda_kd"] = 0.0
    if args.seed is not None:
        train["seed"] = args.seed
    if train:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update=train)})
        cfg = ExperimentConfig.model_validate(cfg.model_dump())
    return cfg


def _out(args) -> Path:
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write(root: Path, man: RunManifest, name: str, text: str) -> Path:
    p = root / name
    p.write_text(text)
    man.add(root, p)
    return p


def _student_meta(cfg: ExperimentConfig, kd: bool) -> ModelMeta:
    t = cfg.train
    return ModelMeta("student", tuple(cfg.network.widths), cfg.grid.height_bins, t.fusion, t.ratio, kd, t.seed,
                     cfg.network.warp_mode)


def _evaluate(model, meta, samples, mode, cfg, root, man, prefix="") -> tuple[EvalReport, ChannelLog]:
    log = ChannelLog()
    t0 = time.perf_counter()
    report, dets = evaluate_model(model, meta, samples, mode, cfg.grid.to_spec(), cfg.eval, log)
    man.timings[f"{prefix}evaluate"] = time.perf_counter() - t0
    _write(root, man, f"{prefix}eval_report.csv", reports_csv([report]))
    dets_path = root / f"{prefix}detections.json"
    dump_detections(dets, dets_path)
    man.add(root, dets_path)
    return report, log


def _fit_student(cfg, train_s, teacher, kd: bool):
    return train_student(train_s, teacher if kd else None, cfg)


def _kd_on(cfg: ExperimentConfig) -> bool:
    return cfg.train.lambda_kd > 0 and bool(cfg.train.kd_layers)


def _teacher(args, cfg, needed: bool):
    if args.teacher is None:
        if needed:
            raise UsageError("KD is on: pass --teacher CHECKPOINT or --kd off")
        return None
    model, meta = load_model(args.teacher)
    if meta.role != "teacher":
        raise ValueError(f"{args.teacher} is a {meta.role} checkpoint, not a teacher")
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    root = _out(args)
    seed = cfg.seed if args.seed is None else args.seed
    count = args.count if args.count is not None else (
        cfg.scene.train_scenes if args.split == "train" else cfg.scene.test_scenes)
    man = RunManifest("gen-scenes", cfg.config_hash(), __version__, seed)
    t0 = time.perf_counter()
    scenes = generate_split(cfg.scene.to_scene_config(), seed, args.split, count)
    for i, s in enumerate(scenes):
        p = root / f"scene_{i:05d}.json"
        save_scene(s, p)
        man.add(root, p)
    man.timings["generate"] = time.perf_counter() - t0
    man.metrics = {"split": args.split, "count": count}
    man.write(root)
    print(f"wrote {count} scenes to {root}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    root = _out(args)
    man = RunManifest("train-teacher", cfg.config_hash(), __version__, cfg.train.seed)
    t0 = time.perf_counter()
    samples = dataset(cfg, "train", args.train_scenes)
    man.timings["data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    net, rows = train_teacher(samples, cfg)
    man.timings["train"] = time.perf_counter() - t0
    meta = ModelMeta("teacher", tuple(cfg.network.widths), cfg.grid.height_bins, seed=cfg.train.seed)
    for p in save_model(net, meta, root / "teacher.ckpt"):
        man.add(root, p)
    _write(root, man, "train_log.csv", log_csv(rows))
    man.metrics = {"role": "teacher", "method": "upper"}
    man.write(root)
    print(f"teacher checkpoint: {root / 'teacher.ckpt'}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _config(args)
    root = _out(args)
    kd = _kd_on(cfg)
    teacher = _teacher(args, cfg, kd)
    man = RunManifest("train-student", cfg.config_hash(), __version__, cfg.train.seed)
    t0 = time.perf_counter()
    samples = dataset(cfg, "train", args.train_scenes)
    man.timings["data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model, rows = _fit_student(cfg, samples, teacher, kd)
    man.timings["train"] = time.perf_counter() - t0
    meta = _student_meta(cfg, kd)
    for p in save_model(model, meta, root / "student.ckpt"):
        man.add(root, p)
    _write(root, man, "train_log.csv", log_csv(rows))
    man.metrics = {"role": "student", "method": default_mode(meta), "fusion": meta.fusion, "ratio": meta.ratio, "kd": kd}
    man.write(root)
    print(f"student checkpoint: {root / 'student.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    root = _out(args)
    model, meta = load_model(args.checkpoint)
    mode = args.mode or default_mode(meta)
    man = RunManifest("evaluate", cfg.config_hash(), __version__, meta.seed)
    t0 = time.perf_counter()
    samples = dataset(cfg, "test", args.test_scenes)
    man.timings["data"] = time.perf_counter() - t0
    report, log = _evaluate(model, meta, samples, mode, cfg, root, man)
    collaborative = meta.role == "student" and mode not in ("lower", "late_lower") and meta.fusion != "none"
    bytes_pf = log.payload_per_frame_per_agent() if collaborative else 0.0
    man.metrics = {"method": mode, "ratio": meta.ratio if collaborative else 0, "bytes_per_frame_per_agent": bytes_pf,
                   "rounds": log.rounds, "ap50": report.ap50, "ap70": report.ap70}
    man.write(root)
    print(reports_csv([report]), end="")
    return 0


def cmd_ablate_fusion(args) -> int:
    cfg = _config(args)
    root = _out(args)
    teacher = _teacher(args, cfg, True)
    man = RunManifest("ablate-fusion", cfg.config_hash(), __version__, cfg.train.seed)
    train_s = dataset(cfg, "train", args.train_scenes)
    test_s = dataset(cfg, "test", args.test_scenes)
    kinds = args.kinds.split(",") if args.kinds else list(FUSION_KINDS)
    rows = []
    for kind in kinds:
        for kd in (True, False):
            tag = f"{kind}_{'kd' if kd else 'no_kd'}"
            update = {"fusion": kind, "lambda_kd": cfg.train.lambda_kd if kd else 0.0}
            c = cfg.model_copy(update={"train": cfg.train.model_copy(update=update)})
            t0 = time.perf_counter()
            model, log_rows = _fit_student(c, train_s, teacher, kd)
            man.timings[f"{tag}/train"] = time.perf_counter() - t0
            meta = _student_meta(c, kd)
            mode = default_mode(meta)
            report, _ = evaluate_model(model, meta, test_s, mode, c.grid.to_spec(), c.eval, label=tag)
            rows.append([kind, "kd" if kd else "no_kd", f"{report.ap50:.6f}", f"{report.ap70:.6f}"])
            (root / "logs").mkdir(exist_ok=True)
            _write(root, man, f"logs/{tag}.csv", log_csv(log_rows))
            logger.info("%s: AP50 %.4f AP70 %.4f", tag, report.ap50, report.ap70)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    w.writerows(rows)
    _write(root, man, "ablation.csv", buf.getvalue())
    man.metrics = {"rows": len(rows)}
    man.write(root)
    print(buf.getvalue(), end="")
    return 0


def cmd_tradeoff(args) -> int:
    cfg = _config(args)
    root = _out(args)
    kd = _kd_on(cfg)
    teacher = _teacher(args, cfg, kd)
    man = RunManifest("tradeoff", cfg.config_hash(), __version__, cfg.train.seed)
    train_s = dataset(cfg, "train", args.train_scenes)
    test_s = dataset(cfg, "test", args.test_scenes)
    spec = cfg.grid.to_spec()
    runs, reports = [], {}
    ratios = [int(r) for r in args.ratios.split(",")] if args.ratios else list(VALID_RATIOS)
    for r in ratios:
        c = cfg.model_copy(update={"train": cfg.train.model_copy(update={"fusion": "disco", "ratio": r})})
        c = ExperimentConfig.model_validate(c.model_dump())
        t0 = time.perf_counter()
        model, _ = _fit_student(c, train_s, teacher, kd)
        man.timings[f"ratio{r}/train"] = time.perf_counter() - t0
        log = ChannelLog()
        meta = _student_meta(c, kd)
        rep, _ = evaluate_model(model, meta, test_s, "disco", spec, c.eval, log, label=f"disco({r})")
        runs.append({"run_id": f"disco{r}", "method": "disco", "ratio": r, "log": log})
        reports[f"disco{r}"] = rep
    # the zero-byte reference: no communication at all
    c = cfg.model_copy(update={"train": cfg.train.model_copy(update={"fusion": "none", "lambda_kd": 0.0})})
    model, _ = _fit_student(c, train_s, None, False)
    rep, _ = evaluate_model(model, _student_meta(c, False), test_s, "lower", spec, c.eval, label="lower")
    runs.append({"run_id": "lower", "method": "no_collaboration", "ratio": 0, "log": None})
    reports["lower"] = rep
    rows = bandwidth_report(runs, reports)
    _write(root, man, "tradeoff.csv", tradeoff_csv(rows))
    man.metrics = {"rows": len(rows)}
    man.write(root)
    print(tradeoff_csv(rows), end="")
    return 0


def export_report(run_dir: str | Path) -> tuple[list[dict], str]:
    """Join every manifest under ``run_dir`` into one summary table.

    Runs that share a config hash and method are flagged as duplicates.
    Writes ``summary.csv`` and ``summary.md`` into ``run_dir``.
    """
    run_dir = Path(run_dir)
    paths = sorted(run_dir.rglob("manifest.json"))
    if not paths:
        raise FileNotFoundError(f"no manifest.json under {run_dir}")
    rows, seen = [], {}
    for p in paths:
        man = verify_manifest(p.parent)
        m = man.metrics
        key = (man.config_hash, man.command, m.get("method", ""))
        seen[key] = seen.get(key, 0) + 1
        ap50 = m.get("ap50", "")
        ap70 = m.get("ap70", "")
        rows.append({
            "run": str(p.parent.relative_to(run_dir)) or ".",
            "command": man.command,
            "method": m.get("method", ""),
            "config_hash": man.config_hash,
            "seed": man.seed,
            "ratio": m.get("ratio", ""),
            "bytes_per_frame_per_agent": m.get("bytes_per_frame_per_agent", ""),
            "ap50": f"{ap50:.6f}" if ap50 != "" else "",
            "ap70": f"{ap70:.6f}" if ap70 != "" else "",
            "_key": key,
        })
    for r in rows:
        r["duplicate"] = "yes" if seen[r.pop("_key")] > 1 else "no"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (run_dir / "summary.csv").write_text(buf.getvalue())
    md = ["| " + " | ".join(SUMMARY_HEADER) + " |", "|" + "---|" * len(SUMMARY_HEADER)]
    md += ["| " + " | ".join(str(r[k]) for k in SUMMARY_HEADER) + " |" for r in rows]
    text = "\n".join(md) + "\n"
    (run_dir / "summary.md").write_text(text)
    return rows, text


def cmd_report(args) -> int:
    _, text = export_report(args.runs)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (merged over the profile)")
    common.add_argument("--profile", choices=PROFILES, default="desk")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="training seed (gen-scenes: scene seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--train-scenes", help="directory of scene JSONs (default: regenerate from config)")
    data.add_argument("--test-scenes", help="directory of scene JSONs (default: regenerate from config)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--fusion", choices=FUSION_KINDS)
    model.add_argument("--ratio", type=int, choices=VALID_RATIOS)
    model.add_argument("--kd", choices=("on", "off"))
    model.add_argument("--teacher", help="teacher checkpoint for distillation")

    p = argparse.ArgumentParser(prog="disconet", description="Collaborative BEV detection experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-scenes", parents=[common], help="write scene JSON files")
    g.add_argument("--count", type=int)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("train-teacher", parents=[common, data], help="train the early-collaboration teacher")
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", parents=[common, data, model], help="train an intermediate-collaboration student")
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("evaluate", parents=[common, data], help="AP@0.5/0.7 of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", help="lower|upper|late_lower|late_upper|disco|baseline:<kind> (default from checkpoint)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate-fusion", parents=[common, data, model], help="every fusion kind with and without KD")
    a.add_argument("--kinds", help="comma-separated subset of fusion kinds")
    a.set_defaults(func=cmd_ablate_fusion)

    o = sub.add_parser("tradeoff", parents=[common, data, model], help="sweep compression ratios")
    o.add_argument("--ratios", help="comma-separated subset of ratios")
    o.set_defaults(func=cmd_tradeoff)

    r = argparse.ArgumentParser(add_help=False)
    r.add_argument("--runs", required=True, help="directory holding run manifests")
    rep = sub.add_parser("report", parents=[r], help="summarise manifests into summary.csv / summary.md")
    rep.add_argument("-v", "--verbose", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"disconet: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
