"""Command-line entry point: ``tokshift {cost,train,eval,shift-demo,attn,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, harness
from .checkpoint import CheckpointError, check_against, load_checkpoint, round_to_f32, save_checkpoint
from .model import PRESETS, ModelConfig, init_params, model_forward
from .runtime import tune_allocator
from .shift import ShiftSpec, token_shift
from .tensor import Tensor

log = logging.getLogger("tokshift")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _milestones(text: str) -> tuple[int, ...]:
    text = text.strip().strip("[]")
    return tuple(int(x) for x in text.replace(",", " ").split()) if text else ()


def _optional_float(text: str) -> float | None:
    return None if text.lower() == "none" else float(text)


# key -> parser; everything a run can set
KEYS = {
    "preset": str, "res": int, "height": int, "width": int, "frames": int, "patch": int,
    "dim": int, "depth": int, "heads": int, "mlp_ratio": int, "classes": int,
    "variant": str, "frac_back": Fraction, "frac_forth": Fraction, "placement": str,
    "normalized_skip": _bool, "eps": float,
    "epochs": int, "lr": float, "momentum": float, "decay": float, "milestones": _milestones,
    "batch_size": int, "clip_norm": _optional_float,
    "step": int, "views": int, "crops": int,
    "seed": int, "out": str, "train_clips": int, "val_clips": int,
    "square": int, "speed": int, "noise": float,
}

TOY = dict(
    frames=8, height=32, width=32, patch=8, dim=64, depth=4, heads=4, mlp_ratio=4, classes=4,
    variant="token", frac_back=Fraction(1, 4), frac_forth=Fraction(1, 4), placement="prior_residual",
    normalized_skip=False, eps=1e-6,
    epochs=15, lr=0.01, momentum=0.9, decay=0.1, milestones=(10, 13), batch_size=16, clip_norm=1.0,
    step=1, views=1, crops=1, seed=0, out="runs", train_clips=2048, val_clips=512,
    square=6, speed=2, noise=0.05,
)


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: harness.TrainSchedule
    sampling: harness.SamplingSpec
    task: harness.SyntheticTask
    seed: int
    out: Path
    train_clips: int
    val_clips: int


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = KEYS[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_run_config(values: dict) -> RunConfig:
    merged = dict(TOY)
    if "preset" in values:
        name = values["preset"]
        if name not in PRESETS:
            raise ConfigError(f"bad value for 'preset': {name!r} (expected one of {sorted(PRESETS)})")
        merged.update(PRESETS[name], classes=400, height=224, width=224)
    if "res" in values:
        merged.update(height=values["res"], width=values["res"])
    merged.update({k: v for k, v in values.items() if k not in ("preset", "res")})

    def build(key, factory):
        try:
            return factory()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {key}: {exc}") from exc

    m = merged
    shift = build("shift (variant/frac_back/frac_forth/placement)", lambda: ShiftSpec(
        m["variant"], m["frac_back"], m["frac_forth"], m["placement"]))
    model = build("model (frames/height/width/patch/dim/depth/heads/mlp_ratio/classes)", lambda: ModelConfig(
        frames=m["frames"], height=m["height"], width=m["width"], patch=m["patch"], dim=m["dim"],
        depth=m["depth"], heads=m["heads"], mlp_ratio=m["mlp_ratio"], classes=m["classes"],
        shift=shift, normalized_skip=m["normalized_skip"], eps=m["eps"]))
    schedule = build("schedule (epochs/lr/momentum/decay/milestones/batch_size/clip_norm)", lambda: harness.TrainSchedule(
        m["epochs"], m["lr"], m["momentum"], m["decay"], m["milestones"], m["batch_size"], m["clip_norm"]))
    sampling = build("sampling (frames/step/views/crops)", lambda: harness.SamplingSpec(
        m["frames"], m["step"], m["views"], m["crops"]))
    task = build("task (square/speed/noise/frames/height/width)", lambda: harness.SyntheticTask(
        m["seed"], m["frames"], m["height"], m["width"], m["square"], m["speed"], m["noise"]))
    for key in ("train_clips", "val_clips"):
        if m[key] < 1:
            raise ConfigError(f"invalid {key}: must be >= 1")
    return RunConfig(model, schedule, sampling, task, m["seed"], Path(m["out"]), m["train_clips"], m["val_clips"])


def load_run_config(path, seed: int | None = None, out: str | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text, str(path))
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    return build_run_config(values)


def _run_config(args) -> RunConfig:
    if args.config is None:
        return build_run_config({k: v for k, v in (("seed", args.seed), ("out", args.out)) if v is not None})
    return load_run_config(args.config, args.seed, args.out)


# ---------------------------------------------------------------------------
# commands


def _truncate(value: float, digits: int = 1) -> str:
    # published tables truncate rather than round (134.78 -> 134.7)
    scale = 10**digits
    return f"{math.floor(value * scale + 1e-9) / scale:.{digits}f}"


def cmd_cost(args) -> int:
    run = _run_config(args)
    cfg = run.model
    report = analysis.count_flops(cfg)
    full = report.full_gflops_per_view
    print(report.table())
    print()
    print(f"params: {report.total_params / 1e6:.1f}M ({report.total_params:,})")
    print(f"headline GFLOPs/view: {_truncate(report.gflops_per_view)} x {run.sampling.views * run.sampling.crops} views")
    print(f"full GFLOPs/view (with attention and head): {_truncate(full)}")
    print(f"visual words: {analysis.word_count(cfg)}")
    print()
    for line in report.tsv_lines():
        print(line)
    print(f"total_params\t{report.total_params}")
    print(f"headline_macs\t{report.headline_macs}")
    print(f"full_macs\t{report.full_macs}")
    print(f"words\t{analysis.word_count(cfg)}")
    if args.out is not None:
        from .plotting import plot_cost

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.tsv").write_text("\n".join(report.tsv_lines()) + "\n")
        plot_cost(report, out / "cost.png")
    return 0


def _final_val(params, run: RunConfig) -> tuple[float, float, float]:
    logits, labels = [], []
    for clips, lab in harness.iter_val(run.task, run.val_clips):
        logits.append(harness.predict(params, run.model, clips))
        labels.append(lab)
    logits = np.concatenate(logits)
    labels = np.concatenate(labels)
    from .tensor import cross_entropy

    loss = float(cross_entropy(Tensor(logits), labels).data[0])
    top1 = float(harness.topk_hits(logits, labels, 1).mean())
    top5 = float(harness.topk_hits(logits, labels, min(5, run.model.classes)).mean())
    return loss, top1, top5


def cmd_train(args) -> int:
    run = _run_config(args)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.tsv"
    metrics_path.write_text("")

    def emit(m: harness.EpochMetrics) -> None:
        print(m.line(), flush=True)
        with open(metrics_path, "a") as fh:
            fh.write(m.line() + "\n")

    result = harness.train(
        run.model, run.task, run.schedule, seed=run.seed,
        n_train=run.train_clips, n_val=run.val_clips, on_epoch=emit,
    )
    # report the metric of exactly the weights that the checkpoint stores
    round_to_f32(result.params)
    ckpt = out / "checkpoint.tksf"
    save_checkpoint(ckpt, result.params)
    loss, top1, top5 = _final_val(result.params, run)
    print(f"final\tval\t{loss:.6f}\t{top1:.6f}")
    print(f"top5\t{top5:.6f}")
    print(f"checkpoint\t{ckpt}")
    from .plotting import plot_training

    plot_training(result.metrics, out / "training.png")
    return 0


def _load_params(args, run: RunConfig):
    if args.checkpoint is None:
        return init_params(run.model, run.seed)
    params = load_checkpoint(args.checkpoint)
    check_against(params, run.model)
    return params


def cmd_eval(args) -> int:
    run = _run_config(args)
    params = _load_params(args, run)
    loss, top1, top5 = _final_val(params, run)
    print(f"final\tval\t{loss:.6f}\t{top1:.6f}")
    print(f"top1\t{top1:.6f}")
    print(f"top5\t{top5:.6f}")
    return 0


def _matrix(rows: np.ndarray) -> str:
    width = max(len(f"{v:g}") for v in rows.reshape(-1))
    return "\n".join("  t=%d  [ %s ]" % (t, "  ".join(f"{v:g}".rjust(width) for v in row))
                     for t, row in enumerate(rows))


def cmd_shift_demo(args) -> int:
    T, D = args.frames, args.dim
    if T < 1 or D < 1:
        raise ConfigError("frames and dim must be >= 1")
    before = np.arange(1, T * D + 1, dtype=np.float64).reshape(T, D)
    after = token_shift(Tensor(before), args.back, args.forth).data
    print(f"class tokens, T={T} frames x D={D} channels; "
          f"channels [0,{args.back}) from t-1, [{D - args.forth},{D}) from t+1, zeros past the clip")
    print("before:")
    print(_matrix(before))
    print("after:")
    print(_matrix(after))
    return 0


def cmd_attn(args) -> int:
    run = _run_config(args)
    params = _load_params(args, run)
    seed = run.seed
    label = seed % run.task.classes
    clip, _ = harness.make_clip(run.task, [run.task.seed, 9, seed], label)
    _, acts = model_forward(clip, params, run.model)
    dump = analysis.attention_map(acts, args.layer, run.model)
    out = run.out
    paths = analysis.write_heatmaps(dump, out)
    raw = out / f"attn_l{dump.layer}.tsv"
    raw.write_text("\n".join(dump.tsv_lines()) + "\n")
    from .plotting import plot_attention

    plot_attention(clip, analysis.heatmaps(dump), out / f"attn_l{dump.layer}.png")
    print(f"label\t{harness.LABELS[label]}")
    print(f"layer\t{dump.layer}")
    for p in paths:
        print(f"heatmap\t{p}")
    print(f"raw\t{raw}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_reports, run_suite

    reports = run_suite(seed=args.seed or 0)
    print(format_reports(reports))
    failed = [r.op for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return 0 if not failed else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", type=Path, help="flat key=value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path)

    common(sub.add_parser("cost", help="parameter / FLOP / word-count report"))
    common(sub.add_parser("train", help="train on the synthetic motion task"))
    common(sub.add_parser("eval", help="top-1/top-5 on the validation clips"), checkpoint=True)
    p = sub.add_parser("attn", help="export class-token attention heatmaps")
    common(p, checkpoint=True)
    p.add_argument("--layer", type=int, default=-1)
    p = sub.add_parser("shift-demo", help="print a token shift on a small matrix")
    p.add_argument("--frames", "-T", type=int, default=3)
    p.add_argument("--dim", "-D", type=int, default=4)
    p.add_argument("--back", type=int, default=1)
    p.add_argument("--forth", type=int, default=1)
    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "cost": cmd_cost, "train": cmd_train, "eval": cmd_eval,
    "shift-demo": cmd_shift_demo, "attn": cmd_attn, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    tune_allocator()
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except harness.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
