"""Single command-line entry point wiring the pipeline end to end.

Exit codes: 0 success, 2 user/config error, 3 numeric failure (non-finite loss).
All randomness flows from explicit seed fields; outputs carry no timestamps, so
reruns with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import replace
from pathlib import Path

from . import data as td
from . import evaluation as ev
from . import model as tm
from .autodiff import NonFiniteError
from .data import SchemaError
from .pruning import PruneSpec, prune_model
from .tokenizer import tokenize
from .training import LossConfig, StagePlan, train_stage, write_metrics_csv

CONFIG_DIR = Path(__file__).parent / "configs"


class UserError(ValueError):
    """Invalid invocation or config; maps to exit code 2."""


def _resolve_config_path(spec: str) -> Path:
    """Accept a filesystem path, a packaged path like table1/0.6B.json, or a bare size name."""
    p = Path(spec)
    if p.exists():
        return p
    candidates = [CONFIG_DIR / spec, CONFIG_DIR / f"{spec}.json", CONFIG_DIR / "table1" / spec, CONFIG_DIR / "table1" / f"{spec}.json"]
    for c in candidates:
        if c.exists():
            return c
    raise UserError(f"config not found: {spec}")


def _load_records_with_lines(path: Path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append((lineno, json.loads(line)))
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
    return out


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def cmd_consolidate(args) -> int:
    inputs = sorted(Path(args.input).glob("*.jsonl")) if Path(args.input).is_dir() else [Path(args.input)]
    if not inputs:
        raise UserError(f"no .jsonl files under {args.input}")
    rng = random.Random(args.seed)
    samples: list[td.CanonicalSample] = []
    classed: list[dict] = []
    for path in inputs:
        for lineno, record in _load_records_with_lines(path):
            if "class" in record and "query" not in record and "label" not in record:
                classed.append(record)
                continue
            try:
                samples.append(td.consolidate(record, record.get("task_type", ""), rng))
            except SchemaError as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from e
    samples.extend(td.consolidate_records(classed, rng))
    if args.cap is not None:
        samples = td.cap_per_source(samples, args.cap, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    td.write_samples(out / "canonical.jsonl", samples)
    _write_json(out / "stats.json", td.stats_report(samples))
    print(f"consolidated {len(samples)} samples -> {out / 'canonical.jsonl'}")
    return 0


def cmd_stats(args) -> int:
    samples = td.read_samples(args.input)
    report = td.stats_report(samples)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "stats.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_mine(args) -> int:
    samples = td.read_samples(args.input)
    model = tm.load_checkpoint(args.checkpoint, trainable=False)
    corpus = [s.positive for s in samples]
    queries = [s.query for s in samples]
    embedder = lambda text: tm.embed_text(model, text)
    mined = td.mine_hard_negatives(
        queries, corpus, embedder, k=args.k, skip_top=args.skip_top, positive_indices=list(range(len(samples)))
    )
    out = []
    for s, negs in zip(samples, mined):
        merged = negs if args.mode == "replace" else s.negatives + [n for n in negs if n not in s.negatives]
        out.append(replace(s, negatives=merged))
    td.write_samples(args.out, out)
    print(f"mined {args.k} negatives for {len(out)} samples -> {args.out}")
    return 0


def _plan_from_json(path: str) -> tuple[StagePlan, dict]:
    with open(path) as f:
        raw = json.load(f)
    required = ("stage", "lr", "epochs", "batch_size", "mrl_dims", "seed", "data")
    missing = [k for k in required if k not in raw]
    if missing:
        raise UserError(f"plan {path} missing fields: {', '.join(missing)}")
    loss = LossConfig(
        mrl_dims=tuple(raw["mrl_dims"]),
        temperature=raw.get("temperature", 0.05),
        mrl_weights=tuple(raw["mrl_weights"]) if raw.get("mrl_weights") else None,
        distill_weight=raw.get("distill_weight", 1.0),
    )
    plan = StagePlan(
        stage=raw["stage"],
        learning_rate=raw["lr"],
        epochs=raw["epochs"],
        batch_size=raw["batch_size"],
        loss=loss,
        seed=raw["seed"],
        teacher=raw.get("teacher"),
    )
    return plan, raw


def _load_training_samples(plan: StagePlan, raw: dict) -> list[td.CanonicalSample]:
    samples: list[td.CanonicalSample] = []
    for path in raw["data"]:
        samples.extend(td.read_samples(path))
    if not samples:
        raise UserError("no training samples found")
    if plan.stage == 2:
        if not raw.get("instructions"):
            raise UserError("stage-2 plans need an instructions template file")
        with open(raw["instructions"]) as f:
            templates = json.load(f)
        samples = td.attach_instructions(samples, templates)
        rng = random.Random(plan.seed + 1)
        samples = [td.apply_instructions(s, 2, raw.get("p_doc", 0.30), rng) for s in samples]
    return samples


def cmd_train(args) -> int:
    plan, raw = _plan_from_json(args.plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_step = 0
    if args.resume:
        model = tm.load_checkpoint(args.resume)
        state_path = Path(args.resume) / "training_state.json"
        if state_path.exists():
            with open(state_path) as f:
                start_step = json.load(f)["step"]
    else:
        if not raw.get("model_config"):
            raise UserError("plan needs model_config (or pass --resume)")
        config = tm.ModelConfig.from_json(_resolve_config_path(raw["model_config"]))
        model = tm.init_model(config, plan.seed)
    teacher = None
    if plan.teacher is not None:
        teacher = tm.load_checkpoint(plan.teacher, trainable=False)
    samples = _load_training_samples(plan, raw)
    batches = td.epoch_batches(samples, plan.batch_size, random.Random(plan.seed), plan.epochs, stage=plan.stage)
    run_plan = replace(plan, epochs=1)  # epoch reshuffling is baked into the batch list
    _, metrics = train_stage(
        model,
        batches,
        run_plan,
        teacher=teacher,
        checkpoint_dir=out / "checkpoint",
        metrics_path=out / "metrics.csv",
        start_step=start_step,
    )
    _write_json(out / "checkpoint" / "training_state.json", {"step": metrics[-1].step if metrics else start_step})
    print(f"trained {len(metrics)} steps; final loss {metrics[-1].total_loss:.6f}" if metrics else "no steps run")
    return 0


def cmd_prune(args) -> int:
    model = tm.load_checkpoint(args.checkpoint)
    samples = td.read_samples(args.calibration)
    rng = random.Random(args.seed)
    texts = [s.query for s in samples] + [s.positive for s in samples]
    if len(texts) > args.calib_size:
        texts = rng.sample(texts, args.calib_size)
    calib = [tokenize(t, model.config.max_seq_len) for t in texts]
    spec = PruneSpec(
        target_hidden=args.target_hidden,
        target_mlp=args.target_mlp,
        target_layers=args.target_layers,
        calibration=calib,
    )
    pruned, report = prune_model(model, spec, layer_strategy=args.layer_strategy)
    out = Path(args.out)
    tm.save_checkpoint(pruned, out / "checkpoint")
    _write_json(out / "prune_report.json", report)
    print(f"pruned to hidden={args.target_hidden} mlp={args.target_mlp} layers={args.target_layers} -> {out}")
    return 0


def cmd_eval(args) -> int:
    model = tm.load_checkpoint(args.checkpoint, trainable=False)
    tasks = ev.load_tasks(args.tasks)
    report = ev.evaluate(model, tasks, dim=args.dim, threads=args.threads)
    if args.out:
        ev.write_scores_csv(args.out, report)
    for s in report.scores:
        print(f"{s.name} ({s.kind}): {s.score:.4f}")
    if report.mean is not None:
        print(f"mean: {report.mean:.4f}")
    return 0


def cmd_sweep_mrl(args) -> int:
    model = tm.load_checkpoint(args.checkpoint, trainable=False)
    tasks = ev.load_tasks(args.tasks)
    dims = [int(d) for d in args.dims.split(",") if d]
    rows = ev.mrl_sweep(model, tasks, dims, threads=args.threads)
    if args.out:
        ev.write_sweep_csv(args.out, rows)
    for d, score in rows:
        print(f"dim {d}: {score:.4f}")
    return 0


def cmd_param_count(args) -> int:
    config = tm.ModelConfig.from_json(_resolve_config_path(args.config))
    total = tm.param_count(config)
    emb = tm.embedding_param_count(config)
    print(f"embedding parameters:     {emb:,}")
    print(f"non-embedding parameters: {total - emb:,}")
    print(f"total parameters:         {total:,}")
    return 0


def cmd_ablate(args) -> int:
    teacher = tm.load_checkpoint(args.teacher, trainable=False)
    plan, raw = _plan_from_json(args.plan)
    if plan.loss.distill_weight <= 0:
        raise UserError("ablate needs distill_weight > 0 in the plan")
    samples = _load_training_samples(plan, raw)
    tasks = ev.load_tasks(args.tasks)
    rng = random.Random(plan.seed)
    texts = [s.query for s in samples] + [s.positive for s in samples]
    calib_texts = rng.sample(texts, min(args.calib_size, len(texts)))
    calib = [tokenize(t, teacher.config.max_seq_len) for t in calib_texts]
    spec = PruneSpec(args.target_hidden, args.target_mlp, args.target_layers, calib)
    pruned, _ = prune_model(teacher, spec)
    student_loss = replace(plan.loss, mrl_dims=tuple(d for d in plan.loss.mrl_dims if d <= args.target_hidden))
    if student_loss.mrl_dims[-1] != args.target_hidden:
        student_loss = replace(student_loss, mrl_dims=student_loss.mrl_dims + (args.target_hidden,))
    replicates = []
    wins = 0
    for r in range(args.replicates):
        arm_batches = td.epoch_batches(samples, plan.batch_size, random.Random(plan.seed + 1000 + r), plan.epochs, stage=plan.stage)
        arm_plan = replace(plan, epochs=1, loss=student_loss, teacher=plan.teacher or str(args.teacher))
        result = ev.ablation_distill(pruned, teacher, arm_batches, arm_plan, tasks, threads=args.threads)
        wins += result["delta"] > 0
        replicates.append(result)
        print(
            f"replicate {r}: with={result['with_distillation']:.4f} "
            f"without={result['without_distillation']:.4f} delta={result['delta']:+.4f}"
        )
    report = {"replicates": replicates, "positive_delta_count": wins, "replicate_count": args.replicates}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "ablation.json", report)
    print(f"distillation improved {wins}/{args.replicates} replicates")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinyembed", description="Desk-scale embedding-model training pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0, help="seed for any sampling this command does")
        p.add_argument("--threads", type=int, default=1, help="worker threads for read-only embedding passes")

    p = sub.add_parser("consolidate", help="ingest raw JSONL into canonical contrastive samples")
    p.add_argument("--input", required=True, help="JSONL file or directory of *.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=None, help="max samples per source")
    common(p)
    p.set_defaults(fn=cmd_consolidate)

    p = sub.add_parser("stats", help="per-source/format/task-type counts of a canonical file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("mine", help="mine hard negatives with a checkpoint embedder")
    p.add_argument("--input", required=True, help="canonical JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--skip-top", type=int, default=1)
    p.add_argument("--mode", choices=("replace", "extend"), default="replace")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("train", help="run one training stage from a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint dir to continue from")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="structured pruning of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", required=True, help="canonical JSONL to draw calibration texts from")
    p.add_argument("--calib-size", type=int, default=64)
    p.add_argument("--target-hidden", type=int, required=True)
    p.add_argument("--target-mlp", type=int, required=True)
    p.add_argument("--target-layers", type=int, required=True)
    p.add_argument("--layer-strategy", choices=("first_n", "norm_change"), default="first_n")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="score a checkpoint on task files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--out", default=None, help="per-task CSV path")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-mrl", help="evaluate at several truncation dimensions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--dims", required=True, help="comma-separated ascending dims, e.g. 8,16,32")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(fn=cmd_sweep_mrl)

    p = sub.add_parser("param-count", help="analytic parameter count for a config")
    p.add_argument("--config", required=True, help="path or shipped name (e.g. table1/0.6B.json)")
    common(p)
    p.set_defaults(fn=cmd_param_count)

    p = sub.add_parser("ablate", help="paired with/without-distillation training from a pruned teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint dir")
    p.add_argument("--plan", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--target-hidden", type=int, required=True)
    p.add_argument("--target-mlp", type=int, required=True)
    p.add_argument("--target-layers", type=int, required=True)
    p.add_argument("--calib-size", type=int, default=64)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (UserError, SchemaError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
