"""Command-line entry point: `minimoe <command> ...`."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .checkpoint import load_checkpoint, save_checkpoint
from .compute import SCHEMA, compute_report, count_params, measure_throughput, tally_params
from .config import (BALANCE_STAGES, ROUTING_ALGORITHMS, DistillPlan, FinetuneSettings, PretrainSettings,
                     load_model_config)
from .corpus import TASK_KINDS, Vocab, build_vocab, encode_windows, make_synthetic_task, read_corpus
from .errors import ConfigError, MiniMoEError, TrainingDivergedError
from .finetune import frozen_random_baseline, run_finetune
from .harness import (cmd_capacity_gap, cmd_distill, cmd_pretrain, cmd_sweep_experts, cmd_sweep_routing,
                      load_task, run_experiment, write_json)
from .model import EncoderModel
from .rng import resolve_seed, stream
from .spectra import DEFAULT_THRESHOLDS, factorize, spectrum_report

logger = logging.getLogger("minimoe")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps({"schema": SCHEMA, **payload}, sort_keys=True, indent=2, default=str))


def _csv_ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _expert_pair(text: str) -> Tuple[int, int]:
    """"x,y" -> (m_mha, m_ffn)."""
    values = _csv_ints(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected m_mha,m_ffn, got {text!r}")
    return values[0], values[1]


def _csv(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _vocab(args, vocab_size: int) -> Vocab:
    """--vocab file when given, else the deterministic vocabulary rebuilt from --corpus."""
    if getattr(args, "vocab", None):
        return Vocab.load(args.vocab)
    return build_vocab(read_corpus(args.corpus), vocab_size)


def _plan(args, teacher: Optional[str] = None) -> DistillPlan:
    """Plan from --plan or the flags; `teacher` is the fallback when neither names one."""
    teacher = args.teacher or teacher
    plan = DistillPlan.load(args.plan) if args.plan else None
    if not teacher and (plan is None or not plan.teacher):
        raise ConfigError("distillation needs a teacher: pass --teacher or a --plan that names one")
    if plan is None:
        plan = DistillPlan(teacher=teacher, student=args.student)
    overrides: Dict[str, Any] = {"seed": resolve_seed(args.seed if args.seed is not None else plan.seed)}
    if teacher:
        overrides["teacher"] = teacher
    if getattr(args, "steps", None) is not None:
        overrides["max_steps"] = args.steps
    return DistillPlan.from_dict({**plan.to_dict(), **overrides})


def _windows(args, plan: DistillPlan) -> list:
    vocab = _vocab(args, plan.student.vocab_size)
    return encode_windows(read_corpus(args.corpus), vocab, plan.seq_len)


def _task(args, seed: int, vocab_size: int):
    if getattr(args, "train", None):
        return load_task(args.train, args.dev)
    if getattr(args, "task", None):
        data = make_synthetic_task(args.task, args.task_size, seed, vocab_size=vocab_size, seq_len=args.task_seq_len)
        return data.split(args.dev_fraction, seed)
    return None


# ============ commands ============

def run_pretrain(args) -> int:
    config = load_model_config(args.config)
    settings = PretrainSettings(steps=args.steps, batch_size=args.batch_size, seq_len=args.seq_len,
                                learning_rate=args.lr, eval_interval=args.eval_interval)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    vocab = build_vocab(read_corpus(args.corpus), config.vocab_size)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    windows = encode_windows(read_corpus(args.corpus), vocab, settings.seq_len)
    try:
        result = cmd_pretrain(config, windows, settings, seed, out)
    except TrainingDivergedError as exc:
        logger.error("%s; last good checkpoint: %s", exc, exc.last_good_checkpoint)
        return 3
    _emit({"final": result.final_checkpoint, "best": result.best_checkpoint, "best_dev_loss": result.best_dev_loss})
    return 0


def run_distill(args) -> int:
    plan = _plan(args)
    result = cmd_distill(plan, _windows(args, plan), args.out)
    _emit({"checkpoint": result.checkpoint, "metrics": result.metrics_path, "final_loss": result.final_loss,
           "epoch_losses": result.epoch_losses})
    return 0


def run_finetune_cmd(args) -> int:
    seed = resolve_seed(args.seed)
    student = load_checkpoint(args.student)
    task = _task(args, seed, student.config.vocab_size)
    if task is None:
        logger.error("finetune needs --task or --train/--dev")
        return 2
    train, dev = task
    settings = FinetuneSettings(num_classes=train.num_classes, epochs=args.epochs, patience=args.patience,
                                learning_rates=tuple(float(v) for v in _csv(args.lrs)),
                                batch_sizes=tuple(_csv_ints(args.batch_sizes)))
    result = run_finetune(student, train, dev, settings, seed, args.out)
    payload = result.to_json()
    if args.baseline:
        payload["baseline_dev_accuracy"] = frozen_random_baseline(student.config, train, dev, settings,
                                                                  seed).best_dev_accuracy
    _emit(payload)
    return 0


def _model_source(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return None


def run_flops(args) -> int:
    config = load_model_config(args.config)
    _emit(compute_report(config, args.seq_len).to_json())
    return 0


def run_params(args) -> int:
    model = _model_source(args)
    report = tally_params(model) if model is not None else count_params(load_model_config(args.config))
    _emit(report.to_json())
    return 0


def run_bench(args) -> int:
    model = _model_source(args)
    if model is None:
        model = EncoderModel.initialize(load_model_config(args.config), rng=stream(resolve_seed(args.seed), "bench"))
    report = measure_throughput(model, args.seq_len, args.batch_size, args.repeats, seed=resolve_seed(args.seed))
    _emit({"label": model.config.label, **report.to_json()})
    return 0


def run_svd(args) -> int:
    model = load_checkpoint(args.checkpoint)
    thresholds = tuple(float(v) for v in _csv(args.thresholds))
    reports = spectrum_report(model, args.selector, thresholds)
    for report in reports:
        logger.info("%s: %s", report.path, "  ".join(f"{t}: {report.formatted(t)}" for t in report.thresholds))
    payload: Dict[str, Any] = {"spectra": [r.to_json() for r in reports]}
    if args.factorize is not None:
        factors, summary = factorize(model, args.selector, args.factorize)
        payload["factorization"] = summary.to_json()
        if args.out:
            payload["factored_checkpoint"] = save_checkpoint(
                model, Path(args.out) / "factored.bin", metadata={"factorization": summary.to_json()},
                factored=factors)
    if args.out:
        write_json(Path(args.out) / "spectra.json", payload)
    _emit(payload)
    return 0


def run_sweep_experts(args) -> int:
    plan = _plan(args)
    cells = args.expert_pairs if args.expert_pairs else _csv_ints(args.experts)
    frame = cmd_sweep_experts(plan, cells, _windows(args, plan),
                              _task(args, plan.seed, plan.student.vocab_size), output_dir=args.out)
    print(frame.to_string(index=False))
    return 0


def run_sweep_routing(args) -> int:
    plan = _plan(args)
    frame = cmd_sweep_routing(plan, _csv(args.algorithms), _csv(args.balance_stages), _windows(args, plan),
                              _task(args, plan.seed, plan.student.vocab_size), output_dir=args.out)
    print(frame.to_string(index=False))
    return 0


def run_capacity_gap(args) -> int:
    plan = _plan(args, teacher=args.teachers[1])
    frame = cmd_capacity_gap(args.teachers, _csv(args.students), plan, _windows(args, plan),
                             _task(args, plan.seed, plan.student.vocab_size), output_dir=args.out)
    print(frame.to_string(index=False))
    return 0


def run_spec(args) -> int:
    result = run_experiment(args.spec)
    _emit({"experiment_id": result.experiment_id, "artifacts": result.artifacts,
           "executed": result.executed, "skipped": result.skipped})
    return 0


# ============ parser ============

def _add_plan_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", help="DistillPlan JSON")
    p.add_argument("--teacher", help="teacher checkpoint (overrides the plan)")
    p.add_argument("--student", default="desk-student", help="student preset or config JSON")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    p.add_argument("--vocab", help="vocabulary file (default: rebuilt from the corpus)")
    p.add_argument("--steps", type=int, help="override max_steps")


def _add_task_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASK_KINDS, help="synthetic task kind")
    p.add_argument("--task-size", type=int, default=400)
    p.add_argument("--task-seq-len", type=int, default=32)
    p.add_argument("--dev-fraction", type=float, default=0.2)
    p.add_argument("--train", help="task JSONL (train)")
    p.add_argument("--dev", help="task JSONL (dev)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minimoe", description=__doc__)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--seed", type=int, default=None, help="experiment seed (MINIMOE_SEED overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="MLM-train a dense teacher")
    p.add_argument("--config", default="desk-teacher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--eval-interval", type=int, default=250)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_pretrain)

    p = sub.add_parser("distill", help="relation distillation (optionally through teacher assistants)")
    _add_plan_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_distill)

    p = sub.add_parser("finetune", help="grid finetuning of a distilled student")
    p.add_argument("--student", required=True, help="student checkpoint")
    _add_task_args(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--lrs", default="1e-4,3e-4")
    p.add_argument("--batch-sizes", default="16,32")
    p.add_argument("--baseline", action="store_true", help="also train a frozen random-body baseline")
    p.add_argument("--out")
    p.set_defaults(func=run_finetune_cmd)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--config", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.set_defaults(func=run_flops)

    p = sub.add_parser("params", help="parameter counts")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--checkpoint")
    p.set_defaults(func=run_params)

    p = sub.add_parser("bench", help="inference throughput")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--checkpoint")
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=run_bench)

    p = sub.add_parser("svd-analyze", help="singular-value counts and low-rank transform")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--selector", default="layer.*")
    p.add_argument("--thresholds", default=",".join(str(t) for t in DEFAULT_THRESHOLDS))
    p.add_argument("--factorize", type=float, help="truncate at this normalized threshold")
    p.add_argument("--out")
    p.set_defaults(func=run_svd)

    p = sub.add_parser("sweep-experts", help="distill (+finetune) per expert count")
    _add_plan_args(p)
    _add_task_args(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--experts", default="1,2,4,8", help="FFN expert counts")
    group.add_argument("--expert-pairs", nargs="+", type=_expert_pair, metavar="MHA,FFN",
                       help="expert cells routing MHA and FFN, e.g. 1,1 2,4 4,4")
    p.add_argument("--out")
    p.set_defaults(func=run_sweep_experts)

    p = sub.add_parser("sweep-routing", help="routing algorithm x balance stage grid")
    _add_plan_args(p)
    _add_task_args(p)
    p.add_argument("--algorithms", default=",".join(ROUTING_ALGORITHMS))
    p.add_argument("--balance-stages", default=",".join(BALANCE_STAGES))
    p.add_argument("--out")
    p.set_defaults(func=run_sweep_routing)

    p = sub.add_parser("capacity-gap", help="same students from a small and a large teacher")
    _add_plan_args(p)
    _add_task_args(p)
    p.add_argument("--teachers", nargs=2, required=True, metavar=("SMALL", "LARGE"))
    p.add_argument("--students", default="desk-student")
    p.add_argument("--out")
    p.set_defaults(func=run_capacity_gap)

    p = sub.add_parser("run", help="run an ExperimentSpec JSON with resume")
    p.add_argument("spec")
    p.set_defaults(func=run_spec)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.func(args)
    except MiniMoEError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
