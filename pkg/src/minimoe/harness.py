"""
Experiment driver: teacher pretraining, sweeps over expert count and routing,
the capacity-gap comparison, and multi-stage experiments with resume.

Every command takes one seed; all randomness below it comes from named
streams, so reruns with the same seed reproduce checkpoints and metrics.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .compute import compute_report
from .config import (DistillPlan, FinetuneSettings, ModelConfig, PretrainSettings, load_model_config)
from .corpus import (TaskDataset, Vocab, build_vocab, encode_windows, make_mlm_batches,
                     make_synthetic_task, read_corpus)
from .datamanager import RunStore, registry_engine
from .distill import DistillResult, MetricsWriter, check_finite, run_ta_chain
from .errors import ConfigError, MiniMoEError, StageError
from .finetune import frozen_random_baseline, run_finetune
from .model import EncoderModel, is_no_decay, mlm_loss
from .optim import AdamW, linear_schedule
from .rng import derive_seed, resolve_seed, stream
from .spectra import DEFAULT_THRESHOLDS, factorize, spectrum_report
from .tensor import no_grad

logger = logging.getLogger(__name__)

SCHEMA = "v1"
STAGE_KINDS = ("pretrain", "distill", "finetune", "analyze")
MANIFEST_FILE = "manifest.json"
UP, DOWN = "⇑", "⇓"

Task = Tuple[TaskDataset, TaskDataset]


def version_string() -> str:
    return f"v{__version__}"


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema": SCHEMA, **payload}, sort_keys=True, indent=2, default=str) + "\n",
                    encoding="utf-8")
    return path


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = frame.copy()
    out.insert(0, "schema", SCHEMA)
    out.to_csv(path, index=False)
    return path


# ============ teacher pretraining ============

@dataclass
class PretrainRecord:
    step: int
    epoch: int
    loss_mlm: Optional[float]
    lr: float
    dev_loss: Optional[float] = None

    def to_json(self) -> Dict[str, Any]:
        data = asdict(self)
        # JSON has no NaN; a missing dev split is written as null
        data = {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in data.items()}
        return {"schema": SCHEMA, **data}


@dataclass
class PretrainResult:
    model: EncoderModel
    records: List[PretrainRecord]
    best_dev_loss: float
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None


def split_windows(windows: Sequence[np.ndarray], dev_fraction: float, seed: int
                  ) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Seeded train/dev split; dev keeps at least one window when there are two or more."""
    order = stream(seed, "pretrain", "split").permutation(len(windows))
    num_dev = min(max(1, int(math.ceil(dev_fraction * len(windows)))), len(windows) - 1) if len(windows) > 1 else 0
    dev = [windows[i] for i in np.sort(order[:num_dev])]
    train = [windows[i] for i in np.sort(order[num_dev:])]
    return train, dev


def mlm_dev_loss(model: EncoderModel, batches) -> float:
    losses = []
    with no_grad():
        for batch in batches:
            losses.append(mlm_loss(batch.tokens, batch.mask, model, targets=batch.targets,
                                   lengths=batch.lengths).item())
    return float(np.mean(losses)) if losses else float("nan")


def cmd_pretrain(config: Union[str, ModelConfig], windows: Sequence[np.ndarray],
                 settings: Optional[PretrainSettings] = None, seed: int = 0,
                 output_dir: Optional[Union[str, Path]] = None) -> PretrainResult:
    """
    MLM-train a dense teacher from a seeded random init.

    Writes final.bin, best.bin (lowest dev MLM loss) and metrics.jsonl. The
    dev loss is evaluated every settings.eval_interval steps and after the
    last step; steps=0 therefore stores the random init in both files.

    Raises:
        TrainingDivergedError: the training loss turned non-finite; the best
            checkpoint written so far is left in place and attached.
    """
    config = load_model_config(config)
    settings = settings or PretrainSettings()
    if config.is_moe:
        raise ConfigError(f"teachers are dense; got {config.label}")
    train, dev = split_windows(windows, settings.dev_fraction, seed)
    model = EncoderModel.initialize(config, rng=stream(seed, "pretrain", "init"))
    dev_batch = max(1, min(settings.batch_size, len(dev)))
    dev_batches = list(make_mlm_batches(dev, config.vocab_size, settings.seq_len, dev_batch, seed,
                                        max_seq_len=config.max_seq_len, epochs=1, purpose="pretrain-dev")) \
        if dev else []
    optimizer = AdamW(model.parameters(), lr=settings.learning_rate, weight_decay=settings.weight_decay,
                      no_decay=is_no_decay)
    schedule = linear_schedule(settings.learning_rate, settings.steps, settings.warmup_proportion)
    dropout_rng = stream(seed, "pretrain", "dropout")

    output_dir = Path(output_dir) if output_dir is not None else None
    writer = MetricsWriter(output_dir / "metrics.jsonl" if output_dir is not None else None)
    best_path = output_dir / "best.bin" if output_dir is not None else None
    best = {"loss": math.inf, "evaluated": False, "path": None}
    metadata = {"stage": "pretrain", "settings": asdict(settings), "seed": seed}

    def evaluate(step: int, epoch: int, loss_value: Optional[float], lr: float) -> None:
        dev_loss = mlm_dev_loss(model, dev_batches)
        writer.write(PretrainRecord(step, epoch, loss_value, lr, dev_loss))
        logger.info("[pretrain] step %d dev mlm loss %.4f", step, dev_loss)
        if not best["evaluated"] or dev_loss < best["loss"]:
            best.update(loss=dev_loss, evaluated=True)
            if best_path is not None:
                best["path"] = save_checkpoint(model, best_path, metadata={**metadata, "step": step})

    evaluate(0, 0, None, 0.0)
    if settings.steps > 0:
        batches = make_mlm_batches(train, config.vocab_size, settings.seq_len, settings.batch_size, seed,
                                   max_seq_len=config.max_seq_len, epochs=None, purpose="pretrain")
        for step in range(settings.steps):
            batch = next(batches)
            loss = mlm_loss(batch.tokens, batch.mask, model, targets=batch.targets, lengths=batch.lengths,
                            rng=dropout_rng)
            check_finite(loss, step, last_good=best["path"])
            optimizer.zero_grad()
            loss.backward()
            lr = schedule(step)
            optimizer.step(lr)
            done = step + 1
            if done % settings.eval_interval == 0 or done == settings.steps:
                evaluate(done, batch.epoch, loss.item(), lr)
            elif done % settings.log_interval == 0:
                writer.write(PretrainRecord(done, batch.epoch, loss.item(), lr))
                logger.info("[pretrain] step %d mlm loss %.4f lr %.2e", done, loss.item(), lr)

    final_path = None
    if output_dir is not None:
        final_path = save_checkpoint(model, output_dir / "final.bin",
                                     metadata={**metadata, "step": settings.steps})
    return PretrainResult(model, writer.records, best["loss"], final_path, best["path"])


# ============ distill / finetune cells ============

def cmd_distill(plan: DistillPlan, windows: Sequence[np.ndarray],
                output_dir: Optional[Union[str, Path]] = None,
                teacher: Optional[EncoderModel] = None) -> DistillResult:
    if output_dir is not None:
        write_json(Path(output_dir) / "plan.json", plan.to_dict())
    return run_ta_chain(plan, windows, output_dir, teacher)


def _score_cell(plan: DistillPlan, windows: Sequence[np.ndarray], teacher: EncoderModel,
                task: Optional[Task], finetune_settings: Optional[FinetuneSettings],
                cell_dir: Optional[Path]) -> Dict[str, Any]:
    """Distill one student and, given a task, finetune it; returns one table row."""
    result = cmd_distill(plan, windows, cell_dir, teacher)
    last = result.records[-1] if result.records else None
    row = {
        "student": plan.student.label,
        "params": result.student.num_parameters(),
        "distill_loss": result.final_loss,
        "max_f": max(last.f) if last is not None and last.f else float("nan"),
        "max_f_mha": max(last.f_mha) if last is not None and last.f_mha else float("nan"),
        "dropped_frac": last.dropped_frac if last is not None else 0.0,
        "dev_accuracy": float("nan"),
    }
    if task is not None:
        train, dev = task
        tuned = run_finetune(result.student, train, dev, finetune_settings, plan.seed,
                             None if cell_dir is None else cell_dir / "finetune")
        row["dev_accuracy"] = tuned.best_dev_accuracy
    return row


def _teacher(plan: DistillPlan, teacher: Optional[EncoderModel]) -> EncoderModel:
    return teacher if teacher is not None else load_checkpoint(plan.teacher)


ExpertCell = Union[int, Tuple[int, int]]


def _expert_cell(cell: ExpertCell) -> Tuple[int, int]:
    """(m_mha, m_ffn); a bare int sweeps the FFN experts only."""
    if isinstance(cell, (tuple, list)):
        if len(cell) != 2:
            raise ConfigError(f"expert cell must be m_ffn or (m_mha, m_ffn), got {cell!r}")
        return int(cell[0]), int(cell[1])
    return 1, int(cell)


def cmd_sweep_experts(plan: DistillPlan, experts: Sequence[ExpertCell], windows: Sequence[np.ndarray],
                      task: Optional[Task] = None, finetune_settings: Optional[FinetuneSettings] = None,
                      output_dir: Optional[Union[str, Path]] = None,
                      teacher: Optional[EncoderModel] = None) -> pd.DataFrame:
    """
    One distill (+ finetune) run per expert cell, all with the plan's seed.

    A cell is an FFN expert count m, or a pair (m_mha, m_ffn) that routes the
    MHA blocks too. The all-ones cell is the dense student. A MoE row whose
    distill loss exceeds the dense row's is reported as a WARNING, not an error.

    Raises:
        StageError: a cell failed; the annotation names its expert counts.
    """
    if not experts:
        raise ConfigError("expert list must not be empty")
    teacher = _teacher(plan, teacher)
    output_dir = Path(output_dir) if output_dir is not None else None
    rows = []
    for cell in experts:
        m_mha, m = _expert_cell(cell)
        name = f"m{m}" if m_mha == 1 else f"m{m_mha}-{m}"
        annotation = f"m={m}" if m_mha == 1 else f"m={m_mha},{m}"
        student = plan.student.with_experts(m, m_mha)
        try:
            row = _score_cell(replace(plan, student=student), windows, teacher, task, finetune_settings,
                              None if output_dir is None else output_dir / name)
        except MiniMoEError as exc:
            raise StageError(str(exc), annotation=annotation) from exc
        rows.append({"m": m, "m_mha": m_mha, **row})
        logger.info("sweep %s: distill loss %.5f dev accuracy %.4f", annotation, row["distill_loss"],
                    row["dev_accuracy"])
    frame = pd.DataFrame(rows)

    dense = frame[(frame["m"] == 1) & (frame["m_mha"] == 1)]
    if not dense.empty:
        baseline = float(dense["distill_loss"].iloc[0])
        for _, row in frame[(frame["m"] > 1) | (frame["m_mha"] > 1)].iterrows():
            if row["distill_loss"] > baseline:
                logger.warning("expected-trend check: %s distill loss %.5f above dense %.5f",
                               row["student"], row["distill_loss"], baseline)
    if output_dir is not None:
        write_table(frame, output_dir / "sweep_experts.csv")
    return frame


def cmd_sweep_routing(plan: DistillPlan, algorithms: Sequence[str], balance_stages: Sequence[str],
                      windows: Sequence[np.ndarray], task: Optional[Task] = None,
                      finetune_settings: Optional[FinetuneSettings] = None,
                      output_dir: Optional[Union[str, Path]] = None,
                      teacher: Optional[EncoderModel] = None) -> pd.DataFrame:
    """
    Grid over routing algorithm x balance stage for an MoE student.

    Hash rows are still run for each balance stage so the grid stays
    rectangular (hash routing has no balance term). Gating scoring below
    hashing on the same balance stage is reported as a WARNING.
    """
    if not plan.student.is_moe:
        raise ConfigError(f"routing sweep needs an MoE student, got {plan.student.label}")
    if not algorithms or not balance_stages:
        raise ConfigError("routing sweep needs at least one algorithm and one balance stage")
    teacher = _teacher(plan, teacher)
    output_dir = Path(output_dir) if output_dir is not None else None
    rows = []
    for algorithm in algorithms:
        for stage in balance_stages:
            student = replace(plan.student, routing=algorithm, apply_balance_at=stage)
            cell = replace(plan, student=student)
            name = f"{algorithm}-{stage}"
            try:
                row = _score_cell(cell, windows, teacher, task, finetune_settings,
                                  None if output_dir is None else output_dir / name)
            except MiniMoEError as exc:
                raise StageError(str(exc), annotation=name) from exc
            rows.append({"algorithm": algorithm, "balance_stage": stage, **row})
    frame = pd.DataFrame(rows)

    metric = "dev_accuracy" if task is not None else "distill_loss"
    for stage in balance_stages:
        scores = frame[frame["balance_stage"] == stage].groupby("algorithm")[metric].first()
        if {"gating", "hash"} <= set(scores.index):
            gating, hashed = float(scores["gating"]), float(scores["hash"])
            worse = gating < hashed if metric == "dev_accuracy" else gating > hashed
            if worse:
                logger.warning("expected-trend check: gating %s %.5f behind hash %.5f (balance %s)",
                               metric, gating, hashed, stage)
    if output_dir is not None:
        write_table(frame, output_dir / "sweep_routing.csv")
    return frame


def gap_marker(delta: float) -> str:
    """Up arrow when the larger teacher helps (delta > 0), down arrow otherwise."""
    return UP if delta > 0 else DOWN


def cmd_capacity_gap(teachers: Sequence[Union[str, Path, EncoderModel]], students: Sequence[Any],
                     plan: DistillPlan, windows: Sequence[np.ndarray], task: Optional[Task] = None,
                     finetune_settings: Optional[FinetuneSettings] = None,
                     output_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Distill each student config from a small and a large teacher with matched
    seed and steps.

    The metric is dev accuracy when a task is given, otherwise the negated
    final distill loss; delta = metric(large) - metric(small).
    """
    if len(teachers) != 2:
        raise ConfigError("capacity gap needs exactly two teachers: small, large")
    small, large = (t if isinstance(t, EncoderModel) else load_checkpoint(t) for t in teachers)
    if small.num_parameters() > large.num_parameters():
        small, large = large, small
    if small.checksum() == large.checksum():
        logger.info("capacity gap run with identical teachers; every delta is 0")
    output_dir = Path(output_dir) if output_dir is not None else None
    metric = "dev_accuracy" if task is not None else "neg_distill_loss"
    rows = []
    for student in students:
        config = load_model_config(student)
        scores = {}
        for role, teacher in (("small", small), ("large", large)):
            cell = replace(plan, student=config, assistants=())
            cell_dir = None if output_dir is None else output_dir / f"{config.label.replace(';', '_')}-{role}"
            try:
                row = _score_cell(cell, windows, teacher, task, finetune_settings, cell_dir)
            except MiniMoEError as exc:
                raise StageError(str(exc), annotation=f"{config.label} from {role} teacher") from exc
            scores[role] = row["dev_accuracy"] if task is not None else -row["distill_loss"]
        delta = scores["large"] - scores["small"]
        rows.append({"student": config.label, "metric": metric, "small_teacher": small.config.label,
                     "large_teacher": large.config.label, "small": scores["small"], "large": scores["large"],
                     "delta": delta, "marker": gap_marker(delta)})
        logger.info("capacity gap %s: delta %.5f %s", config.label, delta, gap_marker(delta))
    frame = pd.DataFrame(rows)
    if output_dir is not None:
        write_table(frame, output_dir / "capacity_gap.csv")
    return frame


# ============ multi-stage experiments ============

@dataclass(frozen=True)
class ExperimentSpec:
    """
    Ordered stages sharing one seed and one corpus.

    A stage is a dict with "kind" (pretrain | distill | finetune | analyze) and
    a unique "name"; string values of the form "@name" refer to the artifact
    of an earlier stage.
    """
    name: str
    stages: tuple
    seed: int = 0
    output_dir: str = "runs"
    corpus: Optional[str] = None
    vocab_size: int = 8000

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(dict(s) for s in self.stages))
        seen: List[str] = []
        for index, stage in enumerate(self.stages):
            kind, name = stage.get("kind"), stage.get("name")
            if kind not in STAGE_KINDS:
                raise ConfigError(f"stage {index}: kind must be one of {STAGE_KINDS}, got {kind!r}")
            if not name or name in seen:
                raise ConfigError(f"stage {index}: missing or duplicate name {name!r}")
            for ref in _refs(stage):
                if ref not in seen:
                    raise ConfigError(f"stage {name!r} refers to @{ref}, which is not an earlier stage")
            seen.append(name)
        if any(s["kind"] in ("pretrain", "distill") for s in self.stages) and not self.corpus:
            raise ConfigError("pretrain and distill stages need a corpus")

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "stages": [dict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentSpec":
        data = dict(data)
        data.pop("schema", None)
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentSpec":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _refs(value: Any) -> List[str]:
    if isinstance(value, str):
        return [value[1:]] if value.startswith("@") else []
    if isinstance(value, dict):
        return [r for v in value.values() for r in _refs(v)]
    if isinstance(value, (list, tuple)):
        return [r for v in value for r in _refs(v)]
    return []


def _resolve(value: Any, artifacts: Dict[str, str]) -> Any:
    if isinstance(value, str) and value.startswith("@"):
        return artifacts[value[1:]]
    if isinstance(value, dict):
        return {k: _resolve(v, artifacts) for k, v in value.items()}
    if isinstance(value, list):
        return [_resolve(v, artifacts) for v in value]
    return value


def content_key(stage: Dict[str, Any], seed: int, upstream: Dict[str, str], corpus_digest: str) -> str:
    """Hash of the stage config, the seed, the corpus and the keys of referenced stages."""
    payload = {"stage": stage, "seed": seed, "corpus": corpus_digest,
               "upstream": {name: upstream[name] for name in sorted(set(_refs(stage)))}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass
class ExperimentResult:
    experiment_id: int
    artifacts: Dict[str, str]
    executed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


class ExperimentRunner:
    """Runs an ExperimentSpec stage by stage, skipping stages already complete."""

    def __init__(self, spec: ExperimentSpec, store: Optional[RunStore] = None):
        self.spec = spec
        self.seed = resolve_seed(spec.seed)
        self.root = Path(spec.output_dir) / spec.name
        self.store = store or RunStore(registry_engine(self.root))
        self._lines: Optional[List[str]] = None
        self._vocab: Optional[Vocab] = None

    # --------- shared inputs ---------

    @property
    def lines(self) -> List[str]:
        if self._lines is None:
            self._lines = read_corpus(self.spec.corpus)
        return self._lines

    @property
    def vocab(self) -> Vocab:
        if self._vocab is None:
            self._vocab = build_vocab(self.lines, self.spec.vocab_size)
            self._vocab.save(self.root / "vocab.txt")
        return self._vocab

    def corpus_digest(self) -> str:
        if not self.spec.corpus:
            return ""
        return hashlib.sha256(Path(self.spec.corpus).read_bytes()).hexdigest()

    def windows(self, seq_len: int) -> List[np.ndarray]:
        return encode_windows(self.lines, self.vocab, seq_len)

    # --------- stages ---------

    def run(self) -> ExperimentResult:
        self.root.mkdir(parents=True, exist_ok=True)
        experiment_id = self.store.create_experiment(self.spec.name, self.seed)
        digest = self.corpus_digest()
        result = ExperimentResult(experiment_id, {})
        keys: Dict[str, str] = {}
        for index, stage in enumerate(self.spec.stages):
            name, kind = stage["name"], stage["kind"]
            key = content_key(stage, self.seed, keys, digest)
            keys[name] = key
            stage_dir = self.root / f"{index:02d}-{name}"
            done = self.store.completed_output(experiment_id, key)
            manifest = stage_dir / MANIFEST_FILE
            if done is not None and manifest.exists():
                result.artifacts[name] = json.loads(manifest.read_text(encoding="utf-8"))["artifact"]
                result.skipped.append(name)
                logger.info("stage %d %s (%s) already complete, skipping", index, name, kind)
                continue

            self.store.register_stage(experiment_id, index, name, kind, key, stage_dir)
            resolved = _resolve(stage, result.artifacts)
            stage_seed = derive_seed(self.seed, "stage", name)
            logger.info("stage %d %s (%s) starting", index, name, kind)
            try:
                artifact, metrics = getattr(self, f"_run_{kind}")(resolved, stage_seed, stage_dir)
            except StageError as exc:
                if exc.stage_index is None:
                    exc.stage_index = index
                raise
            except MiniMoEError as exc:
                raise StageError(str(exc), stage_index=index, annotation=name) from exc
            write_json(manifest, {
                "name": name, "kind": kind, "stage_index": index, "inputs": resolved,
                "content_key": key, "seed": stage_seed, "version": version_string(),
                "artifact": str(artifact),
            })
            if metrics is not None and Path(metrics).exists():
                self.store.import_metrics(experiment_id, name, metrics)
            self.store.complete_stage(experiment_id, key)
            result.artifacts[name] = str(artifact)
            result.executed.append(name)
        return result

    def _run_pretrain(self, stage: Dict[str, Any], seed: int, stage_dir: Path):
        settings = PretrainSettings.from_dict(stage.get("settings", {}))
        config = load_model_config(stage["config"])
        if config.vocab_size < self.vocab.size:
            raise ConfigError(f"model vocabulary {config.vocab_size} is smaller than the corpus vocabulary")
        result = cmd_pretrain(config, self.windows(settings.seq_len), settings, seed, stage_dir)
        return result.best_checkpoint or result.final_checkpoint, stage_dir / "metrics.jsonl"

    def _run_distill(self, stage: Dict[str, Any], seed: int, stage_dir: Path):
        plan = DistillPlan.from_dict({**stage.get("plan", {}), "teacher": stage["teacher"], "seed": seed})
        result = cmd_distill(plan, self.windows(plan.seq_len), stage_dir)
        metrics = result.metrics_path
        return result.checkpoint, metrics

    def _load_task(self, stage: Dict[str, Any], seed: int, vocab_size: int) -> Task:
        if "train" in stage:
            return TaskDataset.load(stage["train"]), TaskDataset.load(stage["dev"])
        task = dict(stage.get("task", {"kind": "pair-match"}))
        dev_fraction = float(stage.get("dev_fraction", 0.2))
        data = make_synthetic_task(task.pop("kind"), task.pop("size", 400), seed,
                                   vocab_size=vocab_size, **task)
        return data.split(dev_fraction, seed)

    def _run_finetune(self, stage: Dict[str, Any], seed: int, stage_dir: Path):
        student = load_checkpoint(stage["student"])
        train, dev = self._load_task(stage, seed, student.config.vocab_size)
        settings = FinetuneSettings.from_dict({"num_classes": train.num_classes, **stage.get("settings", {})})
        result = run_finetune(student, train, dev, settings, seed, stage_dir)
        payload = result.to_json()
        if stage.get("baseline", False):
            baseline = frozen_random_baseline(student.config, train, dev, settings, seed)
            payload["baseline_dev_accuracy"] = baseline.best_dev_accuracy
        write_json(stage_dir / "finetune.json", payload)
        return stage_dir / "finetune.json", None

    def _run_analyze(self, stage: Dict[str, Any], seed: int, stage_dir: Path):
        model = load_checkpoint(stage["model"])
        thresholds = tuple(stage.get("thresholds", DEFAULT_THRESHOLDS))
        selector = stage.get("selector", "layer.*")
        payload: Dict[str, Any] = {
            "compute": compute_report(model.config, int(stage.get("seq_len", model.config.max_seq_len))).to_json(),
            "spectra": [r.to_json() for r in spectrum_report(model, selector, thresholds)],
        }
        if "factorize_threshold" in stage:
            factors, report = factorize(model, selector, float(stage["factorize_threshold"]))
            save_checkpoint(model, stage_dir / "factored.bin", metadata={"factorization": report.to_json()},
                            factored=factors)
            payload["factorization"] = report.to_json()
        return write_json(stage_dir / "analysis.json", payload), None


def run_experiment(spec: Union[ExperimentSpec, str, Path], store: Optional[RunStore] = None) -> ExperimentResult:
    spec = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.load(spec)
    return ExperimentRunner(spec, store).run()


def load_task(train_path: Optional[str], dev_path: Optional[str]) -> Optional[Task]:
    if train_path is None:
        return None
    if dev_path is None:
        raise ConfigError("a train task needs a dev set")
    return TaskDataset.load(train_path), TaskDataset.load(dev_path)
