"""End-to-end experiment orchestration.

One experiment = prepare corpus -> privately train a teacher -> generate
control-code-conditioned synthetic text -> distill a student -> evaluate
test perplexity. Baselines reuse the same phases in different arrangements:

  distildp       full budget on the teacher; student trained on synthetic text
  dpsyn          distildp with lam=0 and alpha=0 (hard labels only)
  dpkd           half budget on the teacher, half on a DP-SGD student that
                 distills from the teacher on the real private data
  dpsgd_student  full budget spent training the student directly with DP-SGD
  zero_shot      untrained student, evaluation only

Every phase draws randomness from a stream derived from the root seed and
the phase label, so paired runs (same seed, different method) share streams
phase by phase. Only DP-SGD phases write to a privacy ledger; generation
and synthetic-data distillation are post-processing and spend nothing.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .accountant import PrivacyBudget, PrivacyLedger, calibrate_sigma
from .checkpoint import fingerprint_params
from .corpus import (
    ControlCode,
    PreparedExample,
    Record,
    Schema,
    Vocabulary,
    generate_toy_corpus,
    prepend_and_tokenize,
    render_control_code,
    split_dataset,
    subsample_control_codes,
    toy_schema,
)
from .distill import KdConfig, TeacherCoupledObjective, train_student
from .dpsgd import DpSgdConfig, TrainReport, train_dp
from .errors import ConfigError, PhaseError
from .model import (
    ModelConfig,
    ParameterSet,
    batch_examples,
    forward,
    init_params,
    log_softmax,
)
from .sampler import SamplerConfig, SyntheticDataset, generate_synthetic
from .seeding import derive_rng, derive_seed

METHODS = ("distildp", "dpsgd_student", "dpkd", "dpsyn", "zero_shot")
SWEEP_AXES = ("lambda", "temperature", "synthetic_count", "alpha")
CSV_COLUMNS = (
    "method",
    "epsilon",
    "delta",
    "lam",
    "temperature",
    "alpha",
    "n_synthetic",
    "ppl",
    "seconds",
    "teacher_fingerprint",
    "error",
)


@dataclass(frozen=True)
class CorpusConfig:
    n_records: int = 2500
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    l_max: int = 64

    def __post_init__(self):
        if self.n_records < 3:
            raise ConfigError("corpus.n_records must be >= 3")
        if self.l_max < 2:
            raise ConfigError("corpus.l_max must be >= 2")

    def to_json(self) -> dict:
        return {
            "n_records": self.n_records,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "l_max": self.l_max,
        }


@dataclass(frozen=True)
class DpTrainSpec:
    """DP-SGD schedule; the noise multiplier is calibrated from the budget.

    The defaults run full-batch steps: at a fixed privacy budget and compute
    budget, the largest sampling rate gives the smallest per-coordinate noise
    accumulation, and at toy scale full batches are affordable.
    """

    sampling_rate: float = 1.0
    clip_norm: float = 1.0
    n_steps: int = 30
    learning_rate: float = 1.0

    def __post_init__(self):
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError("sampling_rate must lie in (0, 1]")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")

    def to_json(self) -> dict:
        return {
            "sampling_rate": self.sampling_rate,
            "clip_norm": self.clip_norm,
            "n_steps": self.n_steps,
            "learning_rate": self.learning_rate,
        }


def _toy_teacher_model() -> ModelConfig:
    return ModelConfig(
        n_layers=3, n_heads=4, d_model=96, d_ff=384, vocab_size=77, max_seq_len=64
    )


def _toy_student_model() -> ModelConfig:
    return ModelConfig(
        n_layers=2, n_heads=2, d_model=64, d_ff=256, vocab_size=77, max_seq_len=64
    )


_REQUIRED = {
    "distildp": ("teacher_model", "teacher_train", "student_model", "kd"),
    "dpsyn": ("teacher_model", "teacher_train", "student_model", "kd"),
    "dpkd": ("teacher_model", "teacher_train", "student_model", "kd", "student_train"),
    "dpsgd_student": ("student_model", "student_train"),
    "zero_shot": ("student_model",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "distildp"
    seed: int = 0
    epsilon: float = 2.0
    delta: float | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    teacher_model: ModelConfig | None = field(default_factory=_toy_teacher_model)
    teacher_train: DpTrainSpec | None = field(default_factory=DpTrainSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synthetic_count: int = 20000
    student_model: ModelConfig = field(default_factory=_toy_student_model)
    kd: KdConfig = field(default_factory=KdConfig)
    student_train: DpTrainSpec | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"method must be one of {', '.join(METHODS)}, got {self.method!r}"
            )
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.synthetic_count < 1:
            raise ConfigError("synthetic_count must be >= 1")
        for name in _REQUIRED[self.method]:
            if getattr(self, name) is None:
                raise ConfigError(f"method {self.method} requires {name}")

    def budget_for(self, n_train: int) -> PrivacyBudget:
        if self.delta is not None:
            return PrivacyBudget(epsilon=self.epsilon, delta=self.delta)
        return PrivacyBudget.for_dataset(self.epsilon, n_train)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "corpus": self.corpus.to_json(),
            "teacher_model": self.teacher_model.to_json() if self.teacher_model else None,
            "teacher_train": self.teacher_train.to_json() if self.teacher_train else None,
            "sampler": self.sampler.to_json(),
            "synthetic_count": self.synthetic_count,
            "student_model": self.student_model.to_json(),
            "kd": self.kd.to_json(),
            "student_train": self.student_train.to_json() if self.student_train else None,
        }


@dataclass
class PreparedData:
    schema: Schema
    vocab: Vocabulary
    records: dict[str, list[Record]]
    examples: dict[str, list[PreparedExample]]
    codes: list[ControlCode]

    @property
    def n_train(self) -> int:
        return len(self.records["train"])


def prepare_corpus(config: CorpusConfig) -> PreparedData:
    """Generate the toy corpus, split it, and tokenize with codes prepended."""
    schema = toy_schema()
    vocab = Vocabulary()
    records = generate_toy_corpus(config.seed, config.n_records, schema)
    train, val, test = split_dataset(records, config.fractions, config.seed)
    splits = {"train": train, "val": val, "test": test}
    examples = {
        name: prepend_and_tokenize(recs, schema, vocab, config.l_max)
        for name, recs in splits.items()
    }
    codes = [render_control_code(r, schema, vocab) for r in train]
    return PreparedData(
        schema=schema, vocab=vocab, records=splits, examples=examples, codes=codes
    )


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------


def nll_statistics(
    params: ParameterSet,
    examples: Sequence[PreparedExample],
    pad_id: int = 0,
    batch_size: int = 64,
) -> tuple[float, int]:
    """(summed negative log-likelihood, token count) over content positions."""
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(examples), batch_size):
        batch = batch_examples(examples[start : start + batch_size], pad_id)
        output = forward(params, batch.tokens)
        lp = log_softmax(output.logits[:, :-1, :])
        targets = batch.tokens[:, 1:]
        mask = batch.mask[:, 1:]
        picked = np.take_along_axis(lp, targets[:, :, None], axis=2)[:, :, 0]
        total_nll += float(-(picked * mask).sum())
        total_tokens += int(mask.sum())
    return total_nll, total_tokens


def evaluate_ppl(
    params: ParameterSet,
    examples: Sequence[PreparedExample],
    pad_id: int = 0,
    batch_size: int = 64,
) -> float:
    """exp(token-weighted mean NLL) over content positions."""
    if not examples:
        raise ValueError("no evaluation examples")
    total_nll, total_tokens = nll_statistics(params, examples, pad_id, batch_size)
    if total_tokens == 0:
        raise ValueError("no content positions to evaluate")
    return float(np.exp(total_nll / total_tokens))


def merge_ppl(shards: Sequence[tuple[float, int]]) -> float:
    """Combine per-shard (nll sum, token count) statistics into one PPL."""
    total = sum(s for s, _ in shards)
    count = sum(c for _, c in shards)
    if count == 0:
        raise ValueError("no content positions to evaluate")
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    method: str
    test_ppl: float
    spent_epsilon: dict[str, float]
    budget: PrivacyBudget
    config: ExperimentConfig
    fingerprints: dict[str, str | None]
    dataset_sizes: dict[str, int]
    teacher_losses: list | None = None
    student_epochs: list | None = None
    student_losses: list | None = None
    student_val_ppl: list | None = None
    noise_multipliers: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def total_spent_epsilon(self) -> float:
        return sum(self.spent_epsilon.values())

    def to_json(self) -> dict:
        # Wall-clock time is reported in the CSV row only, so that repeat
        # runs with identical configs serialize byte-identically.
        return {
            "method": self.method,
            "test_ppl": self.test_ppl,
            "spent_epsilon": self.spent_epsilon,
            "total_spent_epsilon": self.total_spent_epsilon,
            "budget": {"epsilon": self.budget.epsilon, "delta": self.budget.delta},
            "config": self.config.to_json(),
            "fingerprints": self.fingerprints,
            "dataset_sizes": self.dataset_sizes,
            "teacher_losses": self.teacher_losses,
            "student_epochs": self.student_epochs,
            "student_losses": self.student_losses,
            "student_val_ppl": self.student_val_ppl,
            "noise_multipliers": self.noise_multipliers,
        }

    def csv_row(self) -> dict:
        kd = self.config.kd if self.method in ("distildp", "dpsyn", "dpkd") else None
        uses_synthetic = self.method in ("distildp", "dpsyn")
        return {
            "method": self.method,
            "epsilon": f"{self.total_spent_epsilon:.6f}",
            "delta": f"{self.budget.delta:.3g}",
            "lam": "" if kd is None else f"{kd.lam:g}",
            "temperature": "" if kd is None else f"{kd.temperature:g}",
            "alpha": "" if kd is None else f"{kd.alpha:g}",
            "n_synthetic": str(self.config.synthetic_count) if uses_synthetic else "",
            "ppl": f"{self.test_ppl:.6f}",
            "seconds": f"{self.seconds:.2f}",
            "teacher_fingerprint": self.fingerprints.get("teacher") or "",
            "error": "",
        }


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


@contextmanager
def _phase(name: str):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc


@dataclass
class TeacherArtifacts:
    params: ParameterSet
    ledger: PrivacyLedger
    report: TrainReport
    fingerprint: str
    noise_multiplier: float


def train_teacher(
    config: ExperimentConfig, data: PreparedData, budget: PrivacyBudget
) -> TeacherArtifacts:
    """DP-SGD teacher on the private training split, consuming `budget`."""
    spec = config.teacher_train
    sigma = calibrate_sigma(budget, spec.sampling_rate, spec.n_steps)
    dp_config = DpSgdConfig.for_dataset(
        n_records=data.n_train,
        sampling_rate=spec.sampling_rate,
        clip_norm=spec.clip_norm,
        noise_multiplier=sigma,
        n_steps=spec.n_steps,
        learning_rate=spec.learning_rate,
    )
    ledger = PrivacyLedger(target=budget)
    params = init_params(config.teacher_model, derive_seed(config.seed, "teacher_init"))
    report = train_dp(
        params,
        data.examples["train"],
        dp_config,
        ledger,
        derive_rng(config.seed, "teacher"),
        pad_id=data.vocab.pad_id,
    )
    return TeacherArtifacts(
        params=params,
        ledger=ledger,
        report=report,
        fingerprint=fingerprint_params(params),
        noise_multiplier=sigma,
    )


def generate_pool(
    config: ExperimentConfig,
    data: PreparedData,
    teacher: TeacherArtifacts,
    count: int | None = None,
) -> SyntheticDataset:
    """Subsample control codes from the train split and sample one synthetic
    example per code from the teacher."""
    n = count if count is not None else config.synthetic_count
    codes = subsample_control_codes(data.codes, n, derive_rng(config.seed, "codes"))
    return generate_synthetic(
        teacher.params,
        codes,
        config.sampler,
        derive_seed(config.seed, "generation"),
        data.vocab,
    )


def subset_synthetic(pool: SyntheticDataset, n: int) -> SyntheticDataset:
    """Prefix subset, so smaller pools are nested inside larger ones."""
    if n > len(pool):
        raise ValueError(f"requested {n} examples from a pool of {len(pool)}")
    fingerprint = dict(pool.fingerprint)
    fingerprint["count"] = n
    return SyntheticDataset(examples=pool.examples[:n], fingerprint=fingerprint)


def _dict_sha(blob: dict) -> str:
    return hashlib.sha256(
        json.dumps(blob, sort_keys=True).encode("utf-8")
    ).hexdigest()


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    report: ExperimentReport
    data: PreparedData
    student: ParameterSet
    teacher: TeacherArtifacts | None = None
    synthetic: SyntheticDataset | None = None


def _run_synthetic_distill(
    config: ExperimentConfig,
    data: PreparedData | None = None,
    teacher: TeacherArtifacts | None = None,
    synthetic: SyntheticDataset | None = None,
) -> RunArtifacts:
    """Shared path for distildp and dpsyn; dpsyn forces lam=0, alpha=0."""
    t0 = time.perf_counter()
    kd = config.kd
    if config.method == "dpsyn":
        kd = dataclasses.replace(kd, lam=0.0, alpha=0.0)
    with _phase("prepare"):
        if data is None:
            data = prepare_corpus(config.corpus)
        budget = config.budget_for(data.n_train)
    spent: dict[str, float] = {}
    with _phase("teacher"):
        if teacher is None:
            teacher = train_teacher(config, data, budget)
        spent["teacher"] = teacher.ledger.spent_epsilon()
    with _phase("generation"):
        if synthetic is None:
            synthetic = generate_pool(config, data, teacher)
        spent["generation"] = teacher.ledger.spent_epsilon() - spent["teacher"]
    with _phase("student"):
        student = init_params(
            config.student_model, derive_seed(config.seed, "student_init")
        )
        student_report = train_student(
            teacher.params,
            student,
            synthetic,
            kd,
            derive_rng(config.seed, "student"),
            pad_id=data.vocab.pad_id,
            eval_fn=lambda p: evaluate_ppl(p, data.examples["val"]),
        )
        spent["student"] = (
            teacher.ledger.spent_epsilon() - spent["teacher"] - spent["generation"]
        )
    with _phase("eval"):
        test_ppl = evaluate_ppl(student, data.examples["test"])
    assert spent["generation"] == 0.0 and spent["student"] == 0.0
    assert sum(spent.values()) <= budget.epsilon + 1e-6
    report = ExperimentReport(
        method=config.method,
        test_ppl=test_ppl,
        spent_epsilon=spent,
        budget=budget,
        config=config,
        fingerprints={
            "teacher": teacher.fingerprint,
            "student": fingerprint_params(student),
            "synthetic": _dict_sha(synthetic.fingerprint),
        },
        dataset_sizes={
            "train": data.n_train,
            "val": len(data.records["val"]),
            "test": len(data.records["test"]),
            "synthetic": len(synthetic),
        },
        teacher_losses=teacher.report.losses,
        student_epochs=student_report.epoch_components,
        student_val_ppl=student_report.val_ppl,
        noise_multipliers={"teacher": teacher.noise_multiplier},
        seconds=time.perf_counter() - t0,
    )
    return RunArtifacts(
        report=report, data=data, student=student, teacher=teacher, synthetic=synthetic
    )


def _run_zero_shot(config: ExperimentConfig, data: PreparedData | None) -> RunArtifacts:
    t0 = time.perf_counter()
    with _phase("prepare"):
        if data is None:
            data = prepare_corpus(config.corpus)
        budget = config.budget_for(data.n_train)
    with _phase("student"):
        student = init_params(
            config.student_model, derive_seed(config.seed, "student_init")
        )
    with _phase("eval"):
        test_ppl = evaluate_ppl(student, data.examples["test"])
    report = ExperimentReport(
        method=config.method,
        test_ppl=test_ppl,
        spent_epsilon={"teacher": 0.0, "generation": 0.0, "student": 0.0},
        budget=budget,
        config=config,
        fingerprints={
            "teacher": None,
            "student": fingerprint_params(student),
            "synthetic": None,
        },
        dataset_sizes={
            "train": data.n_train,
            "val": len(data.records["val"]),
            "test": len(data.records["test"]),
        },
        seconds=time.perf_counter() - t0,
    )
    return RunArtifacts(report=report, data=data, student=student)


def _run_dpsgd_student(
    config: ExperimentConfig, data: PreparedData | None
) -> RunArtifacts:
    t0 = time.perf_counter()
    with _phase("prepare"):
        if data is None:
            data = prepare_corpus(config.corpus)
        budget = config.budget_for(data.n_train)
    with _phase("student"):
        spec = config.student_train
        sigma = calibrate_sigma(budget, spec.sampling_rate, spec.n_steps)
        dp_config = DpSgdConfig.for_dataset(
            n_records=data.n_train,
            sampling_rate=spec.sampling_rate,
            clip_norm=spec.clip_norm,
            noise_multiplier=sigma,
            n_steps=spec.n_steps,
            learning_rate=spec.learning_rate,
        )
        ledger = PrivacyLedger(target=budget)
        student = init_params(
            config.student_model, derive_seed(config.seed, "student_init")
        )
        train_report = train_dp(
            student,
            data.examples["train"],
            dp_config,
            ledger,
            derive_rng(config.seed, "student"),
            pad_id=data.vocab.pad_id,
        )
    with _phase("eval"):
        test_ppl = evaluate_ppl(student, data.examples["test"])
    spent = {"teacher": 0.0, "generation": 0.0, "student": ledger.spent_epsilon()}
    assert sum(spent.values()) <= budget.epsilon + 1e-6
    report = ExperimentReport(
        method=config.method,
        test_ppl=test_ppl,
        spent_epsilon=spent,
        budget=budget,
        config=config,
        fingerprints={
            "teacher": None,
            "student": fingerprint_params(student),
            "synthetic": None,
        },
        dataset_sizes={
            "train": data.n_train,
            "val": len(data.records["val"]),
            "test": len(data.records["test"]),
        },
        student_losses=train_report.losses,
        noise_multipliers={"student": sigma},
        seconds=time.perf_counter() - t0,
    )
    return RunArtifacts(report=report, data=data, student=student)


def _run_dpkd(config: ExperimentConfig, data: PreparedData | None) -> RunArtifacts:
    """Half the budget trains the teacher; the other half funds a DP-SGD
    student taking noisy per-example gradients of the full distillation loss
    on the real private data."""
    t0 = time.perf_counter()
    with _phase("prepare"):
        if data is None:
            data = prepare_corpus(config.corpus)
        budget = config.budget_for(data.n_train)
        half = PrivacyBudget(epsilon=budget.epsilon / 2, delta=budget.delta / 2)
    with _phase("teacher"):
        teacher = train_teacher(config, data, half)
    with _phase("student"):
        spec = config.student_train
        sigma = calibrate_sigma(half, spec.sampling_rate, spec.n_steps)
        dp_config = DpSgdConfig.for_dataset(
            n_records=data.n_train,
            sampling_rate=spec.sampling_rate,
            clip_norm=spec.clip_norm,
            noise_multiplier=sigma,
            n_steps=spec.n_steps,
            learning_rate=spec.learning_rate,
        )
        student_ledger = PrivacyLedger(target=half)
        student = init_params(
            config.student_model, derive_seed(config.seed, "student_init")
        )
        objective = TeacherCoupledObjective(teacher.params, config.kd)
        train_report = train_dp(
            student,
            data.examples["train"],
            dp_config,
            student_ledger,
            derive_rng(config.seed, "student"),
            loss_spec=objective,
            pad_id=data.vocab.pad_id,
        )
    with _phase("eval"):
        test_ppl = evaluate_ppl(student, data.examples["test"])
    spent = {
        "teacher": teacher.ledger.spent_epsilon(),
        "generation": 0.0,
        "student": student_ledger.spent_epsilon(),
    }
    assert spent["teacher"] <= budget.epsilon / 2 + 1e-6
    assert spent["student"] <= budget.epsilon / 2 + 1e-6
    report = ExperimentReport(
        method=config.method,
        test_ppl=test_ppl,
        spent_epsilon=spent,
        budget=budget,
        config=config,
        fingerprints={
            "teacher": teacher.fingerprint,
            "student": fingerprint_params(student),
            "synthetic": None,
        },
        dataset_sizes={
            "train": data.n_train,
            "val": len(data.records["val"]),
            "test": len(data.records["test"]),
        },
        teacher_losses=teacher.report.losses,
        student_losses=train_report.losses,
        noise_multipliers={
            "teacher": teacher.noise_multiplier,
            "student": sigma,
        },
        seconds=time.perf_counter() - t0,
    )
    return RunArtifacts(report=report, data=data, student=student, teacher=teacher)


def run_experiment(
    config: ExperimentConfig, data: PreparedData | None = None
) -> RunArtifacts:
    """Dispatch on the configured method tag."""
    if config.method in ("distildp", "dpsyn"):
        return _run_synthetic_distill(config, data)
    if config.method == "zero_shot":
        return _run_zero_shot(config, data)
    if config.method == "dpsgd_student":
        return _run_dpsgd_student(config, data)
    if config.method == "dpkd":
        return _run_dpkd(config, data)
    raise ConfigError(f"unknown method {config.method!r}")


def run_distildp(
    config: ExperimentConfig, data: PreparedData | None = None
) -> ExperimentReport:
    if config.method != "distildp":
        raise ConfigError(f"expected method distildp, got {config.method!r}")
    return _run_synthetic_distill(config, data).report


def run_baseline(
    config: ExperimentConfig, data: PreparedData | None = None
) -> ExperimentReport:
    if config.method == "distildp":
        raise ConfigError("run_baseline expects a non-distildp method")
    return run_experiment(config, data).report


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------


def _sweep_config(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        return dataclasses.replace(config, kd=dataclasses.replace(config.kd, lam=value))
    if axis == "temperature":
        return dataclasses.replace(
            config, kd=dataclasses.replace(config.kd, temperature=value)
        )
    if axis == "alpha":
        return dataclasses.replace(
            config, kd=dataclasses.replace(config.kd, alpha=value)
        )
    if axis == "synthetic_count":
        return dataclasses.replace(config, synthetic_count=int(value))
    raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")


def ablation_sweep(
    config: ExperimentConfig,
    axis: str,
    values: Sequence,
    data: PreparedData | None = None,
    teacher: TeacherArtifacts | None = None,
    pool: SyntheticDataset | None = None,
) -> list[dict]:
    """One run per value with the teacher checkpoint and synthetic pool
    shared across rows. Per-row failures are recorded in the row's error
    column and the sweep continues. A caller holding a teacher or pool for
    the same config can pass them in to skip retraining."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("values must be non-empty")
    if config.method not in ("distildp", "dpsyn"):
        raise ConfigError("ablation_sweep requires a synthetic-distillation method")
    if data is None:
        data = prepare_corpus(config.corpus)
    if teacher is None:
        budget = config.budget_for(data.n_train)
        teacher = train_teacher(config, data, budget)
    pool_count = (
        max(int(v) for v in values)
        if axis == "synthetic_count"
        else config.synthetic_count
    )
    if pool is None:
        pool = generate_pool(config, data, teacher, count=pool_count)
    elif len(pool) < pool_count:
        raise ConfigError(
            f"provided pool has {len(pool)} examples but the sweep needs {pool_count}"
        )
    elif len(pool) > pool_count:
        pool = subset_synthetic(pool, pool_count)
    rows = []
    for value in values:
        try:
            cfg = _sweep_config(config, axis, value)
            synthetic = (
                subset_synthetic(pool, int(value)) if axis == "synthetic_count" else pool
            )
            artifacts = _run_synthetic_distill(cfg, data, teacher, synthetic)
            rows.append(artifacts.report.csv_row())
        except Exception as exc:
            row = {col: "" for col in CSV_COLUMNS}
            row.update(
                {
                    "method": config.method,
                    "teacher_fingerprint": teacher.fingerprint,
                    "error": str(exc),
                }
            )
            if axis == "lambda":
                row["lam"] = f"{value:g}"
            elif axis == "temperature":
                row["temperature"] = f"{value:g}"
            elif axis == "alpha":
                row["alpha"] = f"{value:g}"
            else:
                row["n_synthetic"] = str(int(value))
            rows.append(row)
    return rows
