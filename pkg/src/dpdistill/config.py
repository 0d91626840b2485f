"""Experiment configuration files.

Configs are TOML with one section per component. Loading errors always name
the full field path (for example "teacher.train.n_steps") so a bad config
can be fixed without reading source code.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .distill import KdConfig
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import CorpusConfig, DpTrainSpec, ExperimentConfig
from .sampler import SamplerConfig

DEFAULT_CONFIG_TOML = """\
# Synthetic-text distillation experiment.
# method: distildp | dpsyn | dpkd | dpsgd_student | zero_shot

[experiment]
method = "distildp"
seed = 0
epsilon = 2.0
# delta defaults to 1 / train set size; uncomment to pin it:
# delta = 5e-4

[corpus]
n_records = 2500
seed = 0
fractions = [0.8, 0.1, 0.1]
l_max = 64

[teacher.model]
n_layers = 3
n_heads = 4
d_model = 96
d_ff = 384
vocab_size = 77
max_seq_len = 64

[teacher.train]
sampling_rate = 1.0
clip_norm = 1.0
n_steps = 30
learning_rate = 1.0

[sampler]
top_k = 50
top_p = 0.9
max_new_tokens = 64
stop_at_eos = true

[synthetic]
count = 20000

[student.model]
n_layers = 2
n_heads = 2
d_model = 64
d_ff = 256
vocab_size = 77
max_seq_len = 64

[kd]
lam = 0.4
temperature = 1.0
alpha = 0.0
skip_prefix = true
epochs = 2
batch_size = 32
learning_rate = 0.3

# Only dpsgd_student and dpkd read this section:
[student.train]
sampling_rate = 1.0
clip_norm = 1.0
n_steps = 30
learning_rate = 1.0
"""


def _build(cls, table: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in table:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        return cls(**table)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _section(blob: dict, *path: str) -> dict | None:
    node = blob
    for part in path:
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    if not isinstance(node, dict):
        raise ConfigError(f"{'.'.join(path)}: expected a table")
    return node


def config_from_dict(blob: dict) -> ExperimentConfig:
    """Assemble an ExperimentConfig from parsed TOML data."""
    known_top = {"experiment", "corpus", "teacher", "sampler", "synthetic", "student", "kd"}
    for key in blob:
        if key not in known_top:
            raise ConfigError(f"{key}: unknown section")

    experiment = _section(blob, "experiment") or {}
    for key in experiment:
        if key not in ("method", "seed", "epsilon", "delta"):
            raise ConfigError(f"experiment.{key}: unknown key")

    corpus_table = _section(blob, "corpus") or {}
    if "fractions" in corpus_table:
        fractions = corpus_table["fractions"]
        if not isinstance(fractions, (list, tuple)):
            raise ConfigError("corpus.fractions: expected a list")
        corpus_table = dict(corpus_table, fractions=tuple(fractions))
    corpus = _build(CorpusConfig, corpus_table, "corpus")

    teacher_model_table = _section(blob, "teacher", "model")
    teacher_model = (
        _build(ModelConfig, teacher_model_table, "teacher.model")
        if teacher_model_table is not None
        else ExperimentConfig.__dataclass_fields__["teacher_model"].default_factory()
    )
    teacher_train_table = _section(blob, "teacher", "train")
    teacher_train = (
        _build(DpTrainSpec, teacher_train_table, "teacher.train")
        if teacher_train_table is not None
        else ExperimentConfig.__dataclass_fields__["teacher_train"].default_factory()
    )

    sampler_table = _section(blob, "sampler") or {}
    sampler = _build(SamplerConfig, sampler_table, "sampler")

    synthetic = _section(blob, "synthetic") or {}
    for key in synthetic:
        if key != "count":
            raise ConfigError(f"synthetic.{key}: unknown key")

    student_model_table = _section(blob, "student", "model")
    student_model = (
        _build(ModelConfig, student_model_table, "student.model")
        if student_model_table is not None
        else ExperimentConfig.__dataclass_fields__["student_model"].default_factory()
    )
    student_train_table = _section(blob, "student", "train")
    student_train = (
        _build(DpTrainSpec, student_train_table, "student.train")
        if student_train_table is not None
        else None
    )
    if _section(blob, "student") is not None:
        for key in _section(blob, "student"):
            if key not in ("model", "train"):
                raise ConfigError(f"student.{key}: unknown key")
    if _section(blob, "teacher") is not None:
        for key in _section(blob, "teacher"):
            if key not in ("model", "train"):
                raise ConfigError(f"teacher.{key}: unknown key")

    kd_table = _section(blob, "kd") or {}
    kd = _build(KdConfig, kd_table, "kd")

    kwargs = dict(
        corpus=corpus,
        teacher_model=teacher_model,
        teacher_train=teacher_train,
        sampler=sampler,
        student_model=student_model,
        kd=kd,
        student_train=student_train,
    )
    if "method" in experiment:
        kwargs["method"] = experiment["method"]
    if "seed" in experiment:
        kwargs["seed"] = experiment["seed"]
    if "epsilon" in experiment:
        kwargs["epsilon"] = experiment["epsilon"]
    if "delta" in experiment:
        kwargs["delta"] = experiment["delta"]
    if "count" in synthetic:
        kwargs["synthetic_count"] = synthetic["count"]
    return _build(ExperimentConfig, kwargs, "experiment")


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        blob = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(blob)
