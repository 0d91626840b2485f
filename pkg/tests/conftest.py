"""Shared fixtures.

Two tiers: `make_tiny_config` builds seconds-scale experiments for pipeline
and CLI tests, and the session-scoped `toy_*` fixtures hold the minutes-scale
toy run (teacher, synthetic pool, method runs) that the acceptance suite
shares so the teacher is trained exactly once per session.
"""

from __future__ import annotations

import dataclasses
import time

import pytest

import dpdistill.dpsgd as dpsgd_module
from dpdistill.distill import KdConfig
from dpdistill.model import ModelConfig
from dpdistill.pipeline import (
    CorpusConfig,
    DpTrainSpec,
    ExperimentConfig,
    _run_synthetic_distill,
    _run_zero_shot,
    ablation_sweep,
    generate_pool,
    prepare_corpus,
    train_teacher,
)
from dpdistill.sampler import SamplerConfig

# Wall-clock seconds per expensive stage, recorded as the fixtures build;
# the end-to-end runtime check sums these instead of retraining.
STAGE_SECONDS: dict[str, float] = {}


def make_tiny_config(**overrides) -> ExperimentConfig:
    """A full experiment that runs in about a second."""
    base = dict(
        method="distildp",
        seed=3,
        epsilon=2.0,
        corpus=CorpusConfig(n_records=300, seed=1, l_max=48),
        teacher_model=ModelConfig(
            n_layers=1, n_heads=2, d_model=32, d_ff=64, vocab_size=77, max_seq_len=48
        ),
        teacher_train=DpTrainSpec(n_steps=3),
        sampler=SamplerConfig(max_new_tokens=48),
        synthetic_count=200,
        student_model=ModelConfig(
            n_layers=1, n_heads=2, d_model=24, d_ff=48, vocab_size=77, max_seq_len=48
        ),
        kd=KdConfig(epochs=1, batch_size=16),
        student_train=DpTrainSpec(n_steps=3),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def toy_config() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def toy_data(toy_config):
    return prepare_corpus(toy_config.corpus)


@pytest.fixture(scope="session")
def toy_teacher(toy_config, toy_data):
    """The toy teacher, trained once per session with the in-loop clip
    assertion enabled so every per-example norm is re-checked."""
    budget = toy_config.budget_for(toy_data.n_train)
    previous = dpsgd_module.STRICT_CLIP_CHECK
    dpsgd_module.STRICT_CLIP_CHECK = True
    start = time.perf_counter()
    try:
        artifacts = train_teacher(toy_config, toy_data, budget)
    finally:
        dpsgd_module.STRICT_CLIP_CHECK = previous
    STAGE_SECONDS["teacher"] = time.perf_counter() - start
    return artifacts


@pytest.fixture(scope="session")
def toy_pool(toy_config, toy_data, toy_teacher):
    start = time.perf_counter()
    pool = generate_pool(toy_config, toy_data, toy_teacher)
    STAGE_SECONDS["generation"] = time.perf_counter() - start
    return pool


@pytest.fixture(scope="session")
def distildp_run(toy_config, toy_data, toy_teacher, toy_pool):
    run = _run_synthetic_distill(toy_config, toy_data, toy_teacher, toy_pool)
    STAGE_SECONDS["distildp_student"] = run.report.seconds
    return run


@pytest.fixture(scope="session")
def dpsyn_run(toy_config, toy_data, toy_teacher, toy_pool):
    config = dataclasses.replace(toy_config, method="dpsyn")
    return _run_synthetic_distill(config, toy_data, toy_teacher, toy_pool)


@pytest.fixture(scope="session")
def zero_shot_run(toy_config, toy_data):
    config = dataclasses.replace(toy_config, method="zero_shot")
    return _run_zero_shot(config, toy_data)


@pytest.fixture(scope="session")
def synthetic_count_rows(toy_config, toy_data, toy_teacher, toy_pool):
    return ablation_sweep(
        toy_config,
        "synthetic_count",
        [2000, 5000, 10000, 20000],
        data=toy_data,
        teacher=toy_teacher,
        pool=toy_pool,
    )
