"""Differentially private SGD: per-example clipping, noising, training loop.

Batches are Poisson-subsampled (independent inclusion with the configured
sampling rate) and the noisy gradient sum is divided by the expected batch
size, since the realized size is itself privacy-sensitive. The optimizer is
plain SGD; every step composes one subsampled-Gaussian RDP increment into
the ledger, and only this module ever writes to a ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .accountant import PrivacyLedger, compose, rdp_step
from .corpus import PreparedExample
from .errors import BudgetExhaustedError
from .model import (
    Batch,
    LossSpec,
    NextTokenLoss,
    ParameterSet,
    batch_examples,
    per_example_gradients,
)

# Test hook: when True, every step re-asserts the post-clip norm bound.
STRICT_CLIP_CHECK = False

# Per-example gradient matrices are materialized at most this many rows at a
# time; a chunk of 64 rows caps the transient at ~64 * n_params doubles.
PER_EXAMPLE_CHUNK = 64


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    expected_batch: float
    n_steps: int
    learning_rate: float

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if self.expected_batch <= 0:
            raise ValueError("expected_batch must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @classmethod
    def for_dataset(
        cls,
        n_records: int,
        sampling_rate: float,
        clip_norm: float,
        noise_multiplier: float,
        n_steps: int,
        learning_rate: float,
    ) -> "DpSgdConfig":
        return cls(
            clip_norm=clip_norm,
            noise_multiplier=noise_multiplier,
            sampling_rate=sampling_rate,
            expected_batch=sampling_rate * n_records,
            n_steps=n_steps,
            learning_rate=learning_rate,
        )


def steps_for_epochs(epochs: float, sampling_rate: float) -> int:
    """Step count giving `epochs` expected passes over the data."""
    return max(1, int(round(epochs / sampling_rate)))


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """g scaled by min(1, clip_norm / ||g||); the zero vector passes through."""
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def _clip_rows(grads: np.ndarray, clip_norm: float) -> tuple[np.ndarray, float]:
    norms = np.linalg.norm(grads, axis=1)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    clipped = grads * factors[:, None]
    # Re-measure the clipped rows rather than reporting min(norm, C): the
    # reported bound must reflect what was actually summed.
    max_norm = float(np.linalg.norm(clipped, axis=1).max()) if len(norms) else 0.0
    return clipped, max_norm


def noisy_mean(
    clipped: np.ndarray,
    clip_norm: float,
    noise_multiplier: float,
    denominator: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """(sum of clipped rows + N(0, (noise_multiplier * clip_norm)^2 I)) / denominator."""
    clipped = np.atleast_2d(np.asarray(clipped, dtype=np.float64))
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    if clipped.shape[0]:
        norms = np.linalg.norm(clipped, axis=1)
        if norms.max() > clip_norm + 1e-9:
            raise ValueError(
                f"clipped gradient norm {norms.max():.6g} exceeds clip_norm {clip_norm}"
            )
    total = clipped.sum(axis=0)
    noise = rng.normal(0.0, noise_multiplier * clip_norm, size=total.shape)
    return (total + noise) / denominator


@dataclass
class StepInfo:
    loss: float | None
    batch_size: int
    max_postclip_norm: float


def dp_sgd_step(
    params: ParameterSet,
    batch: Batch | Sequence[PreparedExample] | None,
    config: DpSgdConfig,
    rng: np.random.Generator,
    loss_spec: LossSpec | None = None,
    pad_id: int = 0,
) -> tuple[ParameterSet, StepInfo]:
    """One clipped-and-noised update, in place. An empty batch still applies
    the noise term and consumes the same rng draws."""
    loss_spec = loss_spec or NextTokenLoss()
    if batch is not None and not isinstance(batch, Batch):
        batch = batch_examples(batch, pad_id) if len(batch) else None
    total = np.zeros(params.total_count)
    loss_parts = []
    n_rows = 0
    max_norm = 0.0
    if batch is not None:
        n_rows = batch.tokens.shape[0]
        for start in range(0, n_rows, PER_EXAMPLE_CHUNK):
            sub = Batch(
                tokens=batch.tokens[start : start + PER_EXAMPLE_CHUNK],
                mask=batch.mask[start : start + PER_EXAMPLE_CHUNK],
            )
            chunk_losses, grads = per_example_gradients(params, sub, loss_spec)
            clipped, chunk_max = _clip_rows(grads, config.clip_norm)
            if STRICT_CLIP_CHECK and clipped.shape[0]:
                assert chunk_max <= config.clip_norm + 1e-9
            total += clipped.sum(axis=0)
            loss_parts.append(chunk_losses)
            max_norm = max(max_norm, chunk_max)
    losses = np.concatenate(loss_parts) if loss_parts else np.zeros(0)
    noise = rng.normal(
        0.0, config.noise_multiplier * config.clip_norm, size=total.shape
    )
    params.add_flat((total + noise) / config.expected_batch, scale=-config.learning_rate)
    info = StepInfo(
        loss=float(losses.mean()) if losses.size else None,
        batch_size=n_rows,
        max_postclip_norm=max_norm,
    )
    return params, info


@dataclass
class TrainReport:
    losses: list[float | None]
    params: ParameterSet
    spent_epsilon: float
    steps: int
    max_postclip_norm: float
    batch_sizes: list[int] = field(default_factory=list)

    def to_json(self, config: DpSgdConfig | None = None) -> dict:
        blob = {
            "losses": self.losses,
            "spent_epsilon": self.spent_epsilon,
            "steps": self.steps,
            "max_postclip_norm": self.max_postclip_norm,
        }
        if config is not None:
            blob["config"] = {
                "clip_norm": config.clip_norm,
                "noise_multiplier": config.noise_multiplier,
                "sampling_rate": config.sampling_rate,
                "expected_batch": config.expected_batch,
                "n_steps": config.n_steps,
                "learning_rate": config.learning_rate,
            }
        return blob


def train_dp(
    params: ParameterSet,
    examples: Sequence[PreparedExample],
    config: DpSgdConfig,
    ledger: PrivacyLedger,
    rng: np.random.Generator,
    loss_spec: LossSpec | None = None,
    pad_id: int = 0,
    step_callback: Callable[[int, StepInfo], None] | None = None,
) -> TrainReport:
    """DP-SGD over Poisson-subsampled batches, accounting one RDP increment
    per step before the step executes. Raises BudgetExhaustedError (naming
    the step) if the schedule would overrun the ledger's target."""
    if not examples:
        raise ValueError("no training examples")
    n = len(examples)
    step_rdp = rdp_step(config.sampling_rate, config.noise_multiplier, ledger.orders)
    losses: list[float | None] = []
    batch_sizes: list[int] = []
    max_norm = 0.0
    for step in range(config.n_steps):
        compose(ledger, step_rdp, 1)
        spent = ledger.spent_epsilon()
        if spent > ledger.target.epsilon + 1e-6:
            raise BudgetExhaustedError(
                step=step, spent=spent, target=ledger.target.epsilon
            )
        include = rng.random(n) < config.sampling_rate
        batch = [examples[i] for i in np.flatnonzero(include)]
        params, info = dp_sgd_step(
            params, batch, config, rng, loss_spec=loss_spec, pad_id=pad_id
        )
        losses.append(info.loss)
        batch_sizes.append(info.batch_size)
        max_norm = max(max_norm, info.max_postclip_norm)
        if step_callback is not None:
            step_callback(step, info)
    return TrainReport(
        losses=losses,
        params=params,
        spent_epsilon=ledger.spent_epsilon(),
        steps=config.n_steps,
        max_postclip_norm=max_norm,
        batch_sizes=batch_sizes,
    )
