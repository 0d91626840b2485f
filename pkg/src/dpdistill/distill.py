"""Knowledge-distillation losses and the student training loop.

The student objective mixes hard cross-entropy against the synthetic tokens
with a tempered KL term against the teacher's soft labels, optionally plus
a hidden-state MSE alignment term:

    total = (1 - lam) * CE + lam * t^2 * KL(teacher_t || student_t) + alpha * MSE

Control-code positions are skipped in every term. The KL direction is
teacher-first (forward KL), pinned here as a package constant. Student
training is plain non-private SGD: it reads the frozen teacher and never
touches a privacy ledger, since synthetic text is post-processing of the
privately trained teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import fingerprint_params
from .errors import ConfigError, NumericalError
from .model import (
    Batch,
    ForwardOutput,
    ParameterSet,
    batch_examples,
    forward,
    log_softmax,
    mean_gradients,
    nll_loss,
)
from .sampler import SyntheticDataset

KL_DIRECTION = "teacher_first"


@dataclass(frozen=True)
class KdConfig:
    lam: float = 0.4
    temperature: float = 1.0
    alpha: float = 0.0
    skip_prefix: bool = True
    epochs: int = 2
    learning_rate: float = 0.3
    batch_size: int = 32

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return {
            "lam": self.lam,
            "temperature": self.temperature,
            "alpha": self.alpha,
            "skip_prefix": self.skip_prefix,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
        }


@dataclass(frozen=True)
class DistillBatchOutput:
    total: float
    ce: float
    kl: float
    mse: float
    positions: int


def soft_targets(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Tempered distribution softmax(logits / temperature) per position."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / temperature))


def distill_prefix_mask(example) -> np.ndarray:
    """Per-position loss mask: zero strictly before the content boundary."""
    boundary = example.boundary
    length = len(example.tokens)
    if boundary >= length:
        raise ValueError(
            f"boundary {boundary} leaves no content positions in length {length}"
        )
    mask = np.ones(length)
    mask[:boundary] = 0.0
    return mask


def _masked_kl(teacher_logits, student_logits, mask, temperature) -> float:
    lp_t = log_softmax(teacher_logits / temperature)
    lp_s = log_softmax(student_logits / temperature)
    per_position = (np.exp(lp_t) * (lp_t - lp_s)).sum(axis=-1)
    return float((per_position * mask).sum() / mask.sum())


def mse_hidden_loss(
    teacher_hidden: np.ndarray, student_hidden: np.ndarray, mask: np.ndarray
) -> float:
    """Mean squared difference over unmasked positions and channels."""
    teacher_hidden = np.asarray(teacher_hidden, dtype=np.float64)
    student_hidden = np.asarray(student_hidden, dtype=np.float64)
    if teacher_hidden.shape[-1] != student_hidden.shape[-1]:
        raise ConfigError(
            f"hidden widths differ (teacher {teacher_hidden.shape[-1]}, student "
            f"{student_hidden.shape[-1]}); set alpha=0 or match the widths"
        )
    if teacher_hidden.shape != student_hidden.shape:
        raise ValueError("hidden state lengths disagree")
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        raise ValueError("mask is all zeros; no positions to score")
    sq = ((teacher_hidden - student_hidden) ** 2).mean(axis=-1)
    return float((sq * mask).sum() / total)


def kd_loss(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    hard_targets: np.ndarray,
    mask: np.ndarray,
    config: KdConfig,
    teacher_hidden: np.ndarray | None = None,
    student_hidden: np.ndarray | None = None,
) -> DistillBatchOutput:
    """Pooled distillation loss over pre-aligned arrays (mean over every
    unmasked position in the batch)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.sum() == 0:
        raise ValueError("mask is all zeros; no positions to score")
    ce = nll_loss(student_logits, hard_targets, mask)
    kl = _masked_kl(teacher_logits, student_logits, mask, config.temperature)
    if config.alpha > 0:
        if teacher_hidden is None or student_hidden is None:
            raise ConfigError("alpha > 0 requires teacher and student hidden states")
        mse = mse_hidden_loss(teacher_hidden, student_hidden, mask)
    else:
        mse = 0.0
    total = (
        (1.0 - config.lam) * ce
        + config.lam * config.temperature**2 * kl
        + config.alpha * mse
    )
    return DistillBatchOutput(
        total=float(total), ce=ce, kl=kl, mse=mse, positions=int(mask.sum())
    )


def kd_loss_grad(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    hard_targets: np.ndarray,
    mask: np.ndarray,
    config: KdConfig,
) -> np.ndarray:
    """Gradient of the pooled kd_loss total with respect to student logits
    (teacher held constant; hidden-state term excluded)."""
    mask = np.asarray(mask, dtype=np.float64)
    t = config.temperature
    weights = mask / mask.sum()
    p_s = np.exp(log_softmax(student_logits))
    one_hot = np.zeros_like(p_s)
    np.put_along_axis(one_hot, np.asarray(hard_targets)[..., None], 1.0, axis=-1)
    p_s_t = np.exp(log_softmax(student_logits / t))
    p_t_t = np.exp(log_softmax(teacher_logits / t))
    grad = (1.0 - config.lam) * (p_s - one_hot) + config.lam * t * (p_s_t - p_t_t)
    return grad * weights[..., None]


class DistillObjective:
    """Per-example distillation loss against a fixed teacher forward pass.

    Satisfies the model module's LossSpec protocol, so the same objective
    drives plain SGD (mean_gradients) and DP-SGD (per_example_gradients).
    """

    def __init__(self, teacher_output: ForwardOutput, config: KdConfig):
        self.teacher = teacher_output
        self.config = config
        self.last: DistillBatchOutput | None = None

    def per_example(self, output: ForwardOutput, batch: Batch):
        cfg = self.config
        t = cfg.temperature
        logits = output.logits
        B, T, V = logits.shape
        targets = batch.tokens[:, 1:]
        mask = batch.mask[:, 1:]
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("an example has no unmasked positions")
        weights = mask / counts[:, None]

        lp_s = log_softmax(logits[:, :-1, :])
        picked = np.take_along_axis(lp_s, targets[:, :, None], axis=2)[:, :, 0]
        ce_b = -(picked * mask).sum(axis=1) / counts

        z_t = self.teacher.logits[:, :-1, :]
        z_s = logits[:, :-1, :]
        lp_tt = log_softmax(z_t / t)
        lp_st = log_softmax(z_s / t)
        p_tt = np.exp(lp_tt)
        kl_pos = (p_tt * (lp_tt - lp_st)).sum(axis=-1)
        kl_b = (kl_pos * mask).sum(axis=1) / counts

        p_s = np.exp(lp_s)
        one_hot = np.zeros_like(p_s)
        np.put_along_axis(one_hot, targets[:, :, None], 1.0, axis=2)
        p_st = np.exp(lp_st)
        dlogits = np.zeros_like(logits)
        dlogits[:, :-1, :] = (
            (1.0 - cfg.lam) * (p_s - one_hot) + cfg.lam * t * (p_st - p_tt)
        ) * weights[:, :, None]

        dhidden = None
        mse_b = np.zeros(B)
        if cfg.alpha > 0:
            h_t = self.teacher.hidden_last[:, :-1, :]
            h_s = output.hidden_last[:, :-1, :]
            if h_t.shape[-1] != h_s.shape[-1]:
                raise ConfigError(
                    f"hidden widths differ (teacher {h_t.shape[-1]}, student "
                    f"{h_s.shape[-1]}); set alpha=0 or match the widths"
                )
            d_model = h_s.shape[-1]
            delta = h_s - h_t
            mse_b = ((delta**2).mean(axis=-1) * mask).sum(axis=1) / counts
            dhidden = np.zeros_like(output.hidden_last)
            dhidden[:, :-1, :] = (
                cfg.alpha * 2.0 / d_model * delta * weights[:, :, None]
            )

        losses = (1.0 - cfg.lam) * ce_b + cfg.lam * t**2 * kl_b + cfg.alpha * mse_b
        self.last = DistillBatchOutput(
            total=float(losses.mean()),
            ce=float(ce_b.mean()),
            kl=float(kl_b.mean()),
            mse=float(mse_b.mean()),
            positions=int(counts.sum()),
        )
        return losses, dlogits, dhidden


class TeacherCoupledObjective:
    """LossSpec that recomputes the teacher forward pass for each batch.

    Used when distillation runs under DP-SGD on private data, where batches
    are Poisson-sampled inside the training loop and no fixed teacher output
    can be captured ahead of time.
    """

    def __init__(self, teacher_params: ParameterSet, config: KdConfig):
        self.teacher_params = teacher_params
        self.config = config

    def per_example(self, output: ForwardOutput, batch: Batch):
        teacher_out = forward(self.teacher_params, batch.tokens)
        return DistillObjective(teacher_out, self.config).per_example(output, batch)


@dataclass
class DistillReport:
    initial_val_ppl: float | None
    epoch_components: list[dict]
    val_ppl: list[float]
    teacher_fingerprint: str
    config: KdConfig

    def to_json(self) -> dict:
        return {
            "initial_val_ppl": self.initial_val_ppl,
            "epochs": self.epoch_components,
            "val_ppl": self.val_ppl,
            "teacher_fingerprint": self.teacher_fingerprint,
            "config": self.config.to_json(),
        }


def train_student(
    teacher_params: ParameterSet,
    student_params: ParameterSet,
    synthetic: SyntheticDataset | Sequence,
    config: KdConfig,
    rng: np.random.Generator,
    pad_id: int = 0,
    eval_fn: Callable[[ParameterSet], float] | None = None,
) -> DistillReport:
    """Plain mini-batch SGD on the distillation loss against a frozen teacher."""
    examples = synthetic.prepared() if isinstance(synthetic, SyntheticDataset) else list(synthetic)
    if not examples:
        raise ValueError("no training examples")
    if config.alpha > 0 and teacher_params.config.d_model != student_params.config.d_model:
        raise ConfigError(
            f"hidden widths differ (teacher {teacher_params.config.d_model}, "
            f"student {student_params.config.d_model}); set alpha=0 or match the widths"
        )
    n = len(examples)
    initial_ppl = eval_fn(student_params) if eval_fn is not None else None
    epoch_components: list[dict] = []
    val_curve: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"ce": 0.0, "kl": 0.0, "mse": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, n, config.batch_size):
            chunk = [examples[i] for i in order[start : start + config.batch_size]]
            batch = batch_examples(chunk, pad_id)
            teacher_out = forward(teacher_params, batch.tokens)
            objective = DistillObjective(teacher_out, config)
            try:
                _, grad, _ = mean_gradients(student_params, batch, objective)
            except NumericalError as exc:
                raise NumericalError(
                    f"divergence at epoch {epoch}, batch starting {start}: {exc}"
                ) from exc
            student_params.add_flat(grad, scale=-config.learning_rate)
            for key in sums:
                sums[key] += getattr(objective.last, key) * len(chunk)
            seen += len(chunk)
        epoch_components.append({k: v / seen for k, v in sums.items()})
        if eval_fn is not None:
            val_curve.append(eval_fn(student_params))
    return DistillReport(
        initial_val_ppl=initial_ppl,
        epoch_components=epoch_components,
        val_ppl=val_curve,
        teacher_fingerprint=fingerprint_params(teacher_params),
        config=config,
    )
