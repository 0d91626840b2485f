"""Autoregressive decoding with top-k/top-p truncation and bulk generation.

Sequences are conditioned on rendered control codes as the initial context.
Each sequence draws from its own index-keyed rng stream, so bulk generation
is reproducible and order-independent. Generation never touches a privacy
ledger: sampling from a trained model is post-processing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import fingerprint_params
from .corpus import ControlCode, PreparedExample, Schema, Vocabulary, render_control_code, Record
from .model import ParameterSet, decode_step, prefill, softmax
from .seeding import derive_rng


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int | None = 50
    top_p: float | None = 0.9
    max_new_tokens: int = 64
    stop_at_eos: bool = True

    def __post_init__(self):
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1 or None, got {self.top_k}")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must lie in (0, 1] or None, got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def to_json(self) -> dict:
        return {
            "top_k": self.top_k,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "stop_at_eos": self.stop_at_eos,
        }


def _check_distribution(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("probs must be one-dimensional")
    if np.any(probs < 0):
        raise ValueError("probs must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probs sum to {probs.sum()}, expected 1 within 1e-6")
    return probs


def truncate_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Keep the k most probable tokens (ties at rank k go to lower ids)."""
    probs = _check_distribution(probs)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= probs.size:
        return probs.copy()
    order = np.argsort(-probs, kind="stable")
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep]
    return out / out.sum()


def truncate_top_p(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix with mass >= p."""
    probs = _check_distribution(probs)
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    boundary = min(int(np.searchsorted(cumulative, p, side="left")), probs.size - 1)
    out = np.zeros_like(probs)
    keep = order[: boundary + 1]
    out[keep] = probs[keep]
    return out / out.sum()


def _truncate(probs: np.ndarray, config: SamplerConfig) -> np.ndarray:
    if config.top_k is not None:
        probs = truncate_top_k(probs, config.top_k)
    if config.top_p is not None:
        probs = truncate_top_p(probs, config.top_p)
    return probs


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cumulative = np.cumsum(probs)
    return int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))


@dataclass(frozen=True)
class SyntheticExample:
    code: ControlCode
    tokens: tuple[int, ...]

    def prepared(self) -> PreparedExample:
        return PreparedExample(tokens=self.tokens, boundary=len(self.code.rendered))


@dataclass
class SyntheticDataset:
    examples: list[SyntheticExample]
    fingerprint: dict

    def __len__(self) -> int:
        return len(self.examples)

    def prepared(self) -> list[PreparedExample]:
        return [ex.prepared() for ex in self.examples]


def _sample_group(
    params: ParameterSet,
    codes: Sequence[ControlCode],
    rngs: Sequence[np.random.Generator],
    config: SamplerConfig,
    banned_ids: tuple[int, ...],
    eos_id: int,
) -> list[tuple[int, ...]]:
    """Decode a batch of equal-length prompts, one rng stream per row."""
    prompt_len = len(codes[0].rendered)
    prompts = np.array([c.rendered for c in codes], dtype=np.int64)
    n_new = min(config.max_new_tokens, params.config.max_seq_len - prompt_len)
    logits, state = prefill(params, prompts)
    generated: list[list[int]] = [[] for _ in codes]
    alive = np.ones(len(codes), dtype=bool)
    for _ in range(n_new):
        probs = softmax(logits)
        next_tokens = np.zeros(len(codes), dtype=np.int64)
        for row in np.flatnonzero(alive):
            row_probs = probs[row].copy()
            row_probs[list(banned_ids)] = 0.0
            row_probs /= row_probs.sum()
            row_probs = _truncate(row_probs, config)
            token = _draw(row_probs, rngs[row])
            next_tokens[row] = token
            generated[row].append(token)
            if config.stop_at_eos and token == eos_id:
                alive[row] = False
        if not alive.any():
            break
        logits = decode_step(params, state, next_tokens)
    return [tuple(c.rendered) + tuple(g) for c, g in zip(codes, generated)]


def sample_sequence(
    params: ParameterSet,
    code: ControlCode,
    config: SamplerConfig,
    rng: np.random.Generator,
    banned_ids: tuple[int, ...] = (),
    eos_id: int = 1,
) -> tuple[int, ...]:
    """One sequence: rendered code as context, then truncated sampling."""
    (seq,) = _sample_group(params, [code], [rng], config, banned_ids, eos_id)
    return seq


def generate_synthetic(
    params: ParameterSet,
    codes: Sequence[ControlCode],
    config: SamplerConfig,
    seed: int,
    vocab: Vocabulary,
    batch_size: int = 256,
) -> SyntheticDataset:
    """One synthetic example per code, in order. Rng streams are keyed by the
    code's position, so results do not depend on batching or visit order.
    Pad and separator ids are suppressed during sampling; EOS terminates."""
    if not codes:
        raise ValueError("codes is empty")
    banned = (vocab.pad_id, vocab.sep_id)
    by_length: dict[int, list[int]] = {}
    for idx, code in enumerate(codes):
        by_length.setdefault(len(code.rendered), []).append(idx)

    results: list[tuple[int, ...] | None] = [None] * len(codes)
    for length in sorted(by_length):
        indices = by_length[length]
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            rngs = [derive_rng(seed, str(i)) for i in chunk]
            try:
                seqs = _sample_group(
                    params, [codes[i] for i in chunk], rngs, config, banned,
                    vocab.eos_id,
                )
            except Exception as exc:
                raise RuntimeError(
                    f"generation failed for codes {chunk[0]}..{chunk[-1]}: {exc}"
                ) from exc
            for i, seq in zip(chunk, seqs):
                results[i] = seq

    examples = [
        SyntheticExample(code=code, tokens=seq)
        for code, seq in zip(codes, results)
    ]
    fingerprint = {
        "checkpoint_sha256": fingerprint_params(params),
        "sampler": config.to_json(),
        "count": len(examples),
        "seed": seed,
    }
    return SyntheticDataset(examples=examples, fingerprint=fingerprint)


def save_synthetic(
    data_path: str | Path,
    manifest_path: str | Path,
    dataset: SyntheticDataset,
    vocab: Vocabulary,
) -> None:
    with open(data_path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            content = ex.tokens[len(ex.code.rendered) :]
            line = {
                "control": ex.code.attribute_dict(),
                "text": vocab.decode_content(content),
            }
            fh.write(json.dumps(line, ensure_ascii=False) + "\n")
    manifest = dict(dataset.fingerprint)
    Path(manifest_path).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_synthetic(
    data_path: str | Path,
    manifest_path: str | Path,
    schema: Schema,
    vocab: Vocabulary,
) -> SyntheticDataset:
    fingerprint = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    examples = []
    with open(data_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            record = Record(text=obj["text"] or "-", attributes=dict(obj["control"]))
            code = render_control_code(record, schema, vocab)
            content = vocab.encode(obj["text"])
            tokens = tuple(code.rendered) + tuple(content)
            if obj["text"]:
                tokens = tokens + (vocab.eos_id,)
            examples.append(SyntheticExample(code=code, tokens=tokens))
    return SyntheticDataset(examples=examples, fingerprint=fingerprint)
