"""Minimal decoder-only autoregressive language model in 64-bit numpy.

Pre-norm transformer blocks with learned positional embeddings and causal
self-attention. The backward pass is written by hand so that exact
per-example gradients are available (one full-length gradient vector per
batch element), which per-batch autodiff frameworks do not expose cheaply.
A key-value cache supports incremental decoding for generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import erf

from .corpus import PreparedExample
from .errors import ConfigError, NumericalError

_LN_EPS = 1e-5
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{k: int(obj[k]) for k in (
            "n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len")})


@dataclass
class ParameterSet:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def add_flat(self, delta: np.ndarray, scale: float = 1.0) -> None:
        """In-place params += scale * delta for a flat vector in array order."""
        offset = 0
        for a in self.arrays.values():
            a += scale * delta[offset : offset + a.size].reshape(a.shape)
            offset += a.size

    def set_flat(self, vector: np.ndarray) -> None:
        offset = 0
        for a in self.arrays.values():
            a[...] = vector[offset : offset + a.size].reshape(a.shape)
            offset += a.size

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def validate_finite(self) -> None:
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite values in parameter array {name!r}")


@dataclass
class ForwardOutput:
    logits: np.ndarray
    hidden_last: np.ndarray


@dataclass
class Batch:
    """Right-padded token matrix plus per-position loss mask.

    mask[b, i] = 1 exactly when predicting tokens[b, i] contributes to the
    loss; control-code positions (i < boundary) and padding carry 0. The
    first position is never predictable, which boundary >= 1 guarantees.
    """

    tokens: np.ndarray
    mask: np.ndarray


def batch_examples(examples: Sequence[PreparedExample], pad_id: int) -> Batch:
    if not examples:
        raise ValueError("batch is empty")
    t_max = max(len(ex.tokens) for ex in examples)
    tokens = np.full((len(examples), t_max), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), t_max), dtype=np.float64)
    for b, ex in enumerate(examples):
        n = len(ex.tokens)
        tokens[b, :n] = ex.tokens
        mask[b, ex.boundary : n] = 1.0
    return Batch(tokens=tokens, mask=mask)


def _param_names(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v, L = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    names: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (L, d)),
    ]
    for l in range(config.n_layers):
        p = f"layers.{l}."
        names += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ffn.w1", (d, f)), (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, d)), (p + "ffn.b2", (d,)),
        ]
    names += [
        ("ln_f.g", (d,)), ("ln_f.b", (d,)),
        ("head.w", (d, v)), ("head.b", (v,)),
    ]
    return names


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Scaled normal init; residual-path projections shrunk by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _param_names(config):
        draw = _INIT_STD * rng.standard_normal(shape)
        leaf = name.rsplit(".", 1)[-1]
        parent = name.rsplit(".", 2)[-2] if "." in name else ""
        if leaf == "g":
            arrays[name] = 1.0 + draw
        elif (parent, leaf) in (("attn", "wo"), ("ffn", "w2")):
            arrays[name] = draw * residual_scale
        else:
            arrays[name] = draw
    return ParameterSet(config=config, arrays=arrays)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(
        2.0 * np.pi
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * istd
    return xhat * g + b, xhat, istd


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] > config.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[-1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id out of range for vocabulary")


def _forward_cached(params: ParameterSet, tokens: np.ndarray):
    """Batched forward pass retaining every intermediate needed for backward."""
    cfg = params.config
    a = params.arrays
    B, T = tokens.shape
    scale = 1.0 / np.sqrt(cfg.d_head)
    neg = np.triu(np.full((T, T), -np.inf), k=1)

    x = a["tok_emb"][tokens] + a["pos_emb"][:T]
    cache: dict = {"tokens": tokens, "T": T, "layers": []}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        lc: dict = {"x_in": x}
        h, lc["xhat1"], lc["istd1"] = _layer_norm(x, a[p + "ln1.g"], a[p + "ln1.b"])
        lc["h1"] = h
        q = _split_heads(h @ a[p + "attn.wq"] + a[p + "attn.bq"], cfg.n_heads)
        k = _split_heads(h @ a[p + "attn.wk"] + a[p + "attn.bk"], cfg.n_heads)
        v = _split_heads(h @ a[p + "attn.wv"] + a[p + "attn.bv"], cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + neg
        att = softmax(scores)
        ctx = _merge_heads(att @ v)
        proj = ctx @ a[p + "attn.wo"] + a[p + "attn.bo"]
        lc.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + proj

        lc["x_mid"] = x
        h2, lc["xhat2"], lc["istd2"] = _layer_norm(x, a[p + "ln2.g"], a[p + "ln2.b"])
        lc["h2"] = h2
        pre = h2 @ a[p + "ffn.w1"] + a[p + "ffn.b1"]
        f = gelu(pre)
        lc.update(pre=pre, f=f)
        x = x + f @ a[p + "ffn.w2"] + a[p + "ffn.b2"]
        cache["layers"].append(lc)

    hidden, cache["xhat_f"], cache["istd_f"] = _layer_norm(x, a["ln_f.g"], a["ln_f.b"])
    cache["x_f"] = x
    cache["hidden"] = hidden
    logits = hidden @ a["head.w"] + a["head.b"]
    return ForwardOutput(logits=logits, hidden_last=hidden), cache


def forward(params: ParameterSet, tokens) -> ForwardOutput:
    """Logits and final hidden states; accepts one sequence or a batch."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    _check_tokens(params.config, tokens)
    out, _ = _forward_cached(params, tokens)
    if not np.all(np.isfinite(out.logits)):
        raise NumericalError("non-finite logits in forward pass")
    if single:
        return ForwardOutput(logits=out.logits[0], hidden_last=out.hidden_last[0])
    return out


def _linear_backward(x, w, dy, grads, name_w, name_b, per_example):
    # matmul over the transposed time axis hits BLAS; einsum would not.
    if per_example:
        grads[name_w] = np.matmul(x.transpose(0, 2, 1), dy)
        grads[name_b] = dy.sum(axis=1)
    else:
        B, T, d_in = x.shape
        grads[name_w] = x.reshape(B * T, d_in).T @ dy.reshape(B * T, -1)
        grads[name_b] = dy.sum(axis=(0, 1))
    return dy @ w.T


def _layer_norm_backward(dy, xhat, istd, g, grads, name_g, name_b, per_example):
    if per_example:
        grads[name_g] = (dy * xhat).sum(axis=1)
        grads[name_b] = dy.sum(axis=1)
    else:
        grads[name_g] = (dy * xhat).sum(axis=(0, 1))
        grads[name_b] = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return istd * (dxhat - m1 - xhat * m2)


def backward(
    params: ParameterSet,
    cache: dict,
    dlogits: np.ndarray,
    dhidden: np.ndarray | None = None,
    per_example: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(logits) and optionally
    d(loss)/d(hidden_last). With per_example=True every output array gains a
    leading batch axis and holds the gradient of each example's own loss."""
    cfg = params.config
    a = params.arrays
    tokens = cache["tokens"]
    B, T = tokens.shape
    scale = 1.0 / np.sqrt(cfg.d_head)
    grads: dict[str, np.ndarray] = {}

    dhid = _linear_backward(
        cache["hidden"], a["head.w"], dlogits, grads, "head.w", "head.b", per_example
    )
    if dhidden is not None:
        dhid = dhid + dhidden
    dx = _layer_norm_backward(
        dhid, cache["xhat_f"], cache["istd_f"], a["ln_f.g"], grads,
        "ln_f.g", "ln_f.b", per_example,
    )

    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        lc = cache["layers"][l]

        df = _linear_backward(
            lc["f"], a[p + "ffn.w2"], dx, grads, p + "ffn.w2", p + "ffn.b2", per_example
        )
        dpre = df * _gelu_grad(lc["pre"])
        dh2 = _linear_backward(
            lc["h2"], a[p + "ffn.w1"], dpre, grads, p + "ffn.w1", p + "ffn.b1", per_example
        )
        dx = dx + _layer_norm_backward(
            dh2, lc["xhat2"], lc["istd2"], a[p + "ln2.g"], grads,
            p + "ln2.g", p + "ln2.b", per_example,
        )

        dctx = _linear_backward(
            lc["ctx"], a[p + "attn.wo"], dx, grads, p + "attn.wo", p + "attn.bo",
            per_example,
        )
        dctx_h = _split_heads(dctx, cfg.n_heads)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        dv = att.transpose(0, 1, 3, 2) @ dctx_h
        datt = dctx_h @ v.transpose(0, 1, 3, 2)
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale

        dh1 = np.zeros_like(lc["h1"])
        for dz, wname, bname in (
            (dq, p + "attn.wq", p + "attn.bq"),
            (dk, p + "attn.wk", p + "attn.bk"),
            (dv, p + "attn.wv", p + "attn.bv"),
        ):
            dh1 += _linear_backward(
                lc["h1"], a[wname], _merge_heads(dz), grads, wname, bname, per_example
            )
        dx = dx + _layer_norm_backward(
            dh1, lc["xhat1"], lc["istd1"], a[p + "ln1.g"], grads,
            p + "ln1.g", p + "ln1.b", per_example,
        )

    one_hot = np.zeros((B, T, cfg.vocab_size))
    np.put_along_axis(one_hot, tokens[:, :, None], 1.0, axis=2)
    if per_example:
        grads["tok_emb"] = np.matmul(one_hot.transpose(0, 2, 1), dx)
        dpos = np.zeros((B, cfg.max_seq_len, cfg.d_model))
        dpos[:, :T] = dx
        grads["pos_emb"] = dpos
    else:
        grads["tok_emb"] = one_hot.reshape(B * T, -1).T @ dx.reshape(B * T, -1)
        dpos = np.zeros((cfg.max_seq_len, cfg.d_model))
        dpos[:T] = dx.sum(axis=0)
        grads["pos_emb"] = dpos

    return {name: grads[name] for name in params.arrays}


def nll_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean negative log-likelihood over unmasked positions.

    Arrays are already aligned: logits[i] scores targets[i]; mask in {0, 1}.
    Accepts a single sequence or a batch (pooled mean over all positions).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError("logits, targets, and mask lengths disagree")
    total = mask.sum()
    if total == 0:
        raise ValueError("mask is all zeros; no positions to score")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum() / total)


class LossSpec(Protocol):
    """Differentiable per-example objective over a forward pass."""

    def per_example(
        self, output: ForwardOutput, batch: Batch
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Return (losses (B,), dlogits of each example's own loss,
        dhidden or None)."""
        ...


class NextTokenLoss:
    """Per-example mean cross-entropy of next-token prediction."""

    def per_example(self, output: ForwardOutput, batch: Batch):
        logits = output.logits
        B, T, V = logits.shape
        targets = batch.tokens[:, 1:]
        mask = batch.mask[:, 1:]
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("an example has no unmasked positions")
        logp = log_softmax(logits[:, :-1, :])
        picked = np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
        losses = -(picked * mask).sum(axis=1) / counts

        probs = np.exp(logp)
        np.subtract.at(probs, (np.arange(B)[:, None], np.arange(T - 1)[None, :], targets), 1.0)
        dlogits = np.zeros_like(logits)
        dlogits[:, :-1, :] = probs * (mask / counts[:, None])[:, :, None]
        return losses, dlogits, None


def per_example_gradients(
    params: ParameterSet,
    batch_or_examples,
    loss_spec: LossSpec,
    pad_id: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Losses (B,) and the per-example gradient matrix (B, total_count)."""
    batch = (
        batch_or_examples
        if isinstance(batch_or_examples, Batch)
        else batch_examples(batch_or_examples, pad_id)
    )
    _check_tokens(params.config, batch.tokens)
    output, cache = _forward_cached(params, batch.tokens)
    losses, dlogits, dhidden = loss_spec.per_example(output, batch)
    if not np.all(np.isfinite(losses)):
        raise NumericalError("non-finite loss in per-example gradient pass")
    grads = backward(params, cache, dlogits, dhidden, per_example=True)
    B = batch.tokens.shape[0]
    flat = np.concatenate([g.reshape(B, -1) for g in grads.values()], axis=1)
    if not np.all(np.isfinite(flat)):
        raise NumericalError("non-finite gradient in per-example gradient pass")
    return losses, flat


def mean_gradients(
    params: ParameterSet,
    batch_or_examples,
    loss_spec: LossSpec,
    pad_id: int = 0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, its flat gradient, and the per-example losses."""
    batch = (
        batch_or_examples
        if isinstance(batch_or_examples, Batch)
        else batch_examples(batch_or_examples, pad_id)
    )
    _check_tokens(params.config, batch.tokens)
    output, cache = _forward_cached(params, batch.tokens)
    losses, dlogits, dhidden = loss_spec.per_example(output, batch)
    if not np.all(np.isfinite(losses)):
        raise NumericalError("non-finite loss in gradient pass")
    B = batch.tokens.shape[0]
    grads = backward(
        params, cache, dlogits / B, None if dhidden is None else dhidden / B,
        per_example=False,
    )
    flat = np.concatenate([g.ravel() for g in grads.values()])
    if not np.all(np.isfinite(flat)):
        raise NumericalError("non-finite gradient in gradient pass")
    return float(losses.mean()), flat, losses


# ---------------------------------------------------------------------------
# Incremental decoding with a key-value cache
# ---------------------------------------------------------------------------

@dataclass
class DecodeState:
    k: list[np.ndarray]
    v: list[np.ndarray]
    pos: int


def prefill(params: ParameterSet, tokens: np.ndarray) -> tuple[np.ndarray, DecodeState]:
    """Run the prompt through the model, returning last-position logits and
    a cache ready for decode_step. All prompts in the batch share a length."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(cfg, tokens)
    B, T = tokens.shape
    out, cache = _forward_cached(params, tokens)
    ks, vs = [], []
    for lc in cache["layers"]:
        k = np.zeros((B, cfg.n_heads, cfg.max_seq_len, cfg.d_head))
        v = np.zeros_like(k)
        k[:, :, :T] = lc["k"]
        v[:, :, :T] = lc["v"]
        ks.append(k)
        vs.append(v)
    return out.logits[:, -1, :], DecodeState(k=ks, v=vs, pos=T)


def decode_step(
    params: ParameterSet, state: DecodeState, new_tokens: np.ndarray
) -> np.ndarray:
    """Advance one position; returns logits (B, vocab) for the new tokens."""
    cfg = params.config
    a = params.arrays
    new_tokens = np.asarray(new_tokens, dtype=np.int64)
    if state.pos >= cfg.max_seq_len:
        raise ValueError("decode past max_seq_len")
    B = new_tokens.shape[0]
    scale = 1.0 / np.sqrt(cfg.d_head)

    x = a["tok_emb"][new_tokens] + a["pos_emb"][state.pos]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h, _, _ = _layer_norm(x, a[p + "ln1.g"], a[p + "ln1.b"])
        q = (h @ a[p + "attn.wq"] + a[p + "attn.bq"]).reshape(B, cfg.n_heads, cfg.d_head)
        k = (h @ a[p + "attn.wk"] + a[p + "attn.bk"]).reshape(B, cfg.n_heads, cfg.d_head)
        v = (h @ a[p + "attn.wv"] + a[p + "attn.bv"]).reshape(B, cfg.n_heads, cfg.d_head)
        state.k[l][:, :, state.pos] = k
        state.v[l][:, :, state.pos] = v
        keys = state.k[l][:, :, : state.pos + 1]
        vals = state.v[l][:, :, : state.pos + 1]
        att = softmax((keys @ q[:, :, :, None])[:, :, :, 0] * scale)
        ctx = (att[:, :, None, :] @ vals)[:, :, 0, :].reshape(B, cfg.d_model)
        x = x + ctx @ a[p + "attn.wo"] + a[p + "attn.bo"]

        h2, _, _ = _layer_norm(x, a[p + "ln2.g"], a[p + "ln2.b"])
        x = x + gelu(h2 @ a[p + "ffn.w1"] + a[p + "ffn.b1"]) @ a[p + "ffn.w2"] + a[p + "ffn.b2"]

    hidden, _, _ = _layer_norm(x, a["ln_f.g"], a["ln_f.b"])
    logits = hidden @ a["head.w"] + a["head.b"]
    state.pos += 1
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits in decode step")
    return logits
