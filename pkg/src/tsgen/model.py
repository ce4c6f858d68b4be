"""Decoder-only segment transformer for univariate series.

A window of N*S points becomes N tokens of S consecutive points each.
Tokens are linearly embedded, passed through L causal self-attention
blocks, and linearly decoded back to S points per position, so output
row i is the model's prediction for token i+1. Pre-training supervises
every position with the window's own next tokens.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .config import RunConfig, substream
from .errors import NumericError, ShapeMismatch, UsageError
from .nn import (
    Parameter,
    Tensor,
    add,
    causal_masked_attention,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    scale,
    sub,
    sum_all,
    take_rows,
)


@dataclass(frozen=True)
class ModelConfig:
    segment_len: int
    max_tokens: int
    model_dim: int
    layers: int
    heads: int = 8
    ffn_dim: int = 0  # 0 resolves to 2 * model_dim
    use_position_embedding: bool = True
    pre_norm: bool = True
    init_std: float = 0.02
    norm_eps: float = 1e-5
    use_mask_token: bool = False

    def __post_init__(self) -> None:
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 2 * self.model_dim)
        if self.segment_len < 1:
            raise UsageError(f"segment_len must be >= 1, got {self.segment_len}")
        if self.max_tokens < 2:
            raise UsageError(f"max_tokens must be >= 2, got {self.max_tokens}")
        if self.layers < 1:
            raise UsageError(f"layers must be >= 1, got {self.layers}")
        if self.ffn_dim < 1:
            raise UsageError(f"ffn_dim must be >= 1, got {self.ffn_dim}")
        if self.model_dim % self.heads != 0:
            raise UsageError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def window_len(self) -> int:
        return self.max_tokens * self.segment_len


def model_config_from_run(cfg: RunConfig, use_mask_token: bool = False) -> ModelConfig:
    return ModelConfig(
        segment_len=cfg.segment_len,
        max_tokens=cfg.max_tokens,
        model_dim=cfg.model_dim,
        layers=cfg.layers,
        heads=cfg.heads,
        ffn_dim=cfg.ffn_dim,
        use_position_embedding=cfg.use_position_embedding,
        pre_norm=cfg.pre_norm,
        init_std=cfg.init_std,
        norm_eps=cfg.norm_eps,
        use_mask_token=use_mask_token,
    )


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (n, segment_len)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def tokenize(window, segment_len: int) -> TokenSequence:
    """Reshapes a window into consecutive non-overlapping segments."""
    values = np.asarray(getattr(window, "values", window))
    if values.ndim != 1:
        raise ShapeMismatch(f"tokenize: expected a 1-D window, got shape {values.shape}")
    if len(values) == 0 or len(values) % segment_len != 0:
        raise ShapeMismatch(
            f"tokenize: window length {len(values)} not a positive multiple of segment length {segment_len}"
        )
    return TokenSequence(tokens=values.reshape(-1, segment_len))


# ---------------------------------------------------------------------------
# parameters

MASK_TOKEN_NAME = "mask.embedding"


def canonical_parameters(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their fixed serialization order."""
    s, d, f = config.segment_len, config.model_dim, config.ffn_dim
    out: list[tuple[str, tuple[int, ...]]] = [
        ("embed.weight", (s, d)),
        ("embed.bias", (d,)),
    ]
    if config.use_position_embedding:
        out.append(("position.embedding", (config.max_tokens, d)))
    for i in range(config.layers):
        prefix = f"blocks.{i}"
        out.extend(
            [
                (f"{prefix}.attn_norm.gain", (d,)),
                (f"{prefix}.attn_norm.bias", (d,)),
                (f"{prefix}.attn.wq", (d, d)),
                (f"{prefix}.attn.bq", (d,)),
                (f"{prefix}.attn.wk", (d, d)),
                (f"{prefix}.attn.bk", (d,)),
                (f"{prefix}.attn.wv", (d, d)),
                (f"{prefix}.attn.bv", (d,)),
                (f"{prefix}.attn.wo", (d, d)),
                (f"{prefix}.attn.bo", (d,)),
                (f"{prefix}.ffn_norm.gain", (d,)),
                (f"{prefix}.ffn_norm.bias", (d,)),
                (f"{prefix}.ffn.w1", (d, f)),
                (f"{prefix}.ffn.b1", (f,)),
                (f"{prefix}.ffn.w2", (f, d)),
                (f"{prefix}.ffn.b2", (d,)),
            ]
        )
    out.extend(
        [
            ("final_norm.gain", (d,)),
            ("final_norm.bias", (d,)),
            ("head.weight", (d, s)),
            ("head.bias", (s,)),
        ]
    )
    if config.use_mask_token:
        out.append((MASK_TOKEN_NAME, (d,)))
    return out


def param_count(config: ModelConfig) -> int:
    """Scalar count of the pre-training parameter set (mask token excluded)."""
    return sum(
        int(np.prod(shape))
        for name, shape in canonical_parameters(config)
        if name != MASK_TOKEN_NAME
    )


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std^2) with draws beyond 2 sigma rejected and redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Parameter]:
    """Deterministic initialization from the run seed's init stream."""
    rng = substream(seed, "init")
    params: dict[str, Parameter] = {}
    for name, shape in canonical_parameters(config):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            data = np.zeros(shape)
        elif name == "position.embedding":
            data = rng.standard_normal(shape) * config.init_std
        else:
            data = _truncated_normal(rng, shape, config.init_std)
        params[name] = Parameter(name, data.astype(dtype))
    return params


def params_from_arrays(arrays: Mapping[str, np.ndarray], config: ModelConfig) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    for name, shape in canonical_parameters(config):
        if name not in arrays:
            raise NumericError(f"missing parameter {name}")
        arr = arrays[name]
        if arr.shape != shape:
            raise NumericError(f"parameter {name} has shape {arr.shape}, config implies {shape}")
        params[name] = Parameter(name, arr)
    return params


# ---------------------------------------------------------------------------
# forward


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> tuple[int, int, int]:
    if tokens.ndim != 3:
        raise ShapeMismatch(f"forward: tokens must be (batch, n, segment_len), got {tokens.shape}")
    b, n, s = tokens.shape
    if s != config.segment_len:
        raise ShapeMismatch(f"forward: segment length {s} does not match config {config.segment_len}")
    if n > config.max_tokens:
        raise ShapeMismatch(f"forward: {n} tokens exceed the model maximum {config.max_tokens}")
    if n < 1:
        raise ShapeMismatch("forward: need at least one token")
    return b, n, s


def forward(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    tokens: np.ndarray,
    segment_mask: np.ndarray | None = None,
) -> Tensor:
    """Next-token predictions for every position: output (batch, n, s).

    Output row i predicts token i+1; row n-1 is the forecast beyond the
    given context. segment_mask (batch, n) marks positions contributed
    as zero values plus the learnable mask embedding (imputation).
    """
    b, n, s = _check_tokens(config, tokens)
    if segment_mask is not None:
        if not config.use_mask_token:
            raise UsageError("segment_mask given but the model has no mask embedding")
        if segment_mask.shape != (b, n):
            raise ShapeMismatch(
                f"forward: segment_mask shape {segment_mask.shape} does not match tokens {(b, n)}"
            )
        tokens = np.where(segment_mask[:, :, None], 0.0, tokens).astype(tokens.dtype)

    x = add(matmul(Tensor(tokens), params["embed.weight"]), params["embed.bias"])
    if segment_mask is not None:
        flags = segment_mask.astype(tokens.dtype)[:, :, None]
        x = add(x, mul(Tensor(flags), params[MASK_TOKEN_NAME]))
    if config.use_position_embedding:
        x = add(x, take_rows(params["position.embedding"], n))

    eps = config.norm_eps
    for i in range(config.layers):
        p = f"blocks.{i}"

        def attention(inp: Tensor) -> Tensor:
            q = add(matmul(inp, params[f"{p}.attn.wq"]), params[f"{p}.attn.bq"])
            k = add(matmul(inp, params[f"{p}.attn.wk"]), params[f"{p}.attn.bk"])
            v = add(matmul(inp, params[f"{p}.attn.wv"]), params[f"{p}.attn.bv"])
            ctx = causal_masked_attention(q, k, v, config.heads)
            return add(matmul(ctx, params[f"{p}.attn.wo"]), params[f"{p}.attn.bo"])

        def feed_forward(inp: Tensor) -> Tensor:
            hidden = gelu(add(matmul(inp, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
            return add(matmul(hidden, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])

        if config.pre_norm:
            x = add(x, attention(layer_norm(x, params[f"{p}.attn_norm.gain"], params[f"{p}.attn_norm.bias"], eps)))
            x = add(x, feed_forward(layer_norm(x, params[f"{p}.ffn_norm.gain"], params[f"{p}.ffn_norm.bias"], eps)))
        else:
            x = layer_norm(add(x, attention(x)), params[f"{p}.attn_norm.gain"], params[f"{p}.attn_norm.bias"], eps)
            x = layer_norm(add(x, feed_forward(x)), params[f"{p}.ffn_norm.gain"], params[f"{p}.ffn_norm.bias"], eps)

    x = layer_norm(x, params["final_norm.gain"], params["final_norm.bias"], eps)
    return add(matmul(x, params["head.weight"]), params["head.bias"])


def predict(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    tokens: np.ndarray,
    segment_mask: np.ndarray | None = None,
) -> np.ndarray:
    """forward() without graph recording; returns a plain array."""
    with no_grad():
        return forward(params, config, tokens, segment_mask).data


# ---------------------------------------------------------------------------
# losses


def _weighted_mse(predictions: Tensor, targets: np.ndarray, weights: np.ndarray, denom: float) -> Tensor:
    diff = sub(predictions, Tensor(targets.astype(predictions.data.dtype)))
    squared = mul(diff, diff)
    weighted = mul(squared, Tensor(weights.astype(predictions.data.dtype)))
    return scale(sum_all(weighted), 1.0 / denom)


def gpt_loss(predictions: Tensor, tokens: np.ndarray) -> Tensor:
    """Next-token MSE over positions 2..n, normalized by the full n*s.

    Output row i-1 is compared against token i; the last output row
    (the forecast beyond the window) has no target and the missing
    first term is not renormalized away.
    """
    if predictions.shape != tokens.shape:
        raise ShapeMismatch(f"gpt_loss: predictions {predictions.shape} vs tokens {tokens.shape}")
    b, n, s = tokens.shape
    if n < 2:
        raise NumericError("gpt_loss: no supervised positions (need at least 2 tokens)")
    targets = np.zeros_like(tokens)
    targets[:, : n - 1] = tokens[:, 1:]
    weights = np.zeros((1, n, 1), dtype=tokens.dtype)
    weights[:, : n - 1] = 1.0
    return _weighted_mse(predictions, targets, weights, float(b * n * s))


def pretrain_loss(params: Mapping[str, Parameter], config: ModelConfig, tokens: np.ndarray) -> Tensor:
    return gpt_loss(forward(params, config, tokens), tokens)


def forecast_loss(params: Mapping[str, Parameter], config: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Supervised next-token loss over all n positions.

    tokens holds n+1 segments; the model reads the first n and every
    prediction row has a ground-truth target, averaged over all of
    them.
    """
    b, n_plus_1, s = tokens.shape
    if n_plus_1 < 2:
        raise NumericError("forecast_loss: need at least 2 tokens (context plus target)")
    context = tokens[:, :-1]
    predictions = forward(params, config, context)
    targets = tokens[:, 1:]
    n = n_plus_1 - 1
    weights = np.ones((1, 1, 1), dtype=tokens.dtype)
    return _weighted_mse(predictions, targets, weights, float(b * n * s))


def impute_loss(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    tokens: np.ndarray,
    segment_mask: np.ndarray,
) -> Tensor:
    """Reconstruction MSE of masked segments from their generated next tokens.

    tokens carries the ground truth; masked positions are zeroed (plus
    mask embedding) on the way in, and only the prediction rows that
    generate masked segments are supervised, averaged over masked
    values.
    """
    b, n, s = tokens.shape
    if segment_mask.shape != (b, n):
        raise ShapeMismatch(f"impute_loss: mask shape {segment_mask.shape} does not match tokens {(b, n)}")
    if segment_mask[:, 0].any():
        raise NumericError("impute_loss: the first segment must stay observed")
    masked_total = int(segment_mask.sum())
    if masked_total == 0:
        warnings.warn("impute_loss: empty mask, loss defined as 0", stacklevel=2)
        return Tensor(np.asarray(0.0, dtype=tokens.dtype))
    predictions = forward(params, config, tokens, segment_mask=segment_mask)
    targets = np.zeros_like(tokens)
    weights = np.zeros((b, n, 1), dtype=tokens.dtype)
    targets[:, :-1] = np.where(segment_mask[:, 1:, None], tokens[:, 1:], 0.0)
    weights[:, :-1, 0] = segment_mask[:, 1:]
    return _weighted_mse(predictions, targets, weights, float(masked_total * s))


def add_mask_token(
    params: dict[str, Parameter], config: ModelConfig, seed: int, dtype=np.float32
) -> tuple[dict[str, Parameter], ModelConfig]:
    """Extends a pre-trained parameter set with the imputation mask embedding."""
    new_config = replace(config, use_mask_token=True)
    if MASK_TOKEN_NAME in params:
        return dict(params), new_config
    rng = substream(seed, "mask-token")
    data = _truncated_normal(rng, (config.model_dim,), config.init_std).astype(dtype)
    out = dict(params)
    out[MASK_TOKEN_NAME] = Parameter(MASK_TOKEN_NAME, data)
    return out, new_config
