"""Encoder/decoder layers and Transformer / GPT stacks (forward pass only).

Post-LN layers normalize after each residual sum; Pre-LN layers normalize the
sublayer input and leave the residual path untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .attention import NO_MASK, MaskPolicy
from .cache import KvCache, streaming_decode_step
from .errors import ShapeError, SpecError
from .linalg import Matrix, as_matrix, matmul
from .multihead import MhaSpec, MhaWeights, mha_forward
from .tokenizer import EmbeddingTable, RopeParams, embed

DEFAULT_EPS = 1e-5


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda x: np.maximum(x, 0.0),
    "gelu": _gelu,
    "silu": lambda x: x / (1.0 + np.exp(-x)),
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class NormParams:
    kind: str  # "layer" | "rms"
    gamma: np.ndarray
    beta: Optional[np.ndarray] = None
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in ("layer", "rms"):
            raise SpecError(f"unknown norm kind {self.kind!r}")
        gamma = np.asarray(self.gamma, dtype=np.float64).ravel()
        object.__setattr__(self, "gamma", gamma)
        if self.kind == "layer":
            beta = np.zeros_like(gamma) if self.beta is None else np.asarray(self.beta, dtype=np.float64).ravel()
            if beta.shape != gamma.shape:
                raise ShapeError("gamma and beta lengths differ")
            object.__setattr__(self, "beta", beta)
        elif self.beta is not None:
            raise SpecError("RMSNorm has no shift")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def dim(self) -> int:
        return self.gamma.size

    @classmethod
    def layer(cls, d: int, eps: float = DEFAULT_EPS) -> "NormParams":
        return cls("layer", np.ones(d), np.zeros(d), eps)

    @classmethod
    def rms(cls, d: int, eps: float = DEFAULT_EPS) -> "NormParams":
        return cls("rms", np.ones(d), None, eps)


def _check_len(x: np.ndarray, p: NormParams) -> None:
    if x.shape[-1] != p.dim:
        raise ShapeError(f"vector of length {x.shape[-1]} for a norm of width {p.dim}")


def layer_norm(x_row, p: NormParams) -> np.ndarray:
    x = np.asarray(x_row, dtype=np.float64)
    _check_len(x, p)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return p.gamma * ((x - mu) / np.sqrt(var + p.eps)) + p.beta


def rms_norm(x_row, p: NormParams) -> np.ndarray:
    x = np.asarray(x_row, dtype=np.float64)
    _check_len(x, p)
    return p.gamma * x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + p.eps)


def apply_norm(x, p: NormParams) -> Matrix:
    """Row-wise layer or RMS normalization of a matrix."""
    x = as_matrix(x)
    if x.shape[0] == 0:
        return x.copy()
    return layer_norm(x, p) if p.kind == "layer" else rms_norm(x, p)


@dataclass(frozen=True)
class FfnParams:
    """Two-layer feed-forward ``d -> d_ff -> d``; GLU multiplies by a linear gate branch."""

    w1: Matrix
    b1: np.ndarray
    w_out: Matrix
    kind: str = "plain"  # "plain" | "glu"
    activation: str = "relu"
    w2: Optional[Matrix] = None
    b2: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("plain", "glu"):
            raise SpecError(f"unknown FFN kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "w1", as_matrix(self.w1, "w1"))
        object.__setattr__(self, "w_out", as_matrix(self.w_out, "w_out"))
        object.__setattr__(self, "b1", np.asarray(self.b1, dtype=np.float64).ravel())
        d, d_ff = self.w1.shape
        if self.b1.size != d_ff or self.w_out.shape != (d_ff, d):
            raise ShapeError(f"FFN shapes w1 {self.w1.shape}, b1 {self.b1.shape}, w_out {self.w_out.shape} disagree")
        if self.kind == "glu":
            if self.w2 is None or self.b2 is None:
                raise SpecError("GLU needs gate weights w2 and b2")
            object.__setattr__(self, "w2", as_matrix(self.w2, "w2"))
            object.__setattr__(self, "b2", np.asarray(self.b2, dtype=np.float64).ravel())
            if self.w2.shape != self.w1.shape or self.b2.size != d_ff:
                raise ShapeError("GLU gate shapes must match w1/b1")

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def random(cls, d: int, d_ff: int, rng: np.random.Generator, kind: str = "plain", activation: str = "relu") -> "FfnParams":
        glu = kind == "glu"
        return cls(
            w1=rng.standard_normal((d, d_ff)) / math.sqrt(d),
            b1=0.1 * rng.standard_normal(d_ff),
            w_out=rng.standard_normal((d_ff, d)) / math.sqrt(d_ff),
            kind=kind,
            activation=activation,
            w2=rng.standard_normal((d, d_ff)) / math.sqrt(d) if glu else None,
            b2=0.1 * rng.standard_normal(d_ff) if glu else None,
        )


def ffn_forward(x, p: FfnParams) -> Matrix:
    x = as_matrix(x)
    if x.shape[1] != p.dim:
        raise ShapeError(f"FFN input width {x.shape[1]} != {p.dim}")
    hidden = ACTIVATIONS[p.activation](matmul(x, p.w1) + p.b1)
    if p.kind == "glu":
        hidden = hidden * (matmul(x, p.w2) + p.b2)
    return matmul(hidden, p.w_out)


@dataclass(frozen=True)
class AttentionSublayer:
    spec: MhaSpec
    weights: MhaWeights

    def __post_init__(self):
        self.weights.check(self.spec)

    @classmethod
    def random(cls, d: int, n_heads: int, rng: np.random.Generator, n_kv_heads: Optional[int] = None) -> "AttentionSublayer":
        spec = MhaSpec.square(n_heads, d, n_kv_heads)
        return cls(spec, MhaWeights.random(spec, rng))

    def silenced(self) -> "AttentionSublayer":
        return AttentionSublayer(self.spec, self.weights.scaled_output(0.0))


@dataclass(frozen=True)
class LayerConfig:
    self_attn: AttentionSublayer
    norm_attn: NormParams
    ffn: FfnParams
    norm_ffn: NormParams
    placement: str = "post"  # "post" | "pre"
    cross_attn: Optional[AttentionSublayer] = None
    norm_cross: Optional[NormParams] = None
    rope: Optional[RopeParams] = None

    def __post_init__(self):
        if self.placement not in ("post", "pre"):
            raise SpecError(f"unknown norm placement {self.placement!r}")
        d = self.norm_attn.dim
        spec = self.self_attn.spec
        if spec.d_in != d or spec.d_out != d or self.ffn.dim != d or self.norm_ffn.dim != d:
            raise ShapeError("skip connections need equal widths across sublayers")
        if self.cross_attn is not None:
            if self.norm_cross is None or self.norm_cross.dim != d or self.cross_attn.spec.d_out != d:
                raise ShapeError("cross-attention sublayer needs a matching norm and output width")
        if self.rope is not None and self.rope.head_dim != spec.d_qk:
            raise ShapeError("RoPE width must equal d_qk")

    @property
    def dim(self) -> int:
        return self.norm_attn.dim

    @classmethod
    def random(
        cls,
        d: int,
        n_heads: int,
        rng: np.random.Generator,
        placement: str = "post",
        d_ff: Optional[int] = None,
        n_kv_heads: Optional[int] = None,
        cross: bool = False,
        norm: str = "layer",
        ffn_kind: str = "plain",
        activation: str = "relu",
        rope: Optional[RopeParams] = None,
    ) -> "LayerConfig":
        make_norm = NormParams.layer if norm == "layer" else NormParams.rms
        return cls(
            self_attn=AttentionSublayer.random(d, n_heads, rng, n_kv_heads),
            norm_attn=make_norm(d),
            ffn=FfnParams.random(d, d_ff or 4 * d, rng, ffn_kind, activation),
            norm_ffn=make_norm(d),
            placement=placement,
            cross_attn=AttentionSublayer.random(d, n_heads, rng, n_kv_heads) if cross else None,
            norm_cross=make_norm(d) if cross else None,
            rope=rope,
        )

    def without_cross(self) -> "LayerConfig":
        return replace(self, cross_attn=None, norm_cross=None)


def residual(x: Matrix, sublayer: Callable[[Matrix], Matrix], norm: NormParams, placement: str) -> Matrix:
    """Skip connection around ``sublayer`` with the norm placed per ``placement``."""
    if placement == "pre":
        return x + sublayer(apply_norm(x, norm))
    return apply_norm(x + sublayer(x), norm)


def _self_attn_fn(cfg: LayerConfig, mask: MaskPolicy):
    sub = cfg.self_attn
    return lambda h: mha_forward(h, h, sub.weights, sub.spec, mask, rope=cfg.rope, q_start=0, kv_start=0)


def _finish(x: Matrix, cfg: LayerConfig, enc_out: Optional[Matrix]) -> Matrix:
    """Cross-attention (when configured) and the FFN, each with its skip connection."""
    if cfg.cross_attn is not None and enc_out is not None:
        sub = cfg.cross_attn
        x = residual(x, lambda h: mha_forward(h, enc_out, sub.weights, sub.spec), cfg.norm_cross, cfg.placement)
    return residual(x, lambda h: ffn_forward(h, cfg.ffn), cfg.norm_ffn, cfg.placement)


def encoder_layer(x, cfg: LayerConfig, mask: MaskPolicy = NO_MASK) -> Matrix:
    x = as_matrix(x)
    if x.shape[1] != cfg.dim:
        raise ShapeError(f"layer input width {x.shape[1]} != {cfg.dim}")
    x = residual(x, _self_attn_fn(cfg, mask), cfg.norm_attn, cfg.placement)
    return _finish(x, cfg, None)


def decoder_layer(x, enc_out, cfg: LayerConfig) -> Matrix:
    """Causal self-attention, then cross-attention to ``enc_out`` (if any), then FFN."""
    x = as_matrix(x)
    if x.shape[1] != cfg.dim:
        raise ShapeError(f"layer input width {x.shape[1]} != {cfg.dim}")
    enc = None if enc_out is None else as_matrix(enc_out, "encoder output")
    x = residual(x, _self_attn_fn(cfg, MaskPolicy.causal()), cfg.norm_attn, cfg.placement)
    return _finish(x, cfg, enc)


@dataclass(frozen=True)
class TransformerModel:
    src_embedding: EmbeddingTable
    tgt_embedding: EmbeddingTable
    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.encoder) != len(self.decoder):
            raise SpecError("encoder and decoder stacks must have the same depth")
        if any(cfg.cross_attn is None for cfg in self.decoder):
            raise SpecError("decoder layers need cross-attention weights")

    @classmethod
    def random(cls, vocab_src: int, vocab_tgt: int, d: int, n_heads: int, n_layers: int, seed: int, placement: str = "post") -> "TransformerModel":
        rng = np.random.default_rng(seed)
        return cls(
            EmbeddingTable(rng.standard_normal((vocab_src, d))),
            EmbeddingTable(rng.standard_normal((vocab_tgt, d))),
            [LayerConfig.random(d, n_heads, rng, placement) for _ in range(n_layers)],
            [LayerConfig.random(d, n_heads, rng, placement, cross=True) for _ in range(n_layers)],
        )


def transformer_forward(src_tokens, tgt_tokens, model: TransformerModel) -> Matrix:
    """Final decoder state; task heads are not part of this model."""
    e = embed(src_tokens, model.src_embedding)
    for cfg in model.encoder:
        e = encoder_layer(e, cfg)
    y = embed(tgt_tokens, model.tgt_embedding)
    for cfg in model.decoder:
        y = decoder_layer(y, e, cfg)
    return y


@dataclass(frozen=True)
class GptModel:
    embedding: EmbeddingTable
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if any(cfg.cross_attn is not None for cfg in self.layers):
            raise SpecError("decoder-only layers have no cross-attention")

    @classmethod
    def random(cls, vocab: int, d: int, n_heads: int, n_layers: int, seed: int, placement: str = "pre", n_kv_heads: Optional[int] = None, rope: Optional[RopeParams] = None, norm: str = "layer") -> "GptModel":
        rng = np.random.default_rng(seed)
        return cls(
            EmbeddingTable(rng.standard_normal((vocab, d))),
            [LayerConfig.random(d, n_heads, rng, placement, n_kv_heads=n_kv_heads, rope=rope, norm=norm) for _ in range(n_layers)],
        )


def gpt_forward(tokens, model: GptModel) -> Matrix:
    x = embed(tokens, model.embedding)
    for cfg in model.layers:
        x = decoder_layer(x, None, cfg)
    return x


def new_caches(model: GptModel) -> list[KvCache]:
    return [KvCache(cfg.self_attn.spec, cfg.rope) for cfg in model.layers]


def gpt_decode_step(tokens, model: GptModel, caches: list[KvCache]) -> Matrix:
    """Final states for ``tokens`` appended after everything already in ``caches``."""
    x = embed(tokens, model.embedding)
    for cfg, cache in zip(model.layers, caches):
        sub = cfg.self_attn
        x = residual(x, lambda h: streaming_decode_step(cache, h, sub.weights, sub.spec)[0], cfg.norm_attn, cfg.placement)
        x = _finish(x, cfg, None)
    return x


def gpt_decode(tokens, model: GptModel, chunk: int = 1) -> Matrix:
    """Cached incremental decode of a whole token sequence, ``chunk`` tokens per step."""
    tokens = list(tokens)
    caches = new_caches(model)
    outs = [gpt_decode_step(tokens[i:i + chunk], model, caches) for i in range(0, len(tokens), chunk)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.embedding.dim))
