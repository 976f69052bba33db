"""Inference cost accounting: attention work, stored floats and KV-cache bytes.

Work is counted in the asymptotic unit ``N_Q * N_KV * (d_qk + d_v)``: one
multiply per score term plus one per combine term. These are not hardware
FLOPs.

For cache bytes, ``d`` is the per-head width (``d_head``) and ``N_h`` the
number of KV heads: every KV head of every layer stores one key and one value
row per token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

from .errors import FormatError, SpecError
from .latent import MlaSpec
from .multihead import MhaSpec


def _nonneg(**counts) -> None:
    for name, v in counts.items():
        if v < 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")


def attention_flops(n_q: int, n_kv: int, d_qk: int, d_v: int) -> int:
    _nonneg(n_q=n_q, n_kv=n_kv, d_qk=d_qk, d_v=d_v)
    return n_q * n_kv * (d_qk + d_v)


def conversation_cost(n_tokens: int, d_qk: int, d_v: int, cached: bool) -> int:
    """Total attention work to produce ``n_tokens`` tokens one at a time.

    Without a cache every step recomputes attention over the whole prefix
    (``N_Q = N_KV = t``); with a cache step ``t`` is a single query against
    ``t`` cached keys.
    """
    return sum(attention_flops(1 if cached else t, t, d_qk, d_v) for t in range(1, n_tokens + 1))


@dataclass(frozen=True)
class MemoryBreakdown:
    cache: int
    weights: int

    @property
    def total(self) -> int:
        return self.cache + self.weights


def mha_memory(spec: MhaSpec, n_kv_tokens: int) -> MemoryBreakdown:
    """Stored floats for one (G)MHA layer; KV-head count replaces ``N_heads`` for W^K, W^V and the cache."""
    _nonneg(n_kv_tokens=n_kv_tokens)
    h, g = spec.n_heads, spec.n_kv_heads
    cache = g * n_kv_tokens * (spec.d_qk + spec.d_head)
    weights = (h + g) * spec.d_in * spec.d_qk + g * spec.d_head * spec.d_in + h * spec.d_head * spec.d_out
    return MemoryBreakdown(cache, weights)


def mha_memory_floats(spec: MhaSpec, n_kv_tokens: int) -> int:
    return mha_memory(spec, n_kv_tokens).total


def mla_memory(spec: MlaSpec, n_kv_tokens: int) -> MemoryBreakdown:
    """Stored floats for one latent-attention layer with merged weights.

    The query path is counted as ``d_in x d_L`` per head, i.e. the query
    latent is taken as folded into the merged query map. With a separate query
    latent the merged per-head map is ``d_LQ x d_L`` instead; this count does
    not model that.
    """
    _nonneg(n_kv_tokens=n_kv_tokens)
    cache = n_kv_tokens * spec.d_l
    weights = spec.d_in * spec.d_l + spec.n_heads * spec.d_l * (spec.d_in + spec.d_out)
    return MemoryBreakdown(cache, weights)


def mla_memory_floats(spec: MlaSpec, n_kv_tokens: int) -> int:
    return mla_memory(spec, n_kv_tokens).total


def cache_ratio(mla: MlaSpec, mha: MhaSpec) -> Fraction:
    """Latent-cache floats per token over KV-cache floats per token (< 1 means MLA is smaller)."""
    return Fraction(mla.d_l, mha.n_kv_heads * (mha.d_qk + mha.d_head))


def _bytes(bits_total: int) -> Union[int, float]:
    return bits_total // 8 if bits_total % 8 == 0 else bits_total / 8


def kv_cache_bytes(n_layers: int, n_heads: int, n_kv_tokens: int, d: int, bits_per_float: int) -> Union[int, float]:
    """``2 * N_L * N_h * N_KV * d`` floats at ``bits_per_float`` bits each, in bytes."""
    _nonneg(n_layers=n_layers, n_heads=n_heads, n_kv_tokens=n_kv_tokens, d=d, bits_per_float=bits_per_float)
    return _bytes(2 * n_layers * n_heads * n_kv_tokens * d * bits_per_float)


def latent_cache_bytes(n_layers: int, n_kv_tokens: int, d_l: int, bits_per_float: int) -> Union[int, float]:
    _nonneg(n_layers=n_layers, n_kv_tokens=n_kv_tokens, d_l=d_l, bits_per_float=bits_per_float)
    return _bytes(n_layers * n_kv_tokens * d_l * bits_per_float)


@dataclass(frozen=True)
class ModelPreset:
    name: str
    n_layers: int
    n_heads: int
    n_kv_heads: Optional[int]  # None for latent attention (no KV heads)
    d_model: int
    d_head_or_dl: int
    kind: str  # "mha" | "gqa" | "mla"

    def __post_init__(self):
        if self.kind not in ("mha", "gqa", "mla"):
            raise SpecError(f"unknown attention kind {self.kind!r}")
        counts = [self.n_layers, self.n_heads, self.d_model, self.d_head_or_dl]
        if self.kind != "mla":
            if self.n_kv_heads is None:
                raise SpecError(f"{self.kind} preset needs kv_heads")
            counts.append(self.n_kv_heads)
        if any(c < 1 for c in counts):
            raise SpecError("preset counts must be positive")

    def mha_spec(self) -> MhaSpec:
        if self.kind == "mla":
            raise SpecError(f"{self.name} uses latent attention")
        d = self.d_head_or_dl
        return MhaSpec(self.n_heads, self.n_kv_heads, self.d_model, d, d, self.d_model)

    def mla_spec(self) -> MlaSpec:
        if self.kind != "mla":
            raise SpecError(f"{self.name} is not a latent-attention model")
        d_l = self.d_head_or_dl
        # d_lq and d_head are not reported; they do not enter the stored-float count
        return MlaSpec(self.n_heads, self.d_model, d_l, d_l, d_l, self.d_model)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": self.n_layers,
            "heads": self.n_heads,
            "kv_heads": self.n_kv_heads,
            "d_model": self.d_model,
            "d_head": self.d_head_or_dl,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelPreset":
        try:
            return cls(
                name=str(doc["name"]),
                n_layers=int(doc["layers"]),
                n_heads=int(doc["heads"]),
                n_kv_heads=None if doc.get("kv_heads") in (None, "-") else int(doc["kv_heads"]),
                d_model=int(doc["d_model"]),
                d_head_or_dl=int(doc["d_head"]),
                kind=str(doc["kind"]).lower(),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad preset: {exc}") from exc


PRESETS = {
    "llama3-70b": ModelPreset("Llama 3 70B", 80, 64, 8, 8192, 128, "gqa"),
    "gemma3-27b": ModelPreset("Gemma 3 27B", 62, 32, 16, 5376, 128, "gqa"),
    "deepseek-v2": ModelPreset("DeepSeek V2", 60, 128, None, 5120, 512, "mla"),
}


def load_preset(path) -> ModelPreset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read preset file {path}: {exc}") from exc
    return ModelPreset.from_dict(doc)


def account(preset: ModelPreset, context: int, bits: int) -> dict:
    """Per-layer and whole-model cache, weight and per-decode-step work figures."""
    _nonneg(context=context, bits=bits)
    if preset.kind == "mla":
        spec = preset.mla_spec()
        mem = mla_memory(spec, context)
        cache_bytes_layer = latent_cache_bytes(1, context, spec.d_l, bits)
        cache_bytes_total = latent_cache_bytes(preset.n_layers, context, spec.d_l, bits)
        # merged heads score and combine directly against d_L-wide latent rows
        step = preset.n_heads * attention_flops(1, context, spec.d_l, spec.d_l)
        formula = "N_KV*d_L + d_in*d_L + N_heads*d_L*(d_in+d_out)"
    else:
        spec = preset.mha_spec()
        mem = mha_memory(spec, context)
        cache_bytes_layer = kv_cache_bytes(1, spec.n_kv_heads, context, spec.d_head, bits)
        cache_bytes_total = kv_cache_bytes(preset.n_layers, spec.n_kv_heads, context, spec.d_head, bits)
        step = preset.n_heads * attention_flops(1, context, spec.d_qk, spec.d_head)
        formula = "N_kv*N_KV*(d_QK+d_head) + (N_heads+N_kv)*d_in*d_QK + N_kv*d_head*d_in + N_heads*d_head*d_out"
    return {
        "preset": preset.to_dict(),
        "context": context,
        "bits_per_float": bits,
        "cache_floats_per_layer": mem.cache,
        "cache_bytes_per_layer": cache_bytes_layer,
        "cache_bytes_total": cache_bytes_total,
        "weight_floats_per_layer": mem.weights,
        "weight_floats_total": mem.weights * preset.n_layers,
        "flops_per_decode_step_per_layer": step,
        "flops_per_decode_step_total": step * preset.n_layers,
        "memory_formula": formula,
        "notes": [
            "cache bytes: d is d_head per KV head (d_L for latent caches)",
            "flops: score+combine multiplies N_Q*N_KV*(d_qk+d_v), not hardware FLOPs",
        ],
    }
