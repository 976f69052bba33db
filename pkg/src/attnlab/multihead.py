"""Multi-head, grouped-query and multi-query attention with output projection.

Query head ``h`` (0-based) reads KV head ``h // group`` where
``group = n_heads // n_kv_heads``: contiguous blocks of query heads share one
KV head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import NO_MASK, Kernel, MaskPolicy, attention_scores, combine
from .errors import ShapeError, SpecError
from .linalg import Matrix, as_matrix, concat_cols, matmul
from .tokenizer import RopeParams, rope_rotate


@dataclass(frozen=True)
class MhaSpec:
    n_heads: int
    n_kv_heads: int
    d_in: int
    d_qk: int
    d_head: int
    d_out: int
    kernel: Optional[Kernel] = None

    def __post_init__(self):
        for name in ("n_heads", "n_kv_heads", "d_in", "d_qk", "d_head", "d_out"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.n_heads % self.n_kv_heads:
            raise SpecError(f"n_kv_heads={self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if self.kernel is None:
            object.__setattr__(self, "kernel", Kernel.scaled_exp(self.d_qk))

    @classmethod
    def square(cls, n_heads: int, d_model: int, n_kv_heads: Optional[int] = None, d_head: Optional[int] = None, kernel=None) -> "MhaSpec":
        """Spec with ``d_in = d_out = d_model`` and ``d_qk = d_head``."""
        d_head = d_head or d_model // n_heads
        return cls(n_heads, n_kv_heads or n_heads, d_model, d_head, d_head, d_model, kernel)

    @property
    def group(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def kind(self) -> str:
        if self.n_kv_heads == self.n_heads:
            return "mha"
        return "mqa" if self.n_kv_heads == 1 else "gqa"

    def kv_head(self, h: int) -> int:
        return h // self.group


@dataclass(frozen=True)
class MhaWeights:
    wq: list
    wk: list
    wv: list
    wo: Matrix

    def __post_init__(self):
        object.__setattr__(self, "wq", [as_matrix(m, f"wq[{i}]") for i, m in enumerate(self.wq)])
        object.__setattr__(self, "wk", [as_matrix(m, f"wk[{i}]") for i, m in enumerate(self.wk)])
        object.__setattr__(self, "wv", [as_matrix(m, f"wv[{i}]") for i, m in enumerate(self.wv)])
        object.__setattr__(self, "wo", as_matrix(self.wo, "wo"))

    def check(self, spec: MhaSpec) -> None:
        if len(self.wq) != spec.n_heads:
            raise SpecError(f"{len(self.wq)} query heads, spec says {spec.n_heads}")
        if len(self.wk) != spec.n_kv_heads or len(self.wv) != spec.n_kv_heads:
            raise SpecError(f"{len(self.wk)}/{len(self.wv)} key/value heads, spec says {spec.n_kv_heads}")
        expect = {
            "wq": (spec.d_in, spec.d_qk),
            "wk": (spec.d_in, spec.d_qk),
            "wv": (spec.d_in, spec.d_head),
        }
        for name, shape in expect.items():
            for i, m in enumerate(getattr(self, name)):
                if m.shape != shape:
                    raise ShapeError(f"{name}[{i}] has shape {m.shape}, expected {shape}")
        if self.wo.shape != (spec.n_heads * spec.d_head, spec.d_out):
            raise ShapeError(f"wo has shape {self.wo.shape}, expected {(spec.n_heads * spec.d_head, spec.d_out)}")

    def infer_spec(self, kernel: Optional[Kernel] = None) -> MhaSpec:
        n_heads = len(self.wq)
        d_in, d_qk = self.wq[0].shape
        d_head = self.wv[0].shape[1]
        spec = MhaSpec(n_heads, len(self.wk), d_in, d_qk, d_head, self.wo.shape[1], kernel)
        self.check(spec)
        return spec

    @classmethod
    def random(cls, spec: MhaSpec, rng: np.random.Generator, scale: Optional[float] = None) -> "MhaWeights":
        s = 1.0 / np.sqrt(spec.d_in) if scale is None else scale
        return cls(
            wq=[s * rng.standard_normal((spec.d_in, spec.d_qk)) for _ in range(spec.n_heads)],
            wk=[s * rng.standard_normal((spec.d_in, spec.d_qk)) for _ in range(spec.n_kv_heads)],
            wv=[s * rng.standard_normal((spec.d_in, spec.d_head)) for _ in range(spec.n_kv_heads)],
            wo=rng.standard_normal((spec.n_heads * spec.d_head, spec.d_out)) / np.sqrt(spec.n_heads * spec.d_head),
        )

    def scaled_output(self, c: float) -> "MhaWeights":
        return MhaWeights(self.wq, self.wk, self.wv, c * self.wo)


def stacked_weights(w: MhaWeights) -> tuple[Matrix, Matrix, Matrix]:
    """Column-wise concatenations ``(W^Q_1 ... W^Q_n)`` etc."""
    return concat_cols(w.wq), concat_cols(w.wk), concat_cols(w.wv)


def project_kv(xkv, w: MhaWeights, spec: MhaSpec, rope: Optional[RopeParams] = None, kv_start: int = 0):
    """Per-KV-head key and value matrices; keys rotated at absolute positions when ``rope`` is set."""
    xkv = as_matrix(xkv, "X^KV")
    if xkv.shape[1] != spec.d_in:
        raise ShapeError(f"key/value input width {xkv.shape[1]} != d_in {spec.d_in}")
    keys = [matmul(xkv, wk) for wk in w.wk]
    if rope is not None:
        pos = kv_start + np.arange(xkv.shape[0])
        keys = [rope_rotate(k, pos, rope) for k in keys]
    values = [matmul(xkv, wv) for wv in w.wv]
    return keys, values


def attend_heads(q_heads, keys, values, wo, spec: MhaSpec, mask: MaskPolicy = NO_MASK, return_scores: bool = False):
    """Combine per-head queries with (shared) KV heads and project through ``wo``."""
    outs, scores = [], []
    for h, q in enumerate(q_heads):
        g = spec.kv_head(h)
        a = attention_scores(q, keys[g], spec.kernel, mask)
        outs.append(combine(a, values[g]))
        scores.append(a)
    y = matmul(concat_cols(outs), wo)
    return (y, scores) if return_scores else y


def mha_forward(
    xq,
    xkv,
    w: MhaWeights,
    spec: MhaSpec,
    mask: MaskPolicy = NO_MASK,
    rope: Optional[RopeParams] = None,
    q_start: Optional[int] = None,
    kv_start: int = 0,
    return_scores: bool = False,
):
    """``concat_col(Z_h^-1 A_h V_h) W^O`` with queries from ``xq`` and keys/values from ``xkv``.

    With ``rope`` set, query and key rows are rotated by their absolute
    positions. Keys start at ``kv_start``; queries default to being
    right-aligned with the keys. ``return_scores`` also returns the per-head
    score matrices ``A_h`` for inspection.
    """
    w.check(spec)
    xq = as_matrix(xq, "X^Q")
    if xq.shape[1] != spec.d_in:
        raise ShapeError(f"query input width {xq.shape[1]} != d_in {spec.d_in}")
    xkv = as_matrix(xkv, "X^KV")
    keys, values = project_kv(xkv, w, spec, rope, kv_start)
    q_heads = [matmul(xq, wq) for wq in w.wq]
    if rope is not None:
        start = kv_start + xkv.shape[0] - xq.shape[0] if q_start is None else q_start
        pos = start + np.arange(xq.shape[0])
        q_heads = [rope_rotate(q, pos, rope) for q in q_heads]
    return attend_heads(q_heads, keys, values, w.wo, spec, mask, return_scores)


def self_attention(x, w: MhaWeights, spec: MhaSpec, mask: MaskPolicy = NO_MASK, rope: Optional[RopeParams] = None, start: int = 0, return_scores: bool = False):
    return mha_forward(x, x, w, spec, mask, rope=rope, q_start=start, kv_start=start, return_scores=return_scores)


def expand_kv_heads(w: MhaWeights, spec: MhaSpec) -> tuple[MhaWeights, MhaSpec]:
    """Equivalent plain-MHA weights with every KV head duplicated across its query group."""
    w.check(spec)
    wk = [w.wk[spec.kv_head(h)] for h in range(spec.n_heads)]
    wv = [w.wv[spec.kv_head(h)] for h in range(spec.n_heads)]
    full = MhaSpec(spec.n_heads, spec.n_heads, spec.d_in, spec.d_qk, spec.d_head, spec.d_out, spec.kernel)
    return MhaWeights(list(w.wq), wk, wv, w.wo), full
