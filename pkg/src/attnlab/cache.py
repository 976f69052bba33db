"""Append-only KV and latent caches and cached (streaming) decode.

Projections of new tokens are computed one row at a time, so the cache
contents do not depend on how a sequence was split into appends.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .attention import MaskPolicy
from .errors import ShapeError
from .latent import MergedMlaWeights, MlaSpec, RopeProjections, mla_attend
from .linalg import Matrix, as_matrix
from .multihead import MhaSpec, MhaWeights, attend_heads
from .tokenizer import RopeParams, rope_rotate


class RowStore:
    """Growable row buffer with geometric reallocation; exposes read-only views."""

    def __init__(self, width: int, capacity: int = 8):
        self._buf = np.empty((max(capacity, 1), width))
        self._n = 0

    def __len__(self) -> int:
        return self._n

    @property
    def width(self) -> int:
        return self._buf.shape[1]

    def extend(self, rows: np.ndarray) -> None:
        if rows.shape[1] != self.width:
            raise ShapeError(f"rows of width {rows.shape[1]} into a store of width {self.width}")
        need = self._n + rows.shape[0]
        if need > self._buf.shape[0]:
            cap = self._buf.shape[0]
            while cap < need:
                cap *= 2
            grown = np.empty((cap, self.width))
            grown[:self._n] = self._buf[:self._n]
            self._buf = grown
        self._buf[self._n:need] = rows
        self._n = need

    def view(self) -> Matrix:
        v = self._buf[:self._n]
        v.flags.writeable = False
        return v


def _rowwise(x: Matrix, w: Matrix) -> Matrix:
    # one vector-matrix product per row keeps results independent of batching
    if x.shape[0] == 0:
        return np.zeros((0, w.shape[1]))
    return np.stack([row @ w for row in x])


class KvCache:
    """Per-KV-head key and value rows for every token seen so far.

    Keys are stored after RoPE (at their absolute positions) when ``rope`` is set.
    """

    def __init__(self, spec: MhaSpec, rope: Optional[RopeParams] = None):
        self.spec = spec
        self.rope = rope
        self._keys = [RowStore(spec.d_qk) for _ in range(spec.n_kv_heads)]
        self._values = [RowStore(spec.d_head) for _ in range(spec.n_kv_heads)]

    def __len__(self) -> int:
        return len(self._keys[0])

    @property
    def length(self) -> int:
        return len(self)

    @property
    def keys(self) -> list[Matrix]:
        return [s.view() for s in self._keys]

    @property
    def values(self) -> list[Matrix]:
        return [s.view() for s in self._values]

    def append(self, new_tokens, weights: MhaWeights) -> "KvCache":
        x = as_matrix(new_tokens, "new tokens")
        if x.shape[1] != self.spec.d_in:
            raise ShapeError(f"token width {x.shape[1]} != d_in {self.spec.d_in}")
        weights.check(self.spec)
        pos = self.length + np.arange(x.shape[0])
        for g in range(self.spec.n_kv_heads):
            k = _rowwise(x, weights.wk[g])
            if self.rope is not None:
                k = rope_rotate(k, pos, self.rope)
            self._keys[g].extend(k)
            self._values[g].extend(_rowwise(x, weights.wv[g]))
        return self


class LatentCache:
    """One latent row per token shared by all heads, plus optional rotated key parts."""

    def __init__(self, spec: MlaSpec, rope_w: Optional[RopeProjections] = None, rope: Optional[RopeParams] = None):
        if (rope_w is None) != (rope is None):
            raise ValueError("rope projections and RoPE params go together")
        self.spec = spec
        self.rope_w = rope_w
        self.rope = rope
        self._latent = RowStore(spec.d_l)
        self._rope_keys = RowStore(rope_w.d_rope) if rope_w is not None else None

    def __len__(self) -> int:
        return len(self._latent)

    @property
    def length(self) -> int:
        return len(self)

    @property
    def latent(self) -> Matrix:
        return self._latent.view()

    @property
    def rope_keys(self) -> Optional[Matrix]:
        return None if self._rope_keys is None else self._rope_keys.view()

    def append(self, new_tokens, weights: MergedMlaWeights) -> "LatentCache":
        x = as_matrix(new_tokens, "new tokens")
        if x.shape[1] != self.spec.d_in:
            raise ShapeError(f"token width {x.shape[1]} != d_in {self.spec.d_in}")
        weights.check(self.spec)
        pos = self.length + np.arange(x.shape[0])
        self._latent.extend(_rowwise(x, weights.w_l))
        if self._rope_keys is not None:
            self._rope_keys.extend(rope_rotate(_rowwise(x, self.rope_w.w_kr), pos, self.rope))
        return self


Cache = Union[KvCache, LatentCache]


def cache_append(cache: Cache, new_tokens, weights) -> Cache:
    return cache.append(new_tokens, weights)


def streaming_decode_step(cache: Cache, query_tokens, weights, spec=None):
    """Attend ``query_tokens`` (the newest tokens) against everything cached, then keep their K/V.

    New query ``i`` sees all cached tokens and new tokens up to itself. The
    queries themselves are not retained. Returns ``(output, cache)``.
    """
    x = as_matrix(query_tokens, "query tokens")
    spec = spec or cache.spec
    offset = cache.length
    cache.append(x, weights)
    mask = MaskPolicy.causal(offset)
    pos = offset + np.arange(x.shape[0])
    if isinstance(cache, KvCache):
        q_heads = [_rowwise(x, wq) for wq in weights.wq]
        if cache.rope is not None:
            q_heads = [rope_rotate(q, pos, cache.rope) for q in q_heads]
        return attend_heads(q_heads, cache.keys, cache.values, weights.wo, spec, mask), cache
    lq = _rowwise(x, weights.w_lq)
    if cache.rope_w is None:
        return mla_attend(lq, cache.latent, weights, spec, mask), cache
    q_rope = [rope_rotate(_rowwise(lq, wq), pos, cache.rope) for wq in cache.rope_w.w_qr]
    scale = spec.d_head + cache.rope_w.d_rope
    return mla_attend(lq, cache.latent, weights, spec, mask, scale, q_rope, cache.rope_keys), cache


def decode_sequence(cache: Cache, tokens, weights, chunk: int = 1) -> Matrix:
    """Feed ``tokens`` through ``streaming_decode_step`` ``chunk`` rows at a time; stack the outputs."""
    x = as_matrix(tokens, "tokens")
    outs = []
    for start in range(0, x.shape[0], chunk):
        y, cache = streaming_decode_step(cache, x[start:start + chunk], weights)
        outs.append(y)
    if not outs:
        d_out = weights.wo.shape[1] if isinstance(cache, KvCache) else weights.w_lo.shape[1]
        return np.zeros((0, d_out))
    return np.concatenate(outs, axis=0)
