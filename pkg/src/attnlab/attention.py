"""Single-head kernel attention ``Y = Z^-1 A V`` with optional masking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateRowError, MaskAlignmentError, NonFiniteError, ShapeError, SpecError
from .linalg import Matrix, as_matrix, matmul, row_softmax

_CUSTOM_KERNELS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], bool]] = {}


def register_kernel(name: str, fn: Callable[[np.ndarray], np.ndarray], positive: bool = False) -> None:
    """Register ``fn`` (applied element-wise to query-key dot products) as a named kernel."""
    _CUSTOM_KERNELS[name] = (fn, positive)


@dataclass(frozen=True)
class Kernel:
    kind: str  # "scaled_exp" | "linear" | "custom"
    d_qk: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind == "scaled_exp":
            if self.d_qk is None or self.d_qk < 1:
                raise SpecError("scaled exponential kernel needs d_qk >= 1")
        elif self.kind == "custom":
            if self.name not in _CUSTOM_KERNELS:
                raise SpecError(f"unknown custom kernel {self.name!r}")
        elif self.kind != "linear":
            raise SpecError(f"unknown kernel kind {self.kind!r}")

    @classmethod
    def scaled_exp(cls, d_qk: int) -> "Kernel":
        return cls("scaled_exp", d_qk=d_qk)

    @classmethod
    def linear(cls) -> "Kernel":
        return cls("linear")

    @classmethod
    def custom(cls, name: str) -> "Kernel":
        return cls("custom", name=name)

    @property
    def positive(self) -> bool:
        if self.kind == "scaled_exp":
            return True
        if self.kind == "custom":
            return _CUSTOM_KERNELS[self.name][1]
        return False

    def f(self, logits: np.ndarray) -> np.ndarray:
        """The scalar function applied element-wise to dot products."""
        if self.kind == "scaled_exp":
            # overflow surfaces as inf and is rejected by the callers that need finite scores
            with np.errstate(over="ignore"):
                return np.exp(logits / math.sqrt(self.d_qk))
        if self.kind == "linear":
            return np.array(logits, dtype=np.float64, copy=True)
        return np.asarray(_CUSTOM_KERNELS[self.name][0](logits), dtype=np.float64)


@dataclass(frozen=True)
class MaskPolicy:
    """Which keys each query row may see.

    ``causal`` lets query ``i`` see keys ``j <= offset + i``; with ``offset=None``
    the queries are right-aligned to the keys (``offset = n_kv - n_q``), which
    covers both full self-attention and streaming decode. ``explicit`` holds one
    allowed set of key indices (0-based) per query row.
    """

    kind: str = "none"  # "none" | "causal" | "explicit"
    offset: Optional[int] = None
    allowed: Optional[tuple[frozenset, ...]] = None

    @classmethod
    def none(cls) -> "MaskPolicy":
        return cls("none")

    @classmethod
    def causal(cls, offset: Optional[int] = None) -> "MaskPolicy":
        return cls("causal", offset=offset)

    @classmethod
    def explicit(cls, allowed: Sequence) -> "MaskPolicy":
        return cls("explicit", allowed=tuple(frozenset(int(j) for j in s) for s in allowed))

    def keep(self, n_q: int, n_kv: int) -> Optional[np.ndarray]:
        """Boolean ``n_q x n_kv`` matrix of admissible pairs, or None when unmasked."""
        if self.kind == "none":
            return None
        if self.kind == "causal":
            offset = n_kv - n_q if self.offset is None else self.offset
            if offset < 0 or offset + n_q > n_kv:
                raise MaskAlignmentError(
                    f"causal mask cannot align {n_q} queries at offset {offset} with {n_kv} keys"
                )
            return np.arange(n_kv)[None, :] <= (offset + np.arange(n_q))[:, None]
        if self.kind == "explicit":
            if self.allowed is None or len(self.allowed) != n_q:
                raise MaskAlignmentError(f"explicit mask has {0 if self.allowed is None else len(self.allowed)} rows for {n_q} queries")
            keep = np.zeros((n_q, n_kv), dtype=bool)
            for i, s in enumerate(self.allowed):
                if any(j < 0 or j >= n_kv for j in s):
                    raise MaskAlignmentError(f"mask row {i} references keys outside [0, {n_kv})")
                keep[i, sorted(s)] = True
            return keep
        raise SpecError(f"unknown mask kind {self.kind!r}")

    def additive(self, n_q: int, n_kv: int) -> np.ndarray:
        """The additive form ``M``: 0 where allowed, ``-inf`` elsewhere."""
        keep = self.keep(n_q, n_kv)
        if keep is None:
            return np.zeros((n_q, n_kv))
        return np.where(keep, 0.0, -np.inf)

    def multiplicative(self, n_q: int, n_kv: int) -> np.ndarray:
        """The multiplicative form ``M~``: indicator of admissible pairs."""
        keep = self.keep(n_q, n_kv)
        if keep is None:
            return np.ones((n_q, n_kv))
        return keep.astype(np.float64)


NO_MASK = MaskPolicy.none()


@dataclass(frozen=True)
class HeadWeights:
    wq: Matrix
    wk: Matrix
    wv: Matrix

    def __post_init__(self):
        for name in ("wq", "wk", "wv"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        if self.wq.shape[1] != self.wk.shape[1]:
            raise ShapeError(f"query width {self.wq.shape[1]} != key width {self.wk.shape[1]}")
        if not self.wq.shape[0] == self.wk.shape[0] == self.wv.shape[0]:
            raise ShapeError("wq, wk, wv must share the input dimension")

    @property
    def d_qk(self) -> int:
        return self.wq.shape[1]


def kernel_eval(kernel: Kernel, v, w) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if v.shape != w.shape:
        raise ShapeError(f"vector lengths differ: {v.size} vs {w.size}")
    if kernel.kind == "scaled_exp" and v.size != kernel.d_qk:
        raise ShapeError(f"kernel expects length {kernel.d_qk}, got {v.size}")
    return float(kernel.f(np.array(v @ w)))


def kernel_scores(logits, kernel: Kernel, mask: MaskPolicy = NO_MASK, formulation: Optional[str] = None) -> Matrix:
    """Apply ``kernel`` and ``mask`` to a matrix of query-key dot products.

    ``formulation`` selects ``"additive"`` (add ``M`` before the kernel, only
    valid for the exponential kernel) or ``"multiplicative"`` (multiply by
    ``M~`` after the kernel). Default: additive for the exponential kernel,
    multiplicative otherwise.
    """
    logits = as_matrix(logits, "logits")
    n_q, n_kv = logits.shape
    if formulation is None:
        formulation = "additive" if kernel.kind == "scaled_exp" else "multiplicative"
    if formulation == "additive":
        if kernel.kind != "scaled_exp":
            raise SpecError("the additive -inf mask is only defined for the exponential kernel")
        return kernel.f(logits + mask.additive(n_q, n_kv))
    if formulation == "multiplicative":
        return kernel.f(logits) * mask.multiplicative(n_q, n_kv)
    raise SpecError(f"unknown mask formulation {formulation!r}")


def attention_scores(q, k, kernel: Kernel, mask: MaskPolicy = NO_MASK, formulation: Optional[str] = None) -> Matrix:
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q width {q.shape[1]} != K width {k.shape[1]}")
    return kernel_scores(q @ k.T, kernel, mask, formulation)


def normalizer(a) -> np.ndarray:
    """Row sums of ``A`` (the diagonal of ``Z``); rejects non-positive sums."""
    a = as_matrix(a, "scores")
    z = a.sum(axis=1)
    bad = np.flatnonzero(~(z > 0))
    if bad.size:
        raise DegenerateRowError(f"rows {bad.tolist()} have non-positive score sums", rows=bad.tolist())
    return z


def combine(a, v) -> Matrix:
    """``Z^-1 A V`` for precomputed scores ``A``."""
    a = as_matrix(a, "scores")
    z = normalizer(a)
    return matmul(a / z[:, None], v)


def attend_projected(q, k, v, kernel: Kernel, mask: MaskPolicy = NO_MASK, formulation: Optional[str] = None) -> Matrix:
    """Attention on already-projected ``Q``, ``K``, ``V``."""
    a = attention_scores(q, k, kernel, mask, formulation)
    if not np.isfinite(a).all():
        raise NonFiniteError("attention scores overflowed; use softmax_attend for large logits")
    return combine(a, v)


def _project(xq, xk, xv, w: HeadWeights):
    xq, xk, xv = as_matrix(xq, "X^Q"), as_matrix(xk, "X^K"), as_matrix(xv, "X^V")
    d_in = w.wq.shape[0]
    if not xq.shape[1] == xk.shape[1] == xv.shape[1] == d_in:
        raise ShapeError(f"inputs have widths {xq.shape[1]}, {xk.shape[1]}, {xv.shape[1]}; weights expect {d_in}")
    if xk.shape[0] != xv.shape[0]:
        raise ShapeError("key and value inputs must have the same number of tokens")
    return matmul(xq, w.wq), matmul(xk, w.wk), matmul(xv, w.wv)


def attend(xq, xk, xv, w: HeadWeights, kernel: Kernel, mask: MaskPolicy = NO_MASK) -> Matrix:
    q, k, v = _project(xq, xk, xv, w)
    return attend_projected(q, k, v, kernel, mask)


def softmax_weights(q, k, mask: MaskPolicy = NO_MASK) -> Matrix:
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q width {q.shape[1]} != K width {k.shape[1]}")
    logits = q @ k.T / math.sqrt(q.shape[1])
    return row_softmax(logits + mask.additive(*logits.shape))


def softmax_attend(xq, xk, xv, w: HeadWeights, mask: MaskPolicy = NO_MASK) -> Matrix:
    """Scaled-exponential attention computed as ``softmax(Q K^T / sqrt(d_qk)) V``."""
    q, k, v = _project(xq, xk, xv, w)
    return softmax_weights(q, k, mask) @ v
