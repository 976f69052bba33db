"""Multi-head latent attention (MLA).

Keys and values of every head are read off one shared latent ``L = X W^L``
(``d_L`` columns), queries off a query latent ``L_Q = X W^{L_Q}``. After
merging, each head keeps ``W^{LQK}_h = W^{L_QQ}_h (W^{LK}_h)^T`` and the value
maps are folded into the output projection ``W^{LO} = blockdiag(W^{LV}_h) W^O``,
so attention runs directly against the cached latent rows.

Scores use ``exp(logits / sqrt(d_head))``, the same scaling as the
scaled-exponential kernel of plain attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import NO_MASK, Kernel, MaskPolicy, combine, kernel_scores
from .errors import ShapeError, SpecError
from .linalg import Matrix, as_matrix, block_diag, concat_cols, matmul, split_cols, truncated_svd
from .multihead import MhaSpec, MhaWeights
from .tokenizer import RopeParams, rope_rotate


@dataclass(frozen=True)
class MlaSpec:
    n_heads: int
    d_in: int
    d_l: int
    d_lq: int
    d_head: int
    d_out: int

    def __post_init__(self):
        for name in ("n_heads", "d_in", "d_l", "d_lq", "d_head", "d_out"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.d_l > self.d_in or self.d_lq > self.d_in:
            raise SpecError(f"latent dims d_l={self.d_l}, d_lq={self.d_lq} must not exceed d_in={self.d_in}")


@dataclass(frozen=True)
class MlaWeights:
    w_l: Matrix
    w_lq: Matrix
    w_lqq: list
    w_lk: list
    w_lv: list
    wo: Matrix

    def __post_init__(self):
        for name in ("w_l", "w_lq", "wo"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        for name in ("w_lqq", "w_lk", "w_lv"):
            object.__setattr__(self, name, [as_matrix(m, f"{name}[{i}]") for i, m in enumerate(getattr(self, name))])

    def check(self, spec: MlaSpec) -> None:
        expect = {"w_l": (spec.d_in, spec.d_l), "w_lq": (spec.d_in, spec.d_lq), "wo": (spec.n_heads * spec.d_head, spec.d_out)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        per_head = {"w_lqq": (spec.d_lq, spec.d_head), "w_lk": (spec.d_l, spec.d_head), "w_lv": (spec.d_l, spec.d_head)}
        for name, shape in per_head.items():
            mats = getattr(self, name)
            if len(mats) != spec.n_heads:
                raise SpecError(f"{name} has {len(mats)} heads, spec says {spec.n_heads}")
            for i, m in enumerate(mats):
                if m.shape != shape:
                    raise ShapeError(f"{name}[{i}] has shape {m.shape}, expected {shape}")

    def infer_spec(self) -> MlaSpec:
        d_in, d_l = self.w_l.shape
        spec = MlaSpec(len(self.w_lk), d_in, d_l, self.w_lq.shape[1], self.w_lk[0].shape[1], self.wo.shape[1])
        self.check(spec)
        return spec

    @classmethod
    def random(cls, spec: MlaSpec, rng: np.random.Generator) -> "MlaWeights":
        n = spec.n_heads
        return cls(
            w_l=rng.standard_normal((spec.d_in, spec.d_l)) / math.sqrt(spec.d_in),
            w_lq=rng.standard_normal((spec.d_in, spec.d_lq)) / math.sqrt(spec.d_in),
            w_lqq=[rng.standard_normal((spec.d_lq, spec.d_head)) / math.sqrt(spec.d_lq) for _ in range(n)],
            w_lk=[rng.standard_normal((spec.d_l, spec.d_head)) / math.sqrt(spec.d_l) for _ in range(n)],
            w_lv=[rng.standard_normal((spec.d_l, spec.d_head)) / math.sqrt(spec.d_l) for _ in range(n)],
            wo=rng.standard_normal((n * spec.d_head, spec.d_out)) / math.sqrt(n * spec.d_head),
        )


@dataclass(frozen=True)
class MergedMlaWeights:
    w_l: Matrix
    w_lq: Matrix
    w_lqk: list
    w_lo: Matrix

    def __post_init__(self):
        for name in ("w_l", "w_lq", "w_lo"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        object.__setattr__(self, "w_lqk", [as_matrix(m, f"w_lqk[{i}]") for i, m in enumerate(self.w_lqk)])

    def check(self, spec: MlaSpec) -> None:
        if self.w_l.shape != (spec.d_in, spec.d_l) or self.w_lq.shape != (spec.d_in, spec.d_lq):
            raise ShapeError(f"latent projections {self.w_l.shape}, {self.w_lq.shape} do not match spec")
        if len(self.w_lqk) != spec.n_heads:
            raise SpecError(f"w_lqk has {len(self.w_lqk)} heads, spec says {spec.n_heads}")
        for i, m in enumerate(self.w_lqk):
            if m.shape != (spec.d_lq, spec.d_l):
                raise ShapeError(f"w_lqk[{i}] has shape {m.shape}, expected {(spec.d_lq, spec.d_l)}")
        if self.w_lo.shape != (spec.n_heads * spec.d_l, spec.d_out):
            raise ShapeError(f"w_lo has shape {self.w_lo.shape}, expected {(spec.n_heads * spec.d_l, spec.d_out)}")


@dataclass(frozen=True)
class RopeProjections:
    """Non-latent positional parts: per-head query maps from ``L_Q`` and one key map from ``X``."""

    w_qr: list  # n_heads matrices d_lq x d_rope
    w_kr: Matrix  # d_in x d_rope, shared by all heads

    def __post_init__(self):
        object.__setattr__(self, "w_qr", [as_matrix(m, f"w_qr[{i}]") for i, m in enumerate(self.w_qr)])
        object.__setattr__(self, "w_kr", as_matrix(self.w_kr, "w_kr"))

    @property
    def d_rope(self) -> int:
        return self.w_kr.shape[1]

    def check(self, spec: MlaSpec) -> None:
        if self.d_rope % 2:
            raise ShapeError(f"rope width must be even, got {self.d_rope}")
        if self.w_kr.shape[0] != spec.d_in:
            raise ShapeError(f"w_kr has {self.w_kr.shape[0]} rows, expected d_in={spec.d_in}")
        if len(self.w_qr) != spec.n_heads:
            raise SpecError(f"w_qr has {len(self.w_qr)} heads, spec says {spec.n_heads}")
        for i, m in enumerate(self.w_qr):
            if m.shape != (spec.d_lq, self.d_rope):
                raise ShapeError(f"w_qr[{i}] has shape {m.shape}, expected {(spec.d_lq, self.d_rope)}")

    @classmethod
    def random(cls, spec: MlaSpec, d_rope: int, rng: np.random.Generator) -> "RopeProjections":
        return cls(
            w_qr=[rng.standard_normal((spec.d_lq, d_rope)) / math.sqrt(spec.d_lq) for _ in range(spec.n_heads)],
            w_kr=rng.standard_normal((spec.d_in, d_rope)) / math.sqrt(spec.d_in),
        )

    @classmethod
    def zeros(cls, spec: MlaSpec, d_rope: int) -> "RopeProjections":
        return cls([np.zeros((spec.d_lq, d_rope)) for _ in range(spec.n_heads)], np.zeros((spec.d_in, d_rope)))


def merge_weights(w: MlaWeights) -> MergedMlaWeights:
    spec = w.infer_spec()
    w_lqk = [matmul(w.w_lqq[h], w.w_lk[h].T) for h in range(spec.n_heads)]
    w_lo = matmul(block_diag(w.w_lv), w.wo)
    return MergedMlaWeights(w.w_l, w.w_lq, w_lqk, w_lo)


def _check_input(x, spec: MlaSpec) -> Matrix:
    x = as_matrix(x, "X")
    if x.shape[1] != spec.d_in:
        raise ShapeError(f"input width {x.shape[1]} != d_in {spec.d_in}")
    return x


def mla_attend(
    lq,
    latent,
    w: MergedMlaWeights,
    spec: MlaSpec,
    mask: MaskPolicy = NO_MASK,
    scale_dim: Optional[int] = None,
    q_rope: Optional[list] = None,
    k_rope: Optional[Matrix] = None,
) -> Matrix:
    """Merged-weight attention of query latents ``lq`` against latent rows ``latent``.

    ``q_rope`` (per head) and ``k_rope`` are already-rotated positional parts
    whose dot products are added to the latent logits.
    """
    kernel = Kernel.scaled_exp(scale_dim or spec.d_head)
    outs = []
    for h in range(spec.n_heads):
        logits = matmul(matmul(lq, w.w_lqk[h]), latent.T)
        if q_rope is not None:
            logits = logits + matmul(q_rope[h], k_rope.T)
        outs.append(combine(kernel_scores(logits, kernel, mask), latent))
    return matmul(concat_cols(outs), w.w_lo)


def mla_forward(x, w: MergedMlaWeights, spec: MlaSpec, mask: MaskPolicy = NO_MASK, scale_dim: Optional[int] = None) -> Matrix:
    """Latent self-attention: ``concat_col(Z_h^-1 A_h L) W^{LO}``.

    ``scale_dim`` overrides the ``d_head`` under the square root.
    """
    w.check(spec)
    x = _check_input(x, spec)
    latent = matmul(x, w.w_l)  # computed once, shared by every head
    lq = matmul(x, w.w_lq)
    return mla_attend(lq, latent, w, spec, mask, scale_dim)


def mla_forward_unmerged(
    x,
    w: MlaWeights,
    spec: MlaSpec,
    mask: MaskPolicy = NO_MASK,
    rope: Optional[RopeParams] = None,
    start: int = 0,
) -> Matrix:
    """Two-stage path: form ``Q_h``, ``K_h``, ``V_h`` from the latents, then attend.

    With ``rope`` set, per-head queries and keys are rotated by position
    before the dot product, which is what blocks weight merging.
    """
    w.check(spec)
    x = _check_input(x, spec)
    latent = matmul(x, w.w_l)
    lq = matmul(x, w.w_lq)
    kernel = Kernel.scaled_exp(spec.d_head)
    pos = start + np.arange(x.shape[0])
    outs = []
    for h in range(spec.n_heads):
        q = matmul(lq, w.w_lqq[h])
        k = matmul(latent, w.w_lk[h])
        if rope is not None:
            q, k = rope_rotate(q, pos, rope), rope_rotate(k, pos, rope)
        outs.append(combine(kernel_scores(matmul(q, k.T), kernel, mask), matmul(latent, w.w_lv[h])))
    return matmul(concat_cols(outs), w.wo)


def mla_forward_naive_rope(x, w: MergedMlaWeights, spec: MlaSpec, base: float = 10000.0, mask: MaskPolicy = NO_MASK, start: int = 0) -> Matrix:
    """Merged path with RoPE pushed onto the latents themselves.

    This is the tempting shortcut that keeps merged weights; it does not
    reproduce per-head RoPE on ``Q_h``/``K_h`` and exists to demonstrate that.
    """
    w.check(spec)
    x = _check_input(x, spec)
    pos = start + np.arange(x.shape[0])
    latent = matmul(x, w.w_l)
    lq = rope_rotate(matmul(x, w.w_lq), pos, RopeParams(spec.d_lq, base))
    latent_r = rope_rotate(latent, pos, RopeParams(spec.d_l, base))
    kernel = Kernel.scaled_exp(spec.d_head)
    outs = []
    for h in range(spec.n_heads):
        logits = matmul(matmul(lq, w.w_lqk[h]), latent_r.T)
        outs.append(combine(kernel_scores(logits, kernel, mask), latent))
    return matmul(concat_cols(outs), w.w_lo)


def rope_parts(x, lq, rope_w: RopeProjections, params: RopeParams, q_start: int, kv_start: int):
    """Rotated per-head query parts (from ``lq``) and shared key part (from ``x``)."""
    q_pos = q_start + np.arange(lq.shape[0])
    k_pos = kv_start + np.arange(x.shape[0])
    q_rope = [rope_rotate(matmul(lq, wq), q_pos, params) for wq in rope_w.w_qr]
    k_rope = rope_rotate(matmul(x, rope_w.w_kr), k_pos, params)
    return q_rope, k_rope


def mla_forward_decoupled_rope(
    x,
    w: MergedMlaWeights,
    rope_w: RopeProjections,
    params: RopeParams,
    spec: MlaSpec,
    mask: MaskPolicy = NO_MASK,
    start: int = 0,
) -> Matrix:
    """Latent attention plus a separate RoPE'd query/key part of width ``d_rope``.

    Logits are ``(L_Q W^{LQK}_h L^T + R(q_h) R(k)^T) / sqrt(d_head + d_rope)``;
    the latent part stays mergeable and the rotated key part is cached next to ``L``.
    """
    w.check(spec)
    rope_w.check(spec)
    x = _check_input(x, spec)
    d_rope = rope_w.d_rope
    latent = matmul(x, w.w_l)
    lq = matmul(x, w.w_lq)
    if d_rope == 0:
        return mla_attend(lq, latent, w, spec, mask, spec.d_head)
    if params.head_dim != d_rope:
        raise ShapeError(f"RoPE params width {params.head_dim} != d_rope {d_rope}")
    q_rope, k_rope = rope_parts(x, lq, rope_w, params, start, start)
    return mla_attend(lq, latent, w, spec, mask, spec.d_head + d_rope, q_rope, k_rope)


def expand_to_mha(w: MlaWeights) -> tuple[MhaWeights, MhaSpec]:
    """Explicit per-head weights ``W^Q_h = W^{L_Q} W^{L_QQ}_h`` etc. of the equivalent MHA."""
    spec = w.infer_spec()
    mha = MhaWeights(
        wq=[matmul(w.w_lq, m) for m in w.w_lqq],
        wk=[matmul(w.w_l, m) for m in w.w_lk],
        wv=[matmul(w.w_l, m) for m in w.w_lv],
        wo=w.wo,
    )
    return mha, MhaSpec(spec.n_heads, spec.n_heads, spec.d_in, spec.d_head, spec.d_head, spec.d_out)


def lift_mha(w: MhaWeights, spec: MhaSpec) -> tuple[MergedMlaWeights, MlaSpec]:
    """Merged MLA weights with identity latents (``d_L = d_in``) reproducing an MHA."""
    if spec.n_kv_heads != spec.n_heads:
        raise SpecError("lifting needs one KV head per query head")
    if spec.d_qk != spec.d_head:
        raise SpecError("latent attention assumes d_qk == d_head")
    w.check(spec)
    eye = np.eye(spec.d_in)
    merged = MergedMlaWeights(
        w_l=eye,
        w_lq=eye,
        w_lqk=[matmul(wq, wk.T) for wq, wk in zip(w.wq, w.wk)],
        w_lo=matmul(block_diag(w.wv), w.wo),
    )
    return merged, MlaSpec(spec.n_heads, spec.d_in, spec.d_in, spec.d_in, spec.d_head, spec.d_out)


def _low_rank(m: Matrix, rank: int) -> tuple[Matrix, Matrix]:
    """``m ~ left @ right`` with ``left`` having ``rank`` columns (zero-padded past min(m.shape))."""
    r = min(rank, *m.shape)
    u, s, vt = truncated_svd(m, r)
    left = np.zeros((m.shape[0], rank))
    right = np.zeros((rank, m.shape[1]))
    left[:, :r] = u
    right[:r] = s[:, None] * vt
    return left, right


def factorize_mha_to_mla(w: MhaWeights, d_l: int, d_lq: int) -> tuple[MlaWeights, float]:
    """Low-rank latent factorization of an MHA weight set.

    ``[W^K | W^V]`` (all heads stacked) is factored at rank ``d_l`` so one
    ``W^L`` serves keys and values; ``W^Q`` is factored at rank ``d_lq``.
    Returns the latent weights and the combined Frobenius reconstruction error
    ``sqrt(||[W^K|W^V] - W^L W^{LKV}||^2 + ||W^Q - W^{L_Q} W^{L_QQ}||^2)``.
    """
    spec = w.infer_spec()
    if spec.n_kv_heads != spec.n_heads:
        raise SpecError("factorization needs n_kv_heads == n_heads; expand the KV heads first")
    if spec.d_qk != spec.d_head:
        raise SpecError("latent attention assumes d_qk == d_head")
    if not 1 <= d_l <= spec.d_in or not 1 <= d_lq <= spec.d_in:
        raise ValueError(f"latent dims must lie in [1, {spec.d_in}], got d_l={d_l}, d_lq={d_lq}")
    n, d = spec.n_heads, spec.d_head
    kv = concat_cols([concat_cols(w.wk), concat_cols(w.wv)])
    q = concat_cols(w.wq)
    w_l, lkv = _low_rank(kv, d_l)
    w_lq, lqq = _low_rank(q, d_lq)
    err = math.hypot(np.linalg.norm(kv - w_l @ lkv), np.linalg.norm(q - w_lq @ lqq))
    blocks = split_cols(lkv, [d] * (2 * n))
    latent = MlaWeights(
        w_l=w_l,
        w_lq=w_lq,
        w_lqq=split_cols(lqq, [d] * n),
        w_lk=blocks[:n],
        w_lv=blocks[n:],
        wo=w.wo,
    )
    return latent, float(err)
