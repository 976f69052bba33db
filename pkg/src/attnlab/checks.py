"""Seeded end-to-end equivalence checks driven by ``attnlab check``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import accounting as acc
from .attention import HeadWeights, Kernel, MaskPolicy, attend, attention_scores, softmax_attend
from .blocks import GptModel, LayerConfig, NormParams, decoder_layer, gpt_forward, layer_norm, rms_norm
from .cache import KvCache, LatentCache, decode_sequence
from .latent import (
    MlaSpec,
    MlaWeights,
    RopeProjections,
    expand_to_mha,
    factorize_mha_to_mla,
    merge_weights,
    mla_forward,
    mla_forward_decoupled_rope,
    mla_forward_naive_rope,
    mla_forward_unmerged,
)
from .multihead import MhaSpec, MhaWeights, expand_kv_heads, mha_forward, self_attention
from .tokenizer import RopeParams

# published preset cells: layers, heads, kv heads, hidden dim, kv dim
TABLE3 = {
    "llama3-70b": (80, 64, 8, 8192, 128),
    "gemma3-27b": (62, 32, 16, 5376, 128),
    "deepseek-v2": (60, 128, None, 5120, 512),
}
LLAMA_CACHE_BYTES_8K_FP16 = 2_684_354_560


@dataclass
class Result:
    name: str
    deviation: float
    tol: float
    passed: bool
    detail: str = ""
    mode: str = "<"  # "<": deviation must stay below tol; ">": must exceed it

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} max_dev={self.deviation:.3e}  need {self.mode} {self.tol:.0e}  {self.detail}".rstrip()

    def as_dict(self) -> dict:
        return {"name": self.name, "deviation": self.deviation, "tol": self.tol, "passed": self.passed, "mode": self.mode, "detail": self.detail}


@dataclass
class Tracker:
    """Running maximum of absolute deviations."""

    worst: float = 0.0
    count: int = 0

    def add(self, a, b) -> None:
        a, b = np.asarray(a), np.asarray(b)
        if a.shape != b.shape:
            self.worst = math.inf
        elif a.size:
            self.worst = max(self.worst, float(np.max(np.abs(a - b))))
        self.count += 1


def _below(name, t: Tracker, tol, detail="") -> Result:
    return Result(name, t.worst, tol, t.worst < tol, detail or f"({t.count} comparisons)")


def _randint(rng, lo, hi) -> int:
    return int(rng.integers(lo, hi + 1))


def check_softmax_identity(rng, sizes: int, instances: int = 100) -> Result:
    t = Tracker()
    for _ in range(instances):
        n_q, n_kv = _randint(rng, 1, sizes), _randint(rng, 1, sizes)
        d_in, d_qk, d_v = (_randint(rng, 1, 16) for _ in range(3))
        w = HeadWeights(*(rng.standard_normal((d_in, d)) / math.sqrt(d_in) for d in (d_qk, d_qk, d_v)))
        xq, xkv = rng.standard_normal((n_q, d_in)), rng.standard_normal((n_kv, d_in))
        t.add(attend(xq, xkv, xkv, w, Kernel.scaled_exp(d_qk)), softmax_attend(xq, xkv, xkv, w))
    return _below("softmax-identity", t, 1e-12)


def _random_subsets(rng, n_q, n_kv):
    sets = []
    for _ in range(n_q):
        s = {j for j in range(n_kv) if rng.random() < 0.5}
        sets.append(s or {int(rng.integers(n_kv))})
    return MaskPolicy.explicit(sets)


def check_mask_equivalence(rng, sizes: int, instances: int = 50) -> Result:
    t = Tracker()
    for i in range(instances):
        n_kv = _randint(rng, 1, sizes)
        n_q = _randint(rng, 1, n_kv)
        d = _randint(rng, 1, 16)
        q, k = rng.standard_normal((n_q, d)), rng.standard_normal((n_kv, d))
        mask = MaskPolicy.causal() if i % 2 == 0 else _random_subsets(rng, n_q, n_kv)
        kern = Kernel.scaled_exp(d)
        t.add(attention_scores(q, k, kern, mask, "additive"), attention_scores(q, k, kern, mask, "multiplicative"))
    return _below("mask-equivalence", t, 1e-12)


def check_prefix_stability(rng, sizes: int) -> Result:
    t = Tracker()
    d, n = 8, sizes
    for placement in ("post", "pre"):
        cfg = LayerConfig.random(d, 2, rng, placement)
        x = rng.standard_normal((n, d))
        full = decoder_layer(x, None, cfg)
        for p in range(1, n):
            t.add(decoder_layer(x[:p], None, cfg), full[:p])
    model = GptModel.random(11, d, 2, 3, seed=int(rng.integers(2**31)), n_kv_heads=1)
    tokens = rng.integers(0, 11, size=n).tolist()
    full = gpt_forward(tokens, model)
    for p in range(1, n):
        t.add(gpt_forward(tokens[:p], model), full[:p])
    return _below("causal-prefix", t, 1e-10)


def check_gqa(rng, sizes: int) -> Result:
    t = Tracker()
    for n_kv_heads in (4, 2, 1):
        spec = MhaSpec(4, n_kv_heads, 8, 4, 4, 8)
        for _ in range(5):
            w = MhaWeights.random(spec, rng)
            n = _randint(rng, 1, sizes)
            xq, xkv = rng.standard_normal((n, 8)), rng.standard_normal((_randint(rng, 1, sizes), 8))
            w_full, spec_full = expand_kv_heads(w, spec)
            t.add(mha_forward(xq, xkv, w, spec), mha_forward(xq, xkv, w_full, spec_full))
    return _below("gqa-duplication", t, 1e-12)


def check_streaming(rng, sizes: int) -> Result:
    t = Tracker()
    n = 2 * sizes
    d = 8
    causal = MaskPolicy.causal()
    for n_kv_heads in (4, 2):
        spec = MhaSpec(4, n_kv_heads, d, 4, 4, d)
        w = MhaWeights.random(spec, rng)
        x = rng.standard_normal((n, d))
        full = self_attention(x, w, spec, causal)
        t.add(decode_sequence(KvCache(spec), x, w), full)
        rope = RopeParams(4)
        t.add(decode_sequence(KvCache(spec, rope), x, w, chunk=3), self_attention(x, w, spec, causal, rope=rope))
    mspec = MlaSpec(3, d, 4, 6, 4, d)
    mw = merge_weights(MlaWeights.random(mspec, rng))
    x = rng.standard_normal((n, d))
    t.add(decode_sequence(LatentCache(mspec), x, mw), mla_forward(x, mw, mspec, causal))
    rw, rp = RopeProjections.random(mspec, 2, rng), RopeParams(2)
    t.add(decode_sequence(LatentCache(mspec, rw, rp), x, mw), mla_forward_decoupled_rope(x, mw, rw, rp, mspec, causal))
    return _below("streaming-equals-full", t, 1e-10)


def planted_mha(rng, n_heads: int, d_in: int, d_head: int, d_l: int, d_lq: int) -> tuple[MhaWeights, MhaSpec]:
    """MHA weights whose stacked K/V (and Q) matrices have rank ``d_l`` (and ``d_lq``)."""
    g, gq = rng.standard_normal((d_in, d_l)), rng.standard_normal((d_in, d_lq))
    s = 1.0 / math.sqrt(d_in * max(d_l, d_lq))
    spec = MhaSpec(n_heads, n_heads, d_in, d_head, d_head, d_in)
    w = MhaWeights(
        wq=[s * gq @ rng.standard_normal((d_lq, d_head)) for _ in range(n_heads)],
        wk=[s * g @ rng.standard_normal((d_l, d_head)) for _ in range(n_heads)],
        wv=[s * g @ rng.standard_normal((d_l, d_head)) for _ in range(n_heads)],
        wo=rng.standard_normal((n_heads * d_head, d_in)) / math.sqrt(n_heads * d_head),
    )
    return w, spec


def check_mla_equals_mha(rng, sizes: int) -> list[Result]:
    t = Tracker()
    causal = MaskPolicy.causal()
    for _ in range(5):
        spec = MlaSpec(3, 10, 4, 5, 4, 10)
        w = MlaWeights.random(spec, rng)
        mha_w, mha_spec = expand_to_mha(w)
        x = rng.standard_normal((_randint(rng, 1, sizes), 10))
        t.add(mla_forward(x, merge_weights(w), spec, causal), self_attention(x, mha_w, mha_spec, causal))
    w, spec = planted_mha(rng, 2, 10, 4, 3, 5)
    latent, err = factorize_mha_to_mla(w, 3, 5)
    lspec = latent.infer_spec()
    x = rng.standard_normal((max(sizes, 1), 10))
    fwd = Tracker()
    fwd.add(mla_forward(x, merge_weights(latent), lspec, causal), self_attention(x, w, spec, causal))
    return [
        _below("mla-equals-mha", t, 1e-10),
        Result("planted-factorization", max(err, fwd.worst), 1e-8, err < 1e-8 and fwd.worst < 1e-8,
               f"(reconstruction {err:.3e}, forward {fwd.worst:.3e})"),
    ]


def check_merge(rng, sizes: int) -> Result:
    t = Tracker()
    for causal in (MaskPolicy.causal(), MaskPolicy.none()):
        spec = MlaSpec(4, 12, 6, 8, 3, 12)
        w = MlaWeights.random(spec, rng)
        x = rng.standard_normal((_randint(rng, 1, sizes), 12))
        t.add(mla_forward(x, merge_weights(w), spec, causal), mla_forward_unmerged(x, w, spec, causal))
    return _below("merge-soundness", t, 1e-10)


def _naive_rope_gap(rng, sizes: int) -> Tracker:
    t = Tracker()
    spec = MlaSpec(2, 8, 4, 6, 4, 8)
    for _ in range(5):
        w = MlaWeights.random(spec, rng)
        n = max(sizes, 2)
        x = rng.standard_normal((n, 8))
        mask = MaskPolicy.causal()
        t.add(mla_forward_naive_rope(x, merge_weights(w), spec, 10000.0, mask, start=3),
              mla_forward_unmerged(x, w, spec, mask, rope=RopeParams(4), start=3))
    return t


def check_rope(rng, sizes: int) -> list[Result]:
    gap = _naive_rope_gap(rng, sizes)
    shift = Tracker()
    spec = MlaSpec(2, 8, 4, 6, 4, 8)
    w = merge_weights(MlaWeights.random(spec, rng))
    rw = RopeProjections.random(spec, 2, rng)
    x = rng.standard_normal((max(sizes, 1), 8))
    base = mla_forward_decoupled_rope(x, w, rw, RopeParams(2), spec, MaskPolicy.causal(), start=0)
    for s in (1, 7, 100):
        shift.add(mla_forward_decoupled_rope(x, w, rw, RopeParams(2), spec, MaskPolicy.causal(), start=s), base)
    return [
        Result("rope-noncommutativity", gap.worst, 1e-6, gap.worst > 1e-6, "(naive merged RoPE vs per-head RoPE)", ">"),
        _below("decoupled-rope-shift", shift, 1e-10),
    ]


def check_broken_merge(rng, sizes: int) -> Result:
    """Merge-soundness with RoPE pushed through the merged path; expected to fail."""
    gap = _naive_rope_gap(rng, sizes)
    return Result("merge-soundness", gap.worst, 1e-10, gap.worst < 1e-10, "[--break mla-rope: naive RoPE inside the latent path]")


def _table1_oracle(h, g, n_kv, d_qk, d_head, d_in, d_out) -> int:
    # sum of every stored tensor's entries, one shape at a time
    shapes = [(n_kv, d_qk, g), (n_kv, d_head, g), (d_in, d_qk, h), (d_in, d_qk, g), (d_in, d_head, g), (h * d_head, d_out, 1)]
    return sum(a * b * c for a, b, c in shapes)


def _table2_oracle(h, n_kv, d_l, d_in, d_out) -> int:
    shapes = [(n_kv, d_l, 1), (d_in, d_l, 1), (d_in, d_l, h), (h * d_l, d_out, 1)]
    return sum(a * b * c for a, b, c in shapes)


def check_accounting(rng) -> Result:
    mismatches = []
    for i in range(20):
        g = _randint(rng, 1, 8)
        h = g * _randint(rng, 1, 8)
        d_qk, d_head, d_in, d_out, d_l = (_randint(rng, 1, 512) for _ in range(5))
        n_kv = _randint(rng, 1, 100_000)
        got = acc.mha_memory_floats(MhaSpec(h, g, d_in, d_qk, d_head, d_out), n_kv)
        if got != _table1_oracle(h, g, n_kv, d_qk, d_head, d_in, d_out):
            mismatches.append(f"mha#{i}")
        d_in2 = max(d_in, d_l)
        got = acc.mla_memory_floats(MlaSpec(h, d_in2, d_l, d_l, d_head, d_out), n_kv)
        if got != _table2_oracle(h, n_kv, d_l, d_in2, d_out):
            mismatches.append(f"mla#{i}")
    llama = acc.PRESETS["llama3-70b"]
    b = acc.kv_cache_bytes(llama.n_layers, llama.n_kv_heads, 8192, llama.d_head_or_dl, 16)
    if b != LLAMA_CACHE_BYTES_8K_FP16:
        mismatches.append("llama-bytes")
    for key, cells in TABLE3.items():
        p = acc.PRESETS[key]
        if (p.n_layers, p.n_heads, p.n_kv_heads, p.d_model, p.d_head_or_dl) != cells:
            mismatches.append(f"preset:{key}")
    detail = "(20 tuples x 2 formulas, Llama bytes, preset cells)" if not mismatches else "mismatch: " + ", ".join(mismatches)
    return Result("accounting-fidelity", float(len(mismatches)), 1.0, not mismatches, detail)


def check_norms(rng) -> list[Result]:
    mean_t, var_t, rms_t = Tracker(), Tracker(), Tracker()
    for _ in range(50):
        d = _randint(rng, 2, 64)
        z = rng.standard_normal(d)
        # fix the spread so that eps stays negligible next to the variance
        x = (z - z.mean()) / z.std() * rng.uniform(0.5, 5.0) + rng.normal()
        y = layer_norm(x, NormParams.layer(d))
        mean_t.add(y.mean(), 0.0)
        var_t.add(y.var(), 1.0)
        p = NormParams.rms(d)
        # eps perturbs the output by ~eps/(2*mean square), so scale inputs well clear of it
        u = rng.standard_normal(d)
        u *= rng.uniform(10.0, 100.0) / np.sqrt(np.mean(u * u))
        for c in (0.5, 3.0, 7.0):
            rms_t.add(rms_norm(c * u, p), rms_norm(u, p))
    return [
        _below("layernorm-mean", mean_t, 1e-12),
        _below("layernorm-variance", var_t, 1e-4),
        _below("rmsnorm-scale-invariance", rms_t, 1e-6),
    ]


@dataclass
class Report:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        failed = [r.name for r in self.results if not r.passed]
        if failed:
            lines.append(f"FAILED {len(failed)}/{len(self.results)}: {', '.join(failed)}")
        else:
            lines.append(f"all {len(self.results)} properties passed")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "properties": [r.as_dict() for r in self.results]}


def run_checks(seed: int = 0, sizes: int = 16, broken: Optional[str] = None) -> Report:
    """Run every property with its own seeded stream so results do not depend on order."""
    if sizes < 1:
        raise ValueError("sizes must be >= 1")
    if broken not in (None, "mla-rope"):
        raise ValueError(f"unknown breakage {broken!r}")
    steps: list[Callable[[np.random.Generator], object]] = [
        lambda r: check_softmax_identity(r, sizes),
        lambda r: check_mask_equivalence(r, sizes),
        lambda r: check_prefix_stability(r, sizes),
        lambda r: check_gqa(r, sizes),
        lambda r: check_streaming(r, sizes),
        lambda r: check_mla_equals_mha(r, sizes),
        (lambda r: check_broken_merge(r, sizes)) if broken == "mla-rope" else (lambda r: check_merge(r, sizes)),
        lambda r: check_rope(r, sizes),
        check_accounting,
        check_norms,
    ]
    report = Report()
    for i, step in enumerate(steps):
        out = step(np.random.default_rng([seed, i]))
        report.results.extend(out if isinstance(out, list) else [out])
    return report
