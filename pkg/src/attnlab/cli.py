"""``attnlab`` command line: account | check | demo | convert.

Exit codes: 0 success, 1 property failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import accounting
from .attention import HeadWeights, Kernel, attention_scores, normalizer
from .checks import run_checks
from .errors import AttnLabError
from .latent import factorize_mha_to_mla, merge_weights, mla_forward
from .attention import MaskPolicy
from .multihead import MhaWeights, self_attention
from .tokenizer import EmbeddingTable, Vocabulary, embed, load_vocabulary, tokenize_greedy
from .weights_io import load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEMO_WORDS = ("the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "a", "cat", "sat", "on", "mat")
DEMO_DIM = 4
PROBE_TOKENS = 8


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("ATTNLAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"ATTNLAB_SEED must be an integer, got {raw!r}") from None


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _fmt_int(v) -> str:
    return f"{v:,}" if isinstance(v, int) else f"{v:,.1f}"


def _fmt_matrix(m: np.ndarray, indent: str = "  ") -> list[str]:
    return [indent + "[" + ", ".join(f"{v: .6f}" for v in row) + "]" for row in m]


def cmd_account(args) -> int:
    if args.config:
        preset = accounting.load_preset(args.config)
    else:
        key = args.preset or "llama3-70b"
        if key not in accounting.PRESETS:
            raise UsageError(f"unknown preset {key!r}; built-ins: {', '.join(sorted(accounting.PRESETS))}")
        preset = accounting.PRESETS[key]
    context = 8192 if args.context is None else args.context
    bits = 16 if args.bits is None else args.bits
    if context < 0 or bits < 1:
        raise UsageError("--context must be >= 0 and --bits >= 1")
    report = accounting.account(preset, context, bits)
    if args.json:
        _emit(report)
        return EXIT_OK
    p = preset
    kv = "-" if p.n_kv_heads is None else str(p.n_kv_heads)
    width = "d_L" if p.kind == "mla" else "d_head"
    print(f"{p.name} ({p.kind.upper()}): {p.n_layers} layers, {p.n_heads} heads, {kv} KV heads, "
          f"d_model {p.d_model:,}, {width} {p.d_head_or_dl}")
    print(f"context {context:,} tokens, {bits} bits per float")
    print(f"stored floats per layer: {report['memory_formula']}")
    rows = [
        ("cache floats / layer", report["cache_floats_per_layer"]),
        ("cache bytes / layer", report["cache_bytes_per_layer"]),
        ("cache bytes total", report["cache_bytes_total"]),
        ("weight floats / layer", report["weight_floats_per_layer"]),
        ("weight floats total", report["weight_floats_total"]),
        ("decode-step work / layer", report["flops_per_decode_step_per_layer"]),
        ("decode-step work total", report["flops_per_decode_step_total"]),
    ]
    for label, v in rows:
        print(f"  {label:<26}{_fmt_int(v):>24}")
    for note in report["notes"]:
        print(f"note: {note}")
    return EXIT_OK


def cmd_check(args) -> int:
    sizes = 16 if args.sizes is None else args.sizes
    if sizes < 1:
        raise UsageError("--sizes must be >= 1")
    report = run_checks(seed=args.seed, sizes=sizes, broken=args.break_)
    if args.json:
        _emit({"seed": args.seed, "sizes": sizes, "break": args.break_, **report.as_dict()})
    else:
        print(f"attnlab check: seed {args.seed}, sizes {sizes}" + (f", break {args.break_}" if args.break_ else ""))
        print(report.text())
    return EXIT_OK if report.passed else EXIT_FAIL


def _demo_model(args):
    if args.config:
        vocab, table = load_vocabulary(args.config)
        split = any(len(t) > 1 for t in vocab.tokens)
    else:
        vocab = Vocabulary(DEMO_WORDS)
        rng = np.random.default_rng([args.seed, 1])
        table = EmbeddingTable(rng.uniform(0.0, 1.0, (len(vocab), DEMO_DIM)))
        split = True
    d = table.dim
    rng = np.random.default_rng([args.seed, 2])
    # nonnegative weights and embeddings keep the linear kernel's row sums positive
    head = HeadWeights(*(rng.uniform(0.0, 1.0, (d, d)) / np.sqrt(d) for _ in range(3)))
    return vocab, table, head, split


def cmd_demo(args) -> int:
    text = args.text or ""
    vocab, table, head, split = _demo_model(args)
    indices = tokenize_greedy(text, vocab, max(vocab.longest, 1), split_whitespace=split)
    kernel = Kernel.linear() if args.kernel == "linear" else Kernel.scaled_exp(head.d_qk)
    x = embed(indices, table)
    trace: dict = {"text": text, "kernel": args.kernel, "tokens": [vocab.tokens[i] for i in indices], "indices": indices}
    if indices:
        q, k, v = x @ head.wq, x @ head.wk, x @ head.wv
        a = attention_scores(q, k, kernel)
        z = normalizer(a)
        weights = a / z[:, None]
        trace.update({
            "embeddings": x.tolist(),
            "queries": q.tolist(),
            "keys": k.tolist(),
            "values": v.tolist(),
            "scores": a.tolist(),
            "normalizer": z.tolist(),
            "weights": weights.tolist(),
            "outputs": (weights @ v).tolist(),
        })
    if args.json:
        _emit(trace)
        return EXIT_OK
    print(f"text: {text!r}")
    print(f"kernel: {'linear f(x)=x' if args.kernel == 'linear' else 'scaled exponential exp(x/sqrt(d_qk))'}")
    print(f"tokens: {trace['tokens']}")
    print(f"indices: {indices}")
    if not indices:
        return EXIT_OK
    for key, label in (("embeddings", "embedding rows X"), ("queries", "queries Q = X W^Q"), ("keys", "keys K = X W^K"),
                       ("values", "values V = X W^V"), ("scores", "scores A"), ("weights", "weights Z^-1 A"),
                       ("outputs", "outputs Y = Z^-1 A V")):
        print(f"{label}:")
        print("\n".join(_fmt_matrix(np.asarray(trace[key]))))
    print("normalizer Z: [" + ", ".join(f"{v:.6f}" for v in trace["normalizer"]) + "]")
    return EXIT_OK


def cmd_convert(args) -> int:
    if not args.weights:
        raise UsageError("convert needs an input weight file")
    if args.d_l is None or args.d_lq is None:
        raise UsageError("convert needs --d-l and --d-lq")
    if not args.output:
        raise UsageError("convert needs -o PATH")
    w, spec = load_weights(args.weights)
    if not isinstance(w, MhaWeights):
        raise UsageError("convert expects an MHA weight bundle")
    try:
        latent, err = factorize_mha_to_mla(w, args.d_l, args.d_lq)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lspec = latent.infer_spec()
    merged = merge_weights(latent)
    save_weights(merged, args.output, lspec)
    probe = np.random.default_rng(args.seed).standard_normal((PROBE_TOKENS, spec.d_in))
    causal = MaskPolicy.causal()
    dev = float(np.max(np.abs(self_attention(probe, w, spec, causal) - mla_forward(probe, merged, lspec, causal))))
    doc = {
        "input": args.weights,
        "output": args.output,
        "d_l": args.d_l,
        "d_lq": args.d_lq,
        "reconstruction_error": err,
        "forward_max_deviation": dev,
        "probe_tokens": PROBE_TOKENS,
        "seed": args.seed,
    }
    if args.json:
        _emit(doc)
    else:
        print(f"converted {args.weights} -> {args.output} (d_L {args.d_l}, d_LQ {args.d_lq})")
        print(f"reconstruction error:   {err:.3e}")
        print(f"forward max deviation:  {dev:.3e}  ({PROBE_TOKENS}-token causal probe, seed {args.seed})")
    return EXIT_OK


COMMANDS = {"account": cmd_account, "check": cmd_check, "demo": cmd_demo, "convert": cmd_convert}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnlab", description="Attention mechanism engine and inference-cost accountant.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("weights", nargs="?", help="input weight file (convert)")
    p.add_argument("--preset", help=f"built-in model ({', '.join(sorted(accounting.PRESETS))})")
    p.add_argument("--config", help="preset JSON (account) or vocabulary JSON (demo)")
    p.add_argument("--context", type=int, help="context length in tokens (default 8192)")
    p.add_argument("--bits", type=int, help="bits per float (default 16)")
    p.add_argument("--seed", type=int, help="random seed (default $ATTNLAB_SEED or 0)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--sizes", type=int, help="max tokens per random instance in check (default 16)")
    p.add_argument("--break", dest="break_", choices=["mla-rope"], help="deliberately break a property (check)")
    p.add_argument("--text", help="input text (demo)")
    p.add_argument("--kernel", choices=["exp", "linear"], default="exp", help="demo kernel")
    p.add_argument("--d-l", dest="d_l", type=int, help="shared KV latent width (convert)")
    p.add_argument("--d-lq", dest="d_lq", type=int, help="query latent width (convert)")
    p.add_argument("-o", "--output", help="output path (convert)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = _default_seed()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"attnlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AttnLabError as exc:
        print(f"attnlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
