"""JSON weight bundles.

Layout::

    {"format": "mha" | "gqa" | "mla" | "mla-merged",
     "version": 1,
     "spec": {"n_heads": ..., "d_in": ..., ...},
     "tensors": {"wq": [{"shape": [r, c], "data": [...row-major...]}, ...],
                 "wo": {"shape": [r, c], "data": [...]}, ...}}

Per-head tensors are lists of matrices; shared tensors are single matrices.
``spec`` holds the dimensions; it is required for merged latent bundles,
whose tensors do not determine ``d_head`` (the score scaling).
Floats are written with ``repr`` precision so a save/load cycle is exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError
from .latent import MergedMlaWeights, MlaSpec, MlaWeights
from .multihead import MhaSpec, MhaWeights

VERSION = 1

Bundle = Union[MhaWeights, MlaWeights, MergedMlaWeights]
Spec = Union[MhaSpec, MlaSpec]
_MHA_DIMS = ("n_heads", "n_kv_heads", "d_in", "d_qk", "d_head", "d_out")
_MLA_DIMS = ("n_heads", "d_in", "d_l", "d_lq", "d_head", "d_out")

_FIELDS = {
    "mha": (MhaWeights, ("wq", "wk", "wv"), ("wo",)),
    "gqa": (MhaWeights, ("wq", "wk", "wv"), ("wo",)),
    "mla": (MlaWeights, ("w_lqq", "w_lk", "w_lv"), ("w_l", "w_lq", "wo")),
    "mla-merged": (MergedMlaWeights, ("w_lqk",), ("w_l", "w_lq", "w_lo")),
}


def _enc(m: np.ndarray) -> dict:
    return {"shape": list(m.shape), "data": [float(v) for v in m.ravel()]}


def _dec(doc, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
        if len(shape) != 2 or data.size != shape[0] * shape[1]:
            raise ValueError(f"shape {shape} does not match {data.size} values")
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"tensor {name}: {exc}") from exc


def format_of(w: Bundle) -> str:
    if isinstance(w, MhaWeights):
        return "mha" if len(w.wk) == len(w.wq) else "gqa"
    if isinstance(w, MlaWeights):
        return "mla"
    if isinstance(w, MergedMlaWeights):
        return "mla-merged"
    raise TypeError(f"not a weight bundle: {type(w).__name__}")


def _spec_dict(spec: Spec) -> dict:
    dims = _MHA_DIMS if isinstance(spec, MhaSpec) else _MLA_DIMS
    return {k: getattr(spec, k) for k in dims}


def to_dict(w: Bundle, spec: Spec = None) -> dict:
    fmt = format_of(w)
    if spec is None:
        if fmt == "mla-merged":
            raise ValueError("merged latent bundles need their spec")
        spec = w.infer_spec()
    w.check(spec)
    _, lists, singles = _FIELDS[fmt]
    tensors = {name: [_enc(m) for m in getattr(w, name)] for name in lists}
    tensors.update({name: _enc(getattr(w, name)) for name in singles})
    return {"format": fmt, "version": VERSION, "spec": _spec_dict(spec), "tensors": tensors}


def from_dict(doc: dict) -> tuple[Bundle, Spec]:
    if not isinstance(doc, dict):
        raise FormatError("weight file must hold a JSON object")
    fmt = doc.get("format")
    if fmt not in _FIELDS:
        raise FormatError(f"unknown weight format {fmt!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported weight file version {doc.get('version')!r}")
    cls, lists, singles = _FIELDS[fmt]
    tensors = doc.get("tensors") or {}
    try:
        kwargs = {name: [_dec(t, f"{name}[{i}]") for i, t in enumerate(tensors[name])] for name in lists}
        kwargs.update({name: _dec(tensors[name], name) for name in singles})
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}") from exc
    w = cls(**kwargs)
    try:
        if "spec" in doc:
            spec_cls, dims = (MhaSpec, _MHA_DIMS) if isinstance(w, MhaWeights) else (MlaSpec, _MLA_DIMS)
            spec = spec_cls(**{k: int(doc["spec"][k]) for k in dims})
        elif fmt == "mla-merged":
            raise FormatError("merged latent bundle without a spec")
        else:
            spec = w.infer_spec()
        w.check(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"weights do not match their spec: {exc}") from exc
    if isinstance(w, MhaWeights) and format_of(w) != fmt:
        raise FormatError(f"file says {fmt!r} but head counts say {format_of(w)!r}")
    return w, spec


def save_weights(w: Bundle, path, spec: Spec = None) -> None:
    Path(path).write_text(json.dumps(to_dict(w, spec)) + "\n")


def load_weights(path) -> tuple[Bundle, Spec]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    return from_dict(doc)
