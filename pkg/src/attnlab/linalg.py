"""Dense real linear algebra on float64 numpy arrays.

A ``Matrix`` is a 2-D ``np.ndarray`` of dtype float64. Entries must be finite
except in additive masks, which may hold ``-inf``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConvergenceError, DegenerateRowError, NonFiniteError, ShapeError

Matrix = np.ndarray

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(m, name: str = "matrix", allow_neg_inf: bool = False) -> Matrix:
    """Coerce ``m`` to a 2-D float64 array and validate its entries."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, 0)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if allow_neg_inf:
        bad = np.isnan(a) | np.isposinf(a)
    else:
        bad = ~np.isfinite(a)
    if bad.any():
        raise NonFiniteError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> Matrix:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def row_softmax(m) -> Matrix:
    """Numerically stable softmax along each row; ``-inf`` entries map to exactly 0."""
    m = as_matrix(m, allow_neg_inf=True)
    if m.shape[1] == 0 and m.shape[0] > 0:
        raise DegenerateRowError("softmax over an empty row", rows=range(m.shape[0]))
    row_max = m.max(axis=1, keepdims=True) if m.size else np.zeros((m.shape[0], 1))
    dead = np.isneginf(row_max[:, 0])
    if dead.any():
        rows = np.flatnonzero(dead).tolist()
        raise DegenerateRowError(f"fully masked rows {rows}", rows=rows)
    e = np.exp(m - row_max)
    return e / e.sum(axis=1, keepdims=True)


def concat_cols(blocks: Sequence) -> Matrix:
    blocks = [as_matrix(b, f"block {i}") for i, b in enumerate(blocks)]
    if not blocks:
        raise ShapeError("concat_cols needs at least one block")
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ShapeError(f"blocks have differing row counts {[b.shape[0] for b in blocks]}")
    return np.concatenate(blocks, axis=1)


def split_cols(m, widths: Sequence[int]) -> list[Matrix]:
    """Inverse of :func:`concat_cols` for the given block widths."""
    m = as_matrix(m)
    if sum(widths) != m.shape[1]:
        raise ShapeError(f"widths {list(widths)} do not sum to {m.shape[1]} columns")
    edges = np.cumsum([0, *widths])
    return [m[:, edges[i]:edges[i + 1]] for i in range(len(widths))]


def block_diag(blocks: Sequence) -> Matrix:
    if len(blocks) == 0:
        raise ValueError("block_diag needs at least one block")
    blocks = [as_matrix(b, f"block {i}") for i, b in enumerate(blocks)]
    out = np.zeros((sum(b.shape[0] for b in blocks), sum(b.shape[1] for b in blocks)))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _complete_orthonormal(cols: Matrix, keep: np.ndarray) -> Matrix:
    """Replace columns not flagged in ``keep`` by vectors orthonormal to the rest."""
    out = cols.copy()
    m = out.shape[0]
    basis = [out[:, j] for j in range(out.shape[1]) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(out.shape[1]):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            n = np.linalg.norm(v)
            if n > 1e-8:
                v /= n
                out[:, j] = v
                basis.append(v)
                break
        else:  # pragma: no cover - only if more columns than rows
            raise ShapeError("cannot complete an orthonormal basis")
    return out


def _jacobi_svd_tall(a: Matrix) -> tuple[Matrix, np.ndarray, Matrix]:
    """One-sided (Hestenes) Jacobi SVD of a tall matrix (rows >= cols)."""
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    zero_tol = max(m, n) * np.finfo(float).eps * np.linalg.norm(a)
    zero_sq = zero_tol * zero_tol
    for _sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = u[:, p], u[:, q]
                alpha = up @ up
                beta = uq @ uq
                gamma = up @ uq
                # columns that are numerically zero carry no rotation information
                if alpha <= zero_sq or beta <= zero_sq:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, rel)
                if rel <= JACOBI_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                u[:, [p, q]] = np.column_stack((c * up - s * uq, s * up + c * uq))
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off <= JACOBI_TOL:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps", off)

    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    tiny = sigma <= zero_tol
    safe = np.where(tiny, 1.0, sigma)
    u = u / safe
    if tiny.any():
        sigma = np.where(tiny, 0.0, sigma)
        u = _complete_orthonormal(u, ~tiny)
    return u, sigma, v.T


def truncated_svd(m, rank: int) -> tuple[Matrix, np.ndarray, Matrix]:
    """Best rank-``rank`` approximation ``U @ diag(S) @ Vt`` by one-sided Jacobi.

    Returns ``U`` (rows x rank), ``S`` (rank,) nonincreasing and ``Vt`` (rank x cols).
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if not isinstance(rank, (int, np.integer)) or rank < 0 or rank > min(rows, cols):
        raise ValueError(f"rank {rank} out of range for a {rows}x{cols} matrix")
    if rank == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((0, cols))
    if rows >= cols:
        u, s, vt = _jacobi_svd_tall(a)
    else:
        v, s, ut = _jacobi_svd_tall(a.T)
        u, vt = ut.T, v.T
    return u[:, :rank], s[:rank].copy(), vt[:rank, :]


def frobenius(m) -> float:
    return float(np.linalg.norm(as_matrix(m)))
