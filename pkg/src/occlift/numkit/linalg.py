"""Small dense factorizations: 3x3 SVD by one-sided Jacobi sweeps."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError

_PAIRS = ((0, 1), (0, 2), (1, 2))


def svd3_batch(m: np.ndarray, max_sweeps: int = 30, tol: float = 1e-12):
    """SVD of a stack of 3x3 matrices, ``m`` of shape ``(B, 3, 3)``.

    Returns ``U (B,3,3)``, ``S (B,3)`` descending and non-negative, and
    ``Vt (B,3,3)`` with ``m = U @ diag(S) @ Vt``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or m.shape[1:] != (3, 3):
        raise ShapeError(f"svd3 expects (B, 3, 3) input, got {m.shape}")
    a = m.copy()
    v = np.broadcast_to(np.eye(3), m.shape).copy()
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in _PAIRS:
            ap, aq = a[:, :, p], a[:, :, q]
            alpha = np.einsum("bi,bi->b", ap, ap)
            beta = np.einsum("bi,bi->b", aq, aq)
            gamma = np.einsum("bi,bi->b", ap, aq)
            denom = np.sqrt(alpha * beta)
            live = (denom > 0) & (np.abs(gamma) > tol * denom)
            if not live.any():
                continue
            worst = max(worst, float(np.max(np.abs(gamma[live]) / denom[live])))
            g = np.where(live, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c = np.where(live, c, 1.0)[:, None]
            s = np.where(live, s, 0.0)[:, None]
            for mat in (a, v):
                xp, xq = mat[:, :, p].copy(), mat[:, :, q].copy()
                mat[:, :, p] = c * xp - s * xq
                mat[:, :, q] = s * xp + c * xq
        if worst <= tol:
            break

    sig = np.linalg.norm(a, axis=1)
    order = np.argsort(-sig, axis=1, kind="stable")
    sig = np.take_along_axis(sig, order, axis=1)
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    nz = sig > 1e-280
    u = np.divide(a, sig[:, None, :], out=np.zeros_like(a), where=nz[:, None, :])
    for b in np.nonzero(~nz.all(axis=1))[0]:
        u[b] = _complete_basis(u[b], nz[b])
    return u, sig, np.swapaxes(v, 1, 2)


def _complete_basis(u: np.ndarray, have: np.ndarray) -> np.ndarray:
    """Fill the missing columns of ``u`` with an orthonormal completion."""
    cols = [u[:, k] for k in range(3) if have[k]]
    for e in np.eye(3):
        if len(cols) == 3:
            break
        w = e - sum(np.dot(e, c) * c for c in cols)
        n = np.linalg.norm(w)
        if n > 1e-6:
            cols.append(w / n)
    out = u.copy()
    extra = iter(cols[int(have.sum()):])
    for k in range(3):
        if not have[k]:
            out[:, k] = next(extra)
    return out


def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a single 3x3 matrix: ``(U, S, Vt)``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    u, s, vt = svd3_batch(m[None])
    return u[0], s[0], vt[0]
