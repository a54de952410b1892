"""Dense linear algebra and seeded sampling shared by every other module.

Matrices are plain ``float64`` numpy arrays. The SVD is a one-sided Jacobi
sweep written here rather than delegated to LAPACK, so results are
deterministic and independent of the BLAS build.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12  # absolute floor, relative to ||M||_F
# Pairwise cosine below which two columns count as orthogonal. Anything
# looser than a few ulps leaks straight into pinv accuracy.
SVD_ORTH_TOL = 4 * np.finfo(np.float64).eps

# Recorded in run metadata so sampled noise can be replayed.
RNG_ALGORITHM = "numpy-PCG64/box-muller"


class SVDConvergenceError(RuntimeError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def matmul(lhs, rhs) -> np.ndarray:
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.ndim != 2 or rhs.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {lhs.shape} and {rhs.shape}")
    if lhs.shape[1] != rhs.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: lhs is {lhs.shape[0]}x{lhs.shape[1]}, "
            f"rhs is {rhs.shape[0]}x{rhs.shape[1]}"
        )
    return lhs @ rhs


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _complete_basis(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace columns not in `filled` with orthonormal vectors (Gram-Schmidt
    # against canonical basis vectors), so U stays orthonormal for zero
    # singular values.
    rows, cols = q.shape
    q = q.copy()
    basis = [q[:, j] for j in range(cols) if filled[j]]
    candidate = 0
    for j in range(cols):
        if filled[j]:
            continue
        while candidate < rows:
            v = np.zeros(rows)
            v[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    v = v - (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v = v / nv
                break
        q[:, j] = v
        basis.append(v)
    return q


@njit(cache=True)
def _jacobi_sweeps(work, v, floor, tol, max_sweeps):
    """Cyclic one-sided Jacobi rotations in place; returns sweeps used or -1."""
    rows, cols = work.shape
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for row in range(rows):
                    a = work[row, i]
                    b = work[row, j]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if abs(gamma) <= max(tol * np.sqrt(alpha * beta), floor):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for row in range(rows):
                    a = work[row, i]
                    b = work[row, j]
                    work[row, i] = c * a - s * b
                    work[row, j] = s * a + c * b
                for row in range(cols):
                    a = v[row, i]
                    b = v[row, j]
                    v[row, i] = c * a - s * b
                    v[row, j] = s * a + c * b
        if not rotated:
            return sweep
    return -1


def _jacobi_tall(m: np.ndarray):
    """One-sided Jacobi on a tall (rows >= cols) matrix."""
    rows, cols = m.shape
    work = np.ascontiguousarray(m, dtype=np.float64).copy()
    v = np.eye(cols)
    scale = frobenius_norm(m)
    if scale == 0.0:
        return np.eye(rows, cols), np.zeros(cols), np.eye(cols)
    floor = (SVD_TOL * scale) ** 2
    if cols > 1 and _jacobi_sweeps(work, v, floor, rows * SVD_ORTH_TOL, SVD_MAX_SWEEPS) < 0:
        raise SVDConvergenceError(
            f"Jacobi SVD did not converge within the cap of {SVD_MAX_SWEEPS} sweeps"
        )

    sing = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    work = work[:, order]
    v = v[:, order]
    cutoff = max(rows, cols) * np.finfo(np.float64).eps * (sing[0] if sing.size else 0.0)
    filled = sing > cutoff
    u = np.zeros((rows, cols))
    u[:, filled] = work[:, filled] / sing[filled]
    if not np.all(filled):
        u = _complete_basis(u, filled)
    return u, sing, v


def svd(m):
    """Thin SVD ``m = U diag(S) V^T`` with ``k = min(rows, cols)``.

    Returns ``(U, S, V)`` where ``U`` is ``rows x k``, ``S`` is non-increasing
    and ``V`` is ``cols x k``. Raises :class:`SVDConvergenceError` when the
    sweep cap is hit.
    """
    m = as_matrix(m)
    if m.shape[0] >= m.shape[1]:
        return _jacobi_tall(m)
    u, s, v = _jacobi_tall(m.T)
    return v, s, u


def default_pinv_tol(m: np.ndarray, sing: np.ndarray) -> float:
    if sing.size == 0:
        return 0.0
    return max(m.shape) * np.finfo(np.float64).eps * float(sing[0])


def pinv(m, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values ``<= tol`` are dropped."""
    m = as_matrix(m)
    if tol is not None and tol < 0:
        raise ValueError(f"tol must be non-negative, got {tol}")
    u, s, v = svd(m)
    if tol is None:
        tol = default_pinv_tol(m, s)
    keep = s > tol
    if not np.any(keep):
        return np.zeros((m.shape[1], m.shape[0]))
    return (v[:, keep] / s[keep]) @ u[:, keep].T


def sample_gaussian(rows: int, cols: int, std: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, std^2) entries by Box-Muller on the generator's uniforms.

    The generator is advanced even when ``std == 0`` so that call sequences
    stay aligned regardless of the noise level.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    count = rows * cols
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:count]
    if std == 0:
        return np.zeros((rows, cols))
    return (std * z).reshape(rows, cols)
