"""Dense float64 tensor primitives: the contractions, factorizations and
reductions that the operator models are assembled from.

All functions are pure, operate on ``numpy.ndarray`` (row-major, 64-bit) and
raise :class:`~stiffonet.errors.DimensionError` /
:class:`~stiffonet.errors.SingularBasisError` on contract violations.
"""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, SingularBasisError

RANK_TOL = 1e-12


def _as64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def contract_branch_trunk(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """out[i,l,a] = sum_k b[i,a,k] * c[l,a,k].

    ``b``: (bs, j, p) branch coefficients, ``c``: (n_t1, j, p) trunk bases.
    Returns (bs, n_t1, j).
    """
    b, c = _as64(b), _as64(c)
    if b.ndim != 3 or c.ndim != 3:
        raise DimensionError(f"expected rank-3 inputs, got {b.shape} and {c.shape}")
    if b.shape[1] != c.shape[1]:
        raise DimensionError(f"state axes disagree: branch j={b.shape[1]}, trunk j={c.shape[1]}")
    if b.shape[2] != c.shape[2]:
        raise DimensionError(f"basis axes disagree: branch p={b.shape[2]}, trunk p={c.shape[2]}")
    return np.einsum("ijk,ljk->ilj", b, c)


def contract_trunk_A(c: np.ndarray, a: np.ndarray) -> np.ndarray:
    """out[l,i,a] = sum_k c[i,a,k] * a[a,k,l].

    ``c``: (n_t1, j, p) trunk bases, ``a``: (j, p, bs) per-sample coefficients.
    Returns (bs, n_t1, j).
    """
    c, a = _as64(c), _as64(a)
    if c.ndim != 3 or a.ndim != 3:
        raise DimensionError(f"expected rank-3 inputs, got {c.shape} and {a.shape}")
    if c.shape[1] != a.shape[0]:
        raise DimensionError(f"state axes disagree: trunk j={c.shape[1]}, coeff j={a.shape[0]}")
    if c.shape[2] != a.shape[1]:
        raise DimensionError(f"basis axes disagree: trunk p={c.shape[2]}, coeff p={a.shape[1]}")
    return np.einsum("ijk,jkl->lij", c, a)


def contract_predict_2step(b: np.ndarray, q: np.ndarray) -> np.ndarray:
    """out[i,l,a] = sum_k b[i,a,k] * q[a,l,k].

    ``b``: (bs, j, p) branch coefficients, ``q``: (j, n_t1, p) orthonormal bases.
    Returns (bs, n_t1, j).
    """
    b, q = _as64(b), _as64(q)
    if b.ndim != 3 or q.ndim != 3:
        raise DimensionError(f"expected rank-3 inputs, got {b.shape} and {q.shape}")
    if b.shape[1] != q.shape[0]:
        raise DimensionError(f"state axes disagree: branch j={b.shape[1]}, basis j={q.shape[0]}")
    if b.shape[2] != q.shape[2]:
        raise DimensionError(f"basis axes disagree: branch p={b.shape[2]}, basis p={q.shape[2]}")
    return np.einsum("ijk,jlk->ilj", b, q)


def qr_thin(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin (reduced) QR factorization with a positive diagonal of R.

    The sign normalization makes the factorization unique for full-rank
    inputs, so repeated runs and different BLAS builds agree on Q and R.
    Raises SingularBasisError when a diagonal entry of R collapses below
    ``RANK_TOL * ||m||``.
    """
    m = _as64(m)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if rows < cols:
        raise DimensionError(f"need rows >= cols for a thin QR, got {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")  # LAPACK Householder reflections
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    q = q * signs[np.newaxis, :]
    r = r * signs[:, np.newaxis]
    scale = np.linalg.norm(m)
    if scale == 0.0 or np.min(np.abs(np.diag(r))) < RANK_TOL * scale:
        raise SingularBasisError(
            f"matrix of shape {m.shape} is numerically rank deficient "
            f"(min |R_kk| = {np.min(np.abs(np.diag(r))):.3e})"
        )
    return q, r


def least_squares(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    """argmin_X ||m X - y||_F for overdetermined full-rank ``m``.

    Solved through the thin QR factors (R X = Q^T y) rather than the normal
    equations, preserving the conditioning of ``m``.
    """
    m, y = _as64(m), _as64(y)
    if y.ndim not in (1, 2):
        raise DimensionError(f"right-hand side must be a vector or matrix, got {y.shape}")
    if m.shape[0] != y.shape[0]:
        raise DimensionError(f"row counts disagree: {m.shape[0]} vs {y.shape[0]}")
    q, r = qr_thin(m)
    return solve_triangular(r, q.T @ y, lower=False)


def softmax_last_axis(x: np.ndarray) -> np.ndarray:
    """Softmax over the trailing axis, stabilized by max subtraction.

    Output entries are in (0, 1) and every trailing-axis slice sums to 1.
    """
    x = _as64(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)
