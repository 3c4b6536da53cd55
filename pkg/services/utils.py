from __future__ import annotations

from typing import Any

import numpy as np


def safe_float(v: Any) -> float | None:
    try:
        if v is None:
            return None
        s = str(v).strip()
        if not s:
            return None
        return float(s)
    except Exception:
        return None


def safe_int(v: Any) -> int | None:
    f = safe_float(v)
    if f is None or not np.isfinite(f) or f != int(f):
        return None
    return int(f)


# -------------------------
# batched linear algebra (leading axis = nodes of one tree level)
# -------------------------
def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def tr(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Node-wise matrix-vector product; v may be one vector shared by all nodes."""
    if v.ndim == 1:
        return np.einsum("kij,j->ki", M, v)
    return np.einsum("kij,kj->ki", M, v)


def mtv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Node-wise M' v."""
    return np.einsum("kji,kj->ki", M, v)


def quad(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("ki,kij,kj->k", v, M, v)


def eigmin(M: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue per node of the symmetric part."""
    return np.linalg.eigvalsh(sym(M))[..., 0]


def spectral_norm(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(M, ord=2, axis=(-2, -1))))


def as_matrix(value: Any, shape: tuple[int, int]) -> np.ndarray:
    """Numbers become value * eye(rows, cols); nested lists are taken as given."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value) * np.eye(*shape)
    return np.asarray(value, dtype=float)
