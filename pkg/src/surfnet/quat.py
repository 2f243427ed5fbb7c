"""Quaternion algebra and its real 4x4 block embedding.

Quaternions are float64 arrays of shape (..., 4) holding (a, b, c, d) for
q = a + bi + cj + dk. The block embedding turns quaternion matrix algebra
into real block-sparse algebra; conjugation corresponds to block transpose.

Feature vectors of width 4n pack quaternion t into lanes [4t, 4t+4) in
(a, b, c, d) order; 3D geometric data occupies the imaginary lanes with a=0.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidBlock

BLOCK_TOL = 1e-12


def quaternion(a=0.0, b=0.0, c=0.0, d=0.0) -> np.ndarray:
    return np.array([a, b, c, d], dtype=np.float64)


def from_vector3(v) -> np.ndarray:
    """Embed R^3 points as purely imaginary quaternions, (..., 3) -> (..., 4)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (4,), dtype=np.float64)
    out[..., 1:] = v
    return out


def to_vector3(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64)[..., 1:]


def qmul(p, q) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    a1, b1, c1, d1 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    a2, b2, c2, d2 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ], axis=-1)


def conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def qnorm(q) -> np.ndarray:
    return np.linalg.norm(np.asarray(q, dtype=np.float64), axis=-1)


def to_block(q) -> np.ndarray:
    """Real 4x4 block of a quaternion; broadcasts to (..., 4, 4).

    Left-multiplication p*q corresponds to to_block(p) @ q-as-column.
    """
    q = np.asarray(q, dtype=np.float64)
    a, b, c, d = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([a, -b, -c, -d], axis=-1),
        np.stack([b, a, -d, c], axis=-1),
        np.stack([c, d, a, -b], axis=-1),
        np.stack([d, -c, b, a], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def block_is_valid(m, tol: float = BLOCK_TOL) -> bool:
    """True when m carries the quaternion block structure within tol."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (4, 4):
        return False
    rebuilt = to_block(m[..., :, 0])
    return bool(np.max(np.abs(m - rebuilt)) <= tol)


def from_block(m, tol: float = BLOCK_TOL) -> np.ndarray:
    """Inverse of to_block. Raises InvalidBlock on malformed input."""
    m = np.asarray(m, dtype=np.float64)
    if not block_is_valid(m, tol):
        raise InvalidBlock("matrix is not a quaternion block within tolerance")
    return m[..., :, 0].copy()


def pack_features(quats: np.ndarray) -> np.ndarray:
    """(rows, n, 4) quaternion slots -> (rows, 4n) real feature matrix."""
    rows, n, four = quats.shape
    assert four == 4
    return quats.reshape(rows, 4 * n)


def unpack_features(x: np.ndarray) -> np.ndarray:
    """(rows, 4n) real features -> (rows, n, 4) quaternion slots."""
    rows, c = x.shape
    if c % 4:
        raise InvalidBlock(f"feature width {c} is not a multiple of 4")
    return x.reshape(rows, c // 4, 4)
