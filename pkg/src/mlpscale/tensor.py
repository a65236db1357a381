"""Dense array kernels shared by every other module.

Arrays are plain :class:`numpy.ndarray` objects in C (row-major) order.
Training runs in single precision; verification code passes ``dtype=np.float64``.
"""

from __future__ import annotations

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {x.shape}")
    return x


def _check_inner(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: left {a.shape} and right {b.shape} "
            f"(inner extents {a.shape[1]} != {b.shape[0]})"
        )


def matmul(a, b) -> np.ndarray:
    """Matrix product through the BLAS-backed numpy kernel."""
    a = _as_matrix(a, "left operand")
    b = _as_matrix(b, "right operand")
    _check_inner(a, b)
    return a @ b


def matmul_reference(a, b) -> np.ndarray:
    """Naive triple loop with left-to-right summation over the inner index.

    Slow by design; it exists so faster kernels have something to be checked
    against.
    """
    a = _as_matrix(a, "left operand")
    b = _as_matrix(b, "right operand")
    _check_inner(a, b)
    r, k = a.shape
    c = b.shape[1]
    dtype = np.result_type(a, b)
    out = np.zeros((r, c), dtype=dtype)
    al = a.tolist()
    bl = b.tolist()
    cast = dtype.type
    for i in range(r):
        row = al[i]
        for j in range(c):
            s = cast(0)
            for t in range(k):
                s = cast(s + cast(row[t]) * cast(bl[t][j]))
            out[i, j] = s
    return out


def matmul_tiled(a, b, tile: int = 64) -> np.ndarray:
    """Cache-blocked product over output tiles.

    Each output tile accumulates rank-1 updates in increasing inner index, so
    every entry sees the same summation order as :func:`matmul_reference`.
    """
    a = _as_matrix(a, "left operand")
    b = _as_matrix(b, "right operand")
    _check_inner(a, b)
    if tile < 1:
        raise ValueError("tile must be positive")
    r, k = a.shape
    c = b.shape[1]
    out = np.zeros((r, c), dtype=np.result_type(a, b))
    for i0 in range(0, r, tile):
        i1 = min(i0 + tile, r)
        for j0 in range(0, c, tile):
            j1 = min(j0 + tile, c)
            acc = out[i0:i1, j0:j1]
            for t in range(k):
                acc += np.multiply.outer(a[i0:i1, t], b[t, j0:j1])
    return out


def moments(x) -> tuple[float, float]:
    """Mean and population variance of a vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("moments of an empty vector are undefined")
    mean = x.sum() / x.size
    var = ((x - mean) ** 2).sum() / x.size
    return float(mean), float(var)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Seeded generator; extra integer ``keys`` derive an independent stream.

    ``make_rng(seed, epoch, batch)`` always yields the same stream, no matter
    how many other streams were created before it.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and stream keys must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def rand_init(shape, scheme: str, rng: np.random.Generator, std: float | None = None,
              dtype=TRAIN_DTYPE) -> np.ndarray:
    """I.i.d. Gaussian initialisation.

    ``scheme="normal"`` draws with the given ``std``; ``scheme="he_fan_in"``
    uses ``sqrt(2 / fan_in)`` where fan_in is the last extent (weights are
    stored output-by-input).
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s < 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    if scheme == "normal":
        if std is None or not std > 0:
            raise ValueError(f"normal init needs a positive std, got {std}")
    elif scheme == "he_fan_in":
        fan_in = shape[-1] if shape else 1
        if fan_in < 1:
            raise ValueError(f"he_fan_in needs a positive fan-in, got shape {shape}")
        std = float(np.sqrt(2.0 / fan_in))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return (rng.standard_normal(shape) * std).astype(dtype)
