"""Dense double-precision helpers and seeded random initialization.

Matrices are plain 2-D ``numpy.float64`` arrays. Batches are stored as
columns, so an input batch of ``n`` examples with ``d`` features has
shape ``(d, n)``.

Randomness comes from numpy's PCG64 bit generator; normal draws use the
ziggurat sampler of ``numpy.random.Generator.standard_normal``. Both are
integer-exact and reproduce bit-for-bit across platforms for a fixed
numpy major version.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

Rng = np.random.Generator

ACTIVATIONS = ("linear", "tanh", "relu")


def make_rng(seed: int) -> Rng:
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, name: str) -> int:
    """Sub-seed for a named component: first 8 bytes (little endian) of
    sha256(f"{seed}:{name}")."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{what} produced non-finite values")
    return m


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    return _finite(m, name)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def gaussian_init(rows: int, cols: int, sigma: float, rng: Rng) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid shape ({rows}, {cols})")
    return sigma * rng.standard_normal((rows, cols))


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, z: np.ndarray) -> np.ndarray:
    # relu'(0) is taken as 0
    if kind == "linear":
        return np.ones_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "relu":
        return (z > 0).astype(np.float64)
    raise ParameterError(f"unknown activation {kind!r}")


def elementwise(kind: str, a: np.ndarray, b=None, *, activation: str | None = None,
                derivative: bool = False) -> np.ndarray:
    """Pointwise ops: ``add``, ``sub``, ``hadamard`` take a second matrix,
    ``scale`` takes a scalar ``b``, ``map-activation`` applies ``activation``
    (or its derivative)."""
    if kind in ("add", "sub", "hadamard"):
        if b is None or np.shape(b) != a.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} and {np.shape(b)} differ")
        out = {"add": np.add, "sub": np.subtract, "hadamard": np.multiply}[kind](a, b)
    elif kind == "scale":
        if not np.isscalar(b):
            raise ParameterError("scale needs a scalar factor")
        out = float(b) * a
    elif kind == "map-activation":
        if activation is None:
            raise ParameterError("map-activation needs an activation kind")
        out = activation_derivative(activation, a) if derivative else activate(activation, a)
    else:
        raise ParameterError(f"unknown elementwise op {kind!r}")
    return _finite(out, kind)
