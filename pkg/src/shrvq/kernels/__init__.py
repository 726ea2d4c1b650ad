"""Hot-path assignment kernels with a compiled core and a pure-Python twin.

The compiled Cython extension is preferred when present; the numpy
implementation is a drop-in fallback. Selection happens once at import and
can be forced with ``SHRVQ_KERNEL=cython`` or ``SHRVQ_KERNEL=python``.
Both backends implement identical semantics (float64 distance accumulation,
smallest-index tie break, float32 residual updates), which the test suite
checks for exact agreement.
"""

import os

import numpy as np

from . import _assign_py

_requested = os.environ.get("SHRVQ_KERNEL", "").strip().lower()

if _requested == "python":
    _impl = _assign_py
elif _requested == "cython":
    from . import _assign as _impl
else:
    try:
        from . import _assign as _impl
    except ImportError:
        _impl = _assign_py


def backend_name():
    """Name of the active backend: 'cython' or 'python'."""
    return "python" if _impl is _assign_py else "cython"


def _as_f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def assign_nearest(points, codebook):
    """Indices of the nearest codeword for each point.

    points: (P, D) array-like; codebook: (M, D). Returns (P,) int64.
    """
    points = _as_f32(points)
    codebook = _as_f32(codebook)
    out = np.empty(points.shape[0], dtype=np.int64)
    _impl.assign_nearest(points, codebook, out)
    return out


def assign_hierarchical(z, layer_books, branch):
    """Greedy residual code assignment through a codebook hierarchy.

    z: (P, D) float32 latents. layer_books: per layer, a (num_books, M, D)
    stack of codebooks where layer i is addressed by the mixed-radix
    (base-``branch``) encoding of the indices chosen at layers before it.
    Returns (codes, residuals): codes is (n, P) int64, residuals the final
    (P, D) float32 leftover.
    """
    residual = _as_f32(z).copy()
    P = residual.shape[0]
    bank = np.zeros(P, dtype=np.int64)
    codes = np.empty((len(layer_books), P), dtype=np.int64)
    for i, books in enumerate(layer_books):
        _impl.assign_step(residual, _as_f32(books), bank, codes[i])
        bank = bank * branch + codes[i]
    return codes, residual
