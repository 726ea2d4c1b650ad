"""Pure-numpy fallback for the nearest-codeword search kernels.

Mirrors the compiled extension: squared Euclidean distances in float64,
ties to the smallest index, float32 in-place residual updates.
"""

import numpy as np


def assign_nearest(points, codebook, out):
    diff = points[:, None, :].astype(np.float64) - codebook[None, :, :].astype(np.float64)
    d2 = np.einsum("pmd,pmd->pm", diff, diff)
    out[:] = np.argmin(d2, axis=1)


def assign_step(residuals, books, bank, codes):
    selected = books[bank]  # (P, M, D)
    diff = residuals[:, None, :].astype(np.float64) - selected.astype(np.float64)
    d2 = np.einsum("pmd,pmd->pm", diff, diff)
    idx = np.argmin(d2, axis=1)
    codes[:] = idx
    residuals -= selected[np.arange(residuals.shape[0]), idx]
