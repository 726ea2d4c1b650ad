import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def fd_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function w.r.t. tensor x."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    g = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn(x).detach())
        flat[i] = orig - eps
        fm = float(fn(x).detach())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(x.shape)


def fd_grad_params(fn, params, eps=1e-6):
    """Central finite differences of a scalar function of module parameters."""
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(fn())
                flat[i] = orig - eps
                fm = float(fn())
                flat[i] = orig
                g[i] = (fp - fm) / (2 * eps)
            grads.append(g.reshape(p.shape))
    return grads


def relative_error(a, b):
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def brute_force_nearest(point, codebook):
    """Exhaustive scan oracle: squared L2 in float64, first minimum wins."""
    best = None
    best_i = 0
    for i, word in enumerate(codebook):
        acc = 0.0
        for a, b in zip(point, word):
            d = float(a) - float(b)
            acc += d * d
        if best is None or acc < best:
            best = acc
            best_i = i
    return best_i


def brute_force_hierarchical(z, layer_books, branch):
    """Greedy residual quantization oracle, re-deriving the path rule.

    ``z``: (P, D) float32; ``layer_books``: per layer (num_books, M, D).
    Walks every position independently; returns (n, P) indices and the
    final (P, D) float32 residual.
    """
    z = np.asarray(z, dtype=np.float32)
    n = len(layer_books)
    P = z.shape[0]
    codes = np.zeros((n, P), dtype=np.int64)
    residuals = np.zeros_like(z)
    for p in range(P):
        r = z[p].copy()
        digits = []
        for i, books in enumerate(layer_books):
            book = 0
            for d in digits:
                book = book * branch + d
            k = brute_force_nearest(r, books[book])
            r = (r - np.asarray(books[book][k], dtype=np.float32)).astype(np.float32)
            digits.append(k)
            codes[i, p] = k
        residuals[p] = r
    return codes, residuals
