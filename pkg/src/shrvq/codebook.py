"""Hierarchical codebook tree: structure, residual quantization, lookup.

Layer i (1-based) holds branch**(i-1) codebooks of ``branch`` codewords
each; which codebook quantizes a position at layer i is determined by the
mixed-radix (base-``branch``) encoding of the codeword indices chosen at
layers 1..i-1. Indices are stored zero-based.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels


@dataclass
class CodePath:
    """Ordered codeword indices identifying one codebook at the next layer."""

    indices: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.indices)

    def mixed_radix(self, branch):
        """Base-``branch`` encoding, most significant digit first."""
        value = 0
        for d in self.indices:
            if not 0 <= d < branch:
                raise ValueError(f"path digit {d} out of range [0, {branch})")
            value = value * branch + d
        return value


@dataclass
class QuantizationOutput:
    """All grids produced by one hierarchical quantization pass.

    Tensors keep the leading shape of the input latent grid. ``latent`` is
    the quantizer input (the zeroth residual); ``residual_grids[i]`` is the
    leftover after layer i+1; ``combined`` is the layerwise sum of the
    selected codewords.
    """

    code_grids: list[torch.Tensor]
    codeword_grids: list[torch.Tensor]
    residual_grids: list[torch.Tensor]
    combined: torch.Tensor
    latent: torch.Tensor

    @property
    def num_layers(self):
        return len(self.code_grids)


class CodebookTree(nn.Module):
    """Strict hierarchy of learnable codebooks.

    ``layers[i]`` is a parameter of shape (branch**i, branch, dim): all
    codebooks of layer i+1 stacked in mixed-radix order.
    """

    def __init__(self, num_layers, branch, dim, seed=0, init_samples=None):
        super().__init__()
        if num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {num_layers}")
        if branch < 2:
            raise ValueError(f"branch must be >= 2, got {branch}")
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.num_layers = num_layers
        self.branch = branch
        self.dim = dim
        self.seed = seed

        gen = torch.Generator().manual_seed(seed)
        if init_samples is not None:
            samples = torch.as_tensor(np.asarray(init_samples), dtype=torch.float32)
            if samples.ndim != 2 or samples.shape[1] != dim:
                raise ValueError(
                    f"init_samples must be (K, {dim}), got {tuple(samples.shape)}"
                )
        params = []
        for i in range(num_layers):
            shape = (branch**i, branch, dim)
            if init_samples is not None:
                pick = torch.randint(samples.shape[0], (int(np.prod(shape[:2])),), generator=gen)
                w = samples[pick].reshape(shape).clone()
            else:
                w = torch.randn(shape, generator=gen) * 0.02
            params.append(nn.Parameter(w))
        self.layers = nn.ParameterList(params)

    def num_codebooks(self, layer):
        """Codebook count at 1-based ``layer``: branch**(layer-1)."""
        self._check_layer(layer)
        return self.branch ** (layer - 1)

    def total_codewords(self, layer):
        """Codeword count at 1-based ``layer``: branch**layer."""
        self._check_layer(layer)
        return self.branch**layer

    def _check_layer(self, layer):
        if not 1 <= layer <= self.num_layers:
            raise ValueError(f"layer must be in [1, {self.num_layers}], got {layer}")

    def codebook_for_path(self, layer, path):
        """The (branch, dim) codebook that ``path`` selects at 1-based ``layer``.

        Layer 1 takes the empty path and returns the single root codebook.
        """
        self._check_layer(layer)
        if not isinstance(path, CodePath):
            path = CodePath(list(path))
        if len(path) != layer - 1:
            raise ValueError(
                f"path of length {len(path)} cannot address layer {layer}; "
                f"need length {layer - 1}"
            )
        return self.layers[layer - 1][path.mixed_radix(self.branch)]

    def quantize(self, z):
        """Greedy residual quantization of a latent grid (see module docstring).

        ``z`` is a (..., dim) tensor or array; typically (H, W, dim) or
        (B, H, W, dim). The index search runs in the assignment kernel; the
        returned codeword/residual grids are recomputed with differentiable
        gathers so gradients reach the codebook parameters.
        """
        if not torch.is_tensor(z):
            z = torch.as_tensor(z, dtype=torch.float32)
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z.shape[-1]} != tree dim {self.dim}")
        flat = z.reshape(-1, self.dim)
        with torch.no_grad():
            books_np = [p.detach().float().numpy() for p in self.layers]
            z_np = flat.detach().float().numpy()
            codes, _ = kernels.assign_hierarchical(z_np, books_np, self.branch)
        codes = torch.from_numpy(codes).reshape(self.num_layers, *z.shape[:-1])
        return self.requantize(z, list(codes))

    def requantize(self, z, code_grids):
        """Rebuild a :class:`QuantizationOutput` from given index grids.

        Differentiable and dtype-preserving: all grids are computed in the
        promoted dtype of ``z`` and the codebook parameters. Used by
        :meth:`quantize` and by gradient checks that hold codes fixed.
        """
        if not torch.is_tensor(z):
            z = torch.as_tensor(z, dtype=torch.float32)
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z.shape[-1]} != tree dim {self.dim}")
        if len(code_grids) != self.num_layers:
            raise ValueError(
                f"expected {self.num_layers} code grids, got {len(code_grids)}"
            )
        lead = z.shape[:-1]
        flat = z.reshape(-1, self.dim)
        residual = flat
        bank = torch.zeros(flat.shape[0], dtype=torch.int64)
        code_out, codeword_grids, residual_grids = [], [], []
        combined = None
        for i in range(self.num_layers):
            idx = torch.as_tensor(np.asarray(code_grids[i]), dtype=torch.int64)
            if idx.shape != lead:
                raise ValueError("code grid shape does not match latent grid")
            idx = idx.reshape(-1)
            e = self.layers[i][bank, idx].to(z.dtype)
            residual = residual - e
            combined = e if combined is None else combined + e
            bank = bank * self.branch + idx
            code_out.append(idx.reshape(lead))
            codeword_grids.append(e.reshape(*lead, self.dim))
            residual_grids.append(residual.reshape(*lead, self.dim))
        return QuantizationOutput(
            code_grids=code_out,
            codeword_grids=codeword_grids,
            residual_grids=residual_grids,
            combined=combined.reshape(*lead, self.dim),
            latent=z,
        )

    def lookup(self, code_grids):
        """Combined embedding for per-layer index grids (path rule applied).

        Inverse of the index-extraction side of :meth:`quantize`:
        ``tree.lookup(tree.quantize(z).code_grids)`` equals
        ``tree.quantize(z).combined`` exactly.
        """
        e_layers = self.lookup_layers(code_grids)
        combined = e_layers[0]
        for e in e_layers[1:]:
            combined = combined + e
        return combined

    def lookup_layers(self, code_grids):
        """Per-layer codeword grids for the given index grids."""
        if len(code_grids) != self.num_layers:
            raise ValueError(
                f"expected {self.num_layers} code grids, got {len(code_grids)}"
            )
        grids = [torch.as_tensor(np.asarray(g), dtype=torch.int64) for g in code_grids]
        lead = grids[0].shape
        bank = torch.zeros(int(np.prod(lead)) if lead else 1, dtype=torch.int64)
        out = []
        for i, g in enumerate(grids):
            if g.shape != lead:
                raise ValueError("code grids disagree in shape")
            idx = g.reshape(-1)
            if idx.numel() and (idx.min() < 0 or idx.max() >= self.branch):
                raise IndexError(f"code index out of range [0, {self.branch})")
            e = self.layers[i][bank, idx]
            out.append(e.reshape(*lead, self.dim))
            bank = bank * self.branch + idx
        return out

    def codeword_blob(self):
        """All codewords as one flat float32 array.

        Layer-major, codebook-major, codeword-major order; this is the
        checkpoint wire format for the tree.
        """
        parts = [p.detach().numpy().astype("<f4").reshape(-1) for p in self.layers]
        return np.concatenate(parts)

    def load_codeword_blob(self, blob):
        """Restore codewords from :meth:`codeword_blob` output."""
        blob = np.asarray(blob, dtype=np.float32).reshape(-1)
        expect = sum(p.numel() for p in self.layers)
        if blob.size != expect:
            raise ValueError(f"blob has {blob.size} floats, tree needs {expect}")
        off = 0
        with torch.no_grad():
            for p in self.layers:
                n = p.numel()
                p.copy_(torch.from_numpy(blob[off : off + n].reshape(p.shape).copy()))
                off += n


def build_tree(num_layers, branch, dim, seed=0, init_samples=None):
    """Construct a :class:`CodebookTree`; see the class for the layout."""
    return CodebookTree(num_layers, branch, dim, seed=seed, init_samples=init_samples)


def quantize_element(residual, codebook):
    """Nearest codeword for a single vector: (index, codeword).

    Ties break to the smallest index. ``codebook`` is an (M, dim) array or
    tensor; it must be non-empty and the residual finite.
    """
    r = np.asarray(residual, dtype=np.float32).reshape(1, -1)
    cb = np.asarray(
        codebook.detach().numpy() if isinstance(codebook, torch.Tensor) else codebook,
        dtype=np.float32,
    )
    if cb.ndim != 2 or cb.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (M, dim) array")
    if cb.shape[1] != r.shape[1]:
        raise ValueError(f"residual dim {r.shape[1]} != codebook dim {cb.shape[1]}")
    if not np.isfinite(r).all():
        raise ValueError("residual contains non-finite values")
    idx = int(kernels.assign_nearest(r, cb)[0])
    return idx, cb[idx].copy()


def seed_tree_from_samples(tree, samples, seed=0):
    """Warm-start every layer's codebooks from real encoder outputs.

    Walks the hierarchy greedily: layer i codewords are drawn from the
    residual vectors that actually reach layer i (per selected codebook,
    when that codebook has visitors). Books no visitor reaches keep their
    current initialization; dead-code reseeding handles them later.
    Mutates ``tree`` in place and returns it.
    """
    samples = np.ascontiguousarray(np.asarray(samples, dtype=np.float32))
    if samples.ndim != 2 or samples.shape[1] != tree.dim:
        raise ValueError(f"samples must be (K, {tree.dim})")
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    residual = samples.copy()
    bank = np.zeros(len(samples), dtype=np.int64)
    with torch.no_grad():
        for i in range(tree.num_layers):
            books = tree.branch**i
            for b in range(books):
                rows = residual[bank == b]
                if len(rows) == 0:
                    continue
                pick = rng.integers(0, len(rows), size=tree.branch)
                tree.layers[i][b] = torch.from_numpy(rows[pick].copy())
            codes = np.empty(len(samples), dtype=np.int64)
            kernels._impl.assign_step(
                residual, tree.layers[i].detach().numpy(), bank, codes
            )
            bank = bank * tree.branch + codes
    return tree


def codebook_usage(tree, code_grids):
    """Per-layer (num_books, branch) usage counts implied by index grids."""
    grids = [np.asarray(g, dtype=np.int64).reshape(-1) for g in code_grids]
    counts = []
    bank = np.zeros_like(grids[0])
    for i, idx in enumerate(grids):
        books = tree.branch**i
        flat = np.bincount(bank * tree.branch + idx, minlength=books * tree.branch)
        counts.append(flat.reshape(books, tree.branch))
        bank = bank * tree.branch + idx
    return counts


def reseed_dead_codewords(tree, usage_counts, donor_samples, seed=0):
    """Replace never-used codewords with randomly drawn donor vectors.

    ``usage_counts``: per layer, (num_books, branch) counts from the latest
    epoch (see :func:`codebook_usage`). ``donor_samples``: per layer, a
    (K, dim) pool of encoder-residual vectors feeding that layer. Raises if
    a layer has dead codewords but no donors. Deterministic given ``seed``;
    mutates ``tree`` in place and returns it.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for i, counts in enumerate(usage_counts):
            counts = np.asarray(counts).reshape(tree.branch**i, tree.branch)
            dead = np.argwhere(counts == 0)
            if dead.size == 0:
                continue
            donors = donor_samples[i] if i < len(donor_samples) else None
            donors = None if donors is None else np.asarray(donors, dtype=np.float32)
            if donors is None or donors.size == 0:
                raise ValueError(
                    f"layer {i + 1} has {len(dead)} dead codewords but no donor samples"
                )
            pick = rng.integers(0, donors.shape[0], size=len(dead))
            for (book, word), j in zip(dead, pick):
                tree.layers[i][book, word] = torch.from_numpy(donors[j].copy())
    return tree
