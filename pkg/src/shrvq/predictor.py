"""Autoregressive spatiotemporal prediction of discrete code grids.

One model instance predicts the code grid of the next frame for a single
hierarchy layer. Frames are linearized in raster order (left-to-right,
top-to-bottom, stored zero-based); the frame being generated sees only its
own raster prefix, while past frames are fully visible by default
(``mask_mode="full_past"``). The alternative ``"strict_past"`` mode also
restricts past frames to the raster prefix.

Causality is enforced structurally: masked 2D convolutions within the
generated frame, a causal convolution along the frame axis, and masked
multi-head attention over all (frame, position) voxels. Masked weights are
exactly zero, so logits at a position are bit-identical under any change
of the inputs it must not see.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class MaskSpec:
    """0/1 visibility masks: spatial (P, P) within the generated frame,
    temporal (T+1, T+1) across frames (row = querying frame, col = key
    frame; index T is the frame being generated)."""

    spatial: np.ndarray
    temporal: np.ndarray
    mode: str = "full_past"

    def combined(self):
        """Full (L, L) boolean attention mask over (frame, position) voxels."""
        P = self.spatial.shape[0]
        T1 = self.temporal.shape[0]
        T = T1 - 1
        allowed = np.zeros((T1 * P, T1 * P), dtype=bool)
        spatial = self.spatial.astype(bool)
        prefix_leq = spatial | np.eye(P, dtype=bool)  # j <= k
        for a in range(T1):
            for b in range(T1):
                block = allowed[a * P:(a + 1) * P, b * P:(b + 1) * P]
                if a == T and b == T:
                    block[:] = spatial
                elif a == T:
                    if self.temporal[T, b]:
                        block[:] = spatial if self.mode == "strict_past" else True
                else:
                    if self.temporal[a, b]:
                        block[:] = prefix_leq if self.mode == "strict_past" else True
        return allowed


def causal_mask(H, W, context_T, mode="full_past"):
    """Masks for predicting one frame from ``context_T`` past frames.

    Spatial rule: raster position k sees positions j < k of the generated
    frame. Temporal rule: the generated frame sees every past frame; past
    frames see themselves and everything earlier.
    """
    if H < 1 or W < 1 or context_T < 1:
        raise ValueError("H, W and context_T must be positive")
    if mode not in ("full_past", "strict_past"):
        raise ValueError(f"unknown mask mode {mode!r}")
    P = H * W
    spatial = np.tril(np.ones((P, P), dtype=np.uint8), k=-1)
    temporal = np.tril(np.ones((context_T + 1, context_T + 1), dtype=np.uint8))
    temporal[context_T, context_T] = 0  # generated frame: spatial rule only
    return MaskSpec(spatial=spatial, temporal=temporal, mode=mode)


@dataclass
class PredictorConfig:
    """Construction parameters for one per-layer code predictor."""

    grid_h: int = 32
    grid_w: int = 32
    vocab: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    window: int = 2
    mask_mode: str = "full_past"
    condition_parent: bool = False
    seed: int = 0


def _raster_mask(kernel_size, include_center):
    """PixelCNN-style (k, k) tap mask: above rows plus left of center."""
    k = kernel_size
    m = torch.zeros(k, k)
    m[: k // 2, :] = 1
    m[k // 2, : k // 2] = 1
    if include_center:
        m[k // 2, k // 2] = 1
    return m


class MaskedConv2d(nn.Conv2d):
    """2D convolution with raster-causal taps ('A' excludes the center)."""

    def __init__(self, in_ch, out_ch, kernel_size, mask_type):
        super().__init__(in_ch, out_ch, kernel_size, padding=kernel_size // 2)
        mask = _raster_mask(kernel_size, include_center=(mask_type == "B"))
        self.register_buffer("mask", mask.expand_as(self.weight).clone())

    def forward(self, x):
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class TemporalCausalConv(nn.Module):
    """Mixes each voxel with the same position one frame earlier.

    y[f, p] = W0 x[f, p] + W1 x[f-1, p] (zero history pad). In strict mask
    mode the cross-frame term is dropped for the generated frame, whose
    same-position past voxel is outside its raster prefix.
    """

    def __init__(self, dim, strict):
        super().__init__()
        self.now = nn.Linear(dim, dim)
        self.prev = nn.Linear(dim, dim, bias=False)
        self.strict = strict

    def forward(self, x):  # (B, F+1, P, E)
        shifted = torch.cat([torch.zeros_like(x[:, :1]), x[:, :-1]], dim=1)
        y = self.now(x)
        cross = self.prev(shifted)
        if self.strict:
            cross = torch.cat([cross[:, :-1], torch.zeros_like(cross[:, -1:])], dim=1)
        return y + cross


class FrameConvs(nn.Module):
    """Per-frame spatial mixing: full conv on past frames unless strict,
    raster-masked conv on the generated frame."""

    def __init__(self, dim, strict):
        super().__init__()
        if strict:
            self.past = MaskedConv2d(dim, dim, 3, "B")
        else:
            self.past = nn.Conv2d(dim, dim, 3, padding=1)
        self.cur = MaskedConv2d(dim, dim, 3, "B")

    def forward(self, x, H, W):  # (B, F+1, P, E)
        B, F1, P, E = x.shape
        past = x[:, :-1].permute(0, 1, 3, 2).reshape(B * (F1 - 1), E, H, W)
        cur = x[:, -1].permute(0, 2, 1).reshape(B, E, H, W)
        past = self.past(past).reshape(B, F1 - 1, E, P).permute(0, 1, 3, 2)
        cur = self.cur(cur).reshape(B, 1, E, P).permute(0, 1, 3, 2)
        return torch.cat([past, cur], dim=1)


class VoxelAttention(nn.Module):
    """Multi-head attention over all (frame, position) voxels."""

    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask):  # x (B, L, E); mask (L, L) bool
        B, L, E = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(B, L, h, E // h).transpose(1, 2)
        k = k.reshape(B, L, h, E // h).transpose(1, 2)
        v = v.reshape(B, L, h, E // h).transpose(1, 2)
        has_key = mask.any(dim=-1)
        safe = mask.clone()
        if not has_key.all():
            idx = (~has_key).nonzero(as_tuple=True)[0]
            safe[idx, idx] = True
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=safe)
        y = y.transpose(1, 2).reshape(B, L, E)
        y = y * has_key.reshape(1, L, 1)
        return self.out(y)


class PredictorBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        strict = cfg.mask_mode == "strict_past"
        E = cfg.embed_dim
        self.ln_t = nn.LayerNorm(E)
        self.temporal = TemporalCausalConv(E, strict)
        self.ln_s = nn.LayerNorm(E)
        self.spatial = FrameConvs(E, strict)
        self.ln_a = nn.LayerNorm(E)
        self.attn = VoxelAttention(E, cfg.num_heads)
        self.ln_m = nn.LayerNorm(E)
        self.mlp = nn.Sequential(nn.Linear(E, 2 * E), nn.GELU(), nn.Linear(2 * E, E))

    def forward(self, x, mask, H, W):
        x = x + self.temporal(self.ln_t(x))
        x = x + self.spatial(self.ln_s(x), H, W)
        B, F1, P, E = x.shape
        flat = self.attn(self.ln_a(x).reshape(B, F1 * P, E), mask)
        x = x + flat.reshape(B, F1, P, E)
        x = x + self.mlp(self.ln_m(x))
        return x


class CodePredictor(nn.Module):
    """Next-frame code-grid model for one hierarchy layer."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        c = config
        if c.embed_dim % c.num_heads:
            raise ValueError(
                f"num_heads={c.num_heads} must divide embed_dim={c.embed_dim}"
            )
        if c.window < 1 or c.vocab < 2 or c.grid_h < 1 or c.grid_w < 1:
            raise ValueError("invalid predictor configuration")
        if c.mask_mode not in ("full_past", "strict_past"):
            raise ValueError(f"unknown mask mode {c.mask_mode!r}")
        self.config = c
        P = c.grid_h * c.grid_w
        strict = c.mask_mode == "strict_past"
        with torch.random.fork_rng():
            torch.manual_seed(c.seed)
            self.code_emb = nn.Embedding(c.vocab, c.embed_dim)
            self.pos_emb = nn.Parameter(torch.randn(P, c.embed_dim) * 0.02)
            self.time_emb = nn.Parameter(torch.randn(c.window + 1, c.embed_dim) * 0.02)
            if strict:
                self.embed_conv_past = MaskedConv2d(c.embed_dim, c.embed_dim, 3, "B")
            else:
                self.embed_conv_past = nn.Conv2d(c.embed_dim, c.embed_dim, 3, padding=1)
            self.embed_conv_cur = MaskedConv2d(c.embed_dim, c.embed_dim, 3, "A")
            if c.condition_parent:
                self.parent_emb = nn.Embedding(c.vocab, c.embed_dim)
            self.blocks = nn.ModuleList(
                PredictorBlock(c) for _ in range(c.num_blocks)
            )
            self.ln_f = nn.LayerNorm(c.embed_dim)
            self.head = nn.Linear(c.embed_dim, c.vocab)
        self._mask_cache = {}

    def _combined_mask(self, frames):
        key = frames
        if key not in self._mask_cache:
            spec = causal_mask(
                self.config.grid_h, self.config.grid_w, frames, self.config.mask_mode
            )
            self._mask_cache[key] = torch.from_numpy(spec.combined())
        return self._mask_cache[key]

    def _check_codes(self, codes, name):
        if codes.min() < 0 or codes.max() >= self.config.vocab:
            raise ValueError(f"{name} codes out of range [0, {self.config.vocab})")

    def forward(self, history, partial=None, t=None, parent=None):
        """Logits over next-frame codes at every raster position.

        ``history``: (T, H, W) or (B, T, H, W) integer codes for frames
        1..T. ``t`` restricts the usable history to frames 1..t (frames
        beyond t are ignored); the model then predicts frame t+1 using at
        most ``window`` trailing frames. ``partial`` carries already
        generated codes of the predicted frame; entries at raster positions
        >= k never influence the logits at k. Returns (..., H, W, vocab).
        """
        c = self.config
        if not torch.is_tensor(history):
            history = torch.as_tensor(np.asarray(history))
        history = history.long()
        squeeze = history.ndim == 3
        if squeeze:
            history = history.unsqueeze(0)
        if history.ndim != 4:
            raise ValueError("history must be (T, H, W) or (B, T, H, W)")
        B, T, H, W = history.shape
        if (H, W) != (c.grid_h, c.grid_w):
            raise ValueError(
                f"history grid {(H, W)} does not match configured "
                f"{(c.grid_h, c.grid_w)}"
            )
        if T < 1:
            raise ValueError("history must contain at least one frame")
        if t is None:
            t = T
        if not 1 <= t <= T:
            raise ValueError(f"t={t} outside history length {T}")
        ctx = history[:, max(0, t - c.window):t]
        self._check_codes(ctx, "history")

        if partial is None:
            partial = torch.zeros(B, H, W, dtype=torch.long)
        elif not torch.is_tensor(partial):
            partial = torch.as_tensor(np.asarray(partial)).long()
        else:
            partial = partial.long()
        if partial.ndim == 2:
            partial = partial.unsqueeze(0).expand(B, H, W)
        self._check_codes(partial, "partial")

        Fp = ctx.shape[1]
        P = H * W
        E = c.embed_dim

        past = self.code_emb(ctx.reshape(B * Fp, P)).reshape(B * Fp, H, W, E)
        past = self.embed_conv_past(past.permute(0, 3, 1, 2))
        past = past.permute(0, 2, 3, 1).reshape(B, Fp, P, E)
        # distance-to-prediction time index: oldest kept frame has d=Fp
        past = past + self.pos_emb + self.time_emb[torch.arange(Fp, 0, -1)].unsqueeze(1)

        cur = self.code_emb(partial.reshape(B, P)).reshape(B, H, W, E)
        cur = self.embed_conv_cur(cur.permute(0, 3, 1, 2))
        cur = cur.permute(0, 2, 3, 1).reshape(B, 1, P, E)
        cur = cur + self.pos_emb + self.time_emb[0]
        if c.condition_parent:
            if parent is None:
                raise ValueError("model conditions on parent codes but none given")
            if not torch.is_tensor(parent):
                parent = torch.as_tensor(np.asarray(parent)).long()
            parent = parent.long()
            if parent.ndim == 2:
                parent = parent.unsqueeze(0).expand(B, H, W)
            self._check_codes(parent, "parent")
            cur = cur + self.parent_emb(parent.reshape(B, 1, P))

        x = torch.cat([past, cur], dim=1)
        mask = self._combined_mask(Fp)
        for block in self.blocks:
            x = block(x, mask, H, W)
        logits = self.head(self.ln_f(x[:, -1]))
        logits = logits.reshape(B, H, W, c.vocab)
        return logits.squeeze(0) if squeeze else logits


def build_astpm(config: PredictorConfig):
    """Deterministic construction of a :class:`CodePredictor`."""
    return CodePredictor(config)


def astpm_loss(logits, target):
    """Cross-entropy between predicted logits and a target code grid.

    Mean over the H*W raster positions (and batch if present):
    -(1/(H*W)) sum_j log softmax(logits)_j[target_j].
    """
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(np.asarray(logits), dtype=torch.float32)
    if not torch.is_tensor(target):
        target = torch.as_tensor(np.asarray(target))
    target = target.long()
    M = logits.shape[-1]
    if logits.shape[:-1] != target.shape:
        raise ValueError(
            f"logits grid {tuple(logits.shape[:-1])} does not match "
            f"target grid {tuple(target.shape)}"
        )
    if target.numel() and (target.min() < 0 or target.max() >= M):
        raise ValueError(f"target codes out of range [0, {M})")
    return F.cross_entropy(logits.reshape(-1, M), target.reshape(-1))


def generate_codes(model, context, horizon, mode="greedy", temperature=1.0,
                   seed=0, parent_frames=None):
    """Free-running raster-order generation of ``horizon`` future frames.

    Frames are produced one at a time; within a frame, positions are
    filled in raster order from the model's logits (argmax for "greedy",
    temperature sampling for "sample"), and each completed frame joins the
    context for the next step. Deterministic for greedy and, given
    ``seed``, for sampling. Returns (S, H, W) or (B, S, H, W) codes.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not torch.is_tensor(context):
        context = torch.as_tensor(np.asarray(context))
    context = context.long()
    squeeze = context.ndim == 3
    if squeeze:
        context = context.unsqueeze(0)
    B, _, H, W = context.shape
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for s in range(horizon):
            parent = None
            if parent_frames is not None:
                parent = parent_frames[s] if squeeze else parent_frames[:, s]
            frame = torch.zeros(B, H, W, dtype=torch.long)
            for k in range(H * W):
                h, w = divmod(k, W)
                logits = model(context, partial=frame, parent=parent)[:, h, w]
                if mode == "greedy":
                    choice = logits.argmax(dim=-1)
                else:
                    probs = F.softmax(logits / temperature, dim=-1)
                    choice = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
                frame[:, h, w] = choice
            context = torch.cat([context, frame.unsqueeze(1)], dim=1)
            out.append(frame)
    result = torch.stack(out, dim=1)
    return result.squeeze(0) if squeeze else result
