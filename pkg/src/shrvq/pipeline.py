"""End-to-end orchestration: encode, predict, decode, and both training modes.

The three inference steps: frames are encoded to per-layer code grids,
the per-layer predictors roll future code grids out autoregressively, and
the summed codeword embeddings of the predicted codes are decoded back to
frames. Disjoint training fits the frame codec first and the predictors
second, on codes from the frozen codec; joint training then fine-tunes the
decoder and predictors together (encoder and codebooks stay frozen).
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .autoencoder import AutoencoderConfig, FrameAutoencoder, hrvqvae_loss, straight_through
from .checkpoint import Checkpoint
from .codebook import (
    CodebookTree,
    codebook_usage,
    reseed_dead_codewords,
    seed_tree_from_samples,
)
from .predictor import CodePredictor, PredictorConfig, astpm_loss, generate_codes

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Model structure shared by all commands; echoed into checkpoints."""

    layers: int = 3
    branch: int = 8
    dim: int = 8
    in_channels: int = 1
    frame_h: int = 64
    frame_w: int = 64
    hidden: int = 48
    num_downsample: int = 2
    num_res_blocks: int = 2
    pred_embed: int = 48
    pred_heads: int = 4
    pred_blocks: int = 2
    pred_window: int = 2
    mask_mode: str = "full_past"
    condition_parent: bool = False

    def latent_hw(self):
        f = 2**self.num_downsample
        if self.frame_h % f or self.frame_w % f:
            raise ValueError(
                f"frame {self.frame_h}x{self.frame_w} not divisible by scale {f}"
            )
        return self.frame_h // f, self.frame_w // f


@dataclass
class TrainingConfig:
    learning_rate: float = 3e-4
    beta: float = 0.25
    lam: float = 0.11
    codec_epochs: int = 40
    predictor_epochs: int = 40
    joint_epochs: int = 4
    batch_size: int = 16
    seed: int = 0
    mode: str = "disjoint"
    max_horizon: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("disjoint", "joint"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class PredictionRequest:
    context_frames: list
    horizon: int
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.context_frames) < 1:
            raise ValueError("need at least one context frame")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


@dataclass
class CodeSequence:
    """Per-layer stacks of (T, H, W) code grids in raster convention."""

    codes: list
    branch: int
    context_length: int

    @property
    def num_layers(self):
        return len(self.codes)


def build_models(model_cfg: ModelConfig, seed=0):
    lh, lw = model_cfg.latent_hw()
    ae = FrameAutoencoder(AutoencoderConfig(
        in_channels=model_cfg.in_channels, hidden=model_cfg.hidden,
        num_downsample=model_cfg.num_downsample, latent_dim=model_cfg.dim,
        num_res_blocks=model_cfg.num_res_blocks, seed=seed,
    ))
    tree = CodebookTree(model_cfg.layers, model_cfg.branch, model_cfg.dim, seed=seed + 1)
    predictors = [
        CodePredictor(PredictorConfig(
            grid_h=lh, grid_w=lw, vocab=model_cfg.branch,
            embed_dim=model_cfg.pred_embed, num_heads=model_cfg.pred_heads,
            num_blocks=model_cfg.pred_blocks, window=model_cfg.pred_window,
            mask_mode=model_cfg.mask_mode,
            condition_parent=model_cfg.condition_parent and i > 0,
            seed=seed + 2 + i,
        ))
        for i in range(model_cfg.layers)
    ]
    return ae, tree, predictors


def new_checkpoint(model_cfg: ModelConfig, train_cfg: TrainingConfig):
    ae, tree, predictors = build_models(model_cfg, seed=train_cfg.seed)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
    return Checkpoint(ae, tree, predictors, config=config,
                      metadata={"seed": train_cfg.seed, "epoch": 0, "loss_history": {}})


def frames_to_array(frames):
    """List of (H, W, C) frames or an array -> (T, H, W, C) float32."""
    a = np.asarray(frames, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError("frames must be (T, H, W, C)")
    return a


def encode_sequence(ckpt: Checkpoint, frames):
    """Frames 1..T -> per-layer (T, H, W) code grids (step 1)."""
    a = frames_to_array(frames)
    with torch.no_grad():
        z = ckpt.autoencoder.encode(torch.from_numpy(a))
        quant = ckpt.tree.quantize(z)
    codes = [g.numpy().astype(np.int64) for g in quant.code_grids]
    return CodeSequence(codes=codes, branch=ckpt.tree.branch, context_length=a.shape[0])


def decode_codes(ckpt: Checkpoint, codes):
    """Per-layer (S, H, W) code grids -> (S, H, W, C) frames (step 3)."""
    with torch.no_grad():
        e_c = ckpt.tree.lookup([torch.as_tensor(np.asarray(c)) for c in codes])
        frames = ckpt.autoencoder.decode(e_c)
    return frames.numpy()


def reconstruct_frames(ckpt: Checkpoint, frames):
    """Codec round trip (no prediction): decode(lookup(encode(frames)))."""
    return decode_codes(ckpt, encode_sequence(ckpt, frames).codes)


def predict_frames(ckpt: Checkpoint, request: PredictionRequest):
    """Steps 1-3 for a context window: returns S predicted frames.

    Only the provided context frames are read; generation is free-running
    per layer (coarse-to-fine when parent conditioning is enabled).
    """
    max_horizon = ckpt.config.get("train", {}).get("max_horizon", 64)
    if request.horizon > max_horizon:
        raise ValueError(
            f"horizon {request.horizon} exceeds configured maximum {max_horizon}"
        )
    seq = encode_sequence(ckpt, request.context_frames)
    future = []
    parent_frames = None
    for layer, model in enumerate(ckpt.predictors):
        generated = generate_codes(
            model, seq.codes[layer], request.horizon, mode=request.mode,
            temperature=request.temperature, seed=request.seed + layer,
            parent_frames=parent_frames if model.config.condition_parent else None,
        )
        generated = generated.numpy().astype(np.int64)
        future.append(generated)
        parent_frames = generated
    frames = decode_codes(ckpt, future)
    return list(frames)


def _collect_donors(quant, cap=512):
    """Per-layer residual-input samples for dead-codeword reseeding."""
    donors = []
    for i in range(quant.num_layers):
        src = quant.latent if i == 0 else quant.residual_grids[i - 1]
        flat = src.detach().reshape(-1, src.shape[-1]).numpy()
        donors.append(flat[:cap].copy())
    return donors


def train_hrvqvae(dataset, model_cfg, train_cfg, ckpt=None):
    """Phase 1: fit encoder, decoder and codebook tree on single frames."""
    if not dataset:
        raise ValueError("dataset is empty")
    if ckpt is None:
        ckpt = new_checkpoint(model_cfg, train_cfg)
    frames = np.concatenate([frames_to_array(s) for s in dataset])
    x_all = torch.from_numpy(frames)
    n = ckpt.tree.num_layers

    # codebooks start from actual encoder outputs: random small-variance
    # codewords leave every assignment arbitrary and stall training
    with torch.no_grad():
        warm = ckpt.autoencoder.encode(x_all[: min(64, len(x_all))])
    seed_tree_from_samples(
        ckpt.tree, warm.reshape(-1, ckpt.tree.dim).numpy(), seed=train_cfg.seed
    )

    betas = [train_cfg.beta] * (n + 1)
    params = list(ckpt.autoencoder.parameters()) + list(ckpt.tree.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    history = {"total": [], "recon": []}
    for epoch in range(train_cfg.codec_epochs):
        order = rng.permutation(len(x_all))
        totals, recons = [], []
        usage = None
        donors = None
        for start in range(0, len(order), train_cfg.batch_size):
            batch = x_all[order[start:start + train_cfg.batch_size]]
            z = ckpt.autoencoder.encode(batch)
            quant = ckpt.tree.quantize(z)
            x_hat = ckpt.autoencoder.decode(straight_through(z, quant.combined))
            loss = hrvqvae_loss(batch, x_hat, quant, betas)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            totals.append(loss.total.item())
            recons.append(loss.reconstruction.item())
            counts = codebook_usage(ckpt.tree, [g.numpy() for g in quant.code_grids])
            if usage is None:
                usage = counts
            else:
                usage = [u + c for u, c in zip(usage, counts)]
            if donors is None:
                donors = _collect_donors(quant)
        reseed_dead_codewords(ckpt.tree, usage, donors, seed=train_cfg.seed + epoch)
        history["total"].append(float(np.mean(totals)))
        history["recon"].append(float(np.mean(recons)))
        logger.info("codec epoch %d loss %.6f recon %.6f",
                    epoch + 1, history["total"][-1], history["recon"][-1])
    ckpt.metadata.setdefault("loss_history", {})["codec"] = history
    ckpt.metadata["epoch"] = train_cfg.codec_epochs
    return ckpt


def _dataset_codes(ckpt, dataset):
    """Codes for every sequence, cached under SHRVQ_CACHE when set."""
    cache_dir = os.environ.get("SHRVQ_CACHE", "")
    key = None
    if cache_dir:
        h = hashlib.sha256()
        h.update(ckpt_io.tree_checksum(ckpt.tree).encode())
        h.update(ckpt_io.module_checksum(ckpt.autoencoder).encode())
        for seq in dataset:
            h.update(np.ascontiguousarray(frames_to_array(seq)).tobytes())
        key = h.hexdigest()[:32]
        path = os.path.join(cache_dir, f"codes_{key}.shrvq")
        if os.path.exists(path):
            logger.info("code cache hit: %s", path)
            codes, meta = ckpt_io.load_codes(path)
            per_seq = []
            lengths = [frames_to_array(s).shape[0] for s in dataset]
            off = 0
            for L in lengths:
                per_seq.append([c[off:off + L] for c in codes])
                off += L
            return per_seq
    per_seq = [encode_sequence(ckpt, seq).codes for seq in dataset]
    if cache_dir and key is not None:
        os.makedirs(cache_dir, exist_ok=True)
        stacked = [
            np.concatenate([codes[i] for codes in per_seq])
            for i in range(ckpt.tree.num_layers)
        ]
        ckpt_io.save_codes(os.path.join(cache_dir, f"codes_{key}.shrvq"),
                           stacked, ckpt.tree.branch)
    return per_seq


def train_astpm(ckpt, dataset, train_cfg):
    """Phase 2: fit per-layer predictors on codes from the frozen codec."""
    if not dataset:
        raise ValueError("dataset is empty")
    tree_before = ckpt_io.tree_checksum(ckpt.tree)
    seq_codes = _dataset_codes(ckpt, dataset)
    assert ckpt_io.tree_checksum(ckpt.tree) == tree_before
    window = ckpt.predictors[0].config.window

    # (sequence, target t) samples bucketed by effective context length
    samples = []
    for si, codes in enumerate(seq_codes):
        L = codes[0].shape[0]
        for t in range(1, L):
            samples.append((si, t, min(t, window)))
    if not samples:
        raise ValueError("no trainable (context, target) pairs in dataset")

    history = []
    for layer, model in enumerate(ckpt.predictors):
        opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
        rng = np.random.default_rng(train_cfg.seed + 1000 + layer)
        layer_hist = []
        for epoch in range(train_cfg.predictor_epochs):
            order = rng.permutation(len(samples))
            buckets = {}
            for idx in order:
                si, t, F = samples[idx]
                buckets.setdefault(F, []).append((si, t))
            losses = []
            for F in sorted(buckets):
                group = buckets[F]
                for start in range(0, len(group), train_cfg.batch_size):
                    chunk = group[start:start + train_cfg.batch_size]
                    hist = torch.stack([
                        torch.from_numpy(seq_codes[si][layer][t - F:t])
                        for si, t in chunk
                    ])
                    target = torch.stack([
                        torch.from_numpy(seq_codes[si][layer][t]) for si, t in chunk
                    ])
                    parent = None
                    if model.config.condition_parent:
                        parent = torch.stack([
                            torch.from_numpy(seq_codes[si][layer - 1][t])
                            for si, t in chunk
                        ])
                    logits = model(hist, partial=target, parent=parent)
                    loss = astpm_loss(logits, target)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(loss.item())
            layer_hist.append(float(np.mean(losses)))
            logger.info("predictor layer %d epoch %d loss %.6f",
                        layer + 1, epoch + 1, layer_hist[-1])
        history.append(layer_hist)
    ckpt.metadata.setdefault("loss_history", {})["predictor"] = history
    return ckpt


def train_disjoint(dataset, model_cfg, train_cfg):
    """Both phases: codec on frames, then predictors on extracted codes."""
    ckpt = train_hrvqvae(dataset, model_cfg, train_cfg)
    return train_astpm(ckpt, dataset, train_cfg)


def joint_objective(l_p, recon, lam):
    """The joint loss: prediction cross-entropy plus lam * reconstruction."""
    return l_p + lam * recon


def train_joint(dataset, train_cfg, ckpt, context_T, horizon):
    """Fine-tune decoder and predictors on predicted future codes.

    The encoder and codebook tree stay frozen. For every future step the
    predictor runs with teacher-forced history and its greedy per-step
    decode supplies the codes whose decoded frame is scored against the
    true frame. The cross-entropy term against the true future codes
    updates the predictors; the lam-weighted reconstruction term updates
    the decoder only (the predicted indices are discrete). With lam = 0
    the decoder receives no gradient and the objective reduces to the
    phase-2 prediction loss on the future span.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if train_cfg.lam < 0:
        raise ValueError("lam must be >= 0")
    for p in ckpt.autoencoder.encoder.parameters():
        p.requires_grad_(False)
    for p in ckpt.tree.parameters():
        p.requires_grad_(False)
    params = list(ckpt.autoencoder.decoder.parameters())
    for m in ckpt.predictors:
        params += list(m.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed + 7)
    arrays = [frames_to_array(s) for s in dataset]
    history = []
    for epoch in range(train_cfg.joint_epochs):
        order = rng.permutation(len(arrays))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = np.stack([arrays[i][: context_T + horizon] for i in idx])
            with torch.no_grad():
                full = encode_sequence(ckpt, batch.reshape(-1, *batch.shape[2:]))
            B = len(idx)
            T_full = context_T + horizon
            gt_codes = [
                torch.from_numpy(c.reshape(B, T_full, *c.shape[1:]).copy())
                for c in full.codes
            ]

            ce_terms = []
            recon_terms = []
            gt_frames = torch.from_numpy(batch[:, context_T:])
            for s in range(horizon):
                t = context_T + s
                step_codes = []
                parent = None
                for layer, model in enumerate(ckpt.predictors):
                    target = gt_codes[layer][:, t]
                    logits = model(
                        gt_codes[layer][:, :t], partial=target,
                        parent=parent if model.config.condition_parent else None,
                    )
                    ce_terms.append(astpm_loss(logits, target))
                    pred = logits.argmax(dim=-1).detach()
                    step_codes.append(pred)
                    parent = pred
                e_c = ckpt.tree.lookup(step_codes)
                x_hat = ckpt.autoencoder.decode(e_c)
                recon_terms.append(((gt_frames[:, s] - x_hat) ** 2).mean())
            l_p = torch.stack(ce_terms).mean()
            recon = torch.stack(recon_terms).mean()
            loss = joint_objective(l_p, recon, train_cfg.lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        logger.info("joint epoch %d loss %.6f", epoch + 1, history[-1])
    ckpt.metadata.setdefault("loss_history", {})["joint"] = history
    for p in ckpt.autoencoder.encoder.parameters():
        p.requires_grad_(True)
    for p in ckpt.tree.parameters():
        p.requires_grad_(True)
    return ckpt
